//! Forward and backward kernels on raw row-major buffers.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Range of output rows (or columns) for which `out + offset` stays in `0..len`.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Stride-1 cross-correlation with zero padding of `ksize / 2` on each side.
pub fn conv2d_forward<F: Real>(
    x: &[F],
    xd: Dims4,
    kernel: &[F],
    filters: usize,
    ksize: usize,
    bias: Option<&[F]>,
) -> Vec<F> {
    let Dims4 { b, c, h, w } = xd;
    let plane = xd.plane();
    let pad = (ksize / 2) as isize;
    let mut y = vec![F::zero(); b * filters * plane];
    for bi in 0..b {
        for fo in 0..filters {
            let out = &mut y[(bi * filters + fo) * plane..][..plane];
            if let Some(bias) = bias {
                out.iter_mut().for_each(|v| *v = bias[fo]);
            }
            for ci in 0..c {
                let xin = &x[(bi * c + ci) * plane..][..plane];
                for ki in 0..ksize {
                    let di = ki as isize - pad;
                    let (h0, h1) = valid_range(h, di);
                    for kj in 0..ksize {
                        let dj = kj as isize - pad;
                        let (w0, w1) = valid_range(w, dj);
                        let wv = kernel[((fo * c + ci) * ksize + ki) * ksize + kj];
                        for oh in h0..h1 {
                            let ih = (oh as isize + di) as usize;
                            let src = &xin[ih * w + (w0 as isize + dj) as usize..][..w1 - w0];
                            let dst = &mut out[oh * w + w0..][..w1 - w0];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward<F: Real>(
    x: &[F],
    xd: Dims4,
    kernel: &[F],
    filters: usize,
    ksize: usize,
    gy: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let Dims4 { b, c, h, w } = xd;
    let plane = xd.plane();
    let pad = (ksize / 2) as isize;
    let mut gx = vec![F::zero(); x.len()];
    let mut gk = vec![F::zero(); kernel.len()];
    let mut gb = vec![F::zero(); filters];
    for bi in 0..b {
        for fo in 0..filters {
            let gout = &gy[(bi * filters + fo) * plane..][..plane];
            gb[fo] += gout.iter().copied().sum::<F>();
            for ci in 0..c {
                let xin = &x[(bi * c + ci) * plane..][..plane];
                let gin = &mut gx[(bi * c + ci) * plane..][..plane];
                for ki in 0..ksize {
                    let di = ki as isize - pad;
                    let (h0, h1) = valid_range(h, di);
                    for kj in 0..ksize {
                        let dj = kj as isize - pad;
                        let (w0, w1) = valid_range(w, dj);
                        let kidx = ((fo * c + ci) * ksize + ki) * ksize + kj;
                        let wv = kernel[kidx];
                        let mut acc = F::zero();
                        for oh in h0..h1 {
                            let ih = (oh as isize + di) as usize;
                            let off = ih * w + (w0 as isize + dj) as usize;
                            let g = &gout[oh * w + w0..][..w1 - w0];
                            let xs = &xin[off..][..w1 - w0];
                            for (&gv, &xv) in g.iter().zip(xs) {
                                acc += gv * xv;
                            }
                            let gi = &mut gin[off..][..w1 - w0];
                            for (d, &gv) in gi.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Cached values from a batch-norm forward pass needed by its backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<F> {
    pub x_hat: Vec<F>,
    pub inv_std: Vec<F>,
    pub train: bool,
}

/// Per-channel moments over `(B, H, W)`: mean and biased variance.
pub fn channel_moments<F: Real>(x: &[F], d: Dims4) -> (Vec<F>, Vec<F>) {
    let plane = d.plane();
    let n = F::of((d.b * plane) as f64);
    let mut mean = vec![F::zero(); d.c];
    let mut var = vec![F::zero(); d.c];
    for ch in 0..d.c {
        let mut s = F::zero();
        for bi in 0..d.b {
            s += x[(bi * d.c + ch) * plane..][..plane].iter().copied().sum::<F>();
        }
        let m = s / n;
        let mut v = F::zero();
        for bi in 0..d.b {
            for &xv in &x[(bi * d.c + ch) * plane..][..plane] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}

pub fn batch_norm_apply<F: Real>(
    x: &[F],
    d: Dims4,
    mean: &[F],
    var: &[F],
    gamma: &[F],
    beta: &[F],
    eps: F,
    train: bool,
) -> (Vec<F>, BnCache<F>) {
    let plane = d.plane();
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![F::zero(); x.len()];
    let mut y = vec![F::zero(); x.len()];
    for bi in 0..d.b {
        for ch in 0..d.c {
            let off = (bi * d.c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        y,
        BnCache {
            x_hat,
            inv_std,
            train,
        },
    )
}

pub fn batch_norm_backward<F: Real>(
    gy: &[F],
    d: Dims4,
    gamma: &[F],
    cache: &BnCache<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let plane = d.plane();
    let n = F::of((d.b * plane) as f64);
    let mut gx = vec![F::zero(); gy.len()];
    let mut ggamma = vec![F::zero(); d.c];
    let mut gbeta = vec![F::zero(); d.c];
    for ch in 0..d.c {
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for bi in 0..d.b {
            let off = (bi * d.c + ch) * plane;
            for i in off..off + plane {
                sum_g += gy[i];
                sum_gx += gy[i] * cache.x_hat[i];
            }
        }
        ggamma[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let scale = gamma[ch] * cache.inv_std[ch];
        for bi in 0..d.b {
            let off = (bi * d.c + ch) * plane;
            for i in off..off + plane {
                gx[i] = if cache.train {
                    scale * (gy[i] - sum_g / n - cache.x_hat[i] * sum_gx / n)
                } else {
                    scale * gy[i]
                };
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// 2x2 average pooling with stride 2; partial edge windows average only
/// the elements they contain.
pub fn avg_pool_2x2_forward<F: Real>(x: &[F], d: Dims4) -> (Vec<F>, usize, usize) {
    let oh = d.h.div_ceil(2);
    let ow = d.w.div_ceil(2);
    let mut y = vec![F::zero(); d.b * d.c * oh * ow];
    for bc in 0..d.b * d.c {
        let xin = &x[bc * d.plane()..][..d.plane()];
        let out = &mut y[bc * oh * ow..][..oh * ow];
        for i in 0..oh {
            let rows = (2 * i)..(2 * i + 2).min(d.h);
            for j in 0..ow {
                let cols = (2 * j)..(2 * j + 2).min(d.w);
                let count = rows.len() * cols.len();
                let mut s = F::zero();
                for r in rows.clone() {
                    for col in cols.clone() {
                        s += xin[r * d.w + col];
                    }
                }
                out[i * ow + j] = s / F::of(count as f64);
            }
        }
    }
    (y, oh, ow)
}

pub fn avg_pool_2x2_backward<F: Real>(gy: &[F], d: Dims4) -> Vec<F> {
    let oh = d.h.div_ceil(2);
    let ow = d.w.div_ceil(2);
    let mut gx = vec![F::zero(); d.b * d.c * d.plane()];
    for bc in 0..d.b * d.c {
        let g = &gy[bc * oh * ow..][..oh * ow];
        let gin = &mut gx[bc * d.plane()..][..d.plane()];
        for i in 0..oh {
            let rows = (2 * i)..(2 * i + 2).min(d.h);
            for j in 0..ow {
                let cols = (2 * j)..(2 * j + 2).min(d.w);
                let share = g[i * ow + j] / F::of((rows.len() * cols.len()) as f64);
                for r in rows.clone() {
                    for col in cols.clone() {
                        gin[r * d.w + col] += share;
                    }
                }
            }
        }
    }
    gx
}

/// `x[rows, inner] @ w[inner, cols] + bias`.
pub fn affine_forward<F: Real>(
    x: &[F],
    rows: usize,
    inner: usize,
    w: &[F],
    cols: usize,
    bias: &[F],
) -> Vec<F> {
    let mut y = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let out = &mut y[r * cols..][..cols];
        out.copy_from_slice(bias);
        for i in 0..inner {
            let xv = x[r * inner + i];
            for (o, &wv) in out.iter_mut().zip(&w[i * cols..][..cols]) {
                *o += xv * wv;
            }
        }
    }
    y
}

pub fn affine_backward<F: Real>(
    x: &[F],
    rows: usize,
    inner: usize,
    w: &[F],
    cols: usize,
    gy: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut gx = vec![F::zero(); rows * inner];
    let mut gw = vec![F::zero(); inner * cols];
    let mut gb = vec![F::zero(); cols];
    for r in 0..rows {
        let g = &gy[r * cols..][..cols];
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b += gv;
        }
        for i in 0..inner {
            let wrow = &w[i * cols..][..cols];
            gx[r * inner + i] = wrow.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let xv = x[r * inner + i];
            for (d, &gv) in gw[i * cols..][..cols].iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    (gx, gw, gb)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<F: Real>(logits: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut p = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..][..cols];
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let out = &mut p[r * cols..][..cols];
        let mut z = F::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
    }
    p
}

/// Summed cross-entropy `-Σ log softmax(logits)[target]` via log-sum-exp.
pub fn cross_entropy_sum<F: Real>(logits: &[F], cols: usize, targets: &[usize]) -> F {
    let mut loss = F::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * cols..][..cols];
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
        loss += lse - row[t];
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_scalar_multiply_add() {
        let d = Dims4 { b: 1, c: 1, h: 1, w: 1 };
        let y = conv2d_forward(&[2.0f64], d, &[3.0], 1, 1, Some(&[1.0]));
        assert_eq!(y, vec![7.0]);
    }

    #[test]
    fn conv_3x3_matches_direct_definition() {
        let d = Dims4 { b: 1, c: 2, h: 3, w: 4 };
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..18).map(|i| (i as f64 * 0.71).cos()).collect();
        let y = conv2d_forward(&x, d, &k, 1, 3, None);
        for oh in 0..3 {
            for ow in 0..4 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let ih = oh as isize + ki as isize - 1;
                            let iw = ow as isize + kj as isize - 1;
                            if ih < 0 || iw < 0 || ih >= 3 || iw >= 4 {
                                continue;
                            }
                            s += k[c * 9 + ki * 3 + kj] * x[c * 12 + ih as usize * 4 + iw as usize];
                        }
                    }
                }
                assert!((y[oh * 4 + ow] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_edges_average_actual_window() {
        let d = Dims4 { b: 1, c: 1, h: 3, w: 3 };
        let (y, oh, ow) = avg_pool_2x2_forward(&[1.0f64; 9], d);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(y, vec![1.0; 4]);
        let g = avg_pool_2x2_backward(&[1.0f64; 4], d);
        assert_eq!(g, vec![0.25, 0.25, 0.5, 0.25, 0.25, 0.5, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn cross_entropy_is_stable() {
        let l = cross_entropy_sum(&[1000.0f64, 0.0], 2, &[0]);
        assert!(l.abs() < 1e-12);
        let l = cross_entropy_sum(&[1000.0f32, 0.0], 2, &[1]);
        assert!((l - 1000.0).abs() < 1e-3);
    }
}
