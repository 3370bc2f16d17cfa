//! Synthetic two-factor patch task: class identity lives in a spatial
//! texture, domain identity in an additive spectral offset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adversarial::Dataset;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::features::compute_deltas;
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSpec {
    pub num_label_classes: usize,
    pub num_domains: usize,
    /// Examples of each class in each domain.
    pub samples_per_class: usize,
    pub n_mels: usize,
    pub width: usize,
    pub class_template_seed: u64,
    /// RMS of each class template.
    pub template_gain: f64,
    /// Peak of the additive per-band offset of domains other than 0.
    pub shift_gain: f64,
    /// Template gain applied in domains other than 0.
    pub domain_gain: f64,
    pub noise_std: f64,
    pub test_fraction: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            num_label_classes: 4,
            num_domains: 2,
            samples_per_class: 150,
            n_mels: 16,
            width: 8,
            class_template_seed: 7,
            template_gain: 1.0,
            shift_gain: 0.5,
            domain_gain: 0.8,
            noise_std: 0.5,
            test_fraction: 0.25,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("toy: {m}")));
        if self.num_label_classes < 2 || self.num_domains < 1 {
            return bad("need at least 2 label classes and 1 domain");
        }
        if self.samples_per_class == 0 || self.n_mels < 2 || self.width < 2 {
            return bad("samples_per_class, n_mels and width must be positive (sizes at least 2)");
        }
        if self.num_label_classes > self.gratings().len() {
            return bad("too many classes for the spectrogram size");
        }
        for (name, v) in [
            ("template_gain", self.template_gain),
            ("shift_gain", self.shift_gain),
            ("domain_gain", self.domain_gain),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("toy: {name} must be finite and nonnegative")));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)");
        }
        Ok(())
    }

    /// Distinct non-aliased spatial frequencies `(k, l)` with `k` cycles
    /// across bands and `l` across frames.
    fn gratings(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..=self.n_mels / 2 {
            for l in 0..=self.width / 2 {
                if (k, l) != (0, 0) && 2 * k != self.n_mels && 2 * l != self.width {
                    out.push((k, l));
                }
            }
        }
        out
    }

    /// Static-plane templates, one per class, row-major `n_mels × width`.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.class_template_seed);
        let mut freqs = self.gratings();
        freqs.shuffle(&mut rng);
        let tau = 2.0 * std::f64::consts::PI;
        freqs
            .into_iter()
            .take(self.num_label_classes)
            .map(|(k, l)| {
                let phase = rng.gen_range(0.0..tau);
                let t: Vec<f64> = (0..self.n_mels)
                    .flat_map(|b| {
                        (0..self.width).map(move |w| {
                            (tau * (k as f64 * b as f64 / self.n_mels as f64 + l as f64 * w as f64 / self.width as f64)
                                + phase)
                                .cos()
                        })
                    })
                    .collect();
                let rms = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
                t.into_iter().map(|v| v * self.template_gain / rms).collect()
            })
            .collect()
    }

    /// Additive per-band offset of each domain; domain 0 is unshifted.
    pub fn domain_offsets(&self) -> Vec<Vec<f64>> {
        (0..self.num_domains)
            .map(|d| {
                (0..self.n_mels)
                    .map(|b| {
                        if d == 0 {
                            0.0
                        } else {
                            let tilt = (b as f64 + 1.0) / self.n_mels as f64;
                            self.shift_gain * tilt * d as f64 / (self.num_domains - 1).max(1) as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask<F> {
    pub train: Dataset<F>,
    pub test: Dataset<F>,
}

/// Generate the task and split it deterministically into train and test.
pub fn make_toy_task<F: Real>(spec: &ToyTaskSpec, seed: u64) -> Result<ToyTask<F>> {
    spec.validate()?;
    let templates = spec.templates();
    let offsets = spec.domain_offsets();
    let (h, w) = (spec.n_mels, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    for d in 0..spec.num_domains {
        let gain = if d == 0 { 1.0 } else { spec.domain_gain };
        for (c, template) in templates.iter().enumerate() {
            for _ in 0..spec.samples_per_class {
                let statics: Vec<f64> = (0..h * w)
                    .map(|i| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        gain * template[i] + offsets[d][i / w] + spec.noise_std * n
                    })
                    .collect();
                examples.push((patch_planes(&statics, h, w), c, d));
            }
        }
    }
    examples.shuffle(&mut rng);
    let n_test = ((examples.len() as f64) * spec.test_fraction).round() as usize;
    let n_test = n_test.clamp(1, examples.len() - 1);
    let test = examples.split_off(examples.len() - n_test);
    let pack = |rows: Vec<(Vec<f64>, usize, usize)>| -> Result<Dataset<F>> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * 3 * h * w);
        let mut labels = Vec::with_capacity(n);
        let mut domains = Vec::with_capacity(n);
        for (x, c, d) in rows {
            data.extend(x.into_iter().map(F::of));
            labels.push(c);
            domains.push(d);
        }
        Dataset::new(
            Tensor::new(vec![n, 3, h, w], data)?,
            labels,
            domains,
            spec.num_label_classes,
            spec.num_domains,
        )
    };
    Ok(ToyTask {
        train: pack(examples)?,
        test: pack(test)?,
    })
}

/// Static plane plus its time deltas, as three `h × w` planes.
fn patch_planes(statics: &[f64], h: usize, w: usize) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = statics.chunks(w).map(<[f64]>::to_vec).collect();
    let mut out = statics.to_vec();
    // deltas run along time, i.e. along each band's row
    let transpose = |m: &[Vec<f64>]| -> Vec<Vec<f64>> { (0..w).map(|t| (0..h).map(|b| m[b][t]).collect()).collect() };
    let d1 = compute_deltas(&transpose(&rows), 2);
    let d2 = compute_deltas(&d1, 2);
    for plane in [d1, d2] {
        for b in 0..h {
            for t in 0..w {
                out.push(plane[t][b]);
            }
        }
    }
    out
}

/// Held-out accuracy of a multinomial logistic regression on raw patches.
pub fn probe_accuracy(
    train: &Dataset<f64>,
    train_targets: &[usize],
    test: &Dataset<f64>,
    test_targets: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let n = train.len();
    let dim = train.inputs.numel() / n.max(1);
    let x = train.inputs.clone().reshape(vec![n, dim])?;
    let mut params = ParameterSet::<f64>::new();
    params.insert("w", Tensor::zeros(&[dim, classes]))?;
    params.insert("b", Tensor::zeros(&[classes]))?;
    for _ in 0..steps {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let (w, b) = (g.param(&params, "w")?, g.param(&params, "b")?);
        let logits = g.affine(xi, w, b)?;
        let loss = g.softmax_cross_entropy(logits, train_targets)?;
        g.backward(loss)?;
        let grads = g.param_grads(&params);
        for (name, t) in params.iter_mut() {
            let gr = grads.get(name).expect("probe gradient");
            for (v, d) in t.data_mut().iter_mut().zip(gr.data()) {
                *v -= lr * d / n as f64;
            }
        }
    }
    let m = test.len();
    let mut g = Graph::new();
    let xi = g.input(test.inputs.clone().reshape(vec![m, dim])?);
    let (w, b) = (g.param(&params, "w")?, g.param(&params, "b")?);
    let logits = g.affine(xi, w, b)?;
    let scores = g.value(logits);
    let correct = scores
        .data()
        .chunks(classes)
        .zip(test_targets)
        .filter(|(row, &t)| {
            let best = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            best == t
        })
        .count();
    Ok(correct as f64 / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_orthogonal_and_zero_mean() {
        let spec = ToyTaskSpec::default();
        let t = spec.templates();
        assert_eq!(t.len(), 4);
        for (i, a) in t.iter().enumerate() {
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            assert!(mean.abs() < 1e-12);
            let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
            for b in &t[i + 1..] {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-9, "{dot}");
            }
        }
    }

    #[test]
    fn split_and_balance() {
        let spec = ToyTaskSpec { samples_per_class: 10, ..ToyTaskSpec::default() };
        let task = make_toy_task::<f32>(&spec, 1).unwrap();
        assert_eq!(task.train.len() + task.test.len(), 80);
        assert_eq!(task.test.len(), 20);
        assert_eq!(task.train.inputs.shape(), &[60, 3, 16, 8]);
        assert_eq!(task.train, make_toy_task::<f32>(&spec, 1).unwrap().train);
        assert_ne!(task.train, make_toy_task::<f32>(&spec, 2).unwrap().train);
    }

    #[test]
    fn offsets_touch_only_the_static_plane() {
        let spec = ToyTaskSpec {
            noise_std: 0.0,
            template_gain: 0.0,
            samples_per_class: 1,
            ..ToyTaskSpec::default()
        };
        let task = make_toy_task::<f64>(&spec, 3).unwrap();
        let all = [&task.train, &task.test];
        for data in all {
            for (i, &d) in data.domains.iter().enumerate() {
                let x = data.inputs.slice_outer(i, 1).unwrap();
                let plane = 16 * 8;
                assert!(x.data()[plane..].iter().all(|v| v.abs() < 1e-12));
                let expected = spec.domain_offsets()[d][5];
                assert!((x.data()[5 * 8 + 3] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = ToyTaskSpec::default();
        for spec in [
            ToyTaskSpec { num_label_classes: 1, ..base.clone() },
            ToyTaskSpec { test_fraction: 1.0, ..base.clone() },
            ToyTaskSpec { noise_std: -1.0, ..base.clone() },
            ToyTaskSpec { num_label_classes: 500, ..base.clone() },
        ] {
            assert!(matches!(make_toy_task::<f32>(&spec, 0), Err(Error::Config(_))), "{spec:?}");
        }
    }

    fn probe(spec: &ToyTaskSpec, domains: bool) -> f64 {
        let task = make_toy_task::<f64>(spec, 5).unwrap();
        let (tr, te, k) = if domains {
            (&task.train.domains, &task.test.domains, spec.num_domains)
        } else {
            (&task.train.labels, &task.test.labels, spec.num_label_classes)
        };
        probe_accuracy(&task.train, tr, &task.test, te, k, 300, 0.5).unwrap()
    }

    #[test]
    fn unshifted_domains_are_indistinguishable() {
        let spec = ToyTaskSpec {
            shift_gain: 0.0,
            domain_gain: 1.0,
            ..ToyTaskSpec::default()
        };
        let acc = probe(&spec, true);
        assert!((acc - 0.5).abs() < 0.1, "{acc}");
    }

    #[test]
    fn large_shift_is_detectable() {
        let spec = ToyTaskSpec {
            shift_gain: 3.0,
            ..ToyTaskSpec::default()
        };
        assert!(probe(&spec, true) >= 0.95);
    }

    #[test]
    fn strong_templates_are_learnable() {
        let spec = ToyTaskSpec {
            template_gain: 2.0,
            ..ToyTaskSpec::default()
        };
        assert!(probe(&spec, false) >= 0.95);
    }
}
