//! Finite-difference verification of the backward pass and of the two
//! adversarial update paths.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    adversarial_step, adversarial_step_grl, build_adversarial, AdversarialConfig, AdversarialModel, LabeledBatch,
};
use crate::autodiff::GradFault;
use crate::densenet::DenseNetConfig;
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 1e-3;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Distance in units in the last place between two floats of the same width.
pub fn ulp_distance<F: crate::Real>(a: F, b: F) -> u64 {
    fn ordered32(x: f32) -> i64 {
        let bits = x.to_bits() as i32;
        (if bits < 0 { i32::MIN.wrapping_sub(bits) } else { bits }) as i64
    }
    fn ordered64(x: f64) -> i128 {
        let bits = x.to_bits() as i64;
        (if bits < 0 { i64::MIN.wrapping_sub(bits) } else { bits }) as i128
    }
    if a.is_nan() || b.is_nan() {
        return u64::MAX;
    }
    if F::BYTES == 4 {
        ordered32(a.as_f64() as f32).abs_diff(ordered32(b.as_f64() as f32))
    } else {
        ordered64(a.as_f64()).abs_diff(ordered64(b.as_f64())).min(u64::MAX as u128) as u64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    pub threshold: f64,
    pub batch_size: usize,
    pub lambdas: Vec<f64>,
    pub equivalence_models: usize,
    pub fault: Option<GradFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            step: 1e-6,
            threshold: DEFAULT_THRESHOLD,
            batch_size: 4,
            lambdas: vec![0.0, 0.5, 1.0],
            equivalence_models: 10,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceResult {
    pub lambda: f64,
    pub models: usize,
    pub max_ulps: u64,
    /// Largest `|a - b|` relative to the size of the step that produced it.
    pub max_step_rel_diff: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub groups: Vec<GroupResult>,
    pub equivalence: Vec<EquivalenceResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed) && self.equivalence.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "finite differences (threshold {:e})", self.threshold)?;
        for g in &self.groups {
            let tag = if g.passed { "ok  " } else { "FAIL" };
            writeln!(f, "  {tag} {:<32} {:.3e}", g.name, g.max_rel_error)?;
        }
        writeln!(f, "update equivalence (explicit rules vs reversal layer)")?;
        for e in &self.equivalence {
            let tag = if e.passed { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "  {tag} lambda={:<4} models={} max_ulps={} max_step_rel_diff={:.3e}",
                e.lambda, e.models, e.max_ulps, e.max_step_rel_diff
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// The tiny network used by the checker: 2 blocks of 2 layers, growth 4.
pub fn gradcheck_config() -> DenseNetConfig {
    DenseNetConfig::tiny(3)
}

fn random_batch(config: &DenseNetConfig, b: usize, num_domains: usize, seed: u64) -> Result<LabeledBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![b, config.input_channels, 8, 8];
    let n: usize = shape.iter().product();
    Ok(LabeledBatch {
        input: Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?,
        labels: (0..b).map(|_| rng.gen_range(0..config.num_classes)).collect(),
        domains: (0..b).map(|_| rng.gen_range(0..num_domains)).collect(),
    })
}

/// Central-difference check of `d(Ly + Lz)/dθ` for every parameter tensor.
pub fn finite_difference_groups(
    model: &AdversarialModel<f64>,
    batch: &LabeledBatch<f64>,
    opts: &GradcheckOptions,
) -> Result<Vec<GroupResult>> {
    let (_, _, gy, gz) = model.clone().loss_gradients_with(batch, opts.fault)?;
    let mut probe = model.clone();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let (ay, az) = (gy.get(&name).expect("grad"), gz.get(&name).expect("grad"));
        let mut worst = 0.0f64;
        for i in 0..ay.numel() {
            let orig = probe.params.get(&name)?.data()[i];
            probe.params.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let (uy, uz) = probe.objective(batch)?;
            probe.params.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let (dy, dz) = probe.objective(batch)?;
            probe.params.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = ((uy + uz) - (dy + dz)) / (2.0 * opts.step);
            worst = worst.max(relative_error(ay.data()[i] + az.data()[i], numeric));
        }
        out.push(GroupResult {
            passed: worst < opts.threshold,
            name,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

/// One explicit-rule step and one reversal-layer step from identical starting
/// points, compared element by element.
pub fn update_equivalence(
    config: &DenseNetConfig,
    lambda: f64,
    models: usize,
    seed: u64,
    batch_size: usize,
    threshold: f64,
) -> Result<EquivalenceResult> {
    let adv = AdversarialConfig {
        lambda,
        ..AdversarialConfig::default()
    };
    let mut max_ulps = 0;
    let mut max_step_rel_diff = 0.0f64;
    for m in 0..models as u64 {
        let model_seed = seed.wrapping_mul(1_000_003).wrapping_add(m);
        let batch = random_batch(config, batch_size, 2, model_seed ^ 0x5eed)?;
        let mut a = build_adversarial::<f64>(config, 2, &adv, model_seed)?;
        let mut b = a.clone();
        let before = a.params.clone();
        adversarial_step(&mut a, &batch, &adv)?;
        adversarial_step_grl(&mut b, &batch, &adv)?;
        for (name, ta) in a.params.iter() {
            let tb = b.params.get(name)?;
            let t0 = before.get(name)?;
            for ((x, y), o) in ta.data().iter().zip(tb.data()).zip(t0.data()) {
                max_ulps = max_ulps.max(ulp_distance(*x, *y));
                if x != y {
                    let step = (o - x).abs().max((o - y).abs()).max(f64::MIN_POSITIVE);
                    max_step_rel_diff = max_step_rel_diff.max((x - y).abs() / step);
                }
            }
        }
    }
    Ok(EquivalenceResult {
        lambda,
        models,
        max_ulps,
        max_step_rel_diff,
        passed: max_step_rel_diff < threshold,
    })
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let config = gradcheck_config();
    let adv = AdversarialConfig::default();
    let model = build_adversarial::<f64>(&config, 2, &adv, opts.seed)?;
    let batch = random_batch(&config, opts.batch_size, 2, opts.seed.wrapping_add(1))?;
    let groups = finite_difference_groups(&model, &batch, opts)?;
    let equivalence = opts
        .lambdas
        .iter()
        .map(|&l| update_equivalence(&config, l, opts.equivalence_models, opts.seed, opts.batch_size, opts.threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        threshold: opts.threshold,
        groups,
        equivalence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ulp_distance_basics() {
        assert_eq!(ulp_distance(1.0f64, 1.0), 0);
        assert_eq!(ulp_distance(1.0f64, f64::from_bits(1.0f64.to_bits() + 1)), 1);
        assert_eq!(ulp_distance(0.0f64, -0.0), 0);
        assert_eq!(ulp_distance(f64::from_bits(1), -f64::from_bits(1)), 2);
        assert_eq!(ulp_distance(1.0f32, f32::from_bits(1.0f32.to_bits() + 3)), 3);
        assert_eq!(ulp_distance(f64::NAN, 1.0), u64::MAX);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn default_run_passes() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.groups.iter().any(|g| g.name == "x.stem.conv.weight"));
        assert!(report.groups.iter().any(|g| g.name == "z.domain.fc0.weight"));
        assert_eq!(report.equivalence.len(), 3);
    }

    #[test]
    fn corrupted_conv_backward_fails_on_conv_groups() {
        let opts = GradcheckOptions {
            fault: Some(GradFault::ConvKernel),
            lambdas: vec![],
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(!report.passed());
        let failures = report.failures();
        assert!(!failures.is_empty());
        assert!(failures.iter().all(|n| n.ends_with("conv.weight")), "{failures:?}");
        assert!(failures.contains(&"x.stem.conv.weight"));
    }
}
