//! Acceptance suite. Each criterion prints one PASS/FAIL line; the binary
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use densenet_ad::adversarial::{
    adversarial_step, adversarial_step_grl, build_adversarial, grl_backward, grl_forward, train, AdversarialConfig,
    LabeledBatch, Schedule,
};
use densenet_ad::autodiff::{Graph, Mode};
use densenet_ad::densenet::{build_densenet, count_feature_maps, compress, DenseNetConfig, Stage, QUOTED_DEPTH};
use densenet_ad::experiment::{cmd_featurize, cmd_mix, cmd_train, load_data, synth_utterance, ExperimentConfig};
use densenet_ad::features::{extract_features, FeatureConfig, MelFilterbank, Waveform};
use densenet_ad::gradcheck::{gradcheck_config, run_gradcheck, ulp_distance, GradcheckOptions};
use densenet_ad::noise::{
    build_corpus, mix_at_snr, realized_snr_db, synth_noise, CorpusParams, NoiseBank, NoiseKind, Partition,
};
use densenet_ad::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOY_CONF: &str = include_str!("../../../configs/toy.conf");
const SMOKE_CONF: &str = include_str!("../../../configs/smoke.conf");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Outcome {
    let report = run_gradcheck(&GradcheckOptions::default()).expect("gradcheck runs");
    let worst = report
        .groups
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("groups");
    let failing: Vec<&str> = report.groups.iter().filter(|g| g.max_rel_error >= 1e-3).map(|g| g.name.as_str()).collect();
    outcome(
        failing.is_empty(),
        format!(
            "{} parameter groups, max relative error {:.3e} ({}), failing {:?}",
            report.groups.len(),
            worst.max_rel_error,
            worst.name,
            failing
        ),
    )
}

fn random_batch(cfg: &DenseNetConfig, rng: &mut ChaCha8Rng) -> LabeledBatch<f64> {
    let shape = vec![4, 3, 8, 8];
    let n = shape.iter().product();
    LabeledBatch {
        input: Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        labels: (0..4).map(|_| rng.gen_range(0..cfg.num_classes)).collect(),
        domains: (0..4).map(|_| rng.gen_range(0..2)).collect(),
    }
}

fn update_equivalence() -> Outcome {
    let cfg = gradcheck_config();
    let mut lines = Vec::new();
    let mut passed = true;
    for lambda in [0.0, 0.5, 1.0] {
        let adv = AdversarialConfig {
            lambda,
            ..AdversarialConfig::default()
        };
        let (mut max_ulps, mut over, mut total, mut max_abs) = (0u64, 0usize, 0usize, 0.0f64);
        for m in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + m);
            let batch = random_batch(&cfg, &mut rng);
            let mut a = build_adversarial::<f64>(&cfg, 2, &adv, m).unwrap();
            let mut b = a.clone();
            adversarial_step(&mut a, &batch, &adv).unwrap();
            adversarial_step_grl(&mut b, &batch, &adv).unwrap();
            for (name, ta) in a.params.iter() {
                for (x, y) in ta.data().iter().zip(b.params.get(name).unwrap().data()) {
                    let u = ulp_distance(*x, *y);
                    max_ulps = max_ulps.max(u);
                    max_abs = max_abs.max((x - y).abs());
                    over += usize::from(u > 1);
                    total += 1;
                }
            }
        }
        passed &= max_ulps <= 1;
        lines.push(format!(
            "lambda={lambda}: max {max_ulps} ulp, {over}/{total} elements beyond 1 ulp, max |diff| {max_abs:.2e}"
        ));
    }
    outcome(passed, lines.join("; "))
}

fn grl_algebra() -> Outcome {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let shape = prop::collection::vec(1usize..5, 1..4);
    let strategy = shape
        .prop_flat_map(|s| {
            let n: usize = s.iter().product();
            let values = prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO;
            (Just(s), prop::collection::vec(values, n), 0.0f64..10.0)
        });
    let result = runner.run(&strategy, |(shape, data, lambda)| {
        let t = Tensor::new(shape.clone(), data.clone()).unwrap();
        let fwd = grl_forward(&t);
        prop_assert_eq!(fwd.shape(), t.shape());
        for (a, b) in fwd.data().iter().zip(&data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        let back = grl_backward(&t, lambda);
        for (a, g) in back.data().iter().zip(&data) {
            prop_assert_eq!(a.to_bits(), (-(lambda * g)).to_bits());
        }
        let t32 = Tensor::new(shape, data.iter().map(|v| *v as f32).collect()).unwrap();
        let l32 = lambda as f32;
        for (a, g) in grl_backward(&t32, l32).data().iter().zip(t32.data()) {
            prop_assert_eq!(a.to_bits(), (-(l32 * g)).to_bits());
        }
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, "1000 random tensors: forward bit-identical, backward exactly -lambda*g (f64 and f32)"),
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> DenseNetConfig {
    loop {
        let c = DenseNetConfig {
            num_blocks: rng.gen_range(1..=4),
            layers_per_block: rng.gen_range(1..=5),
            growth_rate: rng.gen_range(1..=8),
            compression: [0.25, 0.3, 0.5, 0.7, 0.75, 1.0][rng.gen_range(0..6)],
            initial_channels: rng.gen_range(1..=12),
            input_channels: 3,
            num_classes: rng.gen_range(2..=6),
        };
        if c.validate().is_ok() {
            return c;
        }
    }
}

fn channel_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    let mut layers_checked = 0;
    for i in 0..50 {
        let cfg = random_config(&mut rng);
        let report = count_feature_maps(&cfg);
        let mut model = build_densenet::<f64>(&cfg, i).unwrap();
        let mut g = Graph::new();
        let n: usize = 2 * 3 * 8 * 8;
        let x = g.input(Tensor::new(vec![2, 3, 8, 8], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());

        // stage-by-stage forward pass, recording observed channel counts
        let mut observed_out = Vec::new();
        let mut cur = x;
        let stages = model.arch.stages.clone();
        for (s, stage) in stages.iter().enumerate() {
            let input_channels = g.value(cur).shape()[1];
            cur = model
                .arch
                .forward_stages(s..s + 1, &mut g, &model.params, &mut model.stats, cur, Mode::Train)
                .unwrap();
            let out_channels = g.value(cur).shape()[1];
            observed_out.push((stage.clone(), input_channels, out_channels));
        }

        for c in &report {
            let k = model.params.get(&format!("{}.weight", c.name)).unwrap();
            if k.shape()[1] != c.in_channels || k.shape()[0] != c.out_channels {
                mismatches.push(format!("{}: kernel {:?} vs {:?}", c.name, k.shape(), c));
            }
            layers_checked += 1;
        }
        let mut block_in = cfg.initial_channels;
        for (stage, cin, cout) in &observed_out {
            match stage {
                Stage::Block(b) => {
                    if *cin != block_in || *cout != block_in + cfg.growth_rate * cfg.layers_per_block {
                        mismatches.push(format!("{}: observed {cin}->{cout}", b.name));
                    }
                    for (n, layer) in b.layers.iter().enumerate() {
                        let want = cfg.growth_rate * n + block_in;
                        let k = model.params.get(&format!("{}.conv.weight", layer.name)).unwrap();
                        if k.shape()[1] != want {
                            mismatches.push(format!("{}: {} input channels, want {want}", layer.name, k.shape()[1]));
                        }
                    }
                    block_in = *cout;
                }
                Stage::Transition(t) => {
                    if *cout != compress(*cin, cfg.compression) {
                        mismatches.push(format!("{}: observed {cin}->{cout}", t.name));
                    }
                    block_in = *cout;
                }
                Stage::Stem(_) => {
                    if *cin != 3 || *cout != cfg.initial_channels {
                        mismatches.push(format!("stem: observed {cin}->{cout}"));
                    }
                }
                Stage::Head(_) => {
                    if *cout != cfg.num_classes {
                        mismatches.push(format!("head: observed {cout} outputs"));
                    }
                }
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("50 configs, {layers_checked} conv layers checked, mismatches {mismatches:?}"),
    )
}

fn default_architecture() -> Outcome {
    let cfg = DenseNetConfig::default();
    let model = build_densenet::<f32>(&cfg, 0).unwrap();
    let n = 3 * 40 * 11;
    let x = Tensor::new(vec![1, 3, 40, 11], (0..n).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect()).unwrap();
    let logits = model.predict(&x).unwrap();
    let depth = model.arch.weighted_depth();
    let ok = logits.shape() == [1, cfg.num_classes] && logits.all_finite();
    outcome(
        ok,
        format!(
            "4x14, k=12, theta=0.5 on a 40x11 patch -> logits {:?}; weighted-layer depth {depth} vs quoted {QUOTED_DEPTH} (differs by {})",
            logits.shape(),
            QUOTED_DEPTH as i64 - depth as i64
        ),
    )
}

fn snr_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let clean = synth_utterance(rng.gen_range(0..4), 4, rng.gen_range(0.1..0.5), 16_000, i).unwrap();
        let kind = NoiseKind::ALL[rng.gen_range(0..4)];
        let noise = synth_noise(kind, rng.gen_range(2000..12_000), 16_000, 100 + i).unwrap();
        let snr = rng.gen_range(0.0..20.0);
        let out = mix_at_snr(&clean, &noise, snr, rng.gen_range(0..20_000)).unwrap();
        let realized = realized_snr_db(&clean, &out.waveform, out.rescale_factor).unwrap();
        worst = worst.max((realized - snr).abs());
    }
    let bank = NoiseBank::synthetic(2, 0.5, 16_000, 1).unwrap();
    let clean: Vec<(String, Waveform)> = (0..1000)
        .map(|i| {
            let w = Waveform::new(
                (0..400).map(|t| 0.2 * ((t * (i % 13 + 3)) as f64 * 0.05).sin()).collect(),
                16_000,
            )
            .unwrap();
            (format!("utt{i:04}"), w)
        })
        .collect();
    let (manifest, _) = build_corpus(&clean, &bank, &CorpusParams::data1(Partition::Known, 21)).unwrap();
    let want = [0.199, 0.203, 0.196, 0.212, 0.190];
    let got = manifest.realized_proportions();
    let composition_ok = got.len() == 5 && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.02);
    outcome(
        worst <= 0.1 && composition_ok,
        format!("100 mixes: max |realized - target| {worst:.2e} dB; 1000-utterance composition {got:?} vs {want:?}"),
    )
}

fn feature_pipeline() -> Outcome {
    let cfg = FeatureConfig::default();
    let sr = 16_000;
    let tone = |f: f64| {
        Waveform::new((0..sr as usize).map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin()).collect(), sr)
            .unwrap()
    };
    let fb = MelFilterbank::new(&cfg, sr).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    let fm = extract_features(&tone(1000.0), &cfg).unwrap();
    ok &= fm.n_mels() == 40;
    for f in [250.0, 1000.0, 2500.0, 6000.0] {
        let fm = extract_features(&tone(f), &cfg).unwrap();
        let mid = &fm.statics[fm.num_frames() / 2];
        let peak = (0..mid.len()).max_by(|&a, &b| mid[a].total_cmp(&mid[b])).unwrap();
        ok &= peak == fb.nearest_band(f);
        notes.push(format!("{f} Hz -> band {peak} (nearest {})", fb.nearest_band(f)));
    }
    let constant = extract_features(&Waveform::new(vec![0.25; 8000], sr).unwrap(), &cfg).unwrap();
    let zero = constant
        .delta
        .iter()
        .chain(&constant.delta2)
        .flatten()
        .all(|v| *v == 0.0);
    ok &= zero;
    let speech = synth_utterance(1, 4, 0.5, sr, 9).unwrap();
    let a = extract_features(&speech, &cfg).unwrap();
    let b = extract_features(&speech, &cfg).unwrap();
    let bitwise = a
        .planes()
        .iter()
        .zip(b.planes())
        .all(|(p, q)| p.iter().flatten().zip(q.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ok &= bitwise;
    outcome(
        ok,
        format!(
            "{} bands; {}; constant-signal deltas all zero: {zero}; rerun bit-identical: {bitwise}",
            fm.n_mels(),
            notes.join(", ")
        ),
    )
}

struct ToyRun {
    label_acc: Vec<f64>,
    domain_acc: f64,
    trajectory: Vec<f64>,
}

fn toy_run(lambda: f64) -> ToyRun {
    let mut cfg = ExperimentConfig::parse(TOY_CONF).unwrap();
    cfg.adversarial.lambda = lambda;
    let (train_set, tests) = load_data::<f32>(&cfg).unwrap();
    let model_cfg = DenseNetConfig {
        num_classes: train_set.num_labels,
        ..cfg.model.clone()
    };
    let mut model = build_adversarial::<f32>(&model_cfg, train_set.num_domains, &cfg.adversarial, cfg.seed + 1).unwrap();
    let schedule = Schedule {
        steps: cfg.schedule.steps,
        batch_size: cfg.schedule.batch_size,
        seed: cfg.seed + 2,
        eval_every: cfg.schedule.eval_every,
    };
    let log = train(&mut model, &train_set, &cfg.adversarial, &schedule, Some(&tests[0].data)).unwrap();
    let full = model.evaluate(&tests[0].data).unwrap();
    ToyRun {
        label_acc: tests[1..].iter().map(|t| model.evaluate(&t.data).unwrap().label_acc).collect(),
        domain_acc: full.domain_acc,
        trajectory: log.rows.iter().map(|r| r.domain_acc).collect(),
    }
}

fn adversarial_effect() -> Outcome {
    let adv = toy_run(0.5);
    let ctrl = toy_run(0.0);
    let chance = 0.5;
    let adv_ok = adv.label_acc.iter().all(|a| *a >= 0.9) && (adv.domain_acc - chance).abs() <= 0.15;
    let ctrl_ok = ctrl.domain_acc >= 0.8 && ctrl.label_acc[1] <= adv.label_acc[1];
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/");
    outcome(
        adv_ok && ctrl_ok,
        format!(
            "lambda=0.5: label acc per domain {}, domain acc {:.3} (trajectory {}); lambda=0: label acc {}, domain acc {:.3}",
            fmt(&adv.label_acc),
            adv.domain_acc,
            fmt(&adv.trajectory),
            fmt(&ctrl.label_acc),
            ctrl.domain_acc
        ),
    )
}

fn pipeline_hash(root: &Path) -> String {
    let mut cfg = ExperimentConfig::parse(SMOKE_CONF).unwrap();
    cfg.data.corpus_dir = Some(root.join("corpus"));
    cfg.data.features_dir = Some(root.join("features"));
    cmd_mix(&cfg, &root.join("corpus")).unwrap();
    cmd_featurize(&cfg, &root.join("features")).unwrap();
    cmd_train(&cfg, &root.join("run")).unwrap().hash
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let a = pipeline_hash(&tmp.path().join("a"));
    let b = pipeline_hash(&tmp.path().join("b"));
    outcome(a == b, format!("checkpoint sha256 {a} / {b}"))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("gradient correctness", Duration::from_secs(120), gradient_correctness),
        ("GRL/explicit-update equivalence", Duration::from_secs(60), update_equivalence),
        ("GRL algebra", Duration::from_secs(60), grl_algebra),
        ("channel arithmetic", Duration::from_secs(60), channel_arithmetic),
        ("default architecture builds", Duration::from_secs(60), default_architecture),
        ("SNR fidelity", Duration::from_secs(120), snr_fidelity),
        ("feature pipeline", Duration::from_secs(60), feature_pipeline),
        ("adversarial effect", Duration::from_secs(900), adversarial_effect),
        ("end-to-end determinism", Duration::from_secs(900), end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let passed = result.passed && elapsed <= *budget;
        failed += usize::from(!passed);
        println!(
            "criterion {} [{}] {name}: {} ({:.1}s, budget {}s)",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
