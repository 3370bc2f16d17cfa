use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tone(f: f64, amp: f64, n: usize) -> Waveform {
    let sr = 16_000.0;
    Waveform::new(
        (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin()).collect(),
        16_000,
    )
    .unwrap()
}

fn noise(n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000).unwrap()
}

#[test]
fn frame_counts() {
    let cfg = FeatureConfig::default();
    assert_eq!(frame_signal(&noise(400, 1), &cfg).unwrap().len(), 1);
    assert_eq!(frame_signal(&noise(400 + 160 * 9, 1), &cfg).unwrap().len(), 10);
    assert_eq!(frame_signal(&noise(400 + 160 * 9 + 159, 1), &cfg).unwrap().len(), 10);
    assert!(matches!(frame_signal(&noise(399, 1), &cfg), Err(Error::Input(_))));
}

#[test]
fn constant_signal_frames_are_scaled_window() {
    let w = Waveform::new(vec![0.25; 1000], 16_000).unwrap();
    let frames = frame_signal(&w, &FeatureConfig::default()).unwrap();
    let window = hann(400);
    for f in &frames {
        for (a, b) in f.iter().zip(&window) {
            assert_eq!(*a, 0.25 * b);
        }
    }
    assert_eq!(window[0], 0.0);
    assert!((window[199] - window[200]).abs() < 1e-12);
}

#[test]
fn invalid_configs_rejected() {
    let base = FeatureConfig::default();
    for cfg in [
        FeatureConfig { n_mels: 0, ..base.clone() },
        FeatureConfig { frame_hop: 0.03, ..base.clone() },
        FeatureConfig { fmin: 9000.0, ..base.clone() },
        FeatureConfig { fmax: 8001.0, ..base.clone() },
        FeatureConfig { fft_size: 256, ..base.clone() },
        FeatureConfig { log_floor: 0.0, ..base.clone() },
    ] {
        assert!(matches!(cfg.validate(16_000), Err(Error::Config(_))), "{cfg:?}");
    }
    assert!(base.validate(16_000).is_ok());
    assert!(Waveform::new(vec![0.0], 0).is_err());
}

#[test]
fn default_output_has_forty_bands() {
    let fm = extract_features(&noise(16_000, 2), &FeatureConfig::default()).unwrap();
    assert_eq!(fm.n_mels(), 40);
    assert_eq!(fm.num_frames(), 98);
    for plane in fm.planes() {
        assert_eq!(plane.len(), 98);
        assert!(plane.iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn silence_hits_the_floor() {
    let cfg = FeatureConfig::default();
    let w = Waveform::new(vec![0.0; 2000], 16_000).unwrap();
    let fm = extract_features(&w, &cfg).unwrap();
    for v in fm.statics.iter().flatten() {
        assert_eq!(*v, cfg.log_floor.ln());
    }
    assert!(fm.delta.iter().chain(&fm.delta2).flatten().all(|&v| v == 0.0));
}

#[test]
fn filterbank_shape() {
    let bank = MelFilterbank::new(&FeatureConfig::default(), 16_000).unwrap();
    assert_eq!(bank.weights.len(), 40);
    assert!(bank.centers_hz.windows(2).all(|w| w[0] < w[1]));
    for row in &bank.weights {
        assert_eq!(row.len(), 257);
        assert!(row.iter().any(|&w| w > 0.0), "every filter covers a bin");
        assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }
    assert!((hz_to_mel(mel_to_hz(1234.5)) - 1234.5).abs() < 1e-9);
    assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
}

#[test]
fn pure_tone_peaks_in_nearest_band() {
    let cfg = FeatureConfig::default();
    let bank = MelFilterbank::new(&cfg, 16_000).unwrap();
    let mut freqs: Vec<f64> = bank.centers_hz.iter().copied().filter(|&c| c >= 500.0 && c < 7500.0).collect();
    for w in bank.centers_hz.windows(2).filter(|w| w[0] >= 500.0 && w[1] < 7500.0) {
        freqs.push(0.7 * w[0] + 0.3 * w[1]);
        freqs.push(0.3 * w[0] + 0.7 * w[1]);
    }
    for f in freqs {
        let fm = extract_features(&tone(f, 0.5, 4000), &cfg).unwrap();
        let row = &fm.statics[fm.num_frames() / 2];
        let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(peak, bank.nearest_band(f), "tone at {f:.1} Hz");
    }
}

#[test]
fn doubling_amplitude_adds_ln4() {
    let cfg = FeatureConfig::default();
    let a = extract_features(&noise(3000, 4), &cfg).unwrap();
    let mut loud = noise(3000, 4);
    loud.samples.iter_mut().for_each(|s| *s *= 2.0);
    let b = extract_features(&loud, &cfg).unwrap();
    for (x, y) in a.statics.iter().flatten().zip(b.statics.iter().flatten()) {
        assert!((y - x - 4f64.ln()).abs() < 1e-9);
    }
}

#[test]
fn extraction_is_bit_deterministic() {
    let cfg = FeatureConfig::default();
    let w = noise(5000, 9);
    assert_eq!(extract_features(&w, &cfg).unwrap(), extract_features(&w, &cfg).unwrap());
}

#[test]
fn one_hop_shift_shifts_frames() {
    let cfg = FeatureConfig::default();
    let w = noise(4000, 5);
    let shifted = Waveform::new(w.samples[160..].to_vec(), 16_000).unwrap();
    let a = extract_features(&w, &cfg).unwrap();
    let b = extract_features(&shifted, &cfg).unwrap();
    assert_eq!(b.num_frames(), a.num_frames() - 1);
    for t in 0..b.num_frames() {
        for (x, y) in a.statics[t + 1].iter().zip(&b.statics[t]) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    for t in 4..b.num_frames() - 4 {
        for (x, y) in a.delta2[t + 1].iter().zip(&b.delta2[t]) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn louder_never_lowers_energy() {
    let cfg = FeatureConfig::default();
    let w = noise(3000, 6);
    let base = extract_features(&w, &cfg).unwrap();
    for g in [1.001, 1.5, 3.0] {
        let loud = Waveform::new(w.samples.iter().map(|s| s * g).collect(), 16_000).unwrap();
        let fm = extract_features(&loud, &cfg).unwrap();
        for (x, y) in base.statics.iter().flatten().zip(fm.statics.iter().flatten()) {
            assert!(y >= x);
        }
    }
}

/// The regression formula written out term by term.
fn brute_delta(c: &[Vec<f64>], w: usize) -> Vec<Vec<f64>> {
    let t = c.len() as isize;
    let at = |i: isize, j: usize| c[i.clamp(0, t - 1) as usize][j];
    let denom: f64 = 2.0 * (1..=w).map(|n| (n * n) as f64).sum::<f64>();
    (0..t)
        .map(|i| {
            (0..c[0].len())
                .map(|j| {
                    (1..=w as isize)
                        .map(|n| n as f64 * (at(i + n, j) - at(i - n, j)))
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

#[test]
fn deltas_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
    for w in 1..=3 {
        let fast = compute_deltas(&c, w);
        let slow = brute_delta(&c, w);
        for (a, b) in fast.iter().flatten().zip(slow.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn delta_examples() {
    let constant = vec![vec![3.5, -1.0]; 7];
    assert!(compute_deltas(&constant, 2).iter().flatten().all(|&v| v == 0.0));
    let ramp: Vec<Vec<f64>> = (0..12).map(|t| vec![0.75 * t as f64]).collect();
    let d = compute_deltas(&ramp, 2);
    for row in &d[2..10] {
        assert_eq!(row[0], 0.75);
    }
    let single = vec![vec![1.0, 2.0]];
    assert_eq!(compute_deltas(&single, 2), vec![vec![0.0, 0.0]]);
}

#[test]
fn normalized_corpus_has_unit_statistics() {
    let cfg = FeatureConfig::default();
    let corpus: Vec<FeatureMatrix> = (0..3)
        .map(|s| extract_features(&noise(2000 + 500 * s as usize, s), &cfg).unwrap())
        .collect();
    let norm = Normalizer::fit(&corpus).unwrap();
    let normed: Vec<FeatureMatrix> = corpus.iter().map(|f| norm.apply(f).unwrap()).collect();
    let count: usize = normed.iter().map(FeatureMatrix::num_frames).sum();
    for c in 0..3 {
        for band in 0..40 {
            let vals: Vec<f64> = normed.iter().flat_map(|f| f.planes()[c].iter().map(move |r| r[band])).collect();
            assert_eq!(vals.len(), count);
            let mean = vals.iter().sum::<f64>() / count as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
            assert!(mean.abs() < 1e-6, "plane {c} band {band} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "plane {c} band {band} var {var}");
        }
    }
}

#[test]
fn patches_follow_layout() {
    let fm = extract_features(&noise(400 + 160 * 10, 3), &FeatureConfig::default()).unwrap();
    assert_eq!(fm.num_frames(), 11);
    let one = assemble_patches::<f64>(&fm, 11).unwrap();
    assert_eq!(one.shape(), &[1, 3, 40, 11]);
    let p = assemble_patches::<f64>(&fm, 5).unwrap();
    assert_eq!(p.shape(), &[7, 3, 40, 5]);
    let at = |n: usize, c: usize, h: usize, w: usize| p.data()[((n * 3 + c) * 40 + h) * 5 + w];
    for n in 0..7 {
        for band in 0..40 {
            for dt in 0..5 {
                assert_eq!(at(n, 0, band, dt), fm.statics[n + dt][band]);
                assert_eq!(at(n, 1, band, dt), fm.delta[n + dt][band]);
                assert_eq!(at(n, 2, band, dt), fm.delta2[n + dt][band]);
            }
        }
    }
    assert!(matches!(assemble_patches::<f64>(&fm, 12), Err(Error::Input(_))));
}

#[test]
fn wav_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.0, -1.0, 0.25], 8000).unwrap();
    write_wav(&path, &w).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back.sample_rate, 8000);
    for (a, b) in w.samples.iter().zip(&back.samples) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
    write_wav(&path, &back).unwrap();
    assert_eq!(read_wav(&path).unwrap(), back);

    let stereo = hound::WavSpec {
        channels: 2,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let spath = dir.path().join("s.wav");
    let mut wr = hound::WavWriter::create(&spath, stereo).unwrap();
    wr.write_sample(0i16).unwrap();
    wr.write_sample(0i16).unwrap();
    wr.finalize().unwrap();
    assert!(matches!(read_wav(&spath), Err(Error::Input(_))));
}

#[test]
fn archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FeatureConfig::default();
    let items: Vec<(String, FeatureMatrix, usize, usize)> = (0..3)
        .map(|i| (format!("utt{i}"), extract_features(&noise(1200 + 160 * i, i as u64), &cfg).unwrap(), i, 2 - i))
        .collect();
    let entries = write_archive(dir.path(), &items).unwrap();
    assert_eq!(read_archive_index(dir.path()).unwrap(), entries);
    assert_eq!(entries.len(), 3);
    for (e, (_, fm, _, _)) in entries.iter().zip(&items) {
        assert_eq!(&load_archive_entry(dir.path(), e).unwrap(), fm);
    }
    let bad = vec![("a/b".to_string(), items[0].1.clone(), 0, 0)];
    assert!(write_archive(dir.path().join("x"), &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deltas_are_linear(
        x in prop::collection::vec(-100i32..100, 24),
        y in prop::collection::vec(-100i32..100, 24),
        a in -8i32..8,
        b in -8i32..8,
    ) {
        let rows = |v: &[i32]| -> Vec<Vec<f64>> { v.chunks(3).map(|r| r.iter().map(|&e| e as f64).collect()).collect() };
        let (xm, ym) = (rows(&x), rows(&y));
        let combo: Vec<Vec<f64>> = xm
            .iter()
            .zip(&ym)
            .map(|(r, s)| r.iter().zip(s).map(|(p, q)| a as f64 * p + b as f64 * q).collect())
            .collect();
        let (dx, dy, dc) = (compute_deltas(&xm, 1), compute_deltas(&ym, 1), compute_deltas(&combo, 1));
        for ((p, q), r) in dx.iter().flatten().zip(dy.iter().flatten()).zip(dc.iter().flatten()) {
            prop_assert_eq!(a as f64 * p + b as f64 * q, *r);
        }
        let (dx, dy, dc) = (compute_deltas(&xm, 2), compute_deltas(&ym, 2), compute_deltas(&combo, 2));
        for ((p, q), r) in dx.iter().flatten().zip(dy.iter().flatten()).zip(dc.iter().flatten()) {
            let lin = a as f64 * p + b as f64 * q;
            prop_assert!((lin - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }
}
