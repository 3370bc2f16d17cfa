//! Additive noise mixing at a controlled SNR and reproducible noisy corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Waveform;

/// Mean of squared samples.
pub fn signal_power(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Input("signal_power of an empty signal".into()));
    }
    Ok(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

pub fn db_to_ratio(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn ratio_to_db(r: f64) -> f64 {
    10.0 * r.log10()
}

/// `len` samples of `noise` starting at `offset`, wrapping around as needed.
pub fn noise_segment(noise: &[f64], offset: usize, len: usize) -> Vec<f64> {
    if noise.is_empty() {
        return Vec::new();
    }
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixOutput {
    pub waveform: Waveform,
    /// Gain applied to the noise segment before adding it.
    pub noise_gain: f64,
    /// Global factor applied after mixing; 1 unless the mix would clip.
    pub rescale_factor: f64,
}

/// Add `noise` (cropped at `noise_offset`, looped) to `clean` so that the
/// clean-to-noise power ratio is `snr_db` decibels.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, noise_offset: usize) -> Result<MixOutput> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Mix(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::Mix(format!("snr_db {snr_db} is not finite")));
    }
    let p_clean = signal_power(&clean.samples).map_err(|_| Error::Mix("clean signal is empty".into()))?;
    if p_clean == 0.0 {
        return Err(Error::Mix("clean signal is silent".into()));
    }
    if noise.is_empty() {
        return Err(Error::Mix("noise signal is empty".into()));
    }
    let segment = noise_segment(&noise.samples, noise_offset, clean.len());
    let p_noise = signal_power(&segment)?;
    if p_noise == 0.0 {
        return Err(Error::Mix("noise segment is silent".into()));
    }
    let gain = (p_clean / (p_noise * db_to_ratio(snr_db))).sqrt();
    let mut mixed: Vec<f64> = clean.samples.iter().zip(&segment).map(|(c, n)| c + gain * n).collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rescale_factor = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if rescale_factor != 1.0 {
        mixed.iter_mut().for_each(|v| *v *= rescale_factor);
    }
    Ok(MixOutput {
        waveform: Waveform::new(mixed, clean.sample_rate)?,
        noise_gain: gain,
        rescale_factor,
    })
}

/// SNR recovered from a mix and its clean source: the residual after undoing
/// the rescale is the scaled noise.
pub fn realized_snr_db(clean: &Waveform, mixed: &Waveform, rescale_factor: f64) -> Result<f64> {
    if clean.len() != mixed.len() {
        return Err(Error::Mix(format!(
            "mixed length {} differs from clean length {}",
            mixed.len(),
            clean.len()
        )));
    }
    let residual: Vec<f64> = mixed
        .samples
        .iter()
        .zip(&clean.samples)
        .map(|(m, c)| m / rescale_factor - c)
        .collect();
    Ok(ratio_to_db(signal_power(&clean.samples)? / signal_power(&residual)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Known,
    Unknown,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Known => "known",
            Partition::Unknown => "unknown",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(Partition::Known),
            "unknown" => Ok(Partition::Unknown),
            _ => Err(Error::Config(format!("partition must be known or unknown, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble, NoiseKind::Hum];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
            NoiseKind::Hum => "hum",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise kind {s:?}")))
    }
}

/// Synthetic noise with peak amplitude at most 0.5.
pub fn synth_noise(kind: NoiseKind, len: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let mut x: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        NoiseKind::Pink => {
            // Kellet's economy filter over white noise.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w: f64 = rng.gen_range(-1.0..1.0);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let talkers = 6;
            let mut out = vec![0.0; len];
            for _ in 0..talkers {
                let rate = rng.gen_range(2.0..6.0);
                let phase = rng.gen_range(0.0..tau);
                let pole = rng.gen_range(0.85..0.97);
                let mut state = 0.0;
                for (i, o) in out.iter_mut().enumerate() {
                    state = pole * state + (1.0 - pole) * rng.gen_range(-1.0..1.0);
                    let env = 0.5 + 0.5 * (tau * rate * i as f64 / sr + phase).sin();
                    *o += env * env * state;
                }
            }
            out
        }
        NoiseKind::Hum => {
            let base = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
            let amps: Vec<f64> = (1..=5).map(|h| rng.gen_range(0.3..1.0) / h as f64).collect();
            let phases: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..tau)).collect();
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    let tone: f64 = (0..5)
                        .map(|h| amps[h] * (tau * base * (h + 1) as f64 * t + phases[h]).sin())
                        .sum();
                    tone + 0.02 * rng.gen_range(-1.0..1.0)
                })
                .collect()
        }
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Waveform::new(x, sample_rate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseClip {
    pub id: String,
    pub partition: Partition,
    pub waveform: Waveform,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseBank {
    clips: Vec<NoiseClip>,
}

impl NoiseBank {
    pub fn new(clips: Vec<NoiseClip>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &clips {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Config(format!("noise id {} appears more than once", c.id)));
            }
            if c.waveform.is_empty() {
                return Err(Error::Config(format!("noise clip {} is empty", c.id)));
            }
        }
        Ok(NoiseBank { clips })
    }

    /// `per_kind` clips of every synthetic kind in each partition, each
    /// `seconds` long.
    pub fn synthetic(per_kind: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<Self> {
        Self::synthetic_kinds(&NoiseKind::ALL, &NoiseKind::ALL, per_kind, seconds, sample_rate, seed)
    }

    /// Like [`NoiseBank::synthetic`] with a separate kind list per partition.
    pub fn synthetic_kinds(
        known: &[NoiseKind],
        unknown: &[NoiseKind],
        per_kind: usize,
        seconds: f64,
        sample_rate: u32,
        seed: u64,
    ) -> Result<Self> {
        let len = (seconds * sample_rate as f64).round() as usize;
        let mut clips = Vec::new();
        for (p, (partition, kinds)) in [(Partition::Known, known), (Partition::Unknown, unknown)]
            .into_iter()
            .enumerate()
        {
            for (k, kind) in NoiseKind::ALL.into_iter().enumerate() {
                if !kinds.contains(&kind) {
                    continue;
                }
                for i in 0..per_kind {
                    let clip_seed = seed ^ ((p as u64) << 40 | (k as u64) << 32 | i as u64);
                    clips.push(NoiseClip {
                        id: format!("{partition}-{}-{i}", kind.name()),
                        partition,
                        waveform: synth_noise(kind, len, sample_rate, clip_seed)?,
                    });
                }
            }
        }
        NoiseBank::new(clips)
    }

    pub fn clips(&self) -> &[NoiseClip] {
        &self.clips
    }

    pub fn get(&self, id: &str) -> Option<&NoiseClip> {
        self.clips.iter().find(|c| c.id == id)
    }

    pub fn in_partition(&self, p: Partition) -> Vec<&NoiseClip> {
        self.clips.iter().filter(|c| c.partition == p).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusParams {
    pub snr_values: Vec<f64>,
    pub proportions: Vec<f64>,
    pub partition: Partition,
    pub master_seed: u64,
}

impl CorpusParams {
    /// SNR 0 to 4 dB with the published composition.
    pub fn data1(partition: Partition, master_seed: u64) -> Self {
        CorpusParams {
            snr_values: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            proportions: vec![0.199, 0.203, 0.196, 0.212, 0.190],
            partition,
            master_seed,
        }
    }

    /// SNR 0 to 8 dB, uniform over integer values.
    pub fn data2(partition: Partition, master_seed: u64) -> Self {
        Self::uniform(0..=8, partition, master_seed)
    }

    /// SNR 0 to 12 dB, uniform over integer values.
    pub fn data3(partition: Partition, master_seed: u64) -> Self {
        Self::uniform(0..=12, partition, master_seed)
    }

    pub fn uniform(range: std::ops::RangeInclusive<i32>, partition: Partition, master_seed: u64) -> Self {
        let snr_values: Vec<f64> = range.map(f64::from).collect();
        let n = snr_values.len();
        CorpusParams {
            snr_values,
            proportions: vec![1.0 / n as f64; n],
            partition,
            master_seed,
        }
    }

    pub fn preset(name: &str, partition: Partition, master_seed: u64) -> Result<Self> {
        match name {
            "data1" => Ok(Self::data1(partition, master_seed)),
            "data2" => Ok(Self::data2(partition, master_seed)),
            "data3" => Ok(Self::data3(partition, master_seed)),
            _ => Err(Error::Config(format!("unknown SNR preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_values.is_empty() || self.snr_values.len() != self.proportions.len() {
            return Err(Error::Config(format!(
                "{} SNR values with {} proportions",
                self.snr_values.len(),
                self.proportions.len()
            )));
        }
        if self.snr_values.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("SNR values must be finite".into()));
        }
        if self.proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("proportions must be nonnegative".into()));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("proportions sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Per-utterance seed derived from the master seed and the utterance id.
pub fn utterance_seed(master_seed: u64, clean_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(clean_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Bin counts summing to `n`, by largest remainder.
fn quotas(proportions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    pub clean_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub seed: u64,
    pub noise_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub spec: MixSpec,
    pub partition: Partition,
    pub rescale_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub snr_distribution: Vec<(f64, f64)>,
    pub partition: Partition,
    pub noise_partition: BTreeMap<String, Partition>,
    pub master_seed: u64,
}

pub const MANIFEST_COLUMNS: &str = "clean_id\tnoise_id\tsnr_db\tseed\tnoise_offset\tpartition\trescale_factor";

impl CorpusManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# master_seed={}\n", self.master_seed));
        out.push_str(&format!("# partition={}\n", self.partition));
        let dist: Vec<String> = self.snr_distribution.iter().map(|(s, p)| format!("{s}:{p}")).collect();
        out.push_str(&format!("# snr_distribution={}\n", dist.join(",")));
        for (id, p) in &self.noise_partition {
            out.push_str(&format!("# noise={id}:{p}\n"));
        }
        out.push_str(&format!("# {MANIFEST_COLUMNS}\n"));
        for e in &self.entries {
            let s = &e.spec;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                s.clean_id, s.noise_id, s.snr_db, s.seed, s.noise_offset, e.partition, e.rescale_factor
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("manifest: {m}"));
        let num = |s: &str, what: &str| -> Result<f64> { s.parse().map_err(|_| bad(format!("bad {what} {s:?}"))) };
        let mut master_seed = None;
        let mut partition = None;
        let mut snr_distribution = Vec::new();
        let mut noise_partition = BTreeMap::new();
        let mut entries = Vec::new();
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix("# ") {
                let Some((k, v)) = meta.split_once('=') else { continue };
                match k {
                    "master_seed" => master_seed = Some(v.parse().map_err(|_| bad(format!("bad seed {v:?}")))?),
                    "partition" => partition = Some(v.parse()?),
                    "snr_distribution" => {
                        for pair in v.split(',') {
                            let (s, p) = pair.split_once(':').ok_or_else(|| bad(format!("bad bin {pair:?}")))?;
                            snr_distribution.push((num(s, "snr")?, num(p, "proportion")?));
                        }
                    }
                    "noise" => {
                        let (id, p) = v.rsplit_once(':').ok_or_else(|| bad(format!("bad noise line {v:?}")))?;
                        noise_partition.insert(id.to_string(), p.parse()?);
                    }
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields in {line:?}")));
            }
            entries.push(ManifestEntry {
                spec: MixSpec {
                    clean_id: f[0].to_string(),
                    noise_id: f[1].to_string(),
                    snr_db: num(f[2], "snr_db")?,
                    seed: f[3].parse().map_err(|_| bad(format!("bad seed {:?}", f[3])))?,
                    noise_offset: f[4].parse().map_err(|_| bad(format!("bad offset {:?}", f[4])))?,
                },
                partition: f[5].parse()?,
                rescale_factor: num(f[6], "rescale_factor")?,
            });
        }
        Ok(CorpusManifest {
            entries,
            snr_distribution,
            partition: partition.ok_or_else(|| bad("missing partition".into()))?,
            noise_partition,
            master_seed: master_seed.ok_or_else(|| bad("missing master_seed".into()))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_tsv(&text)
    }

    /// Index of `snr_db` within the distribution's SNR values.
    pub fn snr_bin(&self, snr_db: f64) -> Option<usize> {
        self.snr_distribution.iter().position(|(s, _)| *s == snr_db)
    }

    /// Fraction of entries in each distribution bin.
    pub fn realized_proportions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.snr_distribution.len()];
        for e in &self.entries {
            if let Some(b) = self.snr_bin(e.spec.snr_db) {
                counts[b] += 1;
            }
        }
        counts.iter().map(|&c| c as f64 / self.entries.len().max(1) as f64).collect()
    }
}

/// Mix one manifest entry from its sources.
pub fn render_entry(entry: &ManifestEntry, clean: &Waveform, bank: &NoiseBank) -> Result<MixOutput> {
    let noise = bank
        .get(&entry.spec.noise_id)
        .ok_or_else(|| Error::Mix(format!("noise {} is not in the bank", entry.spec.noise_id)))?;
    mix_at_snr(clean, &noise.waveform, entry.spec.snr_db, entry.spec.noise_offset)
}

/// Assign each clean utterance an SNR and a noise clip and mix it.
///
/// Each utterance draws a uniform key from its own generator; SNR bins are
/// filled in key order up to their quotas, so the realized composition is
/// within one utterance of the requested proportions.
pub fn build_corpus(
    clean: &[(String, Waveform)],
    bank: &NoiseBank,
    params: &CorpusParams,
) -> Result<(CorpusManifest, Vec<Waveform>)> {
    params.validate()?;
    let pool = bank.in_partition(params.partition);
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "no noise clips in the {} partition",
            params.partition
        )));
    }
    let mut ids = BTreeSet::new();
    for (id, _) in clean {
        if !ids.insert(id.as_str()) {
            return Err(Error::Config(format!("clean id {id} appears more than once")));
        }
        if id.contains(['\t', '\n']) {
            return Err(Error::Config(format!("clean id {id:?} contains a tab or newline")));
        }
    }

    struct Draw {
        seed: u64,
        key: f64,
        noise: usize,
        offset: usize,
    }
    let draws: Vec<Draw> = clean
        .iter()
        .map(|(id, _)| {
            let seed = utterance_seed(params.master_seed, id);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let key = rng.gen::<f64>();
            let noise = rng.gen_range(0..pool.len());
            let offset = rng.gen_range(0..pool[noise].waveform.len());
            Draw { seed, key, noise, offset }
        })
        .collect();
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.sort_by(|&a, &b| draws[a].key.total_cmp(&draws[b].key).then_with(|| clean[a].0.cmp(&clean[b].0)));
    let mut bin_of = vec![0usize; clean.len()];
    let mut rank = 0;
    for (bin, count) in quotas(&params.proportions, clean.len()).into_iter().enumerate() {
        for &i in &order[rank..rank + count] {
            bin_of[i] = bin;
        }
        rank += count;
    }

    let mut entries = Vec::with_capacity(clean.len());
    let mut mixed = Vec::with_capacity(clean.len());
    for (i, (id, wave)) in clean.iter().enumerate() {
        let d = &draws[i];
        let clip = pool[d.noise];
        let spec = MixSpec {
            clean_id: id.clone(),
            noise_id: clip.id.clone(),
            snr_db: params.snr_values[bin_of[i]],
            seed: d.seed,
            noise_offset: d.offset,
        };
        let out = mix_at_snr(wave, &clip.waveform, spec.snr_db, spec.noise_offset)
            .map_err(|e| Error::Mix(format!("{id}: {e}")))?;
        entries.push(ManifestEntry {
            spec,
            partition: clip.partition,
            rescale_factor: out.rescale_factor,
        });
        mixed.push(out.waveform);
    }
    let manifest = CorpusManifest {
        entries,
        snr_distribution: params.snr_values.iter().copied().zip(params.proportions.iter().copied()).collect(),
        partition: params.partition,
        noise_partition: bank.clips().iter().map(|c| (c.id.clone(), c.partition)).collect(),
        master_seed: params.master_seed,
    };
    Ok((manifest, mixed))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Snr { clean_id: String, target_db: f64, realized_db: f64 },
    Hygiene { clean_id: String, noise_id: String, detail: String },
    Missing { clean_id: String, detail: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checked: usize,
    pub max_snr_error_db: f64,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn hygiene_ok(&self) -> bool {
        !self.violations.iter().any(|v| matches!(v, Violation::Hygiene { .. }))
    }
}

pub const SNR_TOLERANCE_DB: f64 = 0.1;

/// Re-measure every entry's SNR against its clean source and check that each
/// noise came from the corpus's partition.
pub fn verify_corpus(
    manifest: &CorpusManifest,
    clean: &BTreeMap<String, Waveform>,
    mixed: &BTreeMap<String, Waveform>,
) -> VerifyReport {
    let mut report = VerifyReport::default();
    for e in &manifest.entries {
        let id = &e.spec.clean_id;
        let registered = manifest.noise_partition.get(&e.spec.noise_id);
        if registered != Some(&e.partition) || e.partition != manifest.partition {
            report.violations.push(Violation::Hygiene {
                clean_id: id.clone(),
                noise_id: e.spec.noise_id.clone(),
                detail: format!(
                    "noise registered as {}, tagged {}, corpus is {}",
                    registered.map_or("absent".to_string(), |p| p.to_string()),
                    e.partition,
                    manifest.partition
                ),
            });
        }
        let (Some(c), Some(m)) = (clean.get(id), mixed.get(id)) else {
            report.violations.push(Violation::Missing {
                clean_id: id.clone(),
                detail: "clean or mixed audio not supplied".into(),
            });
            continue;
        };
        match realized_snr_db(c, m, e.rescale_factor) {
            Ok(realized) => {
                let err = (realized - e.spec.snr_db).abs();
                report.checked += 1;
                report.max_snr_error_db = report.max_snr_error_db.max(if err.is_finite() { err } else { f64::INFINITY });
                if !(err < SNR_TOLERANCE_DB) {
                    report.violations.push(Violation::Snr {
                        clean_id: id.clone(),
                        target_db: e.spec.snr_db,
                        realized_db: realized,
                    });
                }
            }
            Err(err) => report.violations.push(Violation::Missing {
                clean_id: id.clone(),
                detail: err.to_string(),
            }),
        }
    }
    report
}
