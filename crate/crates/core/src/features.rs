//! Log-Mel filterbank front end with delta features and patch assembly.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub const DEFAULT_RATE: u32 = 16_000;

    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a 16-bit PCM mono WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Input(format!(
            "{}: expected 16-bit PCM mono, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Write a 16-bit PCM mono WAV file; samples are clamped to the i16 range.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub n_mels: usize,
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub frame_hop: f64,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub delta_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: 40,
            frame_length: 0.025,
            frame_hop: 0.010,
            fft_size: 512,
            fmin: 20.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

impl FeatureConfig {
    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length * sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.frame_hop * sample_rate as f64).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("features: {m}")));
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if !(self.frame_hop > 0.0 && self.frame_hop <= self.frame_length) {
            return bad(format!("frame_hop {} must be in (0, frame_length]", self.frame_hop));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {}; got {}..{}",
                sample_rate as f64 / 2.0,
                self.fmin,
                self.fmax
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        let l = self.frame_samples(sample_rate);
        if l == 0 || self.hop_samples(sample_rate) == 0 {
            return bad("frame length and hop must be at least one sample".into());
        }
        if self.fft_size < l {
            return bad(format!("fft_size {} is shorter than the {l}-sample frame", self.fft_size));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Split into Hann-windowed frames at hop intervals.
pub fn frame_signal(w: &Waveform, cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate(w.sample_rate)?;
    let l = cfg.frame_samples(w.sample_rate);
    let h = cfg.hop_samples(w.sample_rate);
    if w.len() < l {
        return Err(Error::Input(format!(
            "signal of {} samples is shorter than one {l}-sample frame",
            w.len()
        )));
    }
    let window = hann(l);
    let t = 1 + (w.len() - l) / h;
    Ok((0..t)
        .map(|i| {
            w.samples[i * h..i * h + l]
                .iter()
                .zip(&window)
                .map(|(s, c)| s * c)
                .collect()
        })
        .collect())
}

/// Triangular filters with unit peak, Mel-spaced between `fmin` and `fmax`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub centers_hz: Vec<f64>,
    /// `n_mels` rows of `fft_size / 2 + 1` weights.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bins = cfg.fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= left || f >= right {
                            0.0
                        } else if f <= center {
                            (f - left) / (center - left)
                        } else {
                            (right - f) / (right - center)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(MelFilterbank {
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
            weights,
        })
    }

    /// Index of the band whose center frequency is nearest `f`.
    pub fn nearest_band(&self, f: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers_hz.iter().enumerate() {
            if (c - f).abs() < (self.centers_hz[best] - f).abs() {
                best = i;
            }
        }
        best
    }
}

/// Natural-log Mel energies, one row of `n_mels` values per frame.
pub fn log_mel_filterbank(frames: &[Vec<f64>], cfg: &FeatureConfig, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let bank = MelFilterbank::new(cfg, sample_rate)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.fft_size / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        if frame.len() > cfg.fft_size {
            return Err(Error::Input(format!(
                "frame of {} samples exceeds fft_size {}",
                frame.len(),
                cfg.fft_size
            )));
        }
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &s) in buf.iter_mut().zip(frame) {
            b.re = s;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        out.push(
            bank.weights
                .iter()
                .map(|w| {
                    let e: f64 = w.iter().zip(&power).map(|(a, p)| a * p).sum();
                    e.max(cfg.log_floor).ln()
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Regression deltas over a half-window of `w` frames, replicating the edge
/// frames.
pub fn compute_deltas(features: &[Vec<f64>], w: usize) -> Vec<Vec<f64>> {
    let t = features.len();
    if t == 0 {
        return Vec::new();
    }
    let d = features[0].len();
    let denom = 2.0 * (1..=w).map(|n| (n * n) as f64).sum::<f64>();
    (0..t)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let mut acc = 0.0;
                    for n in 1..=w {
                        let ahead = features[(i + n).min(t - 1)][j];
                        let behind = features[i.saturating_sub(n)][j];
                        acc += n as f64 * (ahead - behind);
                    }
                    if denom == 0.0 {
                        0.0
                    } else {
                        acc / denom
                    }
                })
                .collect()
        })
        .collect()
}

/// Static, delta and delta-delta planes, each `num_frames × n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub statics: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub delta2: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn from_statics(statics: Vec<Vec<f64>>, delta_window: usize) -> Self {
        let delta = compute_deltas(&statics, delta_window);
        let delta2 = compute_deltas(&delta, delta_window);
        FeatureMatrix { statics, delta, delta2 }
    }

    pub fn num_frames(&self) -> usize {
        self.statics.len()
    }

    pub fn n_mels(&self) -> usize {
        self.statics.first().map_or(0, Vec::len)
    }

    pub fn planes(&self) -> [&Vec<Vec<f64>>; 3] {
        [&self.statics, &self.delta, &self.delta2]
    }

    /// `[3, num_frames, n_mels]`.
    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        let data = self
            .planes()
            .iter()
            .flat_map(|p| p.iter().flatten())
            .map(|&v| F::of(v))
            .collect();
        Tensor::new(vec![3, self.num_frames(), self.n_mels()], data)
    }

    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Format(format!("feature tensor must be [3, T, D], got {s:?}")));
        }
        let (frames, d) = (s[1], s[2]);
        let plane = |c: usize| -> Vec<Vec<f64>> {
            (0..frames)
                .map(|i| {
                    let at = (c * frames + i) * d;
                    t.data()[at..at + d].iter().map(|v| v.as_f64()).collect()
                })
                .collect()
        };
        Ok(FeatureMatrix {
            statics: plane(0),
            delta: plane(1),
            delta2: plane(2),
        })
    }
}

pub fn extract_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let frames = frame_signal(w, cfg)?;
    let statics = log_mel_filterbank(&frames, cfg, w.sample_rate)?;
    Ok(FeatureMatrix::from_statics(statics, cfg.delta_window))
}

/// Per-plane, per-band mean and standard deviation over a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [Vec<f64>; 3],
    pub std: [Vec<f64>; 3],
}

impl Normalizer {
    pub fn fit(corpus: &[FeatureMatrix]) -> Result<Self> {
        let d = corpus
            .first()
            .map(FeatureMatrix::n_mels)
            .ok_or_else(|| Error::Input("cannot fit a normalizer on an empty corpus".into()))?;
        if corpus.iter().any(|f| f.n_mels() != d) {
            return Err(Error::Input("feature matrices disagree on n_mels".into()));
        }
        let count: usize = corpus.iter().map(FeatureMatrix::num_frames).sum();
        let mut mean = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        let mut std = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        for c in 0..3 {
            for fm in corpus {
                for row in fm.planes()[c] {
                    for (m, v) in mean[c].iter_mut().zip(row) {
                        *m += v;
                    }
                }
            }
            mean[c].iter_mut().for_each(|m| *m /= count as f64);
            for fm in corpus {
                for row in fm.planes()[c] {
                    for ((s, v), m) in std[c].iter_mut().zip(row).zip(&mean[c]) {
                        *s += (v - m) * (v - m);
                    }
                }
            }
            for s in std[c].iter_mut() {
                let var = *s / count as f64;
                *s = if var > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, fm: &FeatureMatrix) -> Result<FeatureMatrix> {
        if fm.n_mels() != self.mean[0].len() {
            return Err(Error::Input(format!(
                "normalizer has {} bands, features have {}",
                self.mean[0].len(),
                fm.n_mels()
            )));
        }
        let norm = |c: usize, plane: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            plane
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| (v - self.mean[c][j]) / self.std[c][j])
                        .collect()
                })
                .collect()
        };
        Ok(FeatureMatrix {
            statics: norm(0, &fm.statics),
            delta: norm(1, &fm.delta),
            delta2: norm(2, &fm.delta2),
        })
    }
}

/// Every `patch_width`-frame window at stride 1 as `[P, 3, n_mels, patch_width]`,
/// with frequency along the height and time along the width.
pub fn assemble_patches<F: Real>(fm: &FeatureMatrix, patch_width: usize) -> Result<Tensor<F>> {
    let t = fm.num_frames();
    if patch_width == 0 || t < patch_width {
        return Err(Error::Input(format!(
            "{t} frames cannot hold a patch of width {patch_width}"
        )));
    }
    let d = fm.n_mels();
    let p = t - patch_width + 1;
    let mut data = Vec::with_capacity(p * 3 * d * patch_width);
    for start in 0..p {
        for plane in fm.planes() {
            for band in 0..d {
                for dt in 0..patch_width {
                    data.push(F::of(plane[start + dt][band]));
                }
            }
        }
    }
    Tensor::new(vec![p, 3, d, patch_width], data)
}

/// One row of a feature archive index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub utterance_id: String,
    pub path: String,
    pub num_frames: usize,
    pub label: usize,
    pub domain: usize,
}

pub const ARCHIVE_INDEX: &str = "index.tsv";

/// Write feature matrices as tensor files plus a tab-separated index.
pub fn write_archive(
    dir: impl AsRef<Path>,
    items: &[(String, FeatureMatrix, usize, usize)],
) -> Result<Vec<ArchiveEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(items.len());
    let mut index = fs::File::create(dir.join(ARCHIVE_INDEX))?;
    writeln!(index, "# utterance_id\tpath\tframes\tlabel\tdomain")?;
    for (id, fm, label, domain) in items {
        if id.contains(['\t', '\n', '/']) {
            return Err(Error::Input(format!("utterance id {id:?} is not a plain name")));
        }
        let path = format!("{id}.dgt");
        fm.to_tensor::<f64>()?.save(dir.join(&path))?;
        writeln!(index, "{id}\t{path}\t{}\t{label}\t{domain}", fm.num_frames())?;
        entries.push(ArchiveEntry {
            utterance_id: id.clone(),
            path,
            num_frames: fm.num_frames(),
            label: *label,
            domain: *domain,
        });
    }
    Ok(entries)
}

pub fn read_archive_index(dir: impl AsRef<Path>) -> Result<Vec<ArchiveEntry>> {
    let path = dir.as_ref().join(ARCHIVE_INDEX);
    let file = fs::File::open(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad archive index line {line:?}")))
        };
        if f.len() != 5 {
            return Err(Error::Format(format!("bad archive index line {line:?}")));
        }
        out.push(ArchiveEntry {
            utterance_id: f[0].to_string(),
            path: f[1].to_string(),
            num_frames: parse(f[2])?,
            label: parse(f[3])?,
            domain: parse(f[4])?,
        });
    }
    Ok(out)
}

pub fn load_archive_entry(dir: impl AsRef<Path>, entry: &ArchiveEntry) -> Result<FeatureMatrix> {
    let fm = FeatureMatrix::from_tensor(&Tensor::<f64>::load(dir.as_ref().join(&entry.path))?)?;
    if fm.num_frames() != entry.num_frames {
        return Err(Error::Format(format!(
            "{} holds {} frames, index says {}",
            entry.path,
            fm.num_frames(),
            entry.num_frames
        )));
    }
    Ok(fm)
}

#[cfg(test)]
mod tests;
