//! Line-oriented `key=value` experiment configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adversarial::AdversarialConfig;
use crate::densenet::DenseNetConfig;
use crate::error::{Error, Result};
use crate::experiment::toy::ToyTaskSpec;
use crate::features::FeatureConfig;
use crate::noise::{CorpusParams, NoiseKind, Partition};
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Generate the synthetic toy task (or read it from `data.toy_dir`).
    Toy,
    /// Read feature archives written by `featurize`.
    Features,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    pub source: Option<DataSource>,
    pub corpus_dir: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub toy_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Synthetic clean speech, the noise bank and the SNR design of the mixed
/// corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct MixConfig {
    /// `data1`, `data2`, `data3` or `uniform:LO..HI` (integer dB).
    pub preset: String,
    pub sample_rate: u32,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub utterance_seconds: f64,
    pub known_kinds: Vec<NoiseKind>,
    pub unknown_kinds: Vec<NoiseKind>,
    pub noise_per_kind: usize,
    pub noise_seconds: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            preset: "data1".into(),
            sample_rate: 16_000,
            classes: 4,
            train_per_class: 25,
            test_per_class: 10,
            utterance_seconds: 0.5,
            known_kinds: NoiseKind::ALL.to_vec(),
            unknown_kinds: NoiseKind::ALL.to_vec(),
            noise_per_kind: 2,
            noise_seconds: 2.0,
        }
    }
}

impl MixConfig {
    pub fn corpus_params(&self, partition: Partition, master_seed: u64) -> Result<CorpusParams> {
        let params = match self.preset.strip_prefix("uniform:") {
            Some(range) => {
                let (lo, hi) = range
                    .split_once("..")
                    .ok_or_else(|| Error::Config(format!("mix.preset: bad range {range:?}")))?;
                let lo: i32 = parse_value("mix.preset", lo)?;
                let hi: i32 = parse_value("mix.preset", hi)?;
                if lo > hi {
                    return Err(Error::Config(format!("mix.preset: empty range {range:?}")));
                }
                CorpusParams::uniform(lo..=hi, partition, master_seed)
            }
            None => CorpusParams::preset(&self.preset, partition, master_seed)?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn num_domains(&self) -> Result<usize> {
        Ok(self.corpus_params(Partition::Known, 0)?.snr_values.len())
    }

    fn validate(&self) -> Result<()> {
        self.corpus_params(Partition::Known, 0)?;
        if self.classes < 2 {
            return Err(Error::Config("mix.classes must be at least 2".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || self.noise_per_kind == 0 {
            return Err(Error::Config(
                "mix.train_per_class, mix.test_per_class and mix.noise_per_kind must be positive".into(),
            ));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("mix.sample_rate must be positive".into()));
        }
        if !(self.utterance_seconds > 0.0 && self.noise_seconds > 0.0) {
            return Err(Error::Config("mix durations must be positive".into()));
        }
        if self.known_kinds.is_empty() {
            return Err(Error::Config("mix.known_kinds is empty: the known partition has no noise".into()));
        }
        if self.unknown_kinds.is_empty() {
            return Err(Error::Config(
                "mix.unknown_kinds is empty: the unknown partition has no noise".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            batch_size: 32,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub output: Option<PathBuf>,
    /// `num_classes` is taken from the data at train time.
    pub model: DenseNetConfig,
    pub adversarial_enabled: bool,
    pub adversarial: AdversarialConfig,
    pub features: FeatureConfig,
    pub patch_width: usize,
    pub data: DataConfig,
    pub toy: ToyTaskSpec,
    pub mix: MixConfig,
    pub schedule: TrainSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            precision: Precision::Standard,
            output: None,
            model: DenseNetConfig::default(),
            adversarial_enabled: true,
            adversarial: AdversarialConfig::default(),
            features: FeatureConfig::default(),
            patch_width: 11,
            data: DataConfig::default(),
            toy: ToyTaskSpec::default(),
            mix: MixConfig::default(),
            schedule: TrainSettings::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_kinds(key: &str, v: &str) -> Result<Vec<NoiseKind>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<NoiseKind>().map_err(|_| Error::Config(format!("{key}: unknown noise kind {s:?}"))))
        .collect()
}

impl ExperimentConfig {
    /// Parse `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = |v: &str| Some(PathBuf::from(v));
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "precision" => {
                self.precision = match v {
                    "standard" | "f32" => Precision::Standard,
                    "high" | "f64" => Precision::High,
                    _ => return Err(Error::Config(format!("precision: expected standard or high, got {v:?}"))),
                }
            }
            "output" => self.output = p(v),

            "model.num_blocks" => self.model.num_blocks = parse_value(key, v)?,
            "model.layers_per_block" => self.model.layers_per_block = parse_value(key, v)?,
            "model.growth_rate" => self.model.growth_rate = parse_value(key, v)?,
            "model.compression" => self.model.compression = parse_value(key, v)?,
            "model.initial_channels" => self.model.initial_channels = parse_value(key, v)?,

            "adversarial.enabled" => self.adversarial_enabled = parse_bool(key, v)?,
            "adversarial.lambda" => self.adversarial.lambda = parse_value(key, v)?,
            "adversarial.epsilon" | "schedule.epsilon" => self.adversarial.epsilon = parse_value(key, v)?,
            "adversarial.shared_split" => self.adversarial.shared_split = v.to_string(),
            "adversarial.domain_hidden" => self.adversarial.domain_hidden = parse_list(key, v)?,

            "schedule.steps" => self.schedule.steps = parse_value(key, v)?,
            "schedule.batch_size" => self.schedule.batch_size = parse_value(key, v)?,
            "schedule.eval_every" => self.schedule.eval_every = parse_value(key, v)?,

            "features.n_mels" => self.features.n_mels = parse_value(key, v)?,
            "features.frame_length" => self.features.frame_length = parse_value(key, v)?,
            "features.frame_hop" => self.features.frame_hop = parse_value(key, v)?,
            "features.fft_size" => self.features.fft_size = parse_value(key, v)?,
            "features.fmin" => self.features.fmin = parse_value(key, v)?,
            "features.fmax" => self.features.fmax = parse_value(key, v)?,
            "features.log_floor" => self.features.log_floor = parse_value(key, v)?,
            "features.delta_window" => self.features.delta_window = parse_value(key, v)?,
            "features.patch_width" => self.patch_width = parse_value(key, v)?,

            "data.source" => {
                self.data.source = Some(match v {
                    "toy" => DataSource::Toy,
                    "features" => DataSource::Features,
                    _ => return Err(Error::Config(format!("data.source: expected toy or features, got {v:?}"))),
                })
            }
            "data.corpus_dir" => self.data.corpus_dir = p(v),
            "data.features_dir" => self.data.features_dir = p(v),
            "data.toy_dir" => self.data.toy_dir = p(v),
            "data.checkpoint" => self.data.checkpoint = p(v),

            "toy.num_label_classes" => self.toy.num_label_classes = parse_value(key, v)?,
            "toy.num_domains" => self.toy.num_domains = parse_value(key, v)?,
            "toy.samples_per_class" => self.toy.samples_per_class = parse_value(key, v)?,
            "toy.n_mels" => self.toy.n_mels = parse_value(key, v)?,
            "toy.width" => self.toy.width = parse_value(key, v)?,
            "toy.class_template_seed" => self.toy.class_template_seed = parse_value(key, v)?,
            "toy.template_gain" => self.toy.template_gain = parse_value(key, v)?,
            "toy.shift_gain" => self.toy.shift_gain = parse_value(key, v)?,
            "toy.domain_gain" => self.toy.domain_gain = parse_value(key, v)?,
            "toy.noise_std" => self.toy.noise_std = parse_value(key, v)?,
            "toy.test_fraction" => self.toy.test_fraction = parse_value(key, v)?,

            "mix.preset" => self.mix.preset = v.to_string(),
            "mix.sample_rate" => self.mix.sample_rate = parse_value(key, v)?,
            "mix.classes" => self.mix.classes = parse_value(key, v)?,
            "mix.train_per_class" => self.mix.train_per_class = parse_value(key, v)?,
            "mix.test_per_class" => self.mix.test_per_class = parse_value(key, v)?,
            "mix.utterance_seconds" => self.mix.utterance_seconds = parse_value(key, v)?,
            "mix.known_kinds" => self.mix.known_kinds = parse_kinds(key, v)?,
            "mix.unknown_kinds" => self.mix.unknown_kinds = parse_kinds(key, v)?,
            "mix.noise_per_kind" => self.mix.noise_per_kind = parse_value(key, v)?,
            "mix.noise_seconds" => self.mix.noise_seconds = parse_value(key, v)?,

            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        model.num_classes = 2;
        model.validate()?;
        if model.input_channels != 3 {
            return Err(Error::Config("models take 3 input planes".into()));
        }
        self.adversarial.validate()?;
        self.features.validate(self.mix.sample_rate)?;
        if self.patch_width == 0 {
            return Err(Error::Config("features.patch_width must be positive".into()));
        }
        self.toy.validate()?;
        self.mix.validate()?;
        if self.schedule.batch_size == 0 || self.schedule.eval_every == 0 {
            return Err(Error::Config("schedule.batch_size and schedule.eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn source(&self) -> DataSource {
        self.data.source.unwrap_or(if self.data.features_dir.is_some() {
            DataSource::Features
        } else {
            DataSource::Toy
        })
    }

    /// Require `path` to be set and to exist.
    pub fn existing(&self, key: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let path = path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{key} is required")))?;
        if !path.exists() {
            return Err(Error::Config(format!("{key}: {} does not exist", path.display())));
        }
        Ok(path.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let c = ExperimentConfig::parse(
            "# toy\nseed = 9\nprecision=high\nmodel.num_blocks=2\nadversarial.domain_hidden=8,4\n\
             adversarial.enabled=false\nschedule.epsilon=0.05\ntoy.shift_gain=0\nmix.known_kinds=white\n\
             mix.preset=uniform:0..4\nfeatures.patch_width=5\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.precision, Precision::High);
        assert_eq!(c.model.num_blocks, 2);
        assert_eq!(c.adversarial.domain_hidden, vec![8, 4]);
        assert!(!c.adversarial_enabled);
        assert_eq!(c.adversarial.epsilon, 0.05);
        assert_eq!(c.toy.shift_gain, 0.0);
        assert_eq!(c.mix.known_kinds, vec![NoiseKind::White]);
        assert_eq!(c.mix.num_domains().unwrap(), 5);
        assert_eq!(c.patch_width, 5);
        assert_eq!(ExperimentConfig::parse("adversarial.domain_hidden=").unwrap().adversarial.domain_hidden, vec![]);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense",
            "model.depth=3",
            "seed=-1",
            "precision=half",
            "adversarial.lambda=-1",
            "model.compression=0",
            "schedule.batch_size=0",
            "mix.preset=data9",
            "mix.preset=uniform:4..0",
            "mix.unknown_kinds=",
            "mix.known_kinds=static",
            "data.source=disk",
            "features.fmax=99999",
        ] {
            let e = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn source_defaults_follow_paths() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.source(), DataSource::Toy);
        c.data.features_dir = Some("f".into());
        assert_eq!(c.source(), DataSource::Features);
        assert!(matches!(c.existing("data.features_dir", &c.data.features_dir), Err(Error::Config(_))));
    }
}
