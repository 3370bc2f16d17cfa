//! Checkpoint directories: a `manifest.txt` of `key=value` lines plus one
//! tensor file per parameter and per batch-norm statistic.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::adversarial::{build_adversarial, AdversarialConfig, AdversarialModel};
use crate::densenet::{build_densenet, DenseNetConfig, Model};
use crate::error::{Error, Result};
use crate::params::{ParameterSet, StatsSet};
use crate::tensor::{Precision, Real, Tensor};

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "densenet-ad-checkpoint/1";

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint<F> {
    Plain(Model<F>),
    Adversarial(AdversarialModel<F>),
}

impl<F: Real> Checkpoint<F> {
    pub fn config(&self) -> &DenseNetConfig {
        match self {
            Checkpoint::Plain(m) => &m.arch.config,
            Checkpoint::Adversarial(m) => &m.arch.config,
        }
    }

    pub fn params(&self) -> &ParameterSet<F> {
        match self {
            Checkpoint::Plain(m) => &m.params,
            Checkpoint::Adversarial(m) => &m.params,
        }
    }

    pub fn stats(&self) -> &StatsSet<F> {
        match self {
            Checkpoint::Plain(m) => &m.stats,
            Checkpoint::Adversarial(m) => &m.stats,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.config().num_classes
    }

    pub fn num_domains(&self) -> Option<usize> {
        match self {
            Checkpoint::Plain(_) => None,
            Checkpoint::Adversarial(m) => Some(m.num_domains()),
        }
    }

    pub fn predict_labels(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Checkpoint::Plain(m) => m.predict(input),
            Checkpoint::Adversarial(m) => m.predict_labels(input),
        }
    }

    pub fn predict_domains(&self, input: &Tensor<F>) -> Result<Option<Tensor<F>>> {
        match self {
            Checkpoint::Plain(_) => Ok(None),
            Checkpoint::Adversarial(m) => m.predict_domains(input).map(Some),
        }
    }

    fn manifest(&self) -> String {
        let c = self.config();
        let mut lines = vec![
            format!("format={FORMAT}"),
            format!(
                "kind={}",
                if matches!(self, Checkpoint::Plain(_)) { "plain" } else { "adversarial" }
            ),
            format!(
                "precision={}",
                if F::PRECISION == Precision::High { "high" } else { "standard" }
            ),
            format!("model.num_blocks={}", c.num_blocks),
            format!("model.layers_per_block={}", c.layers_per_block),
            format!("model.growth_rate={}", c.growth_rate),
            format!("model.compression={}", c.compression),
            format!("model.initial_channels={}", c.initial_channels),
            format!("model.input_channels={}", c.input_channels),
            format!("model.num_classes={}", c.num_classes),
        ];
        if let Checkpoint::Adversarial(m) = self {
            let split = m.arch.stages[m.shared_stages - 1].name();
            let split = split.strip_prefix("x.").unwrap_or(split);
            lines.push(format!("adversarial.shared_split={split}"));
            let hidden: Vec<String> = m.domain.hidden.iter().map(usize::to_string).collect();
            lines.push(format!("adversarial.domain_hidden={}", hidden.join(",")));
            lines.push(format!("adversarial.num_domains={}", m.domain.num_domains));
        }
        lines.push(String::new());
        lines.join("\n")
    }
}

fn param_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("params").join(format!("{name}.dgt"))
}

fn stat_path(dir: &Path, name: &str, which: &str) -> PathBuf {
    dir.join("stats").join(format!("{name}.{which}.dgt"))
}

/// Write `ckpt` into `dir`, creating it if needed.
pub fn save_checkpoint<F: Real>(dir: impl AsRef<Path>, ckpt: &Checkpoint<F>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("stats"))?;
    fs::write(dir.join(MANIFEST), ckpt.manifest())?;
    for (name, t) in ckpt.params().iter() {
        t.save(param_path(dir, name))?;
    }
    for (name, s) in ckpt.stats().iter() {
        let c = s.channels();
        Tensor::new(vec![c], s.mean.clone())?.save(stat_path(dir, name, "mean"))?;
        Tensor::new(vec![c], s.var.clone())?.save(stat_path(dir, name, "var"))?;
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Load(format!("malformed manifest line {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    if out.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Load(format!("{} is not a checkpoint manifest", path.display())));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    m.get(key)
        .ok_or_else(|| Error::Load(format!("manifest missing {key}")))?
        .parse()
        .map_err(|_| Error::Load(format!("manifest field {key} is malformed")))
}

fn fill<F: Real>(dir: &Path, params: &mut ParameterSet<F>, stats: &mut StatsSet<F>) -> Result<()> {
    for (name, t) in params.iter_mut() {
        let loaded = Tensor::<F>::load(param_path(dir, name))?;
        if loaded.shape() != t.shape() {
            return Err(Error::Load(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded;
    }
    for (name, s) in stats.iter_mut() {
        for (which, slot) in [("mean", &mut s.mean), ("var", &mut s.var)] {
            let loaded = Tensor::<F>::load(stat_path(dir, name, which))?;
            if loaded.numel() != slot.len() {
                return Err(Error::Load(format!("statistics {name}.{which} have the wrong length")));
            }
            *slot = loaded.into_data();
        }
    }
    Ok(())
}

/// Element precision recorded in a checkpoint manifest.
pub fn checkpoint_precision(dir: impl AsRef<Path>) -> Result<Precision> {
    let m = read_manifest(dir.as_ref())?;
    let p: String = field(&m, "precision")?;
    match p.as_str() {
        "high" => Ok(Precision::High),
        "standard" => Ok(Precision::Standard),
        other => Err(Error::Load(format!("unknown precision {other:?}"))),
    }
}

pub fn load_checkpoint<F: Real>(dir: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let config = DenseNetConfig {
        num_blocks: field(&m, "model.num_blocks")?,
        layers_per_block: field(&m, "model.layers_per_block")?,
        growth_rate: field(&m, "model.growth_rate")?,
        compression: field(&m, "model.compression")?,
        initial_channels: field(&m, "model.initial_channels")?,
        input_channels: field(&m, "model.input_channels")?,
        num_classes: field(&m, "model.num_classes")?,
    };
    let kind: String = field(&m, "kind")?;
    let to_load = |e: Error| Error::Load(format!("checkpoint architecture: {e}"));
    match kind.as_str() {
        "plain" => {
            let mut model = build_densenet::<F>(&config, 0).map_err(to_load)?;
            fill(dir, &mut model.params, &mut model.stats)?;
            Ok(Checkpoint::Plain(model))
        }
        "adversarial" => {
            let hidden: String = m.get("adversarial.domain_hidden").cloned().unwrap_or_default();
            let domain_hidden = hidden
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Load(format!("bad domain width {s:?}"))))
                .collect::<Result<Vec<usize>>>()?;
            let adv = AdversarialConfig {
                shared_split: field(&m, "adversarial.shared_split")?,
                domain_hidden,
                ..AdversarialConfig::default()
            };
            let num_domains = field(&m, "adversarial.num_domains")?;
            let mut model = build_adversarial::<F>(&config, num_domains, &adv, 0).map_err(to_load)?;
            fill(dir, &mut model.params, &mut model.stats)?;
            Ok(Checkpoint::Adversarial(model))
        }
        other => Err(Error::Load(format!("unknown checkpoint kind {other:?}"))),
    }
}

/// SHA-256 over every file in the checkpoint, in sorted relative-path order.
pub fn checkpoint_hash(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                pending.push(path);
            } else {
                files.push(path);
            }
        }
    }
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| (p.strip_prefix(dir).expect("inside dir").to_string_lossy().replace('\\', "/"), p))
        .collect();
    rel.sort();
    let mut h = Sha256::new();
    for (name, path) in rel {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::AdversarialConfig;

    fn adversarial() -> AdversarialModel<f32> {
        let adv = AdversarialConfig {
            shared_split: "block1".into(),
            domain_hidden: vec![6, 5],
            ..AdversarialConfig::default()
        };
        let mut m = build_adversarial::<f32>(&DenseNetConfig::tiny(4), 3, &adv, 12).unwrap();
        for (_, s) in m.stats.iter_mut() {
            s.mean.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.5);
        }
        m
    }

    #[test]
    fn adversarial_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint::Adversarial(adversarial());
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.num_domains(), Some(3));
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("adversarial.shared_split=block1\n"));
        assert!(text.contains("precision=standard\n"));
    }

    #[test]
    fn plain_round_trip_and_widening() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_densenet::<f32>(&DenseNetConfig::tiny(2), 5).unwrap();
        save_checkpoint(dir.path(), &Checkpoint::Plain(model.clone())).unwrap();
        let back = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(back.num_domains(), None);
        for (name, t) in model.params.iter() {
            assert_eq!(&back.params().get(name).unwrap().cast::<f32>(), t);
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut m = adversarial();
        save_checkpoint(a.path(), &Checkpoint::Adversarial(m.clone())).unwrap();
        save_checkpoint(b.path(), &Checkpoint::Adversarial(m.clone())).unwrap();
        assert_eq!(checkpoint_hash(a.path()).unwrap(), checkpoint_hash(b.path()).unwrap());
        m.params.get_mut("z.domain.fc0.bias").unwrap().data_mut()[0] = 1.0;
        save_checkpoint(b.path(), &Checkpoint::Adversarial(m)).unwrap();
        assert_ne!(checkpoint_hash(a.path()).unwrap(), checkpoint_hash(b.path()).unwrap());
    }

    #[test]
    fn missing_or_damaged_files_are_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Load(_))));
        save_checkpoint(dir.path(), &Checkpoint::Adversarial(adversarial())).unwrap();
        fs::remove_file(param_path(dir.path(), "y.head.fc.bias")).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Load(_))));
        fs::write(dir.path().join(MANIFEST), "kind=plain\n").unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Load(_))));
    }
}
