//! Command implementations behind the `densenet-ad` binary: corpus mixing,
//! featurization, training, evaluation, gradient checks and the toy task.

pub mod config;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    build_adversarial, classification_metrics, train_into, train_plain_into, Dataset, Schedule, TrainingLog,
};
use crate::checkpoint::{checkpoint_hash, checkpoint_precision, load_checkpoint, save_checkpoint, Checkpoint};
use crate::densenet::{build_densenet, DenseNetConfig};
use crate::error::{Error, Result};
use crate::features::{
    assemble_patches, extract_features, load_archive_entry, read_archive_index, read_wav, write_archive, write_wav,
    FeatureMatrix, Normalizer, Waveform,
};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::noise::{
    build_corpus, utterance_seed, verify_corpus, CorpusManifest, NoiseBank, NoiseClip, Partition, VerifyReport,
};
use crate::tensor::{Precision, Real, Tensor};

pub use config::{DataSource, ExperimentConfig, MixConfig, TrainSettings};
pub use toy::{make_toy_task, ToyTask, ToyTaskSpec};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LABELS_FILE: &str = "labels.tsv";

const CLEAN_SALT: u64 = 0x636c_6561_6e00;

/// The three mixed corpora: training data, a known-noise test set and an
/// unknown-noise test set.
pub const SPLITS: [(&str, Partition); 3] = [
    ("train", Partition::Known),
    ("knn", Partition::Known),
    ("ukn", Partition::Unknown),
];

fn split_seed(master: u64, i: usize) -> u64 {
    master.wrapping_add(i as u64)
}

/// A voiced, syllable-modulated harmonic signal whose formant positions
/// depend on `class`. Peak amplitude 0.3.
pub fn synth_utterance(class: usize, classes: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if classes < 2 || class >= classes {
        return Err(Error::Config(format!("class {class} of {classes}")));
    }
    let sr = sample_rate as f64;
    let len = (seconds * sr).round() as usize;
    if len == 0 {
        return Err(Error::Config("utterance has no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * std::f64::consts::PI;
    let pos = class as f64 / (classes - 1) as f64;
    let formants = [(300.0 + 600.0 * pos, 110.0), (2300.0 - 1100.0 * pos, 160.0), (3000.0 + 400.0 * pos, 220.0)];
    let f0: f64 = rng.gen_range(100.0..160.0);
    let rate: f64 = rng.gen_range(3.0..5.0);
    let env_phase: f64 = rng.gen_range(0.0..tau);
    let nyquist = 0.45 * sr;
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < nyquist)
        .map(|f| {
            let amp: f64 = formants
                .iter()
                .map(|(c, bw)| (-((f - c) / bw).powi(2)).exp())
                .sum::<f64>()
                + 0.02;
            (f, amp, rng.gen_range(0.0..tau))
        })
        .collect();
    let mut x: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.55 - 0.45 * (tau * rate * t + env_phase).cos();
            env * harmonics.iter().map(|(f, a, ph)| a * (tau * f * t + ph).sin()).sum::<f64>()
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in &mut x {
        *v *= 0.3 / peak;
    }
    Waveform::new(x, sample_rate)
}

fn write_labels(path: &Path, labels: &[(String, usize)]) -> Result<()> {
    let mut text = String::from("# utterance_id\tlabel\n");
    for (id, l) in labels {
        text.push_str(&format!("{id}\t{l}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let (id, l) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("bad label line {line:?}")))?;
        let l = l
            .parse()
            .map_err(|_| Error::Format(format!("bad label line {line:?}")))?;
        out.insert(id.to_string(), l);
    }
    Ok(out)
}

fn write_quantized(path: &Path, w: &Waveform) -> Result<Waveform> {
    write_wav(path, w)?;
    read_wav(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixSplit {
    pub name: String,
    pub manifest: CorpusManifest,
    pub verify: VerifyReport,
}

/// Generate clean utterances and a noise bank, mix the train, KNN and UKN
/// corpora, and verify them from the files written to disk.
pub fn cmd_mix(config: &ExperimentConfig, out: &Path) -> Result<Vec<MixSplit>> {
    config.validate()?;
    let mix = &config.mix;
    let params: Vec<_> = SPLITS
        .iter()
        .enumerate()
        .map(|(i, (_, p))| mix.corpus_params(*p, split_seed(config.seed, i)))
        .collect::<Result<_>>()?;

    let noise_dir = out.join("noise");
    fs::create_dir_all(&noise_dir)?;
    let bank = NoiseBank::synthetic_kinds(
        &mix.known_kinds,
        &mix.unknown_kinds,
        mix.noise_per_kind,
        mix.noise_seconds,
        mix.sample_rate,
        config.seed,
    )?;
    let clips = bank
        .clips()
        .iter()
        .map(|c| {
            Ok(NoiseClip {
                waveform: write_quantized(&noise_dir.join(format!("{}.wav", c.id)), &c.waveform)?,
                ..c.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bank = NoiseBank::new(clips)?;

    let mut splits = Vec::new();
    for (i, ((name, _), params)) in SPLITS.iter().zip(params).enumerate() {
        let dir = out.join(name);
        fs::create_dir_all(dir.join("clean"))?;
        fs::create_dir_all(dir.join("mixed"))?;
        let per_class = if i == 0 { mix.train_per_class } else { mix.test_per_class };
        let mut clean = Vec::new();
        let mut labels = Vec::new();
        for c in 0..mix.classes {
            for k in 0..per_class {
                let id = format!("{name}-c{c}-{k:03}");
                let seed = utterance_seed(config.seed ^ CLEAN_SALT, &id);
                let w = synth_utterance(c, mix.classes, mix.utterance_seconds, mix.sample_rate, seed)?;
                let w = write_quantized(&dir.join("clean").join(format!("{id}.wav")), &w)?;
                labels.push((id.clone(), c));
                clean.push((id, w));
            }
        }
        let (manifest, mixed) = build_corpus(&clean, &bank, &params)?;
        let mut mixed_map = BTreeMap::new();
        for ((id, _), w) in clean.iter().zip(mixed) {
            mixed_map.insert(
                id.clone(),
                write_quantized(&dir.join("mixed").join(format!("{id}.wav")), &w)?,
            );
        }
        manifest.save(dir.join(MANIFEST_FILE))?;
        write_labels(&dir.join(LABELS_FILE), &labels)?;
        let verify = verify_corpus(&manifest, &clean.into_iter().collect(), &mixed_map);
        if !verify.is_clean() {
            return Err(Error::Mix(format!("{name}: {:?}", verify.violations)));
        }
        splits.push(MixSplit {
            name: name.to_string(),
            manifest,
            verify,
        });
    }
    Ok(splits)
}

fn save_normalizer(path: &Path, n: &Normalizer) -> Result<()> {
    let mut text = String::from("# plane\tband\tmean\tstd\n");
    for p in 0..3 {
        for (b, (m, s)) in n.mean[p].iter().zip(&n.std[p]).enumerate() {
            text.push_str(&format!("{p}\t{b}\t{m:e}\t{s:e}\n"));
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Log-Mel features of every mixed utterance, normalized with statistics
/// of the training split, written as one archive per split.
pub fn cmd_featurize(config: &ExperimentConfig, out: &Path) -> Result<BTreeMap<String, usize>> {
    config.validate()?;
    let corpus = config.existing("data.corpus_dir", &config.data.corpus_dir)?;
    let mut raw = Vec::new();
    for (name, _) in SPLITS {
        let dir = corpus.join(name);
        let manifest = CorpusManifest::load(dir.join(MANIFEST_FILE))?;
        let labels = read_labels(&dir.join(LABELS_FILE))?;
        let mut items = Vec::new();
        for e in &manifest.entries {
            let id = &e.spec.clean_id;
            let label = *labels
                .get(id)
                .ok_or_else(|| Error::Load(format!("{name}: no label for {id}")))?;
            let domain = manifest
                .snr_bin(e.spec.snr_db)
                .ok_or_else(|| Error::Load(format!("{name}: SNR of {id} is not a manifest bin")))?;
            let w = read_wav(dir.join("mixed").join(format!("{id}.wav")))?;
            items.push((id.clone(), extract_features(&w, &config.features)?, label, domain));
        }
        raw.push((name, manifest, items));
    }
    let train: Vec<FeatureMatrix> = raw[0].2.iter().map(|(_, fm, _, _)| fm.clone()).collect();
    let norm = Normalizer::fit(&train)?;
    fs::create_dir_all(out)?;
    save_normalizer(&out.join("normalizer.tsv"), &norm)?;
    let mut counts = BTreeMap::new();
    for (name, manifest, items) in raw {
        let items = items
            .into_iter()
            .map(|(id, fm, l, d)| Ok((id, norm.apply(&fm)?, l, d)))
            .collect::<Result<Vec<_>>>()?;
        let dir = out.join(name);
        write_archive(&dir, &items)?;
        manifest.save(dir.join(MANIFEST_FILE))?;
        counts.insert(name.to_string(), items.len());
    }
    Ok(counts)
}

/// Patches of every utterance in a feature archive, each carrying its
/// utterance's label and domain.
pub fn load_feature_dataset<F: Real>(
    dir: &Path,
    patch_width: usize,
    num_labels: usize,
    num_domains: usize,
) -> Result<Dataset<F>> {
    let index = read_archive_index(dir)?;
    if index.is_empty() {
        return Err(Error::Load(format!("{} holds no utterances", dir.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    let mut shape = None;
    for e in &index {
        let p = assemble_patches::<F>(&load_archive_entry(dir, e)?, patch_width)?;
        let n = p.shape()[0];
        shape.get_or_insert_with(|| p.shape()[1..].to_vec());
        labels.extend(std::iter::repeat_n(e.label, n));
        domains.extend(std::iter::repeat_n(e.domain, n));
        data.extend_from_slice(p.data());
    }
    let mut dims = vec![labels.len()];
    dims.extend(shape.unwrap_or_default());
    Dataset::new(Tensor::new(dims, data)?, labels, domains, num_labels, num_domains)
}

/// Write a dataset as `inputs.dgt` (f64) plus a targets table.
pub fn save_dataset<F: Real>(dir: &Path, data: &Dataset<F>) -> Result<()> {
    fs::create_dir_all(dir)?;
    data.inputs.cast::<f64>().save(dir.join("inputs.dgt"))?;
    let mut text = format!(
        "# num_labels={} num_domains={}\n# label\tdomain\n",
        data.num_labels, data.num_domains
    );
    for (l, d) in data.labels.iter().zip(&data.domains) {
        text.push_str(&format!("{l}\t{d}\n"));
    }
    fs::write(dir.join("targets.tsv"), text)?;
    Ok(())
}

pub fn load_dataset<F: Real>(dir: &Path) -> Result<Dataset<F>> {
    let inputs = Tensor::<f64>::load(dir.join("inputs.dgt"))?.cast::<F>();
    let path = dir.join("targets.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let bad = |line: &str| Error::Format(format!("bad targets line {line:?}"));
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut counts = header
        .trim_start_matches('#')
        .split_whitespace()
        .map(|kv| kv.split_once('=').and_then(|(_, v)| v.parse::<usize>().ok()));
    let (Some(Some(num_labels)), Some(Some(num_domains))) = (counts.next(), counts.next()) else {
        return Err(bad(header));
    };
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for line in lines.filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let (l, d) = line.split_once('\t').ok_or_else(|| bad(line))?;
        labels.push(l.parse().map_err(|_| bad(line))?);
        domains.push(d.parse().map_err(|_| bad(line))?);
    }
    Dataset::new(inputs, labels, domains, num_labels, num_domains)
}

/// Write the toy task's train and test splits.
pub fn cmd_toy(config: &ExperimentConfig, out: &Path) -> Result<(usize, usize)> {
    config.validate()?;
    let task = make_toy_task::<f64>(&config.toy, config.seed)?;
    save_dataset(&out.join("train"), &task.train)?;
    save_dataset(&out.join("test"), &task.test)?;
    Ok((task.train.len(), task.test.len()))
}

/// A named test set, with its noise-partition tag and hygiene status when it
/// comes from a mixed corpus.
pub struct TestSet<F> {
    pub name: String,
    pub tag: Option<&'static str>,
    pub data: Dataset<F>,
    pub hygiene: Option<bool>,
}

fn partition_hygiene(m: &CorpusManifest, expected: Partition) -> bool {
    m.partition == expected
        && m.entries
            .iter()
            .all(|e| e.partition == expected && m.noise_partition.get(&e.spec.noise_id) == Some(&expected))
}

/// Training data plus the test sets evaluated against it.
pub fn load_data<F: Real>(config: &ExperimentConfig) -> Result<(Dataset<F>, Vec<TestSet<F>>)> {
    match config.source() {
        DataSource::Toy => {
            let (train, test) = match &config.data.toy_dir {
                Some(_) => {
                    let dir = config.existing("data.toy_dir", &config.data.toy_dir)?;
                    (load_dataset::<F>(&dir.join("train"))?, load_dataset::<F>(&dir.join("test"))?)
                }
                None => {
                    let t = make_toy_task::<F>(&config.toy, config.seed)?;
                    (t.train, t.test)
                }
            };
            let mut sets = Vec::new();
            for d in 0..test.num_domains {
                if let Ok(data) = test.filter_domain(d) {
                    sets.push(TestSet {
                        name: format!("test-domain{d}"),
                        tag: None,
                        data,
                        hygiene: None,
                    });
                }
            }
            sets.insert(
                0,
                TestSet {
                    name: "test".into(),
                    tag: None,
                    data: test,
                    hygiene: None,
                },
            );
            Ok((train, sets))
        }
        DataSource::Features => {
            let dir = config.existing("data.features_dir", &config.data.features_dir)?;
            let (labels, domains) = (config.mix.classes, config.mix.num_domains()?);
            let load = |name: &str| load_feature_dataset::<F>(&dir.join(name), config.patch_width, labels, domains);
            let train = load("train")?;
            let mut sets = Vec::new();
            for (name, partition) in &SPLITS[1..] {
                let manifest = CorpusManifest::load(dir.join(name).join(MANIFEST_FILE))?;
                sets.push(TestSet {
                    name: name.to_string(),
                    tag: Some(if *partition == Partition::Known { "KNN" } else { "UKN" }),
                    data: load(name)?,
                    hygiene: Some(partition_hygiene(&manifest, *partition)),
                });
            }
            Ok((train, sets))
        }
    }
}

fn check_train_paths(config: &ExperimentConfig) -> Result<()> {
    match config.source() {
        DataSource::Toy => {
            if config.data.toy_dir.is_some() {
                config.existing("data.toy_dir", &config.data.toy_dir)?;
            }
        }
        DataSource::Features => {
            config.existing("data.features_dir", &config.data.features_dir)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub checkpoint: PathBuf,
    pub hash: String,
}

/// Train on the configured data, writing `train_log.csv` and a checkpoint
/// directory under `out`. A diverged run still writes the rows logged so far
/// and a `divergence.txt` naming the last finite step.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    check_train_paths(config)?;
    match config.precision {
        Precision::High => train_as::<f64>(config, out),
        Precision::Standard => train_as::<f32>(config, out),
    }
}

fn model_config(config: &ExperimentConfig, num_labels: usize) -> DenseNetConfig {
    DenseNetConfig {
        num_classes: num_labels,
        ..config.model.clone()
    }
}

fn train_as<F: Real>(config: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    let (train, tests) = load_data::<F>(config)?;
    let eval = tests.first().map(|t| &t.data);
    let model_cfg = model_config(config, train.num_labels);
    let schedule = Schedule {
        steps: config.schedule.steps,
        batch_size: config.schedule.batch_size,
        seed: config.seed.wrapping_add(2),
        eval_every: config.schedule.eval_every,
    };
    let init_seed = config.seed.wrapping_add(1);
    let mut log = TrainingLog::default();
    let (ckpt, result) = if config.adversarial_enabled {
        let mut model = build_adversarial::<F>(&model_cfg, train.num_domains, &config.adversarial, init_seed)?;
        let r = train_into(&mut model, &train, &config.adversarial, &schedule, eval, &mut log);
        (Checkpoint::Adversarial(model), r)
    } else {
        let mut model = build_densenet::<F>(&model_cfg, init_seed)?;
        let r = train_plain_into(&mut model, &train, config.adversarial.epsilon, &schedule, eval, &mut log);
        (Checkpoint::Plain(model), r)
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(TRAIN_LOG), log.to_csv())?;
    if let Err(e) = result {
        if let Error::Divergence { step, .. } = &e {
            fs::write(
                out.join("divergence.txt"),
                format!("last_finite_step={}\n{e}\n", step.saturating_sub(1)),
            )?;
        }
        return Err(e);
    }
    let dir = out.join(CHECKPOINT_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    save_checkpoint(&dir, &ckpt)?;
    Ok(TrainOutcome {
        log,
        hash: checkpoint_hash(&dir)?,
        checkpoint: dir,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub test_set: String,
    pub tag: Option<String>,
    pub examples: usize,
    pub label_acc: f64,
    /// Only for checkpoints with a domain head.
    pub domain_acc: Option<f64>,
    pub mean_loss_y: f64,
    /// Whether every noise came from the tagged partition.
    pub hygiene: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub sections: Vec<EvalSection>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "test_set,tag,examples,label_acc,domain_acc,mean_loss_y,hygiene";

    pub fn section(&self, name: &str) -> Option<&EvalSection> {
        self.sections.iter().find(|s| s.test_set == name)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for s in &self.sections {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.test_set,
                opt(s.tag.clone()),
                s.examples,
                s.label_acc,
                opt(s.domain_acc.map(|v| v.to_string())),
                s.mean_loss_y,
                opt(s.hygiene.map(|h| if h { "ok" } else { "FAIL" }.to_string())),
            ));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.sections {
            match &s.tag {
                Some(tag) => writeln!(f, "[{}] {tag}", s.test_set)?,
                None => writeln!(f, "[{}]", s.test_set)?,
            }
            writeln!(f, "  examples     {}", s.examples)?;
            writeln!(f, "  label acc    {:.4}", s.label_acc)?;
            if let Some(d) = s.domain_acc {
                writeln!(f, "  domain acc   {d:.4}")?;
            }
            writeln!(f, "  mean L_y     {:.6}", s.mean_loss_y)?;
            if let Some(h) = s.hygiene {
                writeln!(f, "  hygiene      {}", if h { "ok" } else { "FAIL" })?;
            }
        }
        Ok(())
    }
}

/// Evaluate a checkpoint on every configured test set.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    config.validate()?;
    check_train_paths(config)?;
    if !checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    match checkpoint_precision(checkpoint)? {
        Precision::High => eval_as::<f64>(config, checkpoint),
        Precision::Standard => eval_as::<f32>(config, checkpoint),
    }
}

fn eval_as<F: Real>(config: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ckpt = load_checkpoint::<F>(checkpoint)?;
    let (_, tests) = load_data::<F>(config)?;
    let mut report = EvalReport::default();
    for t in tests {
        report.sections.push(evaluate_checkpoint(&ckpt, &t)?);
    }
    Ok(report)
}

pub fn evaluate_checkpoint<F: Real>(ckpt: &Checkpoint<F>, t: &TestSet<F>) -> Result<EvalSection> {
    let data = &t.data;
    if ckpt.num_labels() != data.num_labels {
        return Err(Error::Load(format!(
            "checkpoint has {} label classes, {} has {}",
            ckpt.num_labels(),
            t.name,
            data.num_labels
        )));
    }
    if let Some(d) = ckpt.num_domains() {
        if d != data.num_domains {
            return Err(Error::Load(format!(
                "checkpoint has {d} domains, {} has {}",
                t.name, data.num_domains
            )));
        }
    }
    let (label_acc, mean_loss_y) = classification_metrics(data, &data.labels, |x| ckpt.predict_labels(x))?;
    let domain_acc = match ckpt {
        Checkpoint::Adversarial(m) => Some(classification_metrics(data, &data.domains, |x| m.predict_domains(x))?.0),
        Checkpoint::Plain(_) => None,
    };
    Ok(EvalSection {
        test_set: t.name.clone(),
        tag: t.tag.map(str::to_string),
        examples: data.len(),
        label_acc,
        domain_acc,
        mean_loss_y,
        hygiene: t.hygiene,
    })
}

pub fn cmd_gradcheck(config: &ExperimentConfig) -> Result<GradcheckReport> {
    run_gradcheck(&GradcheckOptions {
        seed: config.seed,
        ..GradcheckOptions::default()
    })
}
