use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use densenet_ad::experiment::{
    cmd_eval, cmd_featurize, cmd_gradcheck, cmd_mix, cmd_toy, cmd_train, ExperimentConfig,
};
use densenet_ad::{Error, Result};

/// DenseNet acoustic models with domain-adversarial training.
#[derive(Parser)]
#[command(name = "densenet-ad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config's `output`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Mix synthetic clean speech with the noise bank into train/KNN/UKN corpora
    Mix(Common),
    /// Extract normalized log-Mel features from a mixed corpus
    Featurize(Common),
    /// Train a model and write its log and checkpoint
    Train(Common),
    /// Evaluate a checkpoint on the configured test sets
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory, overriding `data.checkpoint`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference and update-equivalence checks on a tiny model
    Gradcheck(Common),
    /// Generate the toy two-domain dataset
    Toy(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output = Some(out.clone());
    }
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    config
        .output
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output".into()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Mix(c) => {
            let config = load(&c)?;
            let out = out_dir(&config)?;
            for s in cmd_mix(&config, &out)? {
                println!(
                    "{}: {} utterances, {} partition, {} SNR bins, max SNR error {:.2e} dB",
                    s.name,
                    s.manifest.entries.len(),
                    s.manifest.partition,
                    s.manifest.snr_distribution.len(),
                    s.verify.max_snr_error_db
                );
            }
        }
        Command::Featurize(c) => {
            let config = load(&c)?;
            let out = out_dir(&config)?;
            for (split, n) in cmd_featurize(&config, &out)? {
                println!("{split}: {n} utterances");
            }
        }
        Command::Train(c) => {
            let config = load(&c)?;
            let out = out_dir(&config)?;
            let outcome = cmd_train(&config, &out)?;
            if let Some(r) = outcome.log.last() {
                println!(
                    "step {}: loss_y {:.4} loss_z {:.4} label_acc {:.4} domain_acc {:.4}",
                    r.step, r.loss_y, r.loss_z, r.label_acc, r.domain_acc
                );
            }
            println!("checkpoint {} sha256 {}", outcome.checkpoint.display(), outcome.hash);
        }
        Command::Eval { common, checkpoint } => {
            let config = load(&common)?;
            let checkpoint = checkpoint
                .or_else(|| config.data.checkpoint.clone())
                .ok_or_else(|| Error::Config("no checkpoint: pass --checkpoint or set data.checkpoint".into()))?;
            let report = cmd_eval(&config, &checkpoint)?;
            print!("{report}");
            if let Some(out) = &config.output {
                fs::create_dir_all(out)?;
                write(&out.join("eval_report.txt"), &report.to_string())?;
                write(&out.join("eval_report.csv"), &report.to_csv())?;
            }
        }
        Command::Gradcheck(c) => {
            let config = load(&c)?;
            let report = cmd_gradcheck(&config)?;
            print!("{report}");
            if let Some(out) = &config.output {
                fs::create_dir_all(out)?;
                write(&out.join("gradcheck.txt"), &report.to_string())?;
            }
            return Ok(report.passed());
        }
        Command::Toy(c) => {
            let config = load(&c)?;
            let out = out_dir(&config)?;
            let (train, test) = cmd_toy(&config, &out)?;
            println!("toy task: {train} train / {test} test examples in {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
