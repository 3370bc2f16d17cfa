use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densenet-ad"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn config_errors_exit_1_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.conf"), "model.depth=3\n").unwrap();
    let o = run(tmp.path(), &["train", "--config", "bad.conf", "--out", "run"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    assert!(!tmp.path().join("run").exists());

    fs::write(tmp.path().join("mix.conf"), "mix.unknown_kinds=\n").unwrap();
    let o = run(tmp.path(), &["mix", "--config", "mix.conf", "--out", "corpus"]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("corpus").exists());

    assert_eq!(code(&run(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(tmp.path(), &["toy"])), 1);
}

#[test]
fn pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = configs().join("smoke.conf");
    let conf = conf.to_str().unwrap();
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(tmp.path().join("work"));
        let o = run(tmp.path(), &["mix", "--config", conf, "--out", "work/smoke/corpus"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("ukn: 4 utterances, unknown partition, 5 SNR bins"));
        let o = run(tmp.path(), &["featurize", "--config", conf, "--out", "work/smoke/features"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = run(tmp.path(), &["train", "--config", conf, "--out", "work/run"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let stdout = String::from_utf8_lossy(&o.stdout).to_string();
        hashes.push(stdout.lines().last().unwrap().to_string());
    }
    assert_eq!(hashes[0], hashes[1]);
    let csv = fs::read_to_string(tmp.path().join("work/run/train_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = run(
        tmp.path(),
        &["eval", "--config", conf, "--checkpoint", "work/run/checkpoint", "--out", "work/eval"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("[knn] KNN") && text.contains("[ukn] UKN"));
    let csv = fs::read_to_string(tmp.path().join("work/eval/eval_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",ok")));

    let o = run(tmp.path(), &["eval", "--config", conf, "--checkpoint", "nowhere"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn toy_and_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = configs().join("toy.conf");
    let toy = toy.to_str().unwrap();
    let o = run(tmp.path(), &["toy", "--config", toy, "--seed", "4", "--out", "toy"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("toy/train/inputs.dgt").exists());

    fs::write(
        tmp.path().join("diverge.conf"),
        format!(
            "{}\nschedule.epsilon=1e30\nschedule.steps=50\nschedule.eval_every=1\n",
            fs::read_to_string(toy).unwrap()
        ),
    )
    .unwrap();
    let o = run(tmp.path(), &["train", "--config", "diverge.conf", "--out", "run"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(tmp.path().join("run/divergence.txt").exists());
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["gradcheck", "--seed", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).trim_end().ends_with("PASS"));
}
