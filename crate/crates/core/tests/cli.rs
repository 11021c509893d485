mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::synth_config;
use discrim::config::{DatasetKind, RunConfig};
use discrim::losses::ObjectiveConfig;
use discrim::train::{self, Model};

fn discrim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discrim")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn train_synth(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let config = write_config(dir, cfg);
    let out = dir.join("run");
    let o = discrim(&["train", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn field(stdout: &[u8], key: &str) -> f64 {
    let text = String::from_utf8_lossy(stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth_config(3);
    cfg.objective = ObjectiveConfig::combined(0.001, 1.0, 0.99);
    let out = train_synth(dir.path(), &cfg);
    for f in [
        train::EPOCH_LOG,
        train::STEP_LOG,
        train::SUMMARY,
        train::RESOLVED_CONFIG,
        train::MODEL,
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let epochs = std::fs::read_to_string(out.join(train::EPOCH_LOG)).unwrap();
    let mut lines = epochs.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,lr,train_loss,train_acc,test_loss,test_acc,test_discriminant_ratio,objective,L_S,L_D,L_AD,L_C,L_AC"
    );
    assert_eq!(lines.count(), cfg.epochs);

    // The resolved config parses back to the same run.
    let resolved = RunConfig::load(&out.join(train::RESOLVED_CONFIG), None).unwrap();
    assert_eq!(resolved.objective, cfg.objective);
    assert_eq!(resolved.seed, cfg.seed);
}

#[test]
fn rerunning_resolved_config_reproduces_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_synth(dir.path(), &synth_config(5));
    let again = dir.path().join("again");
    let o = discrim(&[
        "train",
        "--config",
        s(&out.join(train::RESOLVED_CONFIG)),
        "--out",
        s(&again),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [train::EPOCH_LOG, train::STEP_LOG] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap()
        );
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "dataset = synth\nlearning_rate = 0.1\n").unwrap();
    let o = discrim(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    std::fs::write(&bad, "preset = mnist-combined\nalpha = 0.5\n").unwrap();
    let o = discrim(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));

    let o = discrim(&["train", "--config", s(&dir.path().join("missing.cfg"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth_config(1);
    cfg.sgd.schedule.base_lr = 1e6;
    cfg.sgd.momentum = 0.0;
    cfg.epochs = 20;
    let config = write_config(dir.path(), &cfg);
    let o = discrim(&["train", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn eval_reproduces_logged_train_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_synth(dir.path(), &synth_config(9));
    let epochs = std::fs::read_to_string(out.join(train::EPOCH_LOG)).unwrap();
    let last: Vec<f64> = epochs
        .lines()
        .last()
        .unwrap()
        .split(',')
        .take(6)
        .map(|f| f.parse().unwrap())
        .collect();
    let ckpt = out.join(train::MODEL);
    let train_eval = discrim(&["eval", "--ckpt", s(&ckpt), "--split", "train"]);
    assert!(train_eval.status.success());
    assert!((field(&train_eval.stdout, "accuracy") - last[3]).abs() < 1e-6);
    assert!((field(&train_eval.stdout, "loss") - last[2]).abs() < 1e-9);
    let test_eval = discrim(&["eval", "--ckpt", s(&ckpt)]);
    assert!((field(&test_eval.stdout, "accuracy") - last[5]).abs() < 1e-6);
}

#[test]
fn untrained_model_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth_config(4);
    cfg.synth.classes = 4;
    cfg.synth.per_class = 10;
    cfg.synth.test_per_class = 500;
    cfg.synth.separation = 0.0;
    let (train_ds, test) = train::load_datasets(&cfg).unwrap();
    let model = Model::new(&cfg, train_ds.sample_shape(), train_ds.classes).unwrap();
    let ckpt = dir.path().join("untrained.ckpt");
    model.to_checkpoint().save(&ckpt).unwrap();
    let o = discrim(&["eval", "--ckpt", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&o.stdout, "samples") as usize, test.len());
    let acc = field(&o.stdout, "accuracy");
    assert!((acc - 0.25).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn truncated_checkpoint_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_synth(dir.path(), &synth_config(2));
    let bytes = std::fs::read(out.join(train::MODEL)).unwrap();
    let cut = dir.path().join("cut.ckpt");
    for len in [0, 5, bytes.len() / 3, bytes.len() - 1] {
        std::fs::write(&cut, &bytes[..len]).unwrap();
        let o = discrim(&["eval", "--ckpt", s(&cut)]);
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.starts_with("error:") && err.contains("truncated"), "{len}: {err}");
        assert!(!err.contains("panicked"));
    }
}

#[test]
fn histogram_export_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(6);
    let out = train_synth(dir.path(), &cfg);
    let csv_path = dir.path().join("hist.csv");
    let o = discrim(&[
        "export-histogram",
        "--ckpt",
        s(&out.join(train::MODEL)),
        "--neuron",
        "1",
        "--out",
        s(&csv_path),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["z", "is_target"]);
    let rows: Vec<(f64, u8)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap())
        })
        .collect();
    let (_, test) = train::load_datasets(&cfg).unwrap();
    assert_eq!(rows.len(), test.len());
    let targets: usize = rows.iter().map(|r| r.1 as usize).sum();
    assert_eq!(targets, test.labels.iter().filter(|&&l| l == 1).count());

    let o = discrim(&[
        "export-histogram",
        "--ckpt",
        s(&out.join(train::MODEL)),
        "--neuron",
        "3",
        "--out",
        s(&csv_path),
    ]);
    assert!(!o.status.success());
}

#[test]
fn scatter_export_means_match_points() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth_config(8);
    cfg.hidden_width = 2;
    let out = train_synth(dir.path(), &cfg);
    let scatter = dir.path().join("scatter.csv");
    let o = discrim(&[
        "export-scatter",
        "--ckpt",
        s(&out.join(train::MODEL)),
        "--out",
        s(&scatter),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut r = csv::Reader::from_path(&scatter).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["x1", "x2", "class"]);
    let mut sums = vec![(0.0, 0.0, 0usize); cfg.synth.classes];
    for rec in r.records() {
        let rec = rec.unwrap();
        let k: usize = rec[2].parse().unwrap();
        sums[k].0 += rec[0].parse::<f64>().unwrap();
        sums[k].1 += rec[1].parse::<f64>().unwrap();
        sums[k].2 += 1;
    }
    let mut m = csv::Reader::from_path(train::means_path(&scatter)).unwrap();
    assert_eq!(m.headers().unwrap(), vec!["class", "x1", "x2"]);
    let means: Vec<_> = m.records().map(|r| r.unwrap()).collect();
    assert_eq!(means.len(), cfg.synth.classes);
    for rec in means {
        let k: usize = rec[0].parse().unwrap();
        let (a, b, n) = sums[k];
        assert!((rec[1].parse::<f64>().unwrap() - a / n as f64).abs() < 1e-9);
        assert!((rec[2].parse::<f64>().unwrap() - b / n as f64).abs() < 1e-9);
    }
}

#[test]
fn scatter_export_needs_two_features() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_synth(dir.path(), &synth_config(8));
    let o = discrim(&[
        "export-scatter",
        "--ckpt",
        s(&out.join(train::MODEL)),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("hidden_width = 2"));
}

#[test]
fn eval_on_mismatched_data_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_synth(dir.path(), &synth_config(2));
    // 8x8 synthetic model against 28x28 MNIST files.
    let o = discrim(&[
        "eval",
        "--ckpt",
        s(&out.join(train::MODEL)),
        "--data",
        s(&common::mnist_dir()),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("expects"));
}

#[test]
fn presets_are_listed() {
    let o = discrim(&["presets"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for name in [
        "mnist-baseline",
        "mnist-combined",
        "mnist-combined-desk",
        "cifar10-combined",
    ] {
        assert!(text.lines().any(|l| l == name), "{name}");
    }
    let c = discrim::config::preset("mnist-combined-desk").unwrap();
    assert_eq!(c.dataset, DatasetKind::Mnist);
}
