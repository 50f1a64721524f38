use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# a very small synthetic setup
train-size = 120
test-size = 40
disc-epochs = 1
epochs = 1
batch-size = 20
disc-batch-size = 20
";

fn dat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dat"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// The run directory printed on success, resolved against the working directory.
fn run_dir(cwd: &Path, out: &Output) -> PathBuf {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    cwd.join(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.cfg"), TINY).unwrap();
    tmp
}

#[test]
fn invalid_mode_exits_2_and_writes_nothing() {
    let tmp = setup();
    let out = dat(
        tmp.path(),
        &[
            "train-classifier",
            "--config",
            "tiny.cfg",
            "--mode",
            "adversarial",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mode"));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let tmp = setup();
    let out = dat(tmp.path(), &["evaluate", "--colour", "red"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = dat(tmp.path(), &["fly"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_config_errors_and_unreadable_ones_runtime_errors() {
    let tmp = setup();
    let out = dat(
        tmp.path(),
        &["train-classifier", "--config", "tiny.cfg", "--mode", "dat"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = dat(tmp.path(), &["evaluate", "--config", "tiny.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("runs").exists());
    let out = dat(
        tmp.path(),
        &[
            "evaluate",
            "--config",
            "tiny.cfg",
            "--classifier",
            "missing.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = setup();
    fs::write(
        tmp.path().join("a.cfg"),
        format!("{TINY}alpha = 0.2\nrun-name = gen\n"),
    )
    .unwrap();
    let out = dat(
        tmp.path(),
        &["gen-data", "--config", "a.cfg", "--alpha", "3/10"],
    );
    let dir = run_dir(tmp.path(), &out);
    assert!(dir
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .starts_with("gen-"));
    let cfg = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(cfg.starts_with("command=gen-data\n"));
    assert!(cfg.contains("\nalpha=0.3\n"), "{cfg}");
    assert!(!cfg.contains("out-dir"));
}

#[test]
fn full_pipeline_through_every_subcommand() {
    let tmp = setup();
    let p = tmp.path();

    let data = run_dir(p, &dat(p, &["gen-data", "--config", "tiny.cfg"]));
    for f in [
        "train-images.idx",
        "train-labels.idx",
        "test-images.idx",
        "test-labels.idx",
        "metrics.jsonl",
        "metrics.csv",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }

    let disc_dir = run_dir(
        p,
        &dat(
            p,
            &[
                "train-discretizer",
                "--config",
                "tiny.cfg",
                "--run-name",
                "disc",
            ],
        ),
    );
    let disc = disc_dir.join("discretizer.ckpt");
    assert!(disc.exists());

    // Train from the IDX files just written, which hold the same images rounded to bytes.
    let idx = |name: &str| data.join(name).display().to_string();
    let cls_dir = run_dir(
        p,
        &dat(
            p,
            &[
                "train-classifier",
                "--config",
                "tiny.cfg",
                "--run-name",
                "dat",
                "--mode",
                "dat",
                "--alpha",
                "0.1",
                "--discretizer",
                disc.to_str().unwrap(),
                "--data",
                "idx",
                "--train-images",
                &idx("train-images.idx"),
                "--train-labels",
                &idx("train-labels.idx"),
                "--test-images",
                &idx("test-images.idx"),
                "--test-labels",
                &idx("test-labels.idx"),
            ],
        ),
    );
    let cls = cls_dir.join("classifier.ckpt");
    let metrics = fs::read_to_string(cls_dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.contains("modified_fraction"));

    let (cls_s, disc_s) = (cls.to_str().unwrap(), disc.to_str().unwrap());
    let eval_dir = run_dir(
        p,
        &dat(
            p,
            &[
                "evaluate",
                "--config",
                "tiny.cfg",
                "--classifier",
                cls_s,
                "--with-discretizer",
                "--discretizer",
                disc_s,
                "--corruptions",
                "gaussian_noise,pixelate",
                "--severities",
                "1,5",
                "--baseline",
                cls_s,
            ],
        ),
    );
    let report = fs::read_to_string(eval_dir.join("eval.json")).unwrap();
    assert!(report.contains("\"with_discretizer\": true"));
    assert!(fs::read_to_string(eval_dir.join("metrics.jsonl"))
        .unwrap()
        .contains("relative_corruption_error"));

    let analysis = run_dir(
        p,
        &dat(
            p,
            &[
                "analyze",
                "--config",
                "tiny.cfg",
                "--classifier",
                cls_s,
                "--discretizer",
                disc_s,
                "--analysis-batches",
                "3",
                "--alignment-batches",
                "2",
                "--fraction-batches",
                "2",
                "--images",
                "4",
                "--analysis-batch-size",
                "8",
            ],
        ),
    );
    for f in [
        "bn_pcc.csv",
        "frequency.csv",
        "alignment.csv",
        "modified_fraction.csv",
    ] {
        assert!(analysis.join(f).exists(), "{f}");
    }

    let attack = [
        "attack",
        "--config",
        "tiny.cfg",
        "--classifier",
        cls_s,
        "--images",
        "3",
    ];
    let adv = run_dir(p, &dat(p, &attack));
    assert!(adv.join("adversarial.ckpt").exists());
    // Same config into the same directory: refused, then allowed with --force.
    let again = dat(p, &attack);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let mut forced = attack.to_vec();
    forced.push("--force");
    assert_eq!(run_dir(p, &dat(p, &forced)), adv);
}
