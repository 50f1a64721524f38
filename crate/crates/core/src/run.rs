//! Run directories and the pipeline behind each subcommand.
//!
//! Every invocation writes into `<out-dir>/<run-name>-<hash>`, where the hash
//! covers the subcommand and the canonical config. A directory that already
//! exists is refused unless `force` is set.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dat_tensor::Tensor;

use crate::analysis::{self, Regime};
use crate::checkpoint::Checkpoint;
use crate::classifier::{accuracy_with, Classifier};
use crate::config::ExperimentConfig;
use crate::data::{dataset_to_idx, load_dataset, Dataset};
use crate::discretizer::{
    reconstruction_report, train_discretizer as fit_discretizer, Discretizer,
};
use crate::error::{io_err, DatError, Result};
use crate::eval::{evaluate as eval_model, relative_corruption_error, EvalOptions};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::trainer::{pgd_attack, train_classifier as fit_classifier};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainDiscretizer,
    TrainClassifier,
    Evaluate,
    Analyze,
    Attack,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GenData,
        Command::TrainDiscretizer,
        Command::TrainClassifier,
        Command::Evaluate,
        Command::Analyze,
        Command::Attack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDiscretizer => "train-discretizer",
            Command::TrainClassifier => "train-classifier",
            Command::Evaluate => "evaluate",
            Command::Analyze => "analyze",
            Command::Attack => "attack",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::GenData => "write the configured dataset as IDX files",
            Command::TrainDiscretizer => "train the VQ discretizer",
            Command::TrainClassifier => {
                "train a classifier (standard, pixel_at, dat or random_word)"
            }
            Command::Evaluate => "clean, FGSM and corruption accuracy of a classifier",
            Command::Analyze => {
                "BN-statistic correlation, realism, gradient alignment and token fractions"
            }
            Command::Attack => "craft adversarial examples against a classifier",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = DatError;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DatError::Config(format!("unknown subcommand `{s}`")))
    }
}

pub struct RunDir {
    pub path: PathBuf,
    pub run_name: String,
    pub hash: String,
    metrics: MetricsWriter,
    records: Vec<MetricsRecord>,
}

impl RunDir {
    /// Creates the run directory and writes `config.txt`, the exact bytes the hash covers.
    pub fn create(cfg: &ExperimentConfig, command: Command, force: bool) -> Result<Self> {
        let hash = cfg.run_hash(command.name());
        let path = cfg.out_dir().join(format!("{}-{hash}", cfg.run_name()));
        if path.exists() {
            if !force {
                return Err(DatError::RunExists(path));
            }
            fs::remove_dir_all(&path).map_err(io_err(&path))?;
        }
        fs::create_dir_all(&path).map_err(io_err(&path))?;
        let cfg_path = path.join("config.txt");
        fs::write(&cfg_path, cfg.run_bytes(command.name())).map_err(io_err(&cfg_path))?;
        Ok(Self {
            metrics: MetricsWriter::open(&path)?,
            path,
            run_name: cfg.run_name().to_string(),
            hash,
            records: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn record(&self, stage: &str, epoch: Option<usize>) -> MetricsRecord {
        MetricsRecord::new(&self.run_name, &self.hash, stage, epoch)
    }

    pub fn write(&mut self, rec: MetricsRecord) -> Result<()> {
        self.metrics.write(&rec)?;
        self.records.push(rec);
        Ok(())
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).map_err(io_err(&p))
    }

    /// Records written so far, timestamps zeroed.
    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

fn require_path(p: Option<PathBuf>, key: &str, command: Command) -> Result<PathBuf> {
    p.ok_or_else(|| DatError::Config(format!("{command} needs --{key}")))
}

/// Config-level checks that must pass before anything is written.
pub fn check(cfg: &ExperimentConfig, command: Command) -> Result<()> {
    match command {
        Command::TrainClassifier if cfg.train_mode().needs_discretizer() => {
            require_path(cfg.discretizer_path(), "discretizer", command)?;
        }
        Command::Evaluate => {
            require_path(cfg.classifier_path(), "classifier", command)?;
            if cfg.with_discretizer() {
                require_path(cfg.discretizer_path(), "discretizer", command)?;
            }
        }
        Command::Analyze => {
            require_path(cfg.classifier_path(), "classifier", command)?;
            require_path(cfg.discretizer_path(), "discretizer", command)?;
        }
        Command::Attack => {
            require_path(cfg.classifier_path(), "classifier", command)?;
        }
        _ => {}
    }
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<Classifier<f32>> {
    Classifier::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn load_discretizer(path: &Path) -> Result<Discretizer<f32>> {
    Discretizer::from_checkpoint(&Checkpoint::load(path)?)
}

fn optional_discretizer(cfg: &ExperimentConfig, needed: bool) -> Result<Option<Discretizer<f32>>> {
    match cfg.discretizer_path() {
        Some(p) if needed => Ok(Some(load_discretizer(&p)?)),
        _ => Ok(None),
    }
}

/// Runs `command`; `progress` sees each metrics record as it is written.
pub fn execute(
    cfg: &ExperimentConfig,
    command: Command,
    force: bool,
    mut progress: impl FnMut(&MetricsRecord),
) -> Result<RunOutput> {
    check(cfg, command)?;
    let (train, test) = load_dataset(&cfg.dataset())?;
    let mut dir;
    macro_rules! emit {
        ($rec:expr) => {{
            let rec = $rec;
            progress(&rec);
            dir.write(rec)?;
        }};
    }
    match command {
        Command::GenData => {
            dir = RunDir::create(cfg, command, force)?;
            for (name, ds) in [("train", &train), ("test", &test)] {
                let (images, labels) = dataset_to_idx(ds);
                let ip = dir.file(&format!("{name}-images.idx"));
                fs::write(&ip, images).map_err(io_err(&ip))?;
                let lp = dir.file(&format!("{name}-labels.idx"));
                fs::write(&lp, labels).map_err(io_err(&lp))?;
            }
            let counts = train.class_counts();
            emit!(dir
                .record("gen-data", None)
                .with("train_size", train.len() as f64)
                .with("test_size", test.len() as f64)
                .with("min_class_count", *counts.iter().min().unwrap_or(&0) as f64)
                .with("max_class_count", *counts.iter().max().unwrap_or(&0) as f64));
        }
        Command::TrainDiscretizer => {
            let (c, ..) = train.image_shape();
            let dcfg = cfg.discretizer(c);
            let tcfg = cfg.discretizer_training();
            let bs = cfg.eval_batch_size();
            let (init_mse, init_usage) =
                reconstruction_report(&Discretizer::new(dcfg.clone(), tcfg.seed)?, &test, bs)?;
            dir = RunDir::create(cfg, command, force)?;
            emit!(dir
                .record("discretizer-init", None)
                .with("heldout_mse", init_mse)
                .with("usage", init_usage));
            let ckpt = dir.file("discretizer.ckpt");
            let (model, epochs) = fit_discretizer(&train, &dcfg, &tcfg, |m, model| {
                model.to_checkpoint().save(&ckpt)?;
                emit!(dir
                    .record("train-discretizer", Some(m.epoch))
                    .with("reconstruction_mse", m.reconstruction_mse)
                    .with("codebook_loss", m.codebook_loss)
                    .with("commitment_loss", m.commitment_loss)
                    .with("usage", m.codebook_usage)
                    .with("reseeded_entries", m.reseeded_entries as f64));
                Ok(())
            })?;
            let (mse, usage) = reconstruction_report(&model, &test, bs)?;
            let first = epochs.first().map_or(f64::NAN, |m| m.reconstruction_mse);
            emit!(dir
                .record("discretizer-final", None)
                .with("heldout_mse", mse)
                .with("usage", usage)
                .with("epoch0_train_mse", first)
                .with("heldout_mse_over_epoch0", mse / first)
                .with("checksum_low32", (model.checksum() & 0xffff_ffff) as f64));
        }
        Command::TrainClassifier => {
            let mode = cfg.train_mode();
            let disc = optional_discretizer(cfg, mode.needs_discretizer())?;
            let (c, h, _) = train.image_shape();
            let mcfg = cfg.classifier(c, h, train.num_classes);
            dir = RunDir::create(cfg, command, force)?;
            let ckpt = dir.file("classifier.ckpt");
            let (model, _) = fit_classifier(
                &train,
                &test,
                &mcfg,
                &mode,
                &cfg.classifier_training(),
                disc.as_ref(),
                |m, model| {
                    model.to_checkpoint().save(&ckpt)?;
                    let mut rec = dir
                        .record("train-classifier", Some(m.epoch))
                        .with("learning_rate", m.learning_rate)
                        .with("train_loss", m.train_loss)
                        .with("val_accuracy", m.val_accuracy);
                    if let Some(f) = m.modified_fraction {
                        rec = rec.with("modified_fraction", f);
                    }
                    emit!(rec);
                    Ok(())
                },
            )?;
            // Zero epochs still leaves a loadable checkpoint.
            if !ckpt.exists() {
                model.to_checkpoint().save(&ckpt)?;
            }
        }
        Command::Evaluate => {
            let model =
                load_classifier(&require_path(cfg.classifier_path(), "classifier", command)?)?;
            let disc = optional_discretizer(cfg, cfg.with_discretizer())?;
            let baseline = cfg
                .baseline_path()
                .map(|p| load_classifier(&p))
                .transpose()?;
            let opts = EvalOptions {
                discretizer: disc.as_ref(),
                fgsm_epsilons: cfg.fgsm_epsilons(),
                corruptions: cfg.corruptions(),
                batch_size: cfg.eval_batch_size(),
            };
            dir = RunDir::create(cfg, command, force)?;
            let report = eval_model(&model, &test, &opts)?;
            let mut rec = dir.record("evaluate", None).extend(report.metrics());
            if let Some(b) = &baseline {
                let base = eval_model(
                    b,
                    &test,
                    &EvalOptions {
                        discretizer: None,
                        ..opts.clone()
                    },
                )?;
                rec = rec.with(
                    "relative_corruption_error",
                    relative_corruption_error(&report, &base)?,
                );
            }
            dir.write_text("eval.json", &to_json(&report)?)?;
            emit!(rec);
        }
        Command::Attack => {
            let model =
                load_classifier(&require_path(cfg.classifier_path(), "classifier", command)?)?;
            dir = RunDir::create(cfg, command, force)?;
            let (eps, steps, step) = (
                cfg.epsilon(),
                cfg.get("steps").parse().unwrap_or(1),
                cfg.step_size(),
            );
            let attack = |x: &Tensor<f32>, y: &[usize]| pgd_attack(&model, x, y, eps, steps, step);
            let bs = cfg.eval_batch_size();
            let clean = accuracy_with(&model, &test, bs, |x, _| Ok(x.clone()))?;
            let adv_acc = accuracy_with(&model, &test, bs, |x, y| attack(x, y))?;
            let n = cfg.images().min(test.len());
            let head = test.head(n)?;
            let (x, y) = head.batch(&(0..n).collect::<Vec<_>>())?;
            let adv = attack(&x, &y)?;
            let linf = adv
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            let mut ck = Checkpoint::new();
            ck.insert("clean", &x);
            ck.insert("adversarial", &adv);
            ck.insert(
                "labels",
                &Tensor::new([n], y.iter().map(|&l| l as f32).collect())?,
            );
            ck.save(&dir.file("adversarial.ckpt"))?;
            emit!(dir
                .record("attack", None)
                .with("epsilon", eps)
                .with("steps", steps as f64)
                .with("clean_accuracy", clean)
                .with("adversarial_accuracy", adv_acc)
                .with("saved_examples", n as f64)
                .with("max_abs_change", linf as f64));
        }
        Command::Analyze => {
            let model =
                load_classifier(&require_path(cfg.classifier_path(), "classifier", command)?)?;
            let disc = load_discretizer(&require_path(
                cfg.discretizer_path(),
                "discretizer",
                command,
            )?)?;
            let before = (model.checksum(), disc.checksum());
            dir = RunDir::create(cfg, command, force)?;
            let rec = analyze(cfg, &model, &disc, &test, &dir)?;
            if before != (model.checksum(), disc.checksum()) {
                return Err(DatError::Invalid {
                    op: "analyze",
                    reason: "a model changed during analysis".into(),
                });
            }
            emit!(rec);
        }
    }
    let records = dir.records().to_vec();
    Ok(RunOutput {
        dir: dir.path,
        records,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| DatError::Invalid {
        op: "json",
        reason: e.to_string(),
    })
}

fn analyze(
    cfg: &ExperimentConfig,
    model: &Classifier<f32>,
    disc: &Discretizer<f32>,
    test: &Dataset,
    dir: &RunDir,
) -> Result<MetricsRecord> {
    let spec = cfg.perturbation();
    let (seed, bs) = (cfg.seed(), cfg.analysis_batch_size());
    let mut rec = dir.record("analyze", None);

    if cfg.analysis_batches() > 0 {
        let steps = cfg.pgd_steps().max(1);
        let eps = cfg.epsilon();
        let regimes = [
            Regime::PixelAt {
                epsilon: eps,
                steps,
                step_size: eps.min(2.5 * eps / steps as f64),
            },
            Regime::Dat(spec),
        ];
        let hists = analysis::bn_pcc_histogram(
            model,
            Some(disc),
            test,
            &regimes,
            cfg.analysis_batches(),
            bs,
            seed,
            cfg.bins(),
        )?;
        let mut csv = String::new();
        for (i, h) in hists.iter().enumerate() {
            let body = h.to_csv();
            csv.push_str(if i == 0 {
                &body
            } else {
                body.split_once('\n').map_or("", |(_, rest)| rest)
            });
            rec = rec
                .with(format!("pcc_mean_median_{}", h.regime), h.median_mean_pcc())
                .with(format!("pcc_var_median_{}", h.regime), h.median_var_pcc());
        }
        dir.write_text("bn_pcc.csv", &csv)?;
    }

    if cfg.images() > 0 {
        let r = analysis::realism_report(model, disc, test, cfg.images(), &spec, cfg.epsilon(), 9)?;
        dir.write_text("frequency.csv", &r.to_csv())?;
        rec = rec
            .with("colors_clean", r.colors_clean)
            .with("colors_dat", r.colors_dat)
            .with("colors_fgsm", r.colors_fgsm)
            .with("color_delta_dat", r.color_delta_dat)
            .with("color_delta_fgsm", r.color_delta_fgsm)
            .with("high_freq_energy_dat", r.high_freq_dat)
            .with("high_freq_energy_fgsm", r.high_freq_fgsm)
            .with(
                "high_freq_energy_dat_token_change",
                r.high_freq_dat_token_change,
            );
    }

    if cfg.alignment_batches() > 0 {
        let cos = analysis::straight_through_alignment(
            model,
            disc,
            test,
            cfg.alignment_batches(),
            bs,
            seed,
        )?;
        let csv: String = std::iter::once("batch,cosine\n".to_string())
            .chain(cos.iter().enumerate().map(|(i, c)| format!("{i},{c}\n")))
            .collect();
        dir.write_text("alignment.csv", &csv)?;
        rec = rec.with("alignment_mean", cos.iter().sum::<f64>() / cos.len() as f64);
    }

    if cfg.fraction_batches() > 0 {
        let alphas = cfg.alpha_grid();
        let rows = analysis::modified_fraction_sweep(
            model,
            disc,
            test,
            &spec,
            &alphas,
            cfg.fraction_batches(),
            bs,
            seed,
        )?;
        let fr = analysis::column_means(&rows);
        let mut csv = String::from("alpha,modified_fraction\n");
        for (a, f) in alphas.iter().zip(&fr) {
            csv.push_str(&format!("{a},{f}\n"));
            rec = rec.with(format!("modified_fraction_alpha_{a}"), *f);
        }
        dir.write_text("modified_fraction.csv", &csv)?;
    }
    Ok(rec)
}
