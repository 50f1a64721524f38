//! Flat `key=value` experiment configuration.
//!
//! Every key is also a command-line flag (`--key value`). Values are
//! normalized on load (numbers re-printed, fractions such as `4/255`
//! evaluated) so that equivalent spellings hash identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::data::{DatasetSpec, SyntheticSpec};
use crate::discretizer::{DiscretizerConfig, DiscretizerTrainConfig};
use crate::error::{io_err, DatError, Result};
use crate::eval::{CorruptionKind, CorruptionSpec};
use crate::trainer::{
    ClassifierTrainConfig, GradientMode, GradientSource, PNorm, PerturbationSpec, TrainMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    Path,
    Choice(&'static [&'static str]),
    FloatList,
    IntList,
    CorruptionList,
}

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    /// Location-only keys are left out of the config hash.
    pub hashed: bool,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, help: &'static str) -> Key {
    Key {
        name,
        default,
        kind,
        hashed: true,
        help,
    }
}

pub const MODES: &[&str] = &["standard", "pixel_at", "dat", "random_word"];

pub const KEYS: &[Key] = &[
    key(
        "run-name",
        "run",
        Kind::Text,
        "run name; the run directory is <run-name>-<config hash>",
    ),
    key(
        "seed",
        "0",
        Kind::Int,
        "master seed for weights, shuffling and attack noise",
    ),
    Key {
        hashed: false,
        ..key(
            "out-dir",
            "runs",
            Kind::Path,
            "parent directory of run directories",
        )
    },
    key(
        "data",
        "synthetic",
        Kind::Choice(&["synthetic", "idx"]),
        "dataset source",
    ),
    key("classes", "10", Kind::Int, "synthetic: number of classes"),
    key(
        "train-size",
        "10000",
        Kind::Int,
        "synthetic: training images",
    ),
    key("test-size", "2000", Kind::Int, "synthetic: test images"),
    key(
        "image-size",
        "32",
        Kind::Int,
        "synthetic: image side in pixels",
    ),
    key("data-seed", "0", Kind::Int, "synthetic: generator seed"),
    key("train-images", "", Kind::Path, "idx: training images"),
    key("train-labels", "", Kind::Path, "idx: training labels"),
    key("test-images", "", Kind::Path, "idx: test images"),
    key("test-labels", "", Kind::Path, "idx: test labels"),
    key(
        "width",
        "16",
        Kind::Int,
        "classifier: channels of the first stage",
    ),
    key(
        "bn-momentum",
        "0.1",
        Kind::Float,
        "classifier: running-statistics momentum",
    ),
    key(
        "factor",
        "4",
        Kind::Int,
        "discretizer: downsampling factor f",
    ),
    key(
        "latent-dim",
        "16",
        Kind::Int,
        "discretizer: codebook entry dimension d",
    ),
    key(
        "codebook-size",
        "128",
        Kind::Int,
        "discretizer: number of entries K",
    ),
    key(
        "hidden",
        "32",
        Kind::Int,
        "discretizer: hidden convolution width",
    ),
    key(
        "mode",
        "standard",
        Kind::Choice(MODES),
        "classifier training regime",
    ),
    key("alpha", "0.1", Kind::Float, "dat: gradient scale"),
    key(
        "gradient",
        "raw",
        Kind::Choice(&["raw", "sign"]),
        "dat: raw gradient or its sign",
    ),
    key(
        "bound",
        "none",
        Kind::Choice(&["none", "inf", "2"]),
        "dat: optional p-norm bound on the perturbation",
    ),
    key(
        "source",
        "straight_through",
        Kind::Choice(&["straight_through", "full_backward"]),
        "dat: gradient path",
    ),
    key(
        "epsilon",
        "4/255",
        Kind::Float,
        "pixel_at radius, and the dat bound radius (may be inf)",
    ),
    key("steps", "1", Kind::Int, "pixel_at: ascent steps"),
    key(
        "step-size",
        "auto",
        Kind::Float,
        "pixel_at: step size; auto = min(epsilon, 2.5·epsilon/steps)",
    ),
    key(
        "fraction",
        "0.038",
        Kind::Float,
        "random_word: share of tokens replaced",
    ),
    key("epochs", "8", Kind::Int, "classifier: epochs"),
    key("batch-size", "64", Kind::Int, "classifier: batch size"),
    key("lr", "0.05", Kind::Float, "classifier: SGD learning rate"),
    key("momentum", "0.9", Kind::Float, "classifier: SGD momentum"),
    key(
        "weight-decay",
        "5e-4",
        Kind::Float,
        "classifier: L2 weight decay",
    ),
    key(
        "lr-decay-every",
        "3",
        Kind::Int,
        "classifier: epochs between learning-rate decays (0 = never)",
    ),
    key(
        "lr-decay-factor",
        "0.2",
        Kind::Float,
        "classifier: learning-rate decay factor",
    ),
    key("disc-epochs", "8", Kind::Int, "discretizer: epochs"),
    key(
        "disc-batch-size",
        "64",
        Kind::Int,
        "discretizer: batch size",
    ),
    key(
        "disc-lr",
        "2e-3",
        Kind::Float,
        "discretizer: Adam learning rate",
    ),
    key(
        "commitment-weight",
        "0.25",
        Kind::Float,
        "discretizer: commitment term weight",
    ),
    key(
        "reseed-dead",
        "true",
        Kind::Bool,
        "discretizer: re-seed entries unused for an epoch",
    ),
    key(
        "fgsm-epsilons",
        "1/255,2/255,4/255",
        Kind::FloatList,
        "evaluate: FGSM radii",
    ),
    key(
        "corruptions",
        "all",
        Kind::CorruptionList,
        "evaluate: corruption kinds, or all / none",
    ),
    key(
        "severities",
        "1,2,3,4,5",
        Kind::IntList,
        "evaluate: corruption severities",
    ),
    key(
        "corruption-seed",
        "0",
        Kind::Int,
        "evaluate: corruption noise seed",
    ),
    key(
        "with-discretizer",
        "false",
        Kind::Bool,
        "evaluate: classify Q(x) instead of x",
    ),
    key("eval-batch-size", "256", Kind::Int, "evaluate: batch size"),
    key("discretizer", "", Kind::Path, "discretizer checkpoint"),
    key("classifier", "", Kind::Path, "classifier checkpoint"),
    key(
        "baseline",
        "",
        Kind::Path,
        "baseline classifier checkpoint for relative corruption error",
    ),
    key(
        "analysis-batches",
        "200",
        Kind::Int,
        "analyze: batches for the BN correlation histograms",
    ),
    key(
        "analysis-batch-size",
        "64",
        Kind::Int,
        "analyze: batch size",
    ),
    key(
        "alignment-batches",
        "50",
        Kind::Int,
        "analyze: batches for straight-through gradient alignment",
    ),
    key(
        "fraction-batches",
        "20",
        Kind::Int,
        "analyze: batches for the modified-token fractions",
    ),
    key(
        "bins",
        "40",
        Kind::Int,
        "analyze: histogram bins over [-1, 1]",
    ),
    key(
        "pgd-steps",
        "5",
        Kind::Int,
        "analyze: steps of the pixel attack compared against dat",
    ),
    key(
        "alpha-grid",
        "0,0.1,0.2,0.4",
        Kind::FloatList,
        "analyze: alphas for the modified-token fractions",
    ),
    key(
        "images",
        "100",
        Kind::Int,
        "analyze and attack: test images for per-image measurements",
    ),
];

pub fn lookup_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn cfg_err(msg: impl Into<String>) -> DatError {
    DatError::Config(msg.into())
}

/// Parses a float, also accepting `a/b` fractions and `inf`.
pub fn parse_float(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a
                .trim()
                .parse()
                .map_err(|_| cfg_err(format!("bad number `{s}`")))?;
            let b: f64 = b
                .trim()
                .parse()
                .map_err(|_| cfg_err(format!("bad number `{s}`")))?;
            a / b
        }
        None => s
            .parse()
            .map_err(|_| cfg_err(format!("bad number `{s}`")))?,
    };
    if v.is_nan() {
        return Err(cfg_err(format!("`{s}` is not a number")));
    }
    Ok(v)
}

fn normalize(k: &Key, raw: &str) -> Result<String> {
    let raw = raw.trim();
    let ctx = |e: DatError| match e {
        DatError::Config(m) => cfg_err(format!("{}: {m}", k.name)),
        other => other,
    };
    Ok(match k.kind {
        Kind::Int => raw
            .parse::<u64>()
            .map_err(|_| {
                cfg_err(format!(
                    "{}: expected a non-negative integer, got `{raw}`",
                    k.name
                ))
            })?
            .to_string(),
        Kind::Float if raw == "auto" && k.default == "auto" => raw.to_string(),
        Kind::Float => parse_float(raw).map_err(ctx)?.to_string(),
        Kind::Bool => match raw {
            "true" | "1" | "yes" => "true".into(),
            "false" | "0" | "no" => "false".into(),
            _ => {
                return Err(cfg_err(format!(
                    "{}: expected true or false, got `{raw}`",
                    k.name
                )))
            }
        },
        Kind::Text | Kind::Path => raw.to_string(),
        Kind::Choice(opts) => {
            let canon = raw.replace('-', "_");
            if !opts.contains(&canon.as_str()) && !opts.contains(&raw) {
                return Err(cfg_err(format!(
                    "{}: `{raw}` is not one of {}",
                    k.name,
                    opts.join(", ")
                )));
            }
            if opts.contains(&raw) {
                raw.to_string()
            } else {
                canon
            }
        }
        Kind::FloatList => split_list(raw)
            .map(|s| parse_float(s).map(|v| v.to_string()))
            .collect::<Result<Vec<_>>>()
            .map_err(ctx)?
            .join(","),
        Kind::IntList => split_list(raw)
            .map(|s| {
                s.parse::<u64>()
                    .map(|v| v.to_string())
                    .map_err(|_| cfg_err(format!("{}: bad integer `{s}`", k.name)))
            })
            .collect::<Result<Vec<_>>>()?
            .join(","),
        Kind::CorruptionList => match raw {
            "all" => CorruptionKind::ALL.map(|c| c.name()).join(","),
            "none" | "" => String::new(),
            _ => split_list(raw)
                .map(|s| {
                    s.parse::<CorruptionKind>()
                        .map(|c| c.name().to_string())
                        .map_err(|e| cfg_err(format!("{}: {e}", k.name)))
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
        },
    })
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

/// Reads `key=value` lines; `#` starts a comment; later lines win.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            cfg_err(format!(
                "{origin}:{}: expected key=value, got `{line}`",
                i + 1
            ))
        })?;
        let k = k.trim();
        if lookup_key(k).is_none() {
            return Err(cfg_err(format!("{origin}:{}: unknown key `{k}`", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_text(&text, &path.display().to_string())
}

fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A fully resolved, validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::resolve(&BTreeMap::new()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    /// Defaults overlaid with `overrides`; every value is normalized and the
    /// typed views are validated.
    pub fn resolve(overrides: &BTreeMap<String, String>) -> Result<Self> {
        for k in overrides.keys() {
            if lookup_key(k).is_none() {
                return Err(cfg_err(format!("unknown key `{k}`")));
            }
        }
        let mut values = BTreeMap::new();
        for k in KEYS {
            let raw = overrides
                .get(k.name)
                .map(String::as_str)
                .unwrap_or(k.default);
            values.insert(k.name, normalize(k, raw)?);
        }
        let cfg = Self { values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut m: BTreeMap<String, String> = self
            .values
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        m.insert(key.to_string(), value.to_string());
        Self::resolve(&m)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unknown key {key}"))
    }

    fn int(&self, key: &str) -> usize {
        self.get(key).parse().expect("normalized integer")
    }

    fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("normalized integer")
    }

    fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("normalized float")
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn floats(&self, key: &str) -> Vec<f64> {
        split_list(self.get(key))
            .map(|s| s.parse().expect("normalized"))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.get("run-name").is_empty() || self.get("run-name").contains(['/', '\\']) {
            return Err(cfg_err(
                "run-name must be non-empty and contain no path separators",
            ));
        }
        for k in [
            "epochs",
            "batch-size",
            "disc-batch-size",
            "eval-batch-size",
            "analysis-batch-size",
            "bins",
            "steps",
        ] {
            if self.int(k) == 0 && k != "epochs" {
                return Err(cfg_err(format!("{k} must be positive")));
            }
        }
        for s in split_list(self.get("severities")) {
            if !(1..=5).contains(&s.parse::<u8>().unwrap_or(0)) {
                return Err(cfg_err(format!("severities: {s} outside 1..=5")));
            }
        }
        if self.get("data") == "idx" {
            for k in ["train-images", "train-labels", "test-images", "test-labels"] {
                if self.get(k).is_empty() {
                    return Err(cfg_err(format!("data=idx needs {k}")));
                }
            }
        }
        // Checked in every mode: analyze uses the perturbation settings too.
        self.perturbation()
            .validate()
            .map_err(|e| cfg_err(e.to_string()))?;
        if self.get("mode") == "pixel_at"
            && !(self.float("epsilon") > 0.0 && self.float("epsilon").is_finite())
        {
            return Err(cfg_err("pixel_at needs a finite epsilon > 0"));
        }
        if !(0.0..=1.0).contains(&self.float("fraction")) {
            return Err(cfg_err("fraction must lie in [0, 1]"));
        }
        for (k, v) in [("lr", self.float("lr")), ("disc-lr", self.float("disc-lr"))] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(cfg_err(format!("{k} must be a positive finite number")));
            }
        }
        Ok(())
    }

    /// `key=value` lines for every hashed key, sorted by key.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            if lookup_key(k).is_some_and(|spec| spec.hashed) {
                s.push_str(k);
                s.push('=');
                s.push_str(v);
                s.push('\n');
            }
        }
        s
    }

    /// First 16 hex digits of SHA-256 over [`Self::canonical`].
    pub fn hash(&self) -> String {
        short_hash(&self.canonical())
    }

    /// The exact bytes a run's hash covers: the subcommand, then [`Self::canonical`].
    pub fn run_bytes(&self, command: &str) -> String {
        format!("command={command}\n{}", self.canonical())
    }

    pub fn run_hash(&self, command: &str) -> String {
        short_hash(&self.run_bytes(command))
    }

    pub fn run_name(&self) -> &str {
        self.get("run-name")
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out-dir"))
    }

    pub fn dataset(&self) -> DatasetSpec {
        match self.get("data") {
            "idx" => DatasetSpec::Idx {
                train_images: self.path("train-images").unwrap_or_default(),
                train_labels: self.path("train-labels").unwrap_or_default(),
                test_images: self.path("test-images").unwrap_or_default(),
                test_labels: self.path("test-labels").unwrap_or_default(),
            },
            _ => DatasetSpec::Synthetic(SyntheticSpec {
                classes: self.int("classes"),
                train: self.int("train-size"),
                test: self.int("test-size"),
                size: self.int("image-size"),
                seed: self.u64("data-seed"),
            }),
        }
    }

    pub fn classifier(
        &self,
        in_channels: usize,
        image_size: usize,
        num_classes: usize,
    ) -> ClassifierConfig {
        ClassifierConfig {
            in_channels,
            image_size,
            width: self.int("width"),
            num_classes,
            bn_momentum: self.float("bn-momentum"),
            ..Default::default()
        }
    }

    pub fn discretizer(&self, channels: usize) -> DiscretizerConfig {
        DiscretizerConfig {
            channels,
            factor: self.int("factor"),
            latent_dim: self.int("latent-dim"),
            codebook_size: self.int("codebook-size"),
            hidden: self.int("hidden"),
        }
    }

    pub fn discretizer_training(&self) -> DiscretizerTrainConfig {
        DiscretizerTrainConfig {
            epochs: self.int("disc-epochs"),
            batch_size: self.int("disc-batch-size"),
            learning_rate: self.float("disc-lr"),
            commitment_weight: self.float("commitment-weight"),
            seed: self.seed(),
            reseed_dead_entries: self.flag("reseed-dead"),
        }
    }

    pub fn perturbation(&self) -> PerturbationSpec {
        let bound = match self.get("bound") {
            "inf" => Some((PNorm::Linf, self.float("epsilon"))),
            "2" => Some((PNorm::L2, self.float("epsilon"))),
            _ => None,
        };
        PerturbationSpec {
            alpha: self.float("alpha"),
            mode: if self.get("gradient") == "sign" {
                GradientMode::Sign
            } else {
                GradientMode::Raw
            },
            bound,
            source: if self.get("source") == "full_backward" {
                GradientSource::FullBackward
            } else {
                GradientSource::StraightThrough
            },
        }
    }

    pub fn step_size(&self) -> f64 {
        let eps = self.float("epsilon");
        match self.get("step-size") {
            "auto" => eps.min(2.5 * eps / self.int("steps") as f64),
            v => v.parse().expect("normalized float"),
        }
    }

    pub fn train_mode(&self) -> TrainMode {
        match self.get("mode") {
            "pixel_at" => TrainMode::PixelAt {
                epsilon: self.float("epsilon"),
                steps: self.int("steps"),
                step_size: self.step_size(),
            },
            "dat" => TrainMode::Dat(self.perturbation()),
            "random_word" => TrainMode::RandomWord {
                fraction: self.float("fraction"),
            },
            _ => TrainMode::Standard,
        }
    }

    pub fn classifier_training(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            epochs: self.int("epochs"),
            batch_size: self.int("batch-size"),
            learning_rate: self.float("lr"),
            momentum: self.float("momentum"),
            weight_decay: self.float("weight-decay"),
            lr_decay_every: self.int("lr-decay-every"),
            lr_decay_factor: self.float("lr-decay-factor"),
            seed: self.seed(),
        }
    }

    pub fn fgsm_epsilons(&self) -> Vec<f64> {
        self.floats("fgsm-epsilons")
    }

    pub fn corruptions(&self) -> Vec<CorruptionSpec> {
        let seed = self.u64("corruption-seed");
        let sev: Vec<u8> = split_list(self.get("severities"))
            .map(|s| s.parse().expect("validated"))
            .collect();
        split_list(self.get("corruptions"))
            .map(|k| k.parse::<CorruptionKind>().expect("normalized"))
            .flat_map(|kind| {
                sev.iter().map(move |&severity| CorruptionSpec {
                    kind,
                    severity,
                    seed,
                })
            })
            .collect()
    }

    pub fn with_discretizer(&self) -> bool {
        self.flag("with-discretizer")
    }

    pub fn eval_batch_size(&self) -> usize {
        self.int("eval-batch-size")
    }

    pub fn discretizer_path(&self) -> Option<PathBuf> {
        self.path("discretizer")
    }

    pub fn classifier_path(&self) -> Option<PathBuf> {
        self.path("classifier")
    }

    pub fn baseline_path(&self) -> Option<PathBuf> {
        self.path("baseline")
    }

    pub fn analysis_batches(&self) -> usize {
        self.int("analysis-batches")
    }

    pub fn analysis_batch_size(&self) -> usize {
        self.int("analysis-batch-size")
    }

    pub fn alignment_batches(&self) -> usize {
        self.int("alignment-batches")
    }

    pub fn fraction_batches(&self) -> usize {
        self.int("fraction-batches")
    }

    pub fn bins(&self) -> usize {
        self.int("bins")
    }

    pub fn pgd_steps(&self) -> usize {
        self.int("pgd-steps")
    }

    pub fn epsilon(&self) -> f64 {
        self.float("epsilon")
    }

    pub fn alpha_grid(&self) -> Vec<f64> {
        self.floats("alpha-grid")
    }

    pub fn images(&self) -> usize {
        self.int("images")
    }
}
