//! Flat `key = value` run configuration and named presets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::AffineConfig;
use crate::losses::{AuxTerm, CenterKind, DiscriminantKind, ObjectiveConfig, Reduction};
use crate::network::{ArchitectureId, ArchitectureSpec, TapPoint};
use crate::optim::{SgdConfig, StepSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given twice")]
    Duplicate(String),
    #[error("{key} = {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("{key} = {value} conflicts with preset {preset} ({key} = {expected})")]
    PresetConflict {
        key: String,
        value: String,
        preset: String,
        expected: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Fashion,
    Cifar10,
    Cifar100,
    Stl10,
    /// Gaussian blobs generated from the seed.
    Synth,
}

impl DatasetKind {
    const NAMES: [(&'static str, DatasetKind); 6] = [
        ("mnist", DatasetKind::Mnist),
        ("fashion", DatasetKind::Fashion),
        ("cifar10", DatasetKind::Cifar10),
        ("cifar100", DatasetKind::Cifar100),
        ("stl10", DatasetKind::Stl10),
        ("synth", DatasetKind::Synth),
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES.iter().find(|(_, k)| *k == self).expect("listed").0
    }

    pub fn classes(self) -> Option<usize> {
        match self {
            DatasetKind::Cifar100 => Some(100),
            DatasetKind::Synth => None,
            _ => Some(10),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Use only the first `n` training samples (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub synth: SynthConfig,
    pub arch: ArchitectureId,
    /// Overrides the architecture's default conv widths when set.
    pub conv_widths: Option<Vec<usize>>,
    pub fc_width: Option<usize>,
    pub hidden_width: usize,
    pub keep_prob: f64,
    pub objective: ObjectiveConfig,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: Option<AffineConfig>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            dataset: DatasetKind::Mnist,
            data_dir: None,
            train_limit: 0,
            test_limit: 0,
            synth: SynthConfig {
                classes: 3,
                per_class: 100,
                test_per_class: 50,
                separation: 6.0,
                shape: [8, 8, 1],
            },
            arch: ArchitectureId::MnistSmall,
            conv_widths: None,
            fc_width: None,
            hidden_width: 100,
            keep_prob: 0.5,
            objective: ObjectiveConfig::baseline(),
            sgd: SgdConfig::default(),
            epochs: 100,
            batch_size: 100,
            seed: 0,
            augment: None,
            out_dir: None,
        }
    }
}

/// Every recognized key, in the order the resolved config is written.
pub const KEYS: &[&str] = &[
    "preset",
    "dataset",
    "data_dir",
    "train_limit",
    "test_limit",
    "synth_classes",
    "synth_per_class",
    "synth_test_per_class",
    "synth_separation",
    "synth_shape",
    "arch",
    "conv_widths",
    "fc_width",
    "hidden_width",
    "keep_prob",
    "discriminant",
    "discriminant_weight",
    "discriminant_tap",
    "center",
    "center_weight",
    "center_tap",
    "beta",
    "alpha",
    "epsilon",
    "reduction",
    "reset_stats_each_epoch",
    "lr",
    "momentum",
    "weight_decay",
    "lr_drop_factor",
    "lr_drop_period",
    "epochs",
    "batch_size",
    "seed",
    "augment",
    "aug_rotation_deg",
    "aug_translate",
    "aug_scale_min",
    "aug_scale_max",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

/// Settings of a feature the same file switches off (or, for `beta`, sets
/// to a kind without a step size) would silently switch it back on.
fn check_dependents(entries: &[(String, String)]) -> Result<()> {
    let value = |key: &str| entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    for (k, _) in entries {
        let (selector, allowed): (&str, &[&str]) = if k == "beta" {
            ("center", &["minibatch"])
        } else if k.starts_with("discriminant_") {
            ("discriminant", &["batch", "adaptive"])
        } else if k.starts_with("center_") {
            ("center", &["minibatch", "adaptive"])
        } else if k.starts_with("aug_") {
            ("augment", &["true", "1", "yes"])
        } else {
            continue;
        };
        if let Some(v) = value(selector) {
            if !allowed.contains(&v) {
                return Err(ConfigError::Invalid(format!("{k} has no effect with {selector} = {v}")));
            }
        }
    }
    Ok(())
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn parse_list(key: &str, value: &str, sep: char) -> Result<Vec<usize>> {
    value.split(sep).map(|v| parse(key, v.trim())).collect()
}

fn parse_tap(key: &str, value: &str) -> Result<TapPoint> {
    TapPoint::ALL
        .into_iter()
        .find(|t| t.name() == value)
        .ok_or_else(|| bad(key, value, "expected logits or hidden_preact"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn join(values: &[usize], sep: &str) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

impl RunConfig {
    /// Discriminant term, created with paper defaults if absent.
    fn discriminant_mut(&mut self) -> &mut AuxTerm<DiscriminantKind> {
        self.objective.discriminant.get_or_insert(AuxTerm {
            kind: DiscriminantKind::Adaptive,
            weight: 0.0,
            tap: TapPoint::Logits,
        })
    }

    fn center_mut(&mut self) -> &mut AuxTerm<CenterKind> {
        self.objective.center.get_or_insert(AuxTerm {
            kind: CenterKind::Adaptive,
            weight: 0.0,
            tap: TapPoint::HiddenPreact,
        })
    }

    fn augment_mut(&mut self) -> &mut AffineConfig {
        self.augment.get_or_insert_with(AffineConfig::default)
    }

    /// Assigns one key. Setting a `discriminant_*` or `center_*` key enables
    /// that term (adaptive unless chosen otherwise); `beta` selects the
    /// mini-batch center rule.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "preset" => {
                if v != "none" && preset(v).is_none() {
                    return Err(ConfigError::UnknownPreset(v.into()));
                }
                self.preset = (v != "none").then(|| v.to_string());
            }
            "dataset" => {
                self.dataset = DatasetKind::NAMES
                    .iter()
                    .find(|(n, _)| *n == v)
                    .map(|(_, k)| *k)
                    .ok_or_else(|| bad(key, v, "expected mnist, fashion, cifar10, cifar100, stl10 or synth"))?
            }
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_limit" => self.train_limit = parse(key, v)?,
            "test_limit" => self.test_limit = parse(key, v)?,
            "synth_classes" => self.synth.classes = parse(key, v)?,
            "synth_per_class" => self.synth.per_class = parse(key, v)?,
            "synth_test_per_class" => self.synth.test_per_class = parse(key, v)?,
            "synth_separation" => self.synth.separation = parse(key, v)?,
            "synth_shape" => {
                let dims = parse_list(key, v, 'x')?;
                self.synth.shape = dims.try_into().map_err(|_| bad(key, v, "expected HxWxC"))?;
            }
            "arch" => {
                self.arch = v
                    .parse()
                    .map_err(|e: crate::network::NetworkError| bad(key, v, e.to_string()))?
            }
            "conv_widths" => {
                self.conv_widths = if v == "default" {
                    None
                } else {
                    Some(parse_list(key, v, ',')?)
                }
            }
            "fc_width" => self.fc_width = if v == "default" { None } else { Some(parse(key, v)?) },
            "hidden_width" => self.hidden_width = parse(key, v)?,
            "keep_prob" => self.keep_prob = parse(key, v)?,
            "discriminant" => match v {
                "none" => self.objective.discriminant = None,
                "batch" => self.discriminant_mut().kind = DiscriminantKind::Batch,
                "adaptive" => self.discriminant_mut().kind = DiscriminantKind::Adaptive,
                _ => return Err(bad(key, v, "expected none, batch or adaptive")),
            },
            "discriminant_weight" => self.discriminant_mut().weight = parse(key, v)?,
            "discriminant_tap" => self.discriminant_mut().tap = parse_tap(key, v)?,
            "center" => match v {
                "none" => self.objective.center = None,
                "minibatch" => {
                    let c = self.center_mut();
                    if !matches!(c.kind, CenterKind::MiniBatch { .. }) {
                        c.kind = CenterKind::MiniBatch { beta: 1.0 };
                    }
                }
                "adaptive" => self.center_mut().kind = CenterKind::Adaptive,
                _ => return Err(bad(key, v, "expected none, minibatch or adaptive")),
            },
            "center_weight" => self.center_mut().weight = parse(key, v)?,
            "center_tap" => self.center_mut().tap = parse_tap(key, v)?,
            "beta" => {
                let beta = parse(key, v)?;
                let c = self.center_mut();
                c.kind = CenterKind::MiniBatch { beta };
            }
            "alpha" => self.objective.alpha = parse(key, v)?,
            "epsilon" => self.objective.epsilon = parse(key, v)?,
            "reduction" => {
                self.objective.reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(bad(key, v, "expected mean or sum")),
                }
            }
            "reset_stats_each_epoch" => self.objective.reset_each_epoch = parse_bool(key, v)?,
            "lr" => self.sgd.schedule.base_lr = parse(key, v)?,
            "momentum" => self.sgd.momentum = parse(key, v)?,
            "weight_decay" => self.sgd.weight_decay = parse(key, v)?,
            "lr_drop_factor" => self.sgd.schedule.factor = parse(key, v)?,
            "lr_drop_period" => self.sgd.schedule.period = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "augment" => {
                if parse_bool(key, v)? {
                    self.augment_mut();
                } else {
                    self.augment = None;
                }
            }
            "aug_rotation_deg" => self.augment_mut().max_rotation_deg = parse(key, v)?,
            "aug_translate" => self.augment_mut().max_translate = parse(key, v)?,
            "aug_scale_min" => self.augment_mut().min_scale = parse(key, v)?,
            "aug_scale_max" => self.augment_mut().max_scale = parse(key, v)?,
            "out_dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Canonical text of one key; `set(key, get(key))` is a no-op.
    pub fn get(&self, key: &str) -> Option<String> {
        let d = self.objective.discriminant;
        let c = self.objective.center;
        let a = self.augment;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "preset" => self.preset.clone().unwrap_or_else(|| "none".into()),
            "dataset" => self.dataset.name().into(),
            "data_dir" => path(&self.data_dir),
            "train_limit" => self.train_limit.to_string(),
            "test_limit" => self.test_limit.to_string(),
            "synth_classes" => self.synth.classes.to_string(),
            "synth_per_class" => self.synth.per_class.to_string(),
            "synth_test_per_class" => self.synth.test_per_class.to_string(),
            "synth_separation" => self.synth.separation.to_string(),
            "synth_shape" => join(&self.synth.shape, "x"),
            "arch" => self.arch.name().into(),
            "conv_widths" => self.conv_widths.as_deref().map_or("default".into(), |w| join(w, ",")),
            "fc_width" => self.fc_width.map_or("default".into(), |w| w.to_string()),
            "hidden_width" => self.hidden_width.to_string(),
            "keep_prob" => self.keep_prob.to_string(),
            "discriminant" => match d.map(|d| d.kind) {
                None => "none".into(),
                Some(DiscriminantKind::Batch) => "batch".into(),
                Some(DiscriminantKind::Adaptive) => "adaptive".into(),
            },
            "discriminant_weight" => d.map_or(0.0, |d| d.weight).to_string(),
            "discriminant_tap" => d.map_or(TapPoint::Logits, |d| d.tap).name().into(),
            "center" => match c.map(|c| c.kind) {
                None => "none".into(),
                Some(CenterKind::MiniBatch { .. }) => "minibatch".into(),
                Some(CenterKind::Adaptive) => "adaptive".into(),
            },
            "center_weight" => c.map_or(0.0, |c| c.weight).to_string(),
            "center_tap" => c.map_or(TapPoint::HiddenPreact, |c| c.tap).name().into(),
            "beta" => match c.map(|c| c.kind) {
                Some(CenterKind::MiniBatch { beta }) => beta.to_string(),
                _ => "none".into(),
            },
            "alpha" => self.objective.alpha.to_string(),
            "epsilon" => self.objective.epsilon.to_string(),
            "reduction" => self.objective.reduction.name().into(),
            "reset_stats_each_epoch" => self.objective.reset_each_epoch.to_string(),
            "lr" => self.sgd.schedule.base_lr.to_string(),
            "momentum" => self.sgd.momentum.to_string(),
            "weight_decay" => self.sgd.weight_decay.to_string(),
            "lr_drop_factor" => self.sgd.schedule.factor.to_string(),
            "lr_drop_period" => self.sgd.schedule.period.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "augment" => a.is_some().to_string(),
            "aug_rotation_deg" => a.map_or("none".into(), |a| a.max_rotation_deg.to_string()),
            "aug_translate" => a.map_or("none".into(), |a| a.max_translate.to_string()),
            "aug_scale_min" => a.map_or("none".into(), |a| a.min_scale.to_string()),
            "aug_scale_max" => a.map_or("none".into(), |a| a.max_scale.to_string()),
            "out_dir" => path(&self.out_dir),
            _ => return None,
        })
    }

    /// Writes every key; parsing the result reproduces this config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("listed key");
            // Settings of a disabled feature are omitted.
            let disabled = (key.starts_with("discriminant_") && self.objective.discriminant.is_none())
                || ((key.starts_with("center_") || *key == "beta") && self.objective.center.is_none())
                || (key.starts_with("aug_") && self.augment.is_none())
                || (value == "none" && !matches!(*key, "preset" | "discriminant" | "center"));
            if disabled {
                continue;
            }
            writeln!(out, "{key} = {value}").expect("string write");
        }
        out
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` key (or
    /// `preset_override`) seeds the config, after which the file's keys must
    /// agree with every value the preset pins, except the free keys
    /// `data_dir`, `out_dir` and `seed`.
    pub fn parse_text(text: &str, preset_override: Option<&str>) -> Result<RunConfig> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey(k.into()));
            }
            if entries.iter().any(|(e, _)| e == k) {
                return Err(ConfigError::Duplicate(k.into()));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        let preset_name = preset_override
            .map(str::to_string)
            .or_else(|| entries.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.clone()))
            .filter(|p| p != "none");
        let base = match &preset_name {
            Some(name) => preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?,
            None => RunConfig::default(),
        };
        check_dependents(&entries)?;
        let mut cfg = base.clone();
        for (k, v) in &entries {
            if k == "preset" {
                continue;
            }
            cfg.set(k, v)?;
        }
        if let Some(name) = &preset_name {
            for key in KEYS {
                if matches!(*key, "preset" | "data_dir" | "out_dir" | "seed") {
                    continue;
                }
                let (want, got) = (base.get(key), cfg.get(key));
                if want != got {
                    return Err(ConfigError::PresetConflict {
                        key: key.to_string(),
                        value: got.unwrap_or_default(),
                        preset: name.clone(),
                        expected: want.unwrap_or_default(),
                    });
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<&str>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::parse_text(&text, preset_override)
    }

    pub fn architecture(&self, input: [usize; 3], classes: usize) -> ArchitectureSpec {
        let mut spec = ArchitectureSpec::new(self.arch, input, classes);
        if let Some(w) = &self.conv_widths {
            spec.conv_widths = w.clone();
        }
        if let Some(w) = self.fc_width {
            spec.fc_width = w;
        }
        spec.hidden_width = self.hidden_width;
        spec.keep_prob = self.keep_prob;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.epochs == 0 {
            return invalid("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive".into());
        }
        if self.hidden_width == 0 {
            return invalid("hidden_width must be positive".into());
        }
        if self.dataset == DatasetKind::Synth && (self.synth.classes < 2 || self.synth.per_class == 0) {
            return invalid("synthetic data needs synth_classes >= 2 and synth_per_class >= 1".into());
        }
        if let Some(a) = &self.augment {
            if !(a.min_scale > 0.0 && a.min_scale <= a.max_scale) {
                return invalid(format!(
                    "augment scale range [{}, {}] is empty",
                    a.min_scale, a.max_scale
                ));
            }
        }
        self.objective
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sgd.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Default run directory name.
    pub fn run_name(&self) -> String {
        format!("{}-seed{}", self.preset.as_deref().unwrap_or("run"), self.seed)
    }
}

fn mnist_family(epochs: usize, period: usize, weight_decay: f64) -> RunConfig {
    RunConfig {
        epochs,
        sgd: SgdConfig {
            momentum: 0.9,
            weight_decay,
            schedule: StepSchedule {
                base_lr: 0.01,
                factor: 10.0,
                period,
            },
        },
        ..RunConfig::default()
    }
}

fn discriminant(kind: DiscriminantKind, weight: f64) -> Option<AuxTerm<DiscriminantKind>> {
    Some(AuxTerm {
        kind,
        weight,
        tap: TapPoint::Logits,
    })
}

fn center(kind: CenterKind, weight: f64) -> Option<AuxTerm<CenterKind>> {
    Some(AuxTerm {
        kind,
        weight,
        tap: TapPoint::HiddenPreact,
    })
}

/// Loss weights of one dataset's experiments.
struct LossTable {
    discriminant: f64,
    center: f64,
    adaptive_discriminant: f64,
    adaptive_center: f64,
    combined: (f64, f64),
}

fn variant(mut base: RunConfig, name: &str, table: &LossTable) -> Option<RunConfig> {
    let o = &mut base.objective;
    o.alpha = 0.99;
    match name {
        "baseline" => {}
        "discriminant" => o.discriminant = discriminant(DiscriminantKind::Batch, table.discriminant),
        "adaptive-discriminant" => {
            o.discriminant = discriminant(DiscriminantKind::Adaptive, table.adaptive_discriminant)
        }
        "center" => o.center = center(CenterKind::MiniBatch { beta: 1.0 }, table.center),
        "adaptive-center" => o.center = center(CenterKind::Adaptive, table.adaptive_center),
        "combined" => {
            o.discriminant = discriminant(DiscriminantKind::Adaptive, table.combined.0);
            o.center = center(CenterKind::Adaptive, table.combined.1);
        }
        _ => return None,
    }
    Some(base)
}

/// Names accepted by [`preset`].
pub fn preset_names() -> Vec<String> {
    let variants = [
        "baseline",
        "discriminant",
        "adaptive-discriminant",
        "center",
        "adaptive-center",
        "combined",
    ];
    let mut out = Vec::new();
    for ds in ["mnist", "fashion", "cifar10", "cifar100", "stl10"] {
        for v in variants {
            out.push(format!("{ds}-{v}"));
            out.push(format!("{ds}-{v}-desk"));
        }
    }
    out
}

/// Paper hyperparameters per dataset and loss; the `-desk` suffix shrinks
/// the run (subset sizes, epochs) while keeping every loss setting.
pub fn preset(name: &str) -> Option<RunConfig> {
    let (full, desk) = match name.strip_suffix("-desk") {
        Some(n) => (n, true),
        None => (name, false),
    };
    let (ds, v) = full.split_once('-')?;
    let (mut base, table) = match ds {
        "mnist" => (
            mnist_family(100, 50, 0.01),
            LossTable {
                discriminant: 0.01,
                center: 1.0,
                adaptive_discriminant: 0.01,
                adaptive_center: 1.0,
                combined: (0.001, 1.0),
            },
        ),
        "fashion" => (
            RunConfig {
                dataset: DatasetKind::Fashion,
                ..mnist_family(500, 100, 0.01)
            },
            LossTable {
                discriminant: 0.001,
                center: 1.0,
                adaptive_discriminant: 0.0001,
                adaptive_center: 1.0,
                combined: (0.0001, 1.0),
            },
        ),
        "cifar10" | "cifar100" | "stl10" => {
            let (kind, wd, table) = match ds {
                "cifar10" => (
                    DatasetKind::Cifar10,
                    0.01,
                    LossTable {
                        discriminant: 0.001,
                        center: 0.08,
                        adaptive_discriminant: 0.0001,
                        adaptive_center: 0.08,
                        combined: (0.0001, 0.08),
                    },
                ),
                "cifar100" => (
                    DatasetKind::Cifar100,
                    0.001,
                    LossTable {
                        discriminant: 0.01,
                        center: 0.01,
                        adaptive_discriminant: 0.01,
                        adaptive_center: 0.001,
                        combined: (0.01, 0.001),
                    },
                ),
                _ => (
                    DatasetKind::Stl10,
                    0.01,
                    LossTable {
                        discriminant: 0.01,
                        center: 0.01,
                        adaptive_discriminant: 0.01,
                        adaptive_center: 0.001,
                        combined: (0.01, 0.001),
                    },
                ),
            };
            (
                RunConfig {
                    dataset: kind,
                    arch: ArchitectureId::Comparison,
                    augment: Some(AffineConfig::default()),
                    ..mnist_family(500, 100, wd)
                },
                table,
            )
        }
        _ => return None,
    };
    if desk {
        match ds {
            "mnist" | "fashion" => {
                base.epochs = 15;
                base.train_limit = 10_000;
                base.test_limit = 2_000;
            }
            _ => {
                base.epochs = 5;
                base.train_limit = 5_000;
                base.test_limit = 1_000;
            }
        }
    }
    let mut cfg = variant(base, v, &table)?;
    cfg.preset = Some(name.to_string());
    Some(cfg)
}

/// Key documentation, shown by `discrim keys`.
pub fn key_help() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        (
            "preset",
            "named preset supplying defaults that the file must agree with",
        ),
        ("dataset", "mnist | fashion | cifar10 | cifar100 | stl10 | synth"),
        ("data_dir", "directory holding IDX files (else DISCRIM_DATA_DIR)"),
        ("train_limit", "use the first N training samples, 0 = all"),
        ("test_limit", "use the first N test samples, 0 = all"),
        ("synth_classes", "synthetic data: number of classes"),
        ("synth_per_class", "synthetic data: training samples per class"),
        ("synth_test_per_class", "synthetic data: test samples per class"),
        ("synth_separation", "synthetic data: distance between class means"),
        ("synth_shape", "synthetic data: sample shape HxWxC"),
        ("arch", "mnist_small | comparison"),
        ("conv_widths", "comma-separated conv channel counts, or default"),
        (
            "fc_width",
            "width of the FC layer before the hidden features, or default",
        ),
        (
            "hidden_width",
            "width of the hidden feature layer (100, or 2 for scatter plots)",
        ),
        ("keep_prob", "dropout keep probability (comparison net)"),
        ("discriminant", "none | batch | adaptive"),
        ("discriminant_weight", "weight of the discriminant term"),
        ("discriminant_tap", "logits | hidden_preact"),
        ("center", "none | minibatch | adaptive"),
        ("center_weight", "weight of the center term"),
        ("center_tap", "logits | hidden_preact"),
        ("beta", "mini-batch center step size in [0, 1]"),
        ("alpha", "forgetting factor of the adaptive statistics"),
        ("epsilon", "denominator guard of the discriminant ratio"),
        ("reduction", "cross-entropy batch reduction: mean | sum"),
        (
            "reset_stats_each_epoch",
            "zero adaptive statistics at every epoch start",
        ),
        ("lr", "initial learning rate"),
        ("momentum", "SGD momentum"),
        ("weight_decay", "L2 coefficient added to every gradient"),
        ("lr_drop_factor", "learning-rate divisor"),
        ("lr_drop_period", "epochs between learning-rate drops"),
        ("epochs", "training epochs"),
        ("batch_size", "mini-batch size"),
        ("seed", "run seed"),
        ("augment", "random affine augmentation of training batches"),
        ("aug_rotation_deg", "maximum rotation in degrees"),
        ("aug_translate", "maximum shift as a fraction of the side"),
        ("aug_scale_min", "minimum zoom"),
        ("aug_scale_max", "maximum zoom"),
        ("out_dir", "run directory"),
    ])
}
