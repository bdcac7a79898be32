//! `RunConfig`: one TOML file with a section per concern, plus `--field value`
//! overrides on the command line. Flags win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use metafit::episodes::AugmentPolicy;
use metafit::eval::Method;
use metafit::gradsuite::SuiteConfig;
use metafit::metaloss::MetaConfig;
use metafit::nn::{ArchKind, ArchSpec, BINARY_CLASSES};
use metafit::trainer::{PretrainConfig, TrainSchedule};
use metafit::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub method: Method,
    /// Holds `train/` and `test/` class trees.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Model to evaluate; defaults to `<out_dir>/checkpoints/final.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Continue training from `<out_dir>/checkpoints/last.ckpt`.
    pub resume: bool,
    /// Record wall-clock time per iteration in the log (makes logs run-dependent).
    pub log_timing: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            method: Method::Daml,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            resume: false,
            log_timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: ArchKind,
    /// `[D]` for mlp, `[C, H, W]` for conv4.
    pub input_shape: Vec<usize>,
    pub widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: ArchKind::Mlp,
            input_shape: vec![8],
            widths: vec![32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub total_iterations: usize,
    /// Ignored for `method = "maml"`, which never switches objective.
    pub da_activation_iteration: usize,
    pub lr_decay_iterations: Vec<usize>,
    pub lr_decay_factor: f64,
    pub checkpoint_every: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        ScheduleSection {
            total_iterations: s.total_iterations,
            da_activation_iteration: s.da_activation_iteration.unwrap_or(s.total_iterations),
            lr_decay_iterations: s.lr_decay_iterations,
            lr_decay_factor: s.lr_decay_factor,
            checkpoint_every: s.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_train_classes: usize,
    pub n_test_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_train_classes: 8,
            n_test_classes: 3,
            samples_per_class: 40,
            dim: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub runs: usize,
    /// Support sizes evaluated by `eval`, one report each.
    pub k_sweep: Vec<usize>,
    /// Supervised steps per run for the fine-tuning baseline.
    pub ft_steps: usize,
    /// Neighbors for the KNN baseline; defaults to `min(5, 2k - 1)`.
    pub n_neighbors: Option<usize>,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        EvalSection {
            runs: 30,
            k_sweep: vec![1, 3, 5],
            ft_steps: 100,
            n_neighbors: None,
            pretrain_steps: p.steps,
            pretrain_lr: p.lr,
            pretrain_batch_size: p.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub etas: Vec<f64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            etas: vec![1.0, 3.0, 5.0, 7.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub trials: usize,
    pub step: f64,
    /// Corrupt this op's backward rule (builds with the `fault-injection` feature only).
    pub inject_fault: Option<String>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let s = SuiteConfig::default();
        GradcheckSection {
            trials: s.trials,
            step: s.step,
            inject_fault: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub meta: MetaConfig,
    pub schedule: ScheduleSection,
    pub augment: AugmentPolicy,
    pub synth: SynthSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub gradcheck: GradcheckSection,
}

/// Whether a field takes a value or may be given as a bare switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Value,
    Switch,
}

/// Every settable field as `(section, key, kind)`. Keys are unique across sections.
pub const FIELDS: &[(&str, &str, FieldKind)] = &[
    ("run", "seed", FieldKind::Value),
    ("run", "method", FieldKind::Value),
    ("run", "data_dir", FieldKind::Value),
    ("run", "out_dir", FieldKind::Value),
    ("run", "checkpoint", FieldKind::Value),
    ("run", "resume", FieldKind::Switch),
    ("run", "log_timing", FieldKind::Switch),
    ("model", "arch", FieldKind::Value),
    ("model", "input_shape", FieldKind::Value),
    ("model", "widths", FieldKind::Value),
    ("meta", "eta", FieldKind::Value),
    ("meta", "epsilon", FieldKind::Value),
    ("meta", "gamma", FieldKind::Value),
    ("meta", "alpha", FieldKind::Value),
    ("meta", "inner_steps", FieldKind::Value),
    ("meta", "k", FieldKind::Value),
    ("meta", "q", FieldKind::Value),
    ("meta", "tasks_per_batch", FieldKind::Value),
    ("meta", "second_order", FieldKind::Switch),
    ("meta", "reduction", FieldKind::Value),
    ("meta", "optimizer", FieldKind::Value),
    ("schedule", "total_iterations", FieldKind::Value),
    ("schedule", "da_activation_iteration", FieldKind::Value),
    ("schedule", "lr_decay_iterations", FieldKind::Value),
    ("schedule", "lr_decay_factor", FieldKind::Value),
    ("schedule", "checkpoint_every", FieldKind::Value),
    ("augment", "rotate", FieldKind::Switch),
    ("augment", "rotation_degrees", FieldKind::Value),
    ("augment", "flip", FieldKind::Switch),
    ("augment", "flip_h_prob", FieldKind::Value),
    ("augment", "flip_v_prob", FieldKind::Value),
    ("augment", "scale", FieldKind::Switch),
    ("augment", "scale_min", FieldKind::Value),
    ("augment", "scale_max", FieldKind::Value),
    ("synth", "n_train_classes", FieldKind::Value),
    ("synth", "n_test_classes", FieldKind::Value),
    ("synth", "samples_per_class", FieldKind::Value),
    ("synth", "dim", FieldKind::Value),
    ("eval", "runs", FieldKind::Value),
    ("eval", "k_sweep", FieldKind::Value),
    ("eval", "ft_steps", FieldKind::Value),
    ("eval", "n_neighbors", FieldKind::Value),
    ("eval", "pretrain_steps", FieldKind::Value),
    ("eval", "pretrain_lr", FieldKind::Value),
    ("eval", "pretrain_batch_size", FieldKind::Value),
    ("ablate", "etas", FieldKind::Value),
    ("gradcheck", "trials", FieldKind::Value),
    ("gradcheck", "step", FieldKind::Value),
    ("gradcheck", "inject_fault", FieldKind::Value),
];

pub fn section_of(key: &str) -> Option<&'static str> {
    FIELDS.iter().find(|(_, k, _)| *k == key).map(|(s, _, _)| *s)
}

/// Reads a command-line value as a TOML literal; anything that does not parse
/// (a bare path, a method name) is taken as a string. `1,3,5` is read as a list.
fn parse_value(raw: &str) -> toml::Value {
    let literal = |text: &str| {
        toml::from_str::<toml::Table>(&format!("v = {text}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
    };
    if let Some(v) = literal(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Some(v) = literal(&format!("[{raw}]")) {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}

/// Whether `section.key` holds a list, so a single flag value can stand for a one-element list.
fn default_is_list(section: &str, key: &str) -> bool {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    defaults
        .get(section)
        .and_then(|s| s.get(key))
        .is_some_and(toml::Value::is_array)
}

impl RunConfig {
    /// Loads `path` (or the defaults when `None`) and applies `overrides` in order.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            let section = section_of(key).ok_or_else(|| Error::Config(format!("unknown field `{key}`")))?;
            let entry = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(Error::Config(format!("`{section}` must be a table")));
            };
            let mut value = parse_value(raw);
            if default_is_list(section, key) && !value.is_array() {
                value = toml::Value::Array(vec![value]);
            }
            t.insert(key.clone(), value);
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.arch_spec().validate().map_err(cfg)?;
        self.meta.validate().map_err(cfg)?;
        self.train_schedule().validate().map_err(cfg)?;
        self.augment.validate().map_err(cfg)?;
        if self.eval.runs == 0 {
            return Err(Error::Config("eval.runs must be at least 1".into()));
        }
        if self.eval.k_sweep.is_empty() || self.eval.k_sweep.contains(&0) {
            return Err(Error::Config(
                "eval.k_sweep must list positive support sizes".into(),
            ));
        }
        if self.eval.ft_steps == 0 {
            return Err(Error::Config("eval.ft_steps must be at least 1".into()));
        }
        if self.ablate.etas.is_empty() {
            return Err(Error::Config("ablate.etas must not be empty".into()));
        }
        Ok(())
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            arch: self.model.arch,
            input_shape: self.model.input_shape.clone(),
            widths: self.model.widths.clone(),
            classes: BINARY_CLASSES,
        }
    }

    /// The schedule for this run's method: `maml` never switches to the
    /// difficulty-aware objective.
    pub fn train_schedule(&self) -> TrainSchedule {
        let s = &self.schedule;
        TrainSchedule {
            total_iterations: s.total_iterations,
            da_activation_iteration: match self.run.method {
                Method::Maml => None,
                _ => Some(s.da_activation_iteration),
            },
            lr_decay_iterations: s.lr_decay_iterations.clone(),
            lr_decay_factor: s.lr_decay_factor,
            checkpoint_every: s.checkpoint_every,
            seed: self.run.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.eval.pretrain_steps,
            lr: self.eval.pretrain_lr,
            batch_size: self.eval.pretrain_batch_size,
            seed: self.run.seed,
        }
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            trials: self.gradcheck.trials,
            seed: self.run.seed,
            step: self.gradcheck.step,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run.out_dir.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.run.out_dir.join("reports")
    }

    pub fn model_checkpoint(&self) -> PathBuf {
        self.run
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.checkpoint_dir().join("final.ckpt"))
    }
}
