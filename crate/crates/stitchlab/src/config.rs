//! Experiment configuration: one TOML file describes one experiment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stitchlab_core::adversarial::AttackSpec;
use stitchlab_core::data::PadMode;
use stitchlab_core::objectives::{ATConfig, FulaMode, ObjectiveSpec};
use stitchlab_core::shortcuts::ShortcutKind;
use stitchlab_core::trainer::{BaseTrainRecipe, ShortcutConfig, StitchTrainRecipe};
use stitchlab_core::{ArchId, NetConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TrainBase,
    StitchPlot,
    CrossLayer,
    Shortcut,
    SubsetClasses,
    Probe,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::TrainBase => "train-base",
            ExperimentKind::StitchPlot => "stitch-plot",
            ExperimentKind::CrossLayer => "cross-layer",
            ExperimentKind::Shortcut => "shortcut",
            ExperimentKind::SubsetClasses => "subset-classes",
            ExperimentKind::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    /// Ten CIFAR-100 fine classes relabeled 0..10.
    Cifar100Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationChoice {
    /// Per-channel statistics of the primary training set.
    Dataset,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "SyntheticConfig::default_amplitude")]
    pub amplitude: f32,
    #[serde(default = "SyntheticConfig::default_noise")]
    pub noise: f32,
}

impl SyntheticConfig {
    fn default_amplitude() -> f32 {
        0.08
    }

    fn default_noise() -> f32 {
        0.02
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            amplitude: Self::default_amplitude(),
            noise: Self::default_noise(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub resolution: usize,
    /// Training images kept (after any class filtering); all when absent.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: Option<usize>,
    #[serde(default = "DataConfig::default_normalization")]
    pub normalization: NormalizationChoice,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Fine labels used by `cifar100-split`.
    #[serde(default)]
    pub cifar100_classes: Option<Vec<usize>>,
    /// Generator seed of synthetic data.
    #[serde(default = "DataConfig::default_seed")]
    pub seed: u64,
}

impl DataConfig {
    fn default_normalization() -> NormalizationChoice {
        NormalizationChoice::Dataset
    }

    fn default_seed() -> u64 {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskChoice {
    /// The `[data]` task; stitching layers always train on it.
    #[default]
    Primary,
    /// A second task over the same input space (`[cross_task]`, or a
    /// disjoint synthetic family when that table is absent).
    CrossTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub arch: ArchId,
    #[serde(default = "NetSpec::default_width")]
    pub width: f32,
    pub seed: u64,
    #[serde(default)]
    pub task: TaskChoice,
    /// Load weights instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<BaseTrainRecipe>,
}

impl NetSpec {
    fn default_width() -> f32 {
        1.0
    }

    pub fn net_config(&self, num_classes: usize, resolution: usize) -> NetConfig {
        NetConfig::new(self.arch, num_classes).with_width(self.width).with_resolution(resolution)
    }
}

/// Objective names as written in configs: `slm`, `tlm`, `hint`, `fula`,
/// `fula:uniform`, `fula:last-only`, `fula:cutoff-<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectiveName(pub ObjectiveSpec);

impl FromStr for ObjectiveName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let spec = match s.to_ascii_lowercase().as_str() {
            "slm" => ObjectiveSpec::Slm,
            "tlm" => ObjectiveSpec::Tlm,
            "hint" => ObjectiveSpec::Hint,
            "fula" | "fula:uniform" => ObjectiveSpec::Fula(FulaMode::Uniform),
            "fula:last-only" => ObjectiveSpec::Fula(FulaMode::LastOnly),
            other => match other.strip_prefix("fula:cutoff-").map(str::parse::<usize>) {
                Some(Ok(n)) => ObjectiveSpec::Fula(FulaMode::Cutoff(n)),
                _ => return Err(format!("unknown objective `{s}` (expected slm, tlm, hint, fula[:uniform|:last-only|:cutoff-N])")),
            },
        };
        Ok(ObjectiveName(spec))
    }
}

impl TryFrom<String> for ObjectiveName {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl fmt::Display for ObjectiveName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            ObjectiveSpec::Slm => f.write_str("slm"),
            ObjectiveSpec::Tlm => f.write_str("tlm"),
            ObjectiveSpec::Hint => f.write_str("hint"),
            ObjectiveSpec::Fula(FulaMode::Uniform) => f.write_str("fula"),
            ObjectiveSpec::Fula(FulaMode::LastOnly) => f.write_str("fula:last-only"),
            ObjectiveSpec::Fula(FulaMode::Cutoff(n)) => write!(f, "fula:cutoff-{n}"),
        }
    }
}

impl From<ObjectiveName> for String {
    fn from(o: ObjectiveName) -> String {
        o.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchSection {
    #[serde(default = "StitchSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "StitchSection::default_lr")]
    pub lr: f32,
    #[serde(default = "StitchSection::default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "StitchSection::default_batch")]
    pub batch: usize,
    #[serde(default = "StitchSection::default_n_init")]
    pub n_init: usize,
    #[serde(default = "StitchSection::default_objectives")]
    pub objectives: Vec<ObjectiveName>,
    /// Stitching taps; every tap of the end network when absent.
    #[serde(default)]
    pub taps: Option<Vec<usize>>,
    /// Share of adversarial samples; one stitching plot per value.
    #[serde(default)]
    pub alphas: Vec<f32>,
    /// Attack used to craft training-time adversarial examples.
    #[serde(default)]
    pub attack: AttackSpec,
    /// Stitching trains on the first `train_samples` training images.
    #[serde(default)]
    pub train_samples: Option<usize>,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub pad_mode: PadMode,
    #[serde(default = "yes")]
    pub rs_update: bool,
    #[serde(default = "yes")]
    pub initial_eval: bool,
    /// Robust accuracy is measured every this many epochs and after the last.
    #[serde(default = "StitchSection::default_robust_eval_every")]
    pub robust_eval_every: usize,
    #[serde(default)]
    pub shortcut: Option<ShortcutConfig>,
    /// Class counts for `subset-classes`.
    #[serde(default)]
    pub class_counts: Option<Vec<usize>>,
    /// `(i, j)` for `subset-classes`.
    #[serde(default)]
    pub pair: Option<(usize, usize)>,
    /// Test images attacked for the penultimate-layer probe.
    #[serde(default = "StitchSection::default_probe_samples")]
    pub probe_samples: usize,
}

fn yes() -> bool {
    true
}

impl StitchSection {
    fn default_epochs() -> usize {
        30
    }

    fn default_lr() -> f32 {
        1e-3
    }

    fn default_weight_decay() -> f32 {
        1e-4
    }

    fn default_batch() -> usize {
        128
    }

    fn default_n_init() -> usize {
        100
    }

    fn default_objectives() -> Vec<ObjectiveName> {
        vec![
            ObjectiveName(ObjectiveSpec::Slm),
            ObjectiveName(ObjectiveSpec::Tlm),
            ObjectiveName(ObjectiveSpec::Hint),
            ObjectiveName(ObjectiveSpec::Fula(FulaMode::Uniform)),
        ]
    }

    fn default_robust_eval_every() -> usize {
        1
    }

    fn default_probe_samples() -> usize {
        500
    }

    /// Recipe for one objective and mixture ratio.
    pub fn recipe(&self, objective: ObjectiveSpec, alpha: Option<f32>, eval: &EvalConfig) -> StitchTrainRecipe {
        let mut r = StitchTrainRecipe::new(self.epochs, objective);
        r.lr = self.lr;
        r.weight_decay = self.weight_decay;
        r.batch = self.batch;
        r.n_init = self.n_init;
        r.augment = self.augment;
        r.pad_mode = self.pad_mode;
        r.rs_update = self.rs_update;
        r.initial_eval = self.initial_eval;
        r.shortcut = self.shortcut;
        r.at = alpha.filter(|&a| a > 0.0).map(|alpha| ATConfig {
            alpha,
            attack: self.attack,
        });
        r.robust_eval_samples = eval.robust_samples;
        r.robust_eval_every = self.robust_eval_every;
        r.eval_attack = eval.attack;
        r
    }
}

impl Default for StitchSection {
    fn default() -> Self {
        toml::from_str("").expect("all stitch fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "EvalConfig::default_batch")]
    pub batch: usize,
    /// Test images used for robust accuracy (0 disables it).
    #[serde(default = "EvalConfig::default_robust_samples")]
    pub robust_samples: usize,
    #[serde(default = "AttackSpec::evaluation")]
    pub attack: AttackSpec,
}

impl EvalConfig {
    fn default_batch() -> usize {
        256
    }

    fn default_robust_samples() -> usize {
        500
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch: Self::default_batch(),
            robust_samples: Self::default_robust_samples(),
            attack: AttackSpec::evaluation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Root of every random stream in the run.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "ExperimentConfig::default_workers")]
    pub workers: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub cross_task: Option<DataConfig>,
    pub front: NetSpec,
    /// Absent for self-stitching, where the front network is its own end.
    #[serde(default)]
    pub end: Option<NetSpec>,
    #[serde(default)]
    pub stitch: StitchSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    fn default_workers() -> usize {
        1
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Schema {
                path: if path == "." { String::from("<root>") } else { path },
                message: e.into_inner().message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn end_spec(&self) -> &NetSpec {
        self.end.as_ref().unwrap_or(&self.front)
    }

    pub fn is_self_stitch(&self) -> bool {
        self.end.is_none()
    }

    /// Semantic checks that the schema alone cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, message: String| CliError::Schema {
            path: path.to_string(),
            message,
        };
        if self.workers == 0 {
            return Err(bad("workers", "must be at least 1".into()));
        }
        if self.data.resolution < 8 {
            return Err(bad("data.resolution", "must be at least 8".into()));
        }
        for (name, spec) in [("front", Some(&self.front)), ("end", self.end.as_ref())] {
            let Some(spec) = spec else { continue };
            if !(spec.width > 0.0) {
                return Err(bad(&format!("{name}.width"), "must be positive".into()));
            }
            if spec.checkpoint.is_none() && spec.train.is_none() {
                return Err(bad(&format!("{name}.train"), "needed when no checkpoint is given".into()));
            }
            if let Some(r) = &spec.train {
                r.validate().map_err(|e| bad(&format!("{name}.train"), e.to_string()))?;
            }
        }
        let s = &self.stitch;
        if s.objectives.is_empty() && self.experiment != ExperimentKind::TrainBase {
            return Err(bad("stitch.objectives", "must not be empty".into()));
        }
        if let Some(taps) = &s.taps {
            if taps.is_empty() || taps.iter().any(|&t| t > 9) {
                return Err(bad("stitch.taps", "must be a nonempty list of taps in 0..=9".into()));
            }
        }
        if let Some(a) = s.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(bad("stitch.alphas", format!("{a} is outside [0, 1]")));
        }
        s.attack.validate().map_err(|e| bad("stitch.attack", e.to_string()))?;
        self.eval.attack.validate().map_err(|e| bad("eval.attack", e.to_string()))?;
        match self.experiment {
            ExperimentKind::Shortcut => match &s.shortcut {
                Some(sc) if sc.kind != ShortcutKind::None => {}
                _ => return Err(bad("stitch.shortcut", "shortcut experiments need a marker kind".into())),
            },
            ExperimentKind::SubsetClasses => {
                if s.class_counts.as_ref().is_none_or(|c| c.is_empty()) {
                    return Err(bad("stitch.class_counts", "required for subset-classes".into()));
                }
                if s.pair.is_none() {
                    return Err(bad("stitch.pair", "required for subset-classes".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Applies `--synthetic` and attack overrides from the command line.
    pub fn apply_overrides(&mut self, o: &Overrides) {
        if o.synthetic {
            self.data.source = DataSource::Synthetic;
            if let Some(ct) = &mut self.cross_task {
                ct.source = DataSource::Synthetic;
            }
        }
        if let Some(w) = o.workers {
            self.workers = w.max(1);
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = Some(dir.clone());
        }
        if let Some(eps) = o.epsilon {
            self.stitch.attack.epsilon = eps;
            self.eval.attack.epsilon = eps;
        }
        if let Some(step) = o.step_size {
            self.stitch.attack.step_size = step;
        }
        if let Some(iters) = o.iters {
            self.stitch.attack.iters = iters;
        }
        if let Some(rs) = o.random_start {
            self.stitch.attack.random_start = rs;
        }
    }

    /// SHA-256 over the canonical JSON form (sorted keys, no whitespace).
    /// The output directory and worker count do not affect results and are
    /// left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
            map.remove("workers");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub synthetic: bool,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub epsilon: Option<f32>,
    pub step_size: Option<f32>,
    pub iters: Option<usize>,
    pub random_start: Option<bool>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
