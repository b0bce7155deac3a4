//! Experiment configuration: a TOML tree with defaults matching the usual
//! experimental setup (K = 10, b' = 64, b = full local set).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::engine::{BatchSize, CacheMode, GradCount};
use crate::error::{Error, Result};
use crate::schedules::{optimal_constant_p, optimal_constant_p_pl, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedamd,
    Fedavg,
    Scaffold,
    MinibatchSgd,
    BvrLSgd,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Fedamd => "fedamd",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Scaffold => "scaffold",
            Algorithm::MinibatchSgd => "minibatch_sgd",
            Algorithm::BvrLSgd => "bvr_l_sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Quadratic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Feature dimension (synthetic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_dim: Option<usize>,
    /// Parameter dimension (quadratic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_client: Option<usize>,
    /// Per-coordinate standard deviation around each class mean (synthetic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<f64>,
    #[serde(default = "default_classes_per_client")]
    pub classes_per_client: usize,
    /// Test-set size (synthetic); defaults to a fifth of the training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels_path: Option<PathBuf>,
    /// Smallest per-client eigenvalue (quadratic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_min: Option<f64>,
    /// Largest per-client eigenvalue (quadratic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_max: Option<f64>,
    /// Scale of the per-client centers (quadratic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_scale: Option<f64>,
}

fn default_classes_per_client() -> usize {
    2
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            in_dim: None,
            d: None,
            classes: None,
            samples_per_client: None,
            spread: None,
            classes_per_client: default_classes_per_client(),
            test_samples: None,
            images_path: None,
            labels_path: None,
            test_images_path: None,
            test_labels_path: None,
            mu_min: None,
            l_max: None,
            center_scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "quadratic")]
    Quadratic,
    #[serde(rename = "softmax-regression")]
    SoftmaxRegression,
    #[serde(rename = "mlp2")]
    Mlp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::SoftmaxRegression,
            hidden: None,
        }
    }
}

/// Integer batch size or the keyword "full".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSizeConfig {
    Fixed(usize),
    Named(String),
}

impl BatchSizeConfig {
    pub fn resolve(&self) -> Result<BatchSize> {
        match self {
            BatchSizeConfig::Fixed(b) => Ok(BatchSize::Fixed(*b)),
            BatchSizeConfig::Named(s) if s == "full" => Ok(BatchSize::Full),
            BatchSizeConfig::Named(s) => Err(Error::Config(format!(
                "b must be an integer or \"full\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    #[serde(rename = "M")]
    pub clients_total: usize,
    #[serde(rename = "A")]
    pub participants: usize,
    #[serde(rename = "K", default = "default_local_updates")]
    pub local_updates: usize,
    #[serde(default = "default_batch_large")]
    pub b: BatchSizeConfig,
    #[serde(default = "default_batch_small")]
    pub b_small: usize,
}

fn default_local_updates() -> usize {
    10
}

fn default_batch_large() -> BatchSizeConfig {
    BatchSizeConfig::Named("full".into())
}

fn default_batch_small() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Sequential,
}

/// Probability value or the keyword "optimal".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProbabilityConfig {
    Value(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<ProbabilityConfig>,
    #[serde(default = "default_damping")]
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<u32>,
}

fn default_damping() -> f64 {
    1.0
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Constant,
            p: Some(ProbabilityConfig::Named("optimal".into())),
            c: default_damping(),
            tau: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrPreset {
    #[serde(rename = "sequential-nonconvex")]
    SequentialNonconvex,
    #[serde(rename = "constant-nonconvex")]
    ConstantNonconvex,
    #[serde(rename = "constant-pl")]
    ConstantPl,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<LrPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_s: Option<f64>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(rename = "L_sigma", default, skip_serializing_if = "Option::is_none")]
    pub l_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCountConfig {
    Exact,
    Paper,
}

impl From<GradCountConfig> for GradCount {
    fn from(c: GradCountConfig) -> GradCount {
        match c {
            GradCountConfig::Exact => GradCount::Exact,
            GradCountConfig::Paper => GradCount::Paper,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheModeConfig {
    #[serde(rename = "full-table")]
    FullTable,
    #[serde(rename = "massive-client")]
    MassiveClient,
}

impl From<CacheModeConfig> for CacheMode {
    fn from(c: CacheModeConfig) -> CacheMode {
        match c {
            CacheModeConfig::FullTable => CacheMode::FullTable,
            CacheModeConfig::MassiveClient => CacheMode::MassiveClient,
        }
    }
}

/// How the model is initialized. MLPs always start from seeded random
/// weights (a zero start would leave the first layer without gradients).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zeros,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_acc: Option<f64>,
    #[serde(default = "default_grad_count")]
    pub grad_count: GradCountConfig,
    #[serde(default = "default_cache_mode")]
    pub cache_mode: CacheModeConfig,
    #[serde(default)]
    pub g_to_all: bool,
}

fn default_rounds() -> u64 {
    100
}

fn default_init() -> InitKind {
    InitKind::Zeros
}

fn default_eval_every() -> u64 {
    1
}

fn default_grad_count() -> GradCountConfig {
    GradCountConfig::Exact
}

fn default_cache_mode() -> CacheModeConfig {
    CacheModeConfig::FullTable
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: default_rounds(),
            seed: 0,
            init: default_init(),
            eval_every: default_eval_every(),
            target_acc: None,
            grad_count: default_grad_count(),
            cache_mode: default_cache_mode(),
            g_to_all: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub eta_l: Vec<f64>,
    pub eta_s: Vec<f64>,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Fedamd
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub federation: FederationConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub lrs: LrsConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fed = &self.federation;
        if fed.clients_total == 0 {
            return Err(Error::Config("M must be >= 1".into()));
        }
        if fed.participants == 0 {
            return Err(Error::Config("A must be >= 1".into()));
        }
        if fed.participants > fed.clients_total {
            return Err(Error::Config(format!(
                "A must be <= M (A = {}, M = {})",
                fed.participants, fed.clients_total
            )));
        }
        if fed.local_updates == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if fed.b_small == 0 {
            return Err(Error::Config("b_small must be >= 1".into()));
        }
        if let BatchSize::Fixed(b) = fed.b.resolve()? {
            if b < fed.b_small {
                return Err(Error::Config(format!(
                    "b_small must be <= b (b_small = {}, b = {b})",
                    fed.b_small
                )));
            }
        }

        if self.run.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.run.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }

        let sched = &self.schedule;
        if sched.c < 1.0 {
            return Err(Error::Config(format!("c must be >= 1, got {}", sched.c)));
        }
        match sched.kind {
            ScheduleKind::Constant => match &sched.p {
                None => {
                    return Err(Error::Config(
                        "constant schedule needs p (a value in [0, 1] or \"optimal\")".into(),
                    ))
                }
                Some(ProbabilityConfig::Value(p)) if !(0.0..=1.0).contains(p) => {
                    return Err(Error::Config(format!("p must lie in [0, 1], got {p}")));
                }
                Some(ProbabilityConfig::Named(s)) if s != "optimal" => {
                    return Err(Error::Config(format!(
                        "p must be a number or \"optimal\", got \"{s}\""
                    )));
                }
                _ => {}
            },
            ScheduleKind::Sequential => match sched.tau {
                None => {
                    return Err(Error::Config("sequential schedule needs tau".into()));
                }
                Some(tau) if tau < 2 => {
                    return Err(Error::Config(format!("tau must be >= 2, got {tau}")));
                }
                _ => {}
            },
        }

        match (self.dataset.kind, self.model.kind) {
            (DatasetKind::Quadratic, ModelKind::Quadratic) => {}
            (DatasetKind::Quadratic, other) => {
                return Err(Error::Config(format!(
                    "quadratic dataset requires model kind \"quadratic\", got {other:?}"
                )));
            }
            (_, ModelKind::Quadratic) => {
                return Err(Error::Config(
                    "model kind \"quadratic\" requires dataset kind \"quadratic\"".into(),
                ));
            }
            _ => {}
        }

        match self.dataset.kind {
            DatasetKind::Synthetic => {
                if let Some(c) = self.dataset.classes {
                    if c < 2 {
                        return Err(Error::Config("classes must be >= 2".into()));
                    }
                }
                if self.dataset.spread.is_some_and(|s| s < 0.0) {
                    return Err(Error::Config("spread must be >= 0".into()));
                }
            }
            DatasetKind::Idx => {
                if self.dataset.images_path.is_none() || self.dataset.labels_path.is_none() {
                    return Err(Error::Config(
                        "idx dataset needs images_path and labels_path".into(),
                    ));
                }
            }
            DatasetKind::Quadratic => {
                if let (Some(lo), Some(hi)) = (self.dataset.mu_min, self.dataset.l_max) {
                    if lo < 0.0 || hi < lo {
                        return Err(Error::Config(
                            "quadratic eigenvalues need 0 <= mu_min <= l_max".into(),
                        ));
                    }
                }
            }
        }

        if self.model.kind == ModelKind::Mlp2 && self.dataset.kind == DatasetKind::Quadratic {
            unreachable!("covered by the pairing check");
        }
        if self.model.kind == ModelKind::Mlp2 {
            match self.model.hidden {
                Some(h) if h >= 1 => {}
                _ => return Err(Error::Config("mlp2 needs hidden >= 1".into())),
            }
        }

        if self.lrs.preset.is_some() && (self.lrs.eta_l.is_some() || self.lrs.eta_s.is_some()) {
            return Err(Error::Config(
                "lrs: give either preset or explicit eta_l/eta_s, not both".into(),
            ));
        }
        if self.lrs.eta_l.is_some_and(|v| v <= 0.0) || self.lrs.eta_s.is_some_and(|v| v <= 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }

        if let Some(sweep) = &self.sweep {
            if sweep.eta_l.is_empty() || sweep.eta_s.is_empty() {
                return Err(Error::Config("sweep grids must be non-empty".into()));
            }
        }
        Ok(())
    }

    /// Resolves the schedule, turning `p = "optimal"` into the closed-form
    /// value: the PL formula when a PL constant is known (from `lrs.mu` or
    /// exact quadratic bookkeeping), otherwise the nonconvex formula.
    pub fn resolve_schedule(&self, known_mu: Option<f64>) -> Result<Schedule> {
        let a = self.federation.participants as u32;
        match self.schedule.kind {
            ScheduleKind::Sequential => {
                Schedule::sequential(self.schedule.tau.expect("validated"))
            }
            ScheduleKind::Constant => {
                let p = match self.schedule.p.as_ref().expect("validated") {
                    ProbabilityConfig::Value(p) => *p,
                    ProbabilityConfig::Named(_) => match known_mu.or(self.lrs.mu) {
                        Some(mu) => optimal_constant_p_pl(a, self.schedule.c, mu)?,
                        None => optimal_constant_p(a, self.schedule.c)?,
                    },
                };
                Schedule::constant(p)
            }
        }
    }
}
