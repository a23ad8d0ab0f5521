//! Run configuration: one TOML file covering every stage. Unknown keys are
//! rejected so typos surface as config errors instead of silent defaults.
//! Physics constants of the toy dynamics stay at library defaults; the file
//! exposes the scale and budget knobs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use stormsteer_core::dynamics::DynamicsConfig;
use stormsteer_core::field::GridSpec;
use stormsteer_core::forecaster::TrainConfig;
use stormsteer_core::transfer::TransferTrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridBlock {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub periodic_x: bool,
    pub periodic_y: bool,
}

impl Default for GridBlock {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            levels: 2,
            periodic_x: true,
            periodic_y: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsBlock {
    pub years: usize,
    pub steps_per_year: usize,
    pub spinup_steps: usize,
}

impl Default for DynamicsBlock {
    fn default() -> Self {
        Self {
            years: 3,
            steps_per_year: 64,
            spinup_steps: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingBlock {
    pub hidden: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            hidden: d.hidden,
            iters: d.iters,
            batch: d.batch,
            lr: d.lr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferBlock {
    pub hidden: usize,
    pub iters: usize,
}

impl Default for TransferBlock {
    fn default() -> Self {
        let d = TransferTrainConfig::default();
        Self {
            hidden: d.hidden,
            iters: d.iters,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogBlock {
    pub percentile: f64,
    pub dedup_steps: i64,
    pub dedup_radius: f64,
    pub half_extent: usize,
    /// Hard cap on how many events the intervene stage processes, keeping
    /// runtime bounded on long trajectories. Highest anomalies win.
    pub max_events: usize,
}

impl Default for CatalogBlock {
    fn default() -> Self {
        Self {
            percentile: 0.99,
            dedup_steps: 4,
            dedup_radius: 6.0,
            half_extent: 2,
            max_events: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceBlock {
    pub lead: usize,
    pub rollout_levels: usize,
    /// Explicit guidance scales. Empty means: calibrate a base scale on the
    /// first catalog events and sweep the built-in five-point grid.
    pub lambdas: Vec<f64>,
}

impl Default for GuidanceBlock {
    fn default() -> Self {
        Self {
            lead: 2,
            rollout_levels: 2,
            lambdas: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackBlock {
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for AttackBlock {
    fn default() -> Self {
        Self {
            epsilon: 0.07,
            iterations: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub fss_widths: Vec<usize>,
    /// Worker threads for per-event stages; 0 picks the machine default.
    pub workers: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            fss_widths: vec![1, 3, 5],
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub grid: GridBlock,
    pub dynamics: DynamicsBlock,
    pub training: TrainingBlock,
    pub transfer: TransferBlock,
    pub catalog: CatalogBlock,
    pub guidance: GuidanceBlock,
    pub attack: AttackBlock,
    pub eval: EvalBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            workdir: PathBuf::from("runs/default"),
            grid: GridBlock::default(),
            dynamics: DynamicsBlock::default(),
            training: TrainingBlock::default(),
            transfer: TransferBlock::default(),
            catalog: CatalogBlock::default(),
            guidance: GuidanceBlock::default(),
            attack: AttackBlock::default(),
            eval: EvalBlock::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.grid_spec()?;
        self.dynamics_config()
            .map_err(|e| ConfigError::Invalid(e))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.transfer_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0 < self.catalog.percentile && self.catalog.percentile < 1.0) {
            return invalid("catalog.percentile must lie in (0, 1)");
        }
        if self.catalog.max_events == 0 {
            return invalid("catalog.max_events must be positive");
        }
        if self.guidance.lead < 2 || self.guidance.rollout_levels == 0 {
            return invalid("guidance.lead must be >= 2 and rollout_levels >= 1");
        }
        if self.guidance.lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return invalid("guidance.lambdas must be finite and nonnegative");
        }
        if !(self.attack.epsilon > 0.0 && self.attack.epsilon.is_finite()) {
            return invalid("attack.epsilon must be positive");
        }
        if self.eval.fss_widths.is_empty() {
            return invalid("eval.fss_widths must not be empty");
        }
        for &k in &self.eval.fss_widths {
            if k % 2 == 0 || k > self.grid.height.min(self.grid.width) {
                return invalid(format!(
                    "eval.fss_widths entry {k} must be odd and fit the grid"
                ));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        GridSpec::new(
            self.grid.height,
            self.grid.width,
            self.grid.levels,
            self.grid.periodic_x,
            self.grid.periodic_y,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Full-step dynamics run; physics constants come from library defaults.
    pub fn dynamics_config(&self) -> Result<DynamicsConfig, String> {
        let spec = self.grid_spec().map_err(|e| e.to_string())?;
        let cfg = DynamicsConfig {
            seed: self.seed,
            steps_per_year: self.dynamics.steps_per_year,
            spinup_steps: self.dynamics.spinup_steps,
            ..DynamicsConfig::defaults(spec)
        };
        cfg.validate().map_err(|e| e.to_string())?;
        if self.dynamics.years < 2 {
            return Err("dynamics.years must be at least 2".into());
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.training.hidden,
            iters: self.training.iters,
            batch: self.training.batch,
            lr: self.training.lr,
            ..TrainConfig::default()
        }
    }

    pub fn transfer_config(&self) -> TransferTrainConfig {
        TransferTrainConfig {
            hidden: self.transfer.hidden,
            iters: self.transfer.iters,
            ..TransferTrainConfig::default()
        }
    }

    /// Hash of the resolved configuration. The working directory is left
    /// out so a relocated run keeps its identity; the seed is included.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.workdir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_digest(&hasher.finalize())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
