use std::path::{Path, PathBuf};

use clusterlab::diffusion::{ScheduleKind, TrainConfig};
use clusterlab::infer::GuidanceConfig;
use clusterlab::tune::{BaseSetConfig, TuneConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub t_max: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::LinearBeta, t_max: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub seeds: usize,
    /// Contexts to evaluate; all world contexts when absent.
    pub contexts: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_samples: 200, seeds: 3, contexts: None }
    }
}

/// Everything a command may need. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// World file; `<out>/world.json` when absent.
    pub world: Option<PathBuf>,
    pub embed_dim: usize,
    pub schedule: ScheduleConfig,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub base: BaseSetConfig,
    pub tune: TuneConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    /// Subject whose identity is kept consistent.
    pub subject: String,
    /// Context of the prompt used to generate the base set.
    pub context: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: None,
            embed_dim: clusterlab::semantics::DEFAULT_EMBED_DIM,
            schedule: ScheduleConfig::default(),
            hidden: vec![128, 128, 128],
            train: TrainConfig::default(),
            base: BaseSetConfig::default(),
            tune: TuneConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
            subject: "subject_a".to_string(),
            context: "plain".to_string(),
        }
    }
}

impl RunConfig {
    pub fn world_path(&self, out: &Path) -> PathBuf {
        self.world.clone().unwrap_or_else(|| out.join("world.json"))
    }
}
