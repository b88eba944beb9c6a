use std::fs;
use std::path::{Path, PathBuf};

use etnet::data::{SynthConfig, DEFAULT_WINDOW_SAMPLES};
use etnet::tasks::DEFAULT_THRESHOLD_QUANTILE;
use etnet::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Anomaly,
    Cluster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    Nmi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Row width of long-format CSV input.
    pub samples_per_window: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: None, test: None, samples_per_window: DEFAULT_WINDOW_SAMPLES }
    }
}

/// One experiment: data source, training settings, task and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub task: Task,
    pub metrics: Vec<Metric>,
    pub threshold_quantile: f64,
    pub attribution_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            task: Task::Anomaly,
            metrics: vec![Metric::Auc],
            threshold_quantile: DEFAULT_THRESHOLD_QUANTILE,
            attribution_points: 10,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.data.samples_per_window == 0 {
            return Err(CliError::Usage("data.samples_per_window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold_quantile) {
            return Err(CliError::Usage("threshold_quantile must lie in [0, 1]".into()));
        }
        if self.attribution_points < 2 {
            return Err(CliError::Usage("attribution_points must be at least 2".into()));
        }
        Ok(())
    }

    /// `--seed` beats the config file, which beats `ETNET_SEED`; 0 otherwise.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<u64, CliError> {
        let env_seed = match env {
            Some(s) => Some(s.trim().parse::<u64>().map_err(|_| CliError::Usage(format!("ETNET_SEED={s} is not an integer")))?),
            None => None,
        };
        let seed = flag.or(self.seed).or(env_seed).unwrap_or(0);
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.train.seed = seed;
        Ok(seed)
    }
}
