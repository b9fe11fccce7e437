//! Experiment manifests in TOML.
//!
//! A minimal file needs only a dataset scheme and one strategy:
//!
//! ```toml
//! [dataset]
//! scheme = "synthetic"
//!
//! [[cells]]
//! strategy = "fedproto"
//! ```
//!
//! Everything else falls back to the defaults below (T=200, F=20, K'=10,
//! lr=0.01, batch 10). Relative paths resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agg::{FedProtoVariant, StrategyConfig, StrategyKind};
use crate::data::{PartitionScheme, PartitionSpec};
use crate::engine::{LrSchedule, Sampling, SimConfig};
use crate::error::{Error, Result};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FEDPROTO_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/dataset-cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub centralized: CentralizedSettings,
    pub cells: Vec<CellGroup>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticDataset),
    LabelShard(ShardDataset),
    Dirichlet(DirichletDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    #[serde(default = "one")]
    pub phi1: f64,
    #[serde(default = "one")]
    pub phi2: f64,
    #[serde(default = "default_synthetic_clients")]
    pub num_clients: usize,
    #[serde(default = "default_synthetic_total")]
    pub total_samples: usize,
    #[serde(default = "default_synthetic_gamma")]
    pub power_law_gamma: f64,
    #[serde(default = "two")]
    pub min_per_client: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
}

/// IDX image/label pair split into label shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardDataset {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "two")]
    pub shards_per_client: usize,
    #[serde(default = "default_shard_clients")]
    pub num_clients: usize,
    /// Defaults to every sample in the pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_samples: Option<usize>,
    #[serde(default = "default_shard_gamma")]
    pub power_law_gamma: f64,
    #[serde(default = "two")]
    pub min_per_client: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletDataset {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub alpha: f64,
    #[serde(default = "default_shard_clients")]
    pub num_clients: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_samples: Option<usize>,
    #[serde(default = "default_shard_gamma")]
    pub power_law_gamma: f64,
    #[serde(default = "two")]
    pub min_per_client: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn two() -> usize {
    2
}
fn one_u64() -> u64 {
    1
}
fn default_synthetic_clients() -> usize {
    30
}
fn default_synthetic_total() -> usize {
    9600
}
fn default_synthetic_gamma() -> f64 {
    1.9
}
fn default_shard_clients() -> usize {
    1000
}
fn default_shard_gamma() -> f64 {
    0.8
}

impl DatasetConfig {
    /// Image and label files, if the scheme reads any.
    pub fn sources(&self) -> Option<(&Path, &Path)> {
        match self {
            DatasetConfig::Synthetic(_) => None,
            DatasetConfig::LabelShard(d) => Some((&d.images, &d.labels)),
            DatasetConfig::Dirichlet(d) => Some((&d.images, &d.labels)),
        }
    }

    /// Partition parameters; `pool_size` fills in a missing sample total.
    pub fn partition_spec(&self, pool_size: Option<usize>) -> Result<PartitionSpec> {
        let need_total = |t: Option<usize>| {
            t.or(pool_size)
                .ok_or_else(|| Error::Usage("total_samples unknown without a sample pool".into()))
        };
        Ok(match self {
            DatasetConfig::Synthetic(d) => PartitionSpec {
                scheme: PartitionScheme::Synthetic {
                    phi1: d.phi1,
                    phi2: d.phi2,
                },
                num_clients: d.num_clients,
                total_samples: d.total_samples,
                power_law_gamma: d.power_law_gamma,
                min_per_client: d.min_per_client,
                seed: d.seed,
            },
            DatasetConfig::LabelShard(d) => PartitionSpec {
                scheme: PartitionScheme::LabelShard {
                    shards_per_client: d.shards_per_client,
                },
                num_clients: d.num_clients,
                total_samples: need_total(d.total_samples)?,
                power_law_gamma: d.power_law_gamma,
                min_per_client: d.min_per_client,
                seed: d.seed,
            },
            DatasetConfig::Dirichlet(d) => PartitionSpec {
                scheme: PartitionScheme::Dirichlet { alpha: d.alpha },
                num_clients: d.num_clients,
                total_samples: need_total(d.total_samples)?,
                power_law_gamma: d.power_law_gamma,
                min_per_client: d.min_per_client,
                seed: d.seed,
            },
        })
    }

    /// Proximal coefficient used when a FedProx cell does not set one.
    pub fn default_prox_mu(&self) -> f64 {
        match self {
            DatasetConfig::Synthetic(_) => 0.1,
            _ => 1.0,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetConfig::Synthetic(_) => {}
            DatasetConfig::LabelShard(d) => {
                fix(&mut d.images);
                fix(&mut d.labels);
            }
            DatasetConfig::Dirichlet(d) => {
                fix(&mut d.images);
                fix(&mut d.labels);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 256]
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            hidden_dims: default_hidden(),
        }
    }
}

/// Round-loop settings shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub rounds: usize,
    pub local_epochs: usize,
    pub clients_per_round: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub eval_every: usize,
    pub mmd_every: usize,
    pub moving_avg_window_frac: f64,
    pub sampling: Sampling,
}

impl Default for SimSettings {
    fn default() -> Self {
        let d = SimConfig::new(StrategyConfig::fedavg());
        SimSettings {
            rounds: d.rounds,
            local_epochs: d.local_epochs,
            clients_per_round: d.clients_per_round,
            lr: d.lr,
            lr_schedule: d.lr_schedule,
            batch_size: d.batch_size,
            eval_every: d.eval_every,
            mmd_every: d.mmd_every,
            moving_avg_window_frac: d.moving_avg_window_frac,
            sampling: d.sampling,
        }
    }
}

impl SimSettings {
    pub fn to_sim_config(&self, strategy: StrategyConfig, delta: f64, seed: u64) -> SimConfig {
        SimConfig {
            strategy,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            clients_per_round: self.clients_per_round,
            lr: self.lr,
            lr_schedule: self.lr_schedule,
            batch_size: self.batch_size,
            delta,
            seed,
            eval_every: self.eval_every,
            mmd_every: self.mmd_every,
            moving_avg_window_frac: self.moving_avg_window_frac,
            sampling: self.sampling,
        }
    }
}

/// Reference model trained on the pooled data, for the MMD metric and the
/// centralized accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentralizedSettings {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CentralizedSettings {
    fn default() -> Self {
        CentralizedSettings {
            enabled: true,
            epochs: 20,
            lr: 0.01,
            batch_size: 10,
        }
    }
}

/// One strategy evaluated at several straggler fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGroup {
    pub strategy: StrategyKind,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerate_stragglers: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<FedProtoVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prox_mu: Option<f64>,
}

fn default_deltas() -> Vec<f64> {
    vec![0.0]
}

/// A single simulation of the grid, before seeds are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub strategy: StrategyConfig,
    pub delta: f64,
}

impl Cell {
    /// `label@delta`, e.g. `fedproto@0.5`.
    pub fn id(&self) -> String {
        format!("{}@{}", self.strategy.label(), self.delta)
    }

    /// Comma-separated terms; a term matches the strategy label, the full
    /// id, or `@delta`.
    pub fn matches(&self, filter: &str) -> bool {
        let id = self.id();
        let label = self.strategy.label();
        let at_delta = format!("@{}", self.delta);
        filter
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .any(|t| t == id || t == label || t == at_delta)
    }
}

impl ExperimentManifest {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for g in &self.cells {
            let mut strategy = StrategyConfig::new(g.strategy);
            if let Some(t) = g.tolerate_stragglers {
                strategy.tolerate_stragglers = t;
            }
            if let Some(v) = g.variant {
                strategy.fedproto_variant = v;
            }
            if g.strategy == StrategyKind::Fedprox {
                strategy.prox_mu = g.prox_mu.unwrap_or_else(|| self.dataset.default_prox_mu());
            } else if let Some(mu) = g.prox_mu {
                strategy.prox_mu = mu;
            }
            for &delta in &g.deltas {
                out.push(Cell { strategy, delta });
            }
        }
        out
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("dataset-cache"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Usage("manifest lists no cells".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Usage("manifest lists no seeds".into()));
        }
        for c in self.cells() {
            c.strategy.validate()?;
            if !(0.0..=1.0).contains(&c.delta) {
                return Err(Error::Usage(format!("delta {} outside [0, 1]", c.delta)));
            }
        }
        if self.cells.iter().any(|g| g.deltas.is_empty()) {
            return Err(Error::Usage("a cell group lists no deltas".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Usage(format!("cannot serialize manifest: {e}")))
    }

    /// Parses manifest text; `path` is only used in error messages.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let manifest: ExperimentManifest = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })?;
        manifest.validate().map_err(|e| Error::Config {
            path: path.to_path_buf(),
            line: None,
            msg: e.to_string(),
        })?;
        Ok(manifest)
    }
}

/// Reads and validates a manifest file, resolving relative paths against
/// its directory.
pub fn parse_config(path: &Path) -> Result<ExperimentManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = ExperimentManifest::from_toml(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.dataset.resolve_paths(base);
    if manifest.output_dir.is_relative() {
        manifest.output_dir = base.join(&manifest.output_dir);
    }
    if let Some(c) = &mut manifest.cache_dir {
        if c.is_relative() {
            *c = base.join(&*c);
        }
    }
    Ok(manifest)
}
