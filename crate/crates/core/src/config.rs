//! Run configuration files and seed fan-out.
//!
//! A run file is TOML with sections named after the modules they configure:
//!
//! ```toml
//! task = "cluster"
//! algorithm = "strict"
//! seed = 7
//!
//! [dsim]
//! s = 0.4
//!
//! [training]
//! lr = 0.0075
//! ```
//!
//! Every field is optional except `task`; missing values take the task
//! defaults from [`crate::experiments::Settings::defaults`]. The environment
//! variable [`SEED_ENV`] overrides `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CLOSED_DEFER_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<String>,
    pub algorithm: Option<String>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub experts: ExpertsConfig,
    #[serde(default)]
    pub dsim: DSimConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub experiments: ExperimentsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Load samples from this file instead of generating them.
    pub path: Option<PathBuf>,
    pub counts: Option<[usize; 3]>,
    pub samples: Option<usize>,
    pub aae_fraction: Option<f64>,
    pub dim: Option<usize>,
    pub group_separation: Option<f64>,
    pub label_noise: Option<f64>,
    pub train_fraction: Option<f64>,
    pub prior_count: Option<usize>,
    pub standardize: Option<bool>,
}

/// One expert of a panel written out in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomExpert {
    pub id: Option<String>,
    /// Accuracy per group id (keys are group ids written as strings).
    pub accuracy: BTreeMap<String, f64>,
    #[serde(default = "unit_cost")]
    pub cost: f64,
}

fn unit_cost() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertsConfig {
    /// `cluster`, `content-moderation`, `biased` or `custom`.
    pub panel: Option<String>,
    pub m: Option<usize>,
    pub alpha: Option<f64>,
    #[serde(default)]
    pub custom: Vec<CustomExpert>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DSimConfig {
    /// `cluster`, `content-moderation`, `uniform` or `file`.
    pub kind: Option<String>,
    pub path: Option<PathBuf>,
    pub s: Option<f64>,
    pub n_s: Option<usize>,
    pub classifier_entry: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// `full` or `committee`.
    pub aggregation: Option<String>,
    pub k: Option<usize>,
    /// `tree` or `net`.
    pub classifier: Option<String>,
    pub tree_depth: Option<usize>,
    pub classifier_hidden: Option<Vec<usize>>,
    pub deferrer_hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub alpha: Option<f64>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
    /// Constant cost weight.
    pub lambda: Option<f64>,
    /// Cost weight growing linearly with the update count.
    pub lambda_per_update: Option<f64>,
    pub batch_size: Option<usize>,
    pub t_d: Option<f64>,
    pub epochs: Option<usize>,
    pub prior_optimizer: Option<String>,
    pub prior_lr: Option<f64>,
    pub prior_epochs: Option<usize>,
    pub prior_batch_size: Option<usize>,
    pub mwu_eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsConfig {
    pub repetitions: Option<usize>,
    pub eval_repetitions: Option<usize>,
    pub eval_prior_mix: Option<bool>,
    pub trace_every: Option<usize>,
    pub baseline_k: Option<usize>,
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.seed = Some(seed);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// Named random sub-streams derived from one global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Split,
    Experts,
    DeferrerInit,
    ClassifierInit,
    Committee,
    Dsim,
    Training,
    Evaluation,
    Probes,
}

impl Stream {
    fn id(self) -> u64 {
        self as u64 + 1
    }
}

/// Fans a seed out into independent ChaCha streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        SeedStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.id());
        rng
    }

    /// A 64-bit seed for components that take a plain integer.
    pub fn derive(&self, stream: Stream) -> u64 {
        mix(self.seed ^ stream.id().wrapping_mul(0xA076_1D64_78BD_642F))
    }

    /// Seeds for the `r`-th repetition of a run.
    pub fn repetition(&self, r: u64) -> Self {
        SeedStreams { seed: mix(self.seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15))) }
    }

    /// Seeds for the `i`-th point of a parameter grid.
    pub fn grid_point(&self, i: u64) -> Self {
        SeedStreams { seed: mix(self.seed ^ (i + 1).wrapping_mul(0xE703_7ED1_A0B4_28DB)) }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parses_sections() {
        let cfg = RunConfig::parse(
            "task = \"cluster\"\nseed = 3\n[dsim]\ns = 0.2\n[experiments.sweep]\nparameter = \"dsim.s\"\nvalues = [0.0, 0.5]\n",
        )
        .unwrap();
        assert_eq!(cfg.task.as_deref(), Some("cluster"));
        assert_eq!(cfg.dsim.s, Some(0.2));
        assert_eq!(cfg.experiments.sweep.unwrap().values, vec![0.0, 0.5]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("task = \"cluster\"\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[training]\nlearning = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn custom_panel_parses() {
        let cfg = RunConfig::parse(
            "task = \"cluster\"\n[experts]\npanel = \"custom\"\n[[experts.custom]]\naccuracy = { 0 = 0.9, 1 = 0.6 }\ncost = 2.0\n",
        )
        .unwrap();
        assert_eq!(cfg.experts.custom.len(), 1);
        assert_eq!(cfg.experts.custom[0].accuracy["1"], 0.6);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = SeedStreams::new(11);
        let a: u64 = s.rng(Stream::Data).random();
        let b: u64 = s.rng(Stream::Data).random();
        let c: u64 = s.rng(Stream::Experts).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(s.repetition(0), s.repetition(1));
        assert_ne!(s.grid_point(0).seed(), s.seed());
        assert_ne!(s.derive(Stream::Experts), s.derive(Stream::Evaluation));
    }
}
