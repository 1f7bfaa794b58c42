//! Run configuration: a TOML file whose values command-line flags override.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tpf_core::tpf::DEFAULT_HIDDEN;
use tpf_core::{Phase, SelectionStrategy, SynthConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub gen: GenSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub episodes: usize,
    /// Index of the first episode; packs from one seed with disjoint ranges
    /// share class signatures but no queries.
    pub offset: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self { episodes: 64, offset: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub negative_ratio: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Comma-separated phases run in order: `joint`, `tpf`.
    pub phase: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            negative_ratio: t.negative_ratio,
            seed: t.seed,
            hidden: DEFAULT_HIDDEN,
            phase: "tpf".into(),
        }
    }
}

impl TrainSection {
    pub fn phases(&self) -> Result<Vec<Phase>> {
        let phases = self
            .phase
            .split(',')
            .map(|p| match p.trim() {
                "joint" => Ok(Phase::Joint),
                "tpf" | "tpf_only" | "tpf-only" => Ok(Phase::TpfOnly),
                other => bail!("unknown phase {other:?} (expected joint or tpf)"),
            })
            .collect::<Result<Vec<_>>>()?;
        if phases.is_empty() {
            bail!("no training phase given");
        }
        Ok(phases)
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            negative_ratio: self.negative_ratio,
            phase,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    TopN,
    Adaptive,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub strategy: StrategyKind,
    pub n: usize,
    pub threshold: f32,
    pub iou_threshold: f64,
    pub peak_threshold: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::TopN,
            n: 10,
            threshold: tpf_core::selector::DEFAULT_ADAPTIVE_THRESHOLD,
            iou_threshold: tpf_core::metrics::DEFAULT_IOU_THRESHOLD,
            peak_threshold: tpf_core::selector::DEFAULT_PEAK_THRESHOLD,
        }
    }
}

impl EvalSection {
    pub fn strategy(&self) -> Result<SelectionStrategy> {
        let s = match self.strategy {
            StrategyKind::TopN => SelectionStrategy::TopN(self.n),
            StrategyKind::Adaptive => SelectionStrategy::Adaptive(self.threshold),
            StrategyKind::All => SelectionStrategy::All,
        };
        s.validate()?;
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            bail!("iou_threshold {} outside (0, 1)", self.iou_threshold);
        }
        if !(self.peak_threshold > 0.0 && self.peak_threshold <= 1.0) {
            bail!("peak_threshold {} outside (0, 1]", self.peak_threshold);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Timed passes over the pack.
    pub repeat: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { repeat: 3 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// First 16 hex digits of SHA-256 over the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
