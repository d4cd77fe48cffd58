//! Run configuration: one JSON document that fixes every knob of a pipeline
//! run, so that a recorded config plus a seed reproduces every artifact.
//!
//! Each section mirrors one stage. Per-stage seeds are not configurable:
//! every random choice derives from the single global `seed`, so two runs
//! with the same config and seed are bitwise identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use popattn::lda::LdaConfig;
use popattn::model::{ModelConfig, Variant};
use popattn::rng;
use popattn::train::TrainConfig;

use crate::CliError;

/// Everything a pipeline run needs besides the subcommand: input locations,
/// model dimensions, optimization schedule, topic-model priors, and analysis
/// parameters. Unknown keys are rejected so config typos fail loudly.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random choice in the pipeline.
    pub seed: u64,
    /// Minimum corpus frequency for a token to get its own vocabulary id.
    pub min_freq: usize,
    pub paths: PathsConfig,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub lda: LdaSettings,
    pub analysis: AnalysisSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            min_freq: 1,
            paths: PathsConfig::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            lda: LdaSettings::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

/// Input and output locations. `posts`, `features`, and `spatial` default to
/// the files `prepare --synthetic` writes under the output directory, so the
/// bundled toy pipeline needs no config file at all.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Posts corpus (JSON Lines). Default: `<out>/posts.jsonl`.
    pub posts: Option<PathBuf>,
    /// Image feature matrix. Default: `<out>/features.bin`.
    pub features: Option<PathBuf>,
    /// Optional 7×7 spatial feature matrix. Default: `<out>/spatial.bin`
    /// when that file exists.
    pub spatial: Option<PathBuf>,
    /// Directory all artifacts are written into.
    pub out: Option<PathBuf>,
}

/// Model dimensions, defaulted for the desk-scale synthetic corpus. The
/// vocabulary size, topic width, and variant flags are not configured here:
/// they come from the vocabulary artifact, the topic model, and the
/// `--variant` flag.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// Image feature width; must match the features file.
    pub d1: usize,
    /// Word embedding and LSTM hidden width.
    pub d2: usize,
    /// Attention hidden width.
    pub k: usize,
    /// Environment embedding width.
    pub d_env: usize,
    /// Fusion hidden width.
    pub d_fuse: usize,
    /// Caption length cap in tokens.
    pub t_max: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            d1: 16,
            d2: 8,
            k: 4,
            d_env: 6,
            d_fuse: 8,
            t_max: 10,
        }
    }
}

impl ModelSettings {
    /// Assemble the full model configuration for one variant.
    pub fn model_config(&self, vocab_size: usize, topics: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            d1: self.d1,
            d2: self.d2,
            k: self.k,
            topics,
            d_env: self.d_env,
            d_fuse: self.d_fuse,
            t_max: self.t_max,
            vocab_size,
            use_explicit_attention: true,
            use_environment: true,
            use_implicit_attention: true,
            baseline: popattn::model::Baseline::None,
        }
        .with_variant(variant)
    }
}

/// Optimization schedule, minus the seed (derived from the global seed).
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    /// Last epoch that still runs at `lr_initial`.
    pub lr_switch_epoch: usize,
    /// Epochs without a new best validation accuracy before stopping.
    pub patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSettings {
            batch_size: base.batch_size,
            epochs: base.epochs,
            lr_initial: base.lr_initial,
            lr_after: base.lr_after,
            lr_switch_epoch: base.lr_switch_epoch,
            patience: base.patience,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_initial: self.lr_initial,
            lr_after: self.lr_after,
            lr_switch_epoch: self.lr_switch_epoch,
            patience: self.patience,
            seed,
        }
    }
}

/// Topic-model size and priors, minus the seed (derived from the global
/// seed). `sweeps`/`burn_in` govern both fitting and per-caption inference.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSettings {
    pub topics: usize,
    /// Document-topic prior; default 50/topics.
    pub alpha: Option<f64>,
    /// Topic-word prior.
    pub beta: f64,
    pub sweeps: usize,
    pub burn_in: usize,
}

impl Default for LdaSettings {
    fn default() -> Self {
        LdaSettings {
            topics: 3,
            alpha: None,
            beta: 0.01,
            sweeps: 200,
            burn_in: 20,
        }
    }
}

impl LdaSettings {
    /// Resolve into the sampler configuration, applying an optional topic
    /// count override. The alpha default tracks the effective topic count.
    pub fn lda_config(&self, topics_override: Option<usize>, seed: u64) -> LdaConfig {
        let topics = topics_override.unwrap_or(self.topics);
        LdaConfig {
            topics,
            alpha: self.alpha.unwrap_or(50.0 / topics as f64),
            beta: self.beta,
            sweeps: self.sweeps,
            burn_in: self.burn_in,
            seed,
        }
    }
}

/// Clustering and text-statistics parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Number of clusters per pick-out round.
    pub k: usize,
    /// Classes with |R − 0.5| above this are picked out.
    pub threshold: f64,
    /// Optional site-specific stoplist file, one token per line.
    pub stoplist: Option<PathBuf>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            k: popattn::analysis::DEFAULT_K,
            threshold: popattn::analysis::DEFAULT_THRESHOLD,
            stoplist: None,
        }
    }
}

impl RunConfig {
    /// Read a config file (or take the defaults), then fold in the global
    /// flag overrides and sanity-check every scalar.
    pub fn load(
        config_path: Option<&Path>,
        seed_flag: Option<u64>,
        out_flag: Option<PathBuf>,
    ) -> Result<RunConfig, CliError> {
        let mut cfg = match config_path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Validation(format!("config file {}: {e}", path.display()))
                })?;
                serde_json::from_str::<RunConfig>(&text).map_err(|e| {
                    CliError::Validation(format!("config file {}: {e}", path.display()))
                })?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = seed_flag {
            cfg.seed = seed;
        }
        if let Some(out) = out_flag {
            cfg.paths.out = Some(out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reject impossible scalars before any stage starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        if self.min_freq == 0 {
            return bad("min_freq must be at least 1".into());
        }
        for (name, v) in [
            ("model.d1", self.model.d1),
            ("model.d2", self.model.d2),
            ("model.k", self.model.k),
            ("model.d_env", self.model.d_env),
            ("model.d_fuse", self.model.d_fuse),
            ("model.t_max", self.model.t_max),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return bad("train.batch_size and train.epochs must be positive".into());
        }
        if self.train.lr_initial <= 0.0 || self.train.lr_after <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.lda.topics < 2 {
            return bad("lda.topics must be at least 2".into());
        }
        if self.lda.alpha.is_some_and(|a| a <= 0.0) || self.lda.beta <= 0.0 {
            return bad("lda.alpha and lda.beta must be positive".into());
        }
        if self.lda.sweeps == 0 {
            return bad("lda.sweeps must be positive".into());
        }
        if self.analysis.k == 0 {
            return bad("analysis.k must be at least 1".into());
        }
        if !(self.analysis.threshold > 0.0 && self.analysis.threshold < 0.5) {
            return bad(format!(
                "analysis.threshold = {} is outside (0, 0.5)",
                self.analysis.threshold
            ));
        }
        Ok(())
    }

    /// Directory every artifact is written into.
    pub fn out(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn posts_path(&self) -> PathBuf {
        self.paths
            .posts
            .clone()
            .unwrap_or_else(|| self.out().join(crate::commands::POSTS))
    }

    pub fn features_path(&self) -> PathBuf {
        self.paths
            .features
            .clone()
            .unwrap_or_else(|| self.out().join(crate::commands::FEATURES))
    }

    /// A configured spatial path is used as-is; otherwise the synthetic
    /// corpus location under the output directory is picked up when present.
    pub fn spatial_path(&self) -> Option<PathBuf> {
        match &self.paths.spatial {
            Some(path) => Some(path.clone()),
            None => {
                let fallback = self.out().join(crate::commands::SPATIAL);
                fallback.is_file().then_some(fallback)
            }
        }
    }

    /// Stage-specific seed derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.seed, stage)
    }
}
