//! Associate adversarial training: one step updates the glyph generator,
//! the glyph discriminator, both texture generators and both texture
//! discriminators, in that order.

mod checkpoint;
mod run;
mod step;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use run::{foreground_cycle_error, generate, generation_diversity, train, train_until, TrainOptions, LOG_FILE};
pub use step::{sample_batch, train_iteration, train_step, train_step_traced, StepTrace};

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AdamState, AutodiffError, LrSchedule};
use crate::networks::{build_default_nets, GtgNets, NetConfig, NetError, TtgNets};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: AutodiffError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the stroke-aware cycle term.
    pub lambda: f64,
    /// Foreground emphasis `C` of the stroke weights.
    pub c: f64,
    /// SNR band `M`.
    pub m: f64,
    pub batch_size: usize,
    pub lr_gtg: f64,
    pub lr_ttg: f64,
    pub constant_iters: u64,
    pub decay_iters: u64,
    pub seed: u64,
    pub desk_scale: bool,
    /// Checkpoint period in iterations (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    /// Include the diversity term in the glyph generator loss.
    pub diversity: bool,
    /// Use stroke weights in the cycle loss; `false` means `W ≡ 1`.
    pub stroke_weighting: bool,
    /// Fixed stroke-mask threshold; Otsu when absent.
    pub mask_threshold: Option<f64>,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            c: 2.0,
            m: 6.0,
            batch_size: 64,
            lr_gtg: 1e-4,
            lr_ttg: 1e-3,
            constant_iters: 15_000,
            decay_iters: 15_000,
            seed: 0,
            desk_scale: false,
            checkpoint_every: 1000,
            diversity: true,
            stroke_weighting: true,
            mask_threshold: None,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Laptop-sized preset: batch 8, 1000 + 1000 iterations, quarter widths.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            constant_iters: 1000,
            decay_iters: 1000,
            desk_scale: true,
            net: NetConfig::desk(),
            ..Self::default()
        }
    }

    pub fn total_iters(&self) -> u64 {
        self.constant_iters + self.decay_iters
    }

    pub fn gtg_schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr_gtg, self.constant_iters, self.decay_iters)
    }

    pub fn ttg_schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr_ttg, self.constant_iters, self.decay_iters)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.net.validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch size {} (batch norm needs at least 2)",
                self.batch_size
            )));
        }
        if self.m.is_nan() || self.m <= 1.0 {
            return Err(TrainError::Config(format!("M = {} must exceed 1", self.m)));
        }
        if self.c.is_nan() || self.c < 1.0 {
            return Err(TrainError::Config(format!("C = {} must be at least 1", self.c)));
        }
        for (name, v) in [("lambda", self.lambda), ("lr_gtg", self.lr_gtg), ("lr_ttg", self.lr_ttg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} = {v}")));
            }
        }
        if let Some(t) = self.mask_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(TrainError::Config(format!("mask threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Optimizer state for the four parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerGroups {
    /// Encoder, predictor and both reconstructors.
    pub gtg_gen: AdamState<f32>,
    pub gtg_disc: AdamState<f32>,
    pub ttg_gen: AdamState<f32>,
    pub ttg_disc: AdamState<f32>,
}

impl OptimizerGroups {
    pub fn new() -> Self {
        let a = AdamState::new(AdamConfig::default());
        Self {
            gtg_gen: a.clone(),
            gtg_disc: a.clone(),
            ttg_gen: a.clone(),
            ttg_disc: a,
        }
    }

    pub(crate) fn named(&self) -> [(&'static str, &AdamState<f32>); 4] {
        [
            ("gtg_gen", &self.gtg_gen),
            ("gtg_disc", &self.gtg_disc),
            ("ttg_gen", &self.ttg_gen),
            ("ttg_disc", &self.ttg_disc),
        ]
    }

    pub(crate) fn named_mut(&mut self) -> [(&'static str, &mut AdamState<f32>); 4] {
        [
            ("gtg_gen", &mut self.gtg_gen),
            ("gtg_disc", &mut self.gtg_disc),
            ("ttg_gen", &mut self.ttg_gen),
            ("ttg_disc", &mut self.ttg_disc),
        ]
    }
}

impl Default for OptimizerGroups {
    fn default() -> Self {
        Self::new()
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub gtg: GtgNets<f32>,
    pub ttg: TtgNets<f32>,
    pub optim: OptimizerGroups,
    /// Completed iterations.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks and optimizers. Network init and the training stream
    /// use separate generators derived from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let (gtg, ttg) = build_default_nets(&config.net, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            gtg,
            ttg,
            optim: OptimizerGroups::new(),
            iteration: 0,
            rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda, c.c, c.m), (10.0, 2.0, 6.0));
        assert_eq!(c.batch_size, 64);
        assert_eq!((c.lr_gtg, c.lr_ttg), (1e-4, 1e-3));
        assert_eq!((c.constant_iters, c.decay_iters), (15_000, 15_000));
        assert_eq!(c.net.image_size, 64);
        assert_eq!(c.net.grid_n, 4);
        assert_eq!(c.checkpoint_every, 1000);
    }

    #[test]
    fn desk_preset_shrinks() {
        let d = TrainConfig::desk();
        assert_eq!(d.batch_size, 8);
        assert_eq!(d.total_iters(), 2000);
        assert_eq!(d.net.channel_mult, 0.25);
        assert!(d.desk_scale);
    }

    #[test]
    fn config_json_round_trip_and_partial_overlay() {
        let c = TrainConfig::desk();
        let s = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = serde_json::from_str(r#"{"lambda": 3.0}"#).unwrap();
        assert_eq!(partial.lambda, 3.0);
        assert_eq!(partial.batch_size, 64);
    }

    #[test]
    fn rejects_bad_band() {
        let c = TrainConfig {
            m: 1.0,
            ..TrainConfig::desk()
        };
        assert!(c.validate().is_err());
    }
}
