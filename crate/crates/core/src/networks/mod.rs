//! Concrete models: the glyph-transformation generator (encoder, predictor,
//! sampler, reconstructors), patch discriminators, and the texture-transfer
//! generators.

mod gtg;
pub mod layers;
mod ttg;

pub use gtg::{GtgGenerator, GtgOutputs};
pub use layers::{BatchNorm, Module};
pub use ttg::{Discriminator, Generator};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Parameterized, Scalar, Tensor};
use crate::geometry::{WarpMode, DEFAULT_TPS_REGULARIZATION};

/// How a forward pass treats parameters and batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Parameters enter the graph as trainable leaves.
    pub trainable: bool,
    /// Batch norm uses batch statistics (and records them).
    pub batch_stats: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        trainable: true,
        batch_stats: true,
    };
    /// Training-time behaviour with parameters held constant.
    pub const FROZEN: Mode = Mode {
        trainable: false,
        batch_stats: true,
    };
    pub const EVAL: Mode = Mode {
        trainable: false,
        batch_stats: false,
    };
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
}

/// Architecture hyperparameters shared by all networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub grid_n: usize,
    /// Uniform channel multiplier applied to every convolutional width.
    pub channel_mult: f64,
    /// Width of the fully connected stacks.
    pub hidden: usize,
    /// Base width of the texture generators before the multiplier.
    pub ttg_gen_width: usize,
    /// Base width of all discriminators before the multiplier.
    pub disc_width: usize,
    pub warp_mode: WarpMode,
    pub tps_regularization: f64,
    /// Init gain of the predictor's output layer (small → near-identity warps).
    pub predictor_out_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid_n: 4,
            channel_mult: 1.0,
            hidden: 1024,
            ttg_gen_width: 32,
            disc_width: 64,
            warp_mode: WarpMode::Combined,
            tps_regularization: DEFAULT_TPS_REGULARIZATION,
            predictor_out_gain: 0.1,
        }
    }
}

impl NetConfig {
    /// Quarter-width everything, including the fully connected stacks; the
    /// texture networks also start from halved base widths.
    pub fn desk() -> Self {
        Self {
            channel_mult: 0.25,
            hidden: 256,
            ttg_gen_width: 16,
            disc_width: 32,
            ..Self::default()
        }
    }

    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.channel_mult).round() as usize).max(1)
    }

    /// Encoder widths; the last one sets the feature map depth.
    pub fn encoder_widths(&self) -> [usize; 4] {
        [self.width(64), self.width(128), self.width(64), self.width(16)]
    }

    /// Length of `E(x)` (and of the noise vector).
    pub fn feature_dim(&self) -> usize {
        let s = self.image_size / 8;
        self.encoder_widths()[3] * s * s
    }

    pub fn theta_len(&self) -> usize {
        2 * self.grid_n * self.grid_n + 4
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(NetError::Config(format!(
                "image size {} must be a positive multiple of 8 (three 2x poolings)",
                self.image_size
            )));
        }
        if self.grid_n < 2 {
            return Err(NetError::Config(format!("control grid N = {} < 2", self.grid_n)));
        }
        if !(self.channel_mult > 0.0 && self.channel_mult.is_finite()) {
            return Err(NetError::Config(format!("channel multiplier {}", self.channel_mult)));
        }
        if self.hidden == 0 || self.ttg_gen_width == 0 || self.disc_width == 0 {
            return Err(NetError::Config("layer widths must be positive".into()));
        }
        if self.tps_regularization.is_nan() || self.tps_regularization < 0.0 {
            return Err(NetError::Config(format!("TPS regularization {}", self.tps_regularization)));
        }
        Ok(())
    }
}

/// Glyph-transformation GAN: generator side plus glyph discriminator `D_g`.
#[derive(Debug, Clone)]
pub struct GtgNets<T: Scalar> {
    pub gen: GtgGenerator<T>,
    pub disc: Discriminator<T>,
}

/// Both texture generators, updated together.
#[derive(Debug, Clone)]
pub struct TtgGenerators<T: Scalar> {
    pub xy: Generator<T>,
    pub yx: Generator<T>,
}

/// Both texture discriminators, updated together.
#[derive(Debug, Clone)]
pub struct TtgDiscriminators<T: Scalar> {
    pub x: Discriminator<T>,
    pub y: Discriminator<T>,
}

#[derive(Debug, Clone)]
pub struct TtgNets<T: Scalar> {
    pub gens: TtgGenerators<T>,
    pub discs: TtgDiscriminators<T>,
}

/// Deterministic initialization of all eight networks from `seed`.
pub fn build_default_nets<T: Scalar>(config: &NetConfig, seed: u64) -> Result<(GtgNets<T>, TtgNets<T>), NetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = GtgGenerator::new(config, &mut rng)?;
    let dw = config.width(config.disc_width);
    let gw = config.width(config.ttg_gen_width);
    let disc = Discriminator::new("dg", dw, &mut rng);
    let xy = Generator::new("gxy", gw, &mut rng);
    let yx = Generator::new("gyx", gw, &mut rng);
    let dx = Discriminator::new("dx", dw, &mut rng);
    let dy = Discriminator::new("dy", dw, &mut rng);
    Ok((
        GtgNets { gen, disc },
        TtgNets {
            gens: TtgGenerators { xy, yx },
            discs: TtgDiscriminators { x: dx, y: dy },
        },
    ))
}

/// Folds recorded batch statistics into the norms of `module`. A layer used
/// several times in one graph absorbs only its first pass.
pub fn absorb_bn_stats<T: Scalar>(module: &mut dyn Module<T>, stats: &[BnStats<T>]) {
    for bn in module.norms_mut() {
        let name = bn.name.clone();
        if let Some(s) = stats.iter().find(|s| s.name == name) {
            bn.absorb(&s.mean, &s.var);
        }
    }
}

macro_rules! forward_parameterized {
    ($ty:ident, $($field:ident).+ ; $($rest:ident).+) => {
        impl<T: Scalar> Parameterized<T> for $ty<T> {
            fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
                self.$($field).+.visit_params(f);
                self.$($rest).+.visit_params(f);
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
                self.$($field).+.visit_params_mut(f);
                self.$($rest).+.visit_params_mut(f);
            }
        }
        impl<T: Scalar> Module<T> for $ty<T> {
            fn norms(&self) -> Vec<&BatchNorm<T>> {
                let mut v = self.$($field).+.norms();
                v.extend(self.$($rest).+.norms());
                v
            }
            fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
                let mut v = self.$($field).+.norms_mut();
                v.extend(self.$($rest).+.norms_mut());
                v
            }
        }
    };
}

forward_parameterized!(GtgNets, gen; disc);
forward_parameterized!(TtgGenerators, xy; yx);
forward_parameterized!(TtgDiscriminators, x; y);
forward_parameterized!(TtgNets, gens; discs);

impl<T: Scalar> GtgNets<T> {
    pub fn cast<U: Scalar>(&self) -> GtgNets<U> {
        GtgNets {
            gen: self.gen.cast(),
            disc: self.disc.cast(),
        }
    }
}

impl<T: Scalar> TtgNets<T> {
    pub fn cast<U: Scalar>(&self) -> TtgNets<U> {
        TtgNets {
            gens: TtgGenerators {
                xy: self.gens.xy.cast(),
                yx: self.gens.yx.cast(),
            },
            discs: TtgDiscriminators {
                x: self.discs.x.cast(),
                y: self.discs.y.cast(),
            },
        }
    }
}

/// Every batch-norm running buffer of `module`, keyed by name.
pub fn collect_buffers<T: Scalar>(module: &dyn Module<T>) -> Vec<(String, Vec<T>)> {
    let mut out = Vec::new();
    for bn in module.norms() {
        out.push((format!("{}.running_mean", bn.name), bn.running_mean.clone()));
        out.push((format!("{}.running_var", bn.name), bn.running_var.clone()));
    }
    out
}
