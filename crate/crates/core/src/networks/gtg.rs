use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Parameterized, Scalar, Tensor, Var};
use crate::geometry::{Border, TpsBasis, LOG_SCALE_RANGE, OFFSET_RANGE, ROTATION_RANGE, SHIFT_RANGE};

use super::layers::{BatchNorm, Conv2d, ConvTranspose2d, Dense, Layer, Module, Sequential};
use super::{Mode, NetConfig, NetError};

/// Encoder, predictor, sampler and the two reconstructors.
#[derive(Debug, Clone)]
pub struct GtgGenerator<T: Scalar> {
    pub config: NetConfig,
    pub encoder: Sequential<T>,
    pub predictor: Sequential<T>,
    pub predictor_out: Sequential<T>,
    pub recon_x_fc: Sequential<T>,
    pub recon_x_up: Sequential<T>,
    pub recon_z: Sequential<T>,
    basis: Arc<TpsBasis<T>>,
}

/// Nodes produced by one generator pass.
#[derive(Debug, Clone, Copy)]
pub struct GtgOutputs {
    pub feature: Var,
    pub theta: Var,
    pub x_t: Var,
    pub x_rec: Var,
    pub z_rec: Var,
}

fn dense_block<T: Scalar, R: Rng>(seq: &mut Sequential<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) {
    seq.push(Layer::Dense(Dense::new(&format!("{name}.fc"), d_in, d_out, rng)));
    seq.push(Layer::Norm(BatchNorm::new(&format!("{name}.bn"), d_out)));
    seq.push(Layer::Relu);
}

impl<T: Scalar> GtgGenerator<T> {
    pub fn new<R: Rng>(config: &NetConfig, rng: &mut R) -> Result<Self, NetError> {
        config.validate()?;
        let [c1, c2, c3, c4] = config.encoder_widths();
        let f = config.feature_dim();
        let p = config.theta_len();
        let h = config.hidden;

        let mut encoder = Sequential::new();
        let mut c_prev = 1;
        for (i, c) in [c1, c2, c3, c4].into_iter().enumerate() {
            encoder.push(Layer::Conv(Conv2d::new(&format!("gtg.enc.conv{}", i + 1), c_prev, c, 3, 1, 1, rng)));
            encoder.push(Layer::Norm(BatchNorm::new(&format!("gtg.enc.bn{}", i + 1), c)));
            encoder.push(Layer::Relu);
            if i < 3 {
                encoder.push(Layer::MaxPool);
            }
            c_prev = c;
        }

        let mut predictor = Sequential::new();
        dense_block(&mut predictor, "gtg.pred.l1", f, h, rng);
        dense_block(&mut predictor, "gtg.pred.l2", h, h, rng);
        dense_block(&mut predictor, "gtg.pred.l3", h, h, rng);
        let mut predictor_out = Sequential::new();
        predictor_out.push(Layer::Dense(Dense::with_gain("gtg.pred.out", h, p, config.predictor_out_gain, rng)));

        let mut recon_x_fc = Sequential::new();
        dense_block(&mut recon_x_fc, "gtg.rx.l1", p, p, rng);
        dense_block(&mut recon_x_fc, "gtg.rx.l2", p, h, rng);
        dense_block(&mut recon_x_fc, "gtg.rx.l3", h, h, rng);
        dense_block(&mut recon_x_fc, "gtg.rx.l4", h, f, rng);

        let mut recon_x_up = Sequential::new();
        let ups = [config.width(64), config.width(128), config.width(64)];
        let mut c_prev = c4;
        for (i, c) in ups.into_iter().enumerate() {
            recon_x_up.push(Layer::ConvT(ConvTranspose2d::new(&format!("gtg.rx.up{}", i + 1), c_prev, c, 2, 2, 0, rng)));
            recon_x_up.push(Layer::Norm(BatchNorm::new(&format!("gtg.rx.upbn{}", i + 1), c)));
            recon_x_up.push(Layer::Relu);
            c_prev = c;
        }
        recon_x_up.push(Layer::Conv(Conv2d::new("gtg.rx.out", c_prev, 1, 3, 1, 1, rng)));

        let mut recon_z = Sequential::new();
        dense_block(&mut recon_z, "gtg.rz.l1", p, p, rng);
        dense_block(&mut recon_z, "gtg.rz.l2", p, h, rng);
        dense_block(&mut recon_z, "gtg.rz.l3", h, h, rng);
        recon_z.push(Layer::Dense(Dense::new("gtg.rz.out", h, f, rng)));

        let basis = TpsBasis::new(config.grid_n, config.tps_regularization)
            .map_err(|e| NetError::Config(format!("TPS basis: {e}")))?;
        Ok(Self {
            config: config.clone(),
            encoder,
            predictor,
            predictor_out,
            recon_x_fc,
            recon_x_up,
            recon_z,
            basis: Arc::new(basis),
        })
    }

    pub fn basis(&self) -> &Arc<TpsBasis<T>> {
        &self.basis
    }

    fn check_image(&self, g: &Graph<T>, x: Var) -> Result<usize, AutodiffError> {
        let s = self.config.image_size;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(AutodiffError::Shape(format!("expected [B, 1, {s}, {s}] glyph batch, got {shape:?}")));
        }
        Ok(shape[0])
    }

    /// `x[B, 1, S, S]` → `E(x)` flattened to `[B, F]`.
    pub fn encode(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        let b = self.check_image(g, x)?;
        let h = self.encoder.forward(g, x, mode)?;
        g.reshape(h, &[b, self.config.feature_dim()])
    }

    /// `θ = squash(P(feature + z))`.
    pub fn predict(&self, g: &mut Graph<T>, feature: Var, z: Var, mode: Mode) -> Result<Var, AutodiffError> {
        if g.shape(feature) != g.shape(z) {
            return Err(AutodiffError::Shape(format!(
                "noise shape {:?} does not match feature shape {:?}",
                g.shape(z),
                g.shape(feature)
            )));
        }
        let mixed = g.add(feature, z)?;
        let h = self.predictor.forward(g, mixed, mode)?;
        let raw = self.predictor_out.forward(g, h, mode)?;
        squash_theta(g, raw, self.config.grid_n)
    }

    /// Resamples `x` through the warp described by `theta`.
    pub fn warp(&self, g: &mut Graph<T>, x: Var, theta: Var) -> Result<Var, AutodiffError> {
        let s = self.config.image_size;
        let grid = g.warp_grid(theta, self.basis.clone(), s, s, self.config.warp_mode)?;
        g.bilinear_sample(x, grid, Border::default())
    }

    pub fn recon_x(&self, g: &mut Graph<T>, theta: Var, mode: Mode) -> Result<Var, AutodiffError> {
        let b = g.shape(theta)[0];
        let h = self.recon_x_fc.forward(g, theta, mode)?;
        let side = self.config.image_size / 8;
        let c4 = self.config.encoder_widths()[3];
        let h = g.reshape(h, &[b, c4, side, side])?;
        let h = self.recon_x_up.forward(g, h, mode)?;
        g.sigmoid(h)
    }

    pub fn recon_z(&self, g: &mut Graph<T>, theta: Var, mode: Mode) -> Result<Var, AutodiffError> {
        self.recon_z.forward(g, theta, mode)
    }

    /// Full pass: feature, warp parameters, warped glyph and both reconstructions.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, z: Var, mode: Mode) -> Result<GtgOutputs, AutodiffError> {
        let feature = self.encode(g, x, mode)?;
        let theta = self.predict(g, feature, z, mode)?;
        let x_t = self.warp(g, x, theta)?;
        let x_rec = self.recon_x(g, theta, mode)?;
        let z_rec = self.recon_z(g, theta, mode)?;
        Ok(GtgOutputs {
            feature,
            theta,
            x_t,
            x_rec,
            z_rec,
        })
    }

    pub fn cast<U: Scalar>(&self) -> GtgGenerator<U> {
        GtgGenerator {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            predictor: self.predictor.cast(),
            predictor_out: self.predictor_out.cast(),
            recon_x_fc: self.recon_x_fc.cast(),
            recon_x_up: self.recon_x_up.cast(),
            recon_z: self.recon_z.cast(),
            basis: Arc::new(
                TpsBasis::new(self.config.grid_n, self.config.tps_regularization).expect("basis was valid before"),
            ),
        }
    }

    fn parts(&self) -> [&Sequential<T>; 6] {
        [
            &self.encoder,
            &self.predictor,
            &self.predictor_out,
            &self.recon_x_fc,
            &self.recon_x_up,
            &self.recon_z,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Sequential<T>; 6] {
        [
            &mut self.encoder,
            &mut self.predictor,
            &mut self.predictor_out,
            &mut self.recon_x_fc,
            &mut self.recon_x_up,
            &mut self.recon_z,
        ]
    }
}

impl<T: Scalar> Parameterized<T> for GtgGenerator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for p in self.parts() {
            p.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for p in self.parts_mut() {
            p.visit_params_mut(f);
        }
    }
}

impl<T: Scalar> Module<T> for GtgGenerator<T> {
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.parts().into_iter().flat_map(|p| p.norms()).collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.parts_mut().into_iter().flat_map(|p| p.norms_mut()).collect()
    }
}

/// Raw predictor output `[B, 2N² + 4]` → bounded warp parameters.
pub(crate) fn squash_theta<T: Scalar>(g: &mut Graph<T>, raw: Var, grid_n: usize) -> Result<Var, AutodiffError> {
    let n2 = 2 * grid_n * grid_n;
    let t = g.tanh(raw)?;
    let offsets = g.narrow(t, 1, 0, n2)?;
    let offsets = g.scale(offsets, T::lit(OFFSET_RANGE))?;
    let rot = g.narrow(t, 1, n2, 1)?;
    let rot = g.scale(rot, T::lit(ROTATION_RANGE))?;
    let scale = g.narrow(t, 1, n2 + 1, 1)?;
    let scale = g.scale(scale, T::lit(LOG_SCALE_RANGE))?;
    let scale = g.exp(scale)?;
    let shift = g.narrow(t, 1, n2 + 2, 2)?;
    let shift = g.scale(shift, T::lit(SHIFT_RANGE))?;
    g.concat(&[offsets, rot, scale, shift], 1)
}
