use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::imagecore::{BinarizeMethod, Image};
use crate::losses::{
    batch_stroke_weights, diversity_loss, gtg_disc_loss, gtg_gen_loss, snr_loss, ttg_disc_loss, ttg_gen_loss, LossReport,
    SnrConfig,
};
use crate::networks::{absorb_bn_stats, Mode};

use super::{TrainError, TrainState};

/// Parameter names that received gradient in each of the four phases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    pub grad_names: [BTreeSet<String>; 4],
}

const PHASES: [&str; 4] = ["gtg-generator", "gtg-discriminator", "ttg-generators", "ttg-discriminators"];

fn in_phase<T>(phase: usize, r: Result<T, AutodiffError>) -> Result<T, TrainError> {
    r.map_err(|source| TrainError::Phase {
        phase: PHASES[phase],
        source,
    })
}

/// Stacks same-sized images into a `[B, 1, H, W]` tensor.
pub(crate) fn stack_images(images: &[&Image]) -> Result<Tensor<f32>, AutodiffError> {
    let first = images
        .first()
        .ok_or_else(|| AutodiffError::Invalid("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(AutodiffError::Shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.data().iter().map(|v| *v as f32));
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Draws `batch` SC indices then `batch` PC indices (with replacement).
pub fn sample_batch(rng: &mut ChaCha8Rng, n_sc: usize, n_pc: usize, batch: usize) -> (Vec<usize>, Vec<usize>) {
    let xs = (0..batch).map(|_| rng.random_range(0..n_sc)).collect();
    let ys = (0..batch).map(|_| rng.random_range(0..n_pc)).collect();
    (xs, ys)
}

/// Samples a batch from the state's generator and runs one step.
pub fn train_iteration(state: &mut TrainState, sc: &[Image], pc: &[Image]) -> Result<LossReport, TrainError> {
    if sc.is_empty() || pc.is_empty() {
        return Err(TrainError::Data("both domains need at least one image".into()));
    }
    let (xi, yi) = sample_batch(&mut state.rng, sc.len(), pc.len(), state.config.batch_size);
    let x = stack_images(&xi.iter().map(|i| &sc[*i]).collect::<Vec<_>>()).map_err(|e| TrainError::Data(e.to_string()))?;
    let y = stack_images(&yi.iter().map(|i| &pc[*i]).collect::<Vec<_>>()).map_err(|e| TrainError::Data(e.to_string()))?;
    train_step(state, &x, &y)
}

pub fn train_step(state: &mut TrainState, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<LossReport, TrainError> {
    train_step_traced(state, x, y).map(|(r, _)| r)
}

/// One associate step. On failure the state is rolled back to what it was
/// before the step and the error names the phase.
pub fn train_step_traced(
    state: &mut TrainState,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
) -> Result<(LossReport, StepTrace), TrainError> {
    let s = state.config.net.image_size;
    for (name, t) in [("SC", x), ("PC", y)] {
        let sh = t.shape();
        if sh.len() != 4 || sh[1] != 1 || sh[2] != s || sh[3] != s || sh[0] < 2 {
            return Err(TrainError::Data(format!("{name} batch has shape {sh:?}, expected [B>=2, 1, {s}, {s}]")));
        }
    }
    let backup = state.clone();
    let result = step_inner(state, x, y);
    if result.is_err() {
        *state = backup;
    }
    result
}

fn step_inner(state: &mut TrainState, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(LossReport, StepTrace), TrainError> {
    let cfg = state.config.clone();
    let t = state.iteration;
    let lr_gtg = cfg.gtg_schedule().rate(t);
    let lr_ttg = cfg.ttg_schedule().rate(t);
    let b = x.shape()[0];
    let f = cfg.net.feature_dim();
    let z1 = gaussian(&mut state.rng, &[b, f]);
    let z2 = gaussian(&mut state.rng, &[b, f]);
    let mut trace = StepTrace::default();

    // 1: encoder, predictor and reconstructors against a frozen D_g.
    let (l_gg, l_snr, rer, alpha, rer_clamped, l_div) = {
        let mut g = Graph::new();
        let r: Result<_, AutodiffError> = (|| {
            let xv = g.input(x.clone())?;
            let z1v = g.input(z1.clone())?;
            let out = state.gtg.gen.forward(&mut g, xv, z1v, Mode::TRAIN)?;
            let snr = snr_loss(&mut g, xv, out.x_rec, z1v, out.z_rec, SnrConfig { m: cfg.m })?;
            let adv = gtg_gen_loss(&mut g, &state.gtg.disc, out.x_t, Mode::FROZEN)?;
            let z2v = g.input(z2.clone())?;
            let theta2 = state.gtg.gen.predict(&mut g, out.feature, z2v, Mode::TRAIN)?;
            let div = diversity_loss(&mut g, out.theta, theta2)?;
            let mut loss = g.add(adv, snr.loss)?;
            if cfg.diversity {
                loss = g.add(loss, div)?;
            }
            let grads = g.backward(loss)?;
            Ok((loss, snr, div, grads))
        })();
        let (loss, snr, div, grads) = in_phase(0, r)?;
        in_phase(0, state.optim.gtg_gen.step(&mut state.gtg.gen, grads.params(), lr_gtg))?;
        absorb_bn_stats(&mut state.gtg.gen, g.bn_stats());
        trace.grad_names[0] = grads.params().keys().cloned().collect();
        (
            g.scalar_value(loss) as f64,
            g.scalar_value(snr.loss) as f64,
            g.scalar_value(snr.rer) as f64,
            snr.alpha,
            snr.clamped,
            g.scalar_value(div) as f64,
        )
    };

    // 2: D_g on the refreshed warp versus destylized PCs.
    let (l_dg, x_t) = {
        let mut g = Graph::new();
        let r: Result<_, AutodiffError> = (|| {
            let yv = g.input(y.clone())?;
            let y_d = state.ttg.gens.yx.forward(&mut g, yv, Mode::FROZEN)?;
            let y_d = g.detach(y_d)?;
            let xv = g.input(x.clone())?;
            let z1v = g.input(z1.clone())?;
            let feat = state.gtg.gen.encode(&mut g, xv, Mode::FROZEN)?;
            let theta = state.gtg.gen.predict(&mut g, feat, z1v, Mode::FROZEN)?;
            let x_t = state.gtg.gen.warp(&mut g, xv, theta)?;
            let x_t = g.detach(x_t)?;
            let loss = gtg_disc_loss(&mut g, &state.gtg.disc, x_t, y_d, Mode::TRAIN)?;
            let grads = g.backward(loss)?;
            Ok((loss, x_t, grads))
        })();
        let (loss, x_t, grads) = in_phase(1, r)?;
        in_phase(1, state.optim.gtg_disc.step(&mut state.gtg.disc, grads.params(), lr_gtg))?;
        absorb_bn_stats(&mut state.gtg.disc, g.bn_stats());
        trace.grad_names[1] = grads.params().keys().cloned().collect();
        (g.scalar_value(loss) as f64, g.value(x_t).clone())
    };

    // 3: texture generators; x_t enters as a constant.
    let method = cfg.mask_threshold.map_or(BinarizeMethod::Otsu, BinarizeMethod::Fixed);
    let (weights, empty_masks) = if cfg.stroke_weighting {
        in_phase(2, batch_stroke_weights(&x_t, method, cfg.c))?
    } else {
        (Tensor::full(x_t.shape(), 1.0), 0)
    };
    let (l_gxy_gyx, l_sacyc, fake_y, fake_x) = {
        let mut g = Graph::new();
        let r: Result<_, AutodiffError> = (|| {
            let xt = g.input(x_t.clone())?;
            let yv = g.input(y.clone())?;
            let w = g.input(weights)?;
            let discs = &state.ttg.discs;
            let terms = ttg_gen_loss(
                &mut g,
                &state.ttg.gens,
                &discs.x,
                &discs.y,
                xt,
                yv,
                w,
                cfg.lambda,
                Mode::TRAIN,
                Mode::FROZEN,
            )?;
            let grads = g.backward(terms.loss)?;
            Ok((terms, grads))
        })();
        let (terms, grads) = in_phase(2, r)?;
        in_phase(2, state.optim.ttg_gen.step(&mut state.ttg.gens, grads.params(), lr_ttg))?;
        absorb_bn_stats(&mut state.ttg.gens, g.bn_stats());
        trace.grad_names[2] = grads.params().keys().cloned().collect();
        (
            g.scalar_value(terms.loss) as f64,
            g.scalar_value(terms.cycle) as f64,
            g.value(terms.cycles.fake_y).clone(),
            g.value(terms.cycles.fake_x).clone(),
        )
    };

    // 4: texture discriminators on the phase-3 translations.
    let l_dy_dx = {
        let mut g = Graph::new();
        let r: Result<_, AutodiffError> = (|| {
            let fy = g.input(fake_y)?;
            let yv = g.input(y.clone())?;
            let fx = g.input(fake_x)?;
            let xv = g.input(x.clone())?;
            let discs = &state.ttg.discs;
            let loss = ttg_disc_loss(&mut g, &discs.x, &discs.y, fy, yv, fx, xv, Mode::TRAIN)?;
            let grads = g.backward(loss)?;
            Ok((loss, grads))
        })();
        let (loss, grads) = in_phase(3, r)?;
        in_phase(3, state.optim.ttg_disc.step(&mut state.ttg.discs, grads.params(), lr_ttg))?;
        absorb_bn_stats(&mut state.ttg.discs, g.bn_stats());
        trace.grad_names[3] = grads.params().keys().cloned().collect();
        g.scalar_value(loss) as f64
    };

    let report = LossReport {
        iter: t,
        l_gg,
        l_dg,
        l_gxy_gyx,
        l_dy_dx,
        l_snr,
        rer,
        alpha,
        l_div,
        l_sacyc,
        rer_clamped,
        empty_masks,
    };
    if let Some((name, _)) = report.values().iter().find(|(_, v)| !v.is_finite()) {
        return Err(TrainError::Phase {
            phase: "report",
            source: AutodiffError::NonFinite { op: name, stage: "forward" },
        });
    }
    state.iteration += 1;
    Ok((report, trace))
}
