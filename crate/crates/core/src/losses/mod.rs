//! Objectives for both GANs: signal/noise reconstruction balancing, warp
//! diversity, stroke-weighted cycle consistency and least-squares
//! adversarial terms. All functions build graph nodes; plain-number
//! helpers exist for the pieces that are evaluated outside a graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Scalar, Tensor, Var};
use crate::imagecore::{binarize, BinarizeMethod, BinaryMask, Image};
use crate::networks::{Discriminator, Mode, TtgGenerators};

/// Reconstruction errors below this are clamped before taking the log ratio.
pub const RER_FLOOR: f64 = 1e-12;

/// Band half-width `M` in log space: `α` switches on outside `±ln M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrConfig {
    pub m: f64,
}

impl Default for SnrConfig {
    fn default() -> Self {
        Self { m: 6.0 }
    }
}

impl SnrConfig {
    pub fn new(m: f64) -> Result<Self, AutodiffError> {
        if !(m > 1.0 && m.is_finite()) {
            return Err(AutodiffError::Invalid(format!("SNR band M must exceed 1, got {m}")));
        }
        Ok(Self { m })
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<(), AutodiffError> {
    if g.shape(a) != g.shape(b) {
        return Err(AutodiffError::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn l1<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, AutodiffError> {
    same_shape(g, a, b, "l1")?;
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `RER = ln(L1(z, z_rec) / L1(x, x_rec))` and the two terms it came from.
#[derive(Debug, Clone, Copy)]
pub struct RerTerms {
    pub rer: Var,
    pub l1_x: Var,
    pub l1_z: Var,
    /// One of the L1 terms was below [`RER_FLOOR`] and got clamped.
    pub clamped: bool,
}

pub fn rer<T: Scalar>(g: &mut Graph<T>, x: Var, x_rec: Var, z: Var, z_rec: Var) -> Result<RerTerms, AutodiffError> {
    let l1_x = l1(g, x, x_rec)?;
    let l1_z = l1(g, z, z_rec)?;
    let clamped = g.scalar_value(l1_x).to_f64_lossy() < RER_FLOOR || g.scalar_value(l1_z).to_f64_lossy() < RER_FLOOR;
    let lx = g.clamp_min(l1_x, RER_FLOOR)?;
    let lz = g.clamp_min(l1_z, RER_FLOOR)?;
    let lx = g.log(lx)?;
    let lz = g.log(lz)?;
    let rer = g.sub(lz, lx)?;
    Ok(RerTerms { rer, l1_x, l1_z, clamped })
}

/// The three-way rule: `+1` above `ln M`, `−1` below `−ln M`, else `0`.
pub fn select_alpha(rer: f64, m: f64) -> f64 {
    let band = m.ln();
    if rer > band {
        1.0
    } else if rer < -band {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SnrTerms {
    pub loss: Var,
    pub rer: Var,
    pub alpha: f64,
    pub clamped: bool,
    pub l1_x: Var,
    pub l1_z: Var,
}

/// `L1(x, x_rec) + L1(z, z_rec) + α·RER`, with `α` picked from this batch.
pub fn snr_loss<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_rec: Var,
    z: Var,
    z_rec: Var,
    cfg: SnrConfig,
) -> Result<SnrTerms, AutodiffError> {
    snr_loss_inner(g, x, x_rec, z, z_rec, |r| select_alpha(r, cfg.m))
}

/// [`snr_loss`] with `α` supplied by the caller (held fixed across
/// finite-difference probes).
pub fn snr_loss_with_alpha<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_rec: Var,
    z: Var,
    z_rec: Var,
    alpha: f64,
) -> Result<SnrTerms, AutodiffError> {
    snr_loss_inner(g, x, x_rec, z, z_rec, |_| alpha)
}

fn snr_loss_inner<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_rec: Var,
    z: Var,
    z_rec: Var,
    pick: impl Fn(f64) -> f64,
) -> Result<SnrTerms, AutodiffError> {
    let terms = rer(g, x, x_rec, z, z_rec)?;
    let alpha = pick(g.scalar_value(terms.rer).to_f64_lossy());
    let base = g.add(terms.l1_x, terms.l1_z)?;
    let loss = if alpha == 0.0 {
        base
    } else {
        let a = g.scale(terms.rer, T::lit(alpha))?;
        g.add(base, a)?
    };
    Ok(SnrTerms {
        loss,
        rer: terms.rer,
        alpha,
        clamped: terms.clamped,
        l1_x: terms.l1_x,
        l1_z: terms.l1_z,
    })
}

/// `−L1(θ1, θ2)`: rewards different warps for different noise draws.
pub fn diversity_loss<T: Scalar>(g: &mut Graph<T>, theta1: Var, theta2: Var) -> Result<Var, AutodiffError> {
    let d = l1(g, theta1, theta2)?;
    g.scale(d, T::lit(-1.0))
}

/// Per-pixel stroke weights: `(C / S_fg)·S_bg` on ink, 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub foreground_weight: f64,
    /// No foreground pixels: all weights fell back to 1.
    pub degenerate: bool,
}

pub fn stroke_weight(mask: &BinaryMask, c: f64) -> WeightMatrix {
    let s_fg = mask.foreground_count();
    let s_bg = mask.background_count();
    let (fw, degenerate) = if s_fg == 0 {
        (1.0, true)
    } else {
        (c / s_fg as f64 * s_bg as f64, false)
    };
    let data = mask.bits().iter().map(|fg| if *fg { fw } else { 1.0 }).collect();
    WeightMatrix {
        height: mask.height(),
        width: mask.width(),
        data,
        foreground_weight: fw,
        degenerate,
    }
}

/// Stroke weights for every image of a `[B, 1, H, W]` batch, binarized with
/// `method`. Returns the weight tensor and how many samples were degenerate.
pub fn batch_stroke_weights<T: Scalar>(
    batch: &Tensor<T>,
    method: BinarizeMethod,
    c: f64,
) -> Result<(Tensor<T>, usize), AutodiffError> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(AutodiffError::Shape(format!("stroke weights need [B, 1, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    let mut out = Vec::with_capacity(batch.len());
    let mut degenerate = 0;
    for sample in batch.data().chunks(h * w) {
        let img = Image::from_clamped(h, w, sample.iter().map(|v| v.to_f64_lossy()).collect())
            .map_err(|e| AutodiffError::Invalid(e.to_string()))?;
        let wm = stroke_weight(&binarize(&img, method).mask, c);
        degenerate += wm.degenerate as usize;
        out.extend(wm.data.iter().map(|v| T::lit(*v)));
    }
    Ok((Tensor::new(shape, out)?, degenerate))
}

/// `mean(W ⊙ |a − b|)`, normalized by element count.
pub fn weighted_l1<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, weight: Var) -> Result<Var, AutodiffError> {
    same_shape(g, a, b, "weighted l1")?;
    same_shape(g, a, weight, "weighted l1 weights")?;
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    let d = g.mul(d, weight)?;
    g.mean(d)
}

/// Stroke-aware cycle loss from already computed cycles:
/// `mean(W ⊙ |x_cyc − x_t|) + L1(y_cyc, y)`.
pub fn cycle_loss<T: Scalar>(
    g: &mut Graph<T>,
    x_t: Var,
    x_cyc: Var,
    y: Var,
    y_cyc: Var,
    weight: Var,
) -> Result<Var, AutodiffError> {
    let a = weighted_l1(g, x_cyc, x_t, weight)?;
    let b = l1(g, y_cyc, y)?;
    g.add(a, b)
}

/// Nodes of both translation cycles.
#[derive(Debug, Clone, Copy)]
pub struct Cycles {
    /// `G_XY(x_t)`
    pub fake_y: Var,
    /// `G_YX(G_XY(x_t))`
    pub x_cyc: Var,
    /// `G_YX(y)`
    pub fake_x: Var,
    /// `G_XY(G_YX(y))`
    pub y_cyc: Var,
}

pub fn run_cycles<T: Scalar>(
    g: &mut Graph<T>,
    gens: &TtgGenerators<T>,
    x_t: Var,
    y: Var,
    mode: Mode,
) -> Result<Cycles, AutodiffError> {
    let fake_y = gens.xy.forward(g, x_t, mode)?;
    let x_cyc = gens.yx.forward(g, fake_y, mode)?;
    let fake_x = gens.yx.forward(g, y, mode)?;
    let y_cyc = gens.xy.forward(g, fake_x, mode)?;
    Ok(Cycles {
        fake_y,
        x_cyc,
        fake_x,
        y_cyc,
    })
}

/// `L_sacyc` computed end to end through both generators.
pub fn stroke_aware_cycle_loss<T: Scalar>(
    g: &mut Graph<T>,
    gens: &TtgGenerators<T>,
    x_t: Var,
    y: Var,
    weight: Var,
    mode: Mode,
) -> Result<Var, AutodiffError> {
    let c = run_cycles(g, gens, x_t, y, mode)?;
    cycle_loss(g, x_t, c.x_cyc, y, c.y_cyc, weight)
}

/// Generator side of least squares: `mean((s − 1)²)`.
pub fn lsgan_gen<T: Scalar>(g: &mut Graph<T>, scores: Var) -> Result<Var, AutodiffError> {
    let d = g.add_scalar(scores, T::lit(-1.0))?;
    let d = g.square(d)?;
    g.mean(d)
}

/// Discriminator side: `½·mean(fake²) + ½·mean((real − 1)²)`.
pub fn lsgan_disc<T: Scalar>(g: &mut Graph<T>, fake: Var, real: Var) -> Result<Var, AutodiffError> {
    let f = g.square(fake)?;
    let f = g.mean(f)?;
    let r = g.add_scalar(real, T::lit(-1.0))?;
    let r = g.square(r)?;
    let r = g.mean(r)?;
    let s = g.add(f, r)?;
    g.scale(s, T::lit(0.5))
}

/// Adversarial part of the glyph generator loss: `E[(D_g(x_t) − 1)²]`.
pub fn gtg_gen_loss<T: Scalar>(g: &mut Graph<T>, d_g: &Discriminator<T>, x_t: Var, mode: Mode) -> Result<Var, AutodiffError> {
    let s = d_g.forward(g, x_t, mode)?;
    lsgan_gen(g, s)
}

/// `½E[D_g(x_t)²] + ½E[(D_g(y_d) − 1)²]`; callers pass detached inputs.
pub fn gtg_disc_loss<T: Scalar>(
    g: &mut Graph<T>,
    d_g: &Discriminator<T>,
    x_t: Var,
    y_d: Var,
    mode: Mode,
) -> Result<Var, AutodiffError> {
    let fake = d_g.forward(g, x_t, mode)?;
    let real = d_g.forward(g, y_d, mode)?;
    lsgan_disc(g, fake, real)
}

/// Pieces of the texture generator objective.
#[derive(Debug, Clone, Copy)]
pub struct TtgGenTerms {
    pub loss: Var,
    pub adversarial: Var,
    pub cycle: Var,
    pub cycles: Cycles,
}

/// `E[(D_Y(G_XY(x_t)) − 1)²] + E[(D_X(G_YX(y)) − 1)²] + λ·L_sacyc`.
#[allow(clippy::too_many_arguments)]
pub fn ttg_gen_loss<T: Scalar>(
    g: &mut Graph<T>,
    gens: &TtgGenerators<T>,
    d_x: &Discriminator<T>,
    d_y: &Discriminator<T>,
    x_t: Var,
    y: Var,
    weight: Var,
    lambda: f64,
    gen_mode: Mode,
    disc_mode: Mode,
) -> Result<TtgGenTerms, AutodiffError> {
    let cycles = run_cycles(g, gens, x_t, y, gen_mode)?;
    let sy = d_y.forward(g, cycles.fake_y, disc_mode)?;
    let sx = d_x.forward(g, cycles.fake_x, disc_mode)?;
    let ay = lsgan_gen(g, sy)?;
    let ax = lsgan_gen(g, sx)?;
    let adversarial = g.add(ay, ax)?;
    let cycle = cycle_loss(g, x_t, cycles.x_cyc, y, cycles.y_cyc, weight)?;
    let weighted = g.scale(cycle, T::lit(lambda))?;
    let loss = g.add(adversarial, weighted)?;
    Ok(TtgGenTerms {
        loss,
        adversarial,
        cycle,
        cycles,
    })
}

/// Both texture discriminators:
/// `½E[D_Y(fake_y)²] + ½E[(D_Y(y) − 1)²] + ½E[D_X(fake_x)²] + ½E[(D_X(x) − 1)²]`.
#[allow(clippy::too_many_arguments)]
pub fn ttg_disc_loss<T: Scalar>(
    g: &mut Graph<T>,
    d_x: &Discriminator<T>,
    d_y: &Discriminator<T>,
    fake_y: Var,
    y: Var,
    fake_x: Var,
    x: Var,
    mode: Mode,
) -> Result<Var, AutodiffError> {
    let fy = d_y.forward(g, fake_y, mode)?;
    let ry = d_y.forward(g, y, mode)?;
    let fx = d_x.forward(g, fake_x, mode)?;
    let rx = d_x.forward(g, x, mode)?;
    let ly = lsgan_disc(g, fy, ry)?;
    let lx = lsgan_disc(g, fx, rx)?;
    g.add(ly, lx)
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    #[serde(rename = "L_Gg")]
    pub l_gg: f64,
    #[serde(rename = "L_Dg")]
    pub l_dg: f64,
    #[serde(rename = "L_GXY_GYX")]
    pub l_gxy_gyx: f64,
    #[serde(rename = "L_DY_DX")]
    pub l_dy_dx: f64,
    #[serde(rename = "L_snr")]
    pub l_snr: f64,
    #[serde(rename = "RER")]
    pub rer: f64,
    pub alpha: f64,
    #[serde(rename = "L_div")]
    pub l_div: f64,
    #[serde(rename = "L_sacyc")]
    pub l_sacyc: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub rer_clamped: bool,
    /// Samples in the batch whose stroke mask was empty.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub empty_masks: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl LossReport {
    /// The named losses in log order.
    pub fn values(&self) -> [(&'static str, f64); 9] {
        [
            ("L_Gg", self.l_gg),
            ("L_Dg", self.l_dg),
            ("L_GXY_GYX", self.l_gxy_gyx),
            ("L_DY_DX", self.l_dy_dx),
            ("L_snr", self.l_snr),
            ("RER", self.rer),
            ("alpha", self.alpha),
            ("L_div", self.l_div),
            ("L_sacyc", self.l_sacyc),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|(_, v)| v.is_finite())
    }
}
