//! Finite-difference suites over every loss and the differentiable warp,
//! run on tiny double-precision networks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{grad_check, AutodiffError, GradCheckConfig, GradCheckReport, Graph, ParamMap, Parameterized, Tensor, Var};
use crate::geometry::{Border, TpsBasis, WarpMode};
use crate::imagecore::BinarizeMethod;
use crate::losses::{
    batch_stroke_weights, diversity_loss, gtg_disc_loss, gtg_gen_loss, l1, rer, select_alpha, snr_loss_with_alpha,
    stroke_aware_cycle_loss, ttg_disc_loss, ttg_gen_loss,
};
use crate::networks::{build_default_nets, GtgNets, Mode, NetConfig, TtgNets};

pub const SUITE_IMAGE_SIZE: usize = 8;
pub const SUITE_BATCH: usize = 4;
pub const SUITE_GRID_N: usize = 2;

/// One named objective and its check.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub cases: Vec<SuiteCase>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max)
    }
}

/// 8×8 glyphs, a 2×2 control grid and quarter channel widths.
pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        image_size: SUITE_IMAGE_SIZE,
        grid_n: SUITE_GRID_N,
        channel_mult: 0.25,
        hidden: 32,
        ttg_gen_width: 32,
        disc_width: 64,
        ..NetConfig::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

struct Fixture {
    gtg: GtgNets<f64>,
    ttg: TtgNets<f64>,
    x: Tensor<f64>,
    y: Tensor<f64>,
    z1: Tensor<f64>,
    z2: Tensor<f64>,
    x_t: Tensor<f64>,
    y_d: Tensor<f64>,
    fake_y: Tensor<f64>,
    fake_x: Tensor<f64>,
    weight: Tensor<f64>,
    alpha: f64,
}

type Objective<'a, M> = Box<dyn FnMut(&M) -> Result<(Graph<f64>, Var), AutodiffError> + 'a>;

fn fixture(seed: u64) -> Result<Fixture, AutodiffError> {
    let cfg = tiny_net_config();
    let (gtg, ttg) = build_default_nets::<f64>(&cfg, seed).map_err(|e| AutodiffError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let s = cfg.image_size;
    let img = [SUITE_BATCH, 1, s, s];
    let x = uniform(&mut rng, &img, 0.0, 1.0);
    let y = uniform(&mut rng, &img, 0.0, 1.0);
    let z1 = normal(&mut rng, &[SUITE_BATCH, cfg.feature_dim()]);
    let z2 = normal(&mut rng, &[SUITE_BATCH, cfg.feature_dim()]);

    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let yv = g.input(y.clone())?;
    let z1v = g.input(z1.clone())?;
    let out = gtg.gen.forward(&mut g, xv, z1v, Mode::FROZEN)?;
    let r = rer(&mut g, xv, out.x_rec, z1v, out.z_rec)?;
    let y_d = ttg.gens.yx.forward(&mut g, yv, Mode::FROZEN)?;
    let fake_y = ttg.gens.xy.forward(&mut g, out.x_t, Mode::FROZEN)?;
    let x_t = g.value(out.x_t).clone();
    let (weight, _) = batch_stroke_weights(&x_t, BinarizeMethod::Otsu, 2.0)?;
    Ok(Fixture {
        alpha: select_alpha(g.scalar_value(r.rer), 6.0),
        x_t,
        y_d: g.value(y_d).clone(),
        fake_y: g.value(fake_y).clone(),
        fake_x: g.value(y_d).clone(),
        gtg,
        ttg,
        x,
        y,
        z1,
        z2,
        weight,
    })
}

fn run<M: Parameterized<f64>>(name: &str, model: &mut M, f: Objective<'_, M>, cfg: &GradCheckConfig) -> Result<SuiteCase, AutodiffError> {
    Ok(SuiteCase {
        name: name.to_string(),
        report: grad_check(model, f, cfg)?,
    })
}

/// Every loss term, each differentiated with respect to the network it trains.
/// Quantities chosen from the base point (the SNR sign `α` and the stroke
/// weights `W`) are held fixed while probing.
pub fn loss_suite(cfg: &GradCheckConfig) -> Result<SuiteReport, AutodiffError> {
    let fx = fixture(cfg.seed)?;
    let mut cases = Vec::new();
    let fx = &fx;

    // Glyph generator terms.
    let mut gen = fx.gtg.gen.clone();
    let recon = |which: &'static str| -> Objective<'_, _> {
        Box::new(move |m: &crate::networks::GtgGenerator<f64>| {
            let mut g = Graph::new();
            let x = g.input(fx.x.clone())?;
            let z = g.input(fx.z1.clone())?;
            let o = m.forward(&mut g, x, z, Mode::TRAIN)?;
            let loss = match which {
                "x" => l1(&mut g, x, o.x_rec)?,
                "z" => l1(&mut g, z, o.z_rec)?,
                _ => rer(&mut g, x, o.x_rec, z, o.z_rec)?.rer,
            };
            Ok((g, loss))
        })
    };
    cases.push(run("L1 signal reconstruction", &mut gen, recon("x"), cfg)?);
    cases.push(run("L1 noise reconstruction", &mut gen, recon("z"), cfg)?);
    cases.push(run("RER", &mut gen, recon("rer"), cfg)?);
    for alpha in [-1.0, 0.0, 1.0] {
        let f: Objective<'_, _> = Box::new(move |m: &crate::networks::GtgGenerator<f64>| {
            let mut g = Graph::new();
            let x = g.input(fx.x.clone())?;
            let z = g.input(fx.z1.clone())?;
            let o = m.forward(&mut g, x, z, Mode::TRAIN)?;
            let s = snr_loss_with_alpha(&mut g, x, o.x_rec, z, o.z_rec, alpha)?;
            Ok((g, s.loss))
        });
        cases.push(run(&format!("L_snr (alpha {alpha:+})"), &mut gen, f, cfg)?);
    }
    let div: Objective<'_, _> = Box::new(move |m: &crate::networks::GtgGenerator<f64>| {
        let mut g = Graph::new();
        let x = g.input(fx.x.clone())?;
        let z1 = g.input(fx.z1.clone())?;
        let z2 = g.input(fx.z2.clone())?;
        let feat = m.encode(&mut g, x, Mode::TRAIN)?;
        let t1 = m.predict(&mut g, feat, z1, Mode::TRAIN)?;
        let t2 = m.predict(&mut g, feat, z2, Mode::TRAIN)?;
        let loss = diversity_loss(&mut g, t1, t2)?;
        Ok((g, loss))
    });
    cases.push(run("L_div", &mut gen, div, cfg)?);
    let disc = &fx.gtg.disc;
    let l_gg: Objective<'_, _> = Box::new(move |m: &crate::networks::GtgGenerator<f64>| {
        let mut g = Graph::new();
        let x = g.input(fx.x.clone())?;
        let z1 = g.input(fx.z1.clone())?;
        let z2 = g.input(fx.z2.clone())?;
        let o = m.forward(&mut g, x, z1, Mode::TRAIN)?;
        let snr = snr_loss_with_alpha(&mut g, x, o.x_rec, z1, o.z_rec, fx.alpha)?;
        let adv = gtg_gen_loss(&mut g, disc, o.x_t, Mode::FROZEN)?;
        let t2 = m.predict(&mut g, o.feature, z2, Mode::TRAIN)?;
        let d = diversity_loss(&mut g, o.theta, t2)?;
        let loss = g.add(adv, snr.loss)?;
        let loss = g.add(loss, d)?;
        Ok((g, loss))
    });
    cases.push(run("L_Gg", &mut gen, l_gg, cfg)?);

    let mut d_g = fx.gtg.disc.clone();
    let l_dg: Objective<'_, _> = Box::new(move |m: &crate::networks::Discriminator<f64>| {
        let mut g = Graph::new();
        let xt = g.input(fx.x_t.clone())?;
        let yd = g.input(fx.y_d.clone())?;
        let loss = gtg_disc_loss(&mut g, m, xt, yd, Mode::TRAIN)?;
        Ok((g, loss))
    });
    cases.push(run("L_Dg", &mut d_g, l_dg, cfg)?);

    // Texture terms.
    let mut gens = fx.ttg.gens.clone();
    let sacyc: Objective<'_, _> = Box::new(move |m: &crate::networks::TtgGenerators<f64>| {
        let mut g = Graph::new();
        let xt = g.input(fx.x_t.clone())?;
        let y = g.input(fx.y.clone())?;
        let w = g.input(fx.weight.clone())?;
        let loss = stroke_aware_cycle_loss(&mut g, m, xt, y, w, Mode::TRAIN)?;
        Ok((g, loss))
    });
    cases.push(run("L_sacyc", &mut gens, sacyc, cfg)?);
    let discs = &fx.ttg.discs;
    let l_g: Objective<'_, _> = Box::new(move |m: &crate::networks::TtgGenerators<f64>| {
        let mut g = Graph::new();
        let xt = g.input(fx.x_t.clone())?;
        let y = g.input(fx.y.clone())?;
        let w = g.input(fx.weight.clone())?;
        let t = ttg_gen_loss(&mut g, m, &discs.x, &discs.y, xt, y, w, 10.0, Mode::TRAIN, Mode::FROZEN)?;
        Ok((g, t.loss))
    });
    cases.push(run("L_GXY + L_GYX", &mut gens, l_g, cfg)?);
    let mut ds = fx.ttg.discs.clone();
    let l_d: Objective<'_, _> = Box::new(move |m: &crate::networks::TtgDiscriminators<f64>| {
        let mut g = Graph::new();
        let fy = g.input(fx.fake_y.clone())?;
        let y = g.input(fx.y.clone())?;
        let fxv = g.input(fx.fake_x.clone())?;
        let x = g.input(fx.x.clone())?;
        let loss = ttg_disc_loss(&mut g, &m.x, &m.y, fy, y, fxv, x, Mode::TRAIN)?;
        Ok((g, loss))
    });
    cases.push(run("L_DY + L_DX", &mut ds, l_d, cfg)?);
    Ok(SuiteReport { suite: "losses", cases })
}

/// Reduces `v` with fixed random weights so every element gets its own
/// upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = g.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(uniform(&mut rng, &shape, -1.0, 1.0))?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Grid construction in every warp mode, bilinear sampling under both
/// border rules, and the composed warp of an image.
pub fn geometry_suite(cfg: &GradCheckConfig) -> Result<SuiteReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e0);
    let mut cases = Vec::new();
    for n in [2usize, 4] {
        let basis = Arc::new(TpsBasis::<f64>::new(n, 1e-6).map_err(|e| AutodiffError::Invalid(e.to_string()))?);
        let p = 2 * n * n + 4;
        for mode in [WarpMode::Combined, WarpMode::TpsOnly, WarpMode::AffineOnly] {
            let mut params = ParamMap::new();
            params.insert("theta".to_string(), uniform(&mut rng, &[2, p], -0.2, 0.2));
            let b = basis.clone();
            let f: Objective<'_, ParamMap<f64>> = Box::new(move |m| {
                let mut g = Graph::new();
                let t = g.param("theta", m["theta"].clone())?;
                let grid = g.warp_grid(t, b.clone(), 6, 5, mode)?;
                let loss = weighted_sum(&mut g, grid, 1)?;
                Ok((g, loss))
            });
            cases.push(run(&format!("warp grid N={n} {mode:?}"), &mut params, f, cfg)?);
        }
    }
    for border in [Border::Fill(1.0), Border::Clamp] {
        let mut params = ParamMap::new();
        params.insert("img".to_string(), uniform(&mut rng, &[2, 1, 5, 6], 0.0, 1.0));
        params.insert("grid".to_string(), uniform(&mut rng, &[2, 4, 4, 2], -1.1, 1.1));
        let f: Objective<'_, ParamMap<f64>> = Box::new(move |m| {
            let mut g = Graph::new();
            let img = g.param("img", m["img"].clone())?;
            let grid = g.param("grid", m["grid"].clone())?;
            let out = g.bilinear_sample(img, grid, border)?;
            let loss = weighted_sum(&mut g, out, 2)?;
            Ok((g, loss))
        });
        cases.push(run(&format!("bilinear sample {border:?}"), &mut params, f, cfg)?);
    }
    let basis = Arc::new(TpsBasis::<f64>::new(4, 1e-6).map_err(|e| AutodiffError::Invalid(e.to_string()))?);
    let image = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let mut params = ParamMap::new();
    params.insert("theta".to_string(), uniform(&mut rng, &[2, 36], -0.2, 0.2));
    let f: Objective<'_, ParamMap<f64>> = Box::new(move |m| {
        let mut g = Graph::new();
        let t = g.param("theta", m["theta"].clone())?;
        let img = g.input(image.clone())?;
        let grid = g.warp_grid(t, basis.clone(), 8, 8, WarpMode::Combined)?;
        let out = g.bilinear_sample(img, grid, Border::Fill(1.0))?;
        let loss = weighted_sum(&mut g, out, 3)?;
        Ok((g, loss))
    });
    cases.push(run("warped image", &mut params, f, cfg)?);
    Ok(SuiteReport {
        suite: "geometry",
        cases,
    })
}
