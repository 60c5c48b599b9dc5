use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::eval::pairwise_diversity;
use crate::imagecore::{binarize, BinarizeMethod, Image};
use crate::losses::LossReport;
use crate::networks::Mode;

use super::checkpoint::save_checkpoint;
use super::step::{gaussian, stack_images, train_iteration};
use super::{TrainConfig, TrainError, TrainState};

pub const LOG_FILE: &str = "train_log.jsonl";

/// Where and how far to run.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `train_log.jsonl` and checkpoints; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed iterations instead of the schedule length.
    pub until: Option<u64>,
}

fn check_domain(name: &str, images: &[Image], size: usize) -> Result<(), TrainError> {
    if images.is_empty() {
        return Err(TrainError::Data(format!("{name} dataset is empty")));
    }
    if let Some((i, img)) = images
        .iter()
        .enumerate()
        .find(|(_, im)| im.height() != size || im.width() != size)
    {
        return Err(TrainError::Data(format!(
            "{name} image {i} is {}x{}, config expects {size}x{size}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Fresh state, then [`train_until`] the end of the schedule.
pub fn train(
    config: TrainConfig,
    sc: &[Image],
    pc: &[Image],
    opts: &TrainOptions,
    on_report: impl FnMut(&LossReport),
) -> Result<(TrainState, Vec<LossReport>), TrainError> {
    let mut state = TrainState::new(config)?;
    let reports = train_until(&mut state, sc, pc, opts, on_report)?;
    Ok((state, reports))
}

/// Continues `state` until `opts.until` (or the schedule end), logging one
/// JSON line per iteration and checkpointing every `checkpoint_every`.
pub fn train_until(
    state: &mut TrainState,
    sc: &[Image],
    pc: &[Image],
    opts: &TrainOptions,
    mut on_report: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>, TrainError> {
    let size = state.config.net.image_size;
    check_domain("SC", sc, size)?;
    check_domain("PC", pc, size)?;
    let until = opts.until.unwrap_or(state.config.total_iters());
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?)
        }
        None => None,
    };
    let every = state.config.checkpoint_every;
    let mut reports = Vec::new();
    while state.iteration < until {
        let report = match train_iteration(state, sc, pc) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(state, dir.join("pre_failure.ckpt"))?;
                }
                return Err(e);
            }
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&report).expect("report serializes"))?;
        }
        on_report(&report);
        reports.push(report);
        if let Some(dir) = &opts.out_dir {
            if every > 0 && state.iteration.is_multiple_of(every) {
                save_checkpoint(state, checkpoint_path(dir, state.iteration))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(state, dir.join("final.ckpt"))?;
    }
    Ok(reports)
}

pub(crate) fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.ckpt"))
}

/// `num_samples` stylized variants of `x`: each draws its own noise, warps
/// `x` and translates it with `G_XY`, all in inference mode.
pub fn generate(state: &TrainState, x: &Image, num_samples: usize, seed: u64) -> Result<Vec<Image>, TrainError> {
    if num_samples == 0 {
        return Ok(Vec::new());
    }
    let s = state.config.net.image_size;
    if x.height() != s || x.width() != s {
        return Err(TrainError::Data(format!("input is {}x{}, model expects {s}x{s}", x.height(), x.width())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = stack_images(&vec![x; num_samples]).map_err(|e| TrainError::Data(e.to_string()))?;
    let z = gaussian(&mut rng, &[num_samples, state.config.net.feature_dim()]);
    let phase = |source| TrainError::Phase {
        phase: "generate",
        source,
    };
    let mut g = Graph::new();
    let out = (|| {
        let xv = g.input(batch)?;
        let zv = g.input(z)?;
        let gen = &state.gtg.gen;
        let feat = gen.encode(&mut g, xv, Mode::EVAL)?;
        let theta = gen.predict(&mut g, feat, zv, Mode::EVAL)?;
        let x_t = gen.warp(&mut g, xv, theta)?;
        state.ttg.gens.xy.forward(&mut g, x_t, Mode::EVAL)
    })()
    .map_err(phase)?;
    let data = g.value(out).data();
    data.chunks(s * s)
        .map(|c| Image::from_clamped(s, s, c.iter().map(|v| *v as f64).collect()).map_err(|e| TrainError::Data(e.to_string())))
        .collect()
}

/// Mean over `inputs` of the pairwise diversity of `per_input` generations,
/// each input drawing its own noise from `seed`.
pub fn generation_diversity(state: &TrainState, inputs: &[Image], per_input: usize, seed: u64) -> Result<f64, TrainError> {
    if inputs.is_empty() {
        return Err(TrainError::Data("no inputs".into()));
    }
    let mut total = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let out = generate(state, x, per_input, seed.wrapping_add(i as u64))?;
        total += pairwise_diversity(&out).map_err(|e| TrainError::Data(e.to_string()))?;
    }
    Ok(total / inputs.len() as f64)
}

/// Foreground-only cycle error: each input is warped with fresh noise,
/// sent through `G_YX(G_XY(·))` in inference mode, and the absolute error
/// is averaged over the ink pixels of the warped glyph (Otsu mask).
/// Inputs whose mask comes out empty are skipped.
pub fn foreground_cycle_error(state: &TrainState, inputs: &[Image], seed: u64) -> Result<f64, TrainError> {
    let s = state.config.net.image_size;
    if inputs.is_empty() {
        return Err(TrainError::Data("no inputs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = stack_images(&inputs.iter().collect::<Vec<_>>()).map_err(|e| TrainError::Data(e.to_string()))?;
    let z = gaussian(&mut rng, &[inputs.len(), state.config.net.feature_dim()]);
    let mut g = Graph::new();
    let (x_t, x_cyc) = (|| {
        let xv = g.input(batch)?;
        let zv = g.input(z)?;
        let gen = &state.gtg.gen;
        let feat = gen.encode(&mut g, xv, Mode::EVAL)?;
        let theta = gen.predict(&mut g, feat, zv, Mode::EVAL)?;
        let x_t = gen.warp(&mut g, xv, theta)?;
        let fake_y = state.ttg.gens.xy.forward(&mut g, x_t, Mode::EVAL)?;
        let x_cyc = state.ttg.gens.yx.forward(&mut g, fake_y, Mode::EVAL)?;
        Ok((x_t, x_cyc))
    })()
    .map_err(|source| TrainError::Phase {
        phase: "cycle",
        source,
    })?;
    let (xt, xc) = (g.value(x_t).data(), g.value(x_cyc).data());
    let (mut err, mut count) = (0.0, 0usize);
    for (a, b) in xt.chunks(s * s).zip(xc.chunks(s * s)) {
        let img = Image::from_clamped(s, s, a.iter().map(|v| *v as f64).collect()).map_err(|e| TrainError::Data(e.to_string()))?;
        let mask = binarize(&img, BinarizeMethod::Otsu).mask;
        for ((fg, p), q) in mask.bits().iter().zip(a).zip(b) {
            if *fg {
                err += (*p as f64 - *q as f64).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(TrainError::Data("every warped input has an empty stroke mask".into()));
    }
    Ok(err / count as f64)
}
