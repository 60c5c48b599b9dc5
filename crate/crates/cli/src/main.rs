use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use glyphforge::autodiff::GradCheckConfig;
use glyphforge::data::{load_image_dir, scan_dataset, synth_generate, write_corpus, SyntheticGlyphSpec, TextureProfile};
use glyphforge::eval::evaluate;
use glyphforge::geometry::{random_warp, warp_image, Border, WarpMode};
use glyphforge::gradsuite::{geometry_suite, loss_suite, SuiteReport};
use glyphforge::imagecore::{load_image, resize, save_image, Image};
use glyphforge::losses::LossReport;
use glyphforge::training::{
    generate, load_checkpoint, train_iteration, train_until, TrainConfig, TrainOptions, TrainState, LOG_FILE,
};

/// Written next to the training log so audits can find the data again.
const RUN_FILE: &str = "run.json";

#[derive(Parser)]
#[command(name = "glyphforge", version, about = "Glyph transformation and texture transfer for scarce glyph corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clean (SC) and textured (PC) glyph corpus.
    Synth {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// No background noise, blotches or bias in the textured domain.
        #[arg(long)]
        clean: bool,
    },
    /// Apply one random warp to an image.
    Warp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "affine_only")]
        tps_only: bool,
        #[arg(long)]
        affine_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Control grid size.
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Train all networks, logging one JSON line per iteration.
    Train {
        #[arg(long)]
        sc: PathBuf,
        #[arg(long)]
        pc: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        desk_scale: bool,
        /// JSON file overlaid on the preset; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many iterations.
        #[arg(long)]
        until: Option<u64>,
        /// Continue from a checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Disable the diversity term.
        #[arg(long)]
        no_diversity: bool,
        /// Plain cycle loss (all stroke weights 1).
        #[arg(long)]
        no_stroke_weight: bool,
        /// Inputs are light ink on a dark background.
        #[arg(long)]
        invert: bool,
    },
    /// Generate stylized variants of one glyph.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        invert: bool,
    },
    /// Finite-difference checks of every loss and the warp.
    GradCheck {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        module: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// NDB, JSD and diversity of a generated set against a real set.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, default_value_t = glyphforge::eval::DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images are resized to this square size.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        invert: bool,
    },
    /// Recompute a logged loss report from the checkpoint taken before it.
    Losses {
        /// A training log (JSON lines) or a single report.
        #[arg(long)]
        report: PathBuf,
        /// Defaults to the newest checkpoint beside the report that has a logged successor.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Default to the dataset paths recorded by `train`.
        #[arg(long)]
        sc: Option<PathBuf>,
        #[arg(long)]
        pc: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    All,
    Losses,
    Geometry,
}

fn resolved(command: &str, config: Value) {
    eprintln!("{}", json!({ "command": command, "config": config }));
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn train_config(desk_scale: bool, file: Option<&Path>, seed: Option<u64>, no_div: bool, no_w: bool) -> Result<TrainConfig> {
    let overlay = match file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if !v.is_object() {
                bail!("{}: config must be a JSON object", p.display());
            }
            Some(v)
        }
        None => None,
    };
    let file_desk = overlay
        .as_ref()
        .and_then(|v| v.get("desk_scale"))
        .and_then(Value::as_bool)
        .unwrap_or(false);
    let preset = if desk_scale || file_desk {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    };
    let mut v = serde_json::to_value(preset)?;
    if let Some(o) = overlay {
        merge(&mut v, o);
    }
    let mut cfg: TrainConfig = serde_json::from_value(v).context("config overlay")?;
    if desk_scale {
        cfg.desk_scale = true;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if no_div {
        cfg.diversity = false;
    }
    if no_w {
        cfg.stroke_weighting = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_domain(dir: &Path, size: usize, invert: bool, name: &str) -> Result<Vec<Image>> {
    let m = scan_dataset(dir, size).with_context(|| format!("{name} dataset"))?;
    for s in &m.skipped {
        eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
    }
    Ok(m.load_all(invert)?)
}

fn load_input(path: &Path, size: usize, invert: bool) -> Result<Image> {
    let img = load_image(path).with_context(|| format!("loading {}", path.display()))?;
    let img = if img.height() != size || img.width() != size {
        resize(&img, size, size)?
    } else {
        img
    };
    Ok(if invert { img.inverted() } else { img })
}

fn cmd_synth(classes: usize, per_class: usize, out: &Path, seed: u64, size: usize, clean: bool) -> Result<()> {
    let mut spec = SyntheticGlyphSpec {
        num_classes: classes,
        image_size: size,
        ..SyntheticGlyphSpec::default()
    };
    if clean {
        spec.texture = TextureProfile::clean();
    }
    resolved("synth", json!({ "spec": spec, "per_class": per_class, "seed": seed, "out": out }));
    let corpus = synth_generate(&spec, per_class, seed)?;
    let (sc, pc) = write_corpus(&corpus, out)?;
    print_json(&json!({ "sc": sc.root, "pc": pc.root, "sc_images": sc.len(), "pc_images": pc.len() }));
    Ok(())
}

fn cmd_warp(input: &Path, out: &Path, tps_only: bool, affine_only: bool, seed: u64, n: usize) -> Result<()> {
    let mode = if tps_only {
        WarpMode::TpsOnly
    } else if affine_only {
        WarpMode::AffineOnly
    } else {
        WarpMode::Combined
    };
    resolved("warp", json!({ "in": input, "out": out, "mode": mode, "seed": seed, "n": n }));
    let img = load_image(input).with_context(|| format!("loading {}", input.display()))?;
    let params = random_warp(n, seed)?;
    let (warped, fallback) = warp_image(&img, &params, mode, Border::default())?;
    if fallback {
        eprintln!("warning: singular TPS system, affine part only");
    }
    save_image(&warped, out)?;
    print_json(&json!({
        "out": out,
        "offsets": params.offsets,
        "rotation": params.rotation,
        "scale": params.scale,
        "shift": params.shift,
    }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    sc: &Path,
    pc: &Path,
    out: &Path,
    desk_scale: bool,
    config: Option<&Path>,
    seed: Option<u64>,
    until: Option<u64>,
    resume: Option<&Path>,
    no_div: bool,
    no_w: bool,
    invert: bool,
) -> Result<()> {
    let mut state = match resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(train_config(desk_scale, config, seed, no_div, no_w)?)?,
    };
    resolved("train", json!({ "train": state.config, "sc": sc, "pc": pc, "out": out, "until": until, "resume": resume, "invert": invert }));
    let size = state.config.net.image_size;
    let sc_imgs = load_domain(sc, size, invert, "SC")?;
    let pc_imgs = load_domain(pc, size, invert, "PC")?;
    fs::create_dir_all(out)?;
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    fs::write(
        out.join(RUN_FILE),
        serde_json::to_string_pretty(&json!({ "sc": abs(sc), "pc": abs(pc), "invert": invert }))?,
    )?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        until,
    };
    let total = until.unwrap_or(state.config.total_iters());
    let reports = train_until(&mut state, &sc_imgs, &pc_imgs, &opts, |r| {
        if (r.iter + 1) % 100 == 0 || r.iter + 1 == total {
            eprintln!(
                "iter {:>6}  L_Gg {:.4}  L_Dg {:.4}  L_GXY_GYX {:.4}  L_DY_DX {:.4}  RER {:+.3}",
                r.iter + 1,
                r.l_gg,
                r.l_dg,
                r.l_gxy_gyx,
                r.l_dy_dx,
                r.rer
            );
        }
    })?;
    print_json(&json!({
        "iterations": state.iteration,
        "checkpoint": out.join("final.ckpt"),
        "log": out.join(LOG_FILE),
        "last": reports.last(),
    }));
    Ok(())
}

fn cmd_generate(ckpt: &Path, input: &Path, n: usize, seed: u64, out: &Path, invert: bool) -> Result<()> {
    resolved("generate", json!({ "ckpt": ckpt, "in": input, "n": n, "seed": seed, "out": out, "invert": invert }));
    let state = load_checkpoint(ckpt)?;
    let x = load_input(input, state.config.net.image_size, invert)?;
    let images = generate(&state, &x, n, seed)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let p = out.join(format!("gen_{i:04}.png"));
        if invert {
            save_image(&img.inverted(), &p)?;
        } else {
            save_image(img, &p)?;
        }
        written.push(p);
    }
    print_json(&json!({ "outputs": written }));
    Ok(())
}

fn cmd_grad_check(module: Suite, seed: u64) -> Result<()> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    resolved("grad-check", json!({ "step": cfg.step, "tol": cfg.tol, "floor": cfg.floor, "max_coords": cfg.max_coords, "seed": seed }));
    let mut suites: Vec<SuiteReport> = Vec::new();
    if matches!(module, Suite::All | Suite::Losses) {
        suites.push(loss_suite(&cfg)?);
    }
    if matches!(module, Suite::All | Suite::Geometry) {
        suites.push(geometry_suite(&cfg)?);
    }
    let mut ok = true;
    for s in &suites {
        for c in &s.cases {
            println!(
                "{:<6} {:<10} {:<28} max rel err {:.3e}  kinks {}",
                if c.report.passed { "PASS" } else { "FAIL" },
                s.suite,
                c.name,
                c.report.max_rel_err,
                c.report.kink_count()
            );
        }
        ok &= s.passed();
    }
    if !ok {
        bail!("gradient check failed (tolerance {})", cfg.tol);
    }
    Ok(())
}

fn cmd_eval(real: &Path, gen: &Path, bins: usize, seed: u64, size: usize, invert: bool) -> Result<()> {
    resolved("eval", json!({ "real": real, "gen": gen, "bins": bins, "seed": seed, "size": size, "invert": invert }));
    let r = load_image_dir(real, size, invert)?;
    let g = load_image_dir(gen, size, invert)?;
    print_json(&serde_json::to_value(evaluate(&r, &g, bins, seed)?)?);
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(r) = serde_json::from_str::<LossReport>(&text) {
        return Ok(vec![r]);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

/// Newest `ckpt_*.ckpt` in `dir` whose iteration has a logged report.
fn find_checkpoint(dir: &Path, reports: &[LossReport]) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(k) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if reports.iter().any(|r| r.iter == k) && best.as_ref().is_none_or(|(b, _)| k > *b) {
            best = Some((k, p));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| anyhow!("no checkpoint in {} matches a logged iteration; pass --ckpt", dir.display()))
}

fn cmd_losses(report: &Path, ckpt: Option<&Path>, sc: Option<&Path>, pc: Option<&Path>) -> Result<()> {
    let reports = read_reports(report)?;
    let dir = report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let ckpt = match ckpt {
        Some(p) => p.to_path_buf(),
        None => find_checkpoint(dir, &reports)?,
    };
    let run: Option<Value> = fs::read_to_string(dir.join(RUN_FILE)).ok().and_then(|t| serde_json::from_str(&t).ok());
    let from_run = |key: &str| run.as_ref().and_then(|v| v.get(key)).and_then(Value::as_str).map(PathBuf::from);
    let sc = sc.map(Path::to_path_buf).or_else(|| from_run("sc")).ok_or_else(|| anyhow!("--sc not given and no {RUN_FILE}"))?;
    let pc = pc.map(Path::to_path_buf).or_else(|| from_run("pc")).ok_or_else(|| anyhow!("--pc not given and no {RUN_FILE}"))?;
    let invert = run.as_ref().and_then(|v| v.get("invert")).and_then(Value::as_bool).unwrap_or(false);
    resolved("losses", json!({ "report": report, "ckpt": ckpt, "sc": sc, "pc": pc, "invert": invert }));

    let mut state = load_checkpoint(&ckpt)?;
    let logged = reports
        .iter()
        .find(|r| r.iter == state.iteration)
        .ok_or_else(|| anyhow!("{} has no report for iteration {}", report.display(), state.iteration))?;
    let size = state.config.net.image_size;
    let sc_imgs = load_domain(&sc, size, invert, "SC")?;
    let pc_imgs = load_domain(&pc, size, invert, "PC")?;
    let again = train_iteration(&mut state, &sc_imgs, &pc_imgs)?;
    let mut fields = serde_json::Map::new();
    let mut worst: f64 = 0.0;
    for ((name, a), (_, b)) in logged.values().iter().zip(again.values()) {
        worst = worst.max((a - b).abs());
        fields.insert(name.to_string(), json!({ "logged": a, "recomputed": b }));
    }
    let matches = logged == &again;
    print_json(&json!({ "iter": logged.iter, "match": matches, "max_abs_diff": worst, "fields": fields }));
    if !matches {
        bail!("recomputed report for iteration {} differs from the log", logged.iter);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            classes,
            per_class,
            out,
            seed,
            size,
            clean,
        } => cmd_synth(classes, per_class, &out, seed, size, clean),
        Command::Warp {
            input,
            out,
            tps_only,
            affine_only,
            seed,
            n,
        } => cmd_warp(&input, &out, tps_only, affine_only, seed, n),
        Command::Train {
            sc,
            pc,
            out,
            desk_scale,
            config,
            seed,
            until,
            resume,
            no_diversity,
            no_stroke_weight,
            invert,
        } => cmd_train(
            &sc,
            &pc,
            &out,
            desk_scale,
            config.as_deref(),
            seed,
            until,
            resume.as_deref(),
            no_diversity,
            no_stroke_weight,
            invert,
        ),
        Command::Generate {
            ckpt,
            input,
            n,
            seed,
            out,
            invert,
        } => cmd_generate(&ckpt, &input, n, seed, &out, invert),
        Command::GradCheck { module, seed } => cmd_grad_check(module, seed),
        Command::Eval {
            real,
            gen,
            bins,
            seed,
            size,
            invert,
        } => cmd_eval(&real, &gen, bins, seed, size, invert),
        Command::Losses { report, ckpt, sc, pc } => cmd_losses(&report, ckpt.as_deref(), sc.as_deref(), pc.as_deref()),
    }
}

/// `GLYPHFORGE_THREADS` caps the worker pool; 0 means a single thread.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("GLYPHFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("GLYPHFORGE_THREADS={v}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
