//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. The three seeded desk-scale runs dominate the
//! runtime (several minutes each on one core).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use glyphforge::autodiff::{Graph, Tensor};
use glyphforge::data::load_image_dir;
use glyphforge::eval::{fit_bins, jsd_bits, ndb_jsd, BinModel, DEFAULT_SIGNIFICANCE};
use glyphforge::geometry::{control_grid, solve_tps, warp_image, Border, WarpMode, WarpParams};
use glyphforge::imagecore::{load_image, BinaryMask, Image};
use glyphforge::losses::{cycle_loss, rer, select_alpha, snr_loss, stroke_weight, SnrConfig};
use glyphforge::training::{foreground_cycle_error, generation_diversity, load_checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const GRAD_CHECK_BUDGET: Duration = Duration::from_secs(120);
const TPS_TRIALS: usize = 100;
const TPS_TOL: f64 = 1e-6;
const IDENTITY_IMAGES: usize = 100;
const IDENTITY_TOL: f64 = 1e-6;
const CYCLE_ORACLE_TOL: f64 = 1e-10;
const SNR_M: f64 = 6.0;
const DESK_SEED: u64 = 1;
const DESK_PER_CLASS: usize = 100;
const RER_WINDOW: usize = 500;
const RER_IN_BAND_FRACTION: f64 = 0.9;
const DESK_BUDGET: Duration = Duration::from_secs(20 * 60);
const GENERATIONS_PER_INPUT: usize = 8;
const DIVERSITY_INPUTS: usize = 16;
const DIVERSITY_RATIO: f64 = 2.0;
const JSD_IDENTICAL_TOL: f64 = 1e-9;
const JSD_DISJOINT_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_glyphforge"));
    c.env("GLYPHFORGE_THREADS", "0");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "glyphforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let out = run(&["grad-check", "--module", "all"]);
    let took = t.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let cases = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count();
    let failed = text.lines().filter(|l| l.starts_with("FAIL")).count();
    outcome(
        out.status.success() && failed == 0 && cases > 0 && took <= GRAD_CHECK_BUDGET,
        format!("{cases} objectives, {failed} failed, tol 1e-3 at step 1e-4, {:.1}s (budget 120s)", took.as_secs_f64()),
    )
}

/// `U(r) = r² ln r²` summed with the affine part, written out directly.
fn tps_eval(centers: &[[f64; 2]], weights: &[[f64; 2]], affine: &[[f64; 2]; 3], q: [f64; 2]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for d in 0..2 {
        out[d] = affine[0][d] + affine[1][d] * q[0] + affine[2][d] * q[1];
        for (c, w) in centers.iter().zip(weights) {
            let r2 = (q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2);
            if r2 > 0.0 {
                out[d] += w[d] * r2 * r2.ln();
            }
        }
    }
    out
}

fn c2_tps() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..TPS_TRIALS {
        let n = 2 + trial % 4;
        let src = control_grid(n);
        let dst: Vec<[f64; 2]> = src
            .iter()
            .map(|s| [s[0] + rng.random_range(-0.2..=0.2), s[1] + rng.random_range(-0.2..=0.2)])
            .collect();
        let c = solve_tps(&src, &dst, 0.0).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let got = tps_eval(&c.centers, &c.weights, &c.affine, *s);
            worst = worst.max((got[0] - d[0]).abs()).max((got[1] - d[1]).abs());
        }
    }
    outcome(worst <= TPS_TOL, format!("{TPS_TRIALS} fits, max target error {worst:.2e} (tol 1e-6)"))
}

fn c3_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..IDENTITY_IMAGES {
        let (h, w) = (rng.random_range(8..65), rng.random_range(8..65));
        let img = Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
        let params = WarpParams::identity(2 + i % 4).unwrap();
        for mode in [WarpMode::Combined, WarpMode::TpsOnly, WarpMode::AffineOnly] {
            let (out, _) = warp_image(&img, &params, mode, Border::default()).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(
        worst <= IDENTITY_TOL,
        format!("{IDENTITY_IMAGES} images x 3 modes, max pixel error {worst:.2e} (tol 1e-6)"),
    )
}

fn c4_stroke_weight() -> Outcome {
    // 32x32 ink square on a 64x64 canvas: S_fg = 1024.
    let bits: Vec<bool> = (0..64 * 64).map(|i| (16..48).contains(&(i / 64)) && (16..48).contains(&(i % 64))).collect();
    let mask = BinaryMask::new(64, 64, bits).unwrap();
    let wm = stroke_weight(&mask, 2.0);
    let exact = mask.foreground_count() == 1024 && wm.foreground_weight == 6.0;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = 2 * 64 * 64;
        let mut r = |k: usize| (0..k).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
        let (x_t, x_cyc, y, y_cyc) = (r(n), r(n), r(n), r(n));
        let w: Vec<f64> = wm.data.iter().chain(&wm.data).copied().collect();
        let mut brute_a = 0.0;
        let mut brute_b = 0.0;
        for i in 0..n {
            brute_a += w[i] * (x_cyc[i] - x_t[i]).abs();
            brute_b += (y_cyc[i] - y[i]).abs();
        }
        let brute = brute_a / n as f64 + brute_b / n as f64;
        let mut g = Graph::new();
        let shape = [2, 1, 64, 64];
        let mut input = |d: Vec<f64>| g.input(Tensor::new(&shape, d).unwrap()).unwrap();
        let (a, b, c, d, wv) = (input(x_t), input(x_cyc), input(y), input(y_cyc), input(w));
        let loss = cycle_loss(&mut g, a, b, c, d, wv).unwrap();
        worst = worst.max((g.scalar_value(loss) - brute).abs());
    }
    outcome(
        exact && worst <= CYCLE_ORACLE_TOL,
        format!(
            "S_fg {} C 2 -> weight {} (expect exactly 6.0); weighted cycle vs loop max diff {worst:.2e} (tol 1e-10)",
            mask.foreground_count(),
            wm.foreground_weight
        ),
    )
}

fn c5_alpha() -> Outcome {
    let mut got = Vec::new();
    let mut rers = Vec::new();
    for target in [-2.0f64, 0.0, 2.0] {
        // L1(x, x_rec) = 0.1, L1(z, z_rec) = 0.1·e^target.
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 4], vec![0.5; 8]).unwrap()).unwrap();
        let xr = g.input(Tensor::new(&[2, 4], vec![0.6; 8]).unwrap()).unwrap();
        let z = g.input(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap()).unwrap();
        let zr = g.input(Tensor::new(&[2, 3], vec![0.1 * target.exp(); 6]).unwrap()).unwrap();
        let s = snr_loss(&mut g, x, xr, z, zr, SnrConfig { m: SNR_M }).unwrap();
        let r = rer(&mut g, x, xr, z, zr).unwrap();
        rers.push(g.scalar_value(r.rer));
        got.push(s.alpha);
        assert_eq!(s.alpha, select_alpha(g.scalar_value(r.rer), SNR_M));
    }
    let rer_ok = rers.iter().zip([-2.0, 0.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-9);
    outcome(
        rer_ok && got == [-1.0, 0.0, 1.0],
        format!("RER {rers:.3?} -> alpha {got:?} (band ±ln 6 = ±{:.4})", SNR_M.ln()),
    )
}

struct DeskRun {
    dir: PathBuf,
    took: Duration,
}

fn desk_train(root: &Path, name: &str, extra: &[&str]) -> DeskRun {
    let dir = root.join(name);
    let seed = DESK_SEED.to_string();
    let corpus = root.join("corpus");
    let (sc, pc) = (corpus.join("sc"), corpus.join("pc"));
    let mut args = vec!["train", "--sc", p(&sc), "--pc", p(&pc), "--out", p(&dir), "--desk-scale", "--seed", &seed];
    args.extend_from_slice(extra);
    let t = Instant::now();
    ok(&args);
    DeskRun { dir, took: t.elapsed() }
}

fn read_log(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn sc_inputs(root: &Path, n: usize) -> Vec<Image> {
    let all = load_image_dir(root.join("corpus").join("sc"), 64, false).unwrap();
    // Spread across both classes.
    let step = (all.len() / n).max(1);
    all.into_iter().step_by(step).take(n).collect()
}

fn c6_rer_band(base: &DeskRun) -> Outcome {
    let log = read_log(&base.dir);
    let band = SNR_M.ln();
    let tail: Vec<f64> = log.iter().rev().take(RER_WINDOW).map(|r| r["RER"].as_f64().unwrap()).collect();
    let inside = tail.iter().filter(|r| r.abs() <= band).count();
    let frac = inside as f64 / tail.len() as f64;
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    outcome(
        log.len() == 2000 && tail.len() == RER_WINDOW && frac >= RER_IN_BAND_FRACTION && base.took <= DESK_BUDGET,
        format!(
            "{} iterations in {:.0}s; {inside}/{} of the last 500 within ±{band:.4} ({:.1}%, need 90%); RER range [{lo:.3}, {hi:.3}]",
            log.len(),
            base.took.as_secs_f64(),
            tail.len(),
            100.0 * frac
        ),
    )
}

fn c7_diversity(root: &Path, base: &DeskRun, nodiv: &DeskRun) -> Outcome {
    let inputs = sc_inputs(root, DIVERSITY_INPUTS);
    let a = load_checkpoint(base.dir.join("final.ckpt")).unwrap();
    let b = load_checkpoint(nodiv.dir.join("final.ckpt")).unwrap();
    let with = generation_diversity(&a, &inputs, GENERATIONS_PER_INPUT, 0).unwrap();
    let without = generation_diversity(&b, &inputs, GENERATIONS_PER_INPUT, 0).unwrap();
    let ratio = with / without;
    outcome(
        ratio >= DIVERSITY_RATIO,
        format!("diversity with L_div {with:.5}, without {without:.5}, ratio {ratio:.2} (need >= 2)"),
    )
}

fn c8_stroke_effect(root: &Path, base: &DeskRun, now: &DeskRun) -> Outcome {
    let inputs = load_image_dir(root.join("corpus").join("sc"), 64, false).unwrap();
    let a = load_checkpoint(base.dir.join("final.ckpt")).unwrap();
    let b = load_checkpoint(now.dir.join("final.ckpt")).unwrap();
    let with = foreground_cycle_error(&a, &inputs, 0).unwrap();
    let without = foreground_cycle_error(&b, &inputs, 0).unwrap();
    outcome(
        with < without,
        format!("foreground cycle L1 with W {with:.5}, with W=1 {without:.5} (need strictly lower)"),
    )
}

fn c9_ndb_jsd(root: &Path) -> Outcome {
    let real = load_image_dir(root.join("corpus").join("sc"), 64, false).unwrap();
    let model = fit_bins(&real, 50, 0).unwrap();
    let same = ndb_jsd(&model, &real, DEFAULT_SIGNIFICANCE).unwrap();
    let one_bin = BinModel {
        centroids: vec![vec![0.0; 16], vec![1.0; 16]],
        proportions: vec![1.0, 0.0],
        n_real: 10,
        inertia_history: vec![0.0],
    };
    let far = vec![Image::filled(4, 4, 1.0).unwrap(); 10];
    let disjoint = ndb_jsd(&one_bin, &far, DEFAULT_SIGNIFICANCE).unwrap();
    let direct = jsd_bits(&[1.0, 0.0], &[0.0, 1.0]);
    let cli = run(&["eval", "--real", p(&root.join("corpus").join("sc")), "--gen", p(&root.join("corpus").join("sc")), "--seed", "0"]);
    let cli_v: Value = serde_json::from_slice(&cli.stdout).unwrap_or(Value::Null);
    let pass = same.ndb == 0
        && same.jsd <= JSD_IDENTICAL_TOL
        && (disjoint.jsd - 1.0).abs() <= JSD_DISJOINT_TOL
        && (direct - 1.0).abs() <= JSD_DISJOINT_TOL
        && cli.status.success()
        && cli_v["ndb"] == 0
        && cli_v["jsd"].as_f64().is_some_and(|j| j <= JSD_IDENTICAL_TOL);
    outcome(
        pass,
        format!(
            "identical: NDB {} JSD {:.1e} (cli NDB {} JSD {}); disjoint single bins: JSD {:.12} bits",
            same.ndb, same.jsd, cli_v["ndb"], cli_v["jsd"], disjoint.jsd
        ),
    )
}

fn c10_determinism(root: &Path) -> Outcome {
    let d = root.join("det");
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |what: &str, same: bool| {
        if !same {
            notes.push(format!("{what} differs"));
        }
        pass &= same;
    };

    for tag in ["a", "b"] {
        ok(&["synth", "--classes", "2", "--per-class", "6", "--out", p(&d.join(format!("syn_{tag}"))), "--seed", "5", "--size", "16"]);
    }
    let syn = |tag: &str| {
        let dir = d.join(format!("syn_{tag}"));
        let mut v: Vec<Vec<u8>> = Vec::new();
        for sub in ["sc", "pc"] {
            for img in load_image_dir(dir.join(sub), 16, false).unwrap() {
                v.push(img.data().iter().map(|x| (x * 255.0).round() as u8).collect());
            }
        }
        v
    };
    check("synth", syn("a") == syn("b"));

    let glyph = d.join("syn_a").join("sc").join("class_00").join("0000.png");
    let warp = |out: &str| {
        ok(&["warp", "--in", p(&glyph), "--out", p(&d.join(out)), "--seed", "9", "--n", "3"]);
        fs::read(d.join(out)).unwrap()
    };
    check("warp", warp("w1.png") == warp("w2.png"));
    let tps = {
        ok(&["warp", "--in", p(&glyph), "--out", p(&d.join("w3.png")), "--seed", "9", "--n", "3", "--tps-only"]);
        fs::read(d.join("w3.png")).unwrap()
    };
    check("warp ablation differs from combined", tps != warp("w1.png"));

    let cfg = d.join("tiny.json");
    fs::write(
        &cfg,
        r#"{"batch_size":4,"constant_iters":10,"decay_iters":10,"checkpoint_every":5,
            "net":{"image_size":16,"grid_n":3,"hidden":24,"channel_mult":0.25,"ttg_gen_width":8,"disc_width":8}}"#,
    )
    .unwrap();
    let (sc, pc) = (d.join("syn_a").join("sc"), d.join("syn_a").join("pc"));
    let train = |out: &str, extra: &[&str]| {
        let dir = d.join(out);
        let mut args = vec!["train", "--sc", p(&sc), "--pc", p(&pc), "--out", p(&dir), "--config", p(&cfg), "--seed", "3"];
        args.extend_from_slice(extra);
        ok(&args);
    };
    train("t1", &[]);
    train("t2", &[]);
    let bytes = |f: PathBuf| fs::read(f).unwrap();
    check("train checkpoint", bytes(d.join("t1").join("final.ckpt")) == bytes(d.join("t2").join("final.ckpt")));
    check("train log", bytes(d.join("t1").join("train_log.jsonl")) == bytes(d.join("t2").join("train_log.jsonl")));

    // Resume at iteration 10 and run to 20 against the uninterrupted run.
    let half = d.join("t1").join("ckpt_000010.ckpt");
    ok(&["train", "--sc", p(&sc), "--pc", p(&pc), "--out", p(&d.join("t3")), "--resume", p(&half)]);
    check("resumed checkpoint", bytes(d.join("t3").join("final.ckpt")) == bytes(d.join("t1").join("final.ckpt")));
    let tail: Vec<String> = fs::read_to_string(d.join("t1").join("train_log.jsonl")).unwrap().lines().skip(10).map(String::from).collect();
    let resumed: Vec<String> = fs::read_to_string(d.join("t3").join("train_log.jsonl")).unwrap().lines().map(String::from).collect();
    check("resumed log", tail == resumed);

    let audit = run(&["losses", "--report", p(&d.join("t1").join("train_log.jsonl"))]);
    check("losses audit", audit.status.success());

    let ckpt = d.join("t1").join("final.ckpt");
    let gen = |out: &str| {
        ok(&["generate", "--ckpt", p(&ckpt), "--in", p(&glyph), "--n", "4", "--seed", "2", "--out", p(&d.join(out))]);
        (0..4).map(|i| bytes(d.join(out).join(format!("gen_{i:04}.png")))).collect::<Vec<_>>()
    };
    check("generate", gen("g1") == gen("g2"));

    let eval = || ok(&["eval", "--real", p(&sc), "--gen", p(&d.join("g1")), "--bins", "4", "--seed", "1", "--size", "16"]).stdout;
    check("eval", eval() == eval());
    let gc = || ok(&["grad-check", "--module", "geometry"]).stdout;
    check("grad-check", gc() == gc());

    let usage = run(&["train", "--no-such-flag"]).status.code();
    let runtime = run(&["eval", "--real", p(&d.join("missing")), "--gen", p(&d.join("g1"))]).status.code();
    check("exit codes", usage == Some(2) && runtime == Some(1));

    let detail = if notes.is_empty() {
        "synth, warp, train, resume 10->20 (bitwise), losses audit, generate, eval, grad-check repeat exactly; exit codes 2/1".to_string()
    } else {
        notes.join("; ")
    };
    outcome(pass, detail)
}

fn c11_smoke(root: &Path, base: &DeskRun) -> Outcome {
    let log = read_log(&base.dir);
    let keys = ["L_Gg", "L_Dg", "L_GXY_GYX", "L_DY_DX", "L_snr", "RER", "alpha", "L_div", "L_sacyc"];
    let finite = log.iter().all(|r| keys.iter().all(|k| r[*k].as_f64().is_some_and(f64::is_finite)));
    let glyph = root.join("corpus").join("sc").join("class_01").join("0003.png");
    let gen_dir = root.join("smoke_gen");
    ok(&[
        "generate",
        "--ckpt",
        p(&base.dir.join("final.ckpt")),
        "--in",
        p(&glyph),
        "--n",
        "8",
        "--seed",
        "0",
        "--out",
        p(&gen_dir),
    ]);
    let gens: Vec<Image> = (0..8).map(|i| load_image(gen_dir.join(format!("gen_{i:04}.png"))).unwrap()).collect();
    let in_range = gens.iter().all(|g| g.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let ev = run(&["eval", "--real", p(&root.join("corpus").join("pc")), "--gen", p(&gen_dir), "--bins", "4", "--seed", "0"]);
    let v: Value = serde_json::from_slice(&ev.stdout).unwrap_or(Value::Null);
    let eval_ok = ev.status.success() && v["jsd"].as_f64().is_some_and(f64::is_finite) && v["n_gen"] == 8;
    outcome(
        finite && in_range && eval_ok,
        format!(
            "synth -> train --desk-scale ({} logged iterations, all finite: {finite}) -> generate 8 (pixels in [0,1]: {in_range}) -> eval (ndb {}, jsd {})",
            log.len(),
            v["ndb"],
            v["jsd"]
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "gradient oracle", c1_gradients());
    report(2, "TPS exactness", c2_tps());
    report(3, "identity warp", c3_identity());
    report(4, "stroke weights", c4_stroke_weight());
    report(5, "alpha rule", c5_alpha());

    let seed = DESK_SEED.to_string();
    let per_class = DESK_PER_CLASS.to_string();
    ok(&["synth", "--classes", "2", "--per-class", &per_class, "--out", p(&root.join("corpus")), "--seed", &seed, "--size", "64"]);
    let base = desk_train(root, "base", &[]);
    let nodiv = desk_train(root, "nodiv", &["--no-diversity"]);
    let now = desk_train(root, "plain_cycle", &["--no-stroke-weight"]);

    report(6, "RER band", c6_rer_band(&base));
    report(7, "diversity effect", c7_diversity(root, &base, &nodiv));
    report(8, "stroke-aware effect", c8_stroke_effect(root, &base, &now));
    report(9, "NDB/JSD sanity", c9_ndb_jsd(root));
    report(10, "determinism and persistence", c10_determinism(root));
    report(11, "end-to-end smoke", c11_smoke(root, &base));

    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
