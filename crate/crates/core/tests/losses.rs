use glyphforge::autodiff::{Graph, Tensor};
use glyphforge::imagecore::{BinarizeMethod, BinaryMask, Image};
use glyphforge::losses::{
    batch_stroke_weights, cycle_loss, diversity_loss, l1, lsgan_disc, lsgan_gen, rer, select_alpha, snr_loss,
    stroke_weight, weighted_l1, SnrConfig,
};
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

/// `Σ W|a − b| / n + Σ |c − d| / n`, one pixel at a time.
fn cycle_oracle(x_t: &[f64], x_cyc: &[f64], y: &[f64], y_cyc: &[f64], w: &[f64]) -> f64 {
    let mut a = 0.0;
    for i in 0..x_t.len() {
        a += w[i] * (x_cyc[i] - x_t[i]).abs();
    }
    let mut b = 0.0;
    for i in 0..y.len() {
        b += (y_cyc[i] - y[i]).abs();
    }
    a / x_t.len() as f64 + b / y.len() as f64
}

#[test]
fn quarter_ink_at_c2_weighs_six() {
    // 4 of 16 pixels are ink: C·S_bg/S_fg = 2·12/4.
    let bits: Vec<bool> = (0..16).map(|i| i % 4 == 1).collect();
    let w = stroke_weight(&BinaryMask::new(4, 4, bits.clone()).unwrap(), 2.0);
    assert_eq!(w.foreground_weight, 6.0);
    for (v, fg) in w.data.iter().zip(&bits) {
        assert_eq!(*v, if *fg { 6.0 } else { 1.0 });
    }
    assert!(!w.degenerate);
}

#[test]
fn empty_mask_falls_back_to_ones() {
    let w = stroke_weight(&BinaryMask::new(3, 3, vec![false; 9]).unwrap(), 2.0);
    assert!(w.degenerate);
    assert!(w.data.iter().all(|v| *v == 1.0));
}

#[test]
fn batch_weights_binarize_each_sample() {
    // Sample 0: dark left column. Sample 1: blank.
    let mut data = vec![1.0; 32];
    for r in 0..4 {
        data[r * 4] = 0.0;
    }
    let (w, degenerate) = batch_stroke_weights(&t(&[2, 1, 4, 4], data), BinarizeMethod::Fixed(0.5), 2.0).unwrap();
    assert_eq!(degenerate, 1);
    assert_eq!(w.data()[0], 6.0);
    assert_eq!(w.data()[1], 1.0);
    assert!(w.data()[16..].iter().all(|v| *v == 1.0));
    assert!(batch_stroke_weights(&t(&[2, 4, 4], vec![0.0; 32]), BinarizeMethod::Otsu, 2.0).is_err());
}

#[test]
fn alpha_rule_at_the_band() {
    let m = 6.0;
    assert_eq!(select_alpha(-2.0, m), -1.0);
    assert_eq!(select_alpha(0.0, m), 0.0);
    assert_eq!(select_alpha(2.0, m), 1.0);
    let band = 6f64.ln();
    assert_eq!(select_alpha(band, m), 0.0);
    assert_eq!(select_alpha(-band, m), 0.0);
    assert_eq!(select_alpha(band + 1e-9, m), 1.0);
}

#[test]
fn snr_picks_alpha_from_the_batch() {
    // L1 on x is 0.01, on z is 1: RER = ln 100 > ln 6, so α = +1.
    let mut g = Graph::new();
    let x = g.input(t(&[1, 4], vec![0.5; 4])).unwrap();
    let xr = g.input(t(&[1, 4], vec![0.51; 4])).unwrap();
    let z = g.input(t(&[1, 2], vec![0.0, 0.0])).unwrap();
    let zr = g.input(t(&[1, 2], vec![1.0, -1.0])).unwrap();
    let s = snr_loss(&mut g, x, xr, z, zr, SnrConfig::default()).unwrap();
    assert_eq!(s.alpha, 1.0);
    let lx = 0.51f64 - 0.5;
    let expect = lx + 1.0 + (1.0 / lx).ln();
    assert!((g.scalar_value(s.loss) - expect).abs() < 1e-9);
    assert!(SnrConfig::new(1.0).is_err());
}

#[test]
fn lsgan_by_hand() {
    let mut g = Graph::new();
    let fake = g.input(t(&[2], vec![0.2, -0.4])).unwrap();
    let real = g.input(t(&[2], vec![0.7, 1.5])).unwrap();
    let gl = lsgan_gen(&mut g, fake).unwrap();
    let dl = lsgan_disc(&mut g, fake, real).unwrap();
    let e_gen = (0.8f64.powi(2) + 1.4f64.powi(2)) / 2.0;
    let e_disc = 0.5 * (0.04 + 0.16) / 2.0 + 0.5 * (0.09 + 0.25) / 2.0;
    assert!((g.scalar_value(gl) - e_gen).abs() < 1e-12);
    assert!((g.scalar_value(dl) - e_disc).abs() < 1e-12);
}

#[test]
fn mismatched_shapes_error() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[3, 2])).unwrap();
    assert!(l1(&mut g, a, b).is_err());
    assert!(weighted_l1(&mut g, a, a, b).is_err());
}

fn vec01(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cycle_loss_matches_loop(
        x_t in vec01(32), x_cyc in vec01(32), y in vec01(32), y_cyc in vec01(32),
        bits in prop::collection::vec(any::<bool>(), 32),
        c in 1.0f64..4.0,
    ) {
        let mask = BinaryMask::new(4, 8, bits).unwrap();
        let wm = stroke_weight(&mask, c);
        let mut g = Graph::new();
        let sh = [1, 1, 4, 8];
        let v = |g: &mut Graph<f64>, d: &[f64]| g.input(t(&sh, d.to_vec())).unwrap();
        let (a, b, cc, d, w) = (v(&mut g, &x_t), v(&mut g, &x_cyc), v(&mut g, &y), v(&mut g, &y_cyc), v(&mut g, &wm.data));
        let loss = cycle_loss(&mut g, a, b, cc, d, w).unwrap();
        let oracle = cycle_oracle(&x_t, &x_cyc, &y, &y_cyc, &wm.data);
        prop_assert!((g.scalar_value(loss) - oracle).abs() < 1e-10);
    }

    #[test]
    fn stroke_weights_balance_ink_and_background(bits in prop::collection::vec(any::<bool>(), 1..64), c in 1.0f64..5.0) {
        let n = bits.len();
        let mask = BinaryMask::new(1, n, bits.clone()).unwrap();
        let wm = stroke_weight(&mask, c);
        let fg = bits.iter().filter(|b| **b).count();
        prop_assert!(wm.data.iter().all(|v| *v >= 0.0));
        if fg > 0 {
            let ink: f64 = wm.data.iter().zip(&bits).filter(|(_, b)| **b).map(|(v, _)| v).sum();
            // Total ink weight is C times the background pixel count.
            prop_assert!((ink - c * (n - fg) as f64).abs() < 1e-9 * (1.0 + ink));
        }
    }

    #[test]
    fn rer_is_log_ratio(x in vec01(6), xr in vec01(6), z in prop::collection::vec(-2.0f64..2.0, 4), zr in prop::collection::vec(-2.0f64..2.0, 4)) {
        let lx: f64 = x.iter().zip(&xr).map(|(a, b)| (a - b).abs()).sum::<f64>() / 6.0;
        let lz: f64 = z.iter().zip(&zr).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        prop_assume!(lx > 1e-6 && lz > 1e-6);
        let mut g = Graph::new();
        let (a, b) = (g.input(t(&[1, 6], x)).unwrap(), g.input(t(&[1, 6], xr)).unwrap());
        let (c, d) = (g.input(t(&[1, 4], z)).unwrap(), g.input(t(&[1, 4], zr)).unwrap());
        let r = rer(&mut g, a, b, c, d).unwrap();
        prop_assert!((g.scalar_value(r.rer) - (lz / lx).ln()).abs() < 1e-9);
        prop_assert!(!r.clamped);
    }

    #[test]
    fn diversity_is_negative_mean_gap(a in prop::collection::vec(-1.0f64..1.0, 8), b in prop::collection::vec(-1.0f64..1.0, 8)) {
        let expect = -a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / 8.0;
        let mut g = Graph::new();
        let (x, y) = (g.input(t(&[2, 4], a)).unwrap(), g.input(t(&[2, 4], b)).unwrap());
        let d = diversity_loss(&mut g, x, y).unwrap();
        prop_assert!((g.scalar_value(d) - expect).abs() < 1e-12);
    }
}

#[test]
fn otsu_weights_on_a_rendered_stroke() {
    let img = Image::from_fn(8, 8, |r, _| if r == 3 || r == 4 { 0.1 } else { 0.95 }).unwrap();
    let data: Vec<f64> = img.data().to_vec();
    let (w, deg) = batch_stroke_weights(&t(&[1, 1, 8, 8], data), BinarizeMethod::Otsu, 2.0).unwrap();
    assert_eq!(deg, 0);
    assert_eq!(w.data()[3 * 8], 6.0);
    assert_eq!(w.data()[0], 1.0);
}

#[test]
fn minimizing_diversity_loss_spreads_a_toy_predictor() {
    use glyphforge::autodiff::{AdamConfig, AdamState, ParamMap};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (b, d, k) = (4, 6, 5);
    let mut r = |n: usize, s: f64| (0..n).map(|_| s * (rng.random::<f64>() - 0.5)).collect::<Vec<_>>();
    let feat = t(&[b, d], r(b * d, 2.0));
    let z1 = t(&[b, d], r(b * d, 2.0));
    let z2 = t(&[b, d], r(b * d, 2.0));
    let mut params = ParamMap::new();
    params.insert("w".into(), t(&[d, k], r(d * k, 0.2)));
    let mut adam = AdamState::new(AdamConfig::default());
    let mut spread = Vec::new();
    for _ in 0..100 {
        let mut g = Graph::new();
        let w = g.param("w", params["w"].clone()).unwrap();
        let f = g.input(feat.clone()).unwrap();
        let mut theta = |z: &Tensor<f64>| {
            let zv = g.input(z.clone()).unwrap();
            let m = g.add(f, zv).unwrap();
            let h = g.matmul(m, w).unwrap();
            g.tanh(h).unwrap()
        };
        let (t1, t2) = (theta(&z1), theta(&z2));
        let loss = diversity_loss(&mut g, t1, t2).unwrap();
        spread.push(-g.scalar_value(loss));
        let grads = g.backward(loss).unwrap();
        adam.step(&mut params, grads.params(), 1e-3).unwrap();
    }
    assert!(spread.windows(2).all(|p| p[1] > p[0]), "{spread:?}");
}
