use glyphforge::eval::{
    evaluate, fit_bins, jsd_bits, ndb_jsd, pairwise_diversity, two_proportion_p_value, BinModel, EvalError, EvalResult,
};
use glyphforge::imagecore::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn constant(v: f64) -> Image {
    Image::filled(4, 4, v).unwrap()
}

fn random_images(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image::from_fn(4, 4, |_, _| rng.random::<f64>()).unwrap())
        .collect()
}

/// Unsmoothed JSD in bits, written from the definition.
fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    (kl(p, &m) + kl(q, &m)) / 2.0 / std::f64::consts::LN_2
}

#[test]
fn two_constant_clusters_recover_their_values() {
    let mut real = Vec::new();
    for i in 0..10 {
        real.push(constant(0.1 + 0.001 * (i % 3) as f64));
        real.push(constant(0.9 - 0.001 * (i % 2) as f64));
    }
    let m = fit_bins(&real, 2, 0).unwrap();
    // Closed-form cluster means.
    let low: f64 = (0..10).map(|i| 0.1 + 0.001 * (i % 3) as f64).sum::<f64>() / 10.0;
    let high: f64 = (0..10).map(|i| 0.9 - 0.001 * (i % 2) as f64).sum::<f64>() / 10.0;
    let mut got: Vec<f64> = m.centroids.iter().map(|c| c[0]).collect();
    got.sort_by(f64::total_cmp);
    assert!((got[0] - low).abs() < 1e-6, "{got:?}");
    assert!((got[1] - high).abs() < 1e-6, "{got:?}");
    for c in &m.centroids {
        assert!(c.iter().all(|v| (v - c[0]).abs() < 1e-12));
    }
    assert_eq!(m.proportions, vec![0.5, 0.5]);
}

#[test]
fn one_image_per_cluster_has_zero_inertia() {
    let real = random_images(5, 1);
    let m = fit_bins(&real, 5, 3).unwrap();
    assert_eq!(m.inertia(), 0.0);
    assert!((m.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn duplicate_images_still_give_k_centres() {
    let real = vec![constant(0.5); 4];
    let m = fit_bins(&real, 3, 0).unwrap();
    assert_eq!(m.k(), 3);
    assert_eq!(m.inertia(), 0.0);
}

#[test]
fn same_seed_same_centroids() {
    let real = random_images(40, 2);
    assert_eq!(fit_bins(&real, 6, 11).unwrap(), fit_bins(&real, 6, 11).unwrap());
}

#[test]
fn too_few_images_is_an_error() {
    let real = random_images(3, 0);
    assert_eq!(fit_bins(&real, 4, 0), Err(EvalError::TooFew { need: 4, got: 3 }));
    assert_eq!(fit_bins(&real, 1, 0), Err(EvalError::BadK(1)));
}

#[test]
fn real_set_against_itself() {
    let real = random_images(60, 5);
    let m = fit_bins(&real, 5, 0).unwrap();
    let r = ndb_jsd(&m, &real, 0.05).unwrap();
    assert_eq!(r.ndb, 0);
    assert!(r.jsd <= 1e-9);
}

#[test]
fn one_bin_versus_uniform_fifty() {
    let p = vec![1.0 / 50.0; 50];
    let mut q = vec![0.0; 50];
    q[0] = 1.0;
    let oracle = jsd_oracle(&p, &q);
    assert!(oracle >= 0.9, "{oracle}");
    assert!((jsd_bits(&p, &q) - oracle).abs() < 1e-9);
}

#[test]
fn disjoint_single_bins_are_one_bit_apart() {
    assert!((jsd_bits(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-9);
    assert!((jsd_oracle(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
}

#[test]
fn z_test_matches_hand_computation() {
    // p1 = 0.3 of 100, p2 = 0.5 of 100: pooled 0.4, se = sqrt(0.4*0.6*0.02).
    let z: f64 = 0.2 / (0.4f64 * 0.6 * 0.02).sqrt();
    // Two-sided normal tail.
    let expected = libm::erfc(z / 2f64.sqrt());
    assert!((two_proportion_p_value(0.3, 100, 0.5, 100) - expected).abs() < 1e-15);
    assert!(expected < 0.01);
    assert_eq!(two_proportion_p_value(0.0, 10, 0.0, 30), 1.0);
}

#[test]
fn ndb_counts_shifted_bins() {
    // Real: bins 0 and 1 evenly. Generated: everything in bin 0.
    let model = BinModel {
        centroids: vec![vec![0.0; 16], vec![1.0; 16]],
        proportions: vec![0.5, 0.5],
        n_real: 200,
        inertia_history: vec![0.0],
    };
    let gen = vec![constant(0.05); 200];
    let r = ndb_jsd(&model, &gen, 0.05).unwrap();
    assert_eq!(r.ndb, 2);
    assert_eq!(r.gen_proportions, vec![1.0, 0.0]);
    assert!((r.jsd - jsd_oracle(&[0.5, 0.5], &[1.0, 0.0])).abs() < 1e-9);
}

#[test]
fn diversity_examples() {
    assert_eq!(pairwise_diversity(&[constant(0.3), constant(0.3)]).unwrap(), 0.0);
    assert_eq!(pairwise_diversity(&[constant(0.0), constant(1.0)]).unwrap(), 1.0);
    let t = random_images(3, 9);
    let mut brute = 0.0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let mut s = 0.0;
        for k in 0..16 {
            s += (t[i].data()[k] - t[j].data()[k]).abs();
        }
        brute += s / 16.0;
    }
    assert!((pairwise_diversity(&t).unwrap() - brute / 3.0).abs() < 1e-12);
    assert!(matches!(pairwise_diversity(&t[..1]), Err(EvalError::TooFew { need: 2, got: 1 })));
}

#[test]
fn result_json_keys() {
    let real = random_images(20, 1);
    let gen = random_images(10, 2);
    let r = evaluate(&real, &gen, 4, 0).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["K", "diversity", "jsd", "n_gen", "n_real", "ndb"]);
    let back: EvalResult = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_in_range_and_order_free(seed in any::<u64>(), k in 2usize..6, n_gen in 1usize..25, rot in 0usize..25) {
        let real = random_images(30, seed);
        let gen = random_images(n_gen, seed ^ 0xabc);
        let m = fit_bins(&real, k, seed).unwrap();
        let a = ndb_jsd(&m, &gen, 0.05).unwrap();
        prop_assert!(a.ndb <= k);
        prop_assert!((0.0..=1.0).contains(&a.jsd));

        let mut gen2 = gen.clone();
        gen2.rotate_left(rot % n_gen);
        gen2.reverse();
        let b = ndb_jsd(&m, &gen2, 0.05).unwrap();
        prop_assert_eq!(a.ndb, b.ndb);
        prop_assert!((a.jsd - b.jsd).abs() < 1e-15);

        let mut real2 = real.clone();
        real2.rotate_left(rot % 30);
        real2.reverse();
        let m2 = fit_bins(&real2, k, seed).unwrap();
        prop_assert_eq!(&m2, &m);
        prop_assert_eq!(ndb_jsd(&m2, &gen, 0.05).unwrap(), a);
    }

    #[test]
    fn lloyd_inertia_never_rises(seed in any::<u64>(), k in 2usize..8) {
        let real = random_images(40, seed);
        let m = fit_bins(&real, k, seed).unwrap();
        prop_assert!(m.inertia_history.len() <= 100);
        for w in m.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
    }

    #[test]
    fn jsd_symmetric_and_bounded(p in prop::collection::vec(0.0f64..1.0, 2..20)) {
        let n = p.len();
        let s: f64 = p.iter().sum::<f64>() + 1e-9;
        let p: Vec<f64> = p.iter().map(|v| (v + 1e-9 / n as f64) / s).collect();
        let q: Vec<f64> = p.iter().rev().cloned().collect();
        let a = jsd_bits(&p, &q);
        prop_assert!((a - jsd_bits(&q, &p)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - jsd_oracle(&p, &q)).abs() < 1e-6);
    }
}
