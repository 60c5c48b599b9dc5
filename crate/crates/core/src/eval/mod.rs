//! Pixel-space NDB/JSD and a pairwise L1 diversity score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::Image;

pub const MAX_LLOYD_ITERS: usize = 100;
pub const LLOYD_REL_TOL: f64 = 1e-6;
pub const JSD_EPS: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least {need} images, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("K = {0}; at least 2 bins required")]
    BadK(usize),
    #[error("image {index} has {got} pixels, expected {expected}")]
    Dims { index: usize, got: usize, expected: usize },
}

/// K-means bins over flattened images plus the real-set occupancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinModel {
    pub centroids: Vec<Vec<f64>>,
    pub proportions: Vec<f64>,
    pub n_real: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl BinModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    /// Index of the nearest centroid (lowest index on ties) and squared distance.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, x)
    }

    pub fn histogram(&self, images: &[Image]) -> Result<Vec<f64>, EvalError> {
        check_dims(images, self.dim())?;
        let counts = bin_counts(&self.centroids, images);
        let n = images.len() as f64;
        Ok(counts.iter().map(|c| *c as f64 / n).collect())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_dims(images: &[Image], expected: usize) -> Result<(), EvalError> {
    match images.iter().position(|im| im.len() != expected) {
        Some(index) => Err(EvalError::Dims {
            index,
            got: images[index].len(),
            expected,
        }),
        None => Ok(()),
    }
}

fn assign(centroids: &[Vec<f64>], images: &[Image]) -> Vec<(usize, f64)> {
    images.par_iter().map(|im| nearest(centroids, im.data())).collect()
}

fn bin_counts(centroids: &[Vec<f64>], images: &[Image]) -> Vec<usize> {
    let mut counts = vec![0; centroids.len()];
    for (b, _) in assign(centroids, images) {
        counts[b] += 1;
    }
    counts
}

/// k-means++ seeding: first centre uniform, later ones with probability
/// proportional to squared distance. When every remaining distance is zero
/// the next unused index is taken.
fn kmeans_pp(images: &[Image], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = images.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = images.iter().map(|im| sq_dist(im.data(), images[chosen[0]].data())).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        let c = images[next].data();
        for (i, im) in images.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(im.data(), c));
        }
    }
    chosen.into_iter().map(|i| images[i].data().to_vec()).collect()
}

/// Lloyd k-means over flattened pixels, seeded by k-means++.
///
/// Stops after [`MAX_LLOYD_ITERS`] assignment steps or when the relative
/// inertia change falls below [`LLOYD_REL_TOL`]. Empty clusters keep their
/// previous centre. Images are put in a canonical order first, so the
/// result does not depend on how `real` is ordered.
pub fn fit_bins(real: &[Image], k: usize, seed: u64) -> Result<BinModel, EvalError> {
    if k < 2 {
        return Err(EvalError::BadK(k));
    }
    if real.len() < k {
        return Err(EvalError::TooFew {
            need: k,
            got: real.len(),
        });
    }
    let dim = real[0].len();
    check_dims(real, dim)?;
    let mut sorted: Vec<&Image> = real.iter().collect();
    sorted.sort_by(|a, b| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let real: Vec<Image> = sorted.into_iter().cloned().collect();
    let real = real.as_slice();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(real, k, &mut rng);
    let mut history: Vec<f64> = Vec::new();
    let mut labels;
    loop {
        let a = assign(&centroids, real);
        let inertia: f64 = a.iter().map(|(_, d)| d).sum();
        labels = a.into_iter().map(|(b, _)| b).collect::<Vec<_>>();
        let converged = history
            .last()
            .is_some_and(|prev| (prev - inertia).abs() <= LLOYD_REL_TOL * prev.abs().max(f64::MIN_POSITIVE));
        history.push(inertia);
        if converged || history.len() >= MAX_LLOYD_ITERS || inertia == 0.0 {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (im, b) in real.iter().zip(&labels) {
            counts[*b] += 1;
            for (s, v) in sums[*b].iter_mut().zip(im.data()) {
                *s += v;
            }
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if *n > 0 {
                *c = s.into_iter().map(|v| v / *n as f64).collect();
            }
        }
    }
    let mut counts = vec![0usize; k];
    for b in &labels {
        counts[*b] += 1;
    }
    let n = real.len() as f64;
    Ok(BinModel {
        centroids,
        proportions: counts.iter().map(|c| *c as f64 / n).collect(),
        n_real: real.len(),
        inertia_history: history,
    })
}

/// Jensen-Shannon divergence in bits after adding `JSD_EPS` to every bin
/// and renormalizing. Clamped to `[0, 1]`.
pub fn jsd_bits(p: &[f64], q: &[f64]) -> f64 {
    let smooth = |v: &[f64]| {
        let total: f64 = v.iter().map(|x| x + JSD_EPS).sum();
        v.iter().map(|x| (x + JSD_EPS) / total).collect::<Vec<_>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    let mut js = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        js += 0.5 * a * (a / m).log2() + 0.5 * b * (b / m).log2();
    }
    js.clamp(0.0, 1.0)
}

/// Two-sided p-value of the pooled two-proportion z-test. Identical
/// degenerate proportions (pooled variance zero) give 1.
pub fn two_proportion_p_value(p1: f64, n1: usize, p2: f64, n2: usize) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (p1 * n1f + p2 * n2f) / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    if se == 0.0 {
        return if p1 == p2 { 1.0 } else { 0.0 };
    }
    let z = (p1 - p2) / se;
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdbJsd {
    pub ndb: usize,
    pub jsd: f64,
    pub gen_proportions: Vec<f64>,
}

/// Counts bins whose generated share differs significantly from the real
/// share, and the JSD between the two histograms.
pub fn ndb_jsd(model: &BinModel, generated: &[Image], significance: f64) -> Result<NdbJsd, EvalError> {
    if generated.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    let gen = model.histogram(generated)?;
    let ndb = model
        .proportions
        .iter()
        .zip(&gen)
        .filter(|(r, g)| two_proportion_p_value(**r, model.n_real, **g, generated.len()) < significance)
        .count();
    Ok(NdbJsd {
        ndb,
        jsd: jsd_bits(&model.proportions, &gen),
        gen_proportions: gen,
    })
}

/// Mean over unordered pairs of the mean absolute pixel difference.
pub fn pairwise_diversity(images: &[Image]) -> Result<f64, EvalError> {
    if images.len() < 2 {
        return Err(EvalError::TooFew {
            need: 2,
            got: images.len(),
        });
    }
    check_dims(images, images[0].len())?;
    let n = images.len();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| images[i].mean_abs_diff(&images[j]).expect("dims checked"))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ndb: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub jsd: f64,
    pub diversity: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

/// Bins the real set, scores the generated set against it and measures
/// the generated set's diversity.
pub fn evaluate(real: &[Image], generated: &[Image], k: usize, seed: u64) -> Result<EvalResult, EvalError> {
    let model = fit_bins(real, k, seed)?;
    let scores = ndb_jsd(&model, generated, DEFAULT_SIGNIFICANCE)?;
    Ok(EvalResult {
        ndb: scores.ndb,
        k,
        jsd: scores.jsd,
        diversity: pairwise_diversity(generated)?,
        n_real: real.len(),
        n_gen: generated.len(),
    })
}
