//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{AutodiffError, Graph, Parameterized, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates probed per parameter tensor (all when the tensor is smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-3,
            floor: 1e-6,
            max_coords: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Coordinates whose probes leave the smooth piece of the base point
    /// (some ReLU, pooling winner, `|x|` sign or sampling cell flips);
    /// finite differences say nothing there, so they are excluded.
    pub kinks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn kink_count(&self) -> usize {
        self.params.iter().map(|p| p.kinks.len()).sum()
    }
}

fn eval<M>(model: &M, f: &mut impl FnMut(&M) -> Result<(Graph<f64>, Var), AutodiffError>) -> Result<(f64, u64), AutodiffError> {
    let (g, loss) = f(model)?;
    let v = g.scalar_value(loss);
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite {
            op: "objective",
            stage: "grad check",
        });
    }
    Ok((v, g.branch_signature()))
}

fn set_coord<M: Parameterized<f64>>(model: &mut M, name: &str, idx: usize, value: f64) {
    model.visit_params_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[idx] = value;
        }
    });
}

/// Compares `backward` against central differences for a random subset of
/// coordinates of every parameter of `model`. `f` must rebuild the
/// objective from the model's current parameter values.
pub fn grad_check<M: Parameterized<f64>>(
    model: &mut M,
    mut f: impl FnMut(&M) -> Result<(Graph<f64>, Var), AutodiffError>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError> {
    let (graph, loss) = f(model)?;
    let base = graph.scalar_value(loss);
    if !base.is_finite() {
        return Err(AutodiffError::NonFinite {
            op: "objective",
            stage: "grad check",
        });
    }
    let base_sig = graph.branch_signature();
    let grads = graph.backward(loss)?;
    drop(graph);

    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |n, t| entries.push((n.to_string(), t.data().to_vec())));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::with_capacity(entries.len());
    for (name, values) in entries {
        let n = values.len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = grads.param(&name).map(|t| t.data().to_vec());
        let mut check = ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            kinks: Vec::new(),
        };
        for idx in coords {
            let orig = values[idx];
            set_coord(model, &name, idx, orig + cfg.step);
            let fp = eval(model, &mut f);
            set_coord(model, &name, idx, orig - cfg.step);
            let fm = eval(model, &mut f);
            set_coord(model, &name, idx, orig);
            let ((fp, sp), (fm, sm)) = (fp?, fm?);
            if sp != base_sig || sm != base_sig {
                check.kinks.push(idx);
                continue;
            }
            let central = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.as_ref().map_or(0.0, |g| g[idx]);
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(cfg.floor);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = idx;
            }
        }
        params.push(check);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= cfg.tol,
        max_rel_err,
        tol: cfg.tol,
        params,
    })
}
