//! Thin-plate spline fitting with kernel `U(r) = r^2 log r^2`, `U(0) = 0`.

use crate::autodiff::Scalar;

use super::linalg::Lu;
use super::GeometryError;

#[inline]
pub(crate) fn tps_kernel(dx: f64, dy: f64) -> f64 {
    let r2 = dx * dx + dy * dy;
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

#[inline]
fn tps_kernel_t<T: Scalar>(dx: T, dy: T) -> (T, T) {
    // (U, dU/dr2 * 2) so that dU/dx = dx * second
    let r2 = dx * dx + dy * dy;
    if r2 == T::zero() {
        (T::zero(), T::zero())
    } else {
        let l = r2.ln();
        (r2 * l, T::lit(2.0) * (l + T::one()))
    }
}

/// Fitted interpolant: per output coordinate, `n` kernel weights plus the
/// affine terms `(a0, a1, a2)` of `a0 + a1 x + a2 y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsCoefficients {
    pub centers: Vec<[f64; 2]>,
    pub weights: Vec<[f64; 2]>,
    pub affine: [[f64; 2]; 3],
}

impl TpsCoefficients {
    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let [a0, a1, a2] = self.affine;
        let mut out = [0, 1].map(|d| a0[d] + a1[d] * p[0] + a2[d] * p[1]);
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let u = tps_kernel(p[0] - c[0], p[1] - c[1]);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }
}

/// LU factorization of the bordered TPS system `[[K + λI, P], [Pᵀ, 0]]`.
fn factor_system(src: &[[f64; 2]], regularization: f64) -> Result<Lu, GeometryError> {
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::InvalidInput(format!(
            "TPS needs at least 3 control points, got {n}"
        )));
    }
    if regularization < 0.0 || !regularization.is_finite() {
        return Err(GeometryError::InvalidInput(format!(
            "regularization {regularization} must be finite and >= 0"
        )));
    }
    for i in 0..n {
        if !(src[i][0].is_finite() && src[i][1].is_finite()) {
            return Err(GeometryError::InvalidInput(format!("control point {i} not finite")));
        }
        for j in 0..i {
            if src[i] == src[j] {
                return Err(GeometryError::InvalidInput(format!(
                    "control points {j} and {i} coincide"
                )));
            }
        }
    }
    let m = n + 3;
    let mut a = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            a[i * m + j] = tps_kernel(src[i][0] - src[j][0], src[i][1] - src[j][1]);
        }
        a[i * m + i] += regularization;
        let p = [1.0, src[i][0], src[i][1]];
        for (k, v) in p.iter().enumerate() {
            a[i * m + n + k] = *v;
            a[(n + k) * m + i] = *v;
        }
    }
    Lu::factor(m, a).ok_or(GeometryError::Singular)
}

/// Fits the thin-plate interpolant taking `control_src[i]` to `control_dst[i]`.
pub fn solve_tps(
    control_src: &[[f64; 2]],
    control_dst: &[[f64; 2]],
    regularization: f64,
) -> Result<TpsCoefficients, GeometryError> {
    if control_src.len() != control_dst.len() {
        return Err(GeometryError::InvalidInput(format!(
            "{} source vs {} target control points",
            control_src.len(),
            control_dst.len()
        )));
    }
    let lu = factor_system(control_src, regularization)?;
    let n = control_src.len();
    let mut weights = vec![[0.0; 2]; n];
    let mut affine = [[0.0; 2]; 3];
    for d in 0..2 {
        let mut rhs = vec![0.0; n + 3];
        for (r, p) in rhs.iter_mut().zip(control_dst) {
            *r = p[d];
        }
        let sol = lu.solve(&rhs);
        for i in 0..n {
            weights[i][d] = sol[i];
        }
        for k in 0..3 {
            affine[k][d] = sol[n + k];
        }
    }
    Ok(TpsCoefficients {
        centers: control_src.to_vec(),
        weights,
        affine,
    })
}

/// Regular `n x n` control grid covering `[-1, 1]^2`, row-major (y outer).
pub fn control_grid(n: usize) -> Vec<[f64; 2]> {
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    (0..n * n).map(|k| [coord(k % n), coord(k / n)]).collect()
}

/// Precomputed linear map from control-point displacements to TPS
/// coefficients for a fixed regular control grid.
///
/// With `S` = the first `n` columns of the inverse bordered system, the
/// displacement coefficients are `S · offsets`, so the warp is linear in the
/// offsets and the grid stays differentiable.
#[derive(Debug, Clone)]
pub struct TpsBasis<T> {
    grid_n: usize,
    centers: Vec<[T; 2]>,
    /// `(n + 3) x n`, row-major.
    solve: Vec<T>,
}

impl<T: Scalar> TpsBasis<T> {
    pub fn new(grid_n: usize, regularization: f64) -> Result<Self, GeometryError> {
        if grid_n < 2 {
            return Err(GeometryError::InvalidInput(format!("control grid N = {grid_n} < 2")));
        }
        let src = control_grid(grid_n);
        let lu = factor_system(&src, regularization)?;
        let n = src.len();
        let m = n + 3;
        let mut solve = vec![T::zero(); m * n];
        for j in 0..n {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let col = lu.solve(&e);
            for i in 0..m {
                solve[i * n + j] = T::lit(col[i]);
            }
        }
        Ok(Self {
            grid_n,
            centers: src.iter().map(|p| [T::lit(p[0]), T::lit(p[1])]).collect(),
            solve,
        })
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn num_points(&self) -> usize {
        self.centers.len()
    }

    /// `(n + 3) x 2` coefficients from interleaved offsets `[dx0, dy0, ...]`.
    pub(crate) fn coefficients(&self, offsets: &[T]) -> Vec<[T; 2]> {
        let n = self.num_points();
        (0..n + 3)
            .map(|i| {
                let row = &self.solve[i * n..(i + 1) * n];
                let mut acc = [T::zero(); 2];
                for (k, s) in row.iter().enumerate() {
                    acc[0] += *s * offsets[2 * k];
                    acc[1] += *s * offsets[2 * k + 1];
                }
                acc
            })
            .collect()
    }

    /// Displacement at `q` given coefficients; also returns the Jacobian
    /// `[[dDx/dqx, dDx/dqy], [dDy/dqx, dDy/dqy]]` when requested.
    #[inline]
    pub(crate) fn displace(&self, coeffs: &[[T; 2]], q: [T; 2], want_jac: bool) -> ([T; 2], [[T; 2]; 2]) {
        let n = self.num_points();
        let mut d = [
            coeffs[n][0] + coeffs[n + 1][0] * q[0] + coeffs[n + 2][0] * q[1],
            coeffs[n][1] + coeffs[n + 1][1] * q[0] + coeffs[n + 2][1] * q[1],
        ];
        let mut jac = [[coeffs[n + 1][0], coeffs[n + 2][0]], [coeffs[n + 1][1], coeffs[n + 2][1]]];
        for (c, w) in self.centers.iter().zip(coeffs) {
            let (dx, dy) = (q[0] - c[0], q[1] - c[1]);
            let (u, du) = tps_kernel_t(dx, dy);
            d[0] += w[0] * u;
            d[1] += w[1] * u;
            if want_jac {
                let (gx, gy) = (du * dx, du * dy);
                jac[0][0] += w[0] * gx;
                jac[0][1] += w[0] * gy;
                jac[1][0] += w[1] * gx;
                jac[1][1] += w[1] * gy;
            }
        }
        (d, jac)
    }

    /// Accumulates `phi(q) ⊗ g` where `phi = [U_1..U_n, 1, qx, qy]`.
    #[inline]
    pub(crate) fn accumulate_phi(&self, q: [T; 2], g: [T; 2], acc: &mut [[T; 2]]) {
        let n = self.num_points();
        for (c, a) in self.centers.iter().zip(acc.iter_mut()) {
            let (u, _) = tps_kernel_t(q[0] - c[0], q[1] - c[1]);
            a[0] += u * g[0];
            a[1] += u * g[1];
        }
        acc[n][0] += g[0];
        acc[n][1] += g[1];
        acc[n + 1][0] += q[0] * g[0];
        acc[n + 1][1] += q[0] * g[1];
        acc[n + 2][0] += q[1] * g[0];
        acc[n + 2][1] += q[1] * g[1];
    }

    /// Pulls coefficient gradients back to interleaved offset gradients: `Sᵀ · acc`.
    pub(crate) fn offsets_grad(&self, acc: &[[T; 2]], out: &mut [T]) {
        let n = self.num_points();
        for (row, a) in self.solve.chunks(n).zip(&acc[..n + 3]) {
            for (k, s) in row.iter().enumerate() {
                out[2 * k] += *s * a[0];
                out[2 * k + 1] += *s * a[1];
            }
        }
    }
}
