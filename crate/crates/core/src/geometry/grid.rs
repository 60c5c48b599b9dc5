//! Sampling-grid construction: restricted affine, then TPS refinement.

use crate::autodiff::Scalar;

use super::tps::TpsBasis;
use super::WarpMode;

/// Normalized coordinate of pixel index `i` along an axis of length `len`
/// (corner-aligned: first pixel at -1, last at +1).
#[inline]
pub fn pixel_to_norm(i: usize, len: usize) -> f64 {
    if len > 1 {
        -1.0 + 2.0 * i as f64 / (len - 1) as f64
    } else {
        0.0
    }
}

/// Target-pixel coordinates `(u, v)` in row-major order.
pub fn base_grid<T: Scalar>(h: usize, w: usize) -> Vec<[T; 2]> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let v = T::lit(pixel_to_norm(r, h));
        for c in 0..w {
            out.push([T::lit(pixel_to_norm(c, w)), v]);
        }
    }
    out
}

#[inline]
fn affine_point<T: Scalar>(p: [T; 2], rot: T, scale: T, shift: [T; 2]) -> [T; 2] {
    let (s, c) = rot.sin_cos();
    [
        scale * (c * p[0] - s * p[1]) + shift[0],
        scale * (s * p[0] + c * p[1]) + shift[1],
    ]
}

/// Grid for one sample; `theta` = `[offsets (2n), rotation, scale, shift_x, shift_y]`.
/// Output is interleaved `(u, v)` per target pixel.
pub fn warp_grid_forward<T: Scalar>(theta: &[T], basis: &TpsBasis<T>, base: &[[T; 2]], mode: WarpMode) -> Vec<T> {
    let n2 = 2 * basis.num_points();
    let (rot, scale, shift) = (theta[n2], theta[n2 + 1], [theta[n2 + 2], theta[n2 + 3]]);
    let use_affine = mode != WarpMode::TpsOnly;
    let use_tps = mode != WarpMode::AffineOnly;
    let coeffs = use_tps.then(|| basis.coefficients(&theta[..n2]));
    let mut out = Vec::with_capacity(base.len() * 2);
    for p in base {
        let q = if use_affine { affine_point(*p, rot, scale, shift) } else { *p };
        match &coeffs {
            Some(cf) => {
                let (d, _) = basis.displace(cf, q, false);
                out.push(q[0] + d[0]);
                out.push(q[1] + d[1]);
            }
            None => {
                out.push(q[0]);
                out.push(q[1]);
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`warp_grid_forward`]; accumulates into `grad_theta`.
pub fn warp_grid_backward<T: Scalar>(
    theta: &[T],
    basis: &TpsBasis<T>,
    base: &[[T; 2]],
    mode: WarpMode,
    grad_out: &[T],
    grad_theta: &mut [T],
) {
    let n = basis.num_points();
    let n2 = 2 * n;
    let (rot, scale, shift) = (theta[n2], theta[n2 + 1], [theta[n2 + 2], theta[n2 + 3]]);
    let use_affine = mode != WarpMode::TpsOnly;
    let use_tps = mode != WarpMode::AffineOnly;
    let coeffs = use_tps.then(|| basis.coefficients(&theta[..n2]));
    let (sn, cs) = rot.sin_cos();
    let mut acc = vec![[T::zero(); 2]; n + 3];
    let (mut g_rot, mut g_scale, mut g_sx, mut g_sy) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (p, g) in base.iter().zip(grad_out.chunks_exact(2)) {
        let g = [g[0], g[1]];
        let q = if use_affine { affine_point(*p, rot, scale, shift) } else { *p };
        let mut gq = g;
        if let Some(cf) = &coeffs {
            let (_, jac) = basis.displace(cf, q, true);
            gq[0] += jac[0][0] * g[0] + jac[1][0] * g[1];
            gq[1] += jac[0][1] * g[0] + jac[1][1] * g[1];
            basis.accumulate_phi(q, g, &mut acc);
        }
        if use_affine {
            let rx = cs * p[0] - sn * p[1];
            let ry = sn * p[0] + cs * p[1];
            // d(rx, ry)/d rot = (-ry, rx)
            g_rot += scale * (-ry * gq[0] + rx * gq[1]);
            g_scale += rx * gq[0] + ry * gq[1];
            g_sx += gq[0];
            g_sy += gq[1];
        }
    }
    if use_tps {
        basis.offsets_grad(&acc, &mut grad_theta[..n2]);
    }
    grad_theta[n2] += g_rot;
    grad_theta[n2 + 1] += g_scale;
    grad_theta[n2 + 2] += g_sx;
    grad_theta[n2 + 3] += g_sy;
}
