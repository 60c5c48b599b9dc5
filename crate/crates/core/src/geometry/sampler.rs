//! Bilinear sampling in normalized coordinates and its adjoint.

use crate::autodiff::Scalar;

use super::Border;

struct Tap<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
    /// d(pixel x)/du, zero when clamped
    dpx: T,
    dpy: T,
}

#[inline]
fn tap<T: Scalar>(u: T, v: T, h: usize, w: usize, border: Border) -> Tap<T> {
    let half = T::lit(0.5);
    let mut px = (u + T::one()) * half * T::lit((w - 1) as f64);
    let mut py = (v + T::one()) * half * T::lit((h - 1) as f64);
    let mut dpx = half * T::lit((w - 1) as f64);
    let mut dpy = half * T::lit((h - 1) as f64);
    if border == Border::Clamp {
        let (mx, my) = (T::lit((w - 1) as f64), T::lit((h - 1) as f64));
        if px < T::zero() || px > mx {
            px = px.max(T::zero()).min(mx);
            dpx = T::zero();
        }
        if py < T::zero() || py > my {
            py = py.max(T::zero()).min(my);
            dpy = T::zero();
        }
    }
    let x0 = px.floor();
    let y0 = py.floor();
    Tap {
        x0: x0.to_isize().unwrap_or(isize::MIN / 2),
        y0: y0.to_isize().unwrap_or(isize::MIN / 2),
        fx: px - x0,
        fy: py - y0,
        dpx,
        dpy,
    }
}

#[inline]
fn fetch<T: Scalar>(plane: &[T], h: usize, w: usize, y: isize, x: isize, border: Border) -> Option<T> {
    match border {
        Border::Clamp => {
            let yc = y.clamp(0, h as isize - 1) as usize;
            let xc = x.clamp(0, w as isize - 1) as usize;
            Some(plane[yc * w + xc])
        }
        Border::Fill(_) => {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                None
            } else {
                Some(plane[y as usize * w + x as usize])
            }
        }
    }
}

#[inline]
fn neighbor_index(h: usize, w: usize, y: isize, x: isize, border: Border) -> Option<usize> {
    match border {
        Border::Clamp => Some(y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize),
        Border::Fill(_) => {
            (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then(|| y as usize * w + x as usize)
        }
    }
}

fn fill_value<T: Scalar>(border: Border) -> T {
    match border {
        Border::Fill(v) => T::lit(v),
        Border::Clamp => T::zero(),
    }
}

/// `img[c, h, w]` sampled at `grid[(u, v) per target pixel]` → `[c, gh*gw]`.
/// Interpolation cell of every grid point: `(x0, y0, x clamped, y clamped)`.
/// The sampler is smooth while none of these change.
pub fn sample_cells<T: Scalar>(grid: &[T], h: usize, w: usize, border: Border) -> Vec<(isize, isize, bool, bool)> {
    grid.chunks_exact(2)
        .map(|uv| {
            let t = tap(uv[0], uv[1], h, w, border);
            (t.x0, t.y0, t.dpx == T::zero(), t.dpy == T::zero())
        })
        .collect()
}

pub fn sample_forward<T: Scalar>(img: &[T], channels: usize, h: usize, w: usize, grid: &[T], border: Border) -> Vec<T> {
    let npts = grid.len() / 2;
    let fill = fill_value::<T>(border);
    let mut out = vec![T::zero(); channels * npts];
    for (i, uv) in grid.chunks_exact(2).enumerate() {
        let t = tap(uv[0], uv[1], h, w, border);
        for c in 0..channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            let get = |dy: isize, dx: isize| fetch(plane, h, w, t.y0 + dy, t.x0 + dx, border).unwrap_or(fill);
            let top = get(0, 0) * (T::one() - t.fx) + get(0, 1) * t.fx;
            let bottom = get(1, 0) * (T::one() - t.fx) + get(1, 1) * t.fx;
            out[c * npts + i] = top * (T::one() - t.fy) + bottom * t.fy;
        }
    }
    out
}

/// Adjoint of [`sample_forward`]; accumulates into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub fn sample_backward<T: Scalar>(
    img: &[T],
    channels: usize,
    h: usize,
    w: usize,
    grid: &[T],
    border: Border,
    grad_out: &[T],
    mut grad_img: Option<&mut [T]>,
    mut grad_grid: Option<&mut [T]>,
) {
    let npts = grid.len() / 2;
    let fill = fill_value::<T>(border);
    for (i, uv) in grid.chunks_exact(2).enumerate() {
        let t = tap(uv[0], uv[1], h, w, border);
        let (one_fx, one_fy) = (T::one() - t.fx, T::one() - t.fy);
        let mut gu = T::zero();
        let mut gv = T::zero();
        for c in 0..channels {
            let g = grad_out[c * npts + i];
            if g == T::zero() {
                continue;
            }
            let plane = &img[c * h * w..(c + 1) * h * w];
            if grad_grid.is_some() {
                let get = |dy: isize, dx: isize| fetch(plane, h, w, t.y0 + dy, t.x0 + dx, border).unwrap_or(fill);
                let (v00, v01, v10, v11) = (get(0, 0), get(0, 1), get(1, 0), get(1, 1));
                let d_px = one_fy * (v01 - v00) + t.fy * (v11 - v10);
                let d_py = one_fx * (v10 - v00) + t.fx * (v11 - v01);
                gu += g * d_px * t.dpx;
                gv += g * d_py * t.dpy;
            }
            if let Some(gi) = grad_img.as_deref_mut() {
                let taps = [
                    (0, 0, one_fy * one_fx),
                    (0, 1, one_fy * t.fx),
                    (1, 0, t.fy * one_fx),
                    (1, 1, t.fy * t.fx),
                ];
                for (dy, dx, wgt) in taps {
                    if let Some(idx) = neighbor_index(h, w, t.y0 + dy, t.x0 + dx, border) {
                        gi[c * h * w + idx] += g * wgt;
                    }
                }
            }
        }
        if let Some(gg) = grad_grid.as_deref_mut() {
            gg[2 * i] += gu;
            gg[2 * i + 1] += gv;
        }
    }
}
