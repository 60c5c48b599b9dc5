//! Per-sample convolution kernels (im2col + gemm) and their adjoints.
//!
//! Work is split by sample and reduced in sample order, so results are
//! bitwise independent of the rayon pool size.

use rayon::prelude::*;

use super::Scalar;

/// Geometry of a 2-d convolution on a single sample: `c_in x h x w` in,
/// `c_out x ho x wo` out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn conv(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `o * stride + k_off - pad` falls inside `0..len`.
fn valid_span(k_off: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    if len + pad <= k_off {
        return (out_len, out_len);
    }
    let hi = ((len + pad - 1 - k_off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// `x[c_in, h, w]` → `cols[c_in*k*k, ho*wo]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    let s = g.stride;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (oy0, oy1) = valid_span(ki, g.pad, s, g.h, g.ho);
            for kj in 0..g.k {
                let (ox0, ox1) = valid_span(kj, g.pad, s, g.w, g.wo);
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                dst[..oy0 * g.wo].fill(T::zero());
                dst[oy1 * g.wo..].fill(T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * s + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    drow[..ox0].fill(T::zero());
                    drow[ox1..].fill(T::zero());
                    if ox0 == ox1 {
                        continue;
                    }
                    let ix0 = ox0 * s + kj - g.pad;
                    if s == 1 {
                        drow[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (d, v) in drow[ox0..ox1].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `x` (not cleared).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.col_cols();
    let s = g.stride;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (oy0, oy1) = valid_span(ki, g.pad, s, g.h, g.ho);
            for kj in 0..g.k {
                let (ox0, ox1) = valid_span(kj, g.pad, s, g.w, g.wo);
                if ox0 == ox1 {
                    continue;
                }
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = oy * s + ki - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo + ox0..oy * g.wo + ox1];
                    let ix0 = ox0 * s + kj - g.pad;
                    for (d, v) in dst[ix0..].iter_mut().step_by(s).zip(srow) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Minimum samples per rayon job, so each worker allocates its scratch once.
fn per_worker(batch: usize) -> usize {
    batch.div_ceil(rayon::current_num_threads()).max(1)
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[o]);
        }
    }
}

fn sum_partials<T: Scalar>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in partials {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc
}

/// Conv forward: `x[b, c_in, h, w]`, `weight[c_out, c_in, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom, batch: usize) -> Vec<T> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.ho * g.wo;
    let (kr, n) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); batch * out_sz];
    out.par_chunks_mut(out_sz)
        .enumerate()
        .with_min_len(per_worker(batch))
        .for_each_init(|| vec![T::zero(); kr * n], |cols, (bi, o)| {
            im2col(&x[bi * in_sz..(bi + 1) * in_sz], g, cols);
            T::gemm(g.c_out, kr, n, T::one(), weight, kr as isize, 1, cols, n as isize, 1, T::zero(), o, n as isize, 1);
            add_channel_bias(o, bias, n);
        });
    out
}

fn bias_grad<T: Scalar>(grad: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for sample in grad.chunks(channels * plane) {
        for (o, chunk) in sample.chunks(plane).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
    }
    db
}

/// Returns `(dx, dweight, dbias)`; `dx` only when `need_dx`.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad: &[T],
    g: &ConvGeom,
    batch: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.ho * g.wo;
    let (kr, n) = (g.col_rows(), g.col_cols());
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); batch * in_sz];
        dx.par_chunks_mut(in_sz)
            .enumerate()
            .with_min_len(per_worker(batch))
            .for_each_init(|| vec![T::zero(); kr * n], |dcols, (bi, d)| {
                let gs = &grad[bi * out_sz..(bi + 1) * out_sz];
                // dcols = W^T g
                T::gemm(kr, g.c_out, n, T::one(), weight, 1, kr as isize, gs, n as isize, 1, T::zero(), dcols, n as isize, 1);
                col2im(dcols, g, d);
            });
        dx
    });
    let dw = need_dw.then(|| {
        let partials: Vec<Vec<T>> = (0..batch)
            .into_par_iter()
            .with_min_len(per_worker(batch))
            .map_init(
                || vec![T::zero(); kr * n],
                |cols, bi| {
                    im2col(&x[bi * in_sz..(bi + 1) * in_sz], g, cols);
                    let gs = &grad[bi * out_sz..(bi + 1) * out_sz];
                    let mut dw = vec![T::zero(); g.c_out * kr];
                    // dW = g cols^T
                    T::gemm(g.c_out, n, kr, T::one(), gs, n as isize, 1, cols, 1, n as isize, T::zero(), &mut dw, kr as isize, 1);
                    dw
                },
            )
            .collect();
        sum_partials(partials, g.c_out * kr)
    });
    (dx, dw, bias_grad(grad, g.c_out, n))
}

/// Transposed conv forward. `geom` describes the adjoint convolution that
/// maps the output (`c_in x h x w` in geom terms) back to the input
/// (`c_out x ho x wo`); `x[b, geom.c_out, ho, wo]`, `weight[geom.c_out, geom.c_in, k, k]`.
pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom, batch: usize) -> Vec<T> {
    let in_sz = g.c_out * g.ho * g.wo;
    let out_sz = g.c_in * g.h * g.w;
    let (kr, n) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); batch * out_sz];
    out.par_chunks_mut(out_sz)
        .enumerate()
        .with_min_len(per_worker(batch))
        .for_each_init(|| vec![T::zero(); kr * n], |cols, (bi, o)| {
            let xs = &x[bi * in_sz..(bi + 1) * in_sz];
            // cols = W^T x, W viewed as [c_out_geom, kr]
            T::gemm(kr, g.c_out, n, T::one(), weight, 1, kr as isize, xs, n as isize, 1, T::zero(), cols, n as isize, 1);
            col2im(cols, g, o);
            add_channel_bias(o, bias, g.h * g.w);
        });
    out
}

#[allow(clippy::type_complexity)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad: &[T],
    g: &ConvGeom,
    batch: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let in_sz = g.c_out * g.ho * g.wo;
    let out_sz = g.c_in * g.h * g.w;
    let (kr, n) = (g.col_rows(), g.col_cols());
    let results: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .with_min_len(per_worker(batch))
        .map_init(
            || vec![T::zero(); kr * n],
            |dcols, bi| {
                im2col(&grad[bi * out_sz..(bi + 1) * out_sz], g, dcols);
                let dx = need_dx.then(|| {
                    let mut d = vec![T::zero(); in_sz];
                    T::gemm(g.c_out, kr, n, T::one(), weight, kr as isize, 1, dcols, n as isize, 1, T::zero(), &mut d, n as isize, 1);
                    d
                });
                let dw = need_dw.then(|| {
                    let xs = &x[bi * in_sz..(bi + 1) * in_sz];
                    let mut d = vec![T::zero(); g.c_out * kr];
                    T::gemm(g.c_out, n, kr, T::one(), xs, n as isize, 1, dcols, 1, n as isize, T::zero(), &mut d, kr as isize, 1);
                    d
                });
                (dx, dw)
            },
        )
        .collect();
    let mut dx_all = need_dx.then(|| Vec::with_capacity(batch * in_sz));
    let mut dw_parts = Vec::new();
    for (dx, dw) in results {
        if let (Some(all), Some(d)) = (dx_all.as_mut(), dx) {
            all.extend(d);
        }
        if let Some(d) = dw {
            dw_parts.push(d);
        }
    }
    let dw = need_dw.then(|| sum_partials(dw_parts, g.c_out * kr));
    (dx_all, dw, bias_grad(grad, g.c_in, g.h * g.w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom::conv(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_matches_naive_gather() {
        for (c, h, w, k, stride, pad) in [(2, 5, 4, 3, 2, 1), (1, 6, 6, 4, 2, 1), (3, 4, 5, 3, 1, 1), (1, 3, 3, 2, 2, 0), (2, 2, 2, 3, 1, 2)] {
            let g = ConvGeom::conv(c, h, w, 1, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..c * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut cols);
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        for oy in 0..g.ho {
                            for ox in 0..g.wo {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                let want = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x[(ci * h + iy as usize) * w + ix as usize]
                                };
                                let row = (ci * k + ki) * k + kj;
                                assert_eq!(cols[row * g.col_cols() + oy * g.wo + ox], want);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let g = ConvGeom::conv(1, 4, 4, 1, 3, 1, 0).unwrap();
        let out = conv2d_forward(&[1.0f64; 16], &[1.0; 9], None, &g, 1);
        assert_eq!(out, vec![9.0; 4]);
    }
}
