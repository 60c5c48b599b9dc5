//! Restricted affine + thin-plate-spline warps and the bilinear sampler.
//!
//! Coordinates are normalized to `[-1, 1]` with corner alignment: `u = -1`
//! is the centre of the left-most pixel column and `u = 1` the right-most.
//! A grid entry `(u, v)` tells a target pixel where to read from the source.

mod grid;
mod linalg;
mod sampler;
mod tps;

pub use grid::{base_grid, pixel_to_norm, warp_grid_backward, warp_grid_forward};
pub use sampler::{sample_backward, sample_cells, sample_forward};
pub use tps::{control_grid, solve_tps, TpsBasis, TpsCoefficients};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::Image;

/// TPS regularization used unless a caller asks otherwise.
pub const DEFAULT_TPS_REGULARIZATION: f64 = 1e-6;

/// Squash ranges applied to raw predictor outputs.
pub const OFFSET_RANGE: f64 = 0.2;
pub const ROTATION_RANGE: f64 = PI / 6.0;
pub const LOG_SCALE_RANGE: f64 = 0.3;
pub const SHIFT_RANGE: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid geometry input: {0}")]
    InvalidInput(String),
    #[error("singular TPS system (degenerate control layout)")]
    Singular,
}

/// Which parts of the warp are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    #[default]
    Combined,
    TpsOnly,
    AffineOnly,
}

/// What the sampler reads outside the source frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Border {
    Clamp,
    Fill(f64),
}

impl Default for Border {
    fn default() -> Self {
        Border::Fill(1.0)
    }
}

/// Warp parameters: `N x N` control-point offsets plus rotation, isotropic
/// scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpParams {
    pub grid_n: usize,
    /// Row-major over the control grid (`k = row * N + col`).
    pub offsets: Vec<[f64; 2]>,
    pub rotation: f64,
    pub scale: f64,
    pub shift: [f64; 2],
}

impl WarpParams {
    pub fn identity(grid_n: usize) -> Result<Self, GeometryError> {
        if grid_n < 2 {
            return Err(GeometryError::InvalidInput(format!("control grid N = {grid_n} < 2")));
        }
        Ok(Self {
            grid_n,
            offsets: vec![[0.0; 2]; grid_n * grid_n],
            rotation: 0.0,
            scale: 1.0,
            shift: [0.0; 2],
        })
    }

    pub fn len_for(grid_n: usize) -> usize {
        2 * grid_n * grid_n + 4
    }

    /// `[dx0, dy0, dx1, dy1, ..., rotation, scale, shift_x, shift_y]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.offsets.iter().flat_map(|o| [o[0], o[1]]).collect();
        out.extend([self.rotation, self.scale, self.shift[0], self.shift[1]]);
        out
    }

    pub fn unflatten(grid_n: usize, theta: &[f64]) -> Result<Self, GeometryError> {
        if grid_n < 2 {
            return Err(GeometryError::InvalidInput(format!("control grid N = {grid_n} < 2")));
        }
        let expected = Self::len_for(grid_n);
        if theta.len() != expected {
            return Err(GeometryError::InvalidInput(format!(
                "theta has {} entries, N = {grid_n} needs {expected}",
                theta.len()
            )));
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidInput(format!("theta[{i}] is not finite")));
        }
        let n2 = 2 * grid_n * grid_n;
        Ok(Self {
            grid_n,
            offsets: theta[..n2].chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            rotation: theta[n2],
            scale: theta[n2 + 1],
            shift: [theta[n2 + 2], theta[n2 + 3]],
        })
    }

    /// Maps unconstrained raw values into the plausible-glyph range.
    pub fn from_raw(grid_n: usize, raw: &[f64]) -> Result<Self, GeometryError> {
        let mut theta = raw.to_vec();
        squash_in_place(grid_n, &mut theta)?;
        Self::unflatten(grid_n, &theta)
    }
}

/// A random warp: standard normal raw values squashed into range.
pub fn random_warp(grid_n: usize, seed: u64) -> Result<WarpParams, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..WarpParams::len_for(grid_n)).map(|_| rng.sample(StandardNormal)).collect();
    WarpParams::from_raw(grid_n, &raw)
}

fn squash_in_place(grid_n: usize, raw: &mut [f64]) -> Result<(), GeometryError> {
    let n2 = 2 * grid_n * grid_n;
    if raw.len() != n2 + 4 {
        return Err(GeometryError::InvalidInput(format!(
            "raw vector has {} entries, N = {grid_n} needs {}",
            raw.len(),
            n2 + 4
        )));
    }
    for v in &mut raw[..n2] {
        *v = OFFSET_RANGE * v.tanh();
    }
    raw[n2] = ROTATION_RANGE * raw[n2].tanh();
    raw[n2 + 1] = (LOG_SCALE_RANGE * raw[n2 + 1].tanh()).exp();
    raw[n2 + 2] = SHIFT_RANGE * raw[n2 + 2].tanh();
    raw[n2 + 3] = SHIFT_RANGE * raw[n2 + 3].tanh();
    Ok(())
}

/// Per-target-pixel source coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

impl SamplingGrid {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            coords: base_grid::<f64>(height, width),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 2] {
        self.coords[row * self.width + col]
    }

    fn interleaved(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| [c[0], c[1]]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub grid: SamplingGrid,
    /// Set when the TPS solve failed and only the affine part was applied.
    pub tps_fallback: bool,
}

pub fn build_grid(params: &WarpParams, height: usize, width: usize) -> Result<GridResult, GeometryError> {
    build_grid_with(params, height, width, WarpMode::Combined, DEFAULT_TPS_REGULARIZATION)
}

/// Target grid → restricted affine → TPS displacement fitted from the regular
/// control grid to `control grid + offsets`.
pub fn build_grid_with(
    params: &WarpParams,
    height: usize,
    width: usize,
    mode: WarpMode,
    regularization: f64,
) -> Result<GridResult, GeometryError> {
    if height == 0 || width == 0 {
        return Err(GeometryError::InvalidInput(format!("grid size {height}x{width}")));
    }
    let theta = params.flatten();
    WarpParams::unflatten(params.grid_n, &theta)?;
    let base = base_grid::<f64>(height, width);
    let (coords, tps_fallback) = match TpsBasis::<f64>::new(params.grid_n, regularization) {
        Ok(basis) => (warp_grid_forward(&theta, &basis, &base, mode), false),
        Err(GeometryError::Singular) if mode != WarpMode::TpsOnly => {
            (affine_only(&theta, params.grid_n, &base), true)
        }
        Err(GeometryError::Singular) => (base.iter().flat_map(|p| [p[0], p[1]]).collect(), true),
        Err(e) => return Err(e),
    };
    Ok(GridResult {
        grid: SamplingGrid {
            height,
            width,
            coords: coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        },
        tps_fallback,
    })
}

fn affine_only(theta: &[f64], grid_n: usize, base: &[[f64; 2]]) -> Vec<f64> {
    let n2 = 2 * grid_n * grid_n;
    let (s, c) = theta[n2].sin_cos();
    let scale = theta[n2 + 1];
    base.iter()
        .flat_map(|p| {
            [
                scale * (c * p[0] - s * p[1]) + theta[n2 + 2],
                scale * (s * p[0] + c * p[1]) + theta[n2 + 3],
            ]
        })
        .collect()
}

/// Bilinear lookup of `img` at every grid coordinate.
pub fn bilinear_sample(img: &Image, grid: &SamplingGrid, border: Border) -> Image {
    let out = sample_forward(img.data(), 1, img.height(), img.width(), &grid.interleaved(), border);
    Image::from_clamped(grid.height, grid.width, out).expect("grid dims are nonzero")
}

/// Convenience: build the grid and resample in one go.
pub fn warp_image(img: &Image, params: &WarpParams, mode: WarpMode, border: Border) -> Result<(Image, bool), GeometryError> {
    let res = build_grid_with(params, img.height(), img.width(), mode, DEFAULT_TPS_REGULARIZATION)?;
    Ok((bilinear_sample(img, &res.grid, border), res.tps_fallback))
}
