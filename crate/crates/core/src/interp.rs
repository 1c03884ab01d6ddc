//! Trilinear sampling in continuous voxel-index coordinates, its gradient,
//! and the transposed scatter.
//!
//! Voxels outside the grid read as a constant background. A position lying
//! within `[0, n-1]` along an axis always interpolates inside the grid, so
//! a sample exactly on the last voxel does not blend with the background.

use crate::volgrid::{Grid3, Volume};

#[inline]
fn cell(q: f64, n: usize) -> (isize, f64) {
    let fl = q.floor();
    let mut i = fl as isize;
    if n >= 2 && i == n as isize - 1 && q == fl {
        i -= 1;
    }
    (i, q - i as f64)
}

#[inline]
fn inside(i: isize, n: usize) -> bool {
    i >= 0 && (i as usize) < n
}

/// Corner indices and weights of a trilinear stencil. `None` marks corners
/// outside the grid.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub idx: [Option<usize>; 8],
    pub w: [f64; 8],
    /// Fractional offsets inside the cell, per axis.
    pub frac: [f64; 3],
}

#[inline]
pub fn stencil(grid: &Grid3, q: [f64; 3]) -> Stencil {
    let [nx, ny, nz] = grid.dims;
    let (ix, fx) = cell(q[0], nx);
    let (iy, fy) = cell(q[1], ny);
    let (iz, fz) = cell(q[2], nz);
    let mut idx = [None; 8];
    let mut w = [0.0; 8];
    let mut k = 0;
    for dz in 0..2isize {
        let wz = if dz == 0 { 1.0 - fz } else { fz };
        let z = iz + dz;
        for dy in 0..2isize {
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            let y = iy + dy;
            for dx in 0..2isize {
                let wx = if dx == 0 { 1.0 - fx } else { fx };
                let x = ix + dx;
                if inside(x, nx) && inside(y, ny) && inside(z, nz) {
                    idx[k] = Some(x as usize + nx * (y as usize + ny * z as usize));
                }
                w[k] = wx * wy * wz;
                k += 1;
            }
        }
    }
    Stencil {
        idx,
        w,
        frac: [fx, fy, fz],
    }
}

/// Trilinear sample; outside voxels read as `background`.
#[inline]
pub fn sample(vol: &Volume, q: [f64; 3], background: f64) -> f64 {
    let s = stencil(&vol.grid, q);
    let mut acc = 0.0;
    for k in 0..8 {
        let v = match s.idx[k] {
            Some(i) => vol.values[i] as f64,
            None => background,
        };
        acc += s.w[k] * v;
    }
    acc
}

/// Trilinear sample over an `f64` field (same layout as a volume).
#[inline]
pub fn sample_field(grid: &Grid3, values: &[f64], q: [f64; 3], background: f64) -> f64 {
    let s = stencil(grid, q);
    let mut acc = 0.0;
    for k in 0..8 {
        let v = match s.idx[k] {
            Some(i) => values[i],
            None => background,
        };
        acc += s.w[k] * v;
    }
    acc
}

/// Trilinear sample and its gradient with respect to the index coordinates.
#[inline]
pub fn sample_with_gradient(vol: &Volume, q: [f64; 3], background: f64) -> (f64, [f64; 3]) {
    let s = stencil(&vol.grid, q);
    let mut c = [0.0f64; 8];
    for k in 0..8 {
        c[k] = match s.idx[k] {
            Some(i) => vol.values[i] as f64,
            None => background,
        };
    }
    let [fx, fy, fz] = s.frac;
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    // c index: dx + 2 dy + 4 dz
    let value = s.w.iter().zip(&c).map(|(w, v)| w * v).sum();
    let ddx = gy * gz * (c[1] - c[0]) + fy * gz * (c[3] - c[2]) + gy * fz * (c[5] - c[4]) + fy * fz * (c[7] - c[6]);
    let ddy = gx * gz * (c[2] - c[0]) + fx * gz * (c[3] - c[1]) + gx * fz * (c[6] - c[4]) + fx * fz * (c[7] - c[5]);
    let ddz = gx * gy * (c[4] - c[0]) + fx * gy * (c[5] - c[1]) + gx * fy * (c[6] - c[2]) + fx * fy * (c[7] - c[3]);
    (value, [ddx, ddy, ddz])
}

/// Transpose of [`sample`] with zero background: adds `value * w_k` to each
/// in-grid corner, and `w_k` to `weights` when given.
#[inline]
pub fn scatter(grid: &Grid3, q: [f64; 3], value: f64, accum: &mut [f64], weights: Option<&mut [f64]>) {
    let s = stencil(grid, q);
    match weights {
        Some(wts) => {
            for k in 0..8 {
                if let Some(i) = s.idx[k] {
                    accum[i] += value * s.w[k];
                    wts[i] += s.w[k];
                }
            }
        }
        None => {
            for k in 0..8 {
                if let Some(i) = s.idx[k] {
                    accum[i] += value * s.w[k];
                }
            }
        }
    }
}

/// Trilinear sample with positions clamped into the grid (edge replication).
pub fn sample_clamped(vol: &Volume, q: [f64; 3]) -> f64 {
    let mut qc = q;
    for a in 0..3 {
        qc[a] = q[a].clamp(0.0, (vol.grid.dims[a] - 1) as f64);
    }
    sample(vol, qc, 0.0)
}
