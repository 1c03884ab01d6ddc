//! Cubic B-spline free-form deformation.
//!
//! A [`ControlGrid`] holds mm displacements on a uniform knot lattice. The
//! dense field is the tensor-product cubic B-spline of those displacements.
//! Warping uses the pull-back convention: output voxel `x` samples the
//! reference at `x + u(x)`, with air (-1000 HU) outside the reference.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp;
use crate::volgrid::{Grid3, Segment, Volume};

/// Intensity read outside the reference volume.
pub const AIR_HU: f64 = -1000.0;

/// Knot lattice plus per-knot displacement vectors (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub image_grid: Grid3,
    pub cdims: [usize; 3],
    pub cspacing: [f64; 3],
    /// Physical position of knot (0, 0, 0).
    pub corigin: [f64; 3],
    pub disp: Vec<[f64; 3]>,
}

impl ControlGrid {
    /// Zero field whose lattice is aligned to `anchor` and covers the image
    /// extent with one knot of margin on each side.
    pub fn zeros(image_grid: Grid3, cspacing: [f64; 3], anchor: [f64; 3]) -> Result<Self> {
        let lo = image_grid.origin;
        let hi = image_grid.extent_max();
        Self::zeros_covering(image_grid, cspacing, anchor, lo, hi)
    }

    /// Like [`ControlGrid::zeros`] but also covering the box `[lo, hi]`.
    pub fn zeros_covering(
        image_grid: Grid3,
        cspacing: [f64; 3],
        anchor: [f64; 3],
        lo: [f64; 3],
        hi: [f64; 3],
    ) -> Result<Self> {
        image_grid.validate()?;
        if cspacing.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Argument(format!("knot spacing must be positive, got {cspacing:?}")));
        }
        let img_hi = image_grid.extent_max();
        let mut cdims = [0usize; 3];
        let mut corigin = [0.0; 3];
        for a in 0..3 {
            let lo_a = lo[a].min(image_grid.origin[a]);
            let hi_a = hi[a].max(img_hi[a]);
            let k = ((lo_a - anchor[a]) / cspacing[a]).floor();
            corigin[a] = anchor[a] + (k - 1.0) * cspacing[a];
            let umax = (hi_a - corigin[a]) / cspacing[a];
            cdims[a] = (umax.floor() as usize + 3).max(4);
        }
        let n = cdims[0] * cdims[1] * cdims[2];
        let cg = ControlGrid {
            image_grid,
            cdims,
            cspacing,
            corigin,
            disp: vec![[0.0; 3]; n],
        };
        cg.validate()?;
        Ok(cg)
    }

    /// Lattice used for one pyramid level of a fit on `full`: knots aligned
    /// to the full-resolution origin, covering the full extent plus one
    /// coarsest block so every level's lattice is nested in the finer ones
    /// whenever the spacings are.
    pub fn model_lattice(full: &Grid3, level_grid: Grid3, cspacing: [f64; 3], max_factor: [usize; 3]) -> Result<Self> {
        let hi = full.extent_max();
        let mut hi_pad = hi;
        for a in 0..3 {
            hi_pad[a] += max_factor[a] as f64 * full.spacing[a];
        }
        Self::zeros_covering(level_grid, cspacing, full.origin, full.origin, hi_pad)
    }

    pub fn from_parts(
        image_grid: Grid3,
        cdims: [usize; 3],
        cspacing: [f64; 3],
        corigin: [f64; 3],
        disp: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let cg = ControlGrid {
            image_grid,
            cdims,
            cspacing,
            corigin,
            disp,
        };
        cg.validate()?;
        Ok(cg)
    }

    pub fn validate(&self) -> Result<()> {
        self.image_grid.validate()?;
        if self.cdims.iter().any(|&c| c < 4) {
            return Err(Error::Argument(format!("control dims must be >= 4, got {:?}", self.cdims)));
        }
        if self.cspacing.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Argument("knot spacing must be positive".into()));
        }
        if self.disp.len() != self.len() {
            return Err(Error::Argument(format!(
                "control grid has {} vectors, dims need {}",
                self.disp.len(),
                self.len()
            )));
        }
        if self.disp.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("control displacements are not finite".into()));
        }
        let hi = self.image_grid.extent_max();
        for a in 0..3 {
            let umin = lattice_coord(self, a, self.image_grid.origin[a]);
            let umax = lattice_coord(self, a, hi[a]);
            if umin < 1.0 || umax.floor() as usize + 2 >= self.cdims[a] {
                return Err(Error::Range(format!(
                    "control lattice does not cover the image along axis {a} with a one-knot margin"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.cdims[0] * self.cdims[1] * self.cdims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.disp.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.cdims[0] * (j + self.cdims[1] * k)
    }

    pub fn knot_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.corigin[0] + i as f64 * self.cspacing[0],
            self.corigin[1] + j as f64 * self.cspacing[1],
            self.corigin[2] + k as f64 * self.cspacing[2],
        ]
    }

    pub fn zeros_like(&self) -> Self {
        ControlGrid {
            disp: vec![[0.0; 3]; self.disp.len()],
            ..self.clone()
        }
    }

    pub fn same_geometry(&self, other: &ControlGrid) -> bool {
        self.image_grid == other.image_grid
            && self.cdims == other.cdims
            && self.cspacing == other.cspacing
            && self.corigin == other.corigin
    }

    pub(crate) fn check_same_geometry(&self, other: &ControlGrid, what: &str) -> Result<()> {
        if !self.same_geometry(other) {
            return Err(Error::Geometry(format!("{what}: control grid geometries differ")));
        }
        Ok(())
    }

    /// Sum over all knots and components of the elementwise product.
    pub fn dot(&self, other: &ControlGrid) -> f64 {
        self.disp
            .iter()
            .zip(&other.disp)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum()
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ControlGrid) {
        for (d, v) in self.disp.iter_mut().zip(&x.disp) {
            d[0] += a * v[0];
            d[1] += a * v[1];
            d[2] += a * v[2];
        }
    }

    pub fn scale(&mut self, a: f64) {
        for d in &mut self.disp {
            d[0] *= a;
            d[1] *= a;
            d[2] *= a;
        }
    }

    /// Largest Euclidean norm over knots.
    pub fn max_norm(&self) -> f64 {
        self.disp
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_component(&self) -> f64 {
        self.disp.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.disp.iter().flatten().all(|v| v.is_finite())
    }
}

/// Uniform cubic B-spline basis at fractional offset `u` in `[0, 1)`.
pub fn basis_weights(u: f64) -> Result<[f64; 4]> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Argument(format!("basis offset {u} outside [0, 1)")));
    }
    Ok(basis(u))
}

#[inline]
pub(crate) fn basis(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Lattice coordinate of `p` along axis `a`, snapped to the nearest knot
/// when rounding noise puts it a hair off.
#[inline]
fn lattice_coord(cg: &ControlGrid, a: usize, p: f64) -> f64 {
    let u = (p - cg.corigin[a]) / cg.cspacing[a];
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        r
    } else {
        u
    }
}

#[inline]
fn knot_cell(cg: &ControlGrid, a: usize, p: f64) -> Result<(usize, f64)> {
    let u = lattice_coord(cg, a, p);
    let k = u.floor();
    if !(k >= 1.0 && (k as usize) + 2 < cg.cdims[a]) {
        return Err(Error::Range(format!(
            "point coordinate {p} mm on axis {a} lies outside the control lattice support"
        )));
    }
    Ok((k as usize - 1, u - k))
}

/// Dense displacement at a physical point.
pub fn displacement_at(cg: &ControlGrid, p: [f64; 3]) -> Result<[f64; 3]> {
    let (i0, fx) = knot_cell(cg, 0, p[0])?;
    let (j0, fy) = knot_cell(cg, 1, p[1])?;
    let (k0, fz) = knot_cell(cg, 2, p[2])?;
    let (wx, wy, wz) = (basis(fx), basis(fy), basis(fz));
    let mut out = [0.0; 3];
    for c in 0..4 {
        for b in 0..4 {
            let wyz = wy[b] * wz[c];
            for a in 0..4 {
                let w = wx[a] * wyz;
                let d = cg.disp[cg.index(i0 + a, j0 + b, k0 + c)];
                out[0] += w * d[0];
                out[1] += w * d[1];
                out[2] += w * d[2];
            }
        }
    }
    Ok(out)
}

/// Per-axis knot support of every image voxel.
#[derive(Clone, Debug)]
pub struct AxisTable {
    pub start: Vec<usize>,
    pub w: Vec<[f64; 4]>,
}

/// Precomputed separable spline weights for an image grid / lattice pair.
#[derive(Clone, Debug)]
pub struct SplineTables {
    pub axes: [AxisTable; 3],
}

impl SplineTables {
    pub fn new(cg: &ControlGrid) -> Result<Self> {
        let g = &cg.image_grid;
        let mk = |a: usize| -> Result<AxisTable> {
            let mut start = Vec::with_capacity(g.dims[a]);
            let mut w = Vec::with_capacity(g.dims[a]);
            for i in 0..g.dims[a] {
                let p = g.origin[a] + i as f64 * g.spacing[a];
                let (s, f) = knot_cell(cg, a, p)?;
                start.push(s);
                w.push(basis(f));
            }
            Ok(AxisTable { start, w })
        };
        Ok(SplineTables {
            axes: [mk(0)?, mk(1)?, mk(2)?],
        })
    }
}

/// Evaluates the dense field slice by slice and row by row, collapsing one
/// axis of the lattice at a time.
pub(crate) struct FieldEvaluator<'a> {
    cg: &'a ControlGrid,
    tab: &'a SplineTables,
    zbuf: Vec<[f64; 3]>,
    ybuf: Vec<[f64; 3]>,
}

impl<'a> FieldEvaluator<'a> {
    pub fn new(cg: &'a ControlGrid, tab: &'a SplineTables) -> Self {
        FieldEvaluator {
            cg,
            tab,
            zbuf: vec![[0.0; 3]; cg.cdims[0] * cg.cdims[1]],
            ybuf: vec![[0.0; 3]; cg.cdims[0]],
        }
    }

    pub fn load_slice(&mut self, z: usize) {
        let [cx, cy, _] = self.cg.cdims;
        let k0 = self.tab.axes[2].start[z];
        let wz = self.tab.axes[2].w[z];
        let plane = cx * cy;
        for (i, out) in self.zbuf.iter_mut().enumerate() {
            let mut acc = [0.0; 3];
            for (c, &w) in wz.iter().enumerate() {
                let d = self.cg.disp[i + plane * (k0 + c)];
                acc[0] += w * d[0];
                acc[1] += w * d[1];
                acc[2] += w * d[2];
            }
            *out = acc;
        }
    }

    pub fn load_row(&mut self, y: usize) {
        let cx = self.cg.cdims[0];
        let j0 = self.tab.axes[1].start[y];
        let wy = self.tab.axes[1].w[y];
        for (i, out) in self.ybuf.iter_mut().enumerate() {
            let mut acc = [0.0; 3];
            for (b, &w) in wy.iter().enumerate() {
                let d = self.zbuf[i + cx * (j0 + b)];
                acc[0] += w * d[0];
                acc[1] += w * d[1];
                acc[2] += w * d[2];
            }
            *out = acc;
        }
    }

    #[inline]
    pub fn at(&self, x: usize) -> [f64; 3] {
        let i0 = self.tab.axes[0].start[x];
        let wx = self.tab.axes[0].w[x];
        let mut acc = [0.0; 3];
        for (a, &w) in wx.iter().enumerate() {
            let d = self.ybuf[i0 + a];
            acc[0] += w * d[0];
            acc[1] += w * d[1];
            acc[2] += w * d[2];
        }
        acc
    }
}

/// Transpose of [`FieldEvaluator`]: spreads per-voxel vectors back onto the
/// lattice. Calls must nest as slice { row { add* } end_row }* end_slice.
pub(crate) struct FieldAccumulator<'a> {
    tab: &'a SplineTables,
    cdims: [usize; 3],
    pub grad: Vec<[f64; 3]>,
    zacc: Vec<[f64; 3]>,
    yacc: Vec<[f64; 3]>,
}

impl<'a> FieldAccumulator<'a> {
    pub fn new(cg: &ControlGrid, tab: &'a SplineTables) -> Self {
        FieldAccumulator {
            tab,
            cdims: cg.cdims,
            grad: vec![[0.0; 3]; cg.len()],
            zacc: vec![[0.0; 3]; cg.cdims[0] * cg.cdims[1]],
            yacc: vec![[0.0; 3]; cg.cdims[0]],
        }
    }

    #[inline]
    pub fn add(&mut self, x: usize, g: [f64; 3]) {
        let i0 = self.tab.axes[0].start[x];
        let wx = self.tab.axes[0].w[x];
        for (a, &w) in wx.iter().enumerate() {
            let d = &mut self.yacc[i0 + a];
            d[0] += w * g[0];
            d[1] += w * g[1];
            d[2] += w * g[2];
        }
    }

    pub fn end_row(&mut self, y: usize) {
        let cx = self.cdims[0];
        let j0 = self.tab.axes[1].start[y];
        let wy = self.tab.axes[1].w[y];
        for i in 0..cx {
            let v = self.yacc[i];
            if v == [0.0; 3] {
                continue;
            }
            for (b, &w) in wy.iter().enumerate() {
                let d = &mut self.zacc[i + cx * (j0 + b)];
                d[0] += w * v[0];
                d[1] += w * v[1];
                d[2] += w * v[2];
            }
            self.yacc[i] = [0.0; 3];
        }
    }

    pub fn end_slice(&mut self, z: usize) {
        let plane = self.cdims[0] * self.cdims[1];
        let k0 = self.tab.axes[2].start[z];
        let wz = self.tab.axes[2].w[z];
        for i in 0..plane {
            let v = self.zacc[i];
            if v == [0.0; 3] {
                continue;
            }
            for (c, &w) in wz.iter().enumerate() {
                let d = &mut self.grad[i + plane * (k0 + c)];
                d[0] += w * v[0];
                d[1] += w * v[1];
                d[2] += w * v[2];
            }
            self.zacc[i] = [0.0; 3];
        }
    }
}

/// Dense displacement field on the image grid (x-fastest).
pub fn dense_field(cg: &ControlGrid) -> Result<Vec<[f64; 3]>> {
    let tab = SplineTables::new(cg)?;
    let g = cg.image_grid;
    let mut ev = FieldEvaluator::new(cg, &tab);
    let mut out = Vec::with_capacity(g.len());
    for z in 0..g.dims[2] {
        ev.load_slice(z);
        for y in 0..g.dims[1] {
            ev.load_row(y);
            for x in 0..g.dims[0] {
                out.push(ev.at(x));
            }
        }
    }
    Ok(out)
}

/// Continuous sample position (voxel-index coordinates) of output voxel
/// `(x, y, z)` displaced by `u` mm.
#[inline]
pub(crate) fn sample_index(g: &Grid3, x: usize, y: usize, z: usize, u: [f64; 3]) -> [f64; 3] {
    [
        x as f64 + u[0] / g.spacing[0],
        y as f64 + u[1] / g.spacing[1],
        z as f64 + u[2] / g.spacing[2],
    ]
}

/// Warp slices `z_lo..=z_hi` of the output space, reading `background`
/// outside the reference.
pub fn warp_slab(reference: &Volume, cg: &ControlGrid, z_lo: usize, z_hi: usize, background: f64) -> Result<Vec<f64>> {
    reference.grid.check_same(&cg.image_grid, "warp")?;
    let tab = SplineTables::new(cg)?;
    warp_slab_with(reference, cg, &tab, z_lo, z_hi, background)
}

pub(crate) fn warp_slab_with(
    reference: &Volume,
    cg: &ControlGrid,
    tab: &SplineTables,
    z_lo: usize,
    z_hi: usize,
    background: f64,
) -> Result<Vec<f64>> {
    let g = reference.grid;
    if z_hi >= g.dims[2] || z_lo > z_hi {
        return Err(Error::Range(format!("slab [{z_lo}, {z_hi}] outside volume")));
    }
    let mut ev = FieldEvaluator::new(cg, tab);
    let mut out = Vec::with_capacity(g.slice_len() * (z_hi - z_lo + 1));
    for z in z_lo..=z_hi {
        ev.load_slice(z);
        for y in 0..g.dims[1] {
            ev.load_row(y);
            for x in 0..g.dims[0] {
                let q = sample_index(&g, x, y, z, ev.at(x));
                out.push(interp::sample(reference, q, background));
            }
        }
    }
    Ok(out)
}

/// Resample the reference through the deformation (air outside).
pub fn warp_volume(reference: &Volume, cg: &ControlGrid) -> Result<Volume> {
    let vals = warp_slab(reference, cg, 0, reference.grid.dims[2] - 1, AIR_HU)?;
    Ok(Volume {
        grid: reference.grid,
        values: vals.into_iter().map(|v| v as f32).collect(),
    })
}

fn check_segment(reference: &Volume, cg: &ControlGrid, seg: &Segment) -> Result<()> {
    reference.grid.check_same(&cg.image_grid, "reference vs control grid")?;
    reference.grid.check_same(&seg.parent_grid, "reference vs segment")?;
    Ok(())
}

/// Sum of squared residuals between the warped reference and a segment.
pub fn segment_sse(reference: &Volume, cg: &ControlGrid, seg: &Segment) -> Result<f64> {
    check_segment(reference, cg, seg)?;
    let tab = SplineTables::new(cg)?;
    Ok(segment_sse_with(reference, cg, &tab, seg))
}

pub(crate) fn segment_sse_with(reference: &Volume, cg: &ControlGrid, tab: &SplineTables, seg: &Segment) -> f64 {
    let g = reference.grid;
    let mut ev = FieldEvaluator::new(cg, tab);
    let mut sse = 0.0;
    let mut k = 0;
    for z in seg.z_lo..=seg.z_hi {
        ev.load_slice(z);
        for y in 0..g.dims[1] {
            ev.load_row(y);
            for x in 0..g.dims[0] {
                let q = sample_index(&g, x, y, z, ev.at(x));
                let r = interp::sample(reference, q, AIR_HU) - seg.values[k] as f64;
                sse += r * r;
                k += 1;
            }
        }
    }
    sse
}

/// Segment-domain squared error and its gradient with respect to every
/// control displacement.
pub fn residual_and_gradient(reference: &Volume, cg: &ControlGrid, seg: &Segment) -> Result<(f64, ControlGrid)> {
    check_segment(reference, cg, seg)?;
    let tab = SplineTables::new(cg)?;
    Ok(residual_and_gradient_with(reference, cg, &tab, seg))
}

pub(crate) fn residual_and_gradient_with(
    reference: &Volume,
    cg: &ControlGrid,
    tab: &SplineTables,
    seg: &Segment,
) -> (f64, ControlGrid) {
    let g = reference.grid;
    let inv_s = [1.0 / g.spacing[0], 1.0 / g.spacing[1], 1.0 / g.spacing[2]];
    let mut ev = FieldEvaluator::new(cg, tab);
    let mut acc = FieldAccumulator::new(cg, tab);
    let mut sse = 0.0;
    let mut k = 0;
    for z in seg.z_lo..=seg.z_hi {
        ev.load_slice(z);
        for y in 0..g.dims[1] {
            ev.load_row(y);
            for x in 0..g.dims[0] {
                let q = sample_index(&g, x, y, z, ev.at(x));
                let (v, dq) = interp::sample_with_gradient(reference, q, AIR_HU);
                let r = v - seg.values[k] as f64;
                k += 1;
                sse += r * r;
                let two_r = 2.0 * r;
                let gv = [
                    two_r * dq[0] * inv_s[0],
                    two_r * dq[1] * inv_s[1],
                    two_r * dq[2] * inv_s[2],
                ];
                if gv != [0.0; 3] {
                    acc.add(x, gv);
                }
            }
            acc.end_row(y);
        }
        acc.end_slice(z);
    }
    let grad = ControlGrid {
        disp: acc.grad,
        ..cg.zeros_like_geometry()
    };
    (sse, grad)
}

impl ControlGrid {
    fn zeros_like_geometry(&self) -> ControlGrid {
        ControlGrid {
            image_grid: self.image_grid,
            cdims: self.cdims,
            cspacing: self.cspacing,
            corigin: self.corigin,
            disp: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization: JSON header + raw f32 little-endian 3-vectors.

#[derive(Serialize, Deserialize)]
struct ControlHeader {
    cdims: [usize; 3],
    cspacing_mm: [f64; 3],
    corigin_mm: [f64; 3],
    image: Grid3,
    dtype: String,
    data_file: String,
}

pub fn write_control_grid(cg: &ControlGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = path.with_extension("raw");
    let header = ControlHeader {
        cdims: cg.cdims,
        cspacing_mm: cg.cspacing,
        corigin_mm: cg.corigin,
        image: cg.image_grid,
        dtype: "f32le".into(),
        data_file: raw.file_name().unwrap().to_string_lossy().into_owned(),
    };
    let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let payload: Vec<u8> = cg.disp.iter().flatten().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

pub fn read_control_grid(path: impl AsRef<Path>) -> Result<ControlGrid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h: ControlHeader = serde_json::from_str(&text).map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
    if h.dtype != "f32le" {
        return Err(Error::format(path, format!("unsupported dtype {:?}", h.dtype)));
    }
    let raw = path.parent().unwrap_or(Path::new(".")).join(&h.data_file);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n = h.cdims.iter().product::<usize>();
    if bytes.len() != n * 12 {
        return Err(Error::format(path, "size mismatch between header and payload"));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let disp = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    ControlGrid::from_parts(h.image, h.cdims, h.cspacing_mm, h.corigin_mm, disp).map_err(|e| Error::format(path, e.to_string()))
}
