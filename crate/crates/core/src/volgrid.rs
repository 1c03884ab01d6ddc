//! Regular-grid volumes, acquisition segments, the resolution pyramid and
//! the on-disk volume container.
//!
//! All arrays use x-fastest ordering: `index = x + nx * (y + ny * z)`.
//! Intensities are stored as `f32` Hounsfield units.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel geometry of a volume: dimensions, spacing (mm) and origin (mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    #[serde(rename = "spacing_mm")]
    pub spacing: [f64; 3],
    #[serde(rename = "origin_mm")]
    pub origin: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Grid3 {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Argument(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Argument(format!(
                "grid spacing must be finite and positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Argument("grid origin must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels per z-slice.
    #[inline]
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Grid3::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position (mm) of a voxel center.
    #[inline]
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Physical position of the last voxel center along each axis.
    pub fn extent_max(&self) -> [f64; 3] {
        self.position(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    /// Continuous voxel-index coordinates of a physical point.
    #[inline]
    pub fn to_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Geometry of the block-averaged grid produced by [`downsample`].
    pub fn downsampled(&self, factor: [usize; 3]) -> Result<Grid3> {
        if factor.contains(&0) {
            return Err(Error::Argument(format!("downsample factor must be >= 1, got {factor:?}")));
        }
        let mut g = *self;
        for a in 0..3 {
            let f = factor[a];
            g.dims[a] = self.dims[a].div_ceil(f);
            g.spacing[a] = self.spacing[a] * f as f64;
            g.origin[a] = self.origin[a] + 0.5 * (f as f64 - 1.0) * self.spacing[a];
        }
        Ok(g)
    }

    pub(crate) fn check_same(&self, other: &Grid3, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Geometry(format!("{what}: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// A 3D scalar image in HU.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid3,
    pub values: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid3, values: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::Argument(format!(
                "volume has {} values, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("volume contains non-finite values".into()));
        }
        Ok(Volume { grid, values })
    }

    pub fn filled(grid: Grid3, value: f32) -> Self {
        Volume {
            grid,
            values: vec![value; grid.len()],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.grid.index(x, y, z)]
    }

    /// Values of slice `z`.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.grid.slice_len();
        &self.values[z * n..(z + 1) * n]
    }
}

/// Binary mask sharing the volume container.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub grid: Grid3,
    pub values: Vec<u8>,
}

impl Mask {
    pub fn new(grid: Grid3, values: Vec<u8>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::Argument("mask length does not match grid".into()));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(Mask { grid, values })
    }

    pub fn empty(grid: Grid3) -> Self {
        Mask {
            grid,
            values: vec![0; grid.len()],
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Threshold a real-valued field (same grid) at `level`, inclusive.
    pub fn from_threshold(grid: Grid3, field: &[f64], level: f64) -> Self {
        Mask {
            grid,
            values: field.iter().map(|&v| u8::from(v >= level)).collect(),
        }
    }
}

/// The slices `z_lo..=z_hi` of a volume acquired at timepoint `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub parent_grid: Grid3,
    pub z_lo: usize,
    pub z_hi: usize,
    pub t: usize,
    pub values: Vec<f32>,
}

impl Segment {
    pub fn new(parent_grid: Grid3, z_lo: usize, z_hi: usize, t: usize, values: Vec<f32>) -> Result<Self> {
        check_z_range(&parent_grid, z_lo, z_hi)?;
        let want = parent_grid.slice_len() * (z_hi - z_lo + 1);
        if values.len() != want {
            return Err(Error::Argument(format!(
                "segment slab has {} values, expected {want}",
                values.len()
            )));
        }
        Ok(Segment {
            parent_grid,
            z_lo,
            z_hi,
            t,
            values,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.z_hi - self.z_lo + 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slab value at parent-grid coordinates (z must lie inside the slab).
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        let g = &self.parent_grid;
        self.values[x + g.dims[0] * (y + g.dims[1] * (z - self.z_lo))]
    }
}

fn check_z_range(grid: &Grid3, z_lo: usize, z_hi: usize) -> Result<()> {
    if z_lo > z_hi || z_hi >= grid.dims[2] {
        return Err(Error::Range(format!(
            "slice range [{z_lo}, {z_hi}] invalid for nz = {}",
            grid.dims[2]
        )));
    }
    Ok(())
}

/// Slice extraction: copy slices `z_lo..=z_hi` verbatim.
pub fn extract_segment(vol: &Volume, z_lo: usize, z_hi: usize, t: usize) -> Result<Segment> {
    check_z_range(&vol.grid, z_lo, z_hi)?;
    let n = vol.grid.slice_len();
    Ok(Segment {
        parent_grid: vol.grid,
        z_lo,
        z_hi,
        t,
        values: vol.values[z_lo * n..(z_hi + 1) * n].to_vec(),
    })
}

/// Write a segment's slab back into a volume at its z-range.
pub fn insert_segment(vol: &mut Volume, seg: &Segment) -> Result<()> {
    vol.grid.check_same(&seg.parent_grid, "insert_segment")?;
    let n = vol.grid.slice_len();
    vol.values[seg.z_lo * n..(seg.z_hi + 1) * n].copy_from_slice(&seg.values);
    Ok(())
}

/// Block-average pooling. Partial edge blocks average over the voxels present.
pub fn downsample(vol: &Volume, factor: [usize; 3]) -> Result<Volume> {
    let out_grid = vol.grid.downsampled(factor)?;
    if factor == [1, 1, 1] {
        return Ok(Volume {
            grid: out_grid,
            values: vol.values.clone(),
        });
    }
    let n = vol.grid.slice_len();
    let values = pool_slab(
        &vol.grid,
        |z| &vol.values[z * n..(z + 1) * n],
        0,
        vol.grid.dims[2] - 1,
        factor,
        &out_grid,
    );
    Ok(Volume {
        grid: out_grid,
        values,
    })
}

/// Downsample a segment onto the pyramid grid `parent.downsampled(factor)`.
///
/// The coarse slab covers every coarse slice that overlaps the fine slab; each
/// coarse slice averages only the fine slices of this segment inside its block.
pub fn downsample_segment(seg: &Segment, factor: [usize; 3]) -> Result<Segment> {
    let out_grid = seg.parent_grid.downsampled(factor)?;
    if factor == [1, 1, 1] {
        return Ok(Segment {
            parent_grid: out_grid,
            ..seg.clone()
        });
    }
    let n = seg.parent_grid.slice_len();
    let values = pool_slab(
        &seg.parent_grid,
        |z| &seg.values[(z - seg.z_lo) * n..(z - seg.z_lo + 1) * n],
        seg.z_lo,
        seg.z_hi,
        factor,
        &out_grid,
    );
    let cz_lo = seg.z_lo / factor[2];
    let cz_hi = seg.z_hi / factor[2];
    Ok(Segment {
        parent_grid: out_grid,
        z_lo: cz_lo,
        z_hi: cz_hi,
        t: seg.t,
        values,
    })
}

fn accumulate_slice(
    g: &Grid3,
    slice: &[f32],
    factor: [usize; 3],
    out: &Grid3,
    sums: &mut [f64],
    counts: &mut [usize],
) {
    let [nx, ny, _] = g.dims;
    for y in 0..ny {
        let cy = y / factor[1];
        for x in 0..nx {
            let ci = x / factor[0] + out.dims[0] * cy;
            sums[ci] += slice[x + nx * y] as f64;
            counts[ci] += 1;
        }
    }
}

fn pool_slab<'a>(
    g: &Grid3,
    slice_of: impl Fn(usize) -> &'a [f32],
    z_lo: usize,
    z_hi: usize,
    factor: [usize; 3],
    out: &Grid3,
) -> Vec<f32> {
    let cn = out.slice_len();
    let cz_lo = z_lo / factor[2];
    let cz_hi = z_hi / factor[2];
    let mut result = vec![0f32; cn * (cz_hi - cz_lo + 1)];
    let mut sums = vec![0f64; cn];
    let mut counts = vec![0usize; cn];
    for cz in cz_lo..=cz_hi {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        let z0 = (cz * factor[2]).max(z_lo);
        let z1 = ((cz + 1) * factor[2] - 1).min(z_hi);
        for z in z0..=z1 {
            accumulate_slice(g, slice_of(z), factor, out, &mut sums, &mut counts);
        }
        let dst = &mut result[(cz - cz_lo) * cn..(cz - cz_lo + 1) * cn];
        for ((d, s), c) in dst.iter_mut().zip(&sums).zip(&counts) {
            *d = (*s / *c as f64) as f32;
        }
    }
    result
}

/// Trilinear resampling of `vol` onto a finer pyramid grid, clamping to the
/// nearest edge voxel outside the source extent.
pub fn upsample(vol: &Volume, target: &Grid3) -> Volume {
    let src = &vol.grid;
    let mut values = Vec::with_capacity(target.len());
    for z in 0..target.dims[2] {
        for y in 0..target.dims[1] {
            for x in 0..target.dims[0] {
                let q = src.to_index(target.position(x, y, z));
                values.push(crate::interp::sample_clamped(vol, q) as f32);
            }
        }
    }
    Volume {
        grid: *target,
        values,
    }
}

/// Voxel-wise arithmetic mean of identically-gridded volumes.
///
/// Each voxel's values are summed in ascending order, so the result does not
/// depend on the order of `vols`.
pub fn average_volumes(vols: &[Volume]) -> Result<Volume> {
    let first = vols
        .first()
        .ok_or_else(|| Error::Argument("average of an empty volume list".into()))?;
    for v in &vols[1..] {
        first.grid.check_same(&v.grid, "average_volumes")?;
    }
    let k = vols.len() as f64;
    let mut buf = vec![0f32; vols.len()];
    let values = (0..first.grid.len())
        .map(|i| {
            for (b, v) in buf.iter_mut().zip(vols) {
                *b = v.values[i];
            }
            buf.sort_by(f32::total_cmp);
            let s: f64 = buf.iter().map(|&v| v as f64).sum();
            (s / k) as f32
        })
        .collect();
    Ok(Volume {
        grid: first.grid,
        values,
    })
}

// ---------------------------------------------------------------------------
// On-disk container: JSON header + raw little-endian payload.

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segment: Option<SegmentHeader>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct SegmentHeader {
    z_lo: usize,
    z_hi: usize,
    t: usize,
}

fn data_path_for(header_path: &Path) -> (PathBuf, String) {
    let raw = header_path.with_extension("raw");
    let name = raw
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data.raw".into());
    (raw, name)
}

fn write_container(path: &Path, grid: &Grid3, dtype: &str, seg: Option<SegmentHeader>, payload: &[u8]) -> Result<()> {
    let (raw_path, data_file) = data_path_for(path);
    let header = Header {
        dims: grid.dims,
        spacing_mm: grid.spacing,
        origin_mm: grid.origin,
        dtype: dtype.into(),
        data_file,
        segment: seg,
    };
    let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

fn read_container(path: &Path, want_dtype: &str) -> Result<(Header, Grid3, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
    if header.dtype != want_dtype {
        return Err(Error::format(
            path,
            format!("dtype {:?}, expected {want_dtype:?}", header.dtype),
        ));
    }
    let grid = Grid3 {
        dims: header.dims,
        spacing: header.spacing_mm,
        origin: header.origin_mm,
    };
    grid.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let raw_path = path.parent().unwrap_or(Path::new(".")).join(&header.data_file);
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    Ok((header, grid, payload))
}

fn f32_payload(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn parse_f32(path: &Path, payload: &[u8], count: usize) -> Result<Vec<f32>> {
    if payload.len() != count * 4 {
        return Err(Error::format(
            path,
            format!("size mismatch: payload holds {} bytes, header implies {}", payload.len(), count * 4),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "payload contains non-finite values"));
    }
    Ok(values)
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_container(path.as_ref(), &vol.grid, "f32le", None, &f32_payload(&vol.values))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (_, grid, payload) = read_container(path, "f32le")?;
    let values = parse_f32(path, &payload, grid.len())?;
    Ok(Volume { grid, values })
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_container(path.as_ref(), &mask.grid, "u8", None, &mask.values)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (_, grid, payload) = read_container(path, "u8")?;
    if payload.len() != grid.len() {
        return Err(Error::format(path, "size mismatch between header and payload"));
    }
    if payload.iter().any(|&v| v > 1) {
        return Err(Error::format(path, "mask values must be 0 or 1"));
    }
    Ok(Mask { grid, values: payload })
}

pub fn write_segment(seg: &Segment, path: impl AsRef<Path>) -> Result<()> {
    let sh = SegmentHeader {
        z_lo: seg.z_lo,
        z_hi: seg.z_hi,
        t: seg.t,
    };
    write_container(path.as_ref(), &seg.parent_grid, "f32le", Some(sh), &f32_payload(&seg.values))
}

pub fn read_segment(path: impl AsRef<Path>) -> Result<Segment> {
    let path = path.as_ref();
    let (header, grid, payload) = read_container(path, "f32le")?;
    let sh = header
        .segment
        .ok_or_else(|| Error::format(path, "header lacks segment z-range"))?;
    check_z_range(&grid, sh.z_lo, sh.z_hi).map_err(|e| Error::format(path, e.to_string()))?;
    let count = grid.slice_len() * (sh.z_hi - sh.z_lo + 1);
    let values = parse_f32(path, &payload, count)?;
    Ok(Segment {
        parent_grid: grid,
        z_lo: sh.z_lo,
        z_hi: sh.z_hi,
        t: sh.t,
        values,
    })
}
