//! Overlap, centroid and intensity error metrics, and the per-timepoint
//! evaluation of a fitted run against phantom ground truth.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{self, ControlGrid, SplineTables};
use crate::error::{Error, Result};
use crate::interp;
use crate::pipeline::PipelineResult;
use crate::volgrid::{Grid3, Mask, Volume};

/// HU level halfway between lung and soft tissue.
pub const LUNG_EDGE_HU: f64 = -380.0;

/// Dice similarity coefficient; 1 when both masks are empty.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    a.grid.check_same(&b.grid, "dsc")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        na += x as usize;
        nb += y as usize;
        both += (x & y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Unweighted voxel centroid in mm.
pub fn centroid(m: &Mask) -> Result<[f64; 3]> {
    let g = &m.grid;
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (i, &v) in m.values.iter().enumerate() {
        if v != 0 {
            let [x, y, z] = g.coords(i);
            acc[0] += x as f64;
            acc[1] += y as f64;
            acc[2] += z as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument("centroid of an empty mask".into()));
    }
    Ok([
        g.origin[0] + g.spacing[0] * acc[0] / n as f64,
        g.origin[1] + g.spacing[1] * acc[1] / n as f64,
        g.origin[2] + g.spacing[2] * acc[2] / n as f64,
    ])
}

/// Distance between mask centroids (mm).
pub fn tre_centroid(a: &Mask, b: &Mask) -> Result<f64> {
    a.grid.check_same(&b.grid, "tre")?;
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    Ok(((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt())
}

/// Root-mean-square difference, over `region` when given.
pub fn rmse(a: &Volume, b: &Volume, region: Option<&Mask>) -> Result<f64> {
    a.grid.check_same(&b.grid, "rmse")?;
    if let Some(r) = region {
        a.grid.check_same(&r.grid, "rmse region")?;
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..a.values.len() {
        if region.is_none_or(|r| r.values[i] != 0) {
            let d = a.values[i] as f64 - b.values[i] as f64;
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument("rmse over an empty region".into()));
    }
    Ok((acc / n as f64).sqrt())
}

/// Trilinear warp of the {0,1} field, thresholded at 0.5.
pub fn warp_mask(mask: &Mask, cg: &ControlGrid) -> Result<Mask> {
    mask.grid.check_same(&cg.image_grid, "mask warp")?;
    let field = Volume {
        grid: mask.grid,
        values: mask.values.iter().map(|&v| v as f32).collect(),
    };
    let tab = SplineTables::new(cg)?;
    let w = bspline::warp_slab_with(&field, cg, &tab, 0, mask.grid.dims[2] - 1, 0.0)?;
    Ok(Mask::from_threshold(mask.grid, &w, 0.5))
}

/// Tumor segmentation of a frame: voxels at or above `level` within `radius_mm`
/// of `center`.
pub fn segment_ball(vol: &Volume, center: [f64; 3], radius_mm: f64, level: f64) -> Mask {
    let g = vol.grid;
    let vals = (0..g.len())
        .map(|i| {
            let [x, y, z] = g.coords(i);
            let p = g.position(x, y, z);
            let d2 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>();
            u8::from(d2 <= radius_mm * radius_mm && vol.values[i] as f64 >= level)
        })
        .collect();
    Mask { grid: g, values: vals }
}

/// Sub-slice height (in slice units) of the first soft-tissue to lung
/// transition going up each column `(x, y)`.
pub fn diaphragm_heights(vol: &Volume, y: usize, xs: &[usize], level: f64) -> Vec<Option<f64>> {
    let nz = vol.grid.dims[2];
    xs.iter()
        .map(|&x| {
            (1..nz).find_map(|z| {
                let (lo, hi) = (vol.at(x, y, z - 1) as f64, vol.at(x, y, z) as f64);
                (lo >= level && hi < level).then(|| (z - 1) as f64 + (lo - level) / (lo - hi))
            })
        })
        .collect()
}

/// One height jump between adjacent diaphragm columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiaphragmStep {
    pub y: usize,
    /// Left column of the pair.
    pub x: usize,
    /// Lower and upper surface heights (slices).
    pub lo: f64,
    pub hi: f64,
}

impl DiaphragmStep {
    pub fn size(&self) -> f64 {
        self.hi - self.lo
    }

    /// Whether the jump spans the plane between slices `z - 1` and `z`.
    pub fn crosses(&self, z: usize) -> bool {
        let b = z as f64 - 0.5;
        self.lo <= b && b <= self.hi
    }
}

/// Largest jump between adjacent columns of any row.
pub fn diaphragm_worst_step(vol: &Volume, columns: &[(usize, Vec<usize>)], level: f64) -> Option<DiaphragmStep> {
    let mut worst: Option<DiaphragmStep> = None;
    for (y, xs) in columns {
        let h = diaphragm_heights(vol, *y, xs, level);
        for (k, w) in h.windows(2).enumerate() {
            if xs[k + 1] != xs[k] + 1 {
                continue;
            }
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                let step = DiaphragmStep {
                    y: *y,
                    x: xs[k],
                    lo: a.min(b),
                    hi: a.max(b),
                };
                if worst.is_none_or(|w| step.size() > w.size()) {
                    worst = Some(step);
                }
            }
        }
    }
    worst
}

/// Largest height jump (slices) between adjacent columns of any row.
pub fn diaphragm_step(vol: &Volume, columns: &[(usize, Vec<usize>)], level: f64) -> f64 {
    diaphragm_worst_step(vol, columns, level).map_or(0.0, |s| s.size())
}

/// How tumor masks of estimated frames are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskRule {
    /// Threshold the frame inside a ball around the ground-truth centroid
    /// of radius `tumor radius + margin_mm`.
    Threshold { level: f64, margin_mm: f64 },
    /// Warp a mask given in reference space with the frame's transform.
    WarpReference(Mask),
}

impl Default for MaskRule {
    fn default() -> Self {
        MaskRule::Threshold {
            level: -370.0,
            margin_mm: 6.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        if v.is_empty() {
            return Stat::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Stat { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub dsc: Stat,
    pub tre_mm: Stat,
    pub rmse_hu: Stat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub timepoints: Vec<usize>,
    pub dsc: Vec<f64>,
    pub tre_mm: Vec<f64>,
    pub rmse_hu: Vec<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            n: self.timepoints.len(),
            dsc: Stat::of(&self.dsc),
            tre_mm: Stat::of(&self.tre_mm),
            rmse_hu: Stat::of(&self.rmse_hu),
        }
    }

    /// Per-timepoint CSV `t,dsc,tre_mm,rmse_hu`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["t", "dsc", "tre_mm", "rmse_hu"]).map_err(|e| Error::format(path, e.to_string()))?;
        for k in 0..self.timepoints.len() {
            w.write_record([
                self.timepoints[k].to_string(),
                format!("{}", self.dsc[k]),
                format!("{}", self.tre_mm[k]),
                format!("{}", self.rmse_hu[k]),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Everything known about the phantom that evaluation compares against.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub template: Volume,
    pub tumor: Mask,
    /// Fraction of each template voxel inside the tumor.
    pub tumor_fraction: Volume,
    pub tumor_radius_mm: f64,
    pub model: crate::surrmodel::MotionModel,
    pub signals: crate::surrmodel::SurrogateMatrix,
}

impl GroundTruth {
    pub fn from_spec(spec: &crate::phantom::PhantomSpec) -> Result<Self> {
        let (template, tumor_fraction) = crate::phantom::build_template_parts(spec)?;
        let tumor = Mask::from_threshold(spec.grid, &tumor_fraction.values.iter().map(|&v| v as f64).collect::<Vec<_>>(), 0.5);
        Ok(GroundTruth {
            template,
            tumor,
            tumor_fraction,
            tumor_radius_mm: spec.tumor.radius_mm,
            model: spec.gt_model()?,
            signals: spec.gt_signals()?,
        })
    }

    pub fn grid(&self) -> Grid3 {
        self.template.grid
    }

    pub fn motion(&self, t: usize) -> Result<ControlGrid> {
        crate::surrmodel::compose_motion(&self.signals, &self.model, t)
    }

    /// Ground-truth frame and tumor mask at `t`. The mask is the warped
    /// tumor fraction thresholded at one half.
    pub fn frame(&self, t: usize) -> Result<(Volume, Mask)> {
        let m = self.motion(t)?;
        let g = self.grid();
        let frac = bspline::warp_slab(&self.tumor_fraction, &m, 0, g.dims[2] - 1, 0.0)?;
        Ok((bspline::warp_volume(&self.template, &m)?, Mask::from_threshold(g, &frac, 0.5)))
    }
}

/// Metrics of estimated frames against ground truth. `estimate(t)` returns
/// the estimated frame and, for [`MaskRule::WarpReference`], the transform
/// used to warp the reference mask.
pub fn evaluate_frames<F>(truth: &GroundTruth, timepoints: &[usize], rule: &MaskRule, estimate: F) -> Result<EvalReport>
where
    F: Fn(usize) -> Result<(Volume, Option<ControlGrid>)> + Sync,
{
    let rows = timepoints
        .par_iter()
        .map(|&t| -> Result<(f64, f64, f64)> {
            let (gt_vol, gt_mask) = truth.frame(t)?;
            let (est, motion) = estimate(t)?;
            est.grid.check_same(&gt_vol.grid, "estimated frame")?;
            let est_mask = match rule {
                MaskRule::Threshold { level, margin_mm } => {
                    let c = centroid(&gt_mask)?;
                    segment_ball(&est, c, truth.tumor_radius_mm + margin_mm, *level)
                }
                MaskRule::WarpReference(m) => {
                    let cg = motion.ok_or_else(|| Error::Argument("mask warp needs the frame transform".into()))?;
                    warp_mask(m, &cg)?
                }
            };
            let d = dsc(&est_mask, &gt_mask)?;
            let tre = if est_mask.count() == 0 {
                f64::INFINITY
            } else {
                tre_centroid(&est_mask, &gt_mask)?
            };
            Ok((d, tre, rmse(&est, &gt_vol, None)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        timepoints: timepoints.to_vec(),
        dsc: rows.iter().map(|r| r.0).collect(),
        tre_mm: rows.iter().map(|r| r.1).collect(),
        rmse_hu: rows.iter().map(|r| r.2).collect(),
    })
}

/// Metrics of a fitted run: frames are the final reference warped by each
/// timepoint's transform.
pub fn evaluate_run(result: &PipelineResult, truth: &GroundTruth, timepoints: &[usize], rule: &MaskRule) -> Result<EvalReport> {
    result.i0.grid.check_same(&truth.grid(), "result vs ground truth")?;
    let nt = result.signals.nt().min(truth.signals.nt());
    if let Some(&t) = timepoints.iter().find(|&&t| t >= nt) {
        return Err(Error::Range(format!("timepoint {t} outside 0..{nt}")));
    }
    evaluate_frames(truth, timepoints, rule, |t| {
        let m = result.motion(t)?;
        Ok((bspline::warp_volume(&result.i0, &m)?, Some(m)))
    })
}

/// Metrics of the phase-sorted baseline: each timepoint is represented by
/// the sorted volume of its phase label.
pub fn evaluate_sorted(truth: &GroundTruth, phases: &[Volume], labels: &[usize], timepoints: &[usize], rule: &MaskRule) -> Result<EvalReport> {
    if matches!(rule, MaskRule::WarpReference(_)) {
        return Err(Error::Argument("sorted phase volumes carry no transform to warp a mask with".into()));
    }
    for &t in timepoints {
        let l = *labels.get(t).ok_or_else(|| Error::Range(format!("no label for timepoint {t}")))?;
        if l >= phases.len() {
            return Err(Error::Range(format!("label {l} at timepoint {t} but {} phases", phases.len())));
        }
    }
    evaluate_frames(truth, timepoints, rule, |t| Ok((phases[labels[t]].clone(), None)))
}

/// Warp a reference by a transform; used by callers building frames.
pub fn frame_from(reference: &Volume, m: &ControlGrid) -> Result<Volume> {
    bspline::warp_volume(reference, m)
}

/// Trilinear sample of a volume at a physical point (air outside).
pub fn sample_mm(vol: &Volume, p: [f64; 3]) -> f64 {
    interp::sample(vol, vol.grid.to_index(p), bspline::AIR_HU)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g() -> Grid3 {
        Grid3::new([6, 5, 4], [1.0, 2.0, 3.0], [0.0; 3]).unwrap()
    }

    fn mask_from(f: impl Fn(usize, usize, usize) -> bool) -> Mask {
        let grid = g();
        Mask::new(
            grid,
            (0..grid.len())
                .map(|i| {
                    let [x, y, z] = grid.coords(i);
                    u8::from(f(x, y, z))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn dsc_cases() {
        let a = mask_from(|x, y, z| x < 2 && y < 2 && z < 2);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask_from(|x, y, z| x >= 3 && y < 2 && z < 2);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let c = mask_from(|x, y, z| (1..3).contains(&x) && y < 2 && z < 2);
        assert_eq!(a.count(), 8);
        assert_eq!(c.count(), 8);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
        assert_eq!(dsc(&Mask::empty(g()), &Mask::empty(g())).unwrap(), 1.0);
        assert_eq!(dsc(&a, &c).unwrap(), dsc(&c, &a).unwrap());
    }

    #[test]
    fn tre_cases() {
        let a = mask_from(|x, y, z| x < 2 && y < 2 && z < 2);
        assert_eq!(tre_centroid(&a, &a).unwrap(), 0.0);
        let b = mask_from(|x, y, z| x < 2 && y < 2 && (1..3).contains(&z));
        assert!((tre_centroid(&a, &b).unwrap() - 3.0).abs() < 1e-12);
        assert!(tre_centroid(&a, &Mask::empty(g())).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Vec<bool> = (0..120).map(|_| rng.gen_bool(0.3)).collect();
        let s: Vec<bool> = (0..120).map(|_| rng.gen_bool(0.3)).collect();
        let ma = mask_from(|x, y, z| r[x + 6 * (y + 5 * z)]);
        let mb = mask_from(|x, y, z| s[x + 6 * (y + 5 * z)]);
        let cen = |v: &Vec<bool>| {
            let mut c = [0.0; 3];
            let mut n = 0.0;
            for i in 0..120 {
                if v[i] {
                    c[0] += (i % 6) as f64 * 1.0;
                    c[1] += ((i / 6) % 5) as f64 * 2.0;
                    c[2] += (i / 30) as f64 * 3.0;
                    n += 1.0;
                }
            }
            [c[0] / n, c[1] / n, c[2] / n]
        };
        let (ca, cb) = (cen(&r), cen(&s));
        let want = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2) + (ca[2] - cb[2]).powi(2)).sqrt();
        assert!((tre_centroid(&ma, &mb).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn rmse_cases() {
        let grid = g();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Volume::new(grid, (0..grid.len()).map(|_| rng.gen_range(-100.0..100.0)).collect()).unwrap();
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        let off = Volume::new(grid, a.values.iter().map(|v| v + 10.0).collect()).unwrap();
        assert!((rmse(&a, &off, None).unwrap() - 10.0).abs() < 1e-4);
        let b = Volume::new(grid, (0..grid.len()).map(|_| rng.gen_range(-100.0..100.0)).collect()).unwrap();
        let want = (a.values.iter().zip(&b.values).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / grid.len() as f64).sqrt();
        assert!((rmse(&a, &b, None).unwrap() - want).abs() < 1e-9);
        let c = Volume::new(grid, (0..grid.len()).map(|_| rng.gen_range(-100.0..100.0)).collect()).unwrap();
        assert!(rmse(&a, &c, None).unwrap() <= rmse(&a, &b, None).unwrap() + rmse(&b, &c, None).unwrap() + 1e-9);
    }

    #[test]
    fn diaphragm_height_interpolates() {
        let grid = Grid3::new([3, 1, 6], [1.0; 3], [0.0; 3]).unwrap();
        let mut v = Volume::filled(grid, -800.0);
        // column 0: tissue up to slice 2; column 1: up to slice 4
        for z in 0..3 {
            v.values[grid.index(0, 0, z)] = 40.0;
        }
        for z in 0..5 {
            v.values[grid.index(1, 0, z)] = 40.0;
        }
        let h = diaphragm_heights(&v, 0, &[0, 1, 2], LUNG_EDGE_HU);
        assert!((h[0].unwrap() - 2.5).abs() < 1e-12);
        assert!((h[1].unwrap() - 4.5).abs() < 1e-12);
        assert_eq!(h[2], None);
        assert!((diaphragm_step(&v, &[(0, vec![0, 1, 2])], LUNG_EDGE_HU) - 2.0).abs() < 1e-12);
    }
}
