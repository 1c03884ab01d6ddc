//! Motion-compensated iterative reconstruction of the reference volume.

use rayon::prelude::*;

use crate::bspline::{sample_index, ControlGrid, FieldEvaluator, SplineTables, AIR_HU};
use crate::error::{Error, Result};
use crate::interp;
use crate::surrmodel::{compose_unchecked, LineSearch, MotionModel, StepInfo, SurrogateMatrix};
use crate::volgrid::{Grid3, Mask, Segment, Volume};

/// Segments per private accumulator when scattering in parallel.
const CHUNK: usize = 16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconState {
    pub iteration: usize,
    pub accepted: usize,
    /// Objective values; entry 0 is the starting value.
    pub history: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// Visits the warped sample position (index coordinates) of every voxel of
/// slices `z_lo..=z_hi`, in slab order.
fn visit_slab(g: &Grid3, cg: &ControlGrid, tab: &SplineTables, z_lo: usize, z_hi: usize, mut f: impl FnMut(usize, [f64; 3])) {
    let mut ev = FieldEvaluator::new(cg, tab);
    let mut k = 0;
    for z in z_lo..=z_hi {
        ev.load_slice(z);
        for y in 0..g.dims[1] {
            ev.load_row(y);
            for x in 0..g.dims[0] {
                f(k, sample_index(g, x, y, z, ev.at(x)));
                k += 1;
            }
        }
    }
}

fn check_seg(grid: &Grid3, cg: &ControlGrid, seg: &Segment) -> Result<()> {
    grid.check_same(&cg.image_grid, "scatter vs control grid")?;
    grid.check_same(&seg.parent_grid, "scatter vs segment")
}

/// Transpose of warp-then-extract: scatters each segment value onto the 8
/// trilinear source voxels of its warped sample, and the trilinear weights
/// into `weights`.
pub fn adjoint_scatter(seg_residual: &Segment, cg: &ControlGrid, accum: &mut [f64], weights: &mut [f64]) -> Result<()> {
    let g = cg.image_grid;
    check_seg(&g, cg, seg_residual)?;
    if accum.len() != g.len() || weights.len() != g.len() {
        return Err(Error::Geometry("accumulator length differs from the image grid".into()));
    }
    let tab = SplineTables::new(cg)?;
    visit_slab(&g, cg, &tab, seg_residual.z_lo, seg_residual.z_hi, |k, q| {
        interp::scatter(&g, q, seg_residual.values[k] as f64, accum, Some(&mut *weights));
    });
    Ok(())
}

/// Warped reference restricted to the segment's slab (air outside).
fn warp_slab_of(i0: &Volume, m: &ControlGrid, tab: &SplineTables, seg: &Segment) -> Vec<f64> {
    let mut out = vec![0.0; seg.len()];
    visit_slab(&i0.grid, m, tab, seg.z_lo, seg.z_hi, |k, q| out[k] = interp::sample(i0, q, AIR_HU));
    out
}

struct Prepared {
    motions: Vec<ControlGrid>,
    tab: SplineTables,
}

fn prepare(i0: &Volume, s: &SurrogateMatrix, c: &MotionModel, segs: &[Segment]) -> Result<Prepared> {
    if s.ns() != c.ns() {
        return Err(Error::Geometry(format!("{} signals for {} models", s.ns(), c.ns())));
    }
    for seg in segs {
        check_seg(&i0.grid, c.geometry(), seg)?;
        if seg.t >= s.nt() {
            return Err(Error::Range(format!("segment timepoint {} outside 0..{}", seg.t, s.nt())));
        }
    }
    Ok(Prepared {
        motions: segs.iter().map(|seg| compose_unchecked(s, c, seg.t)).collect(),
        tab: SplineTables::new(c.geometry())?,
    })
}

fn sse(i0: &Volume, p: &Prepared, segs: &[Segment]) -> f64 {
    let parts: Vec<f64> = segs
        .par_iter()
        .zip(&p.motions)
        .map(|(seg, m)| {
            warp_slab_of(i0, m, &p.tab, seg)
                .iter()
                .zip(&seg.values)
                .map(|(a, b)| {
                    let r = a - *b as f64;
                    r * r
                })
                .sum::<f64>()
        })
        .collect();
    parts.iter().sum()
}

/// Objective, its gradient with respect to every reference voxel, and the
/// accumulated trilinear weights.
fn gradient(i0: &Volume, p: &Prepared, segs: &[Segment]) -> (f64, Vec<f64>, Vec<f64>) {
    let g = i0.grid;
    let idx: Vec<usize> = (0..segs.len()).collect();
    // per-segment sums added in segment order, as the model fit does, so
    // both stages report the same objective for the same state
    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; g.len()];
            let mut wts = vec![0.0; g.len()];
            let mut fs = Vec::with_capacity(chunk.len());
            for &j in chunk {
                let seg = &segs[j];
                let m = &p.motions[j];
                let mut f = 0.0;
                visit_slab(&g, m, &p.tab, seg.z_lo, seg.z_hi, |k, q| {
                    let r = interp::sample(i0, q, AIR_HU) - seg.values[k] as f64;
                    f += r * r;
                    interp::scatter(&g, q, 2.0 * r, &mut acc, Some(&mut wts));
                });
                fs.push(f);
            }
            (fs, acc, wts)
        })
        .collect();
    let f: f64 = parts.iter().flat_map(|p| p.0.iter()).sum();
    let mut it = parts.into_iter();
    let (_, mut acc, mut wts) = it.next().unwrap_or((Vec::new(), vec![0.0; g.len()], vec![0.0; g.len()]));
    for (_, pa, pw) in it {
        acc.iter_mut().zip(&pa).for_each(|(a, b)| *a += b);
        wts.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
    }
    (f, acc, wts)
}

/// `||A d||^2` where `A` is the linear part of warp-then-extract.
fn forward_norm2(grid: &Grid3, d: &[f64], p: &Prepared, segs: &[Segment]) -> f64 {
    let parts: Vec<f64> = segs
        .par_iter()
        .zip(&p.motions)
        .map(|(seg, m)| {
            let mut acc = 0.0;
            visit_slab(grid, m, &p.tab, seg.z_lo, seg.z_hi, |_, q| {
                let v = interp::sample_field(grid, d, q, 0.0);
                acc += v * v;
            });
            acc
        })
        .collect();
    parts.iter().sum()
}

/// Voxels touched by at least one warped segment sample.
pub fn coverage(i0: &Volume, s: &SurrogateMatrix, c: &MotionModel, segs: &[Segment]) -> Result<Mask> {
    let p = prepare(i0, s, c, segs)?;
    let g = i0.grid;
    let mut wts = vec![0.0; g.len()];
    let mut scratch = vec![0.0; g.len()];
    for (seg, m) in segs.iter().zip(&p.motions) {
        visit_slab(&g, m, &p.tab, seg.z_lo, seg.z_hi, |_, q| {
            interp::scatter(&g, q, 0.0, &mut scratch, Some(&mut wts));
        });
    }
    Mask::new(g, wts.iter().map(|&w| u8::from(w > 0.0)).collect())
}

fn step_prepared(
    i0: &mut Volume,
    p: &Prepared,
    segs: &[Segment],
    state: &mut ReconState,
    ls: &LineSearch,
) -> Result<StepInfo> {
    let (f0, grad, wts) = gradient(i0, p, segs);
    if !f0.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite reconstruction gradient (objective {f0})")));
    }
    if state.history.is_empty() {
        state.history.push(f0);
    }
    let g2: f64 = grad.iter().map(|v| v * v).sum();
    let mut lambda = 0.0;
    let mut f1 = f0;
    if g2 > 0.0 && f0 > 0.0 {
        let ag2 = forward_norm2(&i0.grid, &grad, p, segs);
        let mut lam = if ag2 > 0.0 { g2 / (2.0 * ag2) } else { 0.0 };
        for _ in 0..=ls.max_backtracks {
            if lam == 0.0 {
                break;
            }
            let vals: Vec<f32> = i0
                .values
                .iter()
                .zip(grad.iter().zip(&wts))
                .map(|(&v, (&gv, &w))| if w > 0.0 { (v as f64 - lam * gv) as f32 } else { v })
                .collect();
            let trial = Volume { grid: i0.grid, values: vals };
            let ft = sse(&trial, p, segs);
            if ft.is_finite() && ft <= f0 - ls.armijo_c1 * lam * g2 {
                *i0 = trial;
                lambda = lam;
                f1 = ft;
                break;
            }
            lam *= ls.contraction;
        }
    }
    state.iteration += 1;
    if lambda > 0.0 {
        state.accepted += 1;
    }
    state.history.push(f1);
    state.lambdas.push(lambda);
    Ok(StepInfo {
        f_before: f0,
        f_after: f1,
        lambda,
    })
}

/// One descent step on the reference volume. The first trial is the exact
/// minimizer along the gradient (the objective is quadratic in `I0`); it is
/// then checked by the Armijo rule.
pub fn mcir_step(
    i0: &Volume,
    s: &SurrogateMatrix,
    c: &MotionModel,
    segs: &[Segment],
    state: &mut ReconState,
    ls: &LineSearch,
) -> Result<(Volume, StepInfo)> {
    let p = prepare(i0, s, c, segs)?;
    let mut out = i0.clone();
    let info = step_prepared(&mut out, &p, segs, state, ls)?;
    Ok((out, info))
}

/// Repeats [`mcir_step`] until the relative decrease drops below `tol_f`,
/// a step is rejected, or `max_iters` is reached.
pub fn mcir_run(
    i0: &Volume,
    s: &SurrogateMatrix,
    c: &MotionModel,
    segs: &[Segment],
    max_iters: usize,
    tol_f: f64,
    ls: &LineSearch,
) -> Result<(Volume, ReconState)> {
    if max_iters == 0 {
        return Err(Error::Argument("max_iters must be >= 1".into()));
    }
    let p = prepare(i0, s, c, segs)?;
    let mut out = i0.clone();
    let mut state = ReconState::default();
    for _ in 0..max_iters {
        let info = step_prepared(&mut out, &p, segs, &mut state, ls)?;
        if info.f_before == 0.0 {
            state.history.pop();
            state.lambdas.pop();
            state.iteration -= 1;
            break;
        }
        if info.lambda == 0.0 || info.f_before - info.f_after < tol_f * info.f_before {
            break;
        }
    }
    Ok((out, state))
}

/// Weight-normalized scatter of all segments under zero motion.
pub fn zero_motion_init(grid: Grid3, segs: &[Segment]) -> Result<Volume> {
    let mut acc = vec![0.0; grid.len()];
    let mut wts = vec![0.0; grid.len()];
    let n = grid.slice_len();
    for seg in segs {
        grid.check_same(&seg.parent_grid, "initial reconstruction")?;
        let off = seg.z_lo * n;
        for (k, &v) in seg.values.iter().enumerate() {
            acc[off + k] += v as f64;
            wts[off + k] += 1.0;
        }
    }
    let vals = acc
        .iter()
        .zip(&wts)
        .map(|(&a, &w)| if w > 0.0 { (a / w) as f32 } else { AIR_HU as f32 })
        .collect();
    Volume::new(grid, vals)
}
