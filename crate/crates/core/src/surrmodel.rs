//! Surrogate-driven motion model: per-timepoint transforms are linear
//! combinations of correspondence models weighted by surrogate signals.

use std::path::Path;

use rayon::prelude::*;

use crate::bspline::{self, ControlGrid, SplineTables};
use crate::error::{Error, Result};
use crate::hypergrad;
use crate::volgrid::{Segment, Volume};

/// `ns x nt` matrix of surrogate values, row-major by signal.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateMatrix {
    ns: usize,
    nt: usize,
    s: Vec<f64>,
}

impl SurrogateMatrix {
    pub fn new(ns: usize, nt: usize, s: Vec<f64>) -> Result<Self> {
        if ns == 0 || nt == 0 {
            return Err(Error::Argument("surrogate matrix needs at least one signal and one timepoint".into()));
        }
        if s.len() != ns * nt {
            return Err(Error::Argument(format!("surrogate matrix {ns}x{nt} given {} values", s.len())));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("surrogate values are not finite".into()));
        }
        Ok(SurrogateMatrix { ns, nt, s })
    }

    pub fn zeros(ns: usize, nt: usize) -> Result<Self> {
        Self::new(ns, nt, vec![0.0; ns * nt])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nt = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != nt) {
            return Err(Error::Argument("surrogate rows differ in length".into()));
        }
        Self::new(rows.len(), nt, rows.concat())
    }

    #[inline]
    pub fn ns(&self) -> usize {
        self.ns
    }

    #[inline]
    pub fn nt(&self) -> usize {
        self.nt
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.s[i * self.nt + t]
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, v: f64) {
        self.s[i * self.nt + t] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.s[i * self.nt..(i + 1) * self.nt]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let nt = self.nt;
        &mut self.s[i * nt..(i + 1) * nt]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.ns).map(|i| self.get(i, t)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }

    /// Population standard deviation of each signal.
    pub fn row_std(&self) -> Vec<f64> {
        (0..self.ns)
            .map(|i| {
                let r = self.row(i);
                let m = r.iter().sum::<f64>() / r.len() as f64;
                (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / r.len() as f64).sqrt()
            })
            .collect()
    }

    /// CSV with header `t,s1,s2,...` and one row per timepoint.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.ns).map(|i| format!("s{i}")));
        w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
        for t in 0..self.nt {
            let mut rec = vec![t.to_string()];
            rec.extend((0..self.ns).map(|i| format!("{}", self.get(i, t))));
            w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            k => Error::format(path, format!("{k:?}")),
        })?;
        let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
        let ns = header.len().saturating_sub(1);
        if ns == 0 || &header[0] != "t" || (1..=ns).any(|i| header[i] != format!("s{i}")) {
            return Err(Error::format(path, "expected header t,s1,s2,..."));
        }
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); ns];
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let t: usize = rec[0].trim().parse().map_err(|_| Error::format(path, format!("bad timepoint on row {row}")))?;
            if t != row {
                return Err(Error::format(path, format!("timepoints must be 0..n in order, found {t} on row {row}")));
            }
            for i in 0..ns {
                let v: f64 = rec[i + 1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad value on row {row}")))?;
                cols[i].push(v);
            }
        }
        Self::from_rows(&cols).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// One correspondence model per surrogate signal, all on one lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionModel {
    pub c: Vec<ControlGrid>,
}

impl MotionModel {
    pub fn new(c: Vec<ControlGrid>) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::Argument("motion model needs at least one correspondence model".into()));
        }
        for ci in &c[1..] {
            c[0].check_same_geometry(ci, "motion model")?;
        }
        Ok(MotionModel { c })
    }

    pub fn zeros(template: &ControlGrid, ns: usize) -> Result<Self> {
        Self::new(vec![template.zeros_like(); ns])
    }

    pub fn ns(&self) -> usize {
        self.c.len()
    }

    pub fn geometry(&self) -> &ControlGrid {
        &self.c[0]
    }

    pub fn dot(&self, other: &MotionModel) -> f64 {
        self.c.iter().zip(&other.c).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn max_norm(&self) -> f64 {
        self.c.iter().map(|c| c.max_norm()).fold(0.0, f64::max)
    }
}

fn check_model(s: &SurrogateMatrix, c: &MotionModel) -> Result<()> {
    if s.ns() != c.ns() {
        return Err(Error::Geometry(format!(
            "{} surrogate signals but {} correspondence models",
            s.ns(),
            c.ns()
        )));
    }
    Ok(())
}

/// `M_t = sum_i S[i,t] C_i`
pub fn compose_motion(s: &SurrogateMatrix, c: &MotionModel, t: usize) -> Result<ControlGrid> {
    check_model(s, c)?;
    if t >= s.nt() {
        return Err(Error::Range(format!("timepoint {t} outside 0..{}", s.nt())));
    }
    Ok(compose_unchecked(s, c, t))
}

pub(crate) fn compose_unchecked(s: &SurrogateMatrix, c: &MotionModel, t: usize) -> ControlGrid {
    let mut m = c.c[0].zeros_like();
    for (i, ci) in c.c.iter().enumerate() {
        let w = s.get(i, t);
        if w != 0.0 {
            m.axpy(w, ci);
        }
    }
    m
}

fn check_inputs(i0: &Volume, s: &SurrogateMatrix, c: &MotionModel, segs: &[Segment]) -> Result<()> {
    check_model(s, c)?;
    i0.grid.check_same(&c.geometry().image_grid, "reference vs motion model")?;
    for seg in segs {
        i0.grid.check_same(&seg.parent_grid, "reference vs segment")?;
        if seg.t >= s.nt() {
            return Err(Error::Range(format!(
                "segment timepoint {} outside surrogate range 0..{}",
                seg.t,
                s.nt()
            )));
        }
    }
    Ok(())
}

pub(crate) fn sse_all(i0: &Volume, s: &SurrogateMatrix, c: &MotionModel, tab: &SplineTables, segs: &[Segment]) -> f64 {
    let parts: Vec<f64> = segs
        .par_iter()
        .map(|seg| {
            let m = compose_unchecked(s, c, seg.t);
            bspline::segment_sse_with(i0, &m, tab, seg)
        })
        .collect();
    parts.iter().sum()
}

/// Sum of squared errors between warped reference and every segment.
pub fn objective(i0: &Volume, s: &SurrogateMatrix, c: &MotionModel, segs: &[Segment]) -> Result<f64> {
    check_inputs(i0, s, c, segs)?;
    let tab = SplineTables::new(c.geometry())?;
    Ok(sse_all(i0, s, c, &tab, segs))
}

/// Objective plus `grad f` with respect to each `M_t` (None where a
/// timepoint has no segment).
pub fn timepoint_gradients(
    i0: &Volume,
    s: &SurrogateMatrix,
    c: &MotionModel,
    segs: &[Segment],
) -> Result<(f64, Vec<Option<ControlGrid>>)> {
    check_inputs(i0, s, c, segs)?;
    let tab = SplineTables::new(c.geometry())?;
    timepoint_gradients_with(i0, s, c, &tab, segs)
}

pub(crate) fn timepoint_gradients_with(
    i0: &Volume,
    s: &SurrogateMatrix,
    c: &MotionModel,
    tab: &SplineTables,
    segs: &[Segment],
) -> Result<(f64, Vec<Option<ControlGrid>>)> {
    let parts: Vec<(f64, ControlGrid)> = segs
        .par_iter()
        .map(|seg| {
            let m = compose_unchecked(s, c, seg.t);
            bspline::residual_and_gradient_with(i0, &m, tab, seg)
        })
        .collect();
    let mut f = 0.0;
    let mut grads: Vec<Option<ControlGrid>> = vec![None; s.nt()];
    for (seg, (sse, g)) in segs.iter().zip(parts) {
        if !g.is_finite() || !sse.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for segment t={} slices {}..={} (sse {sse})",
                seg.t, seg.z_lo, seg.z_hi
            )));
        }
        f += sse;
        match &mut grads[seg.t] {
            Some(acc) => acc.axpy(1.0, &g),
            slot => *slot = Some(g),
        }
    }
    Ok((f, grads))
}

/// `dF/dC_i = sum_t S[i,t] grad_{M_t} f`
pub fn aggregate_gradient(s: &SurrogateMatrix, grads: &[Option<ControlGrid>], template: &ControlGrid) -> MotionModel {
    let mut out = vec![template.zeros_like(); s.ns()];
    for (t, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            for (i, o) in out.iter_mut().enumerate() {
                let w = s.get(i, t);
                if w != 0.0 {
                    o.axpy(w, g);
                }
            }
        }
    }
    MotionModel { c: out }
}

/// Line-search and stopping parameters shared by the model fit and MCIR.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LineSearch {
    /// Initial trial moves the largest control point by this fraction of
    /// the smallest knot spacing.
    pub initial_move: f64,
    pub contraction: f64,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
    /// Try the minimizer of the parabola through the accepted trial once.
    pub refine: bool,
}

/// Minimizer of `q(l) = f0 - g2 l + a l^2` fitted through `(lam, f_lam)`.
pub(crate) fn parabola_step(f0: f64, g2: f64, lam: f64, f_lam: f64) -> Option<f64> {
    let a = (f_lam - f0 + g2 * lam) / (lam * lam);
    let l = g2 / (2.0 * a);
    (a > 0.0 && l.is_finite() && l > 0.0).then_some(l)
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch {
            initial_move: 0.5,
            contraction: 0.5,
            armijo_c1: 1e-4,
            max_backtracks: 12,
            refine: true,
        }
    }
}

/// When surrogate signals are updated inside a fit run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateSchedule {
    PerIteration,
    PerRun,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iters: usize,
    pub tol_f: f64,
    /// Surrogate learning rate; 0 freezes the signals.
    pub alpha: f64,
    pub schedule: SurrogateSchedule,
    pub line_search: LineSearch,
}

impl FitOptions {
    pub fn driven(max_iters: usize) -> Self {
        FitOptions {
            max_iters,
            tol_f: 1e-4,
            alpha: 0.0,
            schedule: SurrogateSchedule::PerIteration,
            line_search: LineSearch::default(),
        }
    }
}

/// Per-iteration record of a fit run.
#[derive(Clone, Debug, PartialEq)]
pub struct IterLog {
    pub lambda: f64,
    /// Objective after the C step.
    pub f_model: f64,
    /// Surrogate step actually applied (0 when skipped or reverted).
    pub alpha_applied: f64,
    /// Objective after the surrogate update.
    pub f: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitState {
    pub iteration: usize,
    pub accepted: usize,
    /// Objective values; entry 0 is the starting value.
    pub history: Vec<f64>,
    pub log: Vec<IterLog>,
    /// Per-timepoint gradients at the model before the latest step.
    pub grad_km1: Option<Vec<Option<ControlGrid>>>,
    /// Per-timepoint gradients one step earlier.
    pub grad_km2: Option<Vec<Option<ControlGrid>>>,
    /// Model before the latest step.
    pub c_km1: Option<MotionModel>,
    /// Step length of the latest step.
    pub lambda_k: f64,
    /// Step length of the step before it.
    pub lambda_km1: f64,
}

impl FitState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn objective(&self) -> Option<f64> {
        self.history.last().copied()
    }
}

/// Outcome of a single model step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub f_before: f64,
    pub f_after: f64,
    /// 0 when the step was rejected or the gradient vanished.
    pub lambda: f64,
}

/// One gradient step on the correspondence models with backtracking line
/// search. Updates `c` in place when the step is accepted.
pub fn fit_step(
    state: &mut FitState,
    i0: &Volume,
    s: &SurrogateMatrix,
    c: &mut MotionModel,
    segs: &[Segment],
    ls: &LineSearch,
) -> Result<StepInfo> {
    check_inputs(i0, s, c, segs)?;
    let tab = SplineTables::new(c.geometry())?;
    fit_step_with(state, i0, s, c, &tab, segs, ls)
}

fn fit_step_with(
    state: &mut FitState,
    i0: &Volume,
    s: &SurrogateMatrix,
    c: &mut MotionModel,
    tab: &SplineTables,
    segs: &[Segment],
    ls: &LineSearch,
) -> Result<StepInfo> {
    let (f0, grads) = timepoint_gradients_with(i0, s, c, tab, segs)?;
    if state.history.is_empty() {
        state.history.push(f0);
    }
    let dir = aggregate_gradient(s, &grads, c.geometry());
    let g2 = dir.dot(&dir);
    let before = c.clone();
    let mut lambda = 0.0;
    let mut f1 = f0;
    if g2 > 0.0 && f0 > 0.0 {
        let cs = c.geometry().cspacing;
        let min_cs = cs[0].min(cs[1]).min(cs[2]);
        let lam0 = ls.initial_move * min_cs / dir.max_norm();
        let trial_at = |lam: f64| {
            let mut trial = before.clone();
            for (ci, di) in trial.c.iter_mut().zip(&dir.c) {
                ci.axpy(-lam, di);
            }
            let ft = sse_all(i0, s, &trial, tab, segs);
            (trial, ft)
        };
        let mut lam = lam0;
        for _ in 0..=ls.max_backtracks {
            let (trial, ft) = trial_at(lam);
            if ft.is_finite() && ft <= f0 - ls.armijo_c1 * lam * g2 {
                *c = trial;
                lambda = lam;
                f1 = ft;
                break;
            }
            lam *= ls.contraction;
        }
        if lambda > 0.0 && ls.refine {
            if let Some(lq) = parabola_step(f0, g2, lambda, f1) {
                let lq = lq.min(lam0);
                if (lq / lambda - 1.0).abs() > 0.05 {
                    let (trial, ft) = trial_at(lq);
                    if ft.is_finite() && ft < f1 {
                        *c = trial;
                        lambda = lq;
                        f1 = ft;
                    }
                }
            }
        }
    }
    state.iteration += 1;
    if lambda > 0.0 {
        state.accepted += 1;
    }
    state.grad_km2 = state.grad_km1.take();
    state.grad_km1 = Some(grads);
    state.c_km1 = Some(before);
    state.lambda_km1 = state.lambda_k;
    state.lambda_k = lambda;
    state.history.push(f1);
    Ok(StepInfo {
        f_before: f0,
        f_after: f1,
        lambda,
    })
}

/// Surrogate-driven fit: repeated model steps with the signals frozen.
pub fn fit_run(
    i0: &Volume,
    s: &SurrogateMatrix,
    c: &MotionModel,
    segs: &[Segment],
    max_iters: usize,
) -> Result<(MotionModel, FitState)> {
    let mut s = s.clone();
    let (c, state) = fit_run_with(i0, &mut s, c, segs, &FitOptions::driven(max_iters))?;
    Ok((c, state))
}

/// Fit loop shared by every mode. With `opts.alpha > 0` the surrogate
/// signals are updated from the hypergradient after each model step (or
/// once at the end of the run).
pub fn fit_run_with(
    i0: &Volume,
    s: &mut SurrogateMatrix,
    c: &MotionModel,
    segs: &[Segment],
    opts: &FitOptions,
) -> Result<(MotionModel, FitState)> {
    if opts.max_iters == 0 {
        return Err(Error::Argument("max_iters must be >= 1".into()));
    }
    check_inputs(i0, s, c, segs)?;
    let tab = SplineTables::new(c.geometry())?;
    let mut c = c.clone();
    let mut state = FitState::new();
    for it in 0..opts.max_iters {
        let info = fit_step_with(&mut state, i0, s, &mut c, &tab, segs, &opts.line_search)?;
        if info.f_before == 0.0 {
            state.history.pop();
            state.iteration -= 1;
            break;
        }
        let mut log = IterLog {
            lambda: info.lambda,
            f_model: info.f_after,
            alpha_applied: 0.0,
            f: info.f_after,
        };
        let last = it + 1 == opts.max_iters;
        let stalled = info.lambda == 0.0 || (info.f_before - info.f_after) < opts.tol_f * info.f_before;
        let update_now = opts.alpha > 0.0
            && match opts.schedule {
                SurrogateSchedule::PerIteration => true,
                SurrogateSchedule::PerRun => last || stalled,
            };
        if update_now {
            let (applied, f) = hypergrad::surrogate_step(&state, i0, s, &c, &tab, segs, opts.alpha, info.f_after)?;
            log.alpha_applied = applied;
            log.f = f;
            *state.history.last_mut().unwrap() = f;
        }
        let f_prev = info.f_before;
        let f_now = log.f;
        state.log.push(log);
        if info.lambda == 0.0 && log_applied_zero(&state) {
            break;
        }
        if f_prev - f_now < opts.tol_f * f_prev {
            break;
        }
    }
    Ok((c, state))
}

fn log_applied_zero(state: &FitState) -> bool {
    state.log.last().is_none_or(|l| l.alpha_applied == 0.0)
}
