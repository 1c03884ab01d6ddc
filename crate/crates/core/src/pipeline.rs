//! Multi-resolution alternation between model fitting and reconstruction.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bspline::{self, ControlGrid, FieldAccumulator, FieldEvaluator, SplineTables};
use crate::error::{Error, Result};
use crate::hypergrad;
use crate::mcir;
use crate::phantom::{RespTrace, N_PHASES};
use crate::surrmodel::{self, compose_motion, FitOptions, LineSearch, MotionModel, SurrogateMatrix, SurrogateSchedule};
use crate::volgrid::{self, Grid3, Mask, Segment, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Signals fixed to the measured trace and its derivative.
    Driven,
    /// Signals initialized from phase labels and optimized.
    Free,
    /// Signals initialized from the measured trace and optimized.
    Optimized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Downsampling factors, coarse to fine.
    pub levels: Vec<[usize; 3]>,
    /// Knot spacing in voxels of each level's grid.
    pub knot_voxels: usize,
    pub max_alternations: usize,
    pub max_inner_iters: usize,
    pub max_mcir_iters: usize,
    pub alpha: f64,
    pub tol_f: f64,
    pub surrogate_schedule: SurrogateSchedule,
    /// 1 or 2 initial signals.
    pub n_signals: usize,
    pub line_search: LineSearch,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Free,
            levels: vec![[4, 4, 2], [2, 2, 1], [1, 1, 1]],
            knot_voxels: 4,
            max_alternations: 6,
            max_inner_iters: 5,
            max_mcir_iters: 5,
            alpha: 0.01,
            tol_f: 1e-4,
            surrogate_schedule: SurrogateSchedule::PerIteration,
            n_signals: 2,
            line_search: LineSearch::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("at least one pyramid level is required".into()));
        }
        for w in self.levels.windows(2) {
            if (0..3).any(|a| w[1][a] > w[0][a] || w[0][a] % w[1][a] != 0) {
                return Err(Error::Config(format!(
                    "levels must be ordered coarse to fine with nested factors, got {:?}",
                    self.levels
                )));
            }
        }
        if self.levels.iter().flatten().any(|&f| f == 0) {
            return Err(Error::Config("pyramid factors must be >= 1".into()));
        }
        if self.knot_voxels == 0 || self.max_alternations == 0 || self.max_inner_iters == 0 || self.max_mcir_iters == 0 {
            return Err(Error::Config("iteration caps and knot spacing must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tol_f >= 0.0) {
            return Err(Error::Config("tol_f must be >= 0".into()));
        }
        if !(1..=2).contains(&self.n_signals) {
            return Err(Error::Config(format!("n_signals must be 1 or 2, got {}", self.n_signals)));
        }
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn max_factor(&self) -> [usize; 3] {
        self.levels[0]
    }

    fn effective_alpha(&self) -> f64 {
        match self.mode {
            Mode::Driven => 0.0,
            _ => self.alpha,
        }
    }
}

/// Inputs besides the segments.
#[derive(Clone, Debug, Default)]
pub struct PipelineInputs {
    /// Measured breathing trace, one sample per timepoint.
    pub signal: Option<RespTrace>,
    /// Phase label in `0..10` per timepoint.
    pub labels: Option<Vec<usize>>,
    /// Sorted phase volumes used to initialize the reference.
    pub phase_volumes: Option<Vec<Volume>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fit,
    Mcir,
}

impl Stage {
    fn as_str(&self) -> &'static str {
        match self {
            Stage::Fit => "fit",
            Stage::Mcir => "mcir",
        }
    }
}

/// One objective evaluation in the run log. Iteration 0 of a stage is its
/// starting value.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub level: usize,
    pub alternation: usize,
    pub stage: Stage,
    pub iteration: usize,
    pub objective: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub signal_sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult {
    pub config: PipelineConfig,
    pub i0: Volume,
    pub model: MotionModel,
    pub signals: SurrogateMatrix,
    pub trace: Vec<TraceRow>,
    pub coverage: Mask,
    pub labels: Option<Vec<usize>>,
}

impl PipelineResult {
    pub fn motion(&self, t: usize) -> Result<ControlGrid> {
        compose_motion(&self.signals, &self.model, t)
    }

    /// Objective values of one level in log order.
    pub fn level_objectives(&self, level: usize) -> Vec<f64> {
        self.trace.iter().filter(|r| r.level == level).map(|r| r.objective).collect()
    }

    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.objective)
    }

    /// Root-mean-square superior-inferior knot displacement of each
    /// timepoint's transform.
    pub fn si_magnitude(&self) -> Vec<f64> {
        (0..self.signals.nt())
            .map(|t| {
                let m = surrmodel::compose_unchecked(&self.signals, &self.model, t);
                (m.disp.iter().map(|d| d[2] * d[2]).sum::<f64>() / m.len() as f64).sqrt()
            })
            .collect()
    }

    /// Deepest and shallowest end-inhale timepoints.
    pub fn extreme_inhalation(&self) -> Result<(usize, usize)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Argument("result has no phase labels".into()))?;
        find_extreme_inhalation_oriented(&self.signals, labels, &self.si_magnitude())
    }
}

fn check_sizes(s: &SurrogateMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != s.nt() {
        return Err(Error::Argument(format!("{} labels for {} timepoints", labels.len(), s.nt())));
    }
    Ok(())
}

fn extremes(s1: Vec<f64>, labels: &[usize]) -> Result<(usize, usize)> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&t| labels[t] == 0).collect();
    if idx.is_empty() {
        return Err(Error::Argument("no end-inhale timepoints".into()));
    }
    let mut deep = idx[0];
    let mut shallow = idx[0];
    for &t in &idx[1..] {
        if s1[t] > s1[deep] {
            deep = t;
        }
        if s1[t] < s1[shallow] {
            shallow = t;
        }
    }
    Ok((deep, shallow))
}

/// Among end-inhale timepoints (label 0), argmax and argmin of the first
/// signal, flipped when end-inhale values sit below the signal's mean.
pub fn find_extreme_inhalation(s: &SurrogateMatrix, labels: &[usize]) -> Result<(usize, usize)> {
    check_sizes(s, labels)?;
    let r = s.row(0);
    let ins: Vec<f64> = (0..r.len()).filter(|&t| labels[t] == 0).map(|t| r[t]).collect();
    let flip = !ins.is_empty() && ins.iter().sum::<f64>() / (ins.len() as f64) < r.iter().sum::<f64>() / r.len() as f64;
    extremes(r.iter().map(|&v| if flip { -v } else { v }).collect(), labels)
}

/// As [`find_extreme_inhalation`], with the first signal's sign chosen so
/// it correlates positively with `si_magnitude` over the end-inhale
/// timepoints. Falls back to the mean rule when the correlation vanishes.
pub fn find_extreme_inhalation_oriented(s: &SurrogateMatrix, labels: &[usize], si_magnitude: &[f64]) -> Result<(usize, usize)> {
    check_sizes(s, labels)?;
    if si_magnitude.len() != labels.len() {
        return Err(Error::Argument(format!("{} magnitudes for {} timepoints", si_magnitude.len(), labels.len())));
    }
    let r = s.row(0);
    let idx: Vec<usize> = (0..labels.len()).filter(|&t| labels[t] == 0).collect();
    let n = idx.len().max(1) as f64;
    let mr = idx.iter().map(|&t| r[t]).sum::<f64>() / n;
    let mm = idx.iter().map(|&t| si_magnitude[t]).sum::<f64>() / n;
    let cov: f64 = idx.iter().map(|&t| (r[t] - mr) * (si_magnitude[t] - mm)).sum();
    if cov == 0.0 {
        return find_extreme_inhalation(s, labels);
    }
    extremes(r.iter().map(|&v| if cov < 0.0 { -v } else { v }).collect(), labels)
}

/// Warp the final reference by each requested timepoint's transform.
pub fn export_frames(result: &PipelineResult, timepoints: &[usize]) -> Result<Vec<Volume>> {
    timepoints
        .iter()
        .map(|&t| bspline::warp_volume(&result.i0, &result.motion(t)?))
        .collect()
}

/// Least-squares refit of `old` onto the lattice of `template`, probing at
/// the voxel centers of `template.image_grid`. Returns the refit grid and
/// the largest probe deviation (mm).
pub fn refit_control_grid(old: &ControlGrid, template: &ControlGrid) -> Result<(ControlGrid, f64)> {
    let g = template.image_grid;
    let probe_old = ControlGrid {
        image_grid: g,
        ..old.clone()
    };
    probe_old.validate()?;
    let target = bspline::dense_field(&probe_old)?;
    let tab = SplineTables::new(template)?;
    let apply = |c: &[[f64; 3]]| -> Vec<[f64; 3]> {
        let cg = ControlGrid {
            disp: c.to_vec(),
            ..template.zeros_like()
        };
        let mut ev = FieldEvaluator::new(&cg, &tab);
        let mut acc = FieldAccumulator::new(&cg, &tab);
        for z in 0..g.dims[2] {
            ev.load_slice(z);
            for y in 0..g.dims[1] {
                ev.load_row(y);
                for x in 0..g.dims[0] {
                    acc.add(x, ev.at(x));
                }
                acc.end_row(y);
            }
            acc.end_slice(z);
        }
        acc.grad
    };
    // B^T target
    let rhs = {
        let cg = template.zeros_like();
        let mut acc = FieldAccumulator::new(&cg, &tab);
        let mut k = 0;
        for z in 0..g.dims[2] {
            for y in 0..g.dims[1] {
                for x in 0..g.dims[0] {
                    acc.add(x, target[k]);
                    k += 1;
                }
                acc.end_row(y);
            }
            acc.end_slice(z);
        }
        acc.grad
    };
    let dot = |a: &[[f64; 3]], b: &[[f64; 3]]| -> f64 { a.iter().zip(b).map(|(u, v)| u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).sum() };
    let n = template.len();
    let mut x = vec![[0.0; 3]; n];
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let stop = 1e-24 * rr.max(f64::MIN_POSITIVE);
    for _ in 0..1000 {
        if rr <= stop {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let a = rr / pap;
        for k in 0..n {
            for c in 0..3 {
                x[k][c] += a * p[k][c];
                r[k][c] -= a * ap[k][c];
            }
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            for c in 0..3 {
                p[k][c] = r[k][c] + beta * p[k][c];
            }
        }
    }
    let out = ControlGrid {
        disp: x,
        ..template.zeros_like()
    };
    let fitted = bspline::dense_field(&out)?;
    let err = fitted
        .iter()
        .zip(&target)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    Ok((out, err))
}

/// Knot lattice of one pyramid level.
pub fn level_lattice(cfg: &PipelineConfig, full: &Grid3, level_grid: Grid3) -> Result<ControlGrid> {
    let k = cfg.knot_voxels as f64;
    let cs = [k * level_grid.spacing[0], k * level_grid.spacing[1], k * level_grid.spacing[2]];
    ControlGrid::model_lattice(full, level_grid, cs, cfg.max_factor())
}

fn initial_signals(cfg: &PipelineConfig, inputs: &PipelineInputs, nt: usize) -> Result<SurrogateMatrix> {
    let s = match cfg.mode {
        Mode::Driven | Mode::Optimized => {
            let tr = inputs.signal.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "mode {:?} needs a measured breathing signal (signals.csv)",
                    cfg.mode
                ))
            })?;
            if tr.len() != nt {
                return Err(Error::Config(format!("signal has {} samples for {nt} timepoints", tr.len())));
            }
            hypergrad::init_surrogates_signal(&tr.values, tr.dt)?
        }
        Mode::Free => {
            let labels = inputs
                .labels
                .as_ref()
                .ok_or_else(|| Error::Config("mode free needs phase labels (labels.csv)".into()))?;
            if labels.len() != nt {
                return Err(Error::Config(format!("{} phase labels for {nt} timepoints", labels.len())));
            }
            let ph: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            hypergrad::init_surrogates_phase(&ph, N_PHASES)?
        }
    };
    if cfg.n_signals == 1 {
        return SurrogateMatrix::from_rows(&[s.row(0).to_vec()]);
    }
    Ok(s)
}

fn push_stage_rows(
    trace: &mut Vec<TraceRow>,
    level: usize,
    alternation: usize,
    stage: Stage,
    start: f64,
    steps: impl Iterator<Item = (f64, f64, f64)>,
    sd: &[f64],
) {
    trace.push(TraceRow {
        level,
        alternation,
        stage,
        iteration: 0,
        objective: start,
        lambda: 0.0,
        alpha: 0.0,
        signal_sd: sd.to_vec(),
    });
    for (k, (f, lambda, alpha)) in steps.enumerate() {
        trace.push(TraceRow {
            level,
            alternation,
            stage,
            iteration: k + 1,
            objective: f,
            lambda,
            alpha,
            signal_sd: sd.to_vec(),
        });
    }
}

/// Full coarse-to-fine fit.
pub fn run_pipeline(cfg: &PipelineConfig, segs: &[Segment], inputs: &PipelineInputs) -> Result<PipelineResult> {
    cfg.validate()?;
    let first = segs.first().ok_or_else(|| Error::Config("no segments given".into()))?;
    let full = first.parent_grid;
    for s in segs {
        full.check_same(&s.parent_grid, "segments")?;
    }
    let nt = inputs
        .signal
        .as_ref()
        .map(|s| s.len())
        .or(inputs.labels.as_ref().map(|l| l.len()))
        .unwrap_or_else(|| segs.iter().map(|s| s.t + 1).max().unwrap_or(0));
    let mut s = initial_signals(cfg, inputs, nt)?;
    if let Some(bad) = segs.iter().find(|x| x.t >= nt) {
        return Err(Error::Config(format!("segment timepoint {} outside 0..{nt}", bad.t)));
    }
    let i0_full = match &inputs.phase_volumes {
        Some(v) if !v.is_empty() => volgrid::average_volumes(v)?,
        _ => mcir::zero_motion_init(full, segs)?,
    };
    let alpha = cfg.effective_alpha();
    let fit_opts = FitOptions {
        max_iters: cfg.max_inner_iters,
        tol_f: cfg.tol_f,
        alpha,
        schedule: cfg.surrogate_schedule,
        line_search: cfg.line_search,
    };
    let mut trace = Vec::new();
    let mut i0: Option<Volume> = None;
    let mut c: Option<MotionModel> = None;
    for (level, &factor) in cfg.levels.iter().enumerate() {
        let lg = full.downsampled(factor)?;
        let lsegs: Vec<Segment> = segs.iter().map(|x| volgrid::downsample_segment(x, factor)).collect::<Result<_>>()?;
        let lattice = level_lattice(cfg, &full, lg)?;
        let mut li0 = match &i0 {
            None => volgrid::downsample(&i0_full, factor)?,
            Some(prev) => volgrid::upsample(prev, &lg),
        };
        let mut lc = match &c {
            None => MotionModel::zeros(&lattice, s.ns())?,
            Some(prev) => MotionModel::new(
                prev.c
                    .iter()
                    .map(|ci| refit_control_grid(ci, &lattice).map(|r| r.0))
                    .collect::<Result<_>>()?,
            )?,
        };
        let (sn, cn) = hypergrad::normalize_surrogates(&s, &lc)?;
        s = sn;
        lc = cn;
        for alt in 0..cfg.max_alternations {
            let (c_new, fs) = surrmodel::fit_run_with(&li0, &mut s, &lc, &lsegs, &fit_opts)?;
            lc = c_new;
            let sd = s.row_std();
            let f_start = fs.history.first().copied().unwrap_or_else(|| surrmodel::objective(&li0, &s, &lc, &lsegs).unwrap_or(f64::NAN));
            push_stage_rows(
                &mut trace,
                level,
                alt,
                Stage::Fit,
                f_start,
                fs.log.iter().map(|l| (l.f, l.lambda, l.alpha_applied)),
                &sd,
            );
            let f_fit = trace.last().unwrap().objective;
            let (i0_new, rs) = mcir::mcir_run(&li0, &s, &lc, &lsegs, cfg.max_mcir_iters, cfg.tol_f, &cfg.line_search)?;
            li0 = i0_new;
            let m_start = rs.history.first().copied().unwrap_or(f_fit);
            push_stage_rows(
                &mut trace,
                level,
                alt,
                Stage::Mcir,
                m_start,
                rs.history.iter().skip(1).zip(&rs.lambdas).map(|(&f, &l)| (f, l, 0.0)),
                &sd,
            );
            let f_end = trace.last().unwrap().objective;
            if !(f_start - f_end >= cfg.tol_f * f_start) {
                break;
            }
        }
        i0 = Some(li0);
        c = Some(lc);
    }
    let mut i0 = i0.expect("at least one level");
    let mut model = c.expect("at least one level");
    // a pyramid that stops short of full resolution still reports on the acquisition grid
    if i0.grid != full {
        let lattice = level_lattice(cfg, &full, full)?;
        i0 = volgrid::upsample(&i0, &full);
        model = MotionModel::new(
            model
                .c
                .iter()
                .map(|ci| refit_control_grid(ci, &lattice).map(|r| r.0))
                .collect::<Result<_>>()?,
        )?;
    }
    let coverage = mcir::coverage(&i0, &s, &model, segs)?;
    Ok(PipelineResult {
        config: cfg.clone(),
        i0,
        model,
        signals: s,
        trace,
        coverage,
        labels: inputs.labels.clone(),
    })
}

// ---------------------------------------------------------------------------
// Result directory.

pub fn write_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ns = trace.first().map_or(0, |r| r.signal_sd.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header: Vec<String> = ["level", "alternation", "stage", "iteration", "objective", "lambda", "alpha"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=ns).map(|i| format!("sd_s{i}")));
    w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in trace {
        let mut rec = vec![
            r.level.to_string(),
            r.alternation.to_string(),
            r.stage.as_str().to_string(),
            r.iteration.to_string(),
            format!("{}", r.objective),
            format!("{}", r.lambda),
            format!("{}", r.alpha),
        ];
        rec.extend(r.signal_sd.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let bad = || Error::format(path, "malformed trace row");
        let num = |k: usize| -> Result<f64> { rec.get(k).and_then(|v| v.parse().ok()).ok_or_else(bad) };
        let int = |k: usize| -> Result<usize> { rec.get(k).and_then(|v| v.parse().ok()).ok_or_else(bad) };
        out.push(TraceRow {
            level: int(0)?,
            alternation: int(1)?,
            stage: match rec.get(2) {
                Some("fit") => Stage::Fit,
                Some("mcir") => Stage::Mcir,
                _ => return Err(bad()),
            },
            iteration: int(3)?,
            objective: num(4)?,
            lambda: num(5)?,
            alpha: num(6)?,
            signal_sd: (7..rec.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

pub fn write_labels_csv(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["t", "label"]).map_err(|e| Error::format(path, e.to_string()))?;
    for (t, l) in labels.iter().enumerate() {
        w.write_record([t.to_string(), l.to_string()]).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        k => Error::format(path, format!("{k:?}")),
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        out.push(rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| Error::format(path, "malformed label row"))?);
    }
    Ok(out)
}

/// Writes `config.json`, `i0`, `signals.csv`, `model_<i>` (1-based),
/// `trace.csv`, `coverage` and `labels.csv` (when known) into `dir`.
pub fn write_result(result: &PipelineResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    result.config.write_json(dir.join("config.json"))?;
    volgrid::write_volume(&result.i0, dir.join("i0.json"))?;
    result.signals.write_csv(dir.join("signals.csv"))?;
    for (i, c) in result.model.c.iter().enumerate() {
        bspline::write_control_grid(c, dir.join(format!("model_{}.json", i + 1)))?;
    }
    write_trace_csv(&result.trace, dir.join("trace.csv"))?;
    volgrid::write_mask(&result.coverage, dir.join("coverage.json"))?;
    if let Some(l) = &result.labels {
        write_labels_csv(l, dir.join("labels.csv"))?;
    }
    Ok(())
}

pub fn read_result(dir: impl AsRef<Path>) -> Result<PipelineResult> {
    let dir = dir.as_ref();
    let config = PipelineConfig::read_json(dir.join("config.json"))?;
    let i0 = volgrid::read_volume(dir.join("i0.json"))?;
    let signals = SurrogateMatrix::read_csv(dir.join("signals.csv"))?;
    let model = MotionModel::new(
        (1..=signals.ns())
            .map(|i| bspline::read_control_grid(dir.join(format!("model_{i}.json"))))
            .collect::<Result<_>>()?,
    )?;
    let trace = read_trace_csv(dir.join("trace.csv"))?;
    let coverage = volgrid::read_mask(dir.join("coverage.json"))?;
    let lp = dir.join("labels.csv");
    let labels = if lp.exists() { Some(read_labels_csv(lp)?) } else { None };
    Ok(PipelineResult {
        config,
        i0,
        model,
        signals,
        trace,
        coverage,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extreme_cases() {
        let s = SurrogateMatrix::from_rows(&[vec![0.3, 0.9, -0.2, 1.4]]).unwrap();
        assert_eq!(find_extreme_inhalation(&s, &[3, 0, 5, 5]).unwrap(), (1, 1));
        let s = SurrogateMatrix::from_rows(&[vec![0.1, 0.5, 0.9]]).unwrap();
        assert_eq!(find_extreme_inhalation(&s, &[0, 0, 0]).unwrap(), (2, 0));
        assert!(find_extreme_inhalation(&s, &[1, 2, 3]).is_err());
        // end-inhale values below the mean flip the orientation
        let s = SurrogateMatrix::from_rows(&[vec![-1.0, 2.0, -0.5, 2.5]]).unwrap();
        assert_eq!(find_extreme_inhalation(&s, &[0, 5, 0, 5]).unwrap(), (0, 2));
        let mag = [1.0, 0.0, 3.0, 0.0];
        assert_eq!(find_extreme_inhalation_oriented(&s, &[0, 5, 0, 5], &mag).unwrap(), (2, 0));
        let mag = [3.0, 0.0, 1.0, 0.0];
        assert_eq!(find_extreme_inhalation_oriented(&s, &[0, 5, 0, 5], &mag).unwrap(), (0, 2));
    }

    #[test]
    fn refit_reproduces_nested_lattice() {
        let full = Grid3::new([24, 20, 12], [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let cfg = PipelineConfig {
            levels: vec![[4, 4, 2], [2, 2, 1], [1, 1, 1]],
            ..Default::default()
        };
        let coarse = level_lattice(&cfg, &full, full.downsampled([4, 4, 2]).unwrap()).unwrap();
        let mid = level_lattice(&cfg, &full, full.downsampled([2, 2, 1]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = coarse.clone();
        c.disp.iter_mut().for_each(|d| *d = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let (m, err) = refit_control_grid(&c, &mid).unwrap();
        assert!(err < 1e-3, "probe error {err}");
        // shared physical points
        for p in [[5.0, 7.0, 4.0], [30.0, 21.0, 17.5], [44.0, 36.0, 30.0]] {
            let a = bspline::displacement_at(&c, p).unwrap();
            let b = bspline::displacement_at(&m, p).unwrap();
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            levels: vec![[1, 1, 1], [2, 2, 1]],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = PipelineConfig {
            n_signals: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_input_mismatch_is_config_error() {
        let g = Grid3::new([8, 8, 4], [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let seg = volgrid::extract_segment(&Volume::filled(g, 0.0), 0, 3, 0).unwrap();
        let cfg = PipelineConfig {
            mode: Mode::Driven,
            ..Default::default()
        };
        let r = run_pipeline(&cfg, std::slice::from_ref(&seg), &PipelineInputs::default());
        assert!(matches!(r, Err(Error::Config(_))));
        let r = run_pipeline(&PipelineConfig::default(), &[seg], &PipelineInputs::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
