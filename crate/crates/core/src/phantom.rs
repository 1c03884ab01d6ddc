//! Analytic breathing phantom, cine acquisition simulation and phase
//! sorting.
//!
//! Axes: x left-right, y anterior (small) to posterior (large), z inferior
//! (small) to superior (large). The reference anatomy is end-exhale; a
//! positive SI displacement moves structures inferiorly under the pull-back
//! warp, a positive AP displacement moves them anteriorly.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{self, ControlGrid, AIR_HU};
use crate::error::{Error, Result};
use crate::surrmodel::{compose_motion, MotionModel, SurrogateMatrix};
use crate::volgrid::{insert_segment, Grid3, Mask, Segment, Volume};

/// Number of phase bins.
pub const N_PHASES: usize = 10;

/// Uniformly sampled breathing trace.
#[derive(Clone, Debug, PartialEq)]
pub struct RespTrace {
    pub values: Vec<f64>,
    pub dt: f64,
}

impl RespTrace {
    pub fn new(values: Vec<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Argument(format!("trace sample interval must be positive, got {dt}")));
        }
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("trace must be non-empty and finite".into()));
        }
        Ok(RespTrace { values, dt })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Linear interpolation at `time` seconds, clamped to the trace ends.
    pub fn sample_at(&self, time: f64) -> f64 {
        let u = time / self.dt;
        if u <= 0.0 {
            return self.values[0];
        }
        let n = self.values.len();
        if u >= (n - 1) as f64 {
            return self.values[n - 1];
        }
        let i = u.floor() as usize;
        let f = u - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }

    /// Trace shifted later in time by `delay` seconds.
    pub fn delayed(&self, delay: f64) -> RespTrace {
        RespTrace {
            values: (0..self.len()).map(|i| self.sample_at(i as f64 * self.dt - delay)).collect(),
            dt: self.dt,
        }
    }

    /// CSV with header `t_seconds,value`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["t_seconds", "value"]).map_err(|e| Error::format(path, e.to_string()))?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([format!("{}", i as f64 * self.dt), format!("{v}")])
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            k => Error::format(path, format!("{k:?}")),
        })?;
        let h = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
        if h.len() != 2 || &h[0] != "t_seconds" || &h[1] != "value" {
            return Err(Error::format(path, "expected header t_seconds,value"));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let t: f64 = rec[0].trim().parse().map_err(|_| Error::format(path, "bad time"))?;
            let v: f64 = rec[1].trim().parse().map_err(|_| Error::format(path, "bad value"))?;
            times.push(t);
            values.push(v);
        }
        if times.len() < 2 {
            return Err(Error::format(path, "trace needs at least two samples"));
        }
        let dt = times[1] - times[0];
        RespTrace::new(values, dt).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Raised-cosine breath cycles (trough to trough) with per-cycle amplitude
/// `1 + U(-aj, aj)` and period `base * (1 + U(-pj, pj))`.
pub fn make_irregular_trace(
    seed: u64,
    n: usize,
    dt: f64,
    base_period: f64,
    amplitude_jitter: f64,
    period_jitter: f64,
) -> Result<RespTrace> {
    if !(amplitude_jitter >= 0.0 && period_jitter >= 0.0) {
        return Err(Error::Argument("jitters must be >= 0".into()));
    }
    if !(base_period > 0.0) || period_jitter >= 1.0 {
        return Err(Error::Argument("breath period must stay positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |j: f64| if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 };
    let total = n as f64 * dt;
    let mut cycles: Vec<(f64, f64, f64)> = Vec::new();
    let mut start = 0.0;
    while start <= total {
        let amp = 1.0 + jitter(amplitude_jitter);
        let per = base_period * (1.0 + jitter(period_jitter));
        cycles.push((start, per, amp));
        start += per;
    }
    let mut k = 0;
    let values = (0..n)
        .map(|i| {
            let time = i as f64 * dt;
            while k + 1 < cycles.len() && time >= cycles[k + 1].0 {
                k += 1;
            }
            let (s, p, a) = cycles[k];
            a * 0.5 * (1.0 - (2.0 * PI * (time - s) / p).cos())
        })
        .collect();
    RespTrace::new(values, dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueHu {
    pub air: f64,
    pub lung: f64,
    pub soft_tissue: f64,
    pub bone: f64,
    pub tumor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Torso {
    pub center_xy_mm: [f64; 2],
    pub semi_axes_xy_mm: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lung {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

/// Lung floor: `z = base + height (1 - rho^2)`, `rho` the normalized
/// in-plane radius of the lung ellipsoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diaphragm {
    pub base_z_mm: f64,
    pub dome_height_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spine {
    pub center_xy_mm: [f64; 2],
    pub radius_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tumor {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
}

/// Ground-truth correspondence fields, Gaussian bumps sampled on the knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub knot_spacing_mm: [f64; 3],
    /// Largest pyramid factor of the fit; sets the lattice padding.
    pub pyramid_max_factor: [usize; 3],
    /// AP displacement at the chest wall per unit chest trace.
    pub chest_amplitude_mm: f64,
    pub chest_center_y_mm: f64,
    pub chest_width_mm: f64,
    /// SI displacement at the diaphragm per unit diaphragm trace.
    pub diaphragm_amplitude_mm: f64,
    pub diaphragm_center_z_mm: f64,
    pub diaphragm_width_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub seed: u64,
    pub n_timepoints: usize,
    pub dt_s: f64,
    pub base_period_s: f64,
    pub amplitude_jitter: f64,
    pub period_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid3,
    pub hu: TissueHu,
    pub torso: Torso,
    pub lungs: Vec<Lung>,
    pub diaphragm: Diaphragm,
    pub spine: Spine,
    pub tumor: Tumor,
    pub motion: MotionSpec,
    pub trace: TraceSpec,
    pub diaphragm_delay_s: f64,
    pub noise_sigma_hu: f64,
    pub noise_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: Grid3 {
                dims: [96, 80, 48],
                spacing: [2.0, 2.0, 3.0],
                origin: [0.0; 3],
            },
            hu: TissueHu {
                air: -1000.0,
                lung: -800.0,
                soft_tissue: 40.0,
                bone: 700.0,
                tumor: 60.0,
            },
            torso: Torso {
                center_xy_mm: [95.0, 79.0],
                semi_axes_xy_mm: [85.0, 65.0],
            },
            lungs: vec![
                Lung {
                    center_mm: [53.0, 80.0, 100.0],
                    semi_axes_mm: [30.0, 45.0, 85.0],
                },
                Lung {
                    center_mm: [137.0, 80.0, 100.0],
                    semi_axes_mm: [30.0, 45.0, 85.0],
                },
            ],
            diaphragm: Diaphragm {
                base_z_mm: 30.0,
                dome_height_mm: 18.0,
            },
            spine: Spine {
                center_xy_mm: [95.0, 130.0],
                radius_mm: 10.0,
            },
            tumor: Tumor {
                center_mm: [53.0, 80.0, 90.0],
                radius_mm: 12.0,
            },
            motion: MotionSpec {
                knot_spacing_mm: [8.0, 8.0, 12.0],
                pyramid_max_factor: [4, 4, 2],
                chest_amplitude_mm: 10.0,
                chest_center_y_mm: 14.0,
                chest_width_mm: 30.0,
                diaphragm_amplitude_mm: 20.0,
                diaphragm_center_z_mm: 58.0,
                diaphragm_width_mm: 35.0,
            },
            trace: TraceSpec {
                seed: 7,
                n_timepoints: 120,
                dt_s: 0.4,
                base_period_s: 4.0,
                amplitude_jitter: 0.3,
                period_jitter: 0.1,
            },
            diaphragm_delay_s: 1.0,
            noise_sigma_hu: 0.0,
            noise_seed: 11,
        }
    }
}

impl PhantomSpec {
    /// Same anatomy on a 48x40x24 grid of 4x4x6 mm voxels with 40
    /// timepoints, for quick runs.
    pub fn reduced() -> Self {
        let mut s = PhantomSpec::default();
        s.grid = Grid3 {
            dims: [48, 40, 24],
            spacing: [4.0, 4.0, 6.0],
            origin: [0.0; 3],
        };
        s.motion.knot_spacing_mm = [16.0, 16.0, 24.0];
        s.trace.n_timepoints = 40;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate().map_err(|e| Error::Spec(e.to_string()))?;
        let lo = self.grid.origin;
        let hi = self.grid.extent_max();
        let inside = |p: [f64; 3]| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
        let min_sp = self.grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.tumor.radius_mm < 2.0 * min_sp {
            return Err(Error::Spec(format!(
                "tumor radius {} mm is below two voxels ({} mm)",
                self.tumor.radius_mm,
                2.0 * min_sp
            )));
        }
        if !inside(self.tumor.center_mm) {
            return Err(Error::Spec("tumor center lies outside the grid".into()));
        }
        if self.torso.semi_axes_xy_mm.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Spec("torso semi-axes must be positive".into()));
        }
        for l in &self.lungs {
            if l.semi_axes_mm.iter().any(|&a| !(a >= 0.0)) {
                return Err(Error::Spec("lung semi-axes must be >= 0".into()));
            }
        }
        if self.spine.radius_mm < 0.0 {
            return Err(Error::Spec("spine radius must be >= 0".into()));
        }
        if !(self.diaphragm_delay_s >= 0.0) {
            return Err(Error::Spec("diaphragm delay must be >= 0".into()));
        }
        if !(self.noise_sigma_hu >= 0.0) {
            return Err(Error::Spec("noise sigma must be >= 0".into()));
        }
        if self.trace.n_timepoints < 3 || !(self.trace.dt_s > 0.0) {
            return Err(Error::Spec("trace needs >= 3 timepoints and a positive interval".into()));
        }
        if self.motion.chest_width_mm <= 0.0 || self.motion.diaphragm_width_mm <= 0.0 {
            return Err(Error::Spec("motion field widths must be positive".into()));
        }
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: PhantomSpec = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("spec serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The chest trace (also drives the diaphragm before the delay).
    pub fn chest_trace(&self) -> Result<RespTrace> {
        let t = &self.trace;
        make_irregular_trace(t.seed, t.n_timepoints, t.dt_s, t.base_period_s, t.amplitude_jitter, t.period_jitter)
    }

    pub fn diaphragm_trace(&self) -> Result<RespTrace> {
        Ok(self.chest_trace()?.delayed(self.diaphragm_delay_s))
    }

    /// Ground-truth signals: chest trace and delayed diaphragm trace.
    pub fn gt_signals(&self) -> Result<SurrogateMatrix> {
        SurrogateMatrix::from_rows(&[self.chest_trace()?.values, self.diaphragm_trace()?.values])
    }

    /// Knot lattice of the ground-truth model (the finest fit lattice).
    pub fn gt_lattice(&self) -> Result<ControlGrid> {
        ControlGrid::model_lattice(&self.grid, self.grid, self.motion.knot_spacing_mm, self.motion.pyramid_max_factor)
    }

    /// Chest-driven AP field and diaphragm-driven SI field.
    pub fn gt_model(&self) -> Result<MotionModel> {
        let lat = self.gt_lattice()?;
        let m = &self.motion;
        let mut c1 = lat.zeros_like();
        let mut c2 = lat.zeros_like();
        for k in 0..lat.cdims[2] {
            for j in 0..lat.cdims[1] {
                for i in 0..lat.cdims[0] {
                    let p = lat.knot_position(i, j, k);
                    let idx = lat.index(i, j, k);
                    let dy = p[1] - m.chest_center_y_mm;
                    c1.disp[idx] = [0.0, m.chest_amplitude_mm * (-dy * dy / (2.0 * m.chest_width_mm.powi(2))).exp(), 0.0];
                    let dz = p[2] - m.diaphragm_center_z_mm;
                    c2.disp[idx] = [0.0, 0.0, m.diaphragm_amplitude_mm * (-dz * dz / (2.0 * m.diaphragm_width_mm.powi(2))).exp()];
                }
            }
        }
        MotionModel::new(vec![c1, c2])
    }

    /// Grid columns `(y, xs)` through each lung's center row whose
    /// normalized in-plane radius is below 0.7.
    pub fn diaphragm_columns(&self) -> Vec<(usize, Vec<usize>)> {
        let g = &self.grid;
        self.lungs
            .iter()
            .filter(|l| l.semi_axes_mm[0] > 0.0 && l.semi_axes_mm[1] > 0.0)
            .map(|l| {
                let y = ((l.center_mm[1] - g.origin[1]) / g.spacing[1]).round().clamp(0.0, (g.dims[1] - 1) as f64) as usize;
                let py = g.origin[1] + y as f64 * g.spacing[1];
                let ry = (py - l.center_mm[1]) / l.semi_axes_mm[1];
                let xs = (0..g.dims[0])
                    .filter(|&x| {
                        let rx = (g.origin[0] + x as f64 * g.spacing[0] - l.center_mm[0]) / l.semi_axes_mm[0];
                        (rx * rx + ry * ry).sqrt() < 0.7
                    })
                    .collect();
                (y, xs)
            })
            .collect()
    }
}

fn tissue_at(spec: &PhantomSpec, p: [f64; 3]) -> (f64, bool) {
    let hu = &spec.hu;
    let t = &spec.tumor;
    let d2 = (0..3).map(|a| (p[a] - t.center_mm[a]).powi(2)).sum::<f64>();
    if d2 <= t.radius_mm * t.radius_mm {
        return (hu.tumor, true);
    }
    let tc = &spec.torso;
    let ex = (p[0] - tc.center_xy_mm[0]) / tc.semi_axes_xy_mm[0];
    let ey = (p[1] - tc.center_xy_mm[1]) / tc.semi_axes_xy_mm[1];
    if ex * ex + ey * ey > 1.0 {
        return (hu.air, false);
    }
    let sp = &spec.spine;
    if (p[0] - sp.center_xy_mm[0]).powi(2) + (p[1] - sp.center_xy_mm[1]).powi(2) <= sp.radius_mm * sp.radius_mm {
        return (hu.bone, false);
    }
    for l in &spec.lungs {
        if l.semi_axes_mm.iter().any(|&a| a <= 0.0) {
            continue;
        }
        let r = [
            (p[0] - l.center_mm[0]) / l.semi_axes_mm[0],
            (p[1] - l.center_mm[1]) / l.semi_axes_mm[1],
            (p[2] - l.center_mm[2]) / l.semi_axes_mm[2],
        ];
        if r[0] * r[0] + r[1] * r[1] + r[2] * r[2] <= 1.0 {
            let rho2 = r[0] * r[0] + r[1] * r[1];
            let floor = spec.diaphragm.base_z_mm + spec.diaphragm.dome_height_mm * (1.0 - rho2);
            if p[2] > floor {
                return (hu.lung, false);
            }
        }
    }
    (hu.soft_tissue, false)
}

/// Sub-samples per voxel and axis used to give tissue edges partial-volume
/// values.
const SUPERSAMPLE: [usize; 3] = [2, 2, 3];

/// End-exhale anatomy (box-filtered piecewise-constant tissues) and the
/// fraction of each voxel inside the tumor.
pub fn build_template_parts(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let g = spec.grid;
    let n = SUPERSAMPLE;
    let offs = |a: usize, k: usize| ((k as f64 + 0.5) / n[a] as f64 - 0.5) * g.spacing[a];
    let weight = 1.0 / (n[0] * n[1] * n[2]) as f64;
    let (vals, frac): (Vec<f32>, Vec<f32>) = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = g.coords(i);
            let c = g.position(x, y, z);
            let mut acc = 0.0;
            let mut tumor = 0.0;
            for kz in 0..n[2] {
                for ky in 0..n[1] {
                    for kx in 0..n[0] {
                        let p = [c[0] + offs(0, kx), c[1] + offs(1, ky), c[2] + offs(2, kz)];
                        let (v, inside) = tissue_at(spec, p);
                        acc += v;
                        tumor += f64::from(u8::from(inside));
                    }
                }
            }
            ((acc * weight) as f32, (tumor * weight) as f32)
        })
        .unzip();
    Ok((Volume::new(g, vals)?, Volume::new(g, frac)?))
}

/// End-exhale anatomy and its tumor mask (voxels at least half inside the
/// tumor).
pub fn build_template(spec: &PhantomSpec) -> Result<(Volume, Mask)> {
    let (vol, frac) = build_template_parts(spec)?;
    let mask = frac.values.iter().map(|&f| u8::from(f >= 0.5)).collect();
    Ok((vol, Mask::new(spec.grid, mask)?))
}

/// Ground-truth transform at timepoint `t`.
pub fn gt_motion(spec: &PhantomSpec, t: usize) -> Result<ControlGrid> {
    if t >= spec.trace.n_timepoints {
        return Err(Error::Range(format!("timepoint {t} outside 0..{}", spec.trace.n_timepoints)));
    }
    compose_motion(&spec.gt_signals()?, &spec.gt_model()?, t)
}

/// One scheduled acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleEntry {
    pub t: usize,
    pub couch: usize,
    pub z_lo: usize,
    pub z_hi: usize,
    /// Continuous phase in `[0, 10)`; 0 is end-inhale.
    pub phase: f64,
}

impl ScheduleEntry {
    pub fn label(&self) -> usize {
        (self.phase.round() as usize) % N_PHASES
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionSchedule {
    pub entries: Vec<ScheduleEntry>,
}

/// Sub-sample times of the trace maxima.
pub fn trace_peaks(trace: &RespTrace) -> Vec<f64> {
    let v = &trace.values;
    let mut peaks = Vec::new();
    for i in 1..v.len().saturating_sub(1) {
        if v[i] > v[i - 1] && v[i] >= v[i + 1] {
            let den = v[i - 1] - 2.0 * v[i] + v[i + 1];
            let off = if den < 0.0 { 0.5 * (v[i - 1] - v[i + 1]) / den } else { 0.0 };
            peaks.push(i as f64 + off);
        }
    }
    peaks
}

/// Continuous phase of every sample: 10 times the fraction of the
/// peak-to-peak interval elapsed, extrapolated outside the first and last
/// peaks.
pub fn phases_from_trace(trace: &RespTrace) -> Result<Vec<f64>> {
    let p = trace_peaks(trace);
    if p.len() < 2 {
        return Err(Error::Schedule("trace has fewer than two breath peaks".into()));
    }
    let n_ph = N_PHASES as f64;
    Ok((0..trace.len())
        .map(|i| {
            let t = i as f64;
            let k = match p.iter().rposition(|&pk| pk <= t) {
                None => 0,
                Some(k) => k.min(p.len() - 2),
            };
            let ph = n_ph * (t - p[k]) / (p[k + 1] - p[k]);
            let ph = ph.rem_euclid(n_ph);
            if ph >= n_ph {
                0.0
            } else {
                ph
            }
        })
        .collect())
}

impl AcquisitionSchedule {
    /// Cine schedule: `n_couch` consecutive couch positions of
    /// `slices_per_segment` slices, each held for `dwell` timepoints.
    pub fn cine(trace: &RespTrace, nz: usize, n_couch: usize, slices_per_segment: usize, dwell: usize) -> Result<Self> {
        if n_couch * slices_per_segment != nz {
            return Err(Error::Schedule(format!(
                "{n_couch} couch positions of {slices_per_segment} slices do not tile {nz} slices"
            )));
        }
        if n_couch * dwell > trace.len() {
            return Err(Error::Schedule("trace shorter than the acquisition".into()));
        }
        let phases = phases_from_trace(trace)?;
        let mut entries = Vec::with_capacity(n_couch * dwell);
        for c in 0..n_couch {
            for k in 0..dwell {
                let t = c * dwell + k;
                entries.push(ScheduleEntry {
                    t,
                    couch: c,
                    z_lo: c * slices_per_segment,
                    z_hi: (c + 1) * slices_per_segment - 1,
                    phase: phases[t],
                });
            }
        }
        Ok(AcquisitionSchedule { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label()).collect()
    }

    pub fn phases(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.phase).collect()
    }

    /// Checks ordering, ranges and that every slice is imaged.
    pub fn validate(&self, nz: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Schedule("empty schedule".into()));
        }
        let mut seen = vec![false; nz];
        for (i, e) in self.entries.iter().enumerate() {
            if e.t != i {
                return Err(Error::Schedule(format!("timepoints must be 0..n in order, row {i} has t={}", e.t)));
            }
            if e.z_lo > e.z_hi || e.z_hi >= nz {
                return Err(Error::Schedule(format!("row {i}: slices {}..={} outside 0..{nz}", e.z_lo, e.z_hi)));
            }
            if !(0.0..N_PHASES as f64).contains(&e.phase) {
                return Err(Error::Schedule(format!("row {i}: phase {} outside [0, 10)", e.phase)));
            }
            seen[e.z_lo..=e.z_hi].iter_mut().for_each(|s| *s = true);
        }
        if let Some(z) = seen.iter().position(|s| !s) {
            return Err(Error::Schedule(format!("schedule gap: slice {z} is never imaged")));
        }
        Ok(())
    }

    /// CSV `t,couch,z_lo,z_hi,phase`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["t", "couch", "z_lo", "z_hi", "phase"]).map_err(|e| Error::format(path, e.to_string()))?;
        for e in &self.entries {
            w.write_record([
                e.t.to_string(),
                e.couch.to_string(),
                e.z_lo.to_string(),
                e.z_hi.to_string(),
                format!("{}", e.phase),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            k => Error::format(path, format!("{k:?}")),
        })?;
        let h = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
        if h.iter().collect::<Vec<_>>() != ["t", "couch", "z_lo", "z_hi", "phase"] {
            return Err(Error::format(path, "expected header t,couch,z_lo,z_hi,phase"));
        }
        let mut entries = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            if rec.len() != 5 {
                return Err(Error::format(path, format!("row {row} has {} fields", rec.len())));
            }
            let int = |k: usize| -> Result<usize> {
                rec[k].trim().parse().map_err(|_| Error::format(path, format!("bad integer on row {row}")))
            };
            entries.push(ScheduleEntry {
                t: int(0)?,
                couch: int(1)?,
                z_lo: int(2)?,
                z_hi: int(3)?,
                phase: rec[4].trim().parse().map_err(|_| Error::format(path, format!("bad phase on row {row}")))?,
            });
        }
        Ok(AcquisitionSchedule { entries })
    }
}

/// Slices per segment of [`default_schedule`].
pub const DEFAULT_SEGMENT_SLICES: usize = 6;

/// Cine schedule for a spec: 6-slice segments tiling the volume, every
/// couch position held for an equal share of the timepoints.
pub fn default_schedule(spec: &PhantomSpec) -> Result<AcquisitionSchedule> {
    let nz = spec.grid.dims[2];
    if !nz.is_multiple_of(DEFAULT_SEGMENT_SLICES) {
        return Err(Error::Schedule(format!("{nz} slices are not a multiple of {DEFAULT_SEGMENT_SLICES}")));
    }
    let n_couch = nz / DEFAULT_SEGMENT_SLICES;
    let dwell = spec.trace.n_timepoints / n_couch;
    if dwell == 0 {
        return Err(Error::Schedule("fewer timepoints than couch positions".into()));
    }
    AcquisitionSchedule::cine(&spec.chest_trace()?, nz, n_couch, DEFAULT_SEGMENT_SLICES, dwell)
}

/// Output of a simulated acquisition.
#[derive(Clone, Debug)]
pub struct Acquisition {
    pub segments: Vec<Segment>,
    pub labels: Vec<usize>,
}

/// Warp the template by the ground-truth motion at each scheduled
/// timepoint and keep the scheduled slab, plus optional Gaussian noise.
pub fn simulate_acquisition(spec: &PhantomSpec, template: &Volume, schedule: &AcquisitionSchedule) -> Result<Acquisition> {
    spec.validate()?;
    template.grid.check_same(&spec.grid, "template vs spec")?;
    schedule.validate(spec.grid.dims[2])?;
    if schedule.len() > spec.trace.n_timepoints {
        return Err(Error::Schedule(format!(
            "schedule has {} timepoints but the traces only {}",
            schedule.len(),
            spec.trace.n_timepoints
        )));
    }
    let s = spec.gt_signals()?;
    let c = spec.gt_model()?;
    let mut segments = schedule
        .entries
        .par_iter()
        .map(|e| {
            let m = compose_motion(&s, &c, e.t)?;
            let vals = bspline::warp_slab(template, &m, e.z_lo, e.z_hi, AIR_HU)?;
            Segment::new(spec.grid, e.z_lo, e.z_hi, e.t, vals.into_iter().map(|v| v as f32).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    if spec.noise_sigma_hu > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
        let normal = Normal::new(0.0, spec.noise_sigma_hu).map_err(|e| Error::Spec(e.to_string()))?;
        for seg in &mut segments {
            for v in &mut seg.values {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(Acquisition {
        segments,
        labels: schedule.labels(),
    })
}

/// Ground-truth dynamic volume at timepoint `t`.
pub fn gt_frame(spec: &PhantomSpec, template: &Volume, t: usize) -> Result<Volume> {
    bspline::warp_volume(template, &gt_motion(spec, t)?)
}

/// Ground-truth tumor mask at `t`: trilinear warp of the template mask,
/// thresholded at 0.5.
pub fn gt_mask(spec: &PhantomSpec, mask: &Mask, t: usize) -> Result<Mask> {
    crate::metrics::warp_mask(mask, &gt_motion(spec, t)?)
}

/// A (phase, slab) pair filled from a segment outside its phase bin.
#[derive(Clone, Debug, PartialEq)]
pub struct SortGap {
    pub phase: usize,
    pub z_lo: usize,
    pub z_hi: usize,
    pub filled_from_t: usize,
}

#[derive(Clone, Debug)]
pub struct Sorted4dct {
    pub phases: Vec<Volume>,
    pub gaps: Vec<SortGap>,
    /// Timepoint stacked into each (phase, slab), slabs in ascending z.
    pub picks: Vec<Vec<usize>>,
}

fn circ_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(N_PHASES as f64);
    d.min(N_PHASES as f64 - d)
}

/// Phase sorting: for each phase bin and slab, stack the segment with that
/// label whose continuous phase is closest to the bin center (earliest on
/// ties). Missing bins are filled from the nearest phase and reported.
pub fn sort_4dct(segments: &[Segment], schedule: &AcquisitionSchedule) -> Result<Sorted4dct> {
    let grid = segments
        .first()
        .ok_or_else(|| Error::Argument("no segments to sort".into()))?
        .parent_grid;
    let mut slabs: Vec<(usize, usize)> = segments.iter().map(|s| (s.z_lo, s.z_hi)).collect();
    slabs.sort_unstable();
    slabs.dedup();
    let phase_of = |s: &Segment| -> Result<f64> {
        schedule
            .entries
            .get(s.t)
            .map(|e| e.phase)
            .ok_or_else(|| Error::Schedule(format!("segment t={} has no schedule row", s.t)))
    };
    let mut phases = Vec::with_capacity(N_PHASES);
    let mut gaps = Vec::new();
    let mut picks = Vec::with_capacity(N_PHASES);
    for p in 0..N_PHASES {
        let mut vol = Volume::filled(grid, AIR_HU as f32);
        let mut covered = vec![false; grid.dims[2]];
        let mut pick_row = Vec::with_capacity(slabs.len());
        for &(lo, hi) in &slabs {
            let mut best: Option<(bool, f64, usize, usize)> = None;
            for (j, s) in segments.iter().enumerate() {
                if (s.z_lo, s.z_hi) != (lo, hi) {
                    continue;
                }
                let ph = phase_of(s)?;
                let in_bin = (ph.round() as usize) % N_PHASES == p;
                let key = (!in_bin, circ_dist(ph, p as f64), s.t, j);
                if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                    best = Some(key);
                }
            }
            let (missing, _, t, j) = best.expect("slab has a segment");
            if missing {
                gaps.push(SortGap {
                    phase: p,
                    z_lo: lo,
                    z_hi: hi,
                    filled_from_t: t,
                });
            }
            insert_segment(&mut vol, &segments[j])?;
            covered[lo..=hi].iter_mut().for_each(|c| *c = true);
            pick_row.push(t);
        }
        if let Some(z) = covered.iter().position(|c| !c) {
            return Err(Error::Schedule(format!("slice {z} has no segment to sort")));
        }
        phases.push(vol);
        picks.push(pick_row);
    }
    Ok(Sorted4dct { phases, gaps, picks })
}
