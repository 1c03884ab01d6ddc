#![allow(dead_code)]

use motion4d::bspline::ControlGrid;
use motion4d::pipeline::PipelineConfig;
use motion4d::volgrid::{Grid3, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random volume smoothed by a few box passes so trilinear sampling has
/// well-defined slopes almost everywhere.
pub fn smooth_volume(g: Grid3, seed: u64, amp: f64) -> Volume {
    let mut r = rng(seed);
    let mut v: Vec<f64> = (0..g.len()).map(|_| r.gen_range(-amp..amp)).collect();
    let [nx, ny, nz] = g.dims;
    for _ in 0..2 {
        let src = v.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for (dx, dy, dz) in [(0i64, 0i64, 0i64), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if xx >= 0 && yy >= 0 && zz >= 0 && (xx as usize) < nx && (yy as usize) < ny && (zz as usize) < nz {
                            acc += src[g.index(xx as usize, yy as usize, zz as usize)];
                            n += 1.0;
                        }
                    }
                    v[g.index(x, y, z)] = acc / n;
                }
            }
        }
    }
    Volume::new(g, v.into_iter().map(|x| x as f32).collect()).unwrap()
}

pub fn random_grid(cg: &ControlGrid, seed: u64, amp: f64) -> ControlGrid {
    let mut r = rng(seed);
    let mut out = cg.zeros_like();
    for d in &mut out.disp {
        *d = [r.gen_range(-amp..amp), r.gen_range(-amp..amp), r.gen_range(-amp..amp)];
    }
    out
}

/// Pipeline settings used for quick runs on the reduced phantom.
pub fn quick_config() -> PipelineConfig {
    PipelineConfig {
        levels: vec![[2, 2, 2], [1, 1, 1]],
        max_alternations: 3,
        max_inner_iters: 4,
        max_mcir_iters: 4,
        ..PipelineConfig::default()
    }
}

/// Naive trilinear sample with constant padding.
pub fn trilinear_oracle(vol: &Volume, q: [f64; 3], bg: f64) -> f64 {
    let g = vol.grid;
    let i = [q[0].floor(), q[1].floor(), q[2].floor()];
    let f = [q[0] - i[0], q[1] - i[1], q[2] - i[2]];
    let mut out = 0.0;
    for c in 0..8 {
        let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            w *= if d[a] == 1 { f[a] } else { 1.0 - f[a] };
            idx[a] = i[a] as i64 + d[a] as i64;
        }
        let inside = (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < g.dims[a]);
        let v = if inside {
            vol.at(idx[0] as usize, idx[1] as usize, idx[2] as usize) as f64
        } else {
            bg
        };
        out += w * v;
    }
    out
}

/// Cubic B-spline kernel evaluated directly, `beta(x)` for |x| < 2.
pub fn beta3(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

/// Displacement by summing `beta3` over every knot.
pub fn spline_oracle(cg: &ControlGrid, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..cg.cdims[2] {
        for j in 0..cg.cdims[1] {
            for i in 0..cg.cdims[0] {
                let kp = cg.knot_position(i, j, k);
                let w: f64 = (0..3).map(|a| beta3((p[a] - kp[a]) / cg.cspacing[a])).product();
                if w != 0.0 {
                    let d = cg.disp[cg.index(i, j, k)];
                    for a in 0..3 {
                        out[a] += w * d[a];
                    }
                }
            }
        }
    }
    out
}

/// A simulated acquisition plus everything the pipeline and the metrics
/// need from it.
pub struct Case {
    pub spec: motion4d::phantom::PhantomSpec,
    pub template: Volume,
    pub schedule: motion4d::phantom::AcquisitionSchedule,
    pub acq: motion4d::phantom::Acquisition,
    pub sorted: motion4d::phantom::Sorted4dct,
    pub trace: motion4d::phantom::RespTrace,
}

pub fn simulate_case(spec: motion4d::phantom::PhantomSpec) -> Case {
    use motion4d::phantom;
    let (template, _) = phantom::build_template(&spec).unwrap();
    let schedule = phantom::default_schedule(&spec).unwrap();
    let acq = phantom::simulate_acquisition(&spec, &template, &schedule).unwrap();
    let sorted = phantom::sort_4dct(&acq.segments, &schedule).unwrap();
    let trace = spec.chest_trace().unwrap();
    Case {
        spec,
        template,
        schedule,
        acq,
        sorted,
        trace,
    }
}

impl Case {
    pub fn inputs(&self) -> motion4d::pipeline::PipelineInputs {
        motion4d::pipeline::PipelineInputs {
            signal: Some(motion4d::phantom::RespTrace::new(self.trace.values[..self.schedule.len()].to_vec(), self.trace.dt).unwrap()),
            labels: Some(self.acq.labels.clone()),
            phase_volumes: Some(self.sorted.phases.clone()),
        }
    }
}
