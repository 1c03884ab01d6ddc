//! Surrogate signals as optimizable hyperparameters of the model fit.

use std::f64::consts::PI;

use crate::bspline::{ControlGrid, SplineTables};
use crate::error::{Error, Result};
use crate::surrmodel::{self, FitState, MotionModel, SurrogateMatrix};
use crate::volgrid::{Segment, Volume};

/// Derivative of the objective with respect to every surrogate entry.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperGradient {
    pub h: SurrogateMatrix,
}

impl HyperGradient {
    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.h.get(i, t)
    }

    pub fn rms(&self) -> f64 {
        let v = self.h.values();
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// `h[i,t] = <C_i - lambda S[i,t] g2_t, g1_t>` where `g1_t` is the gradient
/// with respect to `M_t` at `c_km1` and `g2_t` the gradient one step
/// earlier. The `lambda` term is dropped where `g2` is absent.
pub fn compute_hypergradient(
    c_km1: &MotionModel,
    grad_km2: Option<&[Option<ControlGrid>]>,
    grad_km1: &[Option<ControlGrid>],
    s_km1: &SurrogateMatrix,
    lambda_km1: f64,
) -> Result<HyperGradient> {
    let (ns, nt) = (s_km1.ns(), s_km1.nt());
    if c_km1.ns() != ns {
        return Err(Error::Geometry(format!("{} models for {ns} signals", c_km1.ns())));
    }
    if grad_km1.len() != nt || grad_km2.is_some_and(|g| g.len() != nt) {
        return Err(Error::Geometry(format!("gradient caches must hold {nt} timepoints")));
    }
    let geo = c_km1.geometry();
    for g in grad_km1.iter().chain(grad_km2.into_iter().flatten()).flatten() {
        geo.check_same_geometry(g, "hypergradient")?;
    }
    let mut h = SurrogateMatrix::zeros(ns, nt)?;
    for t in 0..nt {
        let Some(g1) = &grad_km1[t] else { continue };
        let g21 = grad_km2.and_then(|g| g[t].as_ref()).map(|g2| g2.dot(g1));
        for i in 0..ns {
            let mut v = c_km1.c[i].dot(g1);
            if let Some(g21) = g21 {
                v -= lambda_km1 * s_km1.get(i, t) * g21;
            }
            h.set(i, t, v);
        }
    }
    if h.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("hypergradient is not finite".into()));
    }
    Ok(HyperGradient { h })
}

/// `S' = S - alpha h`
pub fn update_surrogates(s: &SurrogateMatrix, h: &HyperGradient, alpha: f64) -> Result<SurrogateMatrix> {
    if s.ns() != h.h.ns() || s.nt() != h.h.nt() {
        return Err(Error::Geometry("hypergradient shape differs from surrogate matrix".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be >= 0, got {alpha}")));
    }
    let vals: Vec<f64> = s.values().iter().zip(h.h.values()).map(|(a, b)| a - alpha * b).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("surrogate update produced non-finite values".into()));
    }
    SurrogateMatrix::new(s.ns(), s.nt(), vals)
}

/// Two signals `cos(2 pi p / P)` and `sin(2 pi p / P)` from phase values.
pub fn init_surrogates_phase(phases: &[f64], period: usize) -> Result<SurrogateMatrix> {
    if phases.is_empty() {
        return Err(Error::Argument("no phases given".into()));
    }
    if period < 2 {
        return Err(Error::Argument(format!("phase count must be >= 2, got {period}")));
    }
    let p = period as f64;
    if let Some(bad) = phases.iter().find(|&&x| !(0.0..p).contains(&x)) {
        return Err(Error::Argument(format!("phase {bad} outside [0, {period})")));
    }
    let cos = phases.iter().map(|&x| (2.0 * PI * x / p).cos()).collect();
    let sin = phases.iter().map(|&x| (2.0 * PI * x / p).sin()).collect();
    SurrogateMatrix::from_rows(&[cos, sin])
}

/// Central-difference time derivative, one-sided at the ends.
pub fn temporal_derivative(values: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 3 {
        return Err(Error::Argument(format!("signal needs >= 3 samples, got {n}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Argument("sample interval must be positive".into()));
    }
    Ok((0..n)
        .map(|t| match t {
            0 => (values[1] - values[0]) / dt,
            t if t == n - 1 => (values[n - 1] - values[n - 2]) / dt,
            t => (values[t + 1] - values[t - 1]) / (2.0 * dt),
        })
        .collect())
}

/// Signal and its time derivative, each scaled to unit standard deviation.
pub fn init_surrogates_signal(values: &[f64], dt: f64) -> Result<SurrogateMatrix> {
    let d = temporal_derivative(values, dt)?;
    let mut s = SurrogateMatrix::from_rows(&[values.to_vec(), d])?;
    let sd = s.row_std();
    let bad: Vec<usize> = (0..2).filter(|&i| !(sd[i] > 0.0)).collect();
    if !bad.is_empty() {
        return Err(Error::DegenerateSignal(bad));
    }
    for (i, sdi) in sd.iter().enumerate() {
        s.row_mut(i).iter_mut().for_each(|v| *v /= sdi);
    }
    Ok(s)
}

/// Rescale each signal to unit standard deviation, multiplying the matching
/// correspondence model by the same factor so `M_t` is preserved.
pub fn normalize_surrogates(s: &SurrogateMatrix, c: &MotionModel) -> Result<(SurrogateMatrix, MotionModel)> {
    if s.ns() != c.ns() {
        return Err(Error::Geometry(format!("{} signals for {} models", s.ns(), c.ns())));
    }
    let sd = s.row_std();
    let bad: Vec<usize> = (0..s.ns()).filter(|&i| !(sd[i] > 0.0 && sd[i].is_finite())).collect();
    if !bad.is_empty() {
        return Err(Error::DegenerateSignal(bad));
    }
    let mut s2 = s.clone();
    let mut c2 = c.clone();
    for i in 0..s.ns() {
        s2.row_mut(i).iter_mut().for_each(|v| *v /= sd[i]);
        c2.c[i].scale(sd[i]);
    }
    Ok((s2, c2))
}

/// Applies one hypergradient update after a model step, normalized to unit
/// RMS and halved until the objective does not rise. Returns the step used
/// (0 if none was accepted) and the resulting objective.
pub(crate) fn surrogate_step(
    state: &FitState,
    i0: &Volume,
    s: &mut SurrogateMatrix,
    c: &MotionModel,
    tab: &SplineTables,
    segs: &[Segment],
    alpha: f64,
    f_model: f64,
) -> Result<(f64, f64)> {
    let (Some(c_km1), Some(g1)) = (&state.c_km1, &state.grad_km1) else {
        return Ok((0.0, f_model));
    };
    let h = compute_hypergradient(c_km1, state.grad_km2.as_deref(), g1, s, state.lambda_km1)?;
    let rms = h.rms();
    if rms == 0.0 {
        return Ok((0.0, f_model));
    }
    let hn = HyperGradient {
        h: SurrogateMatrix::new(s.ns(), s.nt(), h.h.values().iter().map(|v| v / rms).collect())?,
    };
    let mut a = alpha;
    for _ in 0..4 {
        let trial = update_surrogates(s, &hn, a)?;
        let f = surrmodel::sse_all(i0, &trial, c, tab, segs);
        if f <= f_model {
            *s = trial;
            return Ok((a, f));
        }
        a *= 0.5;
    }
    Ok((0.0, f_model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Grid3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grids(rng: &mut ChaCha8Rng, n: usize) -> (ControlGrid, Vec<ControlGrid>) {
        let g = Grid3::new([5, 5, 5], [2.0; 3], [0.0; 3]).unwrap();
        let base = ControlGrid::zeros(g, [4.0; 3], [0.0; 3]).unwrap();
        let v = (0..n)
            .map(|_| {
                let mut c = base.zeros_like();
                c.disp.iter_mut().for_each(|d| *d = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                c
            })
            .collect();
        (base, v)
    }

    #[test]
    fn zero_gradient_gives_zero_hypergradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (base, cs) = grids(&mut rng, 2);
        let c = MotionModel::new(cs).unwrap();
        let s = SurrogateMatrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let g1 = vec![Some(base.zeros_like()), None];
        let h = compute_hypergradient(&c, None, &g1, &s, 0.7).unwrap();
        assert!(h.h.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hypergradient_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, cs) = grids(&mut rng, 2);
        let (_, g1) = grids(&mut rng, 3);
        let (_, g2) = grids(&mut rng, 3);
        let c = MotionModel::new(cs).unwrap();
        let s = SurrogateMatrix::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.1, 0.4, -0.6]]).unwrap();
        let lam = 0.37;
        let g1o: Vec<_> = g1.iter().cloned().map(Some).collect();
        let g2o: Vec<_> = g2.iter().cloned().map(Some).collect();
        let h = compute_hypergradient(&c, Some(&g2o), &g1o, &s, lam).unwrap();
        for i in 0..2 {
            for t in 0..3 {
                // explicit [C_i - lam S g2] . g1, knot by knot
                let mut want = 0.0;
                for k in 0..c.c[i].len() {
                    for a in 0..3 {
                        let m = c.c[i].disp[k][a] - lam * s.get(i, t) * g2[t].disp[k][a];
                        want += m * g1[t].disp[k][a];
                    }
                }
                assert!((h.get(i, t) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
        let h0 = compute_hypergradient(&c, None, &g1o, &s, lam).unwrap();
        assert!((h0.get(1, 2) - c.c[1].dot(&g1[2])).abs() < 1e-12);
        assert!(compute_hypergradient(&c, None, &g1o[..2], &s, lam).is_err());
    }

    #[test]
    fn update_cases() {
        let s = SurrogateMatrix::from_rows(&[vec![1.0; 4], vec![1.0; 4]]).unwrap();
        let ones = HyperGradient { h: s.clone() };
        let zero = HyperGradient {
            h: SurrogateMatrix::zeros(2, 4).unwrap(),
        };
        assert_eq!(update_surrogates(&s, &zero, 0.01).unwrap(), s);
        let u = update_surrogates(&s, &ones, 0.01).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.99));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sa = SurrogateMatrix::new(2, 4, a.clone()).unwrap();
        let hb = HyperGradient {
            h: SurrogateMatrix::new(2, 4, b.clone()).unwrap(),
        };
        let u = update_surrogates(&sa, &hb, 0.01).unwrap();
        for k in 0..8 {
            assert_eq!(u.values()[k], a[k] - 0.01 * b[k]);
        }
        assert!(update_surrogates(&sa, &hb, -1.0).is_err());
    }

    #[test]
    fn phase_init_cases() {
        let s = init_surrogates_phase(&[0.0, 5.0], 10).unwrap();
        assert_eq!((s.get(0, 0), s.get(1, 0)), (1.0, 0.0));
        assert!((s.get(0, 1) + 1.0).abs() < 1e-12 && s.get(1, 1).abs() < 1e-12);
        let full: Vec<f64> = (0..10).map(|p| p as f64).collect();
        let s = init_surrogates_phase(&full, 10).unwrap();
        for t in 0..10 {
            assert!((s.get(0, t).powi(2) + s.get(1, t).powi(2) - 1.0).abs() < 1e-12);
        }
        assert!(init_surrogates_phase(&[], 10).is_err());
        assert!(init_surrogates_phase(&[10.0], 10).is_err());
    }

    #[test]
    fn derivative_cases() {
        assert!(temporal_derivative(&[2.0; 6], 0.4).unwrap().iter().all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..8).map(|t| 1.5 * t as f64).collect();
        let d = temporal_derivative(&ramp, 1.0).unwrap();
        assert!(d[1..7].iter().all(|&v| (v - 1.5).abs() < 1e-12));
        let dt = 0.05;
        let sig: Vec<f64> = (0..200).map(|t| (t as f64 * dt).sin()).collect();
        let d = temporal_derivative(&sig, dt).unwrap();
        for t in 1..199 {
            // central difference error is sin-weighted dt^2 / 6
            assert!((d[t] - (t as f64 * dt).cos()).abs() < dt * dt / 6.0 + 1e-12);
        }
        assert!(temporal_derivative(&[1.0, 2.0], 1.0).is_err());
        assert!(matches!(init_surrogates_signal(&[3.0; 5], 1.0), Err(Error::DegenerateSignal(_))));
        let s = init_surrogates_signal(&sig, dt).unwrap();
        for sd in s.row_std() {
            assert!((sd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, cs) = grids(&mut rng, 2);
        let c = MotionModel::new(cs).unwrap();
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s = SurrogateMatrix::from_rows(&[row.clone(), row.iter().map(|v| v * 0.1 + 1.0).collect()]).unwrap();
        let (sn, cn) = normalize_surrogates(&s, &c).unwrap();
        for sd in sn.row_std() {
            assert!((sd - 1.0).abs() < 1e-12);
        }
        for t in 0..6 {
            let a = surrmodel::compose_motion(&s, &c, t).unwrap();
            let b = surrmodel::compose_motion(&sn, &cn, t).unwrap();
            for k in 0..a.len() {
                for x in 0..3 {
                    assert!((a.disp[k][x] - b.disp[k][x]).abs() <= 1e-12 * a.disp[k][x].abs().max(1.0));
                }
            }
            for i in 0..2 {
                assert_eq!(s.get(i, t).signum(), sn.get(i, t).signum());
            }
        }
        // (2 S, C) and (S, 2 C) normalize to the same signals
        let mut s2 = s.clone();
        s2.row_mut(0).iter_mut().for_each(|v| *v *= 2.0);
        let mut c2 = c.clone();
        c2.c[0].scale(2.0);
        let (a_s, a_c) = normalize_surrogates(&s2, &c).unwrap();
        let (b_s, b_c) = normalize_surrogates(&s, &c2).unwrap();
        for t in 0..6 {
            assert!((a_s.get(0, t) - b_s.get(0, t)).abs() < 1e-12);
        }
        for k in 0..a_c.c[0].len() {
            for x in 0..3 {
                let (u, v) = (a_c.c[0].disp[k][x], b_c.c[0].disp[k][x]);
                assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }

        let flat = SurrogateMatrix::from_rows(&[vec![1.0; 6], row]).unwrap();
        match normalize_surrogates(&flat, &c) {
            Err(Error::DegenerateSignal(rows)) => assert_eq!(rows, vec![0]),
            other => panic!("{other:?}"),
        }
    }
}
