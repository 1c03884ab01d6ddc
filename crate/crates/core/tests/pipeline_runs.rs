mod common;

use common::*;
use motion4d::metrics;
use motion4d::phantom::PhantomSpec;
use motion4d::pipeline::{self, Mode, PipelineConfig, PipelineInputs, Stage};

fn fit(case: &Case, cfg: &PipelineConfig) -> pipeline::PipelineResult {
    pipeline::run_pipeline(cfg, &case.acq.segments, &case.inputs()).unwrap()
}

#[test]
fn static_phantom_recovers_no_motion() {
    let mut spec = PhantomSpec::reduced();
    spec.motion.chest_amplitude_mm = 0.0;
    spec.motion.diaphragm_amplitude_mm = 0.0;
    spec.noise_sigma_hu = 10.0;
    let case = simulate_case(spec);
    let cfg = PipelineConfig {
        mode: Mode::Free,
        ..quick_config()
    };
    let r = pipeline::run_pipeline(
        &cfg,
        &case.acq.segments,
        &PipelineInputs {
            labels: Some(case.acq.labels.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let tenth_voxel = 0.1 * case.spec.grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    for t in 0..r.signals.nt() {
        let m = r.motion(t).unwrap();
        let dense = motion4d::bspline::dense_field(&m).unwrap();
        let worst = dense.iter().map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()).fold(0.0, f64::max);
        assert!(worst < tenth_voxel, "t={t}: {worst} mm");
    }
    let e = metrics::rmse(&r.i0, &case.template, None).unwrap();
    assert!(e < 10.0, "reference rmse {e} HU");
}

#[test]
fn free_fit_reduces_objective_and_logs_monotone_stages() {
    let case = simulate_case(PhantomSpec::reduced());
    let cfg = PipelineConfig {
        mode: Mode::Free,
        ..quick_config()
    };
    let r = fit(&case, &cfg);
    let last = cfg.levels.len() - 1;
    let f = r.level_objectives(last);
    assert!(*f.last().unwrap() < 0.1 * f[0], "{} vs {}", f.last().unwrap(), f[0]);
    assert_monotone(&r);
    assert!(r.trace.iter().any(|row| row.stage == Stage::Mcir));
}

/// Steps and stage hand-offs never raise the objective within a level.
fn assert_monotone(r: &pipeline::PipelineResult) {
    for w in r.trace.windows(2) {
        if w[0].level == w[1].level {
            assert!(w[1].objective <= w[0].objective, "{:?} -> {:?}", w[0], w[1]);
        }
    }
}

#[test]
fn stage_hand_offs_agree_in_every_mode() {
    let case = simulate_case(PhantomSpec::reduced());
    for mode in [Mode::Driven, Mode::Free, Mode::Optimized] {
        let r = fit(
            &case,
            &PipelineConfig {
                mode,
                ..quick_config()
            },
        );
        assert_monotone(&r);
        for w in r.trace.windows(2) {
            if w[0].level == w[1].level && w[1].iteration == 0 && w[0].stage != w[1].stage {
                assert_eq!(w[0].objective, w[1].objective, "{mode:?}: {:?} -> {:?}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn driven_equals_optimized_without_hypergradient() {
    let case = simulate_case(PhantomSpec::reduced());
    let cfg = PipelineConfig {
        levels: vec![[2, 2, 2]],
        max_alternations: 2,
        ..quick_config()
    };
    let driven = fit(
        &case,
        &PipelineConfig {
            mode: Mode::Driven,
            ..cfg.clone()
        },
    );
    let opt = fit(
        &case,
        &PipelineConfig {
            mode: Mode::Optimized,
            alpha: 0.0,
            ..cfg
        },
    );
    assert_eq!(driven.i0, opt.i0);
    assert_eq!(driven.model, opt.model);
    assert_eq!(driven.signals, opt.signals);
    let objs = |r: &pipeline::PipelineResult| r.trace.iter().map(|x| x.objective).collect::<Vec<_>>();
    assert_eq!(objs(&driven), objs(&opt));
}

#[test]
fn driven_extremes_follow_the_trace() {
    let case = simulate_case(PhantomSpec::reduced());
    let cfg = PipelineConfig {
        mode: Mode::Driven,
        levels: vec![[2, 2, 2]],
        max_alternations: 1,
        ..quick_config()
    };
    let r = fit(&case, &cfg);
    let (deep, shallow) = r.extreme_inhalation().unwrap();
    let ins: Vec<usize> = (0..case.acq.labels.len()).filter(|&t| case.acq.labels[t] == 0).collect();
    let v = &case.trace.values;
    let argmax = *ins.iter().max_by(|&&a, &&b| v[a].total_cmp(&v[b])).unwrap();
    let argmin = *ins.iter().min_by(|&&a, &&b| v[a].total_cmp(&v[b])).unwrap();
    assert_eq!((deep, shallow), (argmax, argmin));
}

#[test]
fn result_directory_round_trip() {
    let case = simulate_case(PhantomSpec::reduced());
    let cfg = PipelineConfig {
        levels: vec![[2, 2, 2]],
        max_alternations: 1,
        ..quick_config()
    };
    let r = fit(&case, &cfg);
    let dir = tempfile::tempdir().unwrap();
    pipeline::write_result(&r, dir.path()).unwrap();
    let back = pipeline::read_result(dir.path()).unwrap();
    assert_eq!(back.config, r.config);
    assert_eq!(back.i0, r.i0);
    // control grids are stored as f32
    for (a, b) in back.model.c.iter().zip(&r.model.c) {
        assert!(a.same_geometry(b));
        for (u, v) in a.disp.iter().flatten().zip(b.disp.iter().flatten()) {
            assert_eq!(*u, *v as f32 as f64);
        }
    }
    assert_eq!(back.signals, r.signals);
    assert_eq!(back.trace, r.trace);
    assert_eq!(back.coverage, r.coverage);
    assert_eq!(back.labels, r.labels);
    let again = tempfile::tempdir().unwrap();
    pipeline::write_result(&back, again.path()).unwrap();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let p = entry.unwrap().path();
        let q = again.path().join(p.file_name().unwrap());
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap(), "{}", p.display());
    }
}

#[test]
fn mode_needs_its_inputs() {
    let case = simulate_case(PhantomSpec::reduced());
    let segs = &case.acq.segments;
    let driven = PipelineConfig {
        mode: Mode::Driven,
        ..quick_config()
    };
    let err = pipeline::run_pipeline(&driven, segs, &PipelineInputs::default()).unwrap_err();
    assert!(matches!(err, motion4d::Error::Config(_)), "{err:?}");
    let free = PipelineConfig {
        mode: Mode::Free,
        ..quick_config()
    };
    let err = pipeline::run_pipeline(&free, segs, &PipelineInputs::default()).unwrap_err();
    assert!(matches!(err, motion4d::Error::Config(_)), "{err:?}");
}
