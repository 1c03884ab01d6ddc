use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use motion4d::metrics::{self, EvalReport, GroundTruth, MaskRule};
use motion4d::phantom::{self, AcquisitionSchedule, PhantomSpec, RespTrace};
use motion4d::pipeline::{self, PipelineConfig, PipelineInputs, PipelineResult};
use motion4d::volgrid::{self, Segment, Volume};

use crate::manifest::{files_under, now_unix, RunManifest};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn named(prefix: &str, root: &Path, files: Vec<PathBuf>) -> Vec<(String, PathBuf)> {
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            (format!("{prefix}/{rel}"), p)
        })
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn defaults(out: &Path, reduced: bool) -> Result<()> {
    create_dir(out)?;
    let spec = if reduced { PhantomSpec::reduced() } else { PhantomSpec::default() };
    spec.write_json(out.join("spec.json"))?;
    phantom::default_schedule(&spec)?.write_csv(out.join("schedule.csv"))?;
    PipelineConfig::default().write_json(out.join("config.json"))?;
    Ok(())
}

pub fn simulate(spec_path: &Path, schedule_path: Option<&Path>, out: &Path) -> Result<()> {
    let started = now_unix();
    let spec = PhantomSpec::read_json(spec_path)?;
    let schedule = match schedule_path {
        Some(p) => AcquisitionSchedule::read_csv(p)?,
        None => phantom::default_schedule(&spec)?,
    };
    create_dir(out)?;
    spec.write_json(out.join("spec.json"))?;
    schedule.write_csv(out.join("schedule.csv"))?;

    let (template, tumor) = phantom::build_template(&spec)?;
    let acq = phantom::simulate_acquisition(&spec, &template, &schedule)?;
    let seg_dir = out.join("segments");
    create_dir(&seg_dir)?;
    for (k, seg) in acq.segments.iter().enumerate() {
        volgrid::write_segment(seg, seg_dir.join(format!("seg_{k:05}.json")))?;
    }
    let n = schedule.len();
    let chest = spec.chest_trace()?;
    RespTrace::new(chest.values[..n].to_vec(), chest.dt)?.write_csv(out.join("signals.csv"))?;
    pipeline::write_labels_csv(&acq.labels, out.join("labels.csv"))?;

    let sorted = phantom::sort_4dct(&acq.segments, &schedule)?;
    let sorted_dir = out.join("sorted");
    create_dir(&sorted_dir)?;
    for (p, v) in sorted.phases.iter().enumerate() {
        volgrid::write_volume(v, sorted_dir.join(format!("phase_{p}.json")))?;
    }
    let mut gaps = String::from("phase,z_lo,z_hi,filled_from_t\n");
    for g in &sorted.gaps {
        gaps.push_str(&format!("{},{},{},{}\n", g.phase, g.z_lo, g.z_hi, g.filled_from_t));
    }
    fs::write(sorted_dir.join("gaps.csv"), gaps)?;

    let gt_dir = out.join("gt");
    create_dir(&gt_dir)?;
    volgrid::write_volume(&template, gt_dir.join("template.json"))?;
    volgrid::write_mask(&tumor, gt_dir.join("tumor.json"))?;
    let model = spec.gt_model()?;
    for (i, c) in model.c.iter().enumerate() {
        motion4d::bspline::write_control_grid(c, gt_dir.join(format!("model_{}.json", i + 1)))?;
    }
    spec.gt_signals()?.write_csv(gt_dir.join("signals.csv"))?;
    spec.diaphragm_trace()?.write_csv(gt_dir.join("diaphragm_trace.csv"))?;

    // end-inhale artifact indicator of the sorted volume
    let cols = spec.diaphragm_columns();
    let step = metrics::diaphragm_step(&sorted.phases[0], &cols, metrics::LUNG_EDGE_HU);
    println!(
        "simulated {} segments, {} sort gaps, end-inhale diaphragm step {:.3} slices",
        acq.segments.len(),
        sorted.gaps.len(),
        step
    );

    let mut inputs = vec![("spec.json".to_string(), spec_path.to_path_buf())];
    if let Some(p) = schedule_path {
        inputs.push(("schedule.csv".to_string(), p.to_path_buf()));
    }
    RunManifest::new("simulate", Some(spec.trace.seed), &inputs, started)?.write(out)
}

/// Segment files of a data directory, in name order.
fn segment_files(data: &Path) -> Result<Vec<PathBuf>> {
    let dir = data.join("segments");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    if files.is_empty() {
        return Err(motion4d::Error::Config(format!("no segments in {}", dir.display())).into());
    }
    Ok(files)
}

fn sorted_phase_files(data: &Path) -> Vec<PathBuf> {
    (0..phantom::N_PHASES)
        .map(|p| data.join("sorted").join(format!("phase_{p}.json")))
        .collect()
}

pub fn fit(config_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let started = now_unix();
    let cfg = PipelineConfig::read_json(config_path)?;
    let seg_files = segment_files(data)?;
    let segs: Vec<Segment> = seg_files.iter().map(volgrid::read_segment).collect::<motion4d::Result<_>>()?;
    let mut used = vec![("config.json".to_string(), config_path.to_path_buf())];
    let sig_path = data.join("signals.csv");
    let signal = if sig_path.exists() {
        used.push(("data/signals.csv".into(), sig_path.clone()));
        Some(RespTrace::read_csv(&sig_path)?)
    } else {
        None
    };
    let lab_path = data.join("labels.csv");
    let labels = if lab_path.exists() {
        used.push(("data/labels.csv".into(), lab_path.clone()));
        Some(pipeline::read_labels_csv(&lab_path)?)
    } else {
        None
    };
    let phase_files = sorted_phase_files(data);
    let phase_volumes = if phase_files.iter().all(|p| p.exists()) {
        for p in &phase_files {
            used.extend(named("data/sorted", &data.join("sorted"), vec![p.clone(), p.with_extension("raw")]));
        }
        Some(phase_files.iter().map(volgrid::read_volume).collect::<motion4d::Result<Vec<Volume>>>()?)
    } else {
        None
    };
    for f in &seg_files {
        used.extend(named("data/segments", &data.join("segments"), vec![f.clone(), f.with_extension("raw")]));
    }
    let inputs = PipelineInputs {
        signal,
        labels,
        phase_volumes,
    };
    let result = pipeline::run_pipeline(&cfg, &segs, &inputs)?;
    pipeline::write_result(&result, out)?;
    println!(
        "fit finished: {} trace rows, final objective {:.6e}",
        result.trace.len(),
        result.final_objective()
    );
    RunManifest::new("fit", Some(cfg.seed), &used, started)?.write(out)
}

fn print_summary(name: &str, r: &EvalReport) {
    let s = r.summary();
    println!(
        "{name:<10} n={:<4} DSC {:.3} ± {:.3}  TRE {:.3} ± {:.3} mm  RMSE {:.2} ± {:.2} HU",
        s.n, s.dsc.mean, s.dsc.sd, s.tre_mm.mean, s.tre_mm.sd, s.rmse_hu.mean, s.rmse_hu.sd
    );
}

pub fn evaluate(result_dir: &Path, gt: &Path, out: &Path, stride: usize) -> Result<()> {
    let started = now_unix();
    let result = pipeline::read_result(result_dir)?;
    let spec = PhantomSpec::read_json(gt.join("spec.json"))?;
    let truth = GroundTruth::from_spec(&spec)?;
    let nt = result.signals.nt().min(spec.trace.n_timepoints);
    let tps: Vec<usize> = (0..nt).step_by(stride.max(1)).collect();
    let rule = MaskRule::default();
    create_dir(out)?;
    let report = metrics::evaluate_run(&result, &truth, &tps, &rule)?;
    report.write_csv(out.join("report.csv"))?;
    report.write_summary_json(out.join("summary.json"))?;
    print_summary("model", &report);

    let mut used = named("result", result_dir, files_under(result_dir)?);
    used.push(("gt/spec.json".into(), gt.join("spec.json")));
    let phase_files = sorted_phase_files(gt);
    let lab_path = gt.join("labels.csv");
    if phase_files.iter().all(|p| p.exists()) && lab_path.exists() {
        let phases = phase_files.iter().map(volgrid::read_volume).collect::<motion4d::Result<Vec<_>>>()?;
        let labels = pipeline::read_labels_csv(&lab_path)?;
        let base = metrics::evaluate_sorted(&truth, &phases, &labels, &tps, &rule)?;
        base.write_csv(out.join("baseline_report.csv"))?;
        base.write_summary_json(out.join("baseline_summary.json"))?;
        print_summary("sorted", &base);
        used.push(("gt/labels.csv".into(), lab_path));
        for p in &phase_files {
            used.extend(named("gt/sorted", &gt.join("sorted"), vec![p.clone(), p.with_extension("raw")]));
        }
    }
    RunManifest::new("evaluate", Some(result.config.seed), &used, started)?.write(out)
}

#[derive(Serialize)]
struct ExtremePair {
    t_deep: usize,
    t_shallow: usize,
}

pub fn export(result_dir: &Path, timepoints: &[usize], out: &Path) -> Result<()> {
    let started = now_unix();
    let result: PipelineResult = pipeline::read_result(result_dir)?;
    create_dir(out)?;
    let frames = pipeline::export_frames(&result, timepoints)?;
    if !frames.is_empty() {
        let dir = out.join("frames");
        create_dir(&dir)?;
        for (t, f) in timepoints.iter().zip(&frames) {
            volgrid::write_volume(f, dir.join(format!("frame_{t:05}.json")))?;
        }
    }
    if result.labels.is_some() {
        let (t_deep, t_shallow) = result.extreme_inhalation()?;
        write_json(&ExtremePair { t_deep, t_shallow }, &out.join("extreme_inhalation.json"))?;
        println!("deepest end-inhale t={t_deep}, shallowest t={t_shallow}");
    }
    let used = named("result", result_dir, files_under(result_dir)?);
    RunManifest::new("export", Some(result.config.seed), &used, started)?.write(out)
}
