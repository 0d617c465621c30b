//! CSV, JSON and text outputs of scenario runs.
//!
//! Files written by [`write_run`]:
//!
//! | file | rows |
//! |---|---|
//! | `j_evolution.csv` | snapshot × phase: step-1 `J`, threshold, detection flag |
//! | `currents.csv` | snapshot: fault current and the current feeding the fault bus |
//! | `measurements.csv` | snapshot × measurement: truth, value, noise sigma |
//! | `cme.csv` | snapshot × step × measurement: residual, `K_ii`, II, CME, CME^N |
//! | `displacement.csv` | one row: pre-fault, shoulder and displacement currents |
//! | `summary.json` | the [`RunSummary`] |
//! | `reports.json` | every snapshot's detection report |
//! | `report.txt` | CME^N table of the decision snapshot |
//!
//! A step-1 detection can be recomputed from `cme.csv` alone: `J` is the
//! sum of `cme_n^2` over the step-1 rows of a phase.

use crate::analytics::DetectionReport;
use crate::error::Result;
use crate::network::{Location, MeasurementPlan, Source};
use crate::scenario::{MonteCarloSummary, RunSummary, ScenarioRun};
use crate::sim::MeasurementSet;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Serialize)]
struct JRow {
    snapshot: usize,
    time_s: f64,
    stage: String,
    phase: String,
    #[serde(rename = "J")]
    j: f64,
    threshold: f64,
    detected: bool,
}

#[derive(Serialize)]
struct CurrentRow {
    snapshot: usize,
    time_s: f64,
    stage: String,
    hif_current_a: f64,
    upstream_current_a: Option<f64>,
}

#[derive(Serialize)]
pub struct MeasurementRow {
    pub snapshot: usize,
    pub index: usize,
    pub kind: String,
    pub location: String,
    pub phase: String,
    pub source: String,
    pub truth: f64,
    pub value: f64,
    pub sigma: f64,
}

#[derive(Serialize)]
struct CmeRow {
    snapshot: usize,
    step: u8,
    phase: String,
    label: String,
    z: f64,
    h: f64,
    residual: f64,
    sigma: f64,
    k_ii: f64,
    ii: f64,
    cme: f64,
    cme_n: f64,
    critical: bool,
}

#[derive(Serialize)]
struct McRow {
    run: usize,
    seed: u64,
    first_detection_s: Option<f64>,
    decision_snapshot: Option<usize>,
    verdict: String,
    suspected_bus: Option<u32>,
    top_entry: Option<String>,
    top_is_fault_injection: bool,
    detections_outside_window: usize,
}

fn stage_name(stage: crate::sim::FaultStage) -> String {
    serde_json::to_value(stage)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn location_name(l: &Location) -> String {
    l.to_string()
}

pub fn measurement_rows(snapshot: usize, plan: &MeasurementPlan, set: &MeasurementSet) -> Vec<MeasurementRow> {
    plan.specs
        .iter()
        .enumerate()
        .map(|(i, s)| MeasurementRow {
            snapshot,
            index: i,
            kind: s.kind.name().into(),
            location: location_name(&s.location),
            phase: s.phase.to_string(),
            source: match s.source {
                Source::Real => "real".into(),
                Source::Synthetic => "synthetic".into(),
            },
            truth: set.truth[i],
            value: set.values[i],
            sigma: set.noise_sigma[i],
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes a measurement snapshot as CSV.
pub fn write_measurements_csv(path: &Path, plan: &MeasurementPlan, set: &MeasurementSet, snapshot: usize) -> Result<()> {
    write_csv(path, measurement_rows(snapshot, plan, set))
}

/// Writes every output of a single run into `dir`; returns the paths.
pub fn write_run(run: &ScenarioRun, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };

    write_csv(
        &out("j_evolution.csv"),
        run.summary.snapshots.iter().flat_map(|s| {
            crate::network::Phase::ALL.into_iter().map(move |p| JRow {
                snapshot: s.index,
                time_s: s.time_s,
                stage: stage_name(s.stage),
                phase: p.to_string(),
                j: s.j(p),
                threshold: s.threshold[p.index()],
                detected: s.detected(p),
            })
        }),
    )?;

    write_csv(
        &out("currents.csv"),
        run.records.iter().map(|r| CurrentRow {
            snapshot: r.index,
            time_s: r.time_s,
            stage: stage_name(r.stage),
            hif_current_a: r.hif_current_a,
            upstream_current_a: r.upstream_current_a,
        }),
    )?;

    write_csv(
        &out("measurements.csv"),
        run.records
            .iter()
            .flat_map(|r| measurement_rows(r.index, run.plan_for(r), &r.measurements)),
    )?;

    let mut cme_rows = Vec::new();
    for r in &run.records {
        let plan = run.plan_for(r);
        let steps = std::iter::once(&r.outcome.step1).chain(r.outcome.step2.as_ref());
        for est in steps {
            for pe in &est.phases {
                for (k, &i) in pe.plan_indices.iter().enumerate() {
                    cme_rows.push(CmeRow {
                        snapshot: r.index,
                        step: est.step,
                        phase: pe.phase.to_string(),
                        label: plan.specs[i].full_label(),
                        z: pe.measured[k],
                        h: pe.estimated[k],
                        residual: pe.residual[k],
                        sigma: pe.sigma[k],
                        k_ii: pe.k_diag[k],
                        ii: pe.innovation_index[k],
                        cme: pe.cme[k],
                        cme_n: pe.cme_n[k],
                        critical: pe.critical[k],
                    });
                }
            }
        }
    }
    write_csv(&out("cme.csv"), cme_rows)?;

    if let Some(d) = &run.summary.displacement {
        write_csv(&out("displacement.csv"), [d])?;
    }

    write_json(&out("summary.json"), &run.summary)?;
    let reports: Vec<&DetectionReport> = run.records.iter().map(|r| &r.outcome.report).collect();
    write_json(&out("reports.json"), &reports)?;
    fs::write(out("report.txt"), text_report(run))?;
    Ok(written)
}

/// Human-readable report: run header, displacement table and the CME^N
/// listing of the decision snapshot.
pub fn text_report(run: &ScenarioRun) -> String {
    let s = &run.summary;
    let mut out = format!("scenario {} (seed {})\n", s.name, s.seed);
    if let Some((bus, phase)) = s.fault {
        out.push_str(&format!("fault: bus {bus} lateral, phase {phase}\n"));
    }
    if let Some(d) = &s.displacement {
        out.push_str(&format!(
            "phase {} I_RMS pre-fault (branch {}-{}): {:.2} A\n",
            d.phase, d.upstream_bus, d.bus, d.pre_fault_a
        ));
        out.push_str(&format!("phase {} I_RMS shoulder: {:.2} A\n", d.phase, d.shoulder_a));
        out.push_str(&format!("phase {} I_RMS displacement: {:.2} A\n", d.phase, d.displacement_a));
        if let (Some(a), Some(h)) = (d.at_detection_a, d.hif_at_detection_a) {
            out.push_str(&format!("phase {} I_RMS at first detection: {:.2} A\n", d.phase, a));
            out.push_str(&format!("smallest detected HIF I_RMS: {:.2} A\n", h));
        }
    }
    match s.first_detection_s {
        Some(t) => {
            let ph: Vec<String> = s.first_detection_phases.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!("first detection in window: t = {t:.2} s, phase {}\n", ph.join(",")));
        }
        None => out.push_str("no detection in the fault window\n"),
    }
    out.push_str(&format!("detections outside the fault window: {}\n", s.detections_outside_window));
    out.push_str(&format!("final classification: {}\n", s.final_classification.name()));
    if let Some(i) = s.decision_snapshot {
        let r = &run.records[i];
        out.push_str(&format!("\ndecision snapshot {} (t = {:.2} s)\n", i, r.time_s));
        out.push_str(&r.outcome.report.to_table());
    }
    out
}

/// Writes a Monte Carlo summary (`mc_summary.json`, `mc_runs.csv`).
pub fn write_monte_carlo(summary: &MonteCarloSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let json = dir.join("mc_summary.json");
    write_json(&json, summary)?;
    let csv_path = dir.join("mc_runs.csv");
    write_csv(
        &csv_path,
        summary.runs.iter().enumerate().map(|(i, r)| mc_row(i, r)),
    )?;
    Ok(vec![json, csv_path])
}

fn mc_row(i: usize, r: &RunSummary) -> McRow {
    McRow {
        run: i,
        seed: r.seed,
        first_detection_s: r.first_detection_s,
        decision_snapshot: r.decision_snapshot,
        verdict: r.final_classification.name().into(),
        suspected_bus: r.final_classification.suspected_bus(),
        top_entry: r.top_entry.clone(),
        top_is_fault_injection: r.top_is_fault_injection(),
        detections_outside_window: r.detections_outside_window,
    }
}

/// One-line machine-readable summary for standard output.
pub fn summary_line(s: &RunSummary) -> String {
    serde_json::json!({
        "scenario": s.name,
        "seed": s.seed,
        "first_detection_s": s.first_detection_s,
        "verdict": s.final_classification.name(),
        "suspected_bus": s.final_classification.suspected_bus(),
        "top_entry": s.top_entry,
        "displacement_a": s.displacement.as_ref().map(|d| d.displacement_a),
    })
    .to_string()
}

pub fn mc_summary_line(s: &MonteCarloSummary) -> String {
    serde_json::json!({
        "scenario": s.name,
        "runs": s.runs.len(),
        "failed": s.failed.len(),
        "detection_rate": s.detection_rate,
        "fault_detected_rate": s.fault_detected_rate,
        "top_hit_rate": s.top_hit_rate,
        "parameter_hit_rate": s.parameter_hit_rate,
        "false_verdict_rate": s.false_verdict_rate,
    })
    .to_string()
}
