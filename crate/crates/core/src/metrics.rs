//! ADD / ADD-S pose error metrics, accuracy-threshold curves, and AUC
//! reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{transform_points, ObjectModel, Pose};

/// Default threshold cap (meters) and step count for AUC, following the
/// YCB-Video evaluation convention.
pub const DEFAULT_MAX_THRESHOLD: f64 = 0.10;
pub const DEFAULT_CURVE_STEPS: usize = 1000;

/// One estimate/ground-truth pair for a single object in a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub class_id: u32,
    pub frame: usize,
    pub estimated: Pose,
    pub ground_truth: Pose,
}

/// Accuracy as a function of an ascending error threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    /// Ascending thresholds, meters.
    pub thresholds: Vec<f64>,
    /// Fraction of errors at or below each threshold.
    pub accuracy: Vec<f64>,
}

/// Mean distance between corresponding transformed model points.
pub fn add(est: &Pose, gt: &Pose, model: &ObjectModel) -> Result<f64> {
    let a = transform_points(est, &model.points)?;
    let b = transform_points(gt, &model.points)?;
    let m = model.points.len() as f64;
    let sum: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum();
    Ok(sum / m)
}

/// Mean distance from each transformed-estimate point to its nearest
/// transformed-ground-truth point.
pub fn add_s(est: &Pose, gt: &Pose, model: &ObjectModel) -> Result<f64> {
    let a = transform_points(est, &model.points)?;
    let b = transform_points(gt, &model.points)?;
    let m = model.points.len() as f64;
    let sum: f64 = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(sum / m)
}

/// Build an accuracy-threshold curve over `steps` uniform thresholds on
/// [0, max_threshold].
pub fn accuracy_curve(errors: &[f64], max_threshold: f64, steps: usize) -> Result<AccuracyCurve> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("accuracy_curve"));
    }
    if steps < 2 || max_threshold <= 0.0 {
        return Err(Error::InvalidInput {
            op: "accuracy_curve",
            msg: format!("need steps >= 2 and max_threshold > 0, got {steps}, {max_threshold}"),
        });
    }
    let n = errors.len() as f64;
    let mut thresholds = Vec::with_capacity(steps);
    let mut accuracy = Vec::with_capacity(steps);
    for i in 0..steps {
        let thr = max_threshold * i as f64 / (steps - 1) as f64;
        let hits = errors.iter().filter(|&&e| e <= thr).count();
        thresholds.push(thr);
        accuracy.push(hits as f64 / n);
    }
    Ok(AccuracyCurve {
        thresholds,
        accuracy,
    })
}

/// Trapezoidal area under the curve, normalized by the threshold span and
/// scaled to a percentage.
pub fn auc(curve: &AccuracyCurve) -> f64 {
    let n = curve.thresholds.len();
    if n < 2 {
        return curve.accuracy.first().copied().unwrap_or(0.0) * 100.0;
    }
    let span = curve.thresholds[n - 1] - curve.thresholds[0];
    let mut area = 0.0;
    for i in 1..n {
        let dt = curve.thresholds[i] - curve.thresholds[i - 1];
        area += 0.5 * (curve.accuracy[i] + curve.accuracy[i - 1]) * dt;
    }
    area / span * 100.0
}

/// One row of the per-object report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Object name, or "ALL" for the pooled row.
    pub label: String,
    pub add_auc: f64,
    pub adds_auc: f64,
    pub count: usize,
}

/// Per-object ADD/ADD-S AUC table with a pooled ALL row.
///
/// The ALL row is the AUC of the pooled error lists, not a mean of
/// per-class AUCs. Every object is scored in both columns; the symmetric
/// flag only affects which column a consumer should prefer.
pub fn per_object_report(
    records: &[EvalRecord],
    models: &BTreeMap<u32, ObjectModel>,
    max_threshold: f64,
    steps: usize,
) -> Result<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("per_object_report"));
    }
    let mut by_class: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut pooled_add = Vec::with_capacity(records.len());
    let mut pooled_adds = Vec::with_capacity(records.len());
    for rec in records {
        let model = models.get(&rec.class_id).ok_or_else(|| Error::InvalidInput {
            op: "per_object_report",
            msg: format!("unknown class_id {} in eval records", rec.class_id),
        })?;
        let e_add = add(&rec.estimated, &rec.ground_truth, model)?;
        let e_adds = add_s(&rec.estimated, &rec.ground_truth, model)?;
        let entry = by_class.entry(rec.class_id).or_default();
        entry.0.push(e_add);
        entry.1.push(e_adds);
        pooled_add.push(e_add);
        pooled_adds.push(e_adds);
    }
    let mut rows = Vec::new();
    for (class_id, (adds, addss)) in &by_class {
        rows.push(ReportRow {
            label: models[class_id].name.clone(),
            add_auc: auc(&accuracy_curve(adds, max_threshold, steps)?),
            adds_auc: auc(&accuracy_curve(addss, max_threshold, steps)?),
            count: adds.len(),
        });
    }
    rows.push(ReportRow {
        label: "ALL".to_string(),
        add_auc: auc(&accuracy_curve(&pooled_add, max_threshold, steps)?),
        adds_auc: auc(&accuracy_curve(&pooled_adds, max_threshold, steps)?),
        count: pooled_add.len(),
    });
    Ok(rows)
}

/// Serialize eval records as JSON-lines.
pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("serializable record")).unwrap();
    }
    out
}

/// Parse eval records from JSON-lines.
pub fn records_from_jsonl(text: &str) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(records)
}

/// Curve as two-column CSV (threshold, accuracy).
pub fn curve_to_csv(curve: &AccuracyCurve) -> String {
    let mut out = String::from("threshold,accuracy\n");
    for (t, a) in curve.thresholds.iter().zip(&curve.accuracy) {
        writeln!(out, "{t},{a}").unwrap();
    }
    out
}

/// Report as CSV with columns class, ADD_AUC, ADDS_AUC.
pub fn report_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("class,ADD_AUC,ADDS_AUC\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.label, r.add_auc, r.adds_auc).unwrap();
    }
    out
}

/// Minimal SVG plot of one or more accuracy curves (polyline plus axes).
pub fn curves_to_svg(curves: &[(&str, &AccuracyCurve)]) -> String {
    let (w, h, margin) = (640.0, 480.0, 50.0);
    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    )
    .unwrap();
    writeln!(
        svg,
        "  <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>"
    )
    .unwrap();
    // axes
    writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"black\"/>",
        m = margin,
        y = h - margin,
        x = w - margin
    )
    .unwrap();
    writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{y}\" stroke=\"black\"/>",
        m = margin,
        y = h - margin
    )
    .unwrap();
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
    let max_t = curves
        .iter()
        .flat_map(|(_, c)| c.thresholds.last().copied())
        .fold(1e-12f64, f64::max);
    for (k, (label, curve)) in curves.iter().enumerate() {
        let color = colors[k % colors.len()];
        let mut pts = String::new();
        for (t, a) in curve.thresholds.iter().zip(&curve.accuracy) {
            let x = margin + (w - 2.0 * margin) * t / max_t;
            let y = h - margin - (h - 2.0 * margin) * a;
            write!(pts, "{x:.2},{y:.2} ").unwrap();
        }
        writeln!(
            svg,
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            pts.trim_end()
        )
        .unwrap();
        writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"14\">{label}</text>",
            w - margin - 120.0,
            margin + 18.0 * (k + 1) as f64
        )
        .unwrap();
    }
    writeln!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-size=\"14\">threshold (m)</text>",
        w / 2.0 - 40.0,
        h - margin / 3.0
    )
    .unwrap();
    writeln!(svg, "</svg>").unwrap();
    svg
}
