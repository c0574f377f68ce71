//! Pose evaluation: per-frame error metrics, accuracy aggregation over
//! distance bins, and pipeline throughput measurement.
//!
//! Accuracy conventions: a frame with a failed estimate (no detection, no
//! consensus, …) counts against both accuracy rates rather than being
//! dropped, so hard frames cannot inflate the numbers. Orientation errors
//! are stored in radians and additionally reported in degrees, which is
//! the display default.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    angle_errors, project, rotation_error, CameraIntrinsics, GeometryError, ObjectModel, Pose,
};
use crate::refine::{infer_pose, PoseEstimate, RansacParams, RefineError};
use crate::tensor::ScaleTensor;

/// Mean-reprojection acceptance threshold, in pixels.
pub const REP_THRESHOLD_PX: f64 = 10.0;

/// Vertex-distance acceptance threshold as a fraction of model diameter.
pub const ADD_DIAMETER_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no successful records to aggregate")]
    EmptyInput,
    #[error("bench needs at least {min} frames, got {got}")]
    TooFewFrames { got: usize, min: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ── Per-frame metrics ───────────────────────────────────────────────────────

/// Euclidean distance between the two translations, in meters.
pub fn translation_error(gt: &Pose, pred: &Pose) -> f64 {
    (gt.translation - pred.translation).norm()
}

/// Mean corner reprojection discrepancy and its acceptance at `threshold_px`.
///
/// Fails with `NonPositiveDepth` when either pose puts a corner behind the
/// camera; the caller marks the frame rejected rather than scoring it.
pub fn rep_metric(
    gt: &Pose,
    pred: &Pose,
    model: &ObjectModel,
    intr: &CameraIntrinsics,
    threshold_px: f64,
) -> Result<(f64, bool), GeometryError> {
    let mut total = 0.0;
    for corner in &model.corners {
        let a = project(corner, gt, intr)?;
        let b = project(corner, pred, intr)?;
        total += (a - b).norm();
    }
    let mean = total / model.corners.len() as f64;
    Ok((mean, mean < threshold_px))
}

/// Mean 3D vertex distance between the two transformed models and its
/// acceptance below `fraction` of the model diameter.
pub fn add_metric(gt: &Pose, pred: &Pose, model: &ObjectModel, fraction: f64) -> (f64, bool) {
    let mean = model
        .corners
        .iter()
        .map(|c| (gt.transform_point(c) - pred.transform_point(c)).norm())
        .sum::<f64>()
        / model.corners.len() as f64;
    (mean, mean < fraction * model.diameter)
}

/// Per-frame evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub frame: u64,
    /// "ok" or the estimator's failure status.
    pub status: String,
    /// Ground-truth depth (camera-frame z), used for distance binning.
    pub gt_depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation_error: Option<f64>,
    /// Geodesic orientation error in radians.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roll_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rep_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub add_error: Option<f64>,
    pub rep_accepted: bool,
    pub add_accepted: bool,
}

/// Scores one frame. A failure status yields a record that counts as
/// rejected under both accuracy metrics.
pub fn evaluate_frame(
    frame: u64,
    gt: &Pose,
    prediction: Option<&Pose>,
    status: &str,
    model: &ObjectModel,
    intr: &CameraIntrinsics,
) -> EvalRecord {
    let gt_depth = gt.translation.z;
    let Some(pred) = prediction else {
        return EvalRecord {
            frame,
            status: status.into(),
            gt_depth,
            translation_error: None,
            orientation_error: None,
            roll_error: None,
            pitch_error: None,
            yaw_error: None,
            rep_error: None,
            add_error: None,
            rep_accepted: false,
            add_accepted: false,
        };
    };
    let angles = angle_errors(&gt.rotation, &pred.rotation);
    let (rep_error, rep_accepted) = match rep_metric(gt, pred, model, intr, REP_THRESHOLD_PX) {
        Ok((err, ok)) => (Some(err), ok),
        Err(_) => (None, false),
    };
    let (add_error, add_accepted) = add_metric(gt, pred, model, ADD_DIAMETER_FRACTION);
    EvalRecord {
        frame,
        status: status.into(),
        gt_depth,
        translation_error: Some(translation_error(gt, pred)),
        orientation_error: Some(rotation_error(&gt.rotation, &pred.rotation)),
        roll_error: Some(angles.roll),
        pitch_error: Some(angles.pitch),
        yaw_error: Some(angles.yaw),
        rep_error,
        add_error: Some(add_error),
        rep_accepted,
        add_accepted,
    }
}

// ── Aggregation ─────────────────────────────────────────────────────────────

/// Quartiles (q1, median, q3) by linear interpolation.
fn quartiles(sorted: &[f64]) -> [f64; 3] {
    let q = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        if lo == hi {
            sorted[lo]
        } else {
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    };
    [q(0.25), q(0.5), q(0.75)]
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Error statistics of one ground-truth depth bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// (q1, median, q3) of translation error in meters.
    pub translation_quartiles: [f64; 3],
    /// (q1, median, q3) of orientation error in degrees.
    pub orientation_quartiles_deg: [f64; 3],
}

/// Aggregate evaluation over a frame batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames_total: usize,
    pub frames_ok: usize,
    pub mean_translation_error: f64,
    pub median_translation_error: f64,
    /// Orientation errors in radians with degree twins for display.
    pub mean_orientation_error: f64,
    pub median_orientation_error: f64,
    pub mean_orientation_error_deg: f64,
    pub median_orientation_error_deg: f64,
    /// Fraction of all frames whose mean reprojection error beats 10 px.
    pub rep10_accuracy: f64,
    /// Fraction of all frames whose mean vertex distance beats 0.1·diameter.
    pub add01_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    pub bins: Vec<BinSummary>,
}

/// Aggregates per-frame records into a report. `bin_edges` partitions the
/// ground-truth depth range; records outside the edges are counted in the
/// totals but not binned.
pub fn aggregate(records: &[EvalRecord], bin_edges: &[f64]) -> Result<EvalReport, EvalError> {
    let ok: Vec<&EvalRecord> = records.iter().filter(|r| r.status == "ok").collect();
    if ok.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut trans: Vec<f64> = ok.iter().filter_map(|r| r.translation_error).collect();
    let mut orient: Vec<f64> = ok.iter().filter_map(|r| r.orientation_error).collect();
    trans.sort_by(f64::total_cmp);
    orient.sort_by(f64::total_cmp);

    let total = records.len();
    let rep10 = records.iter().filter(|r| r.rep_accepted).count() as f64 / total as f64;
    let add01 = records.iter().filter(|r| r.add_accepted).count() as f64 / total as f64;

    let mut bins = Vec::new();
    for window in bin_edges.windows(2) {
        let (lo, hi) = (window[0], window[1]);
        let mut t: Vec<f64> = Vec::new();
        let mut o: Vec<f64> = Vec::new();
        for r in &ok {
            if r.gt_depth >= lo && r.gt_depth < hi {
                if let Some(v) = r.translation_error {
                    t.push(v);
                }
                if let Some(v) = r.orientation_error {
                    o.push(v.to_degrees());
                }
            }
        }
        if t.is_empty() {
            continue;
        }
        t.sort_by(f64::total_cmp);
        o.sort_by(f64::total_cmp);
        bins.push(BinSummary {
            lo,
            hi,
            count: t.len(),
            translation_quartiles: quartiles(&t),
            orientation_quartiles_deg: quartiles(&o),
        });
    }

    let median_orientation = quartiles(&orient)[1];
    Ok(EvalReport {
        frames_total: total,
        frames_ok: ok.len(),
        mean_translation_error: mean(&trans),
        median_translation_error: quartiles(&trans)[1],
        mean_orientation_error: mean(&orient),
        median_orientation_error: median_orientation,
        mean_orientation_error_deg: mean(&orient).to_degrees(),
        median_orientation_error_deg: median_orientation.to_degrees(),
        rep10_accuracy: rep10,
        add01_accuracy: add01,
        fps: None,
        bins,
    })
}

/// Default distance bins: half-meter steps over 0.5–3.5 m.
pub fn default_bin_edges() -> Vec<f64> {
    (0..=6).map(|i| 0.5 + 0.5 * i as f64).collect()
}

// ── Throughput ──────────────────────────────────────────────────────────────

/// Result of a throughput run over pre-loaded frames.
#[derive(Debug, Serialize)]
pub struct BenchResult {
    pub fps: f64,
    pub frames: usize,
    pub elapsed_seconds: f64,
    pub parallel: bool,
    #[serde(skip)]
    pub results: Vec<Result<PoseEstimate, RefineError>>,
}

/// Measures wall-clock frames/second of the geometric pipeline
/// (decode → refine → PnP) over pre-loaded tensors. File I/O and any
/// network inference are outside the measurement; this is the
/// post-network pipeline only.
pub fn bench_pipeline(
    frames: &[(Vec<ScaleTensor>, Vec<ScaleTensor>)],
    intr: &CameraIntrinsics,
    model: &ObjectModel,
    params: &RansacParams,
    parallel: bool,
) -> Result<BenchResult, EvalError> {
    const MIN_FRAMES: usize = 10;
    if frames.len() < MIN_FRAMES {
        return Err(EvalError::TooFewFrames {
            got: frames.len(),
            min: MIN_FRAMES,
        });
    }
    let start = Instant::now();
    let results: Vec<Result<PoseEstimate, RefineError>> = if parallel {
        frames
            .par_iter()
            .map(|(det, kp)| infer_pose(det, kp, intr, model, params))
            .collect()
    } else {
        frames
            .iter()
            .map(|(det, kp)| infer_pose(det, kp, intr, model, params))
            .collect()
    };
    let elapsed = start.elapsed().as_secs_f64();
    Ok(BenchResult {
        fps: frames.len() as f64 / elapsed,
        frames: frames.len(),
        elapsed_seconds: elapsed,
        parallel,
        results,
    })
}

// ── CSV and SVG output ──────────────────────────────────────────────────────

/// Per-frame records as CSV, one row per frame.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(
        "frame,status,gt_depth,translation_error,orientation_error_rad,roll_error,pitch_error,yaw_error,rep_error,add_error,rep_accepted,add_accepted\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{},{},{},{},{}\n",
            r.frame,
            r.status,
            r.gt_depth,
            fmt(r.translation_error),
            fmt(r.orientation_error),
            fmt(r.roll_error),
            fmt(r.pitch_error),
            fmt(r.yaw_error),
            fmt(r.rep_error),
            fmt(r.add_error),
            r.rep_accepted,
            r.add_accepted,
        ));
    }
    out
}

/// Static SVG with side-by-side box plots of translation and orientation
/// error per distance bin.
pub fn report_to_svg(report: &EvalReport) -> String {
    const PANEL_W: f64 = 380.0;
    const PANEL_H: f64 = 260.0;
    const MARGIN: f64 = 45.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"10\">\n",
        2.0 * PANEL_W + 3.0 * MARGIN,
        PANEL_H + 2.0 * MARGIN
    ));
    let panels = [
        ("translation error (m)", 0usize),
        ("orientation error (deg)", 1usize),
    ];
    for (panel, (title, which)) in panels.iter().enumerate() {
        let x0 = MARGIN + panel as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let values: Vec<[f64; 3]> = report
            .bins
            .iter()
            .map(|b| {
                if *which == 0 {
                    b.translation_quartiles
                } else {
                    b.orientation_quartiles_deg
                }
            })
            .collect();
        let max_v = values
            .iter()
            .flat_map(|q| q.iter())
            .fold(1e-12f64, |a, &b| a.max(b))
            * 1.2;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            x0 + PANEL_W / 2.0,
            y0 - 12.0,
            title
        ));
        svg.push_str(&format!(
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#999\"/>\n"
        ));
        let n = report.bins.len().max(1) as f64;
        for (i, (bin, q)) in report.bins.iter().zip(&values).enumerate() {
            let cx = x0 + (i as f64 + 0.5) * PANEL_W / n;
            let w = 0.5 * PANEL_W / n;
            let y_of = |v: f64| y0 + PANEL_H - (v / max_v) * PANEL_H;
            let (y1, ym, y3) = (y_of(q[0]), y_of(q[1]), y_of(q[2]));
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#7aa6c2\" stroke=\"#335\"/>\n",
                cx - w / 2.0,
                y3,
                w,
                (y1 - y3).max(0.5),
            ));
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{ym}\" x2=\"{}\" y2=\"{ym}\" stroke=\"#113\" stroke-width=\"1.5\"/>\n",
                cx - w / 2.0,
                cx + w / 2.0,
            ));
            svg.push_str(&format!(
                "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{:.2}-{:.2}m</text>\n",
                y0 + PANEL_H + 14.0,
                bin.lo,
                bin.hi
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{max_v:.3}</text>\n",
            x0 - 4.0,
            y0 + 8.0,
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>\n",
            x0 - 4.0,
            y0 + PANEL_H,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
