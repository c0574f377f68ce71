//! Reference implementations of the training losses, for verifying encoded
//! fixtures and labeling synthetic tensors. No autodiff, no training loop —
//! these are plain evaluations (plus analytic subgradients for checking).
//!
//! Residuals live in grid-cell units: a keypoint residual is
//! `Δ = cell + offset − target` with the target expressed in cells, so the
//! confidence sharpness `α` is also per-cell. This matters when comparing
//! pixel-space noise across scales — the same pixel error is a smaller
//! cell-unit residual on a coarser scale.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{logit, sigmoid, Anchor, DetectionBox};

/// Default sharpness of the exponential confidence target, in cell units.
pub const DEFAULT_ALPHA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("box center ({x:.3}, {y:.3}) lies outside cell (row {row}, col {col})")]
    CenterOutsideCell { x: f64, y: f64, row: usize, col: usize },
    #[error("box size ({w}, {h}) must be positive")]
    NonPositiveSize { w: f64, h: f64 },
}

/// Loss weights from the regression objective: offsets at weight 1,
/// confidence at 5 for object cells and 0.1 for background cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_off: f64,
    pub lambda_conf_obj: f64,
    pub lambda_conf_noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_off: 1.0,
            lambda_conf_obj: 5.0,
            lambda_conf_noobj: 0.1,
        }
    }
}

// ── Box encoding ────────────────────────────────────────────────────────────

/// Raw box coordinates as the network emits them: sigmoid-space center
/// fractions and log-space size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxEncoding {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxEncoding {
    /// Decodes back to pixel center/size, the inverse of
    /// [`invert_box_encoding`] and the scalar form of the tensor decode.
    pub fn decode(&self, anchor: &Anchor, row: usize, col: usize, stride: u32) -> (f64, f64, f64, f64) {
        let s = stride as f64;
        (
            (sigmoid(self.x) + col as f64) * s,
            (sigmoid(self.y) + row as f64) * s,
            anchor.width * self.w.exp(),
            anchor.height * self.h.exp(),
        )
    }
}

/// Grid cell containing a pixel position at the given stride.
pub fn cell_of(bx: f64, by: f64, stride: u32) -> (usize, usize) {
    let s = stride as f64;
    ((by / s).floor().max(0.0) as usize, (bx / s).floor().max(0.0) as usize)
}

/// Inverts the box decode: recovers the raw coordinates that decode to the
/// given box at the given cell and anchor.
///
/// The box center must lie strictly inside the cell, otherwise the sigmoid
/// inverse has no finite preimage.
pub fn invert_box_encoding(
    bx: f64,
    by: f64,
    bw: f64,
    bh: f64,
    anchor: &Anchor,
    row: usize,
    col: usize,
    stride: u32,
) -> Result<BoxEncoding, LossError> {
    if bw <= 0.0 || bh <= 0.0 {
        return Err(LossError::NonPositiveSize { w: bw, h: bh });
    }
    let s = stride as f64;
    let fx = bx / s - col as f64;
    let fy = by / s - row as f64;
    if !(fx > 0.0 && fx < 1.0 && fy > 0.0 && fy < 1.0) {
        return Err(LossError::CenterOutsideCell {
            x: bx,
            y: by,
            row,
            col,
        });
    }
    Ok(BoxEncoding {
        x: logit(fx),
        y: logit(fy),
        w: (bw / anchor.width).ln(),
        h: (bh / anchor.height).ln(),
    })
}

// ── Keypoint offset and confidence losses ───────────────────────────────────

/// Residual of one keypoint vote in cell units: `cell + offset − target`.
///
/// `cell` is (col, row) so that components line up with (x, y); `target`
/// is the ground-truth keypoint in absolute cell coordinates.
pub fn keypoint_residual(
    cell_col: usize,
    cell_row: usize,
    offset: Vector2<f64>,
    target_cells: Vector2<f64>,
) -> Vector2<f64> {
    Vector2::new(cell_col as f64, cell_row as f64) + offset - target_cells
}

/// Offset loss: sum of L1 norms of the residuals over all (cell, keypoint)
/// entries restricted to the ground-truth box.
pub fn offset_loss(residuals: &[Vector2<f64>]) -> f64 {
    residuals.iter().map(|d| d.x.abs() + d.y.abs()).sum()
}

/// Confidence target `exp(−α‖Δ‖₂)`, in (0, 1] and equal to 1 iff Δ = 0.
pub fn confidence_target(residual: &Vector2<f64>, alpha: f64) -> f64 {
    (-alpha * residual.norm()).exp()
}

/// Confidence loss: sum of absolute deviations of predicted confidences
/// from their exponential targets.
pub fn confidence_loss(confidences: &[f64], residuals: &[Vector2<f64>], alpha: f64) -> f64 {
    assert_eq!(confidences.len(), residuals.len());
    confidences
        .iter()
        .zip(residuals)
        .map(|(&v, d)| (v - confidence_target(d, alpha)).abs())
        .sum()
}

/// Confidence loss for cells without an object: target 0, so the loss is
/// the sum of the predicted confidences themselves.
pub fn confidence_suppression_loss(confidences: &[f64]) -> f64 {
    confidences.iter().map(|v| v.abs()).sum()
}

/// The combined regression objective:
/// `λ_off·L_off + λ_conf_obj·L_conf_obj + λ_conf_noobj·L_conf_noobj`.
pub fn pose_regression_loss(
    l_off: f64,
    l_conf_obj: f64,
    l_conf_noobj: f64,
    weights: &LossWeights,
) -> f64 {
    weights.lambda_off * l_off
        + weights.lambda_conf_obj * l_conf_obj
        + weights.lambda_conf_noobj * l_conf_noobj
}

/// Total network loss: detection plus regression.
pub fn total_loss(l_det: f64, l_reg: f64) -> f64 {
    l_det + l_reg
}

// ── Analytic subgradients (for finite-difference checks) ────────────────────

/// Subgradient of [`offset_loss`] w.r.t. each predicted offset: the
/// component-wise sign of the residual (undefined on the L1 kinks).
pub fn offset_loss_gradient(residuals: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    residuals
        .iter()
        .map(|d| Vector2::new(d.x.signum(), d.y.signum()))
        .collect()
}

/// Gradient of [`confidence_loss`] w.r.t. the predicted confidences.
pub fn confidence_loss_gradient_conf(
    confidences: &[f64],
    residuals: &[Vector2<f64>],
    alpha: f64,
) -> Vec<f64> {
    confidences
        .iter()
        .zip(residuals)
        .map(|(&v, d)| (v - confidence_target(d, alpha)).signum())
        .collect()
}

/// Gradient of [`confidence_loss`] w.r.t. the predicted offsets
/// (through the residual), away from Δ = 0 and the absolute-value kink.
pub fn confidence_loss_gradient_offset(
    confidences: &[f64],
    residuals: &[Vector2<f64>],
    alpha: f64,
) -> Vec<Vector2<f64>> {
    confidences
        .iter()
        .zip(residuals)
        .map(|(&v, d)| {
            let n = d.norm();
            if n == 0.0 {
                return Vector2::zeros();
            }
            let target = confidence_target(d, alpha);
            (v - target).signum() * alpha * target * (d / n)
        })
        .collect()
}

// ── Detection loss ──────────────────────────────────────────────────────────

/// Prediction for one (cell, anchor) slot, probabilities already in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPrediction {
    pub encoding: BoxEncoding,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
}

/// Training target for one (cell, anchor) slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotTarget {
    /// The best-IOU anchor for a ground-truth box: coordinate, objectness=1,
    /// and class terms all apply.
    Responsible {
        encoding: BoxEncoding,
        classes: Vec<f64>,
    },
    /// No object: objectness pushed to 0.
    Background,
    /// Overlaps an object above the ignore threshold without being the best
    /// anchor: no objectness penalty.
    Ignored,
}

/// Binary cross-entropy on probabilities, exact 0 at a perfect prediction.
pub fn bce(p: f64, target: f64) -> f64 {
    const EPS: f64 = 1e-12;
    let mut loss = 0.0;
    if target > 0.0 {
        loss -= target * p.max(EPS).ln();
    }
    if target < 1.0 {
        loss -= (1.0 - target) * (1.0 - p).max(EPS).ln();
    }
    loss
}

/// Detection loss: squared error on the raw coordinates of responsible
/// anchors plus binary cross-entropy on objectness and class scores.
pub fn detection_loss(predictions: &[SlotPrediction], targets: &[SlotTarget]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    let mut loss = 0.0;
    for (pred, target) in predictions.iter().zip(targets) {
        match target {
            SlotTarget::Responsible { encoding, classes } => {
                let e = &pred.encoding;
                loss += (e.x - encoding.x).powi(2)
                    + (e.y - encoding.y).powi(2)
                    + (e.w - encoding.w).powi(2)
                    + (e.h - encoding.h).powi(2);
                loss += bce(pred.objectness, 1.0);
                assert_eq!(pred.class_scores.len(), classes.len());
                for (&p, &t) in pred.class_scores.iter().zip(classes) {
                    loss += bce(p, t);
                }
            }
            SlotTarget::Background => loss += bce(pred.objectness, 0.0),
            SlotTarget::Ignored => {}
        }
    }
    loss
}

/// Objectness role of each anchor for a ground-truth box, by co-centered
/// width/height IOU: the best anchor is responsible, anchors above
/// `ignore_threshold` are ignored, the rest are background.
pub fn anchor_responsibility(
    gt_w: f64,
    gt_h: f64,
    anchors: &[Anchor],
    ignore_threshold: f64,
) -> Vec<SlotTarget> {
    let wh_iou = |a: &Anchor| {
        let inter = a.width.min(gt_w) * a.height.min(gt_h);
        inter / (a.width * a.height + gt_w * gt_h - inter)
    };
    let best = anchors
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| wh_iou(a).total_cmp(&wh_iou(b)))
        .map(|(i, _)| i);
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if Some(i) == best {
                SlotTarget::Responsible {
                    encoding: BoxEncoding {
                        x: 0.0,
                        y: 0.0,
                        w: 0.0,
                        h: 0.0,
                    },
                    classes: Vec::new(),
                }
            } else if wh_iou(a) > ignore_threshold {
                SlotTarget::Ignored
            } else {
                SlotTarget::Background
            }
        })
        .collect()
}

// ── Fixture evaluation (losses-check) ───────────────────────────────────────

/// One cell of a loss fixture. Offsets and keypoint targets are in cell
/// units; `cell` is `[row, col]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureCell {
    pub cell: [usize; 2],
    pub in_box: bool,
    pub offsets: [[f64; 2]; 8],
    pub confidences: [f64; 8],
    pub keypoints: [[f64; 2]; 8],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureDetection {
    pub predictions: Vec<SlotPrediction>,
    pub targets: Vec<SlotTarget>,
}

/// Input document for the `losses-check` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossFixture {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub keypoint_cells: Vec<FixtureCell>,
    #[serde(default)]
    pub detection: Option<FixtureDetection>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

/// All losses evaluated on a fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub offset_loss: f64,
    pub confidence_loss_obj: f64,
    pub confidence_loss_noobj: f64,
    pub pose_regression_loss: f64,
    pub detection_loss: f64,
    pub total_loss: f64,
}

pub fn evaluate_fixture(fixture: &LossFixture) -> LossReport {
    let mut box_residuals = Vec::new();
    let mut box_confs = Vec::new();
    let mut bg_confs = Vec::new();
    for cell in &fixture.keypoint_cells {
        for k in 0..8 {
            let residual = keypoint_residual(
                cell.cell[1],
                cell.cell[0],
                Vector2::new(cell.offsets[k][0], cell.offsets[k][1]),
                Vector2::new(cell.keypoints[k][0], cell.keypoints[k][1]),
            );
            if cell.in_box {
                box_residuals.push(residual);
                box_confs.push(cell.confidences[k]);
            } else {
                bg_confs.push(cell.confidences[k]);
            }
        }
    }
    let l_off = offset_loss(&box_residuals);
    let l_conf_obj = confidence_loss(&box_confs, &box_residuals, fixture.alpha);
    let l_conf_noobj = confidence_suppression_loss(&bg_confs);
    let l_reg = pose_regression_loss(l_off, l_conf_obj, l_conf_noobj, &fixture.weights);
    let l_det = fixture
        .detection
        .as_ref()
        .map(|d| detection_loss(&d.predictions, &d.targets))
        .unwrap_or(0.0);
    LossReport {
        offset_loss: l_off,
        confidence_loss_obj: l_conf_obj,
        confidence_loss_noobj: l_conf_noobj,
        pose_regression_loss: l_reg,
        detection_loss: l_det,
        total_loss: total_loss(l_det, l_reg),
    }
}

/// Invert-encode a decoded box back to raw coordinates at its own cell.
///
/// Convenience wrapper used by the synthetic generator and fixtures.
pub fn encode_box(
    b: &DetectionBox,
    anchor: &Anchor,
    stride: u32,
) -> Result<(BoxEncoding, usize, usize), LossError> {
    let (row, col) = cell_of(b.bx, b.by, stride);
    invert_box_encoding(b.bx, b.by, b.bw, b.bh, anchor, row, col, stride).map(|e| (e, row, col))
}
