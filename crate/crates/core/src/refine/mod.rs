//! Pose refinement pipeline: keypoint-candidate filtering, correspondence
//! assembly, and RANSAC-based EPnP with optional Gauss–Newton polishing.
//!
//! The stages mirror the inference procedure: decode boxes → NMS → best
//! box; decode keypoints → drop votes from cells outside the box → drop
//! votes far from the per-keypoint cluster median → drop low-confidence
//! votes → keep the 12 most confident votes per keypoint → solve
//! RANSAC-PnP on the up-to-96 2D-to-3D correspondences.
//!
//! Every stage re-sorts its output into the canonical (scale, row, col,
//! keypoint) order, so results never depend on input permutation, and all
//! randomness is confined to the explicitly seeded RANSAC generator.

mod epnp;
mod polish;

pub use polish::MAX_POLISH_ITERATIONS;

use nalgebra::{Point3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, ObjectModel, Pose};
use crate::tensor::{
    self, DetectionBox, KeypointCandidate, ScaleTensor, TensorError, DEFAULT_NMS_IOU,
    DEFAULT_SCORE_THRESHOLD, NETWORK_INPUT, NUM_KEYPOINTS,
};

/// Cluster pruning threshold as a fraction of image width.
pub const CLUSTER_DISTANCE_FACTOR: f64 = 0.3;

/// Keypoint votes below this confidence are discarded.
pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

/// Votes kept per keypoint after confidence ranking.
pub const TOP_K_PER_KEYPOINT: usize = 12;

/// Minimum 2D-to-3D correspondences for a PnP attempt.
pub const MIN_CORRESPONDENCES: usize = 6;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("pose estimation needs at least {min} correspondences, got {got}")]
    InsufficientCorrespondences { got: usize, min: usize },
    #[error("no consensus: best inlier count {best} below the required {min}")]
    NoConsensus { best: usize, min: usize },
    #[error("pose solver produced a non-finite estimate")]
    SolverDivergence,
    #[error("no detection box survived non-maximum suppression")]
    NoDetection,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl RefineError {
    /// Status string used in pose record output.
    pub fn status(&self) -> &'static str {
        match self {
            RefineError::InsufficientCorrespondences { .. } => "insufficient",
            RefineError::NoConsensus { .. } => "no_consensus",
            RefineError::SolverDivergence => "solver_divergence",
            RefineError::NoDetection => "no_detection",
            RefineError::Tensor(_) => "bad_tensor",
        }
    }
}

/// A 3D model corner paired with one 2D vote for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub model_point: Point3<f64>,
    pub pixel: Vector2<f64>,
    pub confidence: f64,
}

/// RANSAC configuration. The inlier threshold is in the pixel units of the
/// correspondences handed to [`estimate_pose`]; the default means
/// network-input pixels and is rescaled by [`infer_pose`] together with
/// the keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
    /// Gauss–Newton polish after the consensus refit. On by default; turn
    /// off for the bare RANSAC-PnP estimate.
    #[serde(default = "default_polish")]
    pub polish: bool,
}

fn default_polish() -> bool {
    true
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            inlier_threshold: 8.0,
            min_inliers: MIN_CORRESPONDENCES,
            rng_seed: 0,
            polish: true,
        }
    }
}

/// A pose with its consensus statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inlier_count: usize,
    /// Mean reprojection error over the inliers, in correspondence pixels.
    pub mean_reprojection_error: f64,
    pub correspondences_used: usize,
}

// ── Candidate filter stages ─────────────────────────────────────────────────

fn canonical_sort(cands: &mut [KeypointCandidate]) {
    cands.sort_by(|a, b| a.canonical_cmp(b));
}

/// Keeps candidates whose source cell center lies inside the box.
pub fn filter_in_box(
    cands: &[KeypointCandidate],
    detection: &DetectionBox,
) -> Vec<KeypointCandidate> {
    let mut kept: Vec<KeypointCandidate> = cands
        .iter()
        .filter(|c| {
            let (x, y) = c.cell_center();
            detection.contains(x, y)
        })
        .cloned()
        .collect();
    canonical_sort(&mut kept);
    kept
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Drops candidates farther than `factor·image_width` from the
/// coordinate-wise median of their keypoint's votes.
pub fn prune_clusters(
    cands: &[KeypointCandidate],
    image_width: f64,
    factor: f64,
) -> Vec<KeypointCandidate> {
    let threshold = factor * image_width;
    let mut medians = [(0.0f64, 0.0f64); NUM_KEYPOINTS];
    for k in 0..NUM_KEYPOINTS {
        let mut xs: Vec<f64> = cands
            .iter()
            .filter(|c| c.keypoint == k)
            .map(|c| c.pixel_x)
            .collect();
        if xs.is_empty() {
            continue;
        }
        let mut ys: Vec<f64> = cands
            .iter()
            .filter(|c| c.keypoint == k)
            .map(|c| c.pixel_y)
            .collect();
        medians[k] = (median(&mut xs), median(&mut ys));
    }
    let mut kept: Vec<KeypointCandidate> = cands
        .iter()
        .filter(|c| {
            let (mx, my) = medians[c.keypoint];
            let d = ((c.pixel_x - mx).powi(2) + (c.pixel_y - my).powi(2)).sqrt();
            d <= threshold
        })
        .cloned()
        .collect();
    canonical_sort(&mut kept);
    kept
}

/// Keeps candidates at or above the confidence threshold.
pub fn filter_confidence(
    cands: &[KeypointCandidate],
    threshold: f64,
) -> Vec<KeypointCandidate> {
    let mut kept: Vec<KeypointCandidate> = cands
        .iter()
        .filter(|c| c.confidence >= threshold)
        .cloned()
        .collect();
    canonical_sort(&mut kept);
    kept
}

/// Keeps the `k` most confident candidates per keypoint, ties broken by
/// (confidence, pixel x, pixel y) descending.
pub fn select_top_k(cands: &[KeypointCandidate], k: usize) -> Vec<KeypointCandidate> {
    let mut kept = Vec::new();
    for key in 0..NUM_KEYPOINTS {
        let mut group: Vec<KeypointCandidate> = cands
            .iter()
            .filter(|c| c.keypoint == key)
            .cloned()
            .collect();
        group.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(b.pixel_x.total_cmp(&a.pixel_x))
                .then(b.pixel_y.total_cmp(&a.pixel_y))
                .then(a.canonical_cmp(b))
        });
        group.truncate(k);
        kept.extend(group);
    }
    canonical_sort(&mut kept);
    kept
}

// ── RANSAC-PnP ──────────────────────────────────────────────────────────────

fn reprojection_error(
    pose: &Pose,
    corr: &Correspondence,
    intr: &CameraIntrinsics,
) -> f64 {
    match project(&corr.model_point, pose, intr) {
        Ok(projected) => (projected - corr.pixel).norm(),
        Err(_) => f64::INFINITY,
    }
}

struct Consensus {
    inliers: Vec<usize>,
    mean_error: f64,
}

fn measure_consensus(
    pose: &Pose,
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    threshold: f64,
) -> Consensus {
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, corr) in corrs.iter().enumerate() {
        let err = reprojection_error(pose, corr, intr);
        if err <= threshold {
            inliers.push(i);
            total += err;
        }
    }
    let mean_error = if inliers.is_empty() {
        f64::INFINITY
    } else {
        total / inliers.len() as f64
    };
    Consensus { inliers, mean_error }
}

fn solve_for_indices(
    corrs: &[Correspondence],
    indices: &[usize],
    intr: &CameraIntrinsics,
    hypothesis: bool,
) -> Option<Pose> {
    let world: Vec<Point3<f64>> = indices.iter().map(|&i| corrs[i].model_point).collect();
    let normalized: Vec<Vector2<f64>> = indices
        .iter()
        .map(|&i| intr.normalized_from_pixel(&corrs[i].pixel))
        .collect();
    if hypothesis {
        epnp::solve_pnp_hypothesis(&world, &normalized).ok()
    } else {
        epnp::solve_pnp(&world, &normalized).ok()
    }
}

/// Estimates a pose from 2D-to-3D correspondences by RANSAC over EPnP
/// minimal instances, refitting the best consensus on all of its inliers
/// and optionally polishing by Gauss–Newton.
///
/// Deterministic for a fixed `rng_seed`: identical inputs give bit-identical
/// results.
pub fn estimate_pose(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<PoseEstimate, RefineError> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(RefineError::InsufficientCorrespondences {
            got: corrs.len(),
            min: MIN_CORRESPONDENCES,
        });
    }

    // Group correspondences by distinct model point (first-seen order) so a
    // minimal sample never draws the same 3D point twice.
    let mut groups: Vec<(Point3<f64>, Vec<usize>)> = Vec::new();
    for (i, corr) in corrs.iter().enumerate() {
        match groups.iter_mut().find(|(p, _)| *p == corr.model_point) {
            Some((_, idxs)) => idxs.push(i),
            None => groups.push((corr.model_point, vec![i])),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut best: Option<(Consensus, Pose)> = None;
    for _ in 0..params.max_iterations {
        let sample: Vec<usize> = if groups.len() >= 4 {
            rand::seq::index::sample(&mut rng, groups.len(), 4)
                .iter()
                .map(|g| {
                    let idxs = &groups[g].1;
                    idxs[rand::Rng::random_range(&mut rng, 0..idxs.len())]
                })
                .collect()
        } else {
            rand::seq::index::sample(&mut rng, corrs.len(), 4).into_vec()
        };
        let Some(pose) = solve_for_indices(corrs, &sample, intr, true) else {
            continue;
        };
        let consensus = measure_consensus(&pose, corrs, intr, params.inlier_threshold);
        let better = match &best {
            None => true,
            Some((current, _)) => {
                consensus.inliers.len() > current.inliers.len()
                    || (consensus.inliers.len() == current.inliers.len()
                        && consensus.mean_error < current.mean_error)
            }
        };
        if better {
            best = Some((consensus, pose));
        }
    }

    let (raw_consensus, raw_pose) = match best {
        Some(b) => b,
        None => {
            return Err(RefineError::NoConsensus {
                best: 0,
                min: params.min_inliers,
            })
        }
    };
    if raw_consensus.inliers.len() < params.min_inliers {
        return Err(RefineError::NoConsensus {
            best: raw_consensus.inliers.len(),
            min: params.min_inliers,
        });
    }

    // Refit the winning consensus on all of its inliers. A raw sample pose
    // can win the count while being skewed enough to also swallow a stray
    // outlier; the least-squares refit is dominated by the true inliers and
    // pulls the estimate back.
    let mut pose = raw_pose;
    let mut consensus = raw_consensus;
    if let Some(refit) = solve_for_indices(corrs, &consensus.inliers, intr, false) {
        let recount = measure_consensus(&refit, corrs, intr, params.inlier_threshold);
        if recount.inliers.len() >= 4 {
            pose = refit;
            consensus = recount;
        }
    }
    if params.polish {
        // Polish on a median-scaled subset of the inliers: an outlier that
        // happens to fall just inside the threshold would otherwise bias
        // the least squares by several millimeters. Inlier stats are still
        // reported against the configured threshold afterwards.
        let residuals: Vec<(usize, f64)> = consensus
            .inliers
            .iter()
            .map(|&i| (i, reprojection_error(&pose, &corrs[i], intr)))
            .collect();
        let mut sorted: Vec<f64> = residuals.iter().map(|r| r.1).collect();
        sorted.sort_by(f64::total_cmp);
        let trim = (3.0 * sorted[sorted.len() / 2])
            .max(1e-9)
            .min(params.inlier_threshold);
        let subset: Vec<usize> = residuals
            .iter()
            .filter(|(_, e)| *e <= trim)
            .map(|(i, _)| *i)
            .collect();
        let polish_set = if subset.len() >= 4 {
            &subset
        } else {
            &consensus.inliers
        };
        let points: Vec<(Point3<f64>, Vector2<f64>)> = polish_set
            .iter()
            .map(|&i| (corrs[i].model_point, corrs[i].pixel))
            .collect();
        let polished = polish::gauss_newton_refine(&pose, &points, intr, MAX_POLISH_ITERATIONS);
        if polished.is_valid() {
            consensus = measure_consensus(&polished, corrs, intr, params.inlier_threshold);
            pose = polished;
        }
    }

    if !pose.is_valid() {
        return Err(RefineError::SolverDivergence);
    }
    Ok(PoseEstimate {
        pose,
        inlier_count: consensus.inliers.len(),
        mean_reprojection_error: consensus.mean_error,
        correspondences_used: corrs.len(),
    })
}

// ── Full pipeline ───────────────────────────────────────────────────────────

/// Runs the full inference pipeline on one frame's tensors.
///
/// Keypoint votes are decoded in the 416-px network frame; before PnP they
/// are rescaled to the true image frame given by the intrinsics, and the
/// inlier threshold (specified in network pixels) is rescaled with them.
pub fn infer_pose(
    det_tensors: &[ScaleTensor],
    kp_tensors: &[ScaleTensor],
    intr: &CameraIntrinsics,
    model: &ObjectModel,
    params: &RansacParams,
) -> Result<PoseEstimate, RefineError> {
    let mut boxes = Vec::new();
    for t in det_tensors {
        let anchors = tensor::anchors_for_stride(t.stride()).ok_or_else(|| {
            TensorError::BadGridSize(t.grid_size())
        })?;
        boxes.extend(tensor::decode_boxes(t, anchors, DEFAULT_SCORE_THRESHOLD)?);
    }
    let kept = tensor::nms(&boxes, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD);
    let best_box = kept.first().ok_or(RefineError::NoDetection)?;

    let mut cands = Vec::new();
    for t in kp_tensors {
        cands.extend(tensor::decode_keypoints(t)?);
    }
    canonical_sort(&mut cands);
    let cands = filter_in_box(&cands, best_box);
    let cands = prune_clusters(&cands, NETWORK_INPUT as f64, CLUSTER_DISTANCE_FACTOR);
    let cands = filter_confidence(&cands, CONFIDENCE_THRESHOLD);
    let cands = select_top_k(&cands, TOP_K_PER_KEYPOINT);

    let sx = intr.width as f64 / NETWORK_INPUT as f64;
    let sy = intr.height as f64 / NETWORK_INPUT as f64;
    let corrs: Vec<Correspondence> = cands
        .iter()
        .map(|c| Correspondence {
            model_point: model.corners[c.keypoint],
            pixel: Vector2::new(c.pixel_x * sx, c.pixel_y * sy),
            confidence: c.confidence,
        })
        .collect();
    let mut scaled = *params;
    scaled.inlier_threshold *= (sx + sy) / 2.0;
    estimate_pose(&corrs, intr, &scaled)
}

// ── Pose record output ──────────────────────────────────────────────────────

/// One NDJSON pose record: `{"frame", "status", ...}` with rotation as a
/// row-major 3×3 array and translation in meters on success, and only the
/// failure status otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inliers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproj_px: Option<f64>,
}

impl PoseRecord {
    pub fn from_result(frame: u64, result: &Result<PoseEstimate, RefineError>) -> Self {
        match result {
            Ok(estimate) => {
                let r = &estimate.pose.rotation;
                Self {
                    frame,
                    status: "ok".into(),
                    rotation: Some([
                        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                    ]),
                    translation: Some([
                        estimate.pose.translation.x,
                        estimate.pose.translation.y,
                        estimate.pose.translation.z,
                    ]),
                    inliers: Some(estimate.inlier_count),
                    reproj_px: Some(estimate.mean_reprojection_error),
                }
            }
            Err(err) => Self {
                frame,
                status: err.status().into(),
                rotation: None,
                translation: None,
                inliers: None,
                reproj_px: None,
            },
        }
    }

    /// Reassembles the pose of an "ok" record.
    pub fn pose(&self) -> Option<Pose> {
        let r = self.rotation?;
        let t = self.translation?;
        Pose::new(
            nalgebra::Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            nalgebra::Vector3::from(t),
        )
        .ok()
    }
}
