//! Synthetic ground-truth generator: samples poses inside the training
//! ranges, projects the object model, and encodes noise-controlled
//! prediction tensors, giving the decode→refine pipeline a closed loop
//! against exact ground truth.
//!
//! Generation is deterministic: each frame draws from an RNG stream keyed
//! by (seed, frame index), so parallel and serial generation produce
//! byte-identical datasets.

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project, CameraIntrinsics, EulerAngles, GeometryError, ObjectModel, Pose,
};
use crate::losses::{self, LossError, DEFAULT_ALPHA};
use crate::tensor::{
    self, logit, Anchor, DetectionBox, ScaleTensor, TensorError, ANCHORS_BY_SCALE,
    ANCHORS_PER_SCALE, KEYPOINT_CHANNELS, NETWORK_INPUT, NUM_KEYPOINTS, SCALE_STRIDES,
};

/// Logit magnitude used for saturated objectness/class/confidence channels;
/// keeps the sigmoid inverse finite. A fixture artifact, not a model claim.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Rejection-sampling budget before a pose draw is declared infeasible.
pub const MAX_SAMPLE_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no in-frame pose found after {0} rejection attempts; ranges and intrinsics are incompatible")]
    SamplingExhausted(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Encoding(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ── Sampling configuration ──────────────────────────────────────────────────

/// Pose sampling ranges. Angles in radians, depth in meters. Lateral
/// placement aims the object so its projected center stays within the
/// central `center_margin` fraction of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub depth: (f64, f64),
    pub roll: (f64, f64),
    pub pitch: (f64, f64),
    pub yaw: (f64, f64),
    #[serde(default = "default_center_margin")]
    pub center_margin: f64,
}

fn default_center_margin() -> f64 {
    0.8
}

impl Default for PoseRanges {
    /// Training ranges: depth 0.75–3 m, roll ±50°, pitch ±70°, yaw ±90°.
    fn default() -> Self {
        Self {
            depth: (0.75, 3.0),
            roll: (-50f64.to_radians(), 50f64.to_radians()),
            pitch: (-70f64.to_radians(), 70f64.to_radians()),
            yaw: (-90f64.to_radians(), 90f64.to_radians()),
            center_margin: default_center_margin(),
        }
    }
}

/// Noise injected into encoded tensors. Pixel quantities are in
/// network-input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Gaussian σ added to every keypoint vote.
    pub keypoint_noise_sigma: f64,
    /// Fraction of votes replaced by gross outliers, in [0, 1).
    pub outlier_rate: f64,
    /// Half-width of the uniform outlier displacement.
    pub outlier_spread: f64,
    /// Sharpness of the injected confidence labels (cell units).
    pub confidence_alpha: f64,
    /// Gaussian σ applied to the encoded detection box center and size.
    pub box_jitter: f64,
    pub rng_seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            keypoint_noise_sigma: 0.0,
            outlier_rate: 0.0,
            outlier_spread: 200.0,
            confidence_alpha: DEFAULT_ALPHA,
            box_jitter: 0.0,
            rng_seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(SynthError::InvalidNoise(format!(
                "outlier_rate {} outside [0, 1)",
                self.outlier_rate
            )));
        }
        if self.keypoint_noise_sigma < 0.0 || self.box_jitter < 0.0 || self.outlier_spread < 0.0 {
            return Err(SynthError::InvalidNoise(
                "noise magnitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

// ── Pose sampling and ground truth ──────────────────────────────────────────

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws a pose uniformly within the ranges, rejecting draws whose
/// projected corners leave the image (or whose box center leaves the
/// central margin), up to [`MAX_SAMPLE_ATTEMPTS`] times.
pub fn sample_pose(
    ranges: &PoseRanges,
    model: &ObjectModel,
    intr: &CameraIntrinsics,
    rng: &mut ChaCha8Rng,
) -> Result<Pose, SynthError> {
    let (w, h) = (intr.width as f64, intr.height as f64);
    let margin_x = w * (1.0 - ranges.center_margin) / 2.0;
    let margin_y = h * (1.0 - ranges.center_margin) / 2.0;
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let depth = sample_range(rng, ranges.depth);
        let angles = EulerAngles {
            roll: sample_range(rng, ranges.roll),
            pitch: sample_range(rng, ranges.pitch),
            yaw: sample_range(rng, ranges.yaw),
        };
        // Aim the object center at a pixel inside the central margin.
        let u = sample_range(rng, (margin_x, w - margin_x));
        let v = sample_range(rng, (margin_y, h - margin_y));
        let translation = Vector3::new(
            (u - intr.cx) * depth / intr.fx,
            (v - intr.cy) * depth / intr.fy,
            depth,
        );
        let pose = Pose::from_euler(&angles, translation);
        let Ok(gt) = render_groundtruth(&pose, model, intr) else {
            continue;
        };
        let in_frame = gt
            .keypoints
            .iter()
            .all(|p| p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h);
        if in_frame {
            return Ok(pose);
        }
    }
    Err(SynthError::SamplingExhausted(MAX_SAMPLE_ATTEMPTS))
}

/// Exact per-frame ground truth: the pose, the eight projected corners
/// (image pixels), and their axis-aligned hull as `[bx, by, bw, bh]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGroundTruth {
    pub pose: Pose,
    pub keypoints: [Vector2<f64>; 8],
    /// Center-size bounding box, the hull of the keypoints.
    pub bbox: [f64; 4],
}

/// Projects the model corners and forms their bounding hull.
pub fn render_groundtruth(
    pose: &Pose,
    model: &ObjectModel,
    intr: &CameraIntrinsics,
) -> Result<FrameGroundTruth, GeometryError> {
    let mut keypoints = [Vector2::zeros(); 8];
    for (g, corner) in keypoints.iter_mut().zip(&model.corners) {
        *g = project(corner, pose, intr)?;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for g in &keypoints {
        x0 = x0.min(g.x);
        y0 = y0.min(g.y);
        x1 = x1.max(g.x);
        y1 = y1.max(g.y);
    }
    Ok(FrameGroundTruth {
        pose: pose.clone(),
        keypoints,
        bbox: [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0],
    })
}

// ── Tensor encoding ─────────────────────────────────────────────────────────

fn best_anchor(anchors: &[Anchor; ANCHORS_PER_SCALE], bw: f64, bh: f64) -> usize {
    let wh_iou = |a: &Anchor| {
        let inter = a.width.min(bw) * a.height.min(bh);
        inter / (a.width * a.height + bw * bh - inter)
    };
    (0..anchors.len())
        .max_by(|&i, &j| wh_iou(&anchors[i]).total_cmp(&wh_iou(&anchors[j])))
        .unwrap()
}

/// Encodes a frame's ground truth into detection and keypoint tensors,
/// injecting the configured noise. Inverse of the decode path when noise
/// is zero.
///
/// Per scale, the detection tensor carries the (jittered) ground-truth box
/// at its responsible cell and best anchor with saturated objectness and
/// class logits; everything else stays suppressed. The keypoint tensor
/// carries, for every cell inside the box, offsets toward each corner plus
/// noise, with confidence logits set to the sigmoid inverse of
/// `exp(−α‖injected residual‖)` so labels stay consistent with the
/// confidence target.
pub fn encode_tensors(
    gt: &FrameGroundTruth,
    intr: &CameraIntrinsics,
    noise: &NoiseModel,
    frame_index: u64,
) -> Result<(Vec<ScaleTensor>, Vec<ScaleTensor>), SynthError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    rng.set_stream(frame_index);
    let gaussian = Normal::new(0.0, 1.0).expect("unit normal");

    // Ground truth into the square network frame.
    let sx = NETWORK_INPUT as f64 / intr.width as f64;
    let sy = NETWORK_INPUT as f64 / intr.height as f64;
    let net_box = [
        gt.bbox[0] * sx,
        gt.bbox[1] * sy,
        gt.bbox[2] * sx,
        gt.bbox[3] * sy,
    ];
    let net_keypoints: Vec<Vector2<f64>> = gt
        .keypoints
        .iter()
        .map(|g| Vector2::new(g.x * sx, g.y * sy))
        .collect();

    let mut det_tensors = Vec::with_capacity(SCALE_STRIDES.len());
    let mut kp_tensors = Vec::with_capacity(SCALE_STRIDES.len());
    for (scale, &stride) in SCALE_STRIDES.iter().enumerate() {
        let anchors = &ANCHORS_BY_SCALE[scale];
        let s = stride as f64;
        let grid = (NETWORK_INPUT / stride) as usize;

        let mut jittered = net_box;
        if noise.box_jitter > 0.0 {
            for v in jittered.iter_mut() {
                *v += noise.box_jitter * gaussian.sample(&mut rng);
            }
            jittered[2] = jittered[2].max(2.0);
            jittered[3] = jittered[3].max(2.0);
        }
        let encoded_box = DetectionBox {
            bx: jittered[0],
            by: jittered[1],
            bw: jittered[2],
            bh: jittered[3],
            objectness: 1.0,
            class_scores: vec![1.0],
        };

        let mut det = ScaleTensor::for_stride(stride, ANCHORS_PER_SCALE * 6)?;
        let per_anchor = 6;
        for row in 0..grid {
            for col in 0..grid {
                for a in 0..ANCHORS_PER_SCALE {
                    det.set(row, col, a * per_anchor + 4, -LOGIT_CLAMP);
                }
            }
        }
        let anchor_idx = best_anchor(anchors, encoded_box.bw, encoded_box.bh);
        let (enc, row, col) = losses::encode_box(&encoded_box, &anchors[anchor_idx], stride)?;
        let base = anchor_idx * per_anchor;
        det.set(row, col, base, enc.x);
        det.set(row, col, base + 1, enc.y);
        det.set(row, col, base + 2, enc.w);
        det.set(row, col, base + 3, enc.h);
        det.set(row, col, base + 4, LOGIT_CLAMP);
        det.set(row, col, base + 5, LOGIT_CLAMP);
        det_tensors.push(det);

        let mut kp = ScaleTensor::for_stride(stride, KEYPOINT_CHANNELS)?;
        for row in 0..grid {
            for col in 0..grid {
                let center_x = (col as f64 + 0.5) * s;
                let center_y = (row as f64 + 0.5) * s;
                let in_box = encoded_box.contains(center_x, center_y);
                for k in 0..NUM_KEYPOINTS {
                    let base = k * 3;
                    if !in_box {
                        kp.set(row, col, base + 2, -LOGIT_CLAMP);
                        continue;
                    }
                    let mut target = net_keypoints[k];
                    if noise.outlier_rate > 0.0 && rng.random_bool(noise.outlier_rate) {
                        target.x += rng.random_range(-noise.outlier_spread..noise.outlier_spread);
                        target.y += rng.random_range(-noise.outlier_spread..noise.outlier_spread);
                    } else if noise.keypoint_noise_sigma > 0.0 {
                        target.x += noise.keypoint_noise_sigma * gaussian.sample(&mut rng);
                        target.y += noise.keypoint_noise_sigma * gaussian.sample(&mut rng);
                    }
                    kp.set(row, col, base, target.x / s - col as f64);
                    kp.set(row, col, base + 1, target.y / s - row as f64);
                    // Residual in cell units; the label matches the
                    // confidence target for exactly this injected error.
                    let residual = (target - net_keypoints[k]) / s;
                    let conf = (-noise.confidence_alpha * residual.norm()).exp();
                    let logit_value = if conf >= 1.0 {
                        LOGIT_CLAMP
                    } else {
                        logit(conf).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
                    };
                    kp.set(row, col, base + 2, logit_value);
                }
            }
        }
        kp_tensors.push(kp);
    }
    Ok((det_tensors, kp_tensors))
}

// ── Dataset layout ──────────────────────────────────────────────────────────

/// Everything needed to (re)generate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: u64,
    pub seed: u64,
    pub ranges: PoseRanges,
    pub noise: NoiseModel,
    pub intrinsics: CameraIntrinsics,
    pub model: ObjectModel,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 0,
            seed: 0,
            ranges: PoseRanges::default(),
            noise: NoiseModel::default(),
            intrinsics: default_intrinsics(),
            model: ObjectModel::default_vehicle(),
        }
    }
}

/// Square 416-px camera used when no intrinsics file is given.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(400.0, 400.0, 208.0, 208.0, NETWORK_INPUT, NETWORK_INPUT)
        .expect("static intrinsics are valid")
}

/// `manifest.json` document at the dataset root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub config: DatasetConfig,
    /// The effective run configuration that produced the dataset, echoed
    /// verbatim for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<serde_json::Value>,
}

/// Per-frame ground-truth record stored under `gt/NNNNNN.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub frame: u64,
    pub pose: Pose,
    pub keypoints: [[f64; 2]; 8],
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl GtRecord {
    pub fn from_ground_truth(frame: u64, gt: &FrameGroundTruth) -> Self {
        let mut keypoints = [[0.0; 2]; 8];
        for (out, g) in keypoints.iter_mut().zip(&gt.keypoints) {
            *out = [g.x, g.y];
        }
        Self {
            frame,
            pose: gt.pose.clone(),
            keypoints,
            bbox: gt.bbox,
        }
    }
}

fn frame_name(index: u64) -> String {
    format!("{index:06}")
}

/// Generates one frame: a pose draw plus encoded tensors. Frame `index`
/// owns RNG stream `index` of both the pose seed and the noise seed.
pub fn generate_frame(
    config: &DatasetConfig,
    index: u64,
) -> Result<(FrameGroundTruth, Vec<ScaleTensor>, Vec<ScaleTensor>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let pose = sample_pose(&config.ranges, &config.model, &config.intrinsics, &mut rng)?;
    let gt = render_groundtruth(&pose, &config.model, &config.intrinsics)?;
    let (det, kp) = encode_tensors(&gt, &config.intrinsics, &config.noise, index)?;
    Ok((gt, det, kp))
}

/// Writes a dataset directory: `manifest.json`, `frames/NNNNNN.durl`,
/// `gt/NNNNNN.json`.
pub fn generate_dataset(
    dir: &Path,
    config: &DatasetConfig,
    config_echo: Option<serde_json::Value>,
) -> Result<(), SynthError> {
    config.noise.validate()?;
    config.intrinsics.validate()?;
    config.model.validate()?;
    let frames_dir = dir.join("frames");
    let gt_dir = dir.join("gt");
    std::fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    std::fs::create_dir_all(&gt_dir).map_err(io_err(&gt_dir))?;

    for index in 0..config.count {
        let (gt, det, kp) = generate_frame(config, index)?;
        let mut scales = det;
        scales.extend(kp);
        let frame_path = frames_dir.join(format!("{}.durl", frame_name(index)));
        tensor::write_tensors_file(&frame_path, &scales)?;
        let record = GtRecord::from_ground_truth(index, &gt);
        let gt_path = gt_dir.join(format!("{}.json", frame_name(index)));
        let text = serde_json::to_string(&record).map_err(|source| SynthError::Json {
            path: gt_path.clone(),
            source,
        })?;
        std::fs::write(&gt_path, text).map_err(io_err(&gt_path))?;
    }

    let manifest = Manifest {
        config: config.clone(),
        config_echo,
    };
    let manifest_path = dir.join("manifest.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|source| SynthError::Json {
            path: manifest_path.clone(),
            source,
        })?;
    std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(())
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    dir: PathBuf,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, SynthError> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| SynthError::Json {
                path: manifest_path,
                source,
            })?;
        Ok(Self {
            manifest,
            dir: dir.to_path_buf(),
        })
    }

    pub fn len(&self) -> u64 {
        self.manifest.config.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads and splits a frame's tensors into (detection, keypoint) scales.
    pub fn frame_tensors(
        &self,
        index: u64,
    ) -> Result<(Vec<ScaleTensor>, Vec<ScaleTensor>), SynthError> {
        let path = self.dir.join("frames").join(format!("{}.durl", frame_name(index)));
        let scales = tensor::read_tensors_file(&path)?;
        Ok(tensor::split_frame_tensors(scales))
    }

    pub fn frame_gt(&self, index: u64) -> Result<GtRecord, SynthError> {
        let path = self.dir.join("gt").join(format!("{}.json", frame_name(index)));
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| SynthError::Json { path, source })
    }
}
