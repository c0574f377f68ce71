//! Decoding of raw multi-scale network output tensors into detection boxes
//! and per-cell keypoint candidates, plus IOU / non-maximum suppression and
//! the tensor interchange formats.
//!
//! A frame consists of two tensor streams at three spatial scales each
//! (strides 32/16/8 over a 416-px input, so 13/26/52 cells per side):
//!
//! - detection tensors with `3 anchors × (4 coords + objectness + classes)`
//!   channels per cell,
//! - keypoint tensors with `8 keypoints × (x offset, y offset, confidence
//!   logit)` = 24 channels per cell.
//!
//! Box coordinates decode as `center = (σ(p) + cell)·stride` and
//! `size = anchor·e^p`; keypoint offsets are raw (unbounded) cell-unit
//! offsets so a cell can vote for a corner projected outside itself.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the (square) network input, in pixels.
pub const NETWORK_INPUT: u32 = 416;

/// Strides of the three prediction scales, coarsest first.
pub const SCALE_STRIDES: [u32; 3] = [32, 16, 8];

/// Anchors per scale.
pub const ANCHORS_PER_SCALE: usize = 3;

/// Keypoints regressed per cell.
pub const NUM_KEYPOINTS: usize = 8;

/// Channels of a keypoint tensor: 8 keypoints × (dx, dy, confidence logit).
pub const KEYPOINT_CHANNELS: usize = NUM_KEYPOINTS * 3;

/// Class-specific score threshold applied before and during suppression.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;

/// IOU above which a lower-scoring box is suppressed.
pub const DEFAULT_NMS_IOU: f64 = 0.4;

/// Prior box size in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    pub const fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }
}

/// The nine k-means anchors, split largest-to-coarsest across the three
/// scales in [`SCALE_STRIDES`] order.
pub const ANCHORS_BY_SCALE: [[Anchor; ANCHORS_PER_SCALE]; 3] = [
    [
        Anchor::new(116.0, 90.0),
        Anchor::new(156.0, 198.0),
        Anchor::new(373.0, 326.0),
    ],
    [
        Anchor::new(30.0, 61.0),
        Anchor::new(62.0, 45.0),
        Anchor::new(59.0, 119.0),
    ],
    [
        Anchor::new(10.0, 13.0),
        Anchor::new(16.0, 30.0),
        Anchor::new(33.0, 23.0),
    ],
];

/// Anchors assigned to the scale with the given stride.
pub fn anchors_for_stride(stride: u32) -> Option<&'static [Anchor; ANCHORS_PER_SCALE]> {
    SCALE_STRIDES
        .iter()
        .position(|&s| s == stride)
        .map(|i| &ANCHORS_BY_SCALE[i])
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor has {found} channels, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("grid size {0} does not divide the {NETWORK_INPUT}-px network input")]
    BadGridSize(usize),
    #[error("bad tensor file magic {0:?}, expected \"DURL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    BadVersion(u16),
    #[error("tensor file truncated or malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("tensor JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// ── Tensors ─────────────────────────────────────────────────────────────────

/// One S×S×D grid of raw network outputs, cell-major and channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTensor {
    grid_size: usize,
    stride: u32,
    channels: usize,
    values: Vec<f64>,
}

impl ScaleTensor {
    /// Zero-filled tensor with `grid_size` cells per side; the stride is
    /// derived from the 416-px input resolution.
    pub fn new(grid_size: usize, channels: usize) -> Result<Self, TensorError> {
        if grid_size == 0 || NETWORK_INPUT as usize % grid_size != 0 {
            return Err(TensorError::BadGridSize(grid_size));
        }
        Ok(Self {
            grid_size,
            stride: NETWORK_INPUT / grid_size as u32,
            channels,
            values: vec![0.0; grid_size * grid_size * channels],
        })
    }

    /// Zero-filled tensor for the scale with the given stride.
    pub fn for_stride(stride: u32, channels: usize) -> Result<Self, TensorError> {
        if stride == 0 || NETWORK_INPUT % stride != 0 {
            return Err(TensorError::BadGridSize(0));
        }
        Self::new((NETWORK_INPUT / stride) as usize, channels)
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        debug_assert!(row < self.grid_size && col < self.grid_size && channel < self.channels);
        (row * self.grid_size + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.values[i] = value;
    }

    /// True when the channel count matches the keypoint-stream layout.
    pub fn is_keypoint_tensor(&self) -> bool {
        self.channels == KEYPOINT_CHANNELS
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse sigmoid; `p` must lie strictly in (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

// ── Detection boxes ─────────────────────────────────────────────────────────

/// A decoded detection in input-image pixels (center + size).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBox {
    pub bx: f64,
    pub by: f64,
    pub bw: f64,
    pub bh: f64,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
}

impl DetectionBox {
    /// Class-specific confidence: objectness times the best class score.
    pub fn score(&self) -> f64 {
        let best = self
            .class_scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        self.objectness * best
    }

    pub fn min_xy(&self) -> (f64, f64) {
        (self.bx - self.bw / 2.0, self.by - self.bh / 2.0)
    }

    pub fn max_xy(&self) -> (f64, f64) {
        (self.bx + self.bw / 2.0, self.by + self.bh / 2.0)
    }

    /// Point-in-box test, inclusive at the edges.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0) = self.min_xy();
        let (x1, y1) = self.max_xy();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

/// Decodes a detection tensor against its anchor set.
///
/// Boxes whose class-specific score falls below `score_threshold` are
/// dropped. Cells are visited in (row, col, anchor) order.
pub fn decode_boxes(
    tensor: &ScaleTensor,
    anchors: &[Anchor],
    score_threshold: f64,
) -> Result<Vec<DetectionBox>, TensorError> {
    let per_anchor = tensor.channels() / anchors.len().max(1);
    if anchors.is_empty()
        || tensor.channels() % anchors.len() != 0
        || per_anchor < 6
    {
        return Err(TensorError::ShapeMismatch {
            expected: anchors.len() * 6,
            found: tensor.channels(),
        });
    }
    let num_classes = per_anchor - 5;
    let stride = tensor.stride() as f64;
    let mut out = Vec::new();
    for row in 0..tensor.grid_size() {
        for col in 0..tensor.grid_size() {
            for (a, anchor) in anchors.iter().enumerate() {
                let base = a * per_anchor;
                let objectness = sigmoid(tensor.get(row, col, base + 4));
                // Class scores cannot lift the product above objectness.
                if objectness < score_threshold {
                    continue;
                }
                let class_scores: Vec<f64> = (0..num_classes)
                    .map(|c| sigmoid(tensor.get(row, col, base + 5 + c)))
                    .collect();
                let best_class = class_scores
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                if objectness * best_class < score_threshold {
                    continue;
                }
                out.push(DetectionBox {
                    bx: (sigmoid(tensor.get(row, col, base)) + col as f64) * stride,
                    by: (sigmoid(tensor.get(row, col, base + 1)) + row as f64) * stride,
                    bw: anchor.width * tensor.get(row, col, base + 2).exp(),
                    bh: anchor.height * tensor.get(row, col, base + 3).exp(),
                    objectness,
                    class_scores,
                });
            }
        }
    }
    Ok(out)
}

/// Intersection-over-union of two center-size boxes; 0 when disjoint.
pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let (ax0, ay0) = a.min_xy();
    let (ax1, ay1) = a.max_xy();
    let (bx0, by0) = b.min_xy();
    let (bx1, by1) = b.max_xy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.bw * a.bh + b.bw * b.bh - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn nms_order(a: &DetectionBox, b: &DetectionBox) -> std::cmp::Ordering {
    // Descending (score, bx, by), extended with the remaining fields so the
    // order is total and output never depends on input permutation.
    b.score()
        .total_cmp(&a.score())
        .then(b.bx.total_cmp(&a.bx))
        .then(b.by.total_cmp(&a.by))
        .then(b.bw.total_cmp(&a.bw))
        .then(b.bh.total_cmp(&a.bh))
        .then(b.objectness.total_cmp(&a.objectness))
}

/// Greedy non-maximum suppression in descending class-specific score order.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64, score_threshold: f64) -> Vec<DetectionBox> {
    let mut sorted: Vec<&DetectionBox> = boxes
        .iter()
        .filter(|b| b.score() >= score_threshold)
        .collect();
    sorted.sort_by(|a, b| nms_order(a, b));
    let mut kept: Vec<DetectionBox> = Vec::new();
    for candidate in sorted {
        if kept.iter().all(|k| iou(k, candidate) <= iou_threshold) {
            kept.push(candidate.clone());
        }
    }
    kept
}

// ── Keypoint candidates ─────────────────────────────────────────────────────

/// One cell's vote for one model corner.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointCandidate {
    /// Which of the 8 model corners this vote targets.
    pub keypoint: usize,
    pub row: usize,
    pub col: usize,
    /// Stride of the source scale; identifies the scale (32/16/8).
    pub stride: u32,
    /// Predicted corner location in input-image pixels.
    pub pixel_x: f64,
    pub pixel_y: f64,
    /// Sigmoid confidence, strictly inside (0, 1) for finite logits.
    pub confidence: f64,
}

impl KeypointCandidate {
    /// Center of the source cell in input-image pixels.
    pub fn cell_center(&self) -> (f64, f64) {
        let s = self.stride as f64;
        ((self.col as f64 + 0.5) * s, (self.row as f64 + 0.5) * s)
    }

    /// Canonical ordering key: (scale coarsest-first, row, col, keypoint),
    /// extended with the value fields for totality.
    pub fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .stride
            .cmp(&self.stride)
            .then(self.row.cmp(&other.row))
            .then(self.col.cmp(&other.col))
            .then(self.keypoint.cmp(&other.keypoint))
            .then(self.pixel_x.total_cmp(&other.pixel_x))
            .then(self.pixel_y.total_cmp(&other.pixel_y))
            .then(self.confidence.total_cmp(&other.confidence))
    }
}

/// Decodes a keypoint tensor into one candidate per (cell, keypoint).
///
/// `pixel = (cell + offset)·stride` with the raw offset in cell units;
/// confidence is the sigmoid of the stored logit. Candidates are emitted in
/// (row, col, keypoint) order.
pub fn decode_keypoints(tensor: &ScaleTensor) -> Result<Vec<KeypointCandidate>, TensorError> {
    if tensor.channels() != KEYPOINT_CHANNELS {
        return Err(TensorError::ShapeMismatch {
            expected: KEYPOINT_CHANNELS,
            found: tensor.channels(),
        });
    }
    let stride = tensor.stride() as f64;
    let mut out = Vec::with_capacity(tensor.grid_size() * tensor.grid_size() * NUM_KEYPOINTS);
    for row in 0..tensor.grid_size() {
        for col in 0..tensor.grid_size() {
            for k in 0..NUM_KEYPOINTS {
                let base = k * 3;
                out.push(KeypointCandidate {
                    keypoint: k,
                    row,
                    col,
                    stride: tensor.stride(),
                    pixel_x: (col as f64 + tensor.get(row, col, base)) * stride,
                    pixel_y: (row as f64 + tensor.get(row, col, base + 1)) * stride,
                    confidence: sigmoid(tensor.get(row, col, base + 2)),
                });
            }
        }
    }
    Ok(out)
}

// ── Tensor interchange formats ──────────────────────────────────────────────

const MAGIC: [u8; 4] = *b"DURL";
const FORMAT_VERSION: u16 = 1;

/// Writes scale tensors in the binary interchange format:
/// magic `"DURL"`, u16 version, u8 scale count, then per scale
/// `{u16 S, u16 D, S·S·D little-endian f32 values}` (cell-major,
/// channel-last). All integers little-endian.
///
/// A frame file carries the detection scales (coarsest first) followed by
/// the keypoint scales; readers tell the streams apart by channel count.
/// Values are quantized to f32 by this format.
pub fn write_tensors<W: Write>(mut w: W, scales: &[ScaleTensor]) -> Result<(), TensorError> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[u8::try_from(scales.len()).map_err(|_| {
        TensorError::Malformed(format!("too many scales: {}", scales.len()))
    })?])?;
    for t in scales {
        w.write_all(&(t.grid_size() as u16).to_le_bytes())?;
        w.write_all(&(t.channels() as u16).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.values().len() * 4);
        for &v in t.values() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads tensors written by [`write_tensors`], validating the header first.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<ScaleTensor>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf)?;
    let version = u16::from_le_bytes(u16buf);
    if version != FORMAT_VERSION {
        return Err(TensorError::BadVersion(version));
    }
    let mut count = [0u8; 1];
    r.read_exact(&mut count)?;
    let mut scales = Vec::with_capacity(count[0] as usize);
    for _ in 0..count[0] {
        r.read_exact(&mut u16buf)?;
        let s = u16::from_le_bytes(u16buf) as usize;
        r.read_exact(&mut u16buf)?;
        let d = u16::from_le_bytes(u16buf) as usize;
        let mut tensor = ScaleTensor::new(s, d)?;
        let mut buf = vec![0u8; s * s * d * 4];
        r.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            tensor.values[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        scales.push(tensor);
    }
    Ok(scales)
}

pub fn write_tensors_file(path: &Path, scales: &[ScaleTensor]) -> Result<(), TensorError> {
    let file = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(file), scales)
}

pub fn read_tensors_file(path: &Path) -> Result<Vec<ScaleTensor>, TensorError> {
    let file = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(file))
}

#[derive(Serialize, Deserialize)]
struct JsonScale {
    s: usize,
    d: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonTensors {
    magic: String,
    version: u16,
    scales: Vec<JsonScale>,
}

/// JSON mirror of the binary format, for small human-editable fixtures.
pub fn write_tensors_json(path: &Path, scales: &[ScaleTensor]) -> Result<(), TensorError> {
    let doc = JsonTensors {
        magic: "DURL".into(),
        version: FORMAT_VERSION,
        scales: scales
            .iter()
            .map(|t| JsonScale {
                s: t.grid_size(),
                d: t.channels(),
                values: t.values().to_vec(),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn read_tensors_json(path: &Path) -> Result<Vec<ScaleTensor>, TensorError> {
    let doc: JsonTensors = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.magic != "DURL" {
        let mut m = [0u8; 4];
        let bytes = doc.magic.as_bytes();
        m[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
        return Err(TensorError::BadMagic(m));
    }
    if doc.version != FORMAT_VERSION {
        return Err(TensorError::BadVersion(doc.version));
    }
    doc.scales
        .into_iter()
        .map(|js| {
            let mut t = ScaleTensor::new(js.s, js.d)?;
            if js.values.len() != js.s * js.s * js.d {
                return Err(TensorError::Malformed(format!(
                    "scale {}x{}x{} carries {} values",
                    js.s,
                    js.s,
                    js.d,
                    js.values.len()
                )));
            }
            t.values = js.values;
            Ok(t)
        })
        .collect()
}

/// Splits a frame's scale list into (detection, keypoint) streams by
/// channel count, preserving order.
pub fn split_frame_tensors(scales: Vec<ScaleTensor>) -> (Vec<ScaleTensor>, Vec<ScaleTensor>) {
    let (kp, det): (Vec<_>, Vec<_>) = scales.into_iter().partition(|t| t.is_keypoint_tensor());
    (det, kp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det_tensor(stride: u32) -> ScaleTensor {
        ScaleTensor::for_stride(stride, ANCHORS_PER_SCALE * 6).unwrap()
    }

    #[test]
    fn decode_boxes_zero_raw_values() {
        let mut t = det_tensor(32);
        // Raise objectness/class at cell row 4, col 3, anchor 0 so the box
        // survives the score threshold; coords stay at raw zero.
        t.set(4, 3, 4, 20.0);
        t.set(4, 3, 5, 20.0);
        let anchors = anchors_for_stride(32).unwrap();
        let boxes = decode_boxes(&t, anchors, 0.3).unwrap();
        assert_eq!(boxes.len(), 1);
        let b = &boxes[0];
        assert_relative_eq!(b.bx, 112.0); // (σ(0) + 3)·32
        assert_relative_eq!(b.by, 144.0); // (σ(0) + 4)·32
        assert_relative_eq!(b.bw, 116.0);
        assert_relative_eq!(b.bh, 90.0);
    }

    #[test]
    fn decode_boxes_objectness_of_zero_logit_is_half() {
        let mut t = det_tensor(32);
        t.set(0, 0, 5, 20.0); // class certain, objectness logit 0
        let boxes = decode_boxes(&t, anchors_for_stride(32).unwrap(), 0.3).unwrap();
        assert_relative_eq!(boxes[0].objectness, 0.5);
    }

    #[test]
    fn decode_boxes_width_doubles_at_ln2() {
        let mut t = det_tensor(32);
        t.set(0, 0, 2, 2.0f64.ln());
        t.set(0, 0, 4, 20.0);
        t.set(0, 0, 5, 20.0);
        let boxes = decode_boxes(&t, anchors_for_stride(32).unwrap(), 0.3).unwrap();
        assert_relative_eq!(boxes[0].bw, 232.0, epsilon = 1e-9);
    }

    #[test]
    fn decode_boxes_shape_mismatch() {
        let t = ScaleTensor::for_stride(32, 17).unwrap();
        let err = decode_boxes(&t, anchors_for_stride(32).unwrap(), 0.3).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn iou_basics() {
        let unit = |x: f64, y: f64| DetectionBox {
            bx: x,
            by: y,
            bw: 1.0,
            bh: 1.0,
            objectness: 1.0,
            class_scores: vec![1.0],
        };
        assert_relative_eq!(iou(&unit(0.0, 0.0), &unit(0.0, 0.0)), 1.0);
        assert_relative_eq!(iou(&unit(0.0, 0.0), &unit(5.0, 5.0)), 0.0);
        // Unit squares offset by half a width: overlap 0.5, union 1.5.
        assert_relative_eq!(iou(&unit(0.0, 0.0), &unit(0.5, 0.0)), 1.0 / 3.0);
    }

    fn random_box(rng: &mut ChaCha8Rng) -> DetectionBox {
        DetectionBox {
            bx: rng.random_range(0.0..416.0),
            by: rng.random_range(0.0..416.0),
            bw: rng.random_range(5.0..200.0),
            bh: rng.random_range(5.0..200.0),
            objectness: rng.random_range(0.01..1.0),
            class_scores: vec![rng.random_range(0.01..1.0)],
        }
    }

    // Exhaustive O(n²) reference: keep a box iff no better-ranked box
    // overlaps a kept box above the threshold. Written against plain
    // corner arithmetic, independent of the library IOU.
    fn nms_reference(
        boxes: &[DetectionBox],
        iou_threshold: f64,
        score_threshold: f64,
    ) -> Vec<DetectionBox> {
        fn corner_iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
            let ix = (a.bx + a.bw / 2.0).min(b.bx + b.bw / 2.0)
                - (a.bx - a.bw / 2.0).max(b.bx - b.bw / 2.0);
            let iy = (a.by + a.bh / 2.0).min(b.by + b.bh / 2.0)
                - (a.by - a.bh / 2.0).max(b.by - b.bh / 2.0);
            if ix <= 0.0 || iy <= 0.0 {
                return 0.0;
            }
            let inter = ix * iy;
            inter / (a.bw * a.bh + b.bw * b.bh - inter)
        }
        let mut ranked: Vec<&DetectionBox> = boxes
            .iter()
            .filter(|b| b.score() >= score_threshold)
            .collect();
        ranked.sort_by(|a, b| nms_order(a, b));
        let mut kept: Vec<DetectionBox> = Vec::new();
        'outer: for b in ranked {
            for k in &kept {
                if corner_iou(k, b) > iou_threshold {
                    continue 'outer;
                }
            }
            kept.push(b.clone());
        }
        kept
    }

    #[test]
    fn nms_single_box_survives() {
        let b = DetectionBox {
            bx: 100.0,
            by: 100.0,
            bw: 50.0,
            bh: 50.0,
            objectness: 0.9,
            class_scores: vec![0.9],
        };
        assert_eq!(nms(&[b.clone()], 0.4, 0.3), vec![b]);
    }

    #[test]
    fn nms_suppresses_duplicate() {
        let mut a = DetectionBox {
            bx: 100.0,
            by: 100.0,
            bw: 50.0,
            bh: 50.0,
            objectness: 0.9,
            class_scores: vec![1.0],
        };
        let mut b = a.clone();
        a.objectness = 0.9;
        b.objectness = 0.8;
        let kept = nms(&[b.clone(), a.clone()], 0.4, 0.3);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn nms_matches_exhaustive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let boxes: Vec<DetectionBox> = (0..50).map(|_| random_box(&mut rng)).collect();
            let fast = nms(&boxes, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD);
            let slow = nms_reference(&boxes, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD);
            assert_eq!(fast, slow);
            for i in 0..fast.len() {
                for j in (i + 1)..fast.len() {
                    assert!(iou(&fast[i], &fast[j]) <= DEFAULT_NMS_IOU);
                }
            }
        }
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms(&[], 0.4, 0.3).is_empty());
    }

    #[test]
    fn decode_keypoints_center_offset() {
        let mut t = ScaleTensor::for_stride(32, KEYPOINT_CHANNELS).unwrap();
        t.set(0, 0, 0, 0.5);
        t.set(0, 0, 1, 0.5);
        let cands = decode_keypoints(&t).unwrap();
        assert_relative_eq!(cands[0].pixel_x, 16.0);
        assert_relative_eq!(cands[0].pixel_y, 16.0);
        // Zero logit decodes to confidence one half.
        assert_relative_eq!(cands[0].confidence, 0.5);
    }

    #[test]
    fn decode_keypoints_shape_mismatch() {
        let t = ScaleTensor::for_stride(32, 23).unwrap();
        assert!(matches!(
            decode_keypoints(&t),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn binary_round_trip_and_split() {
        let mut det = det_tensor(32);
        det.set(3, 5, 2, 1.25);
        let mut kp = ScaleTensor::for_stride(16, KEYPOINT_CHANNELS).unwrap();
        kp.set(10, 11, 7, -4.5);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[det.clone(), kp.clone()]).unwrap();
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back, vec![det.clone(), kp.clone()]);
        let (d, k) = split_frame_tensors(back);
        assert_eq!(d, vec![det]);
        assert_eq!(k, vec![kp]);
    }

    #[test]
    fn binary_rejects_bad_magic_and_version() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[det_tensor(32)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_tensors(bad.as_slice()),
            Err(TensorError::BadMagic(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_tensors(bad.as_slice()),
            Err(TensorError::BadVersion(9))
        ));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors(buf.as_slice()), Err(TensorError::Io(_))));
    }

    #[test]
    fn json_mirror_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.json");
        let mut kp = ScaleTensor::for_stride(8, KEYPOINT_CHANNELS).unwrap();
        kp.set(1, 2, 3, 0.75);
        write_tensors_json(&path, &[kp.clone()]).unwrap();
        let back = read_tensors_json(&path).unwrap();
        assert_eq!(back, vec![kp]);
    }

    #[test]
    fn decoded_quantities_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = det_tensor(16);
        for row in 0..t.grid_size() {
            for col in 0..t.grid_size() {
                for ch in 0..t.channels() {
                    t.set(row, col, ch, rng.random_range(-10.0..10.0));
                }
            }
        }
        let boxes = decode_boxes(&t, anchors_for_stride(16).unwrap(), 0.0).unwrap();
        let stride = 16.0;
        for (i, b) in boxes.iter().enumerate() {
            assert!(b.objectness > 0.0 && b.objectness < 1.0);
            assert!(b.class_scores[0] > 0.0 && b.class_scores[0] < 1.0);
            // Box center stays inside its source cell.
            let cell = i / ANCHORS_PER_SCALE;
            let (row, col) = (cell / t.grid_size(), cell % t.grid_size());
            assert!(b.bx > col as f64 * stride && b.bx < (col + 1) as f64 * stride);
            assert!(b.by > row as f64 * stride && b.by < (row + 1) as f64 * stride);
        }
    }
}
