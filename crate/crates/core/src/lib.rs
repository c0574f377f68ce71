//! 6D object pose estimation from detector grid outputs.
//!
//! The library turns raw multi-scale prediction tensors (an object-detection
//! stream plus a keypoint-regression stream) into a rigid-body pose:
//!
//! 1. **tensor** – anchor-box and keypoint decoding, IOU, non-maximum
//!    suppression, and the binary/JSON tensor interchange formats.
//! 2. **refine** – candidate filtering (box membership, cluster consistency,
//!    confidence, top-k) and RANSAC-based EPnP with Gauss–Newton polishing.
//! 3. **geometry** – poses, pinhole projection with Brown–Conrady distortion,
//!    rotation metrics, Euler decompositions, and the 8-corner object model.
//! 4. **losses** – reference implementations of the training losses and the
//!    box-encoding inversion.
//! 5. **synthgen** – a seeded synthetic-frame generator that produces
//!    noise-controlled tensors with exact ground truth, closing the loop for
//!    end-to-end verification.
//! 6. **eval** – per-frame error metrics (translation, geodesic rotation,
//!    reprojection, vertex distance), accuracy aggregation, and throughput
//!    measurement.

pub mod eval;
pub mod geometry;
pub mod losses;
pub mod refine;
pub mod synthgen;
pub mod tensor;

pub use eval::{EvalRecord, EvalReport};
pub use geometry::{CameraIntrinsics, Distortion, EulerAngles, ObjectModel, Pose};
pub use refine::{Correspondence, PoseEstimate, RansacParams, RefineError};
pub use synthgen::{NoiseModel, PoseRanges};
pub use tensor::{Anchor, DetectionBox, KeypointCandidate, ScaleTensor};
