//! Eye samples, redirection pairs, normalization and persistence.

pub mod checkpoint;
pub mod dataset;
pub mod image_io;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::npg::{GazeAngle, HeadPose};
use crate::tensor::{Real, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, AnyTensor, Checkpoint, CheckpointMeta};
pub use dataset::{load_dataset, pairs_from_samples, split_by_subject, read_labels, write_labels, LabelRow, LoadOptions};
pub use synthetic::{make_pair_dataset, render_synthetic_eye, AngleGrid, EyeStyle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EyeSide {
    Left,
    Right,
}

impl fmt::Display for EyeSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EyeSide::Left => "left",
            EyeSide::Right => "right",
        })
    }
}

impl FromStr for EyeSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(EyeSide::Left),
            "right" | "r" => Ok(EyeSide::Right),
            other => Err(Error::Data(format!("unknown eye side `{other}`"))),
        }
    }
}

/// One normalized eye patch (`channels × height × width`, values in `[-1, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EyeSample {
    pub image: Tensor<f32>,
    pub gaze: GazeAngle,
    pub head: HeadPose,
    pub subject_id: String,
    pub eye_side: EyeSide,
}

/// Source and target of one redirection; same subject, side and head pose.
#[derive(Clone, Debug, PartialEq)]
pub struct RedirectionPair {
    pub source: EyeSample,
    pub target: EyeSample,
}

impl RedirectionPair {
    pub fn new(source: EyeSample, target: EyeSample) -> Result<Self> {
        if source.subject_id != target.subject_id || source.eye_side != target.eye_side || source.head != target.head {
            return Err(Error::Data(format!(
                "pair must share subject, eye side and head pose: ({}, {}, {}) vs ({}, {}, {})",
                source.subject_id, source.eye_side, source.head.yaw, target.subject_id, target.eye_side, target.head.yaw
            )));
        }
        Ok(RedirectionPair { source, target })
    }

    /// `|Δpitch| + |Δyaw|` in degrees.
    pub fn angle_difference(&self) -> f64 {
        (self.target.gaze.pitch - self.source.gaze.pitch).abs() + (self.target.gaze.yaw - self.source.gaze.yaw).abs()
    }
}

/// Divides both components by `scale` degrees. Strict mode rejects angles
/// beyond the scale.
pub fn normalize_angles(r: GazeAngle, scale: f64, strict: bool) -> Result<[f64; 2]> {
    if !(scale > 0.0) {
        return Err(Error::Invalid(format!("angle scale {scale} must be positive")));
    }
    if strict && (r.pitch.abs() > scale || r.yaw.abs() > scale) {
        return Err(Error::Invalid(format!(
            "angle ({}, {}) exceeds the normalization scale {scale}",
            r.pitch, r.yaw
        )));
    }
    Ok([r.pitch / scale, r.yaw / scale])
}

pub fn denormalize_angles(v: [f64; 2], scale: f64) -> GazeAngle {
    GazeAngle {
        pitch: v[0] * scale,
        yaw: v[1] * scale,
    }
}

/// 8-bit level to `[-1, 1]`.
pub fn pixel_to_unit<T: Real>(p: u8) -> T {
    T::lit(p as f64 / 127.5 - 1.0)
}

/// `[-1, 1]` to the nearest 8-bit level, clamping out-of-range values.
pub fn unit_to_pixel<T: Real>(v: T) -> u8 {
    let x = ((v.as_f64() + 1.0) * 127.5).round();
    x.clamp(0.0, 255.0) as u8
}

/// Train and test pairs for a run: the labelled corpus under `data.root` when
/// set, otherwise the built-in synthetic corpus. Split by subject.
pub fn build_corpus(cfg: &crate::config::RunConfig) -> Result<(Vec<RedirectionPair>, Vec<RedirectionPair>)> {
    let d = &cfg.data;
    let (size, channels) = (cfg.model.image_size, cfg.model.image_channels);
    let pairs = match &d.root {
        Some(root) => {
            let opts = dataset::LoadOptions { size, channels, strict: d.strict };
            let samples = load_dataset(root, std::path::Path::new(&d.labels_file), opts)?;
            pairs_from_samples(&samples, d.pair_count, d.seed)?
        }
        None => make_pair_dataset(d.pair_count, d.seed, &AngleGrid::from_config(d), size, channels)?,
    };
    Ok(split_by_subject(pairs, &d.test_subjects))
}
