//! Built-in synthetic eye corpus.
//!
//! Each image is derived from the gazemap of its gaze angle: sclera inside the
//! eyeball disk, a darker iris, skin outside, soft eyelid bands at the top and
//! bottom and a fixed per-subject texture. Tones, lids and texture depend only
//! on the subject style, so two samples of one subject differ only where the
//! iris moved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EyeSample, EyeSide, RedirectionPair};
use crate::error::{Error, Result};
use crate::npg::{rasterize_gazemap, GazeAngle, GazemapGeometry, HeadPose};
use crate::par;
use crate::tensor::Tensor;

/// Per-subject appearance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeStyle {
    pub sclera: f64,
    pub iris: f64,
    pub skin: f64,
    /// Lid edge positions as fractions of the height.
    pub upper_lid: f64,
    pub lower_lid: f64,
    pub texture_amplitude: f64,
    pub texture_seed: u64,
}

impl EyeStyle {
    pub fn from_seed(style_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
        EyeStyle {
            sclera: rng.gen_range(0.45..0.8),
            iris: rng.gen_range(-0.85..-0.4),
            skin: rng.gen_range(0.15..0.35),
            upper_lid: rng.gen_range(0.01..0.04),
            lower_lid: rng.gen_range(0.01..0.04),
            texture_amplitude: 0.03,
            texture_seed: rng.gen(),
        }
    }
}

fn smoothstep_weight(edge: f64, y: f64, width: f64) -> f64 {
    1.0 / (1.0 + ((y - edge) / width).exp())
}

/// Deterministic grayscale eye image, replicated over `channels`.
pub fn render_synthetic_eye(
    gaze: GazeAngle,
    head: HeadPose,
    style_seed: u64,
    size: usize,
    channels: usize,
) -> Result<Tensor<f32>> {
    render_styled(gaze, head, &EyeStyle::from_seed(style_seed), size, channels)
}

pub fn render_styled(gaze: GazeAngle, head: HeadPose, style: &EyeStyle, size: usize, channels: usize) -> Result<Tensor<f32>> {
    if channels == 0 {
        return Err(Error::Invalid("render: channels must be >= 1".into()));
    }
    let map = rasterize_gazemap::<f32>(gaze, size, size)?;
    let geo = GazemapGeometry::new(gaze, size, size)?;
    let n = size as f64;
    let tilt = (head.yaw / 30.0).clamp(-1.0, 1.0);
    let upper = n * (style.upper_lid + 0.01 * (1.0 + tilt));
    let lower = n * (1.0 - style.lower_lid - 0.01 * (1.0 - tilt));
    let mut tex = ChaCha8Rng::seed_from_u64(style.texture_seed);
    let plane = size * size;
    let mut gray = vec![0f32; plane];
    for (idx, px) in gray.iter_mut().enumerate() {
        let (r, c) = (idx / size, idx % size);
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let mut v = if map.iris()[idx] > 0.0 {
            style.iris
        } else if map.eyeball()[idx] > 0.0 {
            let rr = ((y - n / 2.0).powi(2) + (x - n / 2.0).powi(2)) / (geo.k * geo.k);
            style.sclera - 0.1 * rr + 0.04 * tilt * (x - n / 2.0) / geo.k
        } else {
            style.skin
        };
        let top = smoothstep_weight(upper, y, 0.6);
        let bottom = smoothstep_weight(-lower, -y, 0.6);
        let lid = top.max(bottom);
        v = v * (1.0 - lid) + style.skin * lid;
        v += style.texture_amplitude * tex.gen_range(-1.0..1.0);
        *px = v.clamp(-1.0, 1.0) as f32;
    }
    let data: Vec<f32> = (0..channels).flat_map(|_| gray.iter().copied()).collect();
    Tensor::new(&[channels, size, size], data)
}

/// Angle grid and subject pool for pair generation.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleGrid {
    pub pitch: Vec<f64>,
    pub yaw: Vec<f64>,
    pub head: Vec<f64>,
    pub subjects: usize,
}

impl Default for AngleGrid {
    fn default() -> Self {
        AngleGrid {
            pitch: vec![-10.0, 0.0, 10.0],
            yaw: vec![-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0],
            head: vec![-30.0, -15.0, 0.0, 15.0, 30.0],
            subjects: 56,
        }
    }
}

impl AngleGrid {
    pub fn from_config(cfg: &crate::config::DataConfig) -> Self {
        AngleGrid {
            pitch: cfg.pitch_grid.clone(),
            yaw: cfg.yaw_grid.clone(),
            head: cfg.head_grid.clone(),
            subjects: cfg.subjects,
        }
    }

    pub fn gazes(&self) -> Vec<GazeAngle> {
        self.pitch
            .iter()
            .flat_map(|&p| self.yaw.iter().map(move |&y| GazeAngle { pitch: p, yaw: y }))
            .collect()
    }
}

/// Subject ids are `s01`, `s02`, ...
pub fn subject_id(index: usize) -> String {
    format!("s{:02}", index + 1)
}

/// Style seed of a subject under a dataset seed.
pub fn style_seed(dataset_seed: u64, subject: usize) -> u64 {
    dataset_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (subject as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// `count` pairs drawn from the grid; reproducible from `seed`.
pub fn make_pair_dataset(count: usize, seed: u64, grid: &AngleGrid, size: usize, channels: usize) -> Result<Vec<RedirectionPair>> {
    if count == 0 {
        return Err(Error::Invalid("pair count must be >= 1".into()));
    }
    let gazes = grid.gazes();
    if gazes.is_empty() || grid.head.is_empty() || grid.subjects == 0 {
        return Err(Error::Invalid("angle grid is empty".into()));
    }
    let pairs = par::map_indexed(count, |i| -> Result<RedirectionPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let subject = rng.gen_range(0..grid.subjects);
        let head = HeadPose::new(grid.head[rng.gen_range(0..grid.head.len())])?;
        let src = gazes[rng.gen_range(0..gazes.len())];
        let dst = gazes[rng.gen_range(0..gazes.len())];
        let style = style_seed(seed, subject);
        let side = if subject % 2 == 0 { EyeSide::Left } else { EyeSide::Right };
        let sample = |gaze: GazeAngle| -> Result<EyeSample> {
            Ok(EyeSample {
                image: render_synthetic_eye(gaze, head, style, size, channels)?,
                gaze,
                head,
                subject_id: subject_id(subject),
                eye_side: side,
            })
        };
        RedirectionPair::new(sample(src)?, sample(dst)?)
    });
    pairs.into_iter().collect()
}
