//! Numerical and pictorial guidance: gazemap rasterization and the condition
//! tensor `[Δr, S_a, S_b]` fed to the decoder and the refinement generator.
//!
//! Geometry. For a map `height × width`, pixel `(row, col)` covers the unit
//! square starting at `(row, col)`, so its centre is `(row + ½, col + ½)`.
//! The eyeball is a disk of diameter `2k = 1.2·height` centred on the map.
//! The iris centre is
//!
//! ```text
//! μ (column) = width/2  − k·cos(asin ½)·sin φ·cos θ
//! ν (row)    = height/2 − k·cos(asin ½)·sin θ
//! ```
//!
//! and the iris is an ellipse with major diameter `k` and minor diameter
//! `k·|cos θ·cos φ|`, the minor axis pointing along the displacement from the
//! eyeball centre. A pixel belongs to a mask when its centre lies inside the
//! shape; the iris mask is intersected with the eyeball mask.

use crate::autodiff::resample_nearest;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Largest representable angle component in degrees.
pub const MAX_ANGLE_DEG: f64 = 90.0;
/// Default divisor that maps angles in degrees to `[-1, 1]`.
pub const DEFAULT_ANGLE_SCALE_DEG: f64 = 30.0;
/// Smallest map extent the rasterizer accepts.
pub const MIN_EXTENT: usize = 8;

/// Gaze direction in degrees: `pitch` (vertical θ) and `yaw` (horizontal φ).
#[derive(Clone, Copy, Debug, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct GazeAngle {
    pub pitch: f64,
    pub yaw: f64,
}

impl GazeAngle {
    pub fn new(pitch: f64, yaw: f64) -> Result<Self> {
        let g = GazeAngle { pitch, yaw };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pitch", self.pitch), ("yaw", self.yaw)] {
            if !v.is_finite() || v.abs() > MAX_ANGLE_DEG {
                return Err(Error::Invalid(format!(
                    "{name} {v} deg outside [-{MAX_ANGLE_DEG}, {MAX_ANGLE_DEG}]"
                )));
            }
        }
        Ok(())
    }

    /// Unit 3-d gaze vector; used for angular errors.
    pub fn vector(&self) -> [f64; 3] {
        let (t, p) = (self.pitch.to_radians(), self.yaw.to_radians());
        [-t.cos() * p.sin(), -t.sin(), -t.cos() * p.cos()]
    }

    /// Angle between two gaze directions in degrees.
    pub fn angular_error(&self, other: &GazeAngle) -> f64 {
        let (a, b) = (self.vector(), other.vector());
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        dot.clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// Head yaw in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct HeadPose {
    pub yaw: f64,
}

impl HeadPose {
    pub fn new(yaw: f64) -> Result<Self> {
        if !yaw.is_finite() {
            return Err(Error::Invalid(format!("head yaw {yaw} is not finite")));
        }
        Ok(HeadPose { yaw })
    }
}

/// Closed-form eyeball and iris geometry for one angle and map size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazemapGeometry {
    pub height: usize,
    pub width: usize,
    /// Eyeball radius `k` (half the projected eyeball diameter).
    pub k: f64,
    /// Iris centre column.
    pub mu: f64,
    /// Iris centre row.
    pub nu: f64,
    pub major: f64,
    pub minor: f64,
}

/// `cos(asin ½)`: the iris-plane offset factor.
pub fn iris_offset_factor() -> f64 {
    (0.5f64).asin().cos()
}

impl GazemapGeometry {
    pub fn new(angle: GazeAngle, height: usize, width: usize) -> Result<Self> {
        angle.validate()?;
        if height < MIN_EXTENT || width < MIN_EXTENT {
            return Err(Error::Invalid(format!(
                "gazemap extents {height}x{width} below the {MIN_EXTENT}x{MIN_EXTENT} minimum"
            )));
        }
        let k = 0.6 * height as f64;
        let (t, p) = (angle.pitch.to_radians(), angle.yaw.to_radians());
        let reach = k * iris_offset_factor();
        Ok(GazemapGeometry {
            height,
            width,
            k,
            mu: width as f64 / 2.0 - reach * p.sin() * t.cos(),
            nu: height as f64 / 2.0 - reach * t.sin(),
            major: k,
            minor: k * (t.cos() * p.cos()).abs(),
        })
    }

    fn in_eyeball(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.height as f64 / 2.0, x - self.width as f64 / 2.0);
        dy * dy + dx * dx <= self.k * self.k
    }

    fn in_iris(&self, y: f64, x: f64) -> bool {
        let (cy, cx) = (self.height as f64 / 2.0, self.width as f64 / 2.0);
        // minor axis along the centre displacement
        let (oy, ox) = (self.nu - cy, self.mu - cx);
        let len = (oy * oy + ox * ox).sqrt();
        let (uy, ux) = if len > 1e-12 { (oy / len, ox / len) } else { (0.0, 1.0) };
        let (dy, dx) = (y - self.nu, x - self.mu);
        let along = dy * uy + dx * ux;
        let across = -dy * ux + dx * uy;
        let (a, b) = (self.minor / 2.0, self.major / 2.0);
        if a <= 0.0 {
            return false;
        }
        (along / a).powi(2) + (across / b).powi(2) <= 1.0
    }
}

/// Two-channel Boolean map: channel 0 eyeball, channel 1 iris.
#[derive(Clone, Debug, PartialEq)]
pub struct Gazemap<T: Real = f32>(Tensor<T>);

impl<T: Real> Gazemap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn eyeball(&self) -> &[T] {
        let (h, w) = self.extents();
        &self.0.data()[..h * w]
    }

    pub fn iris(&self) -> &[T] {
        let (h, w) = self.extents();
        &self.0.data()[h * w..]
    }

    /// Mean `(row, col)` of iris pixel centres.
    pub fn iris_centroid(&self) -> Option<(f64, f64)> {
        let (_, w) = self.extents();
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for (i, &v) in self.iris().iter().enumerate() {
            if v > T::zero() {
                sy += (i / w) as f64 + 0.5;
                sx += (i % w) as f64 + 0.5;
                n += 1;
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }
}

/// Rasterizes the gazemap of `angle` at `height × width`.
pub fn rasterize_gazemap<T: Real>(angle: GazeAngle, height: usize, width: usize) -> Result<Gazemap<T>> {
    let geo = GazemapGeometry::new(angle, height, width)?;
    let plane = height * width;
    let mut data = vec![T::zero(); 2 * plane];
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            if geo.in_eyeball(y, x) {
                data[r * width + c] = T::one();
                if geo.in_iris(y, x) {
                    data[plane + r * width + c] = T::one();
                }
            }
        }
    }
    Ok(Gazemap(Tensor::new(&[2, height, width], data)?))
}

/// `[Δr planes (2), S_a (2), S_b (2)]` as a `6 × H × W` tensor, or `2 × H × W`
/// when the pictorial part is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTensor<T: Real = f32> {
    tensor: Tensor<T>,
    delta: [T; 2],
}

impl<T: Real> ConditionTensor<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    /// Normalized `(Δpitch, Δyaw)`.
    pub fn delta(&self) -> [T; 2] {
        self.delta
    }

    pub fn has_gazemaps(&self) -> bool {
        self.channels() == 6
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }
}

/// Number of condition channels with or without gazemaps.
pub fn condition_channels(with_gazemaps: bool) -> usize {
    if with_gazemaps {
        6
    } else {
        2
    }
}

fn constant_planes<T: Real>(values: &[T], height: usize, width: usize) -> Vec<T> {
    values
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(height * width))
        .collect()
}

/// Condition tensor for redirecting `r_a` to `r_b`; angle differences are
/// divided by `angle_scale` degrees.
pub fn build_condition<T: Real>(
    r_a: GazeAngle,
    r_b: GazeAngle,
    height: usize,
    width: usize,
    angle_scale: f64,
    with_gazemaps: bool,
) -> Result<ConditionTensor<T>> {
    r_a.validate()?;
    r_b.validate()?;
    if angle_scale <= 0.0 || !angle_scale.is_finite() {
        return Err(Error::Invalid(format!("angle scale {angle_scale} must be positive")));
    }
    let delta = [
        T::lit((r_b.pitch - r_a.pitch) / angle_scale),
        T::lit((r_b.yaw - r_a.yaw) / angle_scale),
    ];
    let mut data = constant_planes(&delta, height, width);
    if with_gazemaps {
        data.extend_from_slice(rasterize_gazemap::<T>(r_a, height, width)?.tensor().data());
        data.extend_from_slice(rasterize_gazemap::<T>(r_b, height, width)?.tensor().data());
    } else if height == 0 || width == 0 {
        return Err(Error::Invalid("condition extents must be >= 1".into()));
    }
    let c = condition_channels(with_gazemaps);
    Ok(ConditionTensor {
        tensor: Tensor::new(&[c, height, width], data)?,
        delta,
    })
}

/// Re-expresses a condition tensor at `height × width`: numeric planes are
/// re-broadcast, gazemap channels nearest-resampled.
pub fn condition_at_scale<T: Real>(cond: &ConditionTensor<T>, height: usize, width: usize) -> Result<ConditionTensor<T>> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid(format!("condition target {height}x{width} must be >= 1")));
    }
    if cond.extents() == (height, width) {
        return Ok(cond.clone());
    }
    let mut data = constant_planes(&cond.delta, height, width);
    if cond.has_gazemaps() {
        let (h, w) = cond.extents();
        let maps = Tensor::new(&[4, h, w], cond.tensor.data()[2 * h * w..].to_vec())?;
        data.extend_from_slice(resample_nearest(&maps, height, width)?.data());
    }
    Ok(ConditionTensor {
        tensor: Tensor::new(&[cond.channels(), height, width], data)?,
        delta: cond.delta,
    })
}
