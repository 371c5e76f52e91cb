//! Differentiable bilinear sampler driven by a dense flow field.
//!
//! `out(c, i, j) = image{i + flow(0, i, j), j + flow(1, i, j), c}` where `{}` is
//! bilinear interpolation. Sample points outside `[0, H-1] × [0, W-1]` are
//! illegal: the output pixel is 0 and no gradient flows through it. At integer
//! sample coordinates the right-hand cell is used, which fixes the subgradient
//! at the interpolation kinks.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

/// A `batch × 2 × H × W` displacement map in pixels: channel 0 moves the row,
/// channel 1 the column.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T: Real = f32>(Tensor<T>);

impl<T: Real> FlowField<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = t.dims4("flow field")?;
        if c != 2 {
            return Err(Error::Invalid(format!(
                "flow field needs exactly 2 channels, got shape {:?}",
                t.shape()
            )));
        }
        Ok(FlowField(t))
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        FlowField(Tensor::zeros(&[batch, 2, height, width]))
    }

    /// Constant displacement `(rows, cols)` everywhere.
    pub fn constant(batch: usize, height: usize, width: usize, rows: T, cols: T) -> Self {
        let plane = height * width;
        FlowField(Tensor::from_fn(&[batch, 2, height, width], |i| {
            if (i / plane) % 2 == 0 {
                rows
            } else {
                cols
            }
        }))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Interpolation footprint of one output pixel.
#[derive(Clone, Copy)]
struct Footprint<T> {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    wy: T,
    wx: T,
}

#[inline]
fn footprint<T: Real>(y: T, x: T, h: usize, w: usize) -> Option<Footprint<T>> {
    let (hmax, wmax) = (T::lit((h - 1) as f64), T::lit((w - 1) as f64));
    if !(y >= T::zero() && y <= hmax && x >= T::zero() && x <= wmax) {
        return None;
    }
    let cell = |v: T, extent: usize| -> (usize, usize, T) {
        if extent < 2 {
            return (0, 0, T::zero());
        }
        let lo = v.floor().to_usize().unwrap_or(0).min(extent - 2);
        (lo, lo + 1, v - T::lit(lo as f64))
    };
    let (y0, y1, wy) = cell(y, h);
    let (x0, x1, wx) = cell(x, w);
    Some(Footprint {
        y0,
        y1,
        x0,
        x1,
        wy,
        wx,
    })
}

fn check_shapes<T: Real>(image: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = image.dims4("bilinear_warp")?;
    let (fnb, fc, fh, fw) = flow.dims4("bilinear_warp")?;
    if fnb != n || fc != 2 || fh != h || fw != w {
        return Err(Error::shape("bilinear_warp", &[n, 2, h, w], flow.shape()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Invalid("bilinear_warp: empty image".into()));
    }
    Ok((n, c, h, w))
}

pub fn bilinear_warp<T: Real>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    warp_forward(image, flow.tensor())
}

pub(crate) fn warp_forward<T: Real>(image: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_shapes(image, flow)?;
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * plane];
    par::for_each_chunk(&mut out, c * plane, |s, dst| {
        let img = &image.data()[s * c * plane..(s + 1) * c * plane];
        let fl = &flow.data()[s * 2 * plane..(s + 1) * 2 * plane];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let y = T::lit(i as f64) + fl[p];
                let x = T::lit(j as f64) + fl[plane + p];
                let Some(f) = footprint(y, x, h, w) else { continue };
                let (one_y, one_x) = (T::one() - f.wy, T::one() - f.wx);
                for ch in 0..c {
                    let src = &img[ch * plane..(ch + 1) * plane];
                    dst[ch * plane + p] = one_y * one_x * src[f.y0 * w + f.x0]
                        + one_y * f.wx * src[f.y0 * w + f.x1]
                        + f.wy * one_x * src[f.y1 * w + f.x0]
                        + f.wy * f.wx * src[f.y1 * w + f.x1];
                }
            }
        }
    });
    Tensor::new(image.shape(), out)
}

/// Gradients of the warp with respect to the image and the flow.
pub fn bilinear_warp_backward<T: Real>(
    image: &Tensor<T>,
    flow: &FlowField<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, FlowField<T>)> {
    let (gi, gf) = warp_backward(image, flow.tensor(), upstream)?;
    Ok((gi, FlowField(gf)))
}

pub(crate) fn warp_backward<T: Real>(
    image: &Tensor<T>,
    flow: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_shapes(image, flow)?;
    if upstream.shape() != image.shape() {
        return Err(Error::shape("bilinear_warp backward", image.shape(), upstream.shape()));
    }
    let plane = h * w;
    // Each sample produces (image grad, flow grad) independently.
    let per_sample = par::map_indexed(n, |s| {
        let img = &image.data()[s * c * plane..(s + 1) * c * plane];
        let fl = &flow.data()[s * 2 * plane..(s + 1) * 2 * plane];
        let up = &upstream.data()[s * c * plane..(s + 1) * c * plane];
        let mut gi = vec![T::zero(); c * plane];
        let mut gf = vec![T::zero(); 2 * plane];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let y = T::lit(i as f64) + fl[p];
                let x = T::lit(j as f64) + fl[plane + p];
                let Some(f) = footprint(y, x, h, w) else { continue };
                let (one_y, one_x) = (T::one() - f.wy, T::one() - f.wx);
                let (mut dy, mut dx) = (T::zero(), T::zero());
                for ch in 0..c {
                    let g = up[ch * plane + p];
                    if g == T::zero() {
                        continue;
                    }
                    let base = ch * plane;
                    let v00 = img[base + f.y0 * w + f.x0];
                    let v01 = img[base + f.y0 * w + f.x1];
                    let v10 = img[base + f.y1 * w + f.x0];
                    let v11 = img[base + f.y1 * w + f.x1];
                    gi[base + f.y0 * w + f.x0] = gi[base + f.y0 * w + f.x0] + g * one_y * one_x;
                    gi[base + f.y0 * w + f.x1] = gi[base + f.y0 * w + f.x1] + g * one_y * f.wx;
                    gi[base + f.y1 * w + f.x0] = gi[base + f.y1 * w + f.x0] + g * f.wy * one_x;
                    gi[base + f.y1 * w + f.x1] = gi[base + f.y1 * w + f.x1] + g * f.wy * f.wx;
                    if h > 1 {
                        dy = dy + g * (one_x * (v10 - v00) + f.wx * (v11 - v01));
                    }
                    if w > 1 {
                        dx = dx + g * (one_y * (v01 - v00) + f.wy * (v11 - v10));
                    }
                }
                gf[p] = dy;
                gf[plane + p] = dx;
            }
        }
        (gi, gf)
    });
    let mut gi = Vec::with_capacity(n * c * plane);
    let mut gf = Vec::with_capacity(n * 2 * plane);
    for (a, b) in per_sample {
        gi.extend(a);
        gf.extend(b);
    }
    Ok((
        Tensor::new(image.shape(), gi)?,
        Tensor::new(flow.shape(), gf)?,
    ))
}
