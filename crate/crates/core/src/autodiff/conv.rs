//! 2-d convolution kernels (im2col + one GEMM per batch).
//!
//! Column buffers are laid out one row per output pixel (`[batch·pixels, c·kh·kw]`)
//! so each sample owns a contiguous block that can be filled independently.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, w], &[co, ci, kh, kw]) = (input, kernel) else {
            return Err(Error::Invalid(format!(
                "conv2d: expected 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if stride == 0 {
            return Err(Error::Invalid("conv2d: stride must be >= 1".into()));
        }
        if ci != c {
            return Err(Error::Invalid(format!(
                "conv2d: kernel {kernel:?} expects {ci} input channels but input {input:?} has {c}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Invalid(format!(
                "conv2d: kernel {kernel:?} larger than padded input {input:?}"
            )));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Source offset inside one sample for an output pixel and kernel tap,
    /// or `None` when the tap falls on padding.
    #[inline]
    fn source(&self, c: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((c * self.height + y as usize) * self.width + x as usize)
        }
    }
}

fn im2col<T: Real>(geo: &ConvGeometry, input: &[T]) -> Vec<T> {
    let patch = geo.patch();
    let per_sample = geo.pixels() * patch;
    let in_per = geo.in_channels * geo.height * geo.width;
    let mut cols = vec![T::zero(); geo.batch * per_sample];
    par::for_each_chunk(&mut cols, per_sample, |s, block| {
        let src = &input[s * in_per..(s + 1) * in_per];
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let row = &mut block[(oy * geo.out_w + ox) * patch..][..patch];
                let mut k = 0;
                for c in 0..geo.in_channels {
                    for ky in 0..geo.kernel_h {
                        for kx in 0..geo.kernel_w {
                            if let Some(off) = geo.source(c, oy, ox, ky, kx) {
                                row[k] = src[off];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    });
    cols
}

fn col2im<T: Real>(geo: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let patch = geo.patch();
    let per_sample = geo.pixels() * patch;
    let in_per = geo.in_channels * geo.height * geo.width;
    let mut out = vec![T::zero(); geo.batch * in_per];
    par::for_each_chunk(&mut out, in_per, |s, dst| {
        let block = &cols[s * per_sample..(s + 1) * per_sample];
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let row = &block[(oy * geo.out_w + ox) * patch..][..patch];
                let mut k = 0;
                for c in 0..geo.in_channels {
                    for ky in 0..geo.kernel_h {
                        for kx in 0..geo.kernel_w {
                            if let Some(off) = geo.source(c, oy, ox, ky, kx) {
                                dst[off] = dst[off] + row[k];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let cols = im2col(&geo, input.data());
    let (np, patch, co) = (geo.batch * geo.pixels(), geo.patch(), geo.out_channels);
    // [co, n·p] = W[co, patch] · colsᵀ
    let mut wide = vec![T::zero(); co * np];
    T::gemm(
        co,
        patch,
        np,
        kernel.data(),
        (patch as isize, 1),
        &cols,
        (1, patch as isize),
        T::zero(),
        &mut wide,
        np as isize,
    );
    let p = geo.pixels();
    let mut out = vec![T::zero(); geo.batch * co * p];
    for s in 0..geo.batch {
        for o in 0..co {
            out[(s * co + o) * p..][..p].copy_from_slice(&wide[o * np + s * p..][..p]);
        }
    }
    Tensor::new(&geo.out_shape(), out)
}

/// Returns `(grad_input, grad_kernel)`; either is skipped when not requested.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != geo.out_shape() {
        return Err(Error::shape("conv2d backward", &geo.out_shape(), grad_out.shape()));
    }
    let (np, patch, co, p) = (
        geo.batch * geo.pixels(),
        geo.patch(),
        geo.out_channels,
        geo.pixels(),
    );
    let mut wide = vec![T::zero(); co * np];
    for s in 0..geo.batch {
        for o in 0..co {
            wide[o * np + s * p..][..p].copy_from_slice(&grad_out.data()[(s * co + o) * p..][..p]);
        }
    }
    let grad_kernel = if want_kernel {
        let cols = im2col(&geo, input.data());
        let mut gk = vec![T::zero(); co * patch];
        T::gemm(
            co,
            np,
            patch,
            &wide,
            (np as isize, 1),
            &cols,
            (patch as isize, 1),
            T::zero(),
            &mut gk,
            patch as isize,
        );
        Some(Tensor::new(kernel.shape(), gk)?)
    } else {
        None
    };
    let grad_input = if want_input {
        // cols grad [n·p, patch] = wideᵀ · W
        let mut gcols = vec![T::zero(); np * patch];
        T::gemm(
            np,
            co,
            patch,
            &wide,
            (1, np as isize),
            kernel.data(),
            (patch as isize, 1),
            T::zero(),
            &mut gcols,
            patch as isize,
        );
        Some(Tensor::new(input.shape(), col2im(&geo, &gcols))?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}
