//! 2-D cross-correlation via im2col + GEMM, one sample at a time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    /// Output extent `ceil(H / stride)`; odd padding puts the extra pixel
    /// on the bottom/right.
    Same,
}

impl Padding {
    /// `(before, after)` padding along one axis.
    pub fn amounts(self, size: usize, kernel: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out = size.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(size);
                (total / 2, total - total / 2)
            }
        }
    }

    pub fn output_size(self, size: usize, kernel: usize, stride: usize) -> Option<usize> {
        let (a, b) = self.amounts(size, kernel, stride);
        let padded = size + a + b;
        (padded >= kernel).then(|| (padded - kernel) / stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects input [N,C,H,W] and kernel [K,C,kh,kw], got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        if input[1] != kernel[1] {
            return Err(Error::dim(format!(
                "conv2d channel axis mismatch: input axis 1 = {} but kernel axis 1 = {}",
                input[1], kernel[1]
            )));
        }
        let (kh, kw) = (kernel[2], kernel[3]);
        let out_h = padding.output_size(input[2], kh, stride);
        let out_w = padding.output_size(input[3], kw, stride);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than input {}x{} (axes 2,3)",
                input[2], input[3]
            )));
        };
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: kernel[0],
            kh,
            kw,
            stride,
            pad_top: padding.amounts(input[2], kh, stride).0,
            pad_left: padding.amounts(input[3], kw, stride).0,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => plane[y * self.width + x],
                                None => T::zero(),
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                plane[y * self.width + x] = plane[y * self.width + x] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn forward<T: Scalar>(geom: &ConvGeometry, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ck, p, k) = (geom.patch_len(), geom.positions(), geom.out_channels);
    let in_len = geom.in_channels * geom.height * geom.width;
    let mut out = vec![T::zero(); geom.batch * k * p];
    let mut cols = vec![T::zero(); ck * p];
    for n in 0..geom.batch {
        geom.im2col(&input[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * k * p..(n + 1) * k * p];
        if let Some(b) = bias {
            for (ch, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b[ch]);
            }
        }
        gemm(k, ck, p, kernel, Trans::No, &cols, Trans::No, T::one(), dst);
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Vec<T>,
}

/// Samples are reduced into the kernel gradient in batch order, so the
/// result does not depend on GEMM threading.
pub fn backward<T: Scalar>(
    geom: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    gout: &[T],
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads<T> {
    let (ck, p, k) = (geom.patch_len(), geom.positions(), geom.out_channels);
    let in_len = geom.in_channels * geom.height * geom.width;
    let mut gin = want_input.then(|| vec![T::zero(); input.len()]);
    let mut gk = want_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut gb = vec![T::zero(); k];
    let mut cols = vec![T::zero(); ck * p];
    for n in 0..geom.batch {
        let go = &gout[n * k * p..(n + 1) * k * p];
        for (ch, row) in go.chunks(p).enumerate() {
            gb[ch] = gb[ch] + row.iter().copied().sum::<T>();
        }
        if let Some(gk) = gk.as_mut() {
            geom.im2col(&input[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(k, p, ck, go, Trans::No, &cols, Trans::Yes, T::one(), gk);
        }
        if let Some(gin) = gin.as_mut() {
            gemm(ck, k, p, kernel, Trans::Yes, go, Trans::No, T::zero(), &mut cols);
            geom.col2im(&cols, &mut gin[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: gin,
        kernel: gk,
        bias: gb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_amounts() {
        // 28 wide, 3 tap, stride 1: one each side.
        assert_eq!(Padding::Same.amounts(28, 3, 1), (1, 1));
        // 32 wide, 9 tap, stride 2: out 16, total pad 7 -> 3 before, 4 after.
        assert_eq!(Padding::Same.amounts(32, 9, 2), (3, 4));
        assert_eq!(Padding::Same.output_size(32, 9, 2), Some(16));
        assert_eq!(Padding::Same.output_size(5, 3, 2), Some(3));
    }

    #[test]
    fn valid_output_size() {
        assert_eq!(Padding::Valid.output_size(28, 9, 2), Some(10));
        assert_eq!(Padding::Valid.output_size(20, 9, 2), Some(6));
        assert_eq!(Padding::Valid.output_size(8, 9, 2), None);
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let err = ConvGeometry::new(&[1, 2, 5, 5], &[1, 3, 3, 3], 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("axis 1"));
    }
}
