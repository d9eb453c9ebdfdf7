//! im2col lowering for square-kernel 2-D cross-correlation.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv2d: kernel {kernel} and stride {stride} must be positive"
            )));
        }
        let out = |size: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < kernel {
                return Err(Error::Config(format!(
                    "conv2d: input {size} with padding {padding} is smaller than kernel {kernel}"
                )));
            }
            Ok((padded - kernel) / stride + 1)
        };
        Ok(ConvGeometry {
            in_channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: out(height)?,
            out_width: out(width)?,
        })
    }

    /// Rows of the lowered matrix: `C_in·k·k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Lowers one image `[C,H,W]` into `cols[C·k·k, H'·W']`. Out-of-bounds
    /// taps read as zero.
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        let op = self.out_pixels();
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * op..(row + 1) * op];
                    for oy in 0..self.out_height {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * self.out_width..(oy + 1) * self.out_width];
                        if iy < 0 || iy >= h {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters `cols` back into
    /// `image`, accumulating.
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        let op = self.out_pixels();
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * op..(row + 1) * op];
                    for oy in 0..self.out_height {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = c * self.height * self.width + iy as usize * self.width;
                        for ox in 0..self.out_width {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w {
                                image[base + ix as usize] += src[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let g = ConvGeometry::new(1, 16, 16, 3, 2, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (8, 8));
        let g = ConvGeometry::new(1, 3, 3, 3, 1, 0).unwrap();
        assert_eq!((g.out_height, g.out_width), (1, 1));
        assert!(ConvGeometry::new(1, 2, 2, 3, 1, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_pixels())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        g.im2col(&x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
