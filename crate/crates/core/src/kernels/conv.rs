use crate::par;

/// Geometry of a square-kernel 2D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

pub fn conv2d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![0.0; g.c_out * plane];
    par::for_each_chunk(&mut out, plane, |co, dst| {
        if let Some(b) = bias {
            dst.fill(b[co]);
        }
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * ow + lo..oy * ow + hi];
                        if g.stride == 1 {
                            let start = lo + kx - g.pad;
                            for (d, s) in drow.iter_mut().zip(&row[start..start + (hi - lo)]) {
                                *d += wv * s;
                            }
                        } else {
                            for (j, d) in drow.iter_mut().enumerate() {
                                *d += wv * row[(lo + j) * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the input.
pub fn conv2d_grad_input(kernel: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gx = vec![0.0; g.c_in * g.h * g.w];
    par::for_each_chunk(&mut gx, g.h * g.w, |ci, dst| {
        for co in 0..g.c_out {
            let go = &gout[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &go[oy * ow + lo..oy * ow + hi];
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let start = lo + kx - g.pad;
                            for (d, s) in drow[start..start + (hi - lo)].iter_mut().zip(grow) {
                                *d += wv * s;
                            }
                        } else {
                            for (j, s) in grow.iter().enumerate() {
                                drow[(lo + j) * g.stride + kx - g.pad] += wv * s;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient with respect to the kernel.
pub fn conv2d_grad_kernel(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let per_out = g.c_in * g.k * g.k;
    let mut gk = vec![0.0; g.c_out * per_out];
    par::for_each_chunk(&mut gk, per_out, |co, dst| {
        let go = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let grow = &go[oy * ow + lo..oy * ow + hi];
                        if g.stride == 1 {
                            let start = lo + kx - g.pad;
                            acc += grow
                                .iter()
                                .zip(&row[start..start + (hi - lo)])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for (j, s) in grow.iter().enumerate() {
                                acc += s * row[(lo + j) * g.stride + kx - g.pad];
                            }
                        }
                    }
                    dst[(ci * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    });
    gk
}

pub fn conv2d_grad_bias(gout: &[f64], c_out: usize) -> Vec<f64> {
    let plane = gout.len() / c_out;
    (0..c_out)
        .map(|c| gout[c * plane..(c + 1) * plane].iter().sum())
        .collect()
}
