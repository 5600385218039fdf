//! Straight-loop kernels for the two heavy primitives.

use rayon::prelude::*;

/// `out[n×m] += op(a)[n×k] · op(b)[k×m]`, where `op` optionally transposes
/// the stored operand (`a` stored k×n when `ta`, `b` stored m×k when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
    ta: bool,
    tb: bool,
) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for l in 0..k {
            let av = if ta { a[l * n + i] } else { a[i * k + l] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + l];
                }
            } else {
                let brow = &b[l * m..(l + 1) * m];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1,
        )
    }

    /// Multiply-accumulates of one forward pass, counting padded taps.
    pub fn macs(&self) -> u64 {
        let (oh, ow) = self.out_hw();
        (self.batch * self.out_channels * oh * ow * (self.in_channels / self.groups)
            * self.kernel_h
            * self.kernel_w) as u64
    }

    /// Unfolds group `g` of one image into `[cin_g·kh·kw, oh·ow]` columns;
    /// padded taps are zero.
    fn im2col(&self, x: &[f64], g: usize, col: &mut [f64]) {
        let (oh, ow) = self.out_hw();
        let cin_g = self.in_channels / self.groups;
        let (h, w) = (self.height as isize, self.width as isize);
        let p = self.padding as isize;
        col.iter_mut().for_each(|v| *v = 0.0);
        for cl in 0..cin_g {
            let plane = &x[(g * cin_g + cl) * self.height * self.width..][..self.height * self.width];
            for kh in 0..self.kernel_h {
                for kw in 0..self.kernel_w {
                    let row = ((cl * self.kernel_h + kh) * self.kernel_w + kw) * oh * ow;
                    for y in 0..oh {
                        let iy = (y * self.stride + kh) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..][..self.width];
                        let dst = &mut col[row + y * ow..][..ow];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            let ix = (xo * self.stride + kw) as isize - p;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back into the image.
    fn col2im(&self, col: &[f64], g: usize, x: &mut [f64]) {
        let (oh, ow) = self.out_hw();
        let cin_g = self.in_channels / self.groups;
        let (h, w) = (self.height as isize, self.width as isize);
        let p = self.padding as isize;
        for cl in 0..cin_g {
            let plane = &mut x[(g * cin_g + cl) * self.height * self.width..][..self.height * self.width];
            for kh in 0..self.kernel_h {
                for kw in 0..self.kernel_w {
                    let row = ((cl * self.kernel_h + kh) * self.kernel_w + kw) * oh * ow;
                    for y in 0..oh {
                        let iy = (y * self.stride + kh) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..][..self.width];
                        let src = &col[row + y * ow..][..ow];
                        for (xo, v) in src.iter().enumerate() {
                            let ix = (xo * self.stride + kw) as isize - p;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// (input size, output size, column rows, output pixels) per image.
    fn dims(&self) -> (usize, usize, usize, usize) {
        let (oh, ow) = self.out_hw();
        let rows = self.in_channels / self.groups * self.kernel_h * self.kernel_w;
        (self.in_channels * self.height * self.width, self.out_channels * oh * ow, rows, oh * ow)
    }

    pub fn forward(&self, input: &[f64], weight: &[f64], out: &mut [f64]) {
        let (isz, osz, rows, px) = self.dims();
        let cout_g = self.out_channels / self.groups;
        out.par_chunks_mut(osz).zip(input.par_chunks(isz)).for_each(|(o, x)| {
            let mut col = vec![0.0; rows * px];
            for g in 0..self.groups {
                self.im2col(x, g, &mut col);
                let w = &weight[g * cout_g * rows..][..cout_g * rows];
                gemm_acc(w, &col, &mut o[g * cout_g * px..][..cout_g * px], cout_g, rows, px, false, false);
            }
        });
    }

    pub fn backward_input(&self, grad_out: &[f64], weight: &[f64], grad_in: &mut [f64]) {
        let (isz, osz, rows, px) = self.dims();
        let cout_g = self.out_channels / self.groups;
        grad_in.par_chunks_mut(isz).zip(grad_out.par_chunks(osz)).for_each(|(gi, go)| {
            let mut col = vec![0.0; rows * px];
            for g in 0..self.groups {
                col.iter_mut().for_each(|v| *v = 0.0);
                let w = &weight[g * cout_g * rows..][..cout_g * rows];
                gemm_acc(w, &go[g * cout_g * px..][..cout_g * px], &mut col, rows, cout_g, px, true, false);
                self.col2im(&col, g, gi);
            }
        });
    }

    pub fn backward_weight(&self, grad_out: &[f64], input: &[f64], grad_w: &mut [f64]) {
        let (isz, osz, rows, px) = self.dims();
        let cout_g = self.out_channels / self.groups;
        let wlen = grad_w.len();
        let partial = grad_out
            .par_chunks(osz)
            .zip(input.par_chunks(isz))
            .map(|(go, x)| {
                let mut gw = vec![0.0; wlen];
                let mut col = vec![0.0; rows * px];
                for g in 0..self.groups {
                    self.im2col(x, g, &mut col);
                    for co in 0..cout_g {
                        let grow = &go[(g * cout_g + co) * px..][..px];
                        for (r, c) in col.chunks_exact(px).enumerate() {
                            gw[(g * cout_g + co) * rows + r] += grow.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                gw
            })
            .collect::<Vec<_>>();
        for gw in partial {
            for (a, b) in grad_w.iter_mut().zip(gw) {
                *a += b;
            }
        }
    }
}
