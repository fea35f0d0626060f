//! Dense `NCHW` tensors and the convolution kernels used by the training graph.
//!
//! All reductions run in a fixed loop order so results are bit-reproducible.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Channel of flat index `i`.
    #[inline]
    pub fn channel_of(&self, i: usize) -> usize {
        (i / self.plane()) % self.shape[1]
    }

    /// Rows `start..start+len` along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Tensor {
        let per = self.shape[1] * self.plane();
        Tensor {
            shape: [len, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Gather samples by index along the batch axis.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let per = self.shape[1] * self.plane();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor {
            shape: [idx.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn taps(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.in_c || x.h() + 2 * self.pad < self.kh || x.w() + 2 * self.pad < self.kw {
            return Err(Error::Shape(format!(
                "conv expects {} input channels and at least {}x{} (padded), got {:?}",
                self.in_c, self.kh, self.kw, x.shape
            )));
        }
        Ok(())
    }
}

/// im2col for one sample: rows are `(ci, ky, kx)`, columns output pixels.
fn im2col(x: &[f64], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [f64]) {
    let npix = oh * ow;
    for ci in 0..g.in_c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [f64]) {
    let npix = oh * ow;
    for ci in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[ci * h * w + iy as usize * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// `out = weights (out_c x taps) * input`, batched over samples.
pub fn conv2d_forward(x: &Tensor, weights: &[f64], g: &ConvGeom) -> Result<Tensor> {
    g.check_input(x)?;
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = g.out_hw(h, w);
    let npix = oh * ow;
    let taps = g.taps();
    let mut out = Tensor::zeros([x.n(), g.out_c, oh, ow]);
    let mut cols = vec![0.0; taps * npix];
    let in_per = g.in_c * h * w;
    let out_per = g.out_c * npix;
    for n in 0..x.n() {
        im2col(&x.data[n * in_per..(n + 1) * in_per], h, w, g, oh, ow, &mut cols);
        let dst = &mut out.data[n * out_per..(n + 1) * out_per];
        for o in 0..g.out_c {
            let orow = &mut dst[o * npix..(o + 1) * npix];
            let wrow = &weights[o * taps..(o + 1) * taps];
            for (k, &wk) in wrow.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let crow = &cols[k * npix..(k + 1) * npix];
                for (a, &b) in orow.iter_mut().zip(crow) {
                    *a += wk * b;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(d input, d weights)`.
pub fn conv2d_backward(
    x: &Tensor,
    weights: &[f64],
    g: &ConvGeom,
    dy: &Tensor,
) -> (Tensor, Vec<f64>) {
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = g.out_hw(h, w);
    let npix = oh * ow;
    let taps = g.taps();
    let mut dx = Tensor::zeros(x.shape);
    let mut dw = vec![0.0; g.out_c * taps];
    let mut cols = vec![0.0; taps * npix];
    let mut dcols = vec![0.0; taps * npix];
    let in_per = g.in_c * h * w;
    let out_per = g.out_c * npix;
    for n in 0..x.n() {
        im2col(&x.data[n * in_per..(n + 1) * in_per], h, w, g, oh, ow, &mut cols);
        let dys = &dy.data[n * out_per..(n + 1) * out_per];
        dcols.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..g.out_c {
            let drow = &dys[o * npix..(o + 1) * npix];
            let wrow = &weights[o * taps..(o + 1) * taps];
            let dwrow = &mut dw[o * taps..(o + 1) * taps];
            for k in 0..taps {
                let crow = &cols[k * npix..(k + 1) * npix];
                let mut acc = 0.0;
                for (a, b) in drow.iter().zip(crow) {
                    acc += a * b;
                }
                dwrow[k] += acc;
                let wk = wrow[k];
                if wk != 0.0 {
                    let dc = &mut dcols[k * npix..(k + 1) * npix];
                    for (a, &b) in dc.iter_mut().zip(drow) {
                        *a += wk * b;
                    }
                }
            }
        }
        col2im(&dcols, h, w, g, oh, ow, &mut dx.data[n * in_per..(n + 1) * in_per]);
    }
    (dx, dw)
}

/// Window max-pool (`k x k`, stride `k`) or global max-pool when `k` is `None`.
/// Returns the output and the flat input index of each selected maximum;
/// ties go to the first element in row-major order.
pub fn maxpool_forward(x: &Tensor, k: Option<usize>) -> Result<(Tensor, Vec<u32>)> {
    let (h, w) = (x.h(), x.w());
    let (kh, kw) = match k {
        Some(k) => (k, k),
        None => (h, w),
    };
    if kh == 0 || h % kh != 0 || w % kw != 0 {
        return Err(Error::Shape(format!(
            "max-pool window {kh}x{kw} does not tile {h}x{w}"
        )));
    }
    let (oh, ow) = (h / kh, w / kw);
    let mut out = Tensor::zeros([x.n(), x.c(), oh, ow]);
    let mut arg = vec![0u32; out.numel()];
    for nc in 0..x.n() * x.c() {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = base + (oy * kh + ky) * w + ox * kw + kx;
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                let o = nc * oh * ow + oy * ow + ox;
                out.data[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_backward(in_shape: [usize; 4], arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    for (o, &i) in arg.iter().enumerate() {
        dx.data[i as usize] += dy.data[o];
    }
    dx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_forward(x: &Tensor) -> Tensor {
    let (h, w) = (x.h(), x.w());
    let mut out = Tensor::zeros([x.n(), x.c(), 2 * h, 2 * w]);
    for nc in 0..x.n() * x.c() {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.data[nc * 4 * h * w + y * 2 * w + xx] = x.data[nc * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_backward(in_shape: [usize; 4], dy: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    for nc in 0..in_shape[0] * in_shape[1] {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dx.data[nc * h * w + (y / 2) * w + xx / 2] += dy.data[nc * 4 * h * w + y * 2 * w + xx];
            }
        }
    }
    dx
}
