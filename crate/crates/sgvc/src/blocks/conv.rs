//! 2-D convolutions over (H, W, C) maps, plus their transposed variants.
//!
//! Forward passes lower to an im2col gather followed by one matrix product;
//! backward passes reuse the same gather so the adjoint is exact. Weights are
//! stored as (k, k, c_in, c_out).

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;

fn lecun_uniform<R: Rng>(rng: &mut R, fan_in: usize) -> impl FnMut() -> f32 + '_ {
    let bound = (3.0 / fan_in as f64).sqrt() as f32;
    move || rng.gen_range(-bound..bound)
}

fn weight_mat(w: &Array4<f32>) -> ArrayView2<'_, f32> {
    let (k0, k1, ci, co) = w.dim();
    ArrayView2::from_shape((k0 * k1 * ci, co), w.as_slice().expect("contiguous weight")).unwrap()
}

fn rows_mat(x: &Array3<f32>) -> Array2<f32> {
    let (h, w, c) = x.dim();
    let std = x.as_standard_layout();
    let (v, _) = std.into_owned().into_raw_vec_and_offset();
    Array2::from_shape_vec((h * w, c), v).unwrap()
}

fn to_map(m: Array2<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = m.dim().1;
    let (v, _) = m.into_raw_vec_and_offset();
    Array3::from_shape_vec((h, w, c), v).unwrap()
}

/// Convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn zeros(k: usize, c_in: usize, c_out: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((k, k, c_in, c_out)),
            bias: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn init<R: Rng>(
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut gen = lecun_uniform(rng, k * k * c_in);
        Conv2d {
            weight: Array4::from_shape_simple_fn((k, k, c_in, c_out), &mut gen),
            bias: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().0
    }
    pub fn c_in(&self) -> usize {
        self.weight.dim().2
    }
    pub fn c_out(&self) -> usize {
        self.weight.dim().3
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let (h, w, c) = x.dim();
        if c != self.c_in() {
            return Err(Error::config(format!(
                "conv expects {} input channels, got {c}",
                self.c_in()
            )));
        }
        let k = self.kernel();
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(Error::config(format!(
                "input {h}x{w} too small for kernel {k} with pad {}",
                self.pad
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        self.check_input(x)?;
        let (h, w, _) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.kernel(), self.stride, self.pad, oh, ow);
        let mut y = cols.dot(&weight_mat(&self.weight));
        y += &self.bias.view().insert_axis(Axis(0));
        Ok(to_map(y, oh, ow))
    }

    /// Returns the input gradient; weight/bias gradients accumulate into `g`.
    pub fn backward(&self, x: &Array3<f32>, gy: &Array3<f32>, g: &mut Conv2d) -> Array3<f32> {
        let (h, w, c) = x.dim();
        let (oh, ow, _) = gy.dim();
        let k = self.kernel();
        let cols = im2col(x, k, self.stride, self.pad, oh, ow);
        let gy2 = rows_mat(gy);
        g.bias += &gy2.sum_axis(Axis(0));
        let gw = cols.t().dot(&gy2);
        let gw4 = gw.into_shape_with_order((k, k, c, self.c_out())).unwrap();
        g.weight += &gw4;
        let gcols = gy2.dot(&weight_mat(&self.weight).t());
        col2im(&gcols, h, w, c, k, self.stride, self.pad, oh, ow)
    }
}

/// Transposed convolution (fractional stride upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    pub fn zeros(
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        ConvTranspose2d {
            weight: Array4::zeros((k, k, c_in, c_out)),
            bias: Array1::zeros(c_out),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn init<R: Rng>(
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut R,
    ) -> Self {
        // fan-in of the equivalent forward conv: k*k*c_in / stride^2
        let fan = (k * k * c_in / (stride * stride)).max(1);
        let mut gen = lecun_uniform(rng, fan);
        ConvTranspose2d {
            weight: Array4::from_shape_simple_fn((k, k, c_in, c_out), &mut gen),
            bias: Array1::zeros(c_out),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().0
    }
    pub fn c_in(&self) -> usize {
        self.weight.dim().2
    }
    pub fn c_out(&self) -> usize {
        self.weight.dim().3
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            self.stride * (h - 1) + k - 2 * self.pad + self.out_pad,
            self.stride * (w - 1) + k - 2 * self.pad + self.out_pad,
        )
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        let (h, w, c) = x.dim();
        if c != self.c_in() {
            return Err(Error::config(format!(
                "transposed conv expects {} input channels, got {c}",
                self.c_in()
            )));
        }
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col_t(x, self.kernel(), self.stride, self.pad, oh, ow);
        let mut y = cols.dot(&weight_mat(&self.weight));
        y += &self.bias.view().insert_axis(Axis(0));
        Ok(to_map(y, oh, ow))
    }

    pub fn backward(
        &self,
        x: &Array3<f32>,
        gy: &Array3<f32>,
        g: &mut ConvTranspose2d,
    ) -> Array3<f32> {
        let (h, w, c) = x.dim();
        let (oh, ow, _) = gy.dim();
        let k = self.kernel();
        let cols = im2col_t(x, k, self.stride, self.pad, oh, ow);
        let gy2 = rows_mat(gy);
        g.bias += &gy2.sum_axis(Axis(0));
        let gw = cols.t().dot(&gy2);
        let gw4 = gw.into_shape_with_order((k, k, c, self.c_out())).unwrap();
        g.weight += &gw4;
        let gcols = gy2.dot(&weight_mat(&self.weight).t());
        col2im_t(&gcols, h, w, c, k, self.stride, self.pad, oh, ow)
    }
}

fn im2col(x: &Array3<f32>, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w, c) = x.dim();
    let mut cols = Array2::<f32>::zeros((oh * ow, k * k * c));
    let xstd = x.as_standard_layout();
    let xs = xstd.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    for oy in 0..oh {
        for ox in 0..ow {
            let rbase = (oy * ow + ox) * k * k * c;
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = rbase + (ky * k + kx) * c;
                    let src = (iy as usize * w + ix as usize) * c;
                    cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f32>,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut gx = Array3::<f32>::zeros((h, w, c));
    let gs = gx.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    for oy in 0..oh {
        for ox in 0..ow {
            let rbase = (oy * ow + ox) * k * k * c;
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = rbase + (ky * k + kx) * c;
                    let dst = (iy as usize * w + ix as usize) * c;
                    for ci in 0..c {
                        gs[dst + ci] += cs[src + ci];
                    }
                }
            }
        }
    }
    gx
}

fn im2col_t(x: &Array3<f32>, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w, c) = x.dim();
    let mut cols = Array2::<f32>::zeros((oh * ow, k * k * c));
    let xstd = x.as_standard_layout();
    let xs = xstd.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    for oy in 0..oh {
        for ox in 0..ow {
            let rbase = (oy * ow + ox) * k * k * c;
            for ky in 0..k {
                let ny = oy as isize + p as isize - ky as isize;
                if ny < 0 || ny % s as isize != 0 {
                    continue;
                }
                let iy = (ny / s as isize) as usize;
                if iy >= h {
                    continue;
                }
                for kx in 0..k {
                    let nx = ox as isize + p as isize - kx as isize;
                    if nx < 0 || nx % s as isize != 0 {
                        continue;
                    }
                    let ix = (nx / s as isize) as usize;
                    if ix >= w {
                        continue;
                    }
                    let dst = rbase + (ky * k + kx) * c;
                    let src = (iy * w + ix) * c;
                    cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_t(
    cols: &Array2<f32>,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut gx = Array3::<f32>::zeros((h, w, c));
    let gs = gx.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    for oy in 0..oh {
        for ox in 0..ow {
            let rbase = (oy * ow + ox) * k * k * c;
            for ky in 0..k {
                let ny = oy as isize + p as isize - ky as isize;
                if ny < 0 || ny % s as isize != 0 {
                    continue;
                }
                let iy = (ny / s as isize) as usize;
                if iy >= h {
                    continue;
                }
                for kx in 0..k {
                    let nx = ox as isize + p as isize - kx as isize;
                    if nx < 0 || nx % s as isize != 0 {
                        continue;
                    }
                    let ix = (nx / s as isize) as usize;
                    if ix >= w {
                        continue;
                    }
                    let src = rbase + (ky * k + kx) * c;
                    let dst = (iy * w + ix) * c;
                    for ci in 0..c {
                        gs[dst + ci] += cs[src + ci];
                    }
                }
            }
        }
    }
    gx
}
