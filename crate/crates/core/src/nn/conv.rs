//! 2-D convolution via per-sample im2col and a matrix product.

use ndarray::{Array2, Array4, ArrayView2, Axis};

use super::{Param, Tensor};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn same3(ch: usize) -> Self {
        ConvGeom { in_ch: ch, out_ch: ch, kernel: 3, stride: 1, pad: 1 }
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

fn im2col(x: &[f64], h: usize, w: usize, g: ConvGeom) -> Array2<f64> {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let mut cols = Array2::zeros((g.patch_len(), ho * wo));
    let buf = cols.as_slice_mut().unwrap();
    for c in 0..g.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut buf[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, h: usize, w: usize, g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let mut x = vec![0.0; g.in_ch * h * w];
    let buf = cols.as_slice().unwrap();
    for c in 0..g.in_ch {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &buf[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn forward(x: &Tensor, weight: &Param, bias: &Param, g: ConvGeom, exec: Exec) -> Tensor {
    let (n, _, h, w) = x.dim();
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let wmat = ArrayView2::from_shape((g.out_ch, g.patch_len()), &weight.value).unwrap();
    let per = g.in_ch * h * w;
    let outs = exec.map_range(n, |b| {
        let cols = im2col(&xs[b * per..(b + 1) * per], h, w, g);
        let mut y = wmat.dot(&cols);
        for (mut row, bv) in y.axis_iter_mut(Axis(0)).zip(&bias.value) {
            row += *bv;
        }
        y
    });
    let mut out = Array4::zeros((n, g.out_ch, ho, wo));
    for (b, y) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), b).assign(&y.into_shape_with_order((g.out_ch, ho, wo)).unwrap());
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn backward(x: &Tensor, grad: &Tensor, weight: &mut Param, bias: &mut Param, g: ConvGeom, exec: Exec) -> Tensor {
    let (n, _, h, w) = x.dim();
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let x = x.as_standard_layout();
    let grad = grad.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let gs = grad.as_slice().unwrap();
    let wmat = ArrayView2::from_shape((g.out_ch, g.patch_len()), &weight.value).unwrap();
    let per_in = g.in_ch * h * w;
    let per_out = g.out_ch * ho * wo;
    let parts = exec.map_range(n, |b| {
        let cols = im2col(&xs[b * per_in..(b + 1) * per_in], h, w, g);
        let gy = ArrayView2::from_shape((g.out_ch, ho * wo), &gs[b * per_out..(b + 1) * per_out]).unwrap();
        let dw = gy.dot(&cols.t());
        let db = gy.sum_axis(Axis(1));
        let dcols = wmat.t().dot(&gy);
        (col2im(&dcols.as_standard_layout().to_owned(), h, w, g), dw, db)
    });
    let mut dx = Array4::zeros((n, g.in_ch, h, w));
    for (b, (dxb, dw, db)) in parts.into_iter().enumerate() {
        for (acc, v) in weight.grad.iter_mut().zip(dw.iter()) {
            *acc += v;
        }
        for (acc, v) in bias.grad.iter_mut().zip(db.iter()) {
            *acc += v;
        }
        dx.index_axis_mut(Axis(0), b)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&dxb);
    }
    dx
}
