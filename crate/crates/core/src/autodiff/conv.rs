//! Dense matrix kernels and 2-d convolution via im2col.

use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `out += a·b` with a (m×k), b (k×n).
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a·bᵀ` with a (m×k), b (n×k).
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += aᵀ·b` with a (r×m), b (r×n).
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], r: usize, m: usize, n: usize) {
    for p in 0..r {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Real>(img: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut col = vec![T::zero(); g.rows() * g.cols()];
    for ch in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &img[(ch * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], g: &Conv2dGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for ch in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(ch * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d<T> {
    geom: Conv2dGeom,
    out_channels: usize,
    cols: Vec<Vec<T>>,
}

impl<T: Real> Backward<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = &self.geom;
        let (k, p, o) = (g.rows(), g.cols(), self.out_channels);
        let plane = g.channels * g.height * g.width;
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut gb = vec![T::zero(); o];
        let mut dcol = vec![T::zero(); k * p];
        for (b, col) in self.cols.iter().enumerate() {
            let dy = &grad.data()[b * o * p..(b + 1) * o * p];
            gemm_nt(dy, col, &mut gw, o, p, k);
            dcol.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(w.data(), dy, &mut dcol, o, k, p);
            col2im(&dcol, g, &mut gx[b * plane..(b + 1) * plane]);
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += dy[oc * p..(oc + 1) * p].iter().copied().sum();
            }
        }
        let mut grads = vec![
            Some(Tensor::new(x.shape(), gx)?),
            Some(Tensor::new(w.shape(), gw)?),
        ];
        if inputs.len() == 3 {
            grads.push(Some(Tensor::new(&[o], gb)?));
        }
        Ok(grads)
    }
}

impl<T: Real> Graph<T> {
    /// 2-d cross-correlation of x (B, C, H, W) with w (O, C, kh, kw), plus an
    /// optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Param("conv2d stride must be positive".into()));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {sx:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), sw[0]),
                ));
            }
        }
        let geom = Conv2dGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
        };
        let (o, k, p) = (sw[0], geom.rows(), geom.cols());
        let batch = sx[0];
        let plane = geom.channels * geom.height * geom.width;
        let mut out = vec![T::zero(); batch * o * p];
        let mut cols = Vec::with_capacity(batch);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = bias.map(|b| self.value(b).data());
            for b in 0..batch {
                let col = im2col(&xd[b * plane..(b + 1) * plane], &geom);
                let ob = &mut out[b * o * p..(b + 1) * o * p];
                if let Some(bd) = bd {
                    for (oc, chunk) in ob.chunks_mut(p).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bd[oc]);
                    }
                }
                gemm_nn(wd, &col, ob, o, k, p);
                cols.push(col);
            }
        }
        let value = Tensor::new(&[batch, o, geom.out_h(), geom.out_w()], out)?;
        let op = Conv2d {
            geom,
            out_channels: o,
            cols,
        };
        Ok(match bias {
            Some(b) => self.push(value, &[x, w, b], Box::new(op)),
            None => self.push(value, &[x, w], Box::new(op)),
        })
    }
}
