//! 2-D cross-correlation over NHWC tensors via im2col + GEMM.
//!
//! Weights are stored as `kh × kw × cin × cout`. Inner products accumulate in
//! f64. Work is split into fixed-size chunks of whole samples so results do
//! not depend on the number of worker threads.

use std::sync::Arc;

use rayon::prelude::*;

use super::gemm::{gemm, Mat};
use crate::autograd::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Output pixels per GEMM chunk (rounded to whole samples).
const CHUNK_PIXELS: usize = 1024;

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    (input + 2 * pad)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: Dims,
    pub output: Dims,
}

impl ConvGeom {
    pub fn new(input: Dims, weight: Dims, stride: usize, pad: usize) -> Result<Self> {
        let (kh, kw, cin, cout) = (weight.rows, weight.height, weight.width, weight.channels);
        if input.channels != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {input} has {} channels, weight {weight} expects {cin}",
                    input.channels
                ),
            ));
        }
        let oh = conv_out_extent(input.height, kh, stride, pad);
        let ow = conv_out_extent(input.width, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {input}"),
            ));
        };
        Ok(ConvGeom {
            kh,
            kw,
            cin,
            cout,
            stride,
            pad,
            input,
            output: Dims::new(input.rows, oh, ow, cout),
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn samples_per_chunk(&self) -> usize {
        (CHUNK_PIXELS / self.output.pixels().max(1)).max(1)
    }

    /// Fills `cols` (`nrows·OH·OW × K`) with patches of samples starting at `row0`.
    fn im2col(&self, x: &[f32], row0: usize, nrows: usize, cols: &mut [f64]) {
        let k = self.patch_len();
        let (oh_n, ow_n) = (self.output.height, self.output.width);
        let row_len = self.input.row_len();
        for r in 0..nrows {
            let sample = &x[(row0 + r) * row_len..(row0 + r + 1) * row_len];
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let m = (r * oh_n + oh) * ow_n + ow;
                    let patch = &mut cols[m * k..(m + 1) * k];
                    for ki in 0..self.kh {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        for kj in 0..self.kw {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            let dst = &mut patch[(ki * self.kw + kj) * self.cin..][..self.cin];
                            if ih < 0
                                || iw < 0
                                || ih as usize >= self.input.height
                                || iw as usize >= self.input.width
                            {
                                dst.fill(0.0);
                            } else {
                                let off = (ih as usize * self.input.width + iw as usize)
                                    * self.cin;
                                for (d, s) in dst.iter_mut().zip(&sample[off..off + self.cin]) {
                                    *d = *s as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patch gradients back onto `dx` (the chunk's input rows).
    fn col2im(&self, cols: &[f64], nrows: usize, dx: &mut [f64]) {
        let k = self.patch_len();
        let (oh_n, ow_n) = (self.output.height, self.output.width);
        let row_len = self.input.row_len();
        for r in 0..nrows {
            let sample = &mut dx[r * row_len..(r + 1) * row_len];
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let m = (r * oh_n + oh) * ow_n + ow;
                    let patch = &cols[m * k..(m + 1) * k];
                    for ki in 0..self.kh {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.input.height {
                            continue;
                        }
                        for kj in 0..self.kw {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw < 0 || iw as usize >= self.input.width {
                                continue;
                            }
                            let src = &patch[(ki * self.kw + kj) * self.cin..][..self.cin];
                            let off = (ih as usize * self.input.width + iw as usize) * self.cin;
                            for (d, s) in sample[off..off + self.cin].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn check_bias(b: Option<&Tensor4>, cout: usize) -> Result<()> {
    if let Some(b) = b {
        if b.len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias {} for {cout} output channels", b.dims()),
            ));
        }
    }
    Ok(())
}

/// Forward convolution without graph bookkeeping.
pub fn conv2d_forward(
    x: &Tensor4,
    w: &Tensor4,
    b: Option<&Tensor4>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    let geom = ConvGeom::new(x.dims(), w.dims(), stride, pad)?;
    check_bias(b, geom.cout)?;
    let w64 = to_f64(w.data());
    let k = geom.patch_len();
    let cout = geom.cout;
    let out_row = geom.output.row_len();
    let spc = geom.samples_per_chunk();
    let mut out = Tensor4::zeros(geom.output);
    if out.is_empty() {
        return Ok(out);
    }
    let xs = x.data();
    out.data_mut()
        .par_chunks_mut(spc * out_row)
        .enumerate()
        .for_each(|(ci, out_chunk)| {
            let nrows = out_chunk.len() / out_row;
            let m = nrows * geom.output.pixels();
            let mut cols = vec![0.0f64; m * k];
            geom.im2col(xs, ci * spc, nrows, &mut cols);
            let mut c = vec![0.0f64; m * cout];
            gemm(Mat::new(&cols, m, k), Mat::new(&w64, k, cout), 0.0, &mut c);
            match b {
                Some(b) => {
                    for (px, o) in c.chunks(cout).zip(out_chunk.chunks_mut(cout)) {
                        for ((o, v), bias) in o.iter_mut().zip(px).zip(b.data()) {
                            *o = (*v + *bias as f64) as f32;
                        }
                    }
                }
                None => {
                    for (o, v) in out_chunk.iter_mut().zip(&c) {
                        *o = *v as f32;
                    }
                }
            }
        });
    Ok(out)
}

struct Conv2dOp {
    x: Arc<Tensor4>,
    w: Arc<Tensor4>,
    has_bias: bool,
    geom: ConvGeom,
}

impl BackwardOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, grad_out: &Tensor4, needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let geom = self.geom;
        let (need_x, need_w) = (needs[0], needs[1]);
        let need_b = self.has_bias && needs[2];
        let k = geom.patch_len();
        let cout = geom.cout;
        let out_row = geom.output.row_len();
        let in_row = geom.input.row_len();
        let spc = geom.samples_per_chunk();
        let w64 = to_f64(self.w.data());
        let dy = grad_out.data();
        let xs = self.x.data();

        // Per-chunk work: partial weight gradient, and input gradient written in place.
        let process = |ci: usize, dx_chunk: Option<&mut [f32]>| -> Option<Vec<f64>> {
            let dy_chunk = &dy[ci * spc * out_row..((ci + 1) * spc * out_row).min(dy.len())];
            let nrows = dy_chunk.len() / out_row;
            let m = nrows * geom.output.pixels();
            let dy64 = to_f64(dy_chunk);
            let partial = need_w.then(|| {
                let mut cols = vec![0.0f64; m * k];
                geom.im2col(xs, ci * spc, nrows, &mut cols);
                let mut dw = vec![0.0f64; k * cout];
                gemm(Mat::new(&cols, m, k).t(), Mat::new(&dy64, m, cout), 0.0, &mut dw);
                dw
            });
            if let Some(dx_chunk) = dx_chunk {
                let mut dcols = vec![0.0f64; m * k];
                gemm(Mat::new(&dy64, m, cout), Mat::new(&w64, k, cout).t(), 0.0, &mut dcols);
                let mut dx64 = vec![0.0f64; nrows * in_row];
                geom.col2im(&dcols, nrows, &mut dx64);
                for (d, s) in dx_chunk.iter_mut().zip(&dx64) {
                    *d = *s as f32;
                }
            }
            partial
        };

        let mut dx = need_x.then(|| Tensor4::zeros(geom.input));
        let partials: Vec<Option<Vec<f64>>> = match dx.as_mut() {
            Some(dx) if !dx.is_empty() => dx
                .data_mut()
                .par_chunks_mut(spc * in_row)
                .enumerate()
                .map(|(ci, chunk)| process(ci, Some(chunk)))
                .collect(),
            _ => {
                let chunks = geom.input.rows.div_ceil(spc);
                (0..chunks)
                    .into_par_iter()
                    .map(|ci| process(ci, None))
                    .collect()
            }
        };

        let dw = if need_w {
            let mut acc = vec![0.0f64; k * cout];
            for p in partials.into_iter().flatten() {
                for (a, v) in acc.iter_mut().zip(&p) {
                    *a += v;
                }
            }
            Some(Tensor4::from_vec(
                self.w.dims(),
                acc.into_iter().map(|v| v as f32).collect(),
            )?)
        } else {
            None
        };

        let mut grads = vec![dx, dw];
        if self.has_bias {
            let db = need_b.then(|| {
                let mut acc = vec![0.0f64; cout];
                for px in dy.chunks(cout) {
                    for (a, v) in acc.iter_mut().zip(px) {
                        *a += *v as f64;
                    }
                }
                acc.into_iter().map(|v| v as f32).collect::<Vec<_>>()
            });
            grads.push(match db {
                Some(db) => Some(Tensor4::from_vec(Dims::new(1, 1, 1, cout), db)?),
                None => None,
            });
        }
        Ok(grads)
    }
}

/// Convolution of `x` (`B×H×W×Cin`) with `w` (`kh×kw×Cin×Cout`), zero padding.
pub fn conv2d(
    g: &mut Graph,
    x: &Var,
    w: &Var,
    b: Option<&Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let out = conv2d_forward(x.value(), w.value(), b.map(|b| b.value()), stride, pad)?;
    let geom = ConvGeom::new(x.dims(), w.dims(), stride, pad)?;
    let op = Conv2dOp {
        x: x.shared(),
        w: w.shared(),
        has_bias: b.is_some(),
        geom,
    };
    match b {
        Some(b) => g.record(&[x, w, b], out, op),
        None => g.record(&[x, w], out, op),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution.
    fn naive(x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>, stride: usize, pad: usize) -> Tensor4 {
        let (xd, wd) = (x.dims(), w.dims());
        let oh = (xd.height + 2 * pad - wd.rows) / stride + 1;
        let ow = (xd.width + 2 * pad - wd.height) / stride + 1;
        let mut out = Tensor4::zeros(Dims::new(xd.rows, oh, ow, wd.channels));
        for r in 0..xd.rows {
            for i in 0..oh {
                for j in 0..ow {
                    for co in 0..wd.channels {
                        let mut acc = b.map_or(0.0, |b| b.data()[co] as f64);
                        for ki in 0..wd.rows {
                            for kj in 0..wd.height {
                                let ih = (i * stride + ki) as isize - pad as isize;
                                let iw = (j * stride + kj) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih as usize >= xd.height || iw as usize >= xd.width {
                                    continue;
                                }
                                for ci in 0..xd.channels {
                                    acc += x.at(r, ih as usize, iw as usize, ci) as f64
                                        * w.at(ki, kj, ci, co) as f64;
                                }
                            }
                        }
                        out.set(r, i, j, co, acc as f32);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor4::full(Dims::new(1, 3, 3, 1), 1.0);
        let w = Tensor4::full(Dims::new(3, 3, 1, 1), 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 3, 3, 1));
        assert_eq!(y.at(0, 1, 1, 0), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 1, 0), 6.0);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(b, h, w, cin, cout, k, stride, pad) in &[
            (2, 7, 6, 3, 4, 3, 1, 1),
            (3, 9, 9, 2, 5, 3, 2, 1),
            (1, 8, 5, 4, 2, 1, 2, 0),
            (2, 11, 11, 3, 2, 7, 2, 3),
            (40, 4, 4, 3, 3, 3, 1, 1),
        ] {
            let x = Tensor4::randn(Dims::new(b, h, w, cin), 1.0, &mut rng);
            let wt = Tensor4::randn(Dims::new(k, k, cin, cout), 1.0, &mut rng);
            let bias = Tensor4::randn(Dims::new(1, 1, 1, cout), 1.0, &mut rng);
            let fast = conv2d_forward(&x, &wt, Some(&bias), stride, pad).unwrap();
            let slow = naive(&x, &wt, Some(&bias), stride, pad);
            assert_eq!(fast.dims(), slow.dims());
            assert!(fast.max_abs_diff(&slow) < 1e-5, "diff {}", fast.max_abs_diff(&slow));
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor4::zeros(Dims::new(1, 4, 4, 3));
        let w = Tensor4::zeros(Dims::new(3, 3, 2, 1));
        let err = conv2d_forward(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d") && err.contains("3 channels"), "{err}");
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor4::zeros(Dims::new(1, 2, 2, 1));
        let w = Tensor4::zeros(Dims::new(5, 5, 1, 1));
        assert!(conv2d_forward(&x, &w, None, 1, 0).is_err());
    }
}
