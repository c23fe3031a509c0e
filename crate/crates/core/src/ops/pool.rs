use super::conv::conv_out_extent;
use crate::autograd::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

fn pooled_dims(op: &'static str, d: Dims, kernel: usize, stride: usize, pad: usize) -> Result<Dims> {
    if kernel == 0 || pad >= kernel {
        return Err(Error::shape(op, format!("kernel {kernel} with pad {pad}")));
    }
    match (
        conv_out_extent(d.height, kernel, stride, pad),
        conv_out_extent(d.width, kernel, stride, pad),
    ) {
        (Some(h), Some(w)) => Ok(Dims::new(d.rows, h, w, d.channels)),
        _ => Err(Error::shape(
            op,
            format!("kernel {kernel} stride {stride} pad {pad} does not fit input {d}"),
        )),
    }
}

struct MaxPoolOp {
    input: Dims,
    argmax: Vec<u32>,
}

impl BackwardOp for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let mut dx = Tensor4::zeros(self.input);
        let in_row = self.input.row_len();
        let out_row = grad_out.dims().row_len();
        let d = dx.data_mut();
        for (i, (&g, &src)) in grad_out.data().iter().zip(&self.argmax).enumerate() {
            let r = i / out_row;
            d[r * in_row + src as usize] += g;
        }
        Ok(vec![Some(dx)])
    }
}

/// Max pooling with implicit `-inf` padding. Ties route to the first maximum.
pub fn maxpool(g: &mut Graph, x: &Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
    let d = x.dims();
    let od = pooled_dims("maxpool", d, kernel, stride, pad)?;
    let xs = x.value().data();
    let mut out = Vec::with_capacity(od.len());
    let mut argmax = Vec::with_capacity(od.len());
    for r in 0..d.rows {
        for oh in 0..od.height {
            for ow in 0..od.width {
                for c in 0..d.channels {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    let mut found = false;
                    for ki in 0..kernel {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih as usize >= d.height {
                            continue;
                        }
                        for kj in 0..kernel {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw as usize >= d.width {
                                continue;
                            }
                            let local = (ih as usize * d.width + iw as usize) * d.channels + c;
                            let v = xs[r * d.row_len() + local];
                            if !found || v > best {
                                best = v;
                                best_at = local;
                                found = true;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at as u32);
                }
            }
        }
    }
    let out = Tensor4::from_vec(od, out)?;
    crate::gradcheck::note_pattern(|| argmax.iter().map(|&a| a as u64));
    g.record(&[x], out, MaxPoolOp { input: d, argmax })
}

struct AvgPoolOp {
    input: Dims,
    kernel: usize,
    stride: usize,
}

impl BackwardOp for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avgpool"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let d = self.input;
        let od = grad_out.dims();
        let norm = 1.0 / (self.kernel * self.kernel) as f32;
        let mut dx = Tensor4::zeros(d);
        for r in 0..d.rows {
            for oh in 0..od.height {
                for ow in 0..od.width {
                    for c in 0..d.channels {
                        let gv = grad_out.at(r, oh, ow, c) * norm;
                        for ki in 0..self.kernel {
                            for kj in 0..self.kernel {
                                let (ih, iw) = (oh * self.stride + ki, ow * self.stride + kj);
                                let i = d.offset(r, ih, iw, c);
                                dx.data_mut()[i] += gv;
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Average pooling without padding.
pub fn avgpool(g: &mut Graph, x: &Var, kernel: usize, stride: usize) -> Result<Var> {
    let d = x.dims();
    let od = pooled_dims("avgpool", d, kernel, stride, 0)?;
    let xv = x.value();
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(od.len());
    for r in 0..d.rows {
        for oh in 0..od.height {
            for ow in 0..od.width {
                for c in 0..d.channels {
                    let mut acc = 0.0f64;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc += xv.at(r, oh * stride + ki, ow * stride + kj, c) as f64;
                        }
                    }
                    out.push((acc * norm) as f32);
                }
            }
        }
    }
    let out = Tensor4::from_vec(od, out)?;
    g.record(
        &[x],
        out,
        AvgPoolOp {
            input: d,
            kernel,
            stride,
        },
    )
}

struct GlobalAvgPoolOp {
    input: Dims,
}

impl BackwardOp for GlobalAvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avgpool"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let d = self.input;
        let norm = 1.0 / d.pixels() as f32;
        let mut dx = Vec::with_capacity(d.len());
        for r in 0..d.rows {
            let gr = grad_out.row(r);
            for _ in 0..d.pixels() {
                dx.extend(gr.iter().map(|v| v * norm));
            }
        }
        Ok(vec![Some(Tensor4::from_vec(d, dx)?)])
    }
}

/// Mean over height and width, giving `B×1×1×C`.
///
/// Each image row is summed as mirrored pairs `x[w] + x[W−1−w]`, so the
/// result is bit-identical for a horizontally flipped input.
pub fn global_avgpool(g: &mut Graph, x: &Var) -> Result<Var> {
    let d = x.dims();
    if d.pixels() == 0 {
        return Err(Error::shape("global_avgpool", format!("empty spatial extent {d}")));
    }
    let xv = x.value();
    let norm = 1.0 / d.pixels() as f64;
    let mut out = Vec::with_capacity(d.rows * d.channels);
    let mut acc = vec![0.0f64; d.channels];
    for r in 0..d.rows {
        acc.fill(0.0);
        for h in 0..d.height {
            for w in 0..d.width / 2 {
                let m = d.width - 1 - w;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += xv.at(r, h, w, c) as f64 + xv.at(r, h, m, c) as f64;
                }
            }
            if d.width % 2 == 1 {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += xv.at(r, h, d.width / 2, c) as f64;
                }
            }
        }
        out.extend(acc.iter().map(|a| (a * norm) as f32));
    }
    let out = Tensor4::from_vec(Dims::new(d.rows, 1, 1, d.channels), out)?;
    g.record(&[x], out, GlobalAvgPoolOp { input: d })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(d: Dims, v: Vec<f32>) -> Var {
        Var::constant(Tensor4::from_vec(d, v).unwrap())
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut g = Graph::no_grad();
        let x = t(
            Dims::new(1, 4, 4, 1),
            (0..16).map(|v| ((v * 7) % 16) as f32).collect(),
        );
        let y = maxpool(&mut g, &x, 2, 2, 0).unwrap();
        // rows: [0,7,14,5] [12,3,10,1] [8,15,6,13] [4,11,2,9]
        assert_eq!(y.value().data(), &[12.0, 14.0, 15.0, 13.0]);
    }

    #[test]
    fn maxpool_padded_dims() {
        let mut g = Graph::no_grad();
        let x = Var::constant(Tensor4::zeros(Dims::new(2, 8, 8, 3)));
        let y = maxpool(&mut g, &x, 3, 2, 1).unwrap();
        assert_eq!(y.dims(), Dims::new(2, 4, 4, 3));
    }

    #[test]
    fn avgpool_means() {
        let mut g = Graph::no_grad();
        let x = t(Dims::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 6.0]);
        let y = avgpool(&mut g, &x, 2, 2).unwrap();
        assert_eq!(y.value().data(), &[3.0]);
    }

    #[test]
    fn gap_is_flip_exact() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::no_grad();
        for w in [1usize, 4, 5] {
            let x = Tensor4::randn(Dims::new(2, 3, w, 4), 10.0, &mut rng);
            let mut flipped = x.clone();
            for r in 0..2 {
                for h in 0..3 {
                    for ww in 0..w {
                        for c in 0..4 {
                            flipped.set(r, h, ww, c, x.at(r, h, w - 1 - ww, c));
                        }
                    }
                }
            }
            let a = global_avgpool(&mut g, &Var::constant(x)).unwrap();
            let b = global_avgpool(&mut g, &Var::constant(flipped)).unwrap();
            assert_eq!(a.value(), b.value());
        }
    }
}
