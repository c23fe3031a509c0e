use std::sync::Arc;

use super::gemm::{gemm, Mat};
use crate::autograd::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

struct LinearOp {
    x: Arc<Tensor4>,
    w: Arc<Tensor4>,
    has_bias: bool,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

impl BackwardOp for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, grad_out: &Tensor4, needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let rows = self.x.dims().rows;
        let fin = self.w.dims().width;
        let fout = self.w.dims().channels;
        let dy = to_f64(grad_out.data());
        let mut grads = Vec::with_capacity(3);
        grads.push(if needs[0] {
            let w = to_f64(self.w.data());
            let mut dx = vec![0.0; rows * fin];
            gemm(Mat::new(&dy, rows, fout), Mat::new(&w, fin, fout).t(), 0.0, &mut dx);
            Some(Tensor4::from_vec(self.x.dims(), to_f32(dx))?)
        } else {
            None
        });
        grads.push(if needs[1] {
            let x = to_f64(self.x.data());
            let mut dw = vec![0.0; fin * fout];
            gemm(Mat::new(&x, rows, fin).t(), Mat::new(&dy, rows, fout), 0.0, &mut dw);
            Some(Tensor4::from_vec(self.w.dims(), to_f32(dw))?)
        } else {
            None
        });
        if self.has_bias {
            grads.push(if needs[2] {
                let mut db = vec![0.0f64; fout];
                for row in dy.chunks(fout) {
                    for (a, v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Some(Tensor4::from_vec(Dims::new(1, 1, 1, fout), to_f32(db))?)
            } else {
                None
            });
        }
        Ok(grads)
    }
}

/// Fully connected layer over each row flattened to `H·W·C` features.
/// `w` is `1×1×in×out`, the optional `b` is `1×1×1×out`.
pub fn linear(g: &mut Graph, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
    let xd = x.dims();
    let wd = w.dims();
    let (fin, fout) = (wd.width, wd.channels);
    if wd.rows != 1 || wd.height != 1 || xd.row_len() != fin {
        return Err(Error::shape(
            "linear",
            format!("input {xd} ({} features) vs weight {wd}", xd.row_len()),
        ));
    }
    if let Some(b) = b {
        if b.value().len() != fout {
            return Err(Error::shape(
                "linear",
                format!("bias {} for {fout} outputs", b.dims()),
            ));
        }
    }
    let xs = to_f64(x.value().data());
    let ws = to_f64(w.value().data());
    let mut y = vec![0.0f64; xd.rows * fout];
    if let Some(b) = b {
        for row in y.chunks_mut(fout) {
            for (o, bv) in row.iter_mut().zip(b.value().data()) {
                *o = *bv as f64;
            }
        }
    }
    gemm(Mat::new(&xs, xd.rows, fin), Mat::new(&ws, fin, fout), 1.0, &mut y);
    let out = Tensor4::from_vec(Dims::new(xd.rows, 1, 1, fout), to_f32(y))?;
    let op = LinearOp {
        x: x.shared(),
        w: w.shared(),
        has_bias: b.is_some(),
    };
    match b {
        Some(b) => g.record(&[x, w, b], out, op),
        None => g.record(&[x, w], out, op),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map() {
        let mut g = Graph::no_grad();
        let x = Var::constant(Tensor4::from_vec(Dims::new(2, 1, 1, 2), vec![1., 2., 3., 4.]).unwrap());
        let w = Var::constant(
            Tensor4::from_vec(Dims::new(1, 1, 2, 3), vec![1., 0., 1., 0., 1., 1.]).unwrap(),
        );
        let b = Var::constant(Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![0.5, 0., -1.]).unwrap());
        let y = linear(&mut g, &x, &w, Some(&b)).unwrap();
        assert_eq!(y.dims(), Dims::new(2, 1, 1, 3));
        assert_eq!(y.value().data(), &[1.5, 2., 2., 3.5, 4., 6.]);
    }

    #[test]
    fn feature_mismatch() {
        let mut g = Graph::no_grad();
        let x = Var::constant(Tensor4::zeros(Dims::new(2, 2, 2, 1)));
        let w = Var::constant(Tensor4::zeros(Dims::new(1, 1, 3, 2)));
        assert!(linear(&mut g, &x, &w, None).is_err());
    }
}
