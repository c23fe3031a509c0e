//! Differentiable operations recorded on a [`Graph`].

mod conv;
mod gemm;
mod linear;
mod norm;
mod pool;

use std::sync::Arc;

pub use conv::{conv2d, conv2d_forward, conv_out_extent, ConvGeom};
pub use linear::linear;
pub use norm::{batchnorm, BatchStats, BnMode};
pub use pool::{avgpool, global_avgpool, maxpool};

use crate::autograd::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Selector for [`forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Mul,
    Scale(f32),
    Relu,
    Sum,
    Conv2d { stride: usize, pad: usize },
    MaxPool { kernel: usize, stride: usize, pad: usize },
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Linear,
    ConcatRows,
}

/// Dispatches an operation by kind. Weights and biases are passed as
/// trailing inputs (`[x, w]` or `[x, w, b]` for conv and linear).
pub fn forward_op(g: &mut Graph, op: OpKind, inputs: &[&Var]) -> Result<Var> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{op:?} takes {n} inputs, got {}",
                inputs.len()
            )))
        }
    };
    match op {
        OpKind::Add => {
            arity(2)?;
            add(g, inputs[0], inputs[1])
        }
        OpKind::Mul => {
            arity(2)?;
            mul(g, inputs[0], inputs[1])
        }
        OpKind::Scale(f) => {
            arity(1)?;
            scale(g, inputs[0], f)
        }
        OpKind::Relu => {
            arity(1)?;
            relu(g, inputs[0])
        }
        OpKind::Sum => {
            arity(1)?;
            sum(g, inputs[0])
        }
        OpKind::Conv2d { stride, pad } => match inputs {
            [x, w] => conv2d(g, x, w, None, stride, pad),
            [x, w, b] => conv2d(g, x, w, Some(b), stride, pad),
            _ => Err(Error::invalid("conv2d takes [x, w] or [x, w, b]")),
        },
        OpKind::MaxPool {
            kernel,
            stride,
            pad,
        } => {
            arity(1)?;
            maxpool(g, inputs[0], kernel, stride, pad)
        }
        OpKind::AvgPool { kernel, stride } => {
            arity(1)?;
            avgpool(g, inputs[0], kernel, stride)
        }
        OpKind::GlobalAvgPool => {
            arity(1)?;
            global_avgpool(g, inputs[0])
        }
        OpKind::Linear => match inputs {
            [x, w] => linear(g, x, w, None),
            [x, w, b] => linear(g, x, w, Some(b)),
            _ => Err(Error::invalid("linear takes [x, w] or [x, w, b]")),
        },
        OpKind::ConcatRows => concat_rows(g, inputs),
    }
}

fn same_dims(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

struct AddOp;

impl BackwardOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, grad_out: &Tensor4, needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        Ok(needs
            .iter()
            .map(|&n| n.then(|| grad_out.clone()))
            .collect())
    }
}

pub fn add(g: &mut Graph, a: &Var, b: &Var) -> Result<Var> {
    same_dims("add", a, b)?;
    let data = a
        .value()
        .data()
        .iter()
        .zip(b.value().data())
        .map(|(x, y)| x + y)
        .collect();
    let out = Tensor4::from_vec(a.dims(), data)?;
    g.record(&[a, b], out, AddOp)
}

struct MulOp {
    a: Arc<Tensor4>,
    b: Arc<Tensor4>,
}

impl BackwardOp for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, grad_out: &Tensor4, needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let times = |other: &Tensor4| {
            let data = grad_out
                .data()
                .iter()
                .zip(other.data())
                .map(|(g, v)| g * v)
                .collect();
            Tensor4::from_vec(grad_out.dims(), data)
        };
        Ok(vec![
            if needs[0] { Some(times(&self.b)?) } else { None },
            if needs[1] { Some(times(&self.a)?) } else { None },
        ])
    }
}

/// Elementwise product.
pub fn mul(g: &mut Graph, a: &Var, b: &Var) -> Result<Var> {
    same_dims("mul", a, b)?;
    let data = a
        .value()
        .data()
        .iter()
        .zip(b.value().data())
        .map(|(x, y)| x * y)
        .collect();
    let out = Tensor4::from_vec(a.dims(), data)?;
    g.record(
        &[a, b],
        out,
        MulOp {
            a: a.shared(),
            b: b.shared(),
        },
    )
}

struct ScaleOp(f32);

impl BackwardOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(grad_out.map(|v| v * self.0))])
    }
}

pub fn scale(g: &mut Graph, x: &Var, factor: f32) -> Result<Var> {
    let out = x.value().map(|v| v * factor);
    g.record(&[x], out, ScaleOp(factor))
}

struct ReluOp {
    out: Arc<Tensor4>,
}

impl BackwardOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let data = grad_out
            .data()
            .iter()
            .zip(self.out.data())
            .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
            .collect();
        Ok(vec![Some(Tensor4::from_vec(grad_out.dims(), data)?)])
    }
}

pub fn relu(g: &mut Graph, x: &Var) -> Result<Var> {
    let out = Arc::new(x.value().map(|v| v.max(0.0)));
    crate::gradcheck::note_pattern(|| x.value().data().iter().map(|&v| (v > 0.0) as u64));
    g.record_shared(&[x], Arc::clone(&out), ReluOp { out })
}

struct SumOp {
    dims: Dims,
}

impl BackwardOp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(Tensor4::full(self.dims, grad_out.data()[0]))])
    }
}

/// Sum of all elements as a 1×1×1×1 tensor (accumulated in f64).
pub fn sum(g: &mut Graph, x: &Var) -> Result<Var> {
    let total = x.value().sum_f64() as f32;
    g.record(&[x], Tensor4::scalar(total), SumOp { dims: x.dims() })
}

struct WeightedSumOp {
    weights: Arc<Tensor4>,
}

impl BackwardOp for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let s = grad_out.data()[0];
        Ok(vec![Some(self.weights.map(|w| w * s))])
    }
}

/// `Σ wᵢ·xᵢ` for a constant weight tensor of the same dims.
pub fn weighted_sum(g: &mut Graph, x: &Var, weights: Arc<Tensor4>) -> Result<Var> {
    if weights.dims() != x.dims() {
        return Err(Error::shape(
            "weighted_sum",
            format!("weights {} vs input {}", weights.dims(), x.dims()),
        ));
    }
    let total: f64 = x
        .value()
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    g.record(&[x], Tensor4::scalar(total as f32), WeightedSumOp { weights })
}

struct ConcatRowsOp {
    dims: Vec<Dims>,
}

impl BackwardOp for ConcatRowsOp {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn backward(&self, grad_out: &Tensor4, needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.dims.len());
        for (d, &need) in self.dims.iter().zip(needs) {
            let n = d.len();
            if need {
                out.push(Some(Tensor4::from_vec(
                    *d,
                    grad_out.data()[offset..offset + n].to_vec(),
                )?));
            } else {
                out.push(None);
            }
            offset += n;
        }
        Ok(out)
    }
}

/// Stacks inputs along the row axis.
pub fn concat_rows(g: &mut Graph, parts: &[&Var]) -> Result<Var> {
    let values: Vec<&Tensor4> = parts.iter().map(|v| v.value()).collect();
    let out = Tensor4::concat_rows(&values)?;
    let dims = parts.iter().map(|v| v.dims()).collect();
    g.record(parts, out, ConcatRowsOp { dims })
}
