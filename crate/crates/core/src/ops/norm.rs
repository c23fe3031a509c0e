use std::sync::Arc;

use crate::autograd::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Normalization source for [`batchnorm`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with statistics of the current batch (all rows jointly).
    Train,
    /// Normalize with the given running statistics.
    Eval {
        running_mean: &'a [f32],
        running_var: &'a [f32],
    },
}

/// Per-channel batch statistics (population variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchStats {
    /// `running ← (1−m)·running + m·batch`.
    pub fn update_running(&self, running_mean: &mut [f32], running_var: &mut [f32], momentum: f32) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

struct BatchNormOp {
    xhat: Arc<Tensor4>,
    gamma: Arc<Tensor4>,
    inv_std: Vec<f64>,
    train: bool,
}

impl BackwardOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, grad_out: &Tensor4, needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        let c = self.gamma.len();
        let dy = grad_out.data();
        let xhat = self.xhat.data();
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (gy, xh) in dy.chunks(c).zip(xhat.chunks(c)) {
            for ch in 0..c {
                sum_dy[ch] += gy[ch] as f64;
                sum_dy_xhat[ch] += gy[ch] as f64 * xh[ch] as f64;
            }
        }
        let dx = if needs[0] {
            let n = (dy.len() / c) as f64;
            let gamma = self.gamma.data();
            let mut out = Vec::with_capacity(dy.len());
            for (gy, xh) in dy.chunks(c).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    let scale = gamma[ch] as f64 * self.inv_std[ch];
                    let v = if self.train {
                        scale / n
                            * (n * gy[ch] as f64 - sum_dy[ch] - xh[ch] as f64 * sum_dy_xhat[ch])
                    } else {
                        scale * gy[ch] as f64
                    };
                    out.push(v as f32);
                }
            }
            Some(Tensor4::from_vec(grad_out.dims(), out)?)
        } else {
            None
        };
        let per_channel = |v: &[f64]| {
            Tensor4::from_vec(
                Dims::new(1, 1, 1, c),
                v.iter().map(|&x| x as f32).collect(),
            )
        };
        Ok(vec![
            dx,
            if needs[1] { Some(per_channel(&sum_dy_xhat)?) } else { None },
            if needs[2] { Some(per_channel(&sum_dy)?) } else { None },
        ])
    }
}

/// Per-channel batch normalization `γ·(x−μ)/√(σ²+eps) + β`.
///
/// In train mode the statistics span every row, height and width position,
/// and are returned so the caller can update its running estimates.
pub fn batchnorm(
    g: &mut Graph,
    x: &Var,
    gamma: &Var,
    beta: &Var,
    mode: BnMode<'_>,
    eps: f32,
) -> Result<(Var, Option<BatchStats>)> {
    let d = x.dims();
    let c = d.channels;
    if gamma.value().len() != c || beta.value().len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "input {d} with gamma {} and beta {}",
                gamma.dims(),
                beta.dims()
            ),
        ));
    }
    let xs = x.value().data();
    let count = d.rows * d.pixels();
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            if count == 0 {
                return Err(Error::shape("batchnorm", format!("empty batch {d}")));
            }
            let mut sum = vec![0.0f64; c];
            for px in xs.chunks(c) {
                for (s, v) in sum.iter_mut().zip(px) {
                    *s += *v as f64;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0f64; c];
            for px in xs.chunks(c) {
                for ch in 0..c {
                    let dv = px[ch] as f64 - mean[ch];
                    sq[ch] += dv * dv;
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
            let stats = BatchStats {
                mean: mean.iter().map(|&v| v as f32).collect(),
                var: var.iter().map(|&v| v as f32).collect(),
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval {
            running_mean,
            running_var,
        } => {
            if running_mean.len() != c || running_var.len() != c {
                return Err(Error::shape(
                    "batchnorm",
                    format!("running stats of length {} for {c} channels", running_mean.len()),
                ));
            }
            (
                running_mean.iter().map(|&v| v as f64).collect(),
                running_var.iter().map(|&v| v as f64).collect(),
                None,
            )
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
    let gm = gamma.value().data();
    let bt = beta.value().data();
    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for px in xs.chunks(c) {
        for ch in 0..c {
            let h = (px[ch] as f64 - mean[ch]) * inv_std[ch];
            xhat.push(h as f32);
            out.push((gm[ch] as f64 * h + bt[ch] as f64) as f32);
        }
    }
    let out = Tensor4::from_vec(d, out)?;
    let op = BatchNormOp {
        xhat: Arc::new(Tensor4::from_vec(d, xhat)?),
        gamma: gamma.shared(),
        inv_std,
        train: matches!(mode, BnMode::Train),
    };
    let y = g.record(&[x, gamma, beta], out, op)?;
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(c: usize) -> (Var, Var) {
        (
            Var::constant(Tensor4::full(Dims::new(1, 1, 1, c), 1.0)),
            Var::constant(Tensor4::zeros(Dims::new(1, 1, 1, c))),
        )
    }

    #[test]
    fn eval_with_matching_mean_gives_zeros() {
        let mut g = Graph::no_grad();
        let x = Var::constant(Tensor4::full(Dims::new(2, 3, 3, 2), 4.5));
        let (gm, bt) = affine(2);
        let mean = [4.5, 4.5];
        let var = [1.0, 1.0];
        let (y, stats) = batchnorm(
            &mut g,
            &x,
            &gm,
            &bt,
            BnMode::Eval {
                running_mean: &mean,
                running_var: &var,
            },
            1e-5,
        )
        .unwrap();
        assert!(stats.is_none());
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::no_grad();
        let x = Tensor4::randn(Dims::new(4, 5, 5, 3), 2.0, &mut rng).map(|v| v + 3.0);
        let x = Var::constant(x);
        let (gm, bt) = affine(3);
        let (y, _) = batchnorm(&mut g, &x, &gm, &bt, BnMode::Train, 1e-5).unwrap();
        let y = y.value();
        for ch in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn running_update_hand_computed() {
        // Channel values {1, 3} → mean 2, population var 1.
        let mut g = Graph::no_grad();
        let x = Var::constant(Tensor4::from_vec(Dims::new(2, 1, 1, 1), vec![1.0, 3.0]).unwrap());
        let (gm, bt) = affine(1);
        let (_, stats) = batchnorm(&mut g, &x, &gm, &bt, BnMode::Train, 1e-5).unwrap();
        let stats = stats.unwrap();
        let mut rm = [0.5f32];
        let mut rv = [2.0f32];
        stats.update_running(&mut rm, &mut rv, 0.1);
        // 0.9·0.5 + 0.1·2 = 0.65 ; 0.9·2 + 0.1·1 = 1.9
        assert!((rm[0] - 0.65).abs() < 1e-7);
        assert!((rv[0] - 1.9).abs() < 1e-7);
    }

    #[test]
    fn zero_variance_is_finite() {
        let mut g = Graph::no_grad();
        let x = Var::constant(Tensor4::full(Dims::new(3, 2, 2, 1), 7.0));
        let (gm, bt) = affine(1);
        let (y, _) = batchnorm(&mut g, &x, &gm, &bt, BnMode::Train, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}
