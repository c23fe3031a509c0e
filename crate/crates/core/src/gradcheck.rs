//! Central finite differences, used as an oracle for [`Graph::backward`].

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for every element `i`.
///
/// The denominator is the step actually representable in `f32` around
/// `xᵢ`, which keeps linear functions exact to rounding of `f`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor4, eps: f64) -> Result<Tensor4>
where
    F: FnMut(&Tensor4) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be > 0")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let hi = (orig as f64 + eps) as f32;
        let lo = (orig as f64 - eps) as f32;
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_grad",
            });
        }
        grad.push(((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32);
    }
    Tensor4::from_vec(x.dims(), grad)
}

thread_local! {
    static PATTERN: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Folds the activation pattern of a piecewise-linear op (ReLU mask, max-pool
/// argmax) into the current probe's fingerprint. Free when no probe is active.
pub(crate) fn note_pattern<I: Iterator<Item = u64>>(bits: impl FnOnce() -> I) {
    PATTERN.with(|p| {
        if let Some(mut h) = p.get() {
            for b in bits() {
                h = (h ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15)).wrapping_mul(0x0100_0000_01b3);
            }
            p.set(Some(h));
        }
    });
}

/// Runs `f` and returns the fingerprint of every pattern it noted.
fn with_pattern<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = PATTERN.with(|p| p.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let h = PATTERN.with(|p| p.replace(prev)).unwrap_or(0);
    (out, h)
}

/// `max|a − n| / max(max|a|, max|n|)`: error relative to the gradient's scale.
pub fn relative_error(analytic: &Tensor4, numeric: &Tensor4) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |m, (&a, &n)| m.max((a as f64 - n as f64).abs()));
    diff / scale
}

/// Per-input outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Tensor4>,
    pub numeric: Vec<Tensor4>,
    /// Relative error per input over the elements that were compared.
    pub rel_errors: Vec<f64>,
    /// Largest compared `|analytic − numeric|` and gradient scale, per input.
    pub max_diffs: Vec<f64>,
    pub scales: Vec<f64>,
    /// Elements whose ±ε probes straddled a kink of a piecewise-linear op.
    pub skipped: usize,
    pub total: usize,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Error of all inputs taken as one concatenated gradient vector.
    pub fn joint_rel_error(&self) -> f64 {
        let scale = self.scales.iter().copied().fold(0.0, f64::max);
        let diff = self.max_diffs.iter().copied().fold(0.0, f64::max);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    pub fn skipped_fraction(&self) -> f64 {
        self.skipped as f64 / self.total.max(1) as f64
    }
}

/// Compares backward against central differences for the scalar
/// `Σ rᵢ·yᵢ`, where `y = build(inputs)` and `r` is a fixed random
/// projection (seeded by `seed`). The projection sum is taken in f64.
///
/// Central differences are meaningless where the probes `x ± ε` select
/// different linear pieces of a ReLU or max pool. Such elements are detected
/// from the ops' activation patterns and retried with ε/4 and ε/16; if the
/// probes still straddle a kink the element is left out of the error
/// (counted in [`GradCheck::skipped`]).
///
/// `build` must be deterministic: it is re-run for every probe.
pub fn check_gradients<F>(inputs: &[Tensor4], eps: f64, seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be > 0")));
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = build(&mut g, &leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Tensor4::randn(y.dims(), 1.0, &mut rng);
    g.backward(&[(&y, proj.clone())])?;
    let analytic: Vec<Tensor4> = leaves
        .iter()
        .map(|l| {
            g.grad(l)
                .cloned()
                .unwrap_or_else(|| Tensor4::zeros(l.dims()))
        })
        .collect();

    let eval = |probe_of: usize, probe: &Tensor4| -> Result<(f64, u64)> {
        let (y, pattern) = with_pattern(|| {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| Var::constant(if j == probe_of { probe.clone() } else { t.clone() }))
                .collect();
            build(&mut g, &vars)
        });
        let y = y?;
        let v: f64 = y
            .value()
            .data()
            .iter()
            .zip(proj.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "check_gradients" });
        }
        Ok((v, pattern))
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut max_diffs = Vec::with_capacity(inputs.len());
    let mut scales = Vec::with_capacity(inputs.len());
    let mut skipped = 0;
    let mut total = 0;
    for (i, x) in inputs.iter().enumerate() {
        let mut probe = x.clone();
        let mut fd = vec![0.0f32; x.len()];
        let mut keep = vec![true; x.len()];
        for k in 0..x.len() {
            let orig = x.data()[k];
            // Shrink the step when the probes straddle a kink.
            for step in [eps, eps / 4.0, eps / 16.0] {
                let hi = (orig as f64 + step) as f32;
                let lo = (orig as f64 - step) as f32;
                probe.data_mut()[k] = hi;
                let (f_hi, p_hi) = eval(i, &probe)?;
                probe.data_mut()[k] = lo;
                let (f_lo, p_lo) = eval(i, &probe)?;
                fd[k] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
                keep[k] = p_hi == p_lo;
                if keep[k] {
                    break;
                }
            }
            probe.data_mut()[k] = orig;
        }
        total += x.len();
        skipped += keep.iter().filter(|k| !**k).count();
        let fd = Tensor4::from_vec(x.dims(), fd)?;
        let (diff, scale) = masked_error(&analytic[i], &fd, &keep);
        rel_errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
        max_diffs.push(diff);
        scales.push(scale);
        numeric.push(fd);
    }
    Ok(GradCheck {
        analytic,
        numeric,
        rel_errors,
        max_diffs,
        scales,
        skipped,
        total,
    })
}

/// `(max |a − n|, max(max|a|, max|n|))` over elements with `keep` set; the
/// scale still spans the whole analytic gradient.
fn masked_error(analytic: &Tensor4, numeric: &Tensor4, keep: &[bool]) -> (f64, f64) {
    let mut scale = analytic.data().iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    let mut diff = 0.0f64;
    for ((&a, &n), &k) in analytic.data().iter().zip(numeric.data()).zip(keep) {
        if k {
            scale = scale.max(n.abs() as f64);
            diff = diff.max((a as f64 - n as f64).abs());
        }
    }
    (diff, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn sum_gives_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::randn(Dims::new(2, 3, 3, 2), 5.0, &mut rng);
        let g = finite_difference_grad(|t| Ok(t.sum_f64()), &x, 1e-3).unwrap();
        for v in g.data() {
            assert!((*v as f64 - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor4::scalar(3.0);
        let g = finite_difference_grad(|t| Ok((t.data()[0] as f64).powi(2)), &x, 1e-3).unwrap();
        assert!((g.data()[0] as f64 - 6.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        let x = Tensor4::scalar(1.0);
        assert!(finite_difference_grad(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(finite_difference_grad(|_| Ok(f64::NAN), &x, 1e-3).is_err());
    }

    #[test]
    fn kinks_are_detected_and_skipped() {
        // relu at ±5e-5: even the ε/16 probes straddle zero.
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![5e-5, -5e-5, 1.0]).unwrap();
        let r = check_gradients(&[x], 1e-3, 0, |g, v| crate::ops::relu(g, &v[0])).unwrap();
        assert_eq!((r.skipped, r.total), (2, 3));
        assert!(r.max_rel_error() < 1e-4);
        // At 2e-4 the ε/16 step stays on one side.
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 1), vec![2e-4]).unwrap();
        let r = check_gradients(&[x], 1e-3, 0, |g, v| crate::ops::relu(g, &v[0])).unwrap();
        assert_eq!(r.skipped, 0);
        assert!(r.max_rel_error() < 1e-4);
    }

    #[test]
    fn relative_error_is_scale_free() {
        let a = Tensor4::from_vec(Dims::new(1, 1, 1, 2), vec![100.0, 1.0]).unwrap();
        let n = Tensor4::from_vec(Dims::new(1, 1, 1, 2), vec![101.0, 1.0]).unwrap();
        assert!((relative_error(&a, &n) - 1.0 / 101.0).abs() < 1e-12);
        let z = Tensor4::zeros(Dims::new(1, 1, 1, 2));
        assert_eq!(relative_error(&z, &z), 0.0);
    }
}
