//! Branched networks: branching at chosen spots, shared downstream weights,
//! and reductions over the per-branch class probabilities.
//!
//! Row layout: with `B` input images and branch multiplicities `R₁, R₂, …`
//! at increasing depth, output row `b + B·(r₁ + R₁·(r₂ + …))` holds sample
//! `b` under variant `r₁` at the first spot, `r₂` at the second, and so on.
//! Equivalently, branch `j` of sample `b` sits at row `j·B + b`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{BnUpdate, Ctx, Mode, Network};
use crate::tensor::{Dims, Tensor4};
use crate::transform::{self, TransformSpec};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rule for combining branch outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Branch 0 only.
    Vanilla,
    /// Loss on every branch separately. At inference this falls back to `Geo`.
    None,
    Max,
    /// Arithmetic mean.
    Sum,
    /// Geometric mean.
    Geo,
}

impl Reduction {
    pub const ALL: [Reduction; 5] = [
        Reduction::Vanilla,
        Reduction::None,
        Reduction::Max,
        Reduction::Sum,
        Reduction::Geo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Vanilla => "vanilla",
            Reduction::None => "none",
            Reduction::Max => "max",
            Reduction::Sum => "sum",
            Reduction::Geo => "geo",
        }
    }

    /// The reduction actually used for prediction.
    pub fn for_inference(self) -> Reduction {
        match self {
            Reduction::None => Reduction::Geo,
            r => r,
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Reduction::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown reduction '{s}' (expected vanilla, none, max, sum or geo)"
                ))
            })
    }
}

/// Row-major matrix of class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ClassProbs {
    pub fn from_vec(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * classes || classes == 0 {
            return Err(Error::shape(
                "class probs",
                format!("{} values for {rows}x{classes}", data.len()),
            ));
        }
        Ok(ClassProbs {
            rows,
            classes,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.classes..(r + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        best
    }

    /// Whether `target` is among the `k` most probable classes (ties favour lower indices).
    pub fn in_top_k(&self, r: usize, target: usize, k: usize) -> bool {
        let row = self.row(r);
        let pt = row[target];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(c, &p)| p > pt || (p == pt && c < target))
            .count();
        ahead < k
    }

    pub fn max_abs_diff(&self, other: &ClassProbs) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Row-wise softmax of `rows×1×1×K` logits, in f64.
pub fn softmax(logits: &Tensor4) -> ClassProbs {
    let d = logits.dims();
    let k = d.row_len();
    let mut data = Vec::with_capacity(d.len());
    for r in 0..d.rows {
        let row = logits.row(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let start = data.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v as f64 - m).exp();
            z += e;
            data.push(e);
        }
        for p in &mut data[start..] {
            *p /= z;
        }
    }
    ClassProbs {
        rows: d.rows,
        classes: k,
        data,
    }
}

fn check_groups(rows: usize, branches: usize) -> Result<usize> {
    if branches == 0 {
        return Err(Error::invalid("reduction over zero branches"));
    }
    if !rows.is_multiple_of(branches) {
        return Err(Error::shape(
            "reduce",
            format!("{rows} rows not divisible into {branches} branches"),
        ));
    }
    Ok(rows / branches)
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v {
            *x /= s;
        }
    }
}

/// Unnormalized per-class combination for sample `b`.
fn combine(probs: &ClassProbs, branches: usize, b: usize, kind: Reduction) -> Vec<f64> {
    let batch = probs.rows / branches;
    let k = probs.classes;
    let branch = |j: usize| probs.row(j * batch + b);
    match kind.for_inference() {
        Reduction::Vanilla => branch(0).to_vec(),
        Reduction::Max => {
            let mut u = branch(0).to_vec();
            for j in 1..branches {
                for (a, &p) in u.iter_mut().zip(branch(j)) {
                    *a = a.max(p);
                }
            }
            u
        }
        Reduction::Sum => {
            let mut u = vec![0.0; k];
            for j in 0..branches {
                for (a, &p) in u.iter_mut().zip(branch(j)) {
                    *a += p;
                }
            }
            u.iter().map(|a| a / branches as f64).collect()
        }
        Reduction::Geo => {
            let mut u = vec![0.0; k];
            for j in 0..branches {
                for (a, &p) in u.iter_mut().zip(branch(j)) {
                    *a += p.max(PROB_FLOOR).ln();
                }
            }
            u.iter().map(|a| (a / branches as f64).exp()).collect()
        }
        Reduction::None => unreachable!("mapped to geo"),
    }
}

/// Combines the `branches` rows of each sample per class and L1-normalizes.
/// Each branch row is L1-normalized first, so positively rescaled inputs
/// reduce to the same result. `None` is treated as `Geo`.
pub fn reduce(probs: &ClassProbs, branches: usize, kind: Reduction) -> Result<ClassProbs> {
    let batch = check_groups(probs.rows, branches)?;
    let mut unit = probs.clone();
    for row in unit.data.chunks_mut(unit.classes) {
        normalize(row);
    }
    let probs = &unit;
    let mut data = Vec::with_capacity(batch * probs.classes);
    for b in 0..batch {
        let mut u = combine(probs, branches, b, kind);
        normalize(&mut u);
        data.extend(u);
    }
    ClassProbs::from_vec(batch, probs.classes, data)
}

/// `softmax` of the per-class mean logit over branches; equal to `Geo` on
/// the softmaxed branches.
pub fn geo_from_logits(logits: &Tensor4, branches: usize) -> Result<ClassProbs> {
    let d = logits.dims();
    let batch = check_groups(d.rows, branches)?;
    let k = d.row_len();
    let mut mean = vec![0.0f64; batch * k];
    for j in 0..branches {
        for b in 0..batch {
            for (m, &z) in mean[b * k..(b + 1) * k].iter_mut().zip(logits.row(j * batch + b)) {
                *m += z as f64;
            }
        }
    }
    let mut data = Vec::with_capacity(batch * k);
    for row in mean.chunks(k) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let start = data.len();
        let mut z = 0.0;
        for &v in row {
            let e = ((v - mx) / branches as f64).exp();
            z += e;
            data.push(e);
        }
        for p in &mut data[start..] {
            *p /= z;
        }
    }
    ClassProbs::from_vec(batch, k, data)
}

/// Cross-entropy under a reduction, with its gradient w.r.t. `probs`.
///
/// `None` averages `−log P[row, target]` over all rows; the others average
/// `−log reduce(P)[target]` over samples. Max routes gradient to the
/// lowest-index branch attaining each class maximum.
pub fn loss(
    probs: &ClassProbs,
    targets: &[usize],
    branches: usize,
    kind: Reduction,
) -> Result<(f64, ClassProbs)> {
    let batch = check_groups(probs.rows, branches)?;
    let k = probs.classes;
    if targets.len() != batch {
        return Err(Error::shape(
            "loss",
            format!("{} targets for {batch} samples", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("label {t} out of range for {k} classes")));
    }
    let mut grad = vec![0.0f64; probs.data.len()];
    let mut total = 0.0;
    if kind == Reduction::None {
        let n = probs.rows as f64;
        for row in 0..probs.rows {
            let t = targets[row % batch];
            let p = probs.row(row)[t];
            total -= p.max(PROB_FLOOR).ln();
            if p > PROB_FLOOR {
                grad[row * k + t] = -1.0 / (n * p);
            }
        }
        return Ok((total / n, ClassProbs::from_vec(probs.rows, k, grad)?));
    }
    let n = batch as f64;
    for (b, &t) in targets.iter().enumerate() {
        let u = combine(probs, branches, b, kind);
        let s: f64 = u.iter().sum();
        let q = u[t] / s;
        total -= q.max(PROB_FLOOR).ln();
        if q <= PROB_FLOOR {
            continue;
        }
        // d/du_c of −log(u_t / Σu)
        let du: Vec<f64> = (0..k)
            .map(|c| (1.0 / s - if c == t { 1.0 / u[t] } else { 0.0 }) / n)
            .collect();
        let row_of = |j: usize| j * batch + b;
        match kind {
            Reduction::Vanilla => {
                grad[row_of(0) * k..row_of(0) * k + k].copy_from_slice(&du);
            }
            Reduction::Max => {
                for c in 0..k {
                    let mut best = 0;
                    for j in 1..branches {
                        if probs.row(row_of(j))[c] > probs.row(row_of(best))[c] {
                            best = j;
                        }
                    }
                    grad[row_of(best) * k + c] += du[c];
                }
            }
            Reduction::Sum => {
                for j in 0..branches {
                    for c in 0..k {
                        grad[row_of(j) * k + c] += du[c] / branches as f64;
                    }
                }
            }
            Reduction::Geo => {
                for j in 0..branches {
                    let row = probs.row(row_of(j));
                    for c in 0..k {
                        if row[c] > PROB_FLOOR {
                            grad[row_of(j) * k + c] += du[c] * u[c] / (branches as f64 * row[c]);
                        }
                    }
                }
            }
            Reduction::None => unreachable!(),
        }
    }
    Ok((total / n, ClassProbs::from_vec(probs.rows, k, grad)?))
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits:
/// `dz = p ⊙ (dp − ⟨dp, p⟩)` per row.
pub fn softmax_backward(probs: &ClassProbs, dprobs: &ClassProbs) -> Tensor4 {
    let k = probs.classes;
    let mut out = Vec::with_capacity(probs.data.len());
    for r in 0..probs.rows {
        let (p, dp) = (probs.row(r), dprobs.row(r));
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(dp).map(|(&pi, &di)| (pi * (di - dot)) as f32));
    }
    Tensor4::from_vec(Dims::new(probs.rows, 1, 1, k), out).expect("sized")
}

/// Branchings keyed by spot; see [`Network`] for the spot convention.
pub type Branchings = BTreeMap<isize, Vec<TransformSpec>>;

/// A network plus the branching functions attached to its spots.
#[derive(Debug, Clone)]
pub struct BranchedModel {
    pub net: Network,
    pub branchings: Branchings,
}

/// Result of a forward pass.
pub struct ForwardPass {
    /// `R·B × 1 × 1 × classes`.
    pub logits: Var,
    pub branches: usize,
    /// Parameter vars in store order (graph leaves when recording).
    pub params: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Product of the branch multiplicities.
pub fn total_branches(branchings: &Branchings) -> usize {
    branchings.values().map(Vec::len).product()
}

/// Checks that every spot can carry a branching and every spec is valid.
pub fn validate_branchings(net: &Network, branchings: &Branchings) -> Result<()> {
    for (&spot, specs) in branchings {
        if spot < -1 || spot > net.last_spot() {
            return Err(Error::invalid(format!(
                "spot {spot} out of range -1..={} for {}",
                net.last_spot(),
                net.arch
            )));
        }
        if specs.is_empty() {
            return Err(Error::invalid(format!("empty branching at spot {spot}")));
        }
        for s in specs {
            s.validate()?;
        }
    }
    Ok(())
}

/// Forward through `net` with `branchings`, recording on `g` when it records.
pub fn forward_branched<R: Rng + ?Sized>(
    net: &Network,
    branchings: &Branchings,
    g: &mut Graph,
    x: &Tensor4,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardPass> {
    net.check_input(x)?;
    validate_branchings(net, branchings)?;
    let mut ctx = Ctx::new(g, mode, &net.params, &net.buffers);
    let logits = net.forward_with(&mut ctx, Var::constant(x.clone()), |spot, ctx, h| {
        match branchings.get(&spot) {
            Some(specs) => transform::apply_branching(ctx.graph, &h, specs, rng, ctx.mode),
            None => Ok(h),
        }
    })?;
    let (params, bn_updates) = ctx.into_parts();
    Ok(ForwardPass {
        logits,
        branches: total_branches(branchings),
        params,
        bn_updates,
    })
}

impl BranchedModel {
    pub fn new(net: Network, branchings: Branchings) -> Result<Self> {
        validate_branchings(&net, &branchings)?;
        Ok(BranchedModel { net, branchings })
    }

    pub fn unbranched(net: Network) -> Self {
        BranchedModel {
            net,
            branchings: Branchings::new(),
        }
    }

    pub fn total_branches(&self) -> usize {
        total_branches(&self.branchings)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: &Tensor4,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        forward_branched(&self.net, &self.branchings, g, x, mode, rng)
    }

    /// Per-branch probabilities (`R·B` rows) in eval mode.
    pub fn branch_probs<R: Rng + ?Sized>(&self, x: &Tensor4, rng: &mut R) -> Result<ClassProbs> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, x, Mode::Eval, rng)?;
        Ok(softmax(out.logits.value()))
    }

    /// Eval-mode forward and reduction to one distribution per image.
    pub fn infer<R: Rng + ?Sized>(&self, x: &Tensor4, reduction: Reduction, rng: &mut R) -> Result<ClassProbs> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, x, Mode::Eval, rng)?;
        reduce_logits(out.logits.value(), out.branches, reduction)
    }

    /// Runs the image and its horizontal mirror and reduces all `2·R`
    /// branch outputs jointly with `reduction`.
    pub fn tta_infer<R: Rng + ?Sized>(
        &self,
        x: &Tensor4,
        reduction: Reduction,
        rng: &mut R,
    ) -> Result<ClassProbs> {
        let mut g = Graph::no_grad();
        let plain = self.forward(&mut g, x, Mode::Eval, rng)?;
        let mirrored = self.forward(&mut g, &transform::flip_tensor(x), Mode::Eval, rng)?;
        let both = Tensor4::concat_rows(&[plain.logits.value(), mirrored.logits.value()])?;
        reduce_logits(&both, 2 * plain.branches, reduction)
    }
}

/// Softmax then reduction; geo goes through the mean-logit identity.
pub fn reduce_logits(logits: &Tensor4, branches: usize, reduction: Reduction) -> Result<ClassProbs> {
    match reduction.for_inference() {
        Reduction::Geo => geo_from_logits(logits, branches),
        r => reduce(&softmax(logits), branches, r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::build_preact_resnet;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(rows: usize, k: usize, v: &[f64]) -> ClassProbs {
        ClassProbs::from_vec(rows, k, v.to_vec()).unwrap()
    }

    fn random_logits(seed: u64, rows: usize, k: usize, scale: f32) -> Tensor4 {
        Tensor4::randn(Dims::new(rows, 1, 1, k), scale, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn max_hand_example() {
        let p = probs(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let r = reduce(&p, 2, Reduction::Max).unwrap();
        assert!((r.row(0)[0] - 0.9 / 1.7).abs() < 1e-12);
        assert!((r.row(0)[1] - 0.8 / 1.7).abs() < 1e-12);
    }

    #[test]
    fn single_branch_is_identity() {
        let p = softmax(&random_logits(1, 4, 5, 1.0));
        for kind in Reduction::ALL {
            assert!(reduce(&p, 1, kind).unwrap().max_abs_diff(&p) < 1e-15);
        }
        assert!(reduce(&p, 0, Reduction::Max).is_err());
        assert!(reduce(&p, 3, Reduction::Max).is_err());
    }

    #[test]
    fn r1_losses_equal_cross_entropy() {
        let p = softmax(&random_logits(2, 3, 4, 1.0));
        let t = [0, 3, 2];
        let ce: f64 = t.iter().enumerate().map(|(b, &c)| -p.row(b)[c].ln()).sum::<f64>() / 3.0;
        for kind in Reduction::ALL {
            let (l, _) = loss(&p, &t, 1, kind).unwrap();
            assert!((l - ce).abs() < 1e-12, "{kind}");
        }
        assert!(loss(&p, &[0, 4, 1], 1, Reduction::Sum).is_err());
    }

    #[test]
    fn geo_loss_is_mean_logit_cross_entropy() {
        let z = random_logits(3, 8, 6, 2.0);
        let t = [1, 5];
        let (l, _) = loss(&softmax(&z), &t, 4, Reduction::Geo).unwrap();
        let q = geo_from_logits(&z, 4).unwrap();
        let ce = -(q.row(0)[1].ln() + q.row(1)[5].ln()) / 2.0;
        assert!((l - ce).abs() < 1e-6);
    }

    fn loss_of_logits(z: &Tensor4, t: &[usize], r: usize, kind: Reduction) -> f64 {
        loss(&softmax(z), t, r, kind).unwrap().0
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for kind in Reduction::ALL {
            for case in 0..20u64 {
                let r = 1 + (case as usize % 3);
                let b = 1 + (case as usize / 3) % 3;
                let k = 3 + case as usize % 4;
                let z = random_logits(100 + case, r * b, k, 1.5);
                let t: Vec<usize> = (0..b).map(|i| (i * 7 + case as usize) % k).collect();
                let (_, dp) = loss(&softmax(&z), &t, r, kind).unwrap();
                let analytic = softmax_backward(&softmax(&z), &dp);
                let numeric = crate::gradcheck::finite_difference_grad(
                    |zz| Ok(loss_of_logits(zz, &t, r, kind)),
                    &z,
                    1e-3,
                )
                .unwrap();
                let err = crate::gradcheck::relative_error(&analytic, &numeric);
                assert!(err < 1e-2, "{kind} case {case}: {err}");
            }
        }
    }

    #[test]
    fn max_gradient_flows_to_class_maxima_only() {
        // Two branches, three classes.
        let p = probs(2, 3, &[0.6, 0.3, 0.1, 0.2, 0.5, 0.3]);
        let (_, dp) = loss(&p, &[0], 2, Reduction::Max).unwrap();
        let g = dp.data();
        // Branch 0 holds the max of classes 0; branch 1 of classes 1 and 2.
        assert!(g[0] != 0.0 && g[1] == 0.0 && g[2] == 0.0);
        assert!(g[3] == 0.0 && g[4] != 0.0 && g[5] != 0.0);
    }

    #[test]
    fn tta_sum_of_two_distributions() {
        let p = probs(2, 2, &[0.7, 0.3, 0.1, 0.9]);
        let r = reduce(&p, 2, Reduction::Sum).unwrap();
        assert!((r.row(0)[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn reduction_names_round_trip() {
        for r in Reduction::ALL {
            assert_eq!(r.as_str().parse::<Reduction>().unwrap(), r);
        }
        let err = "mean".parse::<Reduction>().unwrap_err().to_string();
        assert!(err.contains("mean"));
    }

    fn small_net(seed: u64) -> Network {
        build_preact_resnet(1, 4, [3, 4, 4], (8, 8, 2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn unbranched_matches_plain_network() {
        let net = small_net(0);
        let x = Tensor4::randn(Dims::new(3, 8, 8, 2), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let model = BranchedModel::unbranched(net.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = model.forward(&mut Graph::no_grad(), &x, Mode::Eval, &mut rng).unwrap();
        let mut g = Graph::no_grad();
        let mut ctx = Ctx::new(&mut g, Mode::Eval, &net.params, &net.buffers);
        let plain = net.forward(&mut ctx, Var::constant(x)).unwrap();
        assert_eq!(out.logits.value(), plain.value());
        assert_eq!(out.branches, 1);
    }

    #[test]
    fn flip_before_global_pool_is_invariant() {
        let net = small_net(3);
        let last = net.last_spot();
        let x = Tensor4::randn(Dims::new(2, 8, 8, 2), 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let model = BranchedModel::new(
            net,
            Branchings::from([(last, vec![TransformSpec::identity(), TransformSpec::flip_h()])]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [Mode::Eval, Mode::Train] {
            let out = model.forward(&mut Graph::no_grad(), &x, mode, &mut rng).unwrap();
            let z = out.logits.value();
            assert_eq!(z.dims().rows, 4);
            for b in 0..2 {
                assert_eq!(z.row(b), z.row(2 + b));
            }
        }
    }

    #[test]
    fn branch_rows_multiply() {
        let net = small_net(5);
        let flips = || vec![TransformSpec::identity(), TransformSpec::flip_h()];
        let params = net.num_parameters();
        let br = Branchings::from([(-1, flips()), (1, flips()), (2, flips())]);
        let model = BranchedModel::new(net, br).unwrap();
        assert_eq!(model.total_branches(), 8);
        assert_eq!(model.net.num_parameters(), params);
        let x = Tensor4::randn(Dims::new(3, 8, 8, 2), 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let p = model.branch_probs(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.rows(), 24);
        let bad = Branchings::from([(model.net.sentinel(), flips())]);
        assert!(BranchedModel::new(model.net.clone(), bad).is_err());
    }

    #[test]
    fn tta_on_symmetric_input_matches_plain() {
        let model = BranchedModel::unbranched(small_net(7));
        let mut x = Tensor4::randn(Dims::new(2, 8, 8, 2), 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let mirrored = transform::flip_tensor(&x);
        for (a, b) in x.data_mut().iter_mut().zip(mirrored.data()) {
            *a = 0.5 * (*a + b);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [Reduction::Sum, Reduction::Max, Reduction::Geo] {
            let plain = model.infer(&x, r, &mut rng).unwrap();
            let tta = model.tta_infer(&x, r, &mut rng).unwrap();
            assert!(plain.max_abs_diff(&tta) < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reduced_rows_are_distributions(seed in any::<u64>(), r in 1usize..5, b in 1usize..4, k in 2usize..12, kind in 0usize..5) {
            let p = softmax(&random_logits(seed, r * b, k, 3.0));
            let q = reduce(&p, r, Reduction::ALL[kind]).unwrap();
            for row in 0..b {
                prop_assert!(q.row(row).iter().all(|&v| v >= 0.0));
                prop_assert!((q.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn reduce_ignores_branch_order(seed in any::<u64>(), r in 2usize..5, b in 1usize..3, kind in 0usize..5) {
            let kind = Reduction::ALL[kind];
            prop_assume!(kind != Reduction::Vanilla);
            let p = softmax(&random_logits(seed, r * b, 5, 2.0));
            let mut perm: Vec<usize> = (0..r).collect();
            perm.rotate_left(1 + seed as usize % (r - 1));
            let mut shuffled = Vec::new();
            for &j in &perm {
                for s in 0..b {
                    shuffled.extend_from_slice(p.row(j * b + s));
                }
            }
            let q = ClassProbs::from_vec(r * b, 5, shuffled).unwrap();
            let a = reduce(&p, r, kind).unwrap();
            let c = reduce(&q, r, kind).unwrap();
            prop_assert!(a.max_abs_diff(&c) < 1e-12);
        }

        #[test]
        fn geo_matches_mean_logits(seed in any::<u64>(), r in prop::sample::select(vec![2usize, 4, 8]), k in prop::sample::select(vec![3usize, 10, 100])) {
            let z = random_logits(seed, r * 3, k, 2.0);
            let via_probs = reduce(&softmax(&z), r, Reduction::Geo).unwrap();
            let via_logits = geo_from_logits(&z, r).unwrap();
            prop_assert!(via_probs.max_abs_diff(&via_logits) < 1e-6);
        }

        #[test]
        fn argmax_survives_branch_rescaling(seed in any::<u64>(), r in 2usize..5, kind in prop::sample::select(vec![Reduction::Sum, Reduction::Geo])) {
            let p = softmax(&random_logits(seed, r, 6, 2.0));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scaled = p.data().to_vec();
            for j in 0..r {
                let s: f64 = rand::Rng::random_range(&mut rng, 0.5..2.0);
                for v in &mut scaled[j * 6..(j + 1) * 6] {
                    *v *= s;
                }
            }
            let q = ClassProbs::from_vec(r, 6, scaled).unwrap();
            prop_assert_eq!(reduce(&p, r, kind).unwrap().argmax(0), reduce(&q, r, kind).unwrap().argmax(0));
        }
    }
}
