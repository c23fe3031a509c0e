//! Dimension-preserving feature-map transforms and the branching function.
//!
//! Coordinates: pixel centres sit on integer `(row, col)` positions and all
//! warps act about the spatial centre `((H−1)/2, (W−1)/2)`. Warping is
//! output driven: each output pixel samples its source location bilinearly,
//! and a source outside `[0,H−1]×[0,W−1]` yields exactly zero.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardOp, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::ops;
use crate::tensor::{Dims, Tensor4};

/// Source coordinates this close to an integer are treated as exactly on it,
/// so lattice-preserving warps (identity, quarter turns) copy without blending.
const SNAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    FlipH,
    Rotate,
    Scale,
}

/// One inside-augmentation. `angle_deg` / `factor` are the evaluation-time
/// values; `random_range` is sampled during training. With
/// `resample_in_eval`, evaluation also samples from `random_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub resample_in_eval: bool,
}

/// A transform with all parameters fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    FlipH,
    Rotate(f64),
    Scale(f64),
}

impl TransformSpec {
    fn plain(kind: TransformKind) -> Self {
        TransformSpec {
            kind,
            angle_deg: None,
            factor: None,
            random_range: None,
            resample_in_eval: false,
        }
    }

    pub fn identity() -> Self {
        Self::plain(TransformKind::Identity)
    }

    pub fn flip_h() -> Self {
        Self::plain(TransformKind::FlipH)
    }

    pub fn rotate(angle_deg: f64) -> Self {
        TransformSpec {
            angle_deg: Some(angle_deg),
            ..Self::plain(TransformKind::Rotate)
        }
    }

    pub fn scale(factor: f64) -> Self {
        TransformSpec {
            factor: Some(factor),
            ..Self::plain(TransformKind::Scale)
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.random_range = Some([lo, hi]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("transform {:?}: {msg}", self.kind)));
        if let Some([lo, hi]) = self.random_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("random_range [{lo}, {hi}] must be finite with lo <= hi"));
            }
        }
        match self.kind {
            TransformKind::Identity | TransformKind::FlipH => {
                if self.angle_deg.is_some() || self.factor.is_some() || self.random_range.is_some() {
                    return bad("takes no parameters".into());
                }
            }
            TransformKind::Rotate => {
                if self.factor.is_some() {
                    return bad("rotation has no factor".into());
                }
                if let Some(a) = self.angle_deg {
                    if !a.is_finite() {
                        return bad(format!("angle {a} is not finite"));
                    }
                }
            }
            TransformKind::Scale => {
                if self.angle_deg.is_some() {
                    return bad("scale has no angle".into());
                }
                if let Some(f) = self.factor {
                    if !(f > 0.0 && f.is_finite()) {
                        return bad(format!("factor {f} must be > 0"));
                    }
                }
                if let Some([lo, _]) = self.random_range {
                    if lo <= 0.0 {
                        return bad(format!("random_range lower bound {lo} must be > 0"));
                    }
                }
            }
        }
        let fixed = match self.kind {
            TransformKind::Rotate => self.angle_deg.is_some(),
            TransformKind::Scale => self.factor.is_some(),
            _ => true,
        };
        let eval_ok = fixed || (self.resample_in_eval && self.random_range.is_some());
        if !eval_ok {
            return bad("needs a fixed value, or random_range with resample_in_eval".into());
        }
        Ok(())
    }

    /// Fixes the parameters: training draws uniformly from `random_range`
    /// when present; evaluation uses the fixed value unless `resample_in_eval`.
    pub fn draw<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> Result<Transform> {
        self.validate()?;
        let sample = match (mode, self.random_range) {
            (Mode::Train, Some([lo, hi])) => Some(if lo == hi { lo } else { rng.random_range(lo..=hi) }),
            (Mode::Eval, Some([lo, hi])) if self.resample_in_eval => {
                Some(if lo == hi { lo } else { rng.random_range(lo..=hi) })
            }
            _ => None,
        };
        Ok(match self.kind {
            TransformKind::Identity => Transform::Identity,
            TransformKind::FlipH => Transform::FlipH,
            TransformKind::Rotate => Transform::Rotate(sample.or(self.angle_deg).unwrap_or(0.0)),
            TransformKind::Scale => Transform::Scale(sample.or(self.factor).unwrap_or(1.0)),
        })
    }
}

impl Transform {
    pub fn apply(&self, g: &mut Graph, x: &Var) -> Result<Var> {
        match *self {
            Transform::Identity => Ok(x.clone()),
            Transform::FlipH => flip_h(g, x),
            Transform::Rotate(a) => rotate(g, x, a),
            Transform::Scale(f) => scale(g, x, f),
        }
    }
}

struct FlipOp;

impl BackwardOp for FlipOp {
    fn name(&self) -> &'static str {
        "flip_h"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(flip_tensor(grad_out))])
    }
}

/// Mirrors the width axis of a tensor.
pub fn flip_tensor(x: &Tensor4) -> Tensor4 {
    let d = x.dims();
    let c = d.channels;
    let mut out = Vec::with_capacity(d.len());
    for line in x.data().chunks(d.width * c) {
        for px in line.chunks(c).rev() {
            out.extend_from_slice(px);
        }
    }
    Tensor4::from_vec(d, out).expect("same size")
}

/// Horizontal flip: width index `w ↦ W−1−w`.
pub fn flip_h(g: &mut Graph, x: &Var) -> Result<Var> {
    g.record(&[x], flip_tensor(x.value()), FlipOp)
}

/// Sparse linear map from input pixels to output pixels, shared by all rows
/// and channels. Each output pixel reads at most four sources.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    height: usize,
    width: usize,
    /// `taps[p]` lists `(source pixel, weight)` for output pixel `p`.
    taps: Vec<Vec<(u32, f64)>>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

impl WarpPlan {
    /// `affine` maps centred output coordinates `(dy, dx, 1)` to centred
    /// source coordinates.
    pub fn new(height: usize, width: usize, affine: [[f64; 3]; 2]) -> Result<Self> {
        let [[a, b, _], [c, d, _]] = affine;
        let det = a * d - b * c;
        if !(det.abs() > 1e-12) || affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("warp matrix {affine:?} is not invertible")));
        }
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let mut taps = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                let (dy, dx) = (h as f64 - cy, w as f64 - cx);
                let sy = snap(affine[0][0] * dy + affine[0][1] * dx + affine[0][2] + cy);
                let sx = snap(affine[1][0] * dy + affine[1][1] * dx + affine[1][2] + cx);
                let mut t = Vec::new();
                if sy >= 0.0 && sy <= (height - 1) as f64 && sx >= 0.0 && sx <= (width - 1) as f64 {
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
                        for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                            let wgt = wy * wx;
                            if wgt != 0.0 {
                                t.push(((yy * width + xx) as u32, wgt));
                            }
                        }
                    }
                }
                taps.push(t);
            }
        }
        Ok(WarpPlan {
            height,
            width,
            taps,
        })
    }

    fn check(&self, d: Dims) -> Result<()> {
        if (d.height, d.width) != (self.height, self.width) {
            return Err(Error::shape(
                "warp_bilinear",
                format!("plan for {}x{} applied to {d}", self.height, self.width),
            ));
        }
        Ok(())
    }

    fn apply(&self, x: &Tensor4) -> Tensor4 {
        let d = x.dims();
        let c = d.channels;
        let mut out = Vec::with_capacity(d.len());
        let mut acc = vec![0.0f64; c];
        for r in 0..d.rows {
            let src = x.row(r);
            for taps in &self.taps {
                acc.fill(0.0);
                for &(p, wgt) in taps {
                    let px = &src[p as usize * c..(p as usize + 1) * c];
                    for (a, &v) in acc.iter_mut().zip(px) {
                        *a += wgt * v as f64;
                    }
                }
                out.extend(acc.iter().map(|&a| a as f32));
            }
        }
        Tensor4::from_vec(d, out).expect("same size")
    }

    fn apply_transpose(&self, gy: &Tensor4) -> Tensor4 {
        let d = gy.dims();
        let c = d.channels;
        let mut dx = vec![0.0f64; d.len()];
        for r in 0..d.rows {
            let base = r * d.row_len();
            let g = gy.row(r);
            for (q, taps) in self.taps.iter().enumerate() {
                let gq = &g[q * c..(q + 1) * c];
                for &(p, wgt) in taps {
                    let dst = &mut dx[base + p as usize * c..base + (p as usize + 1) * c];
                    for (a, &v) in dst.iter_mut().zip(gq) {
                        *a += wgt * v as f64;
                    }
                }
            }
        }
        Tensor4::from_vec(d, dx.into_iter().map(|v| v as f32).collect()).expect("same size")
    }
}

struct WarpOp {
    plan: Arc<WarpPlan>,
}

impl BackwardOp for WarpOp {
    fn name(&self) -> &'static str {
        "warp_bilinear"
    }

    fn backward(&self, grad_out: &Tensor4, _needs: &[bool]) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(self.plan.apply_transpose(grad_out))])
    }
}

/// Bilinear warp with a prepared plan.
pub fn warp_with_plan(g: &mut Graph, x: &Var, plan: Arc<WarpPlan>) -> Result<Var> {
    plan.check(x.dims())?;
    let out = plan.apply(x.value());
    g.record(&[x], out, WarpOp { plan })
}

/// Bilinear warp; `affine` maps centred output `(row, col, 1)` to centred source `(row, col)`.
pub fn warp_bilinear(g: &mut Graph, x: &Var, affine: [[f64; 3]; 2]) -> Result<Var> {
    let d = x.dims();
    let plan = Arc::new(WarpPlan::new(d.height, d.width, affine)?);
    warp_with_plan(g, x, plan)
}

/// Inverse-mapping matrix for a counterclockwise (as displayed) rotation.
pub fn rotation_matrix(angle_deg: f64) -> [[f64; 3]; 2] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    [[c, s, 0.0], [-s, c, 0.0]]
}

/// Inverse-mapping matrix for zooming by `factor` (>1 zooms in).
pub fn scale_matrix(factor: f64) -> [[f64; 3]; 2] {
    [[1.0 / factor, 0.0, 0.0], [0.0, 1.0 / factor, 0.0]]
}

/// Rotation about the spatial centre; corners leaving the frame become 0.
pub fn rotate(g: &mut Graph, x: &Var, angle_deg: f64) -> Result<Var> {
    warp_bilinear(g, x, rotation_matrix(angle_deg))
}

/// Zoom about the centre with unchanged output size. `factor < 1` leaves a
/// zero border, `factor > 1` crops.
pub fn scale(g: &mut Graph, x: &Var, factor: f64) -> Result<Var> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("scale factor {factor} must be > 0")));
    }
    warp_bilinear(g, x, scale_matrix(factor))
}

/// Applies one variant per transform and stacks them variant-major: output
/// row `r·B + b` is `transforms[r]` applied to input row `b`.
pub fn branch_rows(g: &mut Graph, x: &Var, transforms: &[Transform]) -> Result<Var> {
    if transforms.is_empty() {
        return Err(Error::invalid("branching needs at least one transform"));
    }
    if transforms.len() == 1 {
        return transforms[0].apply(g, x);
    }
    let parts = transforms
        .iter()
        .map(|t| t.apply(g, x))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Var> = parts.iter().collect();
    ops::concat_rows(g, &refs)
}

/// Draws one parameter set per spec (shared by all rows of that variant)
/// and branches `x` into `specs.len()` variants.
pub fn apply_branching<R: Rng + ?Sized>(
    g: &mut Graph,
    x: &Var,
    specs: &[TransformSpec],
    rng: &mut R,
    mode: Mode,
) -> Result<Var> {
    let drawn = specs
        .iter()
        .map(|s| s.draw(mode, rng))
        .collect::<Result<Vec<_>>>()?;
    branch_rows(g, x, &drawn)
}
