//! SGD training, input augmentation and evaluation.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::branch::{self, BranchedModel, ClassProbs, Reduction};
use crate::checkpoint;
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::layers::{apply_bn_updates, Mode, TensorStore};
use crate::tensor::Tensor4;
use crate::transform::flip_tensor;

/// Optimizer and schedule. `schedule` lists `(epoch, divisor)`: the learning
/// rate is divided by `divisor` from the start of that 1-indexed epoch on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Error::Config {
            field: format!("optim.{field}"),
            detail,
        };
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(bad("lr0", format!("{} must be > 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", format!("{} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", format!("{} must be >= 0", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1".into()));
        }
        for (i, &(epoch, div)) in self.schedule.iter().enumerate() {
            if !(div > 0.0 && div.is_finite()) {
                return Err(bad(&format!("schedule[{i}]"), format!("divisor {div} must be > 0")));
            }
            if epoch == 0 || (i > 0 && epoch <= self.schedule[i - 1].0) {
                return Err(bad(
                    &format!("schedule[{i}]"),
                    format!("epoch {epoch} must be >= 1 and strictly increasing"),
                ));
            }
        }
        Ok(())
    }

    /// Learning rate during 1-indexed `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr0, |lr, (_, d)| lr / d)
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Tensor4>,
}

/// One SGD update with coupled weight decay `d = g + wd·p`:
/// `v ← m·v + d`, then `p ← p − lr·v`, or `p ← p − lr·(d + m·v)` with Nesterov.
pub fn sgd_step(
    params: &mut TensorStore,
    grads: &[Tensor4],
    state: &mut SgdState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.dims() != params.get(id).dims() {
            return Err(Error::shape(
                "sgd_step",
                format!("gradient {} for '{}' of {}", g.dims(), params.name(id), params.get(id).dims()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.ids().map(|id| Tensor4::zeros(params.get(id).dims())).collect();
    }
    let (m, wd) = (cfg.momentum, cfg.weight_decay);
    for ((id, g), v) in params.ids().zip(grads).zip(&mut state.velocity) {
        let p = params.get_mut(id);
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let d = gi as f64 + wd * *pi as f64;
            let vel = m * *vi as f64 + d;
            *vi = vel as f32;
            let step = if cfg.nesterov { d + m * vel } else { vel };
            *pi = (*pi as f64 - lr * step) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    #[default]
    None,
    /// Zero-pad 4, random crop back to size, random horizontal flip.
    CifarStandard,
    /// Random resized crop, random flip, colour jitter 0.4.
    ImagenetStandard,
}

pub const CIFAR_PAD: usize = 4;
pub const JITTER: f64 = 0.4;

/// Augments raw `[0, 1]` images, one independent draw per image.
pub fn input_augment<R: Rng + ?Sized>(x: &Tensor4, policy: AugmentPolicy, rng: &mut R) -> Tensor4 {
    let d = x.dims();
    let one = d.with_rows(1);
    let mut out = Vec::with_capacity(x.len());
    for r in 0..d.rows {
        let img = Tensor4::from_vec(one, x.row(r).to_vec()).expect("row sized");
        let img = match policy {
            AugmentPolicy::None => img,
            AugmentPolicy::CifarStandard => {
                let dy = rng.random_range(0..=2 * CIFAR_PAD);
                let dx = rng.random_range(0..=2 * CIFAR_PAD);
                let img = pad_crop(&img, CIFAR_PAD, dy, dx);
                maybe_flip(img, rng)
            }
            AugmentPolicy::ImagenetStandard => {
                let img = random_resized_crop(&img, rng);
                let img = maybe_flip(img, rng);
                colour_jitter(img, JITTER, rng)
            }
        };
        out.extend_from_slice(img.data());
    }
    Tensor4::from_vec(d, out).expect("same dims")
}

fn maybe_flip<R: Rng + ?Sized>(img: Tensor4, rng: &mut R) -> Tensor4 {
    if rng.random_bool(0.5) {
        flip_tensor(&img)
    } else {
        img
    }
}

/// Crop of the zero-padded image whose top-left corner is `(dy, dx)` in
/// padded coordinates; output size equals input size.
pub fn pad_crop(img: &Tensor4, pad: usize, dy: usize, dx: usize) -> Tensor4 {
    let d = img.dims();
    let mut out = Tensor4::zeros(d);
    for h in 0..d.height {
        let sh = (h + dy) as isize - pad as isize;
        if sh < 0 || sh >= d.height as isize {
            continue;
        }
        for w in 0..d.width {
            let sw = (w + dx) as isize - pad as isize;
            if sw < 0 || sw >= d.width as isize {
                continue;
            }
            for c in 0..d.channels {
                out.set(0, h, w, c, img.at(0, sh as usize, sw as usize, c));
            }
        }
    }
    out
}

/// Area in [0.08, 1] of the image and aspect ratio log-uniform in
/// [3/4, 4/3]; ten tries, then the full image. Resized back bilinearly.
fn random_resized_crop<R: Rng + ?Sized>(img: &Tensor4, rng: &mut R) -> Tensor4 {
    let d = img.dims();
    let (hh, ww) = (d.height as f64, d.width as f64);
    for _ in 0..10 {
        let area = hh * ww * rng.random_range(0.08..=1.0);
        let ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp();
        let cw = (area * ratio).sqrt().round();
        let ch = (area / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= ww && ch <= hh {
            let top = rng.random_range(0..=(hh - ch) as usize) as f64;
            let left = rng.random_range(0..=(ww - cw) as usize) as f64;
            return resize_crop(img, top, left, ch, cw);
        }
    }
    img.clone()
}

/// Bilinear resample of the `ch×cw` window at `(top, left)` to the full size,
/// sampling at pixel centres and clamping at the window border.
pub fn resize_crop(img: &Tensor4, top: f64, left: f64, ch: f64, cw: f64) -> Tensor4 {
    let d = img.dims();
    let mut out = Tensor4::zeros(d);
    let coord = |i: usize, n: usize, start: f64, len: f64| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * len / n as f64 - 0.5).clamp(0.0, len - 1.0) + start;
        let lo = s.floor();
        let hi = (lo + 1.0).min(start + len - 1.0);
        (lo as usize, hi as usize, s - lo)
    };
    for h in 0..d.height {
        let (y0, y1, fy) = coord(h, d.height, top, ch);
        for w in 0..d.width {
            let (x0, x1, fx) = coord(w, d.width, left, cw);
            for c in 0..d.channels {
                let v = (1.0 - fy) * ((1.0 - fx) * img.at(0, y0, x0, c) as f64 + fx * img.at(0, y0, x1, c) as f64)
                    + fy * ((1.0 - fx) * img.at(0, y1, x0, c) as f64 + fx * img.at(0, y1, x1, c) as f64);
                out.set(0, h, w, c, v as f32);
            }
        }
    }
    out
}

/// `v ← v·u`.
pub fn adjust_brightness(img: &mut Tensor4, u: f64) {
    for v in img.data_mut() {
        *v = (*v as f64 * u) as f32;
    }
}

fn luma(px: &[f32]) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

/// Blends each pixel with the image's mean luma.
pub fn adjust_contrast(img: &mut Tensor4, u: f64) {
    let c = img.dims().channels;
    if c != 3 {
        return;
    }
    let n = img.dims().pixels() as f64;
    let mean = img.data().chunks_exact(3).map(luma).sum::<f64>() / n;
    for v in img.data_mut() {
        *v = (mean + u * (*v as f64 - mean)) as f32;
    }
}

/// Blends each pixel with its own luma.
pub fn adjust_saturation(img: &mut Tensor4, u: f64) {
    if img.dims().channels != 3 {
        return;
    }
    for px in img.data_mut().chunks_exact_mut(3) {
        let gray = luma(px);
        for v in px {
            *v = (gray + u * (*v as f64 - gray)) as f32;
        }
    }
}

fn colour_jitter<R: Rng + ?Sized>(mut img: Tensor4, strength: f64, rng: &mut R) -> Tensor4 {
    let mut factor = || rng.random_range(1.0 - strength..=1.0 + strength);
    let (b, c, s) = (factor(), factor(), factor());
    adjust_brightness(&mut img, b);
    adjust_contrast(&mut img, c);
    adjust_saturation(&mut img, s);
    img
}

/// Everything besides the optimizer that shapes a training run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub optim: OptimConfig,
    pub train_reduction: Reduction,
    pub infer_reduction: Reduction,
    pub augment: AugmentPolicy,
    pub tta: bool,
    /// Where to write the weights if the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub top1_err: f64,
    pub top5_err: f64,
    pub samples: usize,
    pub ms_per_batch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-indexed.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1_err: f64,
    pub train_top5_err: f64,
    pub train_ms_per_batch: f64,
    pub test: Option<EvalResult>,
}

/// Top-1 and top-5 error in percent.
pub fn error_rates(probs: &ClassProbs, targets: &[usize]) -> (f64, f64) {
    let n = targets.len().max(1) as f64;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        top1 += (probs.argmax(r) != t) as usize;
        top5 += !probs.in_top_k(r, t, 5) as usize;
    }
    (100.0 * top1 as f64 / n, 100.0 * top5 as f64 / n)
}

/// Batches of `batch_size` consecutive indices, the last one possibly short.
fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

/// Eval-mode error over `ds`, normalizing with `norm`. Branch draws that
/// resample in eval use an RNG seeded from `seed`.
pub fn evaluate(
    model: &BranchedModel,
    ds: &Dataset,
    norm: &Normalization,
    reduction: Reduction,
    tta: bool,
    batch_size: usize,
    seed: u64,
) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut wrong1 = 0.0;
    let mut wrong5 = 0.0;
    let mut elapsed = 0.0;
    let mut count = 0usize;
    for idx in batches(&order, batch_size.max(1)) {
        let (mut x, y) = ds.batch(idx);
        norm.apply(&mut x);
        let start = Instant::now();
        let probs = if tta {
            model.tta_infer(&x, reduction, &mut rng)?
        } else {
            model.infer(&x, reduction, &mut rng)?
        };
        elapsed += start.elapsed().as_secs_f64();
        count += 1;
        let (e1, e5) = error_rates(&probs, &y);
        wrong1 += e1 * y.len() as f64;
        wrong5 += e5 * y.len() as f64;
    }
    let n = ds.len() as f64;
    Ok(EvalResult {
        top1_err: wrong1 / n,
        top5_err: wrong5 / n,
        samples: ds.len(),
        ms_per_batch: 1e3 * elapsed / count as f64,
    })
}

/// One optimization step on a normalized batch. Returns the loss and the
/// training probabilities reduced for inference.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut BranchedModel,
    x: &Tensor4,
    y: &[usize],
    setup: &TrainSetup,
    state: &mut SgdState,
    lr: f64,
    rng: &mut R,
) -> Result<(f64, ClassProbs)> {
    let reduction = setup.train_reduction;
    let mut g = Graph::new();
    let pass = model.forward(&mut g, x, Mode::Train, rng)?;
    let probs = branch::softmax(pass.logits.value());
    let (loss, dprobs) = branch::loss(&probs, y, pass.branches, reduction)?;
    let reduced = branch::reduce(&probs, pass.branches, reduction.for_inference())?;
    if !loss.is_finite() {
        return Ok((loss, reduced));
    }
    let dlogits = branch::softmax_backward(&probs, &dprobs);
    g.backward(&[(&pass.logits, dlogits)])?;
    let grads: Vec<Tensor4> = pass
        .params
        .iter()
        .map(|p| g.take_grad(p).unwrap_or_else(|| Tensor4::zeros(p.dims())))
        .collect();
    // Release the graph's references so the update happens in place.
    drop(g);
    let updates = pass.bn_updates;
    drop(pass.params);
    drop(pass.logits);
    sgd_step(&mut model.net.params, &grads, state, &setup.optim, lr)?;
    apply_bn_updates(&mut model.net.buffers, &updates);
    Ok((loss, reduced))
}

/// Trains `model` on `train_set` for `setup.optim.epochs` epochs, evaluating
/// on `test_set` after each epoch. `on_epoch` sees the stats and the model
/// (for checkpointing); an error from it stops training.
pub fn train<R, F>(
    model: &mut BranchedModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    setup: &TrainSetup,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<Vec<EpochStats>>
where
    R: Rng + ?Sized,
    F: FnMut(&EpochStats, &BranchedModel) -> Result<()>,
{
    let cfg = &setup.optim;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let norm = train_set.normalization.clone();
    let mut state = SgdState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut wrong1 = 0.0;
        let mut wrong5 = 0.0;
        let mut elapsed = 0.0;
        let mut steps = 0usize;
        for (batch, idx) in batches(&order, cfg.batch_size).enumerate() {
            let (raw, y) = train_set.batch(idx);
            let mut x = input_augment(&raw, setup.augment, rng);
            norm.apply(&mut x);
            let start = Instant::now();
            let step = match train_step(model, &x, &y, setup, &mut state, lr, rng) {
                Err(Error::NonFinite { .. }) => Ok((f64::NAN, None)),
                r => r.map(|(l, p)| (l, Some(p))),
            };
            let (loss, probs) = step?;
            elapsed += start.elapsed().as_secs_f64();
            let Some(probs) = probs.filter(|_| loss.is_finite()) else {
                if let Some(dir) = &setup.dump_dir {
                    std::fs::create_dir_all(dir)?;
                    checkpoint::save_network(&model.net, &dir.join("diverged.brnet"))?;
                }
                return Err(Error::Diverged {
                    epoch,
                    batch: batch + 1,
                    loss,
                });
            };
            loss_sum += loss * y.len() as f64;
            let (e1, e5) = error_rates(&probs, &y);
            wrong1 += e1 * y.len() as f64;
            wrong5 += e5 * y.len() as f64;
            steps += 1;
        }
        let n = train_set.len() as f64;
        let test = match test_set {
            Some(ds) => Some(evaluate(
                model,
                ds,
                &norm,
                setup.infer_reduction,
                setup.tta,
                cfg.batch_size,
                cfg.seed,
            )?),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_top1_err: wrong1 / n,
            train_top5_err: wrong5 / n,
            train_ms_per_batch: 1e3 * elapsed / steps as f64,
            test,
        };
        log::info!(
            "epoch {epoch}: lr {lr} loss {:.4} train err {:.2}%{}",
            stats.train_loss,
            stats.train_top1_err,
            stats
                .test
                .as_ref()
                .map(|t| format!(" test err {:.2}%", t.top1_err))
                .unwrap_or_default()
        );
        on_epoch(&stats, model)?;
        history.push(stats);
    }
    Ok(history)
}
