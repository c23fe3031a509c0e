//! Inside-impact sweeps and latency benchmarks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::{BranchedModel, Branchings, Reduction};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::layers::Network;
use crate::tensor::Tensor4;
use crate::train::{self, TrainSetup};
use crate::transform::{TransformKind, TransformSpec};

/// Where a transform is applied: `At(-1)` is the input image, `At(j)` the
/// output of block `j` (0 is the stem). `NoChanges` sorts after every spot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SpotIndex {
    At(isize),
    NoChanges,
}

impl SpotIndex {
    /// Every spot of `net` plus the sentinel, in order.
    pub fn all(net: &Network) -> Vec<SpotIndex> {
        (-1..=net.last_spot())
            .map(SpotIndex::At)
            .chain([SpotIndex::NoChanges])
            .collect()
    }

    /// Integer form; the sentinel maps to `net.sentinel()`.
    pub fn value(self, net: &Network) -> isize {
        match self {
            SpotIndex::At(s) => s,
            SpotIndex::NoChanges => net.sentinel(),
        }
    }

    pub fn from_value(v: isize, net: &Network) -> Result<Self> {
        if v == net.sentinel() {
            Ok(SpotIndex::NoChanges)
        } else if (-1..=net.last_spot()).contains(&v) {
            Ok(SpotIndex::At(v))
        } else {
            Err(Error::invalid(format!(
                "spot {v} out of range -1..={} for {}",
                net.sentinel(),
                net.arch
            )))
        }
    }

    /// Human-readable position, naming the first and last spots.
    pub fn describe(self, net: &Network) -> String {
        match self {
            SpotIndex::At(-1) => "input image".into(),
            SpotIndex::At(0) => "stem".into(),
            SpotIndex::At(s) if s == net.last_spot() => "before global pooling".into(),
            SpotIndex::At(s) => format!("block {s}"),
            SpotIndex::NoChanges => "no changes".into(),
        }
    }
}

impl fmt::Display for SpotIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpotIndex::At(s) => write!(f, "{s}"),
            SpotIndex::NoChanges => f.write_str("none"),
        }
    }
}

impl FromStr for SpotIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(SpotIndex::NoChanges);
        }
        s.parse()
            .map(SpotIndex::At)
            .map_err(|_| Error::invalid(format!("bad spot '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImpactMode {
    Inference,
    Training,
}

impl fmt::Display for ImpactMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImpactMode::Inference => "inference",
            ImpactMode::Training => "training",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactRow {
    pub spot: SpotIndex,
    pub transform: String,
    pub mode: ImpactMode,
    pub top1_err: f64,
    pub top5_err: f64,
    pub runs: usize,
    /// Standard error of the mean top-1 error over runs.
    pub stderr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImpactReport {
    pub rows: Vec<ImpactRow>,
}

impl ImpactReport {
    pub fn row(&self, spot: SpotIndex) -> Option<&ImpactRow> {
        self.rows.iter().find(|r| r.spot == spot)
    }
}

/// Short label such as `flip`, `rotate15` or `scale0.8-1.25`.
pub fn transform_label(spec: &TransformSpec) -> String {
    let base = match spec.kind {
        TransformKind::Identity => "identity",
        TransformKind::FlipH => "flip",
        TransformKind::Rotate => "rotate",
        TransformKind::Scale => "scale",
    };
    match (spec.random_range, spec.angle_deg.or(spec.factor)) {
        (Some([lo, hi]), _) => format!("{base}{lo}-{hi}"),
        (None, Some(v)) => format!("{base}{v}"),
        (None, None) => base.to_string(),
    }
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Evaluates an unbranched network with `spec` applied once at each spot.
/// The sentinel row is plain evaluation.
pub fn inference_impact(
    net: &Network,
    test: &Dataset,
    norm: &Normalization,
    spec: &TransformSpec,
    spots: &[SpotIndex],
    batch_size: usize,
) -> Result<ImpactReport> {
    spec.validate()?;
    if spec.random_range.is_some() {
        return Err(Error::invalid(
            "inference impact needs a deterministic transform (no random range)",
        ));
    }
    let mut rows = Vec::with_capacity(spots.len());
    for &spot in spots {
        let mut branchings = Branchings::new();
        if let SpotIndex::At(s) = spot {
            SpotIndex::from_value(s, net)?;
            branchings.insert(s, vec![spec.clone()]);
        }
        let model = BranchedModel::new(net.clone(), branchings)?;
        let r = train::evaluate(&model, test, norm, Reduction::Vanilla, false, batch_size, 0)?;
        rows.push(ImpactRow {
            spot,
            transform: transform_label(spec),
            mode: ImpactMode::Inference,
            top1_err: r.top1_err,
            top5_err: r.top5_err,
            runs: 1,
            stderr: 0.0,
        });
    }
    Ok(ImpactReport { rows })
}

/// The fixed branch paired with identity at evaluation time: flips stay
/// flips, rotations use 15°, scales keep drawing from the training range.
pub fn inference_partner(train_spec: &TransformSpec) -> TransformSpec {
    match train_spec.kind {
        TransformKind::Rotate => TransformSpec::rotate(15.0),
        TransformKind::Scale => TransformSpec {
            resample_in_eval: true,
            ..train_spec.clone()
        },
        _ => TransformSpec {
            random_range: None,
            ..train_spec.clone()
        },
    }
}

/// Trains one fresh network per seed branched into `[identity, train_spec]`
/// at `spot`, then evaluates with `[identity, inference_partner]` and the
/// inference reduction. `build` creates the untrained network from an RNG.
pub fn training_impact<B>(
    build: B,
    train_set: &Dataset,
    test_set: &Dataset,
    train_spec: &TransformSpec,
    spot: isize,
    setup: &TrainSetup,
    seeds: &[u64],
) -> Result<ImpactRow>
where
    B: Fn(&mut ChaCha8Rng) -> Result<Network>,
{
    if seeds.is_empty() {
        return Err(Error::invalid("training impact needs at least one seed"));
    }
    let partner = inference_partner(train_spec);
    let mut top1 = Vec::with_capacity(seeds.len());
    let mut top5 = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = build(&mut rng)?;
        let mut branchings = Branchings::new();
        branchings.insert(spot, vec![TransformSpec::identity(), train_spec.clone()]);
        let mut model = BranchedModel::new(net, branchings)?;
        let mut s = setup.clone();
        s.optim.seed = seed;
        train::train(&mut model, train_set, None, &s, &mut rng, |_, _| Ok(()))?;
        model
            .branchings
            .insert(spot, vec![TransformSpec::identity(), partner.clone()]);
        let r = train::evaluate(
            &model,
            test_set,
            &train_set.normalization,
            setup.infer_reduction,
            setup.tta,
            setup.optim.batch_size,
            seed,
        )?;
        top1.push(r.top1_err);
        top5.push(r.top5_err);
    }
    let (t1, se) = mean_stderr(&top1);
    Ok(ImpactRow {
        spot: SpotIndex::At(spot),
        transform: transform_label(train_spec),
        mode: ImpactMode::Training,
        top1_err: t1,
        top5_err: mean_stderr(&top5).0,
        runs: seeds.len(),
        stderr: se,
    })
}

pub const WARMUP_BATCHES: usize = 10;
pub const TIMED_BATCHES: usize = 50;
/// Below this median a vanilla batch is too short to time reliably.
pub const MIN_BATCH_NS: u128 = 200_000;

/// A model to time, run with or without mirrored test-time augmentation.
pub struct BenchConfig {
    pub name: String,
    pub model: BranchedModel,
    pub tta: bool,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub name: String,
    pub batch_size: usize,
    pub median_ms: f64,
    pub slowdown: f64,
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Median inference time per batch for each config and its ratio to the
/// first config, which must be an unbranched model without TTA. Configs are
/// interleaved batch by batch so drifts in machine speed hit all alike.
pub fn benchmark(configs: &[BenchConfig], batch: &Tensor4, warmup: usize, timed: usize) -> Result<Vec<TimingRow>> {
    if configs.len() < 2 {
        return Err(Error::invalid("benchmark needs vanilla and at least one other config"));
    }
    if configs[0].model.total_branches() != 1 || configs[0].tta {
        return Err(Error::invalid(format!(
            "first benchmark config '{}' must be vanilla",
            configs[0].name
        )));
    }
    if timed == 0 {
        return Err(Error::invalid("benchmark needs at least one timed batch"));
    }
    let mut times: Vec<Vec<u128>> = vec![Vec::with_capacity(timed); configs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for iter in 0..warmup + timed {
        for (c, t) in configs.iter().zip(&mut times) {
            let start = Instant::now();
            let out = if c.tta {
                c.model.tta_infer(batch, c.reduction, &mut rng)?
            } else {
                c.model.infer(batch, c.reduction, &mut rng)?
            };
            let ns = start.elapsed().as_nanos();
            std::hint::black_box(out);
            if iter >= warmup {
                t.push(ns);
            }
        }
    }
    let medians: Vec<u128> = times.into_iter().map(median).collect();
    if medians[0] < MIN_BATCH_NS {
        return Err(Error::TimerResolution { median_ns: medians[0] });
    }
    let base = medians[0] as f64;
    Ok(configs
        .iter()
        .zip(medians)
        .map(|(c, m)| TimingRow {
            name: c.name.clone(),
            batch_size: batch.dims().rows,
            median_ms: m as f64 / 1e6,
            slowdown: m as f64 / base,
        })
        .collect())
}
