//! Experiment configuration files.
//!
//! Configs are TOML. Optional fields that the experiment name already
//! determines (branchings, reductions, TTA) are filled in from the name, and
//! any that are given must agree with it. [`ExperimentConfig::resolve`]
//! produces the complete form written to `config.echo.toml`.

use std::fmt;
use std::path::{Path, PathBuf};

use branchnet::branch::{Branchings, Reduction};
use branchnet::data::Normalization;
use branchnet::impact::ImpactMode;
use branchnet::layers::{build_preact_resnet, build_preact_stages, build_resnet18_width, Network};
use branchnet::train::{AugmentPolicy, OptimConfig};
use branchnet::transform::{TransformKind, TransformSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

pub const ROTATION_RANGE: [f64; 2] = [-20.0, 20.0];
pub const SCALE_RANGE: [f64; 2] = [0.8, 1.25];

const CIFAR100_PREACT110: &str = include_str!("../presets/cifar100-preact110.toml");
const IMAGENET_RESNET18: &str = include_str!("../presets/imagenet-resnet18.toml");

/// Built-in configs, usable in place of a path.
pub const PRESETS: [(&str, &str); 2] = [
    ("cifar100-preact110", CIFAR100_PREACT110),
    ("imagenet-resnet18", IMAGENET_RESNET18),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchConfig {
    /// Depth `6·depth_n + 2`.
    PreactResnet {
        depth_n: usize,
        #[serde(default = "default_widths")]
        widths: [usize; 3],
    },
    Resnet18 {
        #[serde(default = "default_resnet18_width")]
        width: usize,
    },
    /// Pre-activation network with arbitrary stages.
    Custom { stage_blocks: Vec<usize>, widths: Vec<usize> },
}

fn default_widths() -> [usize; 3] {
    [16, 32, 64]
}

fn default_resnet18_width() -> usize {
    64
}

/// Spot positions of an architecture, known without building it.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchLayout {
    pub last_spot: isize,
    pub stage_ends: Vec<isize>,
}

impl ArchConfig {
    pub fn layout(&self) -> ArchLayout {
        match self {
            ArchConfig::PreactResnet { depth_n, .. } => {
                let n = *depth_n as isize;
                ArchLayout {
                    last_spot: 3 * n,
                    stage_ends: vec![n, 2 * n, 3 * n],
                }
            }
            ArchConfig::Resnet18 { .. } => ArchLayout {
                last_spot: 9,
                stage_ends: vec![3, 5, 7, 9],
            },
            ArchConfig::Custom { stage_blocks, .. } => {
                let ends: Vec<isize> = stage_blocks
                    .iter()
                    .scan(0isize, |acc, &n| {
                        *acc += n as isize;
                        Some(*acc)
                    })
                    .collect();
                ArchLayout {
                    last_spot: ends.last().copied().unwrap_or(0),
                    stage_ends: ends,
                }
            }
        }
    }

    pub fn build<R: Rng>(
        &self,
        num_classes: usize,
        input: (usize, usize, usize),
        rng: &mut R,
    ) -> branchnet::Result<Network> {
        Ok(match self {
            ArchConfig::PreactResnet { depth_n, widths } => {
                build_preact_resnet(*depth_n, num_classes, *widths, input, rng)?
            }
            ArchConfig::Resnet18 { width } => build_resnet18_width(num_classes, *width, input, rng)?,
            ArchConfig::Custom { stage_blocks, widths } => {
                build_preact_stages(stage_blocks, widths, num_classes, input, rng)?
            }
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            ArchConfig::PreactResnet { depth_n, widths } => *depth_n > 0 && !widths.contains(&0),
            ArchConfig::Resnet18 { width } => *width > 0,
            ArchConfig::Custom { stage_blocks, widths } => {
                !stage_blocks.is_empty()
                    && stage_blocks.len() == widths.len()
                    && !stage_blocks.contains(&0)
                    && !widths.contains(&0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(config("arch", format!("invalid architecture {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Cifar10,
    Cifar100,
    Synth,
    /// A directory holding `train.brnet` and `test.brnet`.
    TensorDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(default = "default_synth_train")]
    pub train: usize,
    #[serde(default = "default_synth_test")]
    pub test: usize,
    #[serde(default = "default_synth_size")]
    pub size: usize,
    #[serde(default = "default_synth_classes")]
    pub classes: usize,
    #[serde(default = "default_synth_seed")]
    pub seed: u64,
}

fn default_synth_train() -> usize {
    2000
}
fn default_synth_test() -> usize {
    1000
}
fn default_synth_size() -> usize {
    16
}
fn default_synth_classes() -> usize {
    8
}
fn default_synth_seed() -> u64 {
    1
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            train: default_synth_train(),
            test: default_synth_test(),
            size: default_synth_size(),
            classes: default_synth_classes(),
            seed: default_synth_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Class-balanced subsample of the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    /// Overrides the statistics computed from the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    pub epoch: usize,
    pub divisor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Vec<ScheduleStep>,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_lr0() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    128
}

impl OptimSection {
    pub fn to_optim(&self, seed: u64) -> OptimConfig {
        OptimConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            schedule: self.schedule.iter().map(|s| (s.epoch, s.divisor)).collect(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// A spot given as an index or by name: `input`, `stem`, `pre_pool`,
/// `pre_pool-K` (K spots earlier), `stage-N` (end of stage N, 1-based) or,
/// where allowed, `none` for the unmodified network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpotSelector {
    Index(i64),
    Named(String),
}

impl fmt::Display for SpotSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpotSelector::Index(i) => write!(f, "{i}"),
            SpotSelector::Named(s) => f.write_str(s),
        }
    }
}

/// Sentinel value returned for `none`.
pub const NO_CHANGES: isize = isize::MAX;

impl SpotSelector {
    /// Resolves against `layout`; `none` gives [`NO_CHANGES`] when allowed.
    pub fn resolve(&self, layout: &ArchLayout, allow_none: bool, field: &str) -> Result<isize> {
        let last = layout.last_spot;
        let v = match self {
            SpotSelector::Index(i) => *i as isize,
            SpotSelector::Named(s) => match s.as_str() {
                "input" => -1,
                "stem" => 0,
                "pre_pool" => last,
                "none" if allow_none => return Ok(NO_CHANGES),
                other => {
                    let parsed = if let Some(k) = other.strip_prefix("pre_pool-") {
                        k.parse::<isize>().ok().map(|k| last - k)
                    } else if let Some(n) = other.strip_prefix("stage-") {
                        n.parse::<usize>()
                            .ok()
                            .and_then(|n| n.checked_sub(1))
                            .and_then(|n| layout.stage_ends.get(n).copied())
                    } else {
                        None
                    };
                    parsed.ok_or_else(|| config(field, format!("unknown spot selector '{other}'")))?
                }
            },
        };
        if !(-1..=last).contains(&v) {
            return Err(config(field, format!("spot {self} resolves to {v}, outside -1..={last}")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchingConfig {
    pub spot: SpotSelector,
    pub transforms: Vec<TransformSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactSection {
    pub mode: ImpactMode,
    pub transforms: Vec<TransformSpec>,
    /// Defaults to every spot (plus `none` in inference mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spots: Option<Vec<SpotSelector>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Experiment names; must include `vanilla`.
    pub configs: Vec<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_timed")]
    pub timed: usize,
}

fn default_warmup() -> usize {
    branchnet::impact::WARMUP_BATCHES
}
fn default_timed() -> usize {
    branchnet::impact::TIMED_BATCHES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_reduction: Option<Reduction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infer_reduction: Option<Reduction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tta: Option<bool>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_batch_size: Option<usize>,
    /// Checkpoint for `eval`, `impact` and `bench`: a path, or `random` for
    /// freshly initialized weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub arch: ArchConfig,
    pub dataset: DatasetConfig,
    pub optim: OptimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branchings: Option<Vec<BranchingConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact: Option<ImpactSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Where a named configuration branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// No branching.
    Plain,
    /// Each of the last `n` spots before the final block.
    LastN(usize),
    /// Only the `k`-th spot counted back from the final block.
    Only(usize),
    /// Transform and reductions named; the spot is chosen elsewhere.
    Unplaced,
}

/// What an experiment name such as `flip-3-max,sum` or `vanilla-tta-geo`
/// specifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamePlan {
    pub transform: Option<TransformKind>,
    pub placement: Placement,
    pub train_reduction: Option<Reduction>,
    pub infer_reduction: Option<Reduction>,
    pub tta: bool,
}

fn parse_reductions(s: &str) -> Result<(Reduction, Reduction)> {
    let bad = |e: branchnet::Error| config("name", e.to_string());
    match s.split_once(',') {
        Some((t, i)) => Ok((t.parse().map_err(bad)?, i.parse().map_err(bad)?)),
        None => {
            let r: Reduction = s.parse().map_err(bad)?;
            Ok((r, r))
        }
    }
}

/// Parses the `TRANSFORM[-n|-onlyK]-TRAIN[,INFER][-tta]` and
/// `vanilla[-tta[-RED]]` naming scheme. Names starting with anything other
/// than `vanilla`, `flip`, `rotation` or `scale` are free-form (`Ok(None)`).
pub fn parse_name(name: &str) -> Result<Option<NamePlan>> {
    let parts: Vec<&str> = name.split('-').collect();
    let malformed = || config("name", format!("'{name}' does not follow the naming scheme"));
    let transform = match parts[0] {
        "vanilla" => None,
        "flip" => Some(TransformKind::FlipH),
        "rotation" => Some(TransformKind::Rotate),
        "scale" => Some(TransformKind::Scale),
        _ => return Ok(None),
    };
    let Some(kind) = transform else {
        let (tta, infer) = match &parts[1..] {
            [] => (false, Some(Reduction::Vanilla)),
            // Branch 0 alone would ignore the mirrored copy.
            ["tta"] => (true, Some(Reduction::Geo)),
            ["tta", red] => (true, Some(parse_reductions(red)?.1)),
            _ => return Err(malformed()),
        };
        return Ok(Some(NamePlan {
            transform: None,
            placement: Placement::Plain,
            train_reduction: Some(Reduction::Vanilla),
            infer_reduction: infer,
            tta,
        }));
    };
    let mut rest = &parts[1..];
    let tta = rest.last() == Some(&"tta");
    if tta {
        rest = &rest[..rest.len() - 1];
    }
    let (placement, reds) = match rest {
        [reds] => (Placement::Unplaced, *reds),
        [spot, reds] => {
            let placement = if let Some(k) = spot.strip_prefix("only") {
                Placement::Only(k.parse().map_err(|_| malformed())?)
            } else {
                Placement::LastN(spot.parse().map_err(|_| malformed())?)
            };
            (placement, *reds)
        }
        _ => return Err(malformed()),
    };
    if matches!(placement, Placement::LastN(0) | Placement::Only(0)) {
        return Err(config("name", format!("'{name}': spot count must be at least 1")));
    }
    let (train, infer) = parse_reductions(reds)?;
    Ok(Some(NamePlan {
        transform: Some(kind),
        placement,
        train_reduction: Some(train),
        infer_reduction: Some(infer),
        tta,
    }))
}

/// The transform a name's transform word stands for.
pub fn named_transform(kind: TransformKind) -> TransformSpec {
    match kind {
        TransformKind::Rotate => {
            TransformSpec::rotate(0.0).with_range(ROTATION_RANGE[0], ROTATION_RANGE[1])
        }
        TransformKind::Scale => TransformSpec::scale(1.0).with_range(SCALE_RANGE[0], SCALE_RANGE[1]),
        TransformKind::FlipH => TransformSpec::flip_h(),
        TransformKind::Identity => TransformSpec::identity(),
    }
}

impl NamePlan {
    /// Branchings implied by the name, or `None` when the spot is unnamed.
    pub fn branchings(&self, layout: &ArchLayout) -> Result<Option<Vec<BranchingConfig>>> {
        let spots: Vec<isize> = match self.placement {
            Placement::Plain => vec![],
            Placement::Unplaced => return Ok(None),
            Placement::LastN(n) => (1..=n as isize).rev().map(|k| layout.last_spot - k).collect(),
            Placement::Only(k) => vec![layout.last_spot - k as isize],
        };
        if let Some(&first) = spots.first() {
            if first < -1 {
                return Err(config(
                    "name",
                    format!("{:?} needs more spots than the architecture has", self.placement),
                ));
            }
        }
        let t = named_transform(self.transform.unwrap_or(TransformKind::Identity));
        Ok(Some(
            spots
                .into_iter()
                .map(|s| BranchingConfig {
                    spot: SpotSelector::Index(s as i64),
                    transforms: vec![TransformSpec::identity(), t.clone()],
                })
                .collect(),
        ))
    }
}

/// Parses TOML, reporting the path of the offending field.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| config(origin, e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config(if path == "." { origin.to_string() } else { path }, e.into_inner().to_string())
    })
}

/// Loads a config file, or a preset when `path` names one and no such file
/// exists. Relative dataset and weight paths are taken from the file's
/// directory (the working directory for presets).
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let (text, base) = if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (text, base)
    } else if let Some((_, text)) = PRESETS.iter().find(|(n, _)| Path::new(n) == path) {
        (text.to_string(), std::env::current_dir()?)
    } else {
        return Err(config(
            "--config",
            format!("{} is neither a file nor a preset", path.display()),
        ));
    };
    let cfg = parse_config_str(&text, &path.display().to_string())?;
    cfg.resolve(&base)
}

fn kinds(b: &[BranchingConfig]) -> Vec<(SpotSelector, Vec<TransformKind>)> {
    b.iter()
        .map(|x| (x.spot.clone(), x.transforms.iter().map(|t| t.kind).collect()))
        .collect()
}

impl ExperimentConfig {
    /// Fills every optional field, cross-checks the name against the
    /// structured fields, validates, and makes paths absolute under `base`.
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        self.arch.validate()?;
        let layout = self.arch.layout();
        if self.seeds.is_empty() {
            return Err(config("seeds", "at least one seed is required"));
        }
        self.optim.to_optim(0).validate()?;
        if self.eval_batch_size == Some(0) {
            return Err(config("eval_batch_size", "must be at least 1"));
        }
        self.eval_batch_size.get_or_insert(self.optim.batch_size);

        let plan = parse_name(&self.name)?;
        let agree = |field: &str, given: Option<String>, named: Option<String>| -> Result<()> {
            match (given, named) {
                (Some(g), Some(n)) if g != n => Err(config(
                    field,
                    format!("'{g}' contradicts name '{}' which implies '{n}'", self.name),
                )),
                _ => Ok(()),
            }
        };
        if let Some(p) = &plan {
            agree(
                "train_reduction",
                self.train_reduction.map(|r| r.to_string()),
                p.train_reduction.map(|r| r.to_string()),
            )?;
            agree(
                "infer_reduction",
                self.infer_reduction.map(|r| r.to_string()),
                p.infer_reduction.map(|r| r.to_string()),
            )?;
            agree("tta", self.tta.map(|t| t.to_string()), Some(p.tta.to_string()))?;
            self.train_reduction = self.train_reduction.or(p.train_reduction);
            self.infer_reduction = self.infer_reduction.or(p.infer_reduction);
            self.tta = Some(p.tta);
            let named = p.branchings(&layout)?;
            match (&self.branchings, named) {
                (Some(given), Some(named)) => {
                    let resolved = resolve_branchings(given, &layout)?;
                    if kinds(&resolved) != kinds(&named) {
                        return Err(config(
                            "branchings",
                            format!("do not match name '{}' (expected {:?})", self.name, kinds(&named)),
                        ));
                    }
                }
                (Some(given), None) => {
                    let kind = p.transform.unwrap_or(TransformKind::Identity);
                    let ok = !given.is_empty()
                        && given
                            .iter()
                            .all(|b| b.transforms.iter().any(|t| t.kind == kind));
                    if !ok {
                        return Err(config(
                            "branchings",
                            format!("name '{}' needs every branching to include {kind:?}", self.name),
                        ));
                    }
                }
                (None, Some(named)) => self.branchings = Some(named),
                (None, None) => {
                    return Err(config(
                        "branchings",
                        format!("name '{}' does not place its branchings; list them", self.name),
                    ))
                }
            }
        }
        self.train_reduction.get_or_insert(Reduction::Vanilla);
        self.infer_reduction.get_or_insert(self.train_reduction.unwrap_or(Reduction::Vanilla));
        self.tta.get_or_insert(false);
        let branchings = resolve_branchings(self.branchings.as_deref().unwrap_or(&[]), &layout)?;
        self.to_branchings_checked(&branchings)?;
        self.branchings = Some(branchings);

        if let Some(imp) = &mut self.impact {
            if imp.transforms.is_empty() {
                return Err(config("impact.transforms", "at least one transform is required"));
            }
            for (i, t) in imp.transforms.iter().enumerate() {
                t.validate().map_err(|e| config(format!("impact.transforms[{i}]"), e.to_string()))?;
            }
            let allow_none = imp.mode == ImpactMode::Inference;
            let spots = match &imp.spots {
                Some(s) => s.clone(),
                None => {
                    let mut all: Vec<SpotSelector> =
                        (-1..=layout.last_spot).map(|s| SpotSelector::Index(s as i64)).collect();
                    if allow_none {
                        all.push(SpotSelector::Named("none".into()));
                    }
                    all
                }
            };
            let mut resolved = Vec::with_capacity(spots.len());
            for (i, s) in spots.iter().enumerate() {
                let v = s.resolve(&layout, allow_none, &format!("impact.spots[{i}]"))?;
                resolved.push(if v == NO_CHANGES {
                    SpotSelector::Named("none".into())
                } else {
                    SpotSelector::Index(v as i64)
                });
            }
            imp.spots = Some(resolved);
        }
        if let Some(bench) = &self.bench {
            if !bench.configs.iter().any(|c| c == "vanilla") {
                return Err(config("bench.configs", "must include 'vanilla'"));
            }
            if bench.batch_size == 0 || bench.timed == 0 {
                return Err(config("bench", "batch_size and timed must be at least 1"));
            }
            for (i, c) in bench.configs.iter().enumerate() {
                let field = format!("bench.configs[{i}]");
                let p = parse_name(c)?.ok_or_else(|| config(&field, format!("'{c}' is not a named configuration")))?;
                if p.branchings(&layout)?.is_none() {
                    return Err(config(field, format!("'{c}' does not place its branchings")));
                }
            }
        }

        match self.dataset.kind {
            DataKind::Synth => {
                let s = self.dataset.synth.get_or_insert_with(SynthSection::default);
                if s.classes == 0 || s.classes > 8 || s.size < 4 || s.train == 0 || s.test == 0 {
                    return Err(config("dataset.synth", format!("invalid synthetic dataset {s:?}")));
                }
            }
            _ => {
                if self.dataset.synth.is_some() {
                    return Err(config("dataset.synth", "only valid with kind = \"synth\""));
                }
                let p = self
                    .dataset
                    .path
                    .as_ref()
                    .ok_or_else(|| config("dataset.path", "required for this dataset kind"))?;
                self.dataset.path = Some(base.join(p));
            }
        }
        if let Some(w) = &self.weights {
            if w != "random" {
                self.weights = Some(base.join(w).display().to_string());
            }
        }
        self.notes = self.notes_for(&layout);
        Ok(self)
    }

    fn to_branchings_checked(&self, b: &[BranchingConfig]) -> Result<()> {
        for (i, br) in b.iter().enumerate() {
            if br.transforms.is_empty() {
                return Err(config(format!("branchings[{i}].transforms"), "must not be empty"));
            }
            for (j, t) in br.transforms.iter().enumerate() {
                t.validate()
                    .map_err(|e| config(format!("branchings[{i}].transforms[{j}]"), e.to_string()))?;
            }
        }
        Ok(())
    }

    fn notes_for(&self, layout: &ArchLayout) -> Vec<String> {
        let mut notes = vec![format!(
            "spots run from -1 (input image) to {} (before global pooling); the learning rate is divided at the start of each listed 1-indexed epoch",
            layout.last_spot
        )];
        if self.infer_reduction == Some(Reduction::None) {
            notes.push("infer_reduction none predicts with the geometric mean of branch outputs".into());
        }
        if self.augment != AugmentPolicy::None && self.branchings.as_ref().is_some_and(|b| !b.is_empty()) {
            notes.push("input augmentation includes random horizontal flips in addition to in-network branches".into());
        }
        if self.dataset.kind == DataKind::Synth && self.augment != AugmentPolicy::None {
            notes.push(
                "synthetic classes come in mirror pairs, so input flip augmentation mislabels half the images".into(),
            );
        }
        notes
    }

    /// Branchings keyed by spot. Call on resolved configs only.
    pub fn branchings(&self) -> Branchings {
        self.branchings
            .iter()
            .flatten()
            .map(|b| match b.spot {
                SpotSelector::Index(i) => (i as isize, b.transforms.clone()),
                SpotSelector::Named(_) => unreachable!("resolved configs use indices"),
            })
            .collect()
    }

    pub fn train_reduction(&self) -> Reduction {
        self.train_reduction.unwrap_or(Reduction::Vanilla)
    }

    pub fn infer_reduction(&self) -> Reduction {
        self.infer_reduction.unwrap_or(self.train_reduction())
    }

    pub fn tta(&self) -> bool {
        self.tta.unwrap_or(false)
    }

    pub fn eval_batch_size(&self) -> usize {
        self.eval_batch_size.unwrap_or(self.optim.batch_size)
    }

    /// The complete TOML form.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config("echo", e.to_string()))
    }
}

fn resolve_branchings(given: &[BranchingConfig], layout: &ArchLayout) -> Result<Vec<BranchingConfig>> {
    let mut out = Vec::with_capacity(given.len());
    for (i, b) in given.iter().enumerate() {
        let v = b.spot.resolve(layout, false, &format!("branchings[{i}].spot"))?;
        if out.iter().any(|o: &BranchingConfig| o.spot == SpotSelector::Index(v as i64)) {
            return Err(config(format!("branchings[{i}].spot"), format!("spot {v} listed twice")));
        }
        out.push(BranchingConfig {
            spot: SpotSelector::Index(v as i64),
            transforms: b.transforms.clone(),
        });
    }
    out.sort_by_key(|b| match b.spot {
        SpotSelector::Index(i) => i,
        SpotSelector::Named(_) => i64::MAX,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base(name: &str, extra: &str) -> String {
        format!(
            r#"
name = "{name}"
{extra}
[arch]
kind = "preact_resnet"
depth_n = 18

[dataset]
kind = "synth"

[optim]
epochs = 2
"#
        )
    }

    fn resolve(text: &str) -> Result<ExperimentConfig> {
        parse_config_str(text, "test.toml")?.resolve(Path::new("/base"))
    }

    fn spots(cfg: &ExperimentConfig) -> Vec<isize> {
        cfg.branchings().keys().copied().collect()
    }

    #[test]
    fn layouts_match_built_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for arch in [
            ArchConfig::PreactResnet {
                depth_n: 2,
                widths: [2, 2, 2],
            },
            ArchConfig::Resnet18 { width: 2 },
            ArchConfig::Custom {
                stage_blocks: vec![1, 3],
                widths: vec![2, 4],
            },
        ] {
            let net = arch.build(3, (16, 16, 3), &mut rng).unwrap();
            let layout = arch.layout();
            assert_eq!(layout.last_spot, net.last_spot(), "{arch:?}");
            assert_eq!(layout.stage_ends, net.stage_ends, "{arch:?}");
        }
    }

    #[test]
    fn flip_n_expands_to_last_spots() {
        let cfg = resolve(&base("flip-4-max", "")).unwrap();
        // PreAct-110: spots -1..=54; the final block follows spot 53.
        assert_eq!(spots(&cfg), vec![50, 51, 52, 53]);
        assert_eq!(cfg.train_reduction(), Reduction::Max);
        assert_eq!(cfg.infer_reduction(), Reduction::Max);
        assert!(!cfg.tta());
        for specs in cfg.branchings().values() {
            assert_eq!(specs, &vec![TransformSpec::identity(), TransformSpec::flip_h()]);
        }
    }

    #[test]
    fn flip_only_is_one_spot() {
        let cfg = resolve(&base("flip-only2-none,geo", "")).unwrap();
        assert_eq!(spots(&cfg), vec![52]);
        assert_eq!(cfg.train_reduction(), Reduction::None);
        assert_eq!(cfg.infer_reduction(), Reduction::Geo);
    }

    #[test]
    fn bad_reduction_names_the_field() {
        let err = resolve(&base("flip-3-mux", "")).unwrap_err().to_string();
        assert!(err.contains("`name`") && err.contains("mux"), "{err}");
        let err = resolve(&base("custom", "train_reduction = \"mux\"")).unwrap_err().to_string();
        assert!(err.contains("train_reduction"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = resolve(&base("vanilla", "colour = 1")).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
        let text = base("vanilla", "").replace("epochs = 2", "epochs = 2\nmomentun = 0.5");
        let err = resolve(&text).unwrap_err().to_string();
        assert!(err.contains("optim") && err.contains("momentun"), "{err}");
        let text = base("vanilla", "").replace("depth_n = 18", "depth_n = 18\ndepth = 3");
        assert!(resolve(&text).is_err());
    }

    #[test]
    fn name_contradictions_are_errors() {
        assert!(resolve(&base("flip-3-max", "train_reduction = \"sum\"")).is_err());
        assert!(resolve(&base("flip-3-max,sum", "infer_reduction = \"sum\"")).is_ok());
        assert!(resolve(&base("vanilla-tta-sum", "tta = false")).is_err());
        let wrong_spot = r#"
[[branchings]]
spot = "pre_pool"
transforms = [{ kind = "identity" }, { kind = "flip_h" }]
"#;
        let text = format!("{}{wrong_spot}", base("flip-1-max", ""));
        assert!(resolve(&text).is_err());
        let right = wrong_spot.replace("\"pre_pool\"", "\"pre_pool-1\"");
        let cfg = resolve(&format!("{}{right}", base("flip-1-max", ""))).unwrap();
        assert_eq!(spots(&cfg), vec![53]);
    }

    #[test]
    fn unplaced_names_need_explicit_spots() {
        assert!(resolve(&base("rotation-none,geo", "")).is_err());
        let text = format!(
            "{}{}",
            base("rotation-none,geo", ""),
            r#"
[[branchings]]
spot = "stage-1"
transforms = [{ kind = "identity" }, { kind = "rotate", angle_deg = 0.0, random_range = [-20.0, 20.0] }]
"#
        );
        let cfg = resolve(&text).unwrap();
        assert_eq!(spots(&cfg), vec![18]);
    }

    #[test]
    fn free_form_names_use_fields() {
        let cfg = resolve(&base("my-run", "")).unwrap();
        assert!(cfg.branchings().is_empty());
        assert_eq!(cfg.train_reduction(), Reduction::Vanilla);
    }

    #[test]
    fn selectors() {
        let layout = ArchLayout {
            last_spot: 9,
            stage_ends: vec![3, 5, 7, 9],
        };
        let r = |s: SpotSelector| s.resolve(&layout, true, "x");
        assert_eq!(r(SpotSelector::Named("input".into())).unwrap(), -1);
        assert_eq!(r(SpotSelector::Named("stem".into())).unwrap(), 0);
        assert_eq!(r(SpotSelector::Named("pre_pool-2".into())).unwrap(), 7);
        assert_eq!(r(SpotSelector::Named("stage-2".into())).unwrap(), 5);
        assert_eq!(r(SpotSelector::Named("none".into())).unwrap(), NO_CHANGES);
        assert!(r(SpotSelector::Named("stage-5".into())).is_err());
        assert!(r(SpotSelector::Named("stage-0".into())).is_err());
        assert!(r(SpotSelector::Index(10)).is_err());
        assert!(SpotSelector::Named("none".into()).resolve(&layout, false, "x").is_err());
    }

    #[test]
    fn echo_is_complete_and_stable() {
        let cfg = resolve(&base("flip-2-max", "")).unwrap();
        let echo = cfg.echo().unwrap();
        for key in ["lr0", "momentum", "nesterov", "weight_decay", "batch_size", "train_reduction", "infer_reduction", "tta", "seeds", "augment", "widths", "eval_batch_size", "[[branchings]]", "[dataset.synth]"] {
            assert!(echo.contains(key), "echo lacks {key}:\n{echo}");
        }
        let again = parse_config_str(&echo, "echo").unwrap().resolve(Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.echo().unwrap(), echo);
    }

    #[test]
    fn bench_names_must_place_branchings() {
        let ok = "[bench]\nconfigs = [\"vanilla\", \"flip-1-max\", \"vanilla-tta-max\"]\n";
        assert!(resolve(&format!("{}{ok}", base("vanilla", ""))).is_ok());
        let no_vanilla = "[bench]\nconfigs = [\"flip-1-max\"]\n";
        assert!(resolve(&format!("{}{no_vanilla}", base("vanilla", ""))).is_err());
        let unplaced = "[bench]\nconfigs = [\"vanilla\", \"flip-max,max\"]\n";
        assert!(resolve(&format!("{}{unplaced}", base("vanilla", ""))).is_err());
    }
}
