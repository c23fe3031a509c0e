//! Subcommand execution and run-directory bookkeeping.
//!
//! A run directory receives `config.echo.toml`, the subcommand's CSV and
//! checkpoints, and `manifest.json` with SHA-256 digests of every artifact.
//! A `.lock` file marks the directory as owned while the run is active.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use branchnet::branch::{BranchedModel, Reduction};
use branchnet::checkpoint;
use branchnet::data::{load_cifar, load_tensor_dir, subset, synth_shapes, CifarVariant, Dataset, Split};
use branchnet::impact::{self, BenchConfig, ImpactMode, SpotIndex};
use branchnet::layers::Network;
use branchnet::train::{self, EpochStats, TrainSetup};
use branchnet::Tensor4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{load_config, parse_name, DataKind, ExperimentConfig, SpotSelector};
use crate::error::{config, Result};
use crate::metrics::{self, ImpactRecord, MetricsRecord, TimingRecord};

/// Environment variable forcing single-threaded, timing-free output.
pub const DETERMINISTIC_ENV: &str = "BRANCHNET_DETERMINISTIC";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Impact,
    Bench,
    GenData,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Impact => "impact",
            Command::Bench => "bench",
            Command::GenData => "gen-data",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Config file or preset name.
    pub config: PathBuf,
    pub out: PathBuf,
    /// Replaces the configured seed list.
    pub seed: Option<u64>,
    /// Replaces the configured weights.
    pub weights: Option<String>,
    pub threads: Option<usize>,
    pub deterministic: bool,
}

/// True when the deterministic environment variable is set to a non-empty
/// value other than `0`.
pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(branchnet::Error::DirectoryLocked(dir.to_path_buf()).into())
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// State shared by the subcommands of one run.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    deterministic: bool,
    artifacts: Vec<PathBuf>,
    results: Value,
}

/// Runs `cmd`, writing artifacts under `opts.out`. On failure `error.json`
/// is written there as well, unless another run holds the directory.
pub fn run(cmd: Command, opts: &RunOptions) -> Result<()> {
    fs::create_dir_all(&opts.out)?;
    let lock = DirLock::acquire(&opts.out)?;
    let result = run_locked(cmd, opts);
    if let Err(e) = &result {
        let record = json!({ "kind": e.kind(), "message": e.to_string() });
        fs::write(opts.out.join("error.json"), serde_json::to_string_pretty(&record)?)?;
    }
    drop(lock);
    result
}

fn run_locked(cmd: Command, opts: &RunOptions) -> Result<()> {
    let _ = fs::remove_file(opts.out.join("error.json"));
    let threads = if opts.deterministic { 1 } else { opts.threads.unwrap_or(0) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| config("--threads", e.to_string()))?;
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut cfg = load_config(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = &opts.weights {
        cfg.weights = Some(if w == "random" {
            w.clone()
        } else {
            std::path::absolute(w)?.display().to_string()
        });
    }
    let mut run = Run {
        cfg,
        out: opts.out.clone(),
        deterministic: opts.deterministic,
        artifacts: Vec::new(),
        results: Value::Null,
    };
    let threads_used = pool.current_num_threads();
    pool.install(|| match cmd {
        Command::Train => run.train(),
        Command::Eval => run.eval(),
        Command::Impact => run.impact(),
        Command::Bench => run.bench(),
        Command::GenData => run.gen_data(),
    })?;
    run.write_manifest(cmd, started, clock.elapsed().as_secs_f64(), threads_used)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl Run {
    fn artifact(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let path = self.out.join(name);
        self.artifacts.push(path.clone());
        path
    }

    fn ms(&self, v: f64) -> Option<f64> {
        (!self.deterministic).then_some(v)
    }

    /// Train and test splits; records the normalization in the config.
    fn datasets(&mut self) -> Result<(Dataset, Dataset)> {
        let d = &self.cfg.dataset;
        let path = || d.path.clone().ok_or_else(|| config("dataset.path", "missing"));
        let (mut train_set, test_set) = match d.kind {
            DataKind::Cifar10 | DataKind::Cifar100 => {
                let v = if d.kind == DataKind::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                let p = path()?;
                (load_cifar(&p, v, Split::Train)?, load_cifar(&p, v, Split::Test)?)
            }
            DataKind::TensorDir => {
                let p = path()?;
                (load_tensor_dir(&p, Split::Train)?, load_tensor_dir(&p, Split::Test)?)
            }
            DataKind::Synth => {
                let s = d.synth.clone().unwrap_or_default();
                let tr = synth_shapes(s.train, s.size, s.classes, s.seed.wrapping_mul(2))?;
                let mut te = synth_shapes(s.test, s.size, s.classes, s.seed.wrapping_mul(2) + 1)?;
                te.split = Split::Test;
                (tr, te)
            }
        };
        if let Some(k) = d.per_class {
            train_set = subset(&train_set, k, d.subset_seed)?;
        }
        if let Some(n) = &d.normalization {
            let c = train_set.image_shape().2;
            if n.mean.len() != c || n.std.len() != c || n.std.iter().any(|s| !(*s > 0.0)) {
                return Err(config(
                    "dataset.normalization",
                    format!("needs {c} means and {c} positive stds"),
                ));
            }
            train_set = train_set.with_normalization(n.clone());
        }
        if test_set.image_shape() != train_set.image_shape() || test_set.num_classes != train_set.num_classes {
            return Err(config("dataset", "train and test splits differ in image shape or classes"));
        }
        self.cfg.dataset.normalization = Some(train_set.normalization.clone());
        Ok((train_set, test_set))
    }

    fn build(&self, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<Network> {
        Ok(self.cfg.arch.build(ds.num_classes, ds.image_shape(), rng)?)
    }

    fn setup(&self, seed: u64) -> TrainSetup {
        TrainSetup {
            optim: self.cfg.optim.to_optim(seed),
            train_reduction: self.cfg.train_reduction(),
            infer_reduction: self.cfg.infer_reduction(),
            augment: self.cfg.augment,
            tta: self.cfg.tta(),
            dump_dir: Some(self.out.join(format!("seed{seed}-dump"))),
        }
    }

    /// Trains one model per seed, returning the models and metric rows.
    fn train_all(&mut self, train_set: &Dataset, test_set: &Dataset) -> Result<(Vec<(u64, BranchedModel)>, Vec<MetricsRecord>)> {
        let mut models = Vec::new();
        let mut rows = Vec::new();
        let mut summaries = Vec::new();
        for seed in self.cfg.seeds.clone() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = self.build(train_set, &mut rng)?;
            let mut model = BranchedModel::new(net, self.cfg.branchings())?;
            let setup = self.setup(seed);
            let every = self.cfg.checkpoint_every;
            let mut saved = Vec::new();
            let out = self.out.clone();
            let history = train::train(&mut model, train_set, Some(test_set), &setup, &mut rng, |stats, m| {
                if every > 0 && stats.epoch % every == 0 {
                    let name = format!("seed{seed}-epoch{}.brnet", stats.epoch);
                    checkpoint::save_network(&m.net, &out.join(&name))?;
                    saved.push(name);
                }
                Ok(())
            })?;
            for name in saved {
                self.artifact(name);
            }
            let final_path = self.artifact(format!("seed{seed}-final.brnet"));
            checkpoint::save_network(&model.net, &final_path)?;
            for s in &history {
                rows.extend(self.epoch_rows(seed, s));
            }
            summaries.push(seed_summary(seed, &history));
            models.push((seed, model));
        }
        self.results = json!({ "seeds": summaries });
        Ok((models, rows))
    }

    fn epoch_rows(&self, seed: u64, s: &EpochStats) -> Vec<MetricsRecord> {
        let mut rows = vec![MetricsRecord {
            config_name: self.cfg.name.clone(),
            seed: Some(seed),
            epoch: s.epoch,
            split: "train".into(),
            top1_err: s.train_top1_err,
            top5_err: s.train_top5_err,
            ms_per_batch: self.ms(s.train_ms_per_batch),
            slowdown_vs_vanilla: None,
        }];
        if let Some(t) = &s.test {
            rows.push(MetricsRecord {
                config_name: self.cfg.name.clone(),
                seed: Some(seed),
                epoch: s.epoch,
                split: "test".into(),
                top1_err: t.top1_err,
                top5_err: t.top5_err,
                ms_per_batch: self.ms(t.ms_per_batch),
                slowdown_vs_vanilla: None,
            });
        }
        rows
    }

    fn write_echo(&mut self) -> Result<()> {
        let path = self.artifact("config.echo.toml");
        fs::write(path, self.cfg.echo()?)?;
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        let (train_set, test_set) = self.datasets()?;
        self.write_echo()?;
        let (_, rows) = self.train_all(&train_set, &test_set)?;
        let path = self.artifact("metrics.csv");
        metrics::write_csv(&path, &metrics::with_means(rows))
    }

    /// The network for `seed` from the configured weights.
    fn load_weights(&self, ds: &Dataset, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = self.build(ds, &mut rng)?;
        match self.cfg.weights.as_deref() {
            Some("random") => {}
            Some(p) => checkpoint::load_network(&mut net, Path::new(p))?,
            None => return Err(config("weights", "a checkpoint path or \"random\" is required")),
        }
        Ok(net)
    }

    fn eval(&mut self) -> Result<()> {
        let (train_set, test_set) = self.datasets()?;
        self.write_echo()?;
        let mut rows = Vec::new();
        for seed in self.cfg.seeds.clone() {
            let net = self.load_weights(&train_set, seed)?;
            let model = BranchedModel::new(net, self.cfg.branchings())?;
            let r = train::evaluate(
                &model,
                &test_set,
                &train_set.normalization,
                self.cfg.infer_reduction(),
                self.cfg.tta(),
                self.cfg.eval_batch_size(),
                seed,
            )?;
            rows.push(MetricsRecord {
                config_name: self.cfg.name.clone(),
                seed: Some(seed),
                epoch: 0,
                split: "test".into(),
                top1_err: r.top1_err,
                top5_err: r.top5_err,
                ms_per_batch: self.ms(r.ms_per_batch),
                slowdown_vs_vanilla: None,
            });
        }
        self.results = json!({ "test_top1_err": rows.iter().map(|r| r.top1_err).collect::<Vec<_>>() });
        let path = self.artifact("eval.csv");
        metrics::write_csv(&path, &metrics::with_means(rows))
    }

    fn impact(&mut self) -> Result<()> {
        let section = self
            .cfg
            .impact
            .clone()
            .ok_or_else(|| config("impact", "section required for the impact subcommand"))?;
        let (train_set, test_set) = self.datasets()?;
        self.write_echo()?;
        let spots: Vec<SpotIndex> = section
            .spots
            .iter()
            .flatten()
            .map(|s| match s {
                SpotSelector::Index(i) => SpotIndex::At(*i as isize),
                SpotSelector::Named(_) => SpotIndex::NoChanges,
            })
            .collect();
        let mut records = Vec::new();
        match section.mode {
            ImpactMode::Inference => {
                let seed = self.cfg.seeds[0];
                let net = if self.cfg.weights.is_some() {
                    self.load_weights(&train_set, seed)?
                } else {
                    self.cfg.seeds = vec![seed];
                    let (mut models, rows) = self.train_all(&train_set, &test_set)?;
                    let path = self.artifact("metrics.csv");
                    metrics::write_csv(&path, &rows)?;
                    models.remove(0).1.net
                };
                for spec in &section.transforms {
                    let report = impact::inference_impact(
                        &net,
                        &test_set,
                        &train_set.normalization,
                        spec,
                        &spots,
                        self.cfg.eval_batch_size(),
                    )?;
                    records.extend(report.rows.iter().map(|r| ImpactRecord::new(r, r.spot.describe(&net))));
                }
            }
            ImpactMode::Training => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let probe = self.build(&train_set, &mut rng)?;
                let setup = self.setup(0);
                for spec in &section.transforms {
                    for &spot in &spots {
                        let SpotIndex::At(s) = spot else { continue };
                        let row = impact::training_impact(
                            |rng| self.cfg.arch.build(train_set.num_classes, train_set.image_shape(), rng),
                            &train_set,
                            &test_set,
                            spec,
                            s,
                            &setup,
                            &self.cfg.seeds,
                        )?;
                        records.push(ImpactRecord::new(&row, spot.describe(&probe)));
                    }
                }
            }
        }
        let path = self.artifact("impact.csv");
        metrics::write_csv(&path, &records)
    }

    fn bench(&mut self) -> Result<()> {
        let section = self
            .cfg
            .bench
            .clone()
            .ok_or_else(|| config("bench", "section required for the bench subcommand"))?;
        let (train_set, test_set) = self.datasets()?;
        self.write_echo()?;
        let layout = self.cfg.arch.layout();
        let net = self.load_weights_or_random(&train_set)?;
        let mut names = section.configs.clone();
        let v = names.iter().position(|n| n == "vanilla").unwrap_or(0);
        let vanilla = names.remove(v);
        names.insert(0, vanilla);
        let mut configs = Vec::with_capacity(names.len());
        for name in &names {
            let plan = parse_name(name)?.ok_or_else(|| config("bench.configs", format!("'{name}' unnamed")))?;
            let branchings = plan
                .branchings(&layout)?
                .ok_or_else(|| config("bench.configs", format!("'{name}' unplaced")))?
                .into_iter()
                .map(|b| match b.spot {
                    SpotSelector::Index(i) => (i as isize, b.transforms),
                    SpotSelector::Named(_) => unreachable!("names place spots by index"),
                })
                .collect();
            configs.push(BenchConfig {
                name: name.clone(),
                model: BranchedModel::new(net.clone(), branchings)?,
                tta: plan.tta,
                reduction: plan.infer_reduction.unwrap_or(Reduction::Geo),
            });
        }
        let batch = bench_batch(&test_set, &train_set, section.batch_size);
        let rows = impact::benchmark(&configs, &batch, section.warmup, section.timed)?;
        let records: Vec<TimingRecord> = rows.iter().map(TimingRecord::from).collect();
        self.results = json!(records
            .iter()
            .map(|r| (r.config_name.clone(), r.slowdown_vs_vanilla))
            .collect::<BTreeMap<_, _>>());
        let path = self.artifact("timing.csv");
        metrics::write_csv(&path, &records)
    }

    fn load_weights_or_random(&mut self, ds: &Dataset) -> Result<Network> {
        if self.cfg.weights.is_none() {
            self.cfg.weights = Some("random".into());
        }
        self.load_weights(ds, self.cfg.seeds[0])
    }

    fn gen_data(&mut self) -> Result<()> {
        let (train_set, mut test_set) = self.datasets()?;
        test_set.normalization = train_set.normalization.clone();
        self.write_echo()?;
        for ds in [&train_set, &test_set] {
            let path = self.artifact(format!("{}.brnet", ds.split));
            ds.save(&path)?;
        }
        self.results = json!({
            "train_images": train_set.len(),
            "test_images": test_set.len(),
            "classes": train_set.num_classes,
            "image_shape": train_set.image_shape(),
        });
        Ok(())
    }

    fn write_manifest(&self, cmd: Command, started: SystemTime, wall: f64, threads: usize) -> Result<()> {
        let mut digests = BTreeMap::new();
        for p in &self.artifacts {
            let key = p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
            digests.insert(key, sha256_file(p)?);
        }
        let manifest = json!({
            "command": cmd.as_str(),
            "config_name": self.cfg.name,
            "seeds": self.cfg.seeds,
            "started_unix_s": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            "wall_time_s": wall,
            "threads": threads,
            "deterministic": self.deterministic,
            "version": env!("CARGO_PKG_VERSION"),
            "config_echo": self.cfg.echo()?,
            "artifacts": digests,
            "results": self.results,
        });
        fs::write(self.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// `n` normalized test images, cycling when the split is smaller.
fn bench_batch(test: &Dataset, train_set: &Dataset, n: usize) -> Tensor4 {
    let idx: Vec<usize> = (0..n).map(|i| i % test.len()).collect();
    let (mut x, _) = test.batch(&idx);
    train_set.normalization.apply(&mut x);
    x
}

fn seed_summary(seed: u64, history: &[EpochStats]) -> Value {
    let test = |s: &EpochStats| s.test.as_ref().map(|t| (t.top1_err, t.top5_err));
    let last = history.last().and_then(|s| test(s).map(|t| (s.epoch, t)));
    let best = history
        .iter()
        .filter_map(|s| test(s).map(|t| (s.epoch, t)))
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0));
    let entry = |e: Option<(usize, (f64, f64))>| {
        e.map(|(epoch, (t1, t5))| json!({ "epoch": epoch, "top1_err": t1, "top5_err": t5 }))
    };
    json!({ "seed": seed, "final": entry(last), "best": entry(best) })
}
