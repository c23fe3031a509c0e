//! Network building blocks, parameter storage and the ResNet builders.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, BnMode};
use crate::tensor::{Dims, Tensor4};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Forward pass flavour. Controls batch-norm statistics and random draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Index into a [`TensorStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Named tensors. Parameters and batch-norm running statistics each live in
/// their own store; values are reference counted so forward passes can
/// borrow them without copying.
#[derive(Debug, Clone, Default)]
pub struct TensorStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor4>>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> TensorId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        TensorId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: TensorId) -> &Tensor4 {
        &self.values[id.0]
    }

    pub fn shared(&self, id: TensorId) -> Arc<Tensor4> {
        Arc::clone(&self.values[id.0])
    }

    /// Copy-on-write access: clones only if a forward pass still holds the value.
    pub fn get_mut(&mut self, id: TensorId) -> &mut Tensor4 {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: TensorId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> {
        (0..self.values.len()).map(TensorId)
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.names.iter().position(|n| n == name).map(TensorId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }
}

/// Pending running-statistics update from a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    mean: TensorId,
    var: TensorId,
    stats: BatchStats,
}

/// State threaded through one forward pass.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub mode: Mode,
    params: Vec<Var>,
    buffers: &'a TensorStore,
    updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    /// Parameters become graph leaves when the graph records, constants otherwise.
    pub fn new(graph: &'a mut Graph, mode: Mode, params: &TensorStore, buffers: &'a TensorStore) -> Self {
        let vars = params
            .ids()
            .map(|id| graph.leaf_shared(params.shared(id), true))
            .collect();
        Ctx {
            graph,
            mode,
            params: vars,
            buffers,
            updates: Vec::new(),
        }
    }

    /// Uses caller-made vars (one per parameter, in store order), e.g. to
    /// perturb weights without touching the store.
    pub fn with_vars(graph: &'a mut Graph, mode: Mode, params: Vec<Var>, buffers: &'a TensorStore) -> Self {
        Ctx {
            graph,
            mode,
            params,
            buffers,
            updates: Vec::new(),
        }
    }

    pub fn param(&self, id: TensorId) -> &Var {
        &self.params[id.0]
    }

    /// Parameter vars in store order, for reading gradients after backward.
    pub fn into_parts(self) -> (Vec<Var>, Vec<BnUpdate>) {
        (self.params, self.updates)
    }
}

/// Applies running-statistics updates collected during a train-mode pass.
pub fn apply_bn_updates(buffers: &mut TensorStore, updates: &[BnUpdate]) {
    for u in updates {
        let mut mean = buffers.get(u.mean).clone();
        let var = buffers.get_mut(u.var);
        u.stats
            .update_running(mean.data_mut(), var.data_mut(), BN_MOMENTUM);
        *buffers.get_mut(u.mean) = mean;
    }
}

/// Batch-norm parameter and buffer handles.
#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    gamma: TensorId,
    beta: TensorId,
    mean: TensorId,
    var: TensorId,
}

impl BnIds {
    fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let gamma = ctx.params[self.gamma.0].clone();
        let beta = ctx.params[self.beta.0].clone();
        match ctx.mode {
            Mode::Train => {
                let (y, stats) =
                    ops::batchnorm(ctx.graph, x, &gamma, &beta, BnMode::Train, BN_EPS)?;
                if let Some(stats) = stats {
                    ctx.updates.push(BnUpdate {
                        mean: self.mean,
                        var: self.var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mode = BnMode::Eval {
                    running_mean: ctx.buffers.get(self.mean).data(),
                    running_var: ctx.buffers.get(self.var).data(),
                };
                Ok(ops::batchnorm(ctx.graph, x, &gamma, &beta, mode, BN_EPS)?.0)
            }
        }
    }
}

/// One stage `F_i` of a network.
#[derive(Debug, Clone)]
pub enum Block {
    Conv {
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    BatchNorm(BnIds),
    Relu,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Linear {
        weight: TensorId,
        bias: Option<TensorId>,
    },
    /// BN→ReLU→conv→BN→ReLU→conv plus a shortcut. The 1×1 projection, when
    /// present, reads the pre-activated input.
    PreActResidual {
        bn1: BnIds,
        conv1: Box<Block>,
        bn2: BnIds,
        conv2: Box<Block>,
        projection: Option<Box<Block>>,
    },
    /// conv→BN→ReLU→conv→BN plus shortcut, then ReLU.
    BasicResidual {
        conv1: Box<Block>,
        bn1: BnIds,
        conv2: Box<Block>,
        bn2: BnIds,
        projection: Option<(Box<Block>, BnIds)>,
    },
    Sequential(Vec<Block>),
}

impl Block {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        match self {
            Block::Conv {
                weight,
                bias,
                stride,
                pad,
            } => {
                let w = ctx.params[weight.0].clone();
                let b = bias.map(|b| ctx.params[b.0].clone());
                ops::conv2d(ctx.graph, x, &w, b.as_ref(), *stride, *pad)
            }
            Block::BatchNorm(bn) => bn.forward(ctx, x),
            Block::Relu => ops::relu(ctx.graph, x),
            Block::AvgPool { kernel, stride } => ops::avgpool(ctx.graph, x, *kernel, *stride),
            Block::MaxPool {
                kernel,
                stride,
                pad,
            } => ops::maxpool(ctx.graph, x, *kernel, *stride, *pad),
            Block::GlobalAvgPool => ops::global_avgpool(ctx.graph, x),
            Block::Linear { weight, bias } => {
                let w = ctx.params[weight.0].clone();
                let b = bias.map(|b| ctx.params[b.0].clone());
                ops::linear(ctx.graph, x, &w, b.as_ref())
            }
            Block::PreActResidual {
                bn1,
                conv1,
                bn2,
                conv2,
                projection,
            } => {
                let a = bn1.forward(ctx, x)?;
                let a = ops::relu(ctx.graph, &a)?;
                let h = conv1.forward(ctx, &a)?;
                let h = bn2.forward(ctx, &h)?;
                let h = ops::relu(ctx.graph, &h)?;
                let h = conv2.forward(ctx, &h)?;
                let shortcut = match projection {
                    Some(p) => p.forward(ctx, &a)?,
                    None => x.clone(),
                };
                ops::add(ctx.graph, &h, &shortcut)
            }
            Block::BasicResidual {
                conv1,
                bn1,
                conv2,
                bn2,
                projection,
            } => {
                let h = conv1.forward(ctx, x)?;
                let h = bn1.forward(ctx, &h)?;
                let h = ops::relu(ctx.graph, &h)?;
                let h = conv2.forward(ctx, &h)?;
                let h = bn2.forward(ctx, &h)?;
                let shortcut = match projection {
                    Some((conv, bn)) => {
                        let s = conv.forward(ctx, x)?;
                        bn.forward(ctx, &s)?
                    }
                    None => x.clone(),
                };
                let y = ops::add(ctx.graph, &h, &shortcut)?;
                ops::relu(ctx.graph, &y)
            }
            Block::Sequential(blocks) => {
                let mut h = x.clone();
                for b in blocks {
                    h = b.forward(ctx, &h)?;
                }
                Ok(h)
            }
        }
    }

    /// Convolution and linear layers, counting projection shortcuts only
    /// when `with_projections` is set.
    pub fn weighted_layers(&self, with_projections: bool) -> usize {
        match self {
            Block::Conv { .. } | Block::Linear { .. } => 1,
            Block::PreActResidual { projection, .. } => {
                2 + usize::from(with_projections && projection.is_some())
            }
            Block::BasicResidual { projection, .. } => {
                2 + usize::from(with_projections && projection.is_some())
            }
            Block::Sequential(bs) => bs.iter().map(|b| b.weighted_layers(with_projections)).sum(),
            _ => 0,
        }
    }
}

/// Classifier head: optional BN+ReLU, global average pooling, linear layer.
/// Produces logits; softmax is applied by the consumer in f64.
#[derive(Debug, Clone)]
pub struct Head {
    pub norm: Option<BnIds>,
    pub fc: Block,
    pub num_classes: usize,
}

impl Head {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        if let Some(bn) = &self.norm {
            h = bn.forward(ctx, &h)?;
            h = ops::relu(ctx.graph, &h)?;
        }
        h = ops::global_avgpool(ctx.graph, &h)?;
        self.fc.forward(ctx, &h)
    }
}

/// A feed-forward network: `blocks[0]` is the stem, the head follows the last block.
///
/// Spots index the places where a branching can attach: `-1` is the input
/// image, `j` the output of `blocks[j]`. The last spot sits directly before
/// global pooling; [`Network::sentinel`] stands for "no change".
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: String,
    pub params: TensorStore,
    pub buffers: TensorStore,
    pub blocks: Vec<Block>,
    pub head: Head,
    /// Expected `(height, width, channels)` of an input image.
    pub input: (usize, usize, usize),
    /// Spot after the last block of each resolution stage.
    pub stage_ends: Vec<isize>,
}

impl Network {
    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    pub fn sentinel(&self) -> isize {
        self.blocks.len() as isize
    }

    /// Spot directly before global pooling.
    pub fn last_spot(&self) -> isize {
        self.blocks.len() as isize - 1
    }

    /// Every spot from the input image to the sentinel, inclusive.
    pub fn spots(&self) -> std::ops::RangeInclusive<isize> {
        -1..=self.sentinel()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Conv and linear layers along the main path (stem, residual convs, classifier).
    pub fn weighted_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.weighted_layers(false)).sum::<usize>()
            + self.head.fc.weighted_layers(false)
    }

    pub fn check_input(&self, x: &Tensor4) -> Result<()> {
        let d = x.dims();
        let (h, w, c) = self.input;
        if (d.height, d.width, d.channels) != (h, w, c) {
            return Err(Error::shape(
                "network input",
                format!("expected Bx{h}x{w}x{c}, got {d}"),
            ));
        }
        Ok(())
    }

    /// Runs blocks and head, calling `at_spot` on the input and after every
    /// block. The hook may replace the value (e.g. to branch). Returns logits.
    pub fn forward_with<F>(&self, ctx: &mut Ctx<'_>, x: Var, mut at_spot: F) -> Result<Var>
    where
        F: FnMut(isize, &mut Ctx<'_>, Var) -> Result<Var>,
    {
        let mut h = at_spot(-1, ctx, x)?;
        for (j, block) in self.blocks.iter().enumerate() {
            h = block.forward(ctx, &h)?;
            h = at_spot(j as isize, ctx, h)?;
        }
        self.head.forward(ctx, &h)
    }

    /// Logits without any spot hooks.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.forward_with(ctx, x, |_, _, v| Ok(v))
    }
}

struct Builder<'r, R: Rng> {
    params: TensorStore,
    buffers: TensorStore,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    /// Kaiming (fan-out) normal initialization, no bias.
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Block {
        let std = (2.0 / (k * k * cout) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let dims = Dims::new(k, k, cin, cout);
        let data = (0..dims.len())
            .map(|_| normal.sample(self.rng) as f32)
            .collect();
        let weight = self
            .params
            .add(format!("{name}.weight"), Tensor4::from_vec(dims, data).expect("sized"));
        Block::Conv {
            weight,
            bias: None,
            stride,
            pad,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIds {
        let d = Dims::new(1, 1, 1, c);
        BnIds {
            gamma: self.params.add(format!("{name}.gamma"), Tensor4::full(d, 1.0)),
            beta: self.params.add(format!("{name}.beta"), Tensor4::zeros(d)),
            mean: self.buffers.add(format!("{name}.running_mean"), Tensor4::zeros(d)),
            var: self.buffers.add(format!("{name}.running_var"), Tensor4::full(d, 1.0)),
        }
    }

    /// Uniform in `±1/√fan_in` for weight and bias.
    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Block {
        let bound = 1.0 / (fin as f32).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut sample = |d: Dims| {
            let data = (0..d.len()).map(|_| u.sample(self.rng)).collect();
            Tensor4::from_vec(d, data).expect("sized")
        };
        let w = sample(Dims::new(1, 1, fin, fout));
        let b = sample(Dims::new(1, 1, 1, fout));
        Block::Linear {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: Some(self.params.add(format!("{name}.bias"), b)),
        }
    }

    fn preact_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Block {
        let bn1 = self.bn(&format!("{name}.bn1"), cin);
        let conv1 = self.conv(&format!("{name}.conv1"), 3, cin, cout, stride, 1);
        let bn2 = self.bn(&format!("{name}.bn2"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), 3, cout, cout, 1, 1);
        let projection = (stride != 1 || cin != cout)
            .then(|| Box::new(self.conv(&format!("{name}.proj"), 1, cin, cout, stride, 0)));
        Block::PreActResidual {
            bn1,
            conv1: Box::new(conv1),
            bn2,
            conv2: Box::new(conv2),
            projection,
        }
    }

    fn basic_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Block {
        let conv1 = self.conv(&format!("{name}.conv1"), 3, cin, cout, stride, 1);
        let bn1 = self.bn(&format!("{name}.bn1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), 3, cout, cout, 1, 1);
        let bn2 = self.bn(&format!("{name}.bn2"), cout);
        let projection = (stride != 1 || cin != cout).then(|| {
            let conv = self.conv(&format!("{name}.proj"), 1, cin, cout, stride, 0);
            (Box::new(conv), self.bn(&format!("{name}.proj_bn"), cout))
        });
        Block::BasicResidual {
            conv1: Box::new(conv1),
            bn1,
            conv2: Box::new(conv2),
            bn2,
            projection,
        }
    }
}

/// Pre-activation ResNet of depth `6·depth_n + 2` for small images: a 3×3
/// stem, three stages of `depth_n` residual blocks (stride 2 between
/// stages) and a BN+ReLU head.
pub fn build_preact_resnet<R: Rng>(
    depth_n: usize,
    num_classes: usize,
    widths: [usize; 3],
    input: (usize, usize, usize),
    rng: &mut R,
) -> Result<Network> {
    let mut net = build_preact_stages(&[depth_n; 3], &widths, num_classes, input, rng)?;
    net.arch = format!("preact_resnet{}", 6 * depth_n + 2);
    Ok(net)
}

/// Pre-activation network with `stage_blocks[s]` residual blocks of width
/// `widths[s]` per stage, halving resolution at every stage after the first.
pub fn build_preact_stages<R: Rng>(
    stage_blocks: &[usize],
    widths: &[usize],
    num_classes: usize,
    input: (usize, usize, usize),
    rng: &mut R,
) -> Result<Network> {
    if stage_blocks.is_empty()
        || stage_blocks.len() != widths.len()
        || stage_blocks.contains(&0)
        || widths.contains(&0)
        || num_classes == 0
    {
        return Err(Error::invalid(format!(
            "preact network needs matching non-empty stage blocks and widths and classes > 0 \
             (got blocks {stage_blocks:?}, widths {widths:?}, {num_classes} classes)"
        )));
    }
    let mut b = Builder {
        params: TensorStore::new(),
        buffers: TensorStore::new(),
        rng,
    };
    let mut blocks = vec![b.conv("stem", 3, input.2, widths[0], 1, 1)];
    let mut stage_ends = Vec::with_capacity(widths.len());
    let mut cin = widths[0];
    for (s, (&n, &w)) in stage_blocks.iter().zip(widths).enumerate() {
        for i in 0..n {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            blocks.push(b.preact_block(&format!("stage{}.block{i}", s + 1), cin, w, stride));
            cin = w;
        }
        stage_ends.push(blocks.len() as isize - 1);
    }
    let norm = Some(b.bn("head.bn", cin));
    let fc = b.linear("head.fc", cin, num_classes);
    Ok(Network {
        arch: format!(
            "preact_custom{}",
            stage_blocks
                .iter()
                .zip(widths)
                .map(|(n, w)| format!("_{n}x{w}"))
                .collect::<String>()
        ),
        params: b.params,
        buffers: b.buffers,
        blocks,
        head: Head {
            norm,
            fc,
            num_classes,
        },
        input,
        stage_ends,
    })
}

/// ResNet-18 with base width 64.
pub fn build_resnet18<R: Rng>(num_classes: usize, input: (usize, usize, usize), rng: &mut R) -> Result<Network> {
    build_resnet18_width(num_classes, 64, input, rng)
}

/// ResNet-18 topology (7×7 stem, max pool, 4 stages of 2 basic blocks) with
/// stage widths `w, 2w, 4w, 8w`. Blocks: stem, max pool, then the 8 residual blocks.
pub fn build_resnet18_width<R: Rng>(
    num_classes: usize,
    width: usize,
    input: (usize, usize, usize),
    rng: &mut R,
) -> Result<Network> {
    if num_classes == 0 || width == 0 {
        return Err(Error::invalid("resnet18 needs classes and width > 0"));
    }
    let mut b = Builder {
        params: TensorStore::new(),
        buffers: TensorStore::new(),
        rng,
    };
    let stem_conv = b.conv("stem.conv", 7, input.2, width, 2, 3);
    let stem_bn = b.bn("stem.bn", width);
    let mut blocks = vec![
        Block::Sequential(vec![stem_conv, Block::BatchNorm(stem_bn), Block::Relu]),
        Block::MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    ];
    let mut cin = width;
    for s in 0..4 {
        let w = width << s;
        for i in 0..2 {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            blocks.push(b.basic_block(&format!("stage{}.block{i}", s + 1), cin, w, stride));
            cin = w;
        }
    }
    let fc = b.linear("head.fc", cin, num_classes);
    Ok(Network {
        arch: if width == 64 {
            "resnet18".into()
        } else {
            format!("resnet18_w{width}")
        },
        params: b.params,
        buffers: b.buffers,
        blocks,
        head: Head {
            norm: None,
            fc,
            num_classes,
        },
        input,
        stage_ends: vec![3, 5, 7, 9],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Hand count for the CIFAR pre-activation ResNet with widths 16/32/64.
    fn preact_param_formula(n: usize, classes: usize) -> usize {
        let conv = |k: usize, a: usize, b: usize| k * k * a * b;
        let bn = |c: usize| 2 * c;
        let block = |a: usize, b: usize, proj: bool| {
            bn(a) + conv(3, a, b) + bn(b) + conv(3, b, b) + if proj { conv(1, a, b) } else { 0 }
        };
        let stem = conv(3, 3, 16);
        let s1 = n * block(16, 16, false);
        let s2 = block(16, 32, true) + (n - 1) * block(32, 32, false);
        let s3 = block(32, 64, true) + (n - 1) * block(64, 64, false);
        stem + s1 + s2 + s3 + bn(64) + 64 * classes + classes
    }

    #[test]
    fn preact20_parameter_count() {
        let net = build_preact_resnet(3, 10, [16, 32, 64], (32, 32, 3), &mut rng(0)).unwrap();
        assert_eq!(net.num_parameters(), preact_param_formula(3, 10));
        assert_eq!(net.num_parameters(), 272_282);
        assert_eq!(net.weighted_layers(), 20);
    }

    #[test]
    fn preact110_layout() {
        let net = build_preact_resnet(18, 100, [16, 32, 64], (32, 32, 3), &mut rng(0)).unwrap();
        assert_eq!(net.weighted_layers(), 110);
        let residual = net
            .blocks
            .iter()
            .filter(|b| matches!(b, Block::PreActResidual { .. }))
            .count();
        assert_eq!(residual, 54);
        assert_eq!(net.spots().count(), 57);
        assert_eq!(net.stage_ends, vec![18, 36, 54]);
        assert_eq!(*net.stage_ends.last().unwrap(), net.last_spot());
        assert_eq!(net.num_parameters(), preact_param_formula(18, 100));
        let net56 = build_preact_resnet(9, 10, [16, 32, 64], (32, 32, 3), &mut rng(0)).unwrap();
        assert_eq!(net56.weighted_layers(), 56);
    }

    #[test]
    fn resnet18_counts() {
        let net = build_resnet18(1000, (224, 224, 3), &mut rng(0)).unwrap();
        assert_eq!(net.num_parameters(), 11_689_512);
        assert_eq!(net.weighted_layers(), 18);
        assert_eq!(net.spots().collect::<Vec<_>>(), (-1..=10).collect::<Vec<_>>());
        assert_eq!(net.last_spot(), 9);
        assert_eq!(net.stage_ends, vec![3, 5, 7, 9]);
    }

    #[test]
    fn forward_keeps_rows_and_head_sums_to_one() {
        let net = build_resnet18_width(5, 4, (32, 32, 3), &mut rng(1)).unwrap();
        let x = Tensor4::randn(Dims::new(3, 32, 32, 3), 1.0, &mut rng(2));
        let mut g = Graph::no_grad();
        let mut ctx = Ctx::new(&mut g, Mode::Eval, &net.params, &net.buffers);
        let logits = net.forward(&mut ctx, Var::constant(x)).unwrap();
        assert_eq!(logits.dims(), Dims::new(3, 1, 1, 5));
        let probs = crate::branch::softmax(logits.value());
        for r in 0..probs.rows() {
            let row = probs.row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut net = build_preact_resnet(1, 3, [2, 2, 2], (4, 4, 1), &mut rng(3)).unwrap();
        let x = Tensor4::randn(Dims::new(4, 4, 4, 1), 1.0, &mut rng(4)).map(|v| v + 2.0);
        let mut g = Graph::no_grad();
        let updates = {
            let mut ctx = Ctx::new(&mut g, Mode::Train, &net.params, &net.buffers);
            net.forward(&mut ctx, Var::constant(x)).unwrap();
            ctx.into_parts().1
        };
        // 1 residual block per stage (2 BN each) plus the head BN.
        assert_eq!(updates.len(), 7);
        let before = net.buffers.get(updates[0].mean).clone();
        apply_bn_updates(&mut net.buffers, &updates);
        let after = net.buffers.get(updates[0].mean);
        for ((b, a), m) in before.data().iter().zip(after.data()).zip(&updates[0].stats.mean) {
            assert!((a - (0.9 * b + 0.1 * m)).abs() < 1e-6);
        }
    }

    #[test]
    fn sharing_store_does_not_copy() {
        let net = build_preact_resnet(1, 3, [2, 2, 2], (4, 4, 1), &mut rng(3)).unwrap();
        let mut g = Graph::no_grad();
        let ctx = Ctx::new(&mut g, Mode::Eval, &net.params, &net.buffers);
        let id = net.params.ids().next().unwrap();
        assert!(Arc::ptr_eq(&ctx.param(id).shared(), &net.params.shared(id)));
    }

    fn jittered(t: &Tensor4, r: &mut ChaCha8Rng) -> Tensor4 {
        let mut t = t.clone();
        for v in t.data_mut() {
            *v += 0.3 * r.random::<f32>() - 0.15;
        }
        t
    }

    /// Checks `block` (params and input) against finite differences.
    /// Batch-norm affine parameters are randomized: with γ=1, β=0 a following
    /// train-mode BN cancels γ exactly and its gradient is pure rounding noise.
    fn check_block(
        mut build: impl FnMut(&mut Builder<'_, ChaCha8Rng>) -> Block,
        input: Dims,
        mode: Mode,
        seed: u64,
    ) -> crate::gradcheck::GradCheck {
        let mut r = rng(seed);
        let mut b = Builder {
            params: TensorStore::new(),
            buffers: TensorStore::new(),
            rng: &mut r,
        };
        let block = build(&mut b);
        let (params, mut buffers) = (b.params, b.buffers);
        let mut r = rng(seed + 1000);
        for id in buffers.ids().collect::<Vec<_>>() {
            let name = buffers.name(id).to_owned();
            let t = buffers.get_mut(id);
            for v in t.data_mut() {
                *v = if name.ends_with("var") { 0.5 + r.random::<f32>() } else { r.random::<f32>() - 0.5 };
            }
        }
        let mut inputs = vec![Tensor4::randn(input, 1.0, &mut r)];
        for (name, t) in params.iter() {
            let bn = name.ends_with("gamma") || name.ends_with("beta");
            inputs.push(if bn { jittered(t, &mut r) } else { t.clone() });
        }
        check_gradients(&inputs, 1e-3, seed, |g, vars| {
            let mut ctx = Ctx::new(g, mode, &params, &buffers);
            ctx.params = vars[1..].to_vec();
            block.forward(&mut ctx, &vars[0])
        })
        .unwrap()
    }

    /// Train-mode BN couples every unit of a channel, so one probe can move
    /// many ReLUs across zero; most elements must still be compared.
    const MAX_SKIPPED: f64 = 0.1;

    fn assert_block(name: &str, report: &crate::gradcheck::GradCheck) {
        assert!(
            report.max_rel_error() < 1e-2 && report.skipped_fraction() < MAX_SKIPPED,
            "{name}: errors {:?}, skipped {}/{}",
            report.rel_errors,
            report.skipped,
            report.total
        );
    }

    #[test]
    fn blocks_pass_gradcheck() {
        for case in 0..20u64 {
            let c = 2 + case as usize % 2;
            let d = Dims::new(3, 4, 5, c);
            for mode in [Mode::Train, Mode::Eval] {
                let r = check_block(|b| b.preact_block("p", c, c, 1), d, mode, case);
                assert_block(&format!("preact identity {mode:?} {case}"), &r);
                let r = check_block(|b| b.preact_block("p", c, c + 1, 2), d, mode, case);
                assert_block(&format!("preact projection {mode:?} {case}"), &r);
                let r = check_block(|b| b.basic_block("b", c, c, 1), d, mode, case);
                assert_block(&format!("basic identity {mode:?} {case}"), &r);
                let r = check_block(|b| b.basic_block("b", c, c + 1, 2), d, mode, case);
                assert_block(&format!("basic projection {mode:?} {case}"), &r);
                let r = check_block(
                    |b| {
                        let conv = b.conv("s", 7, c, 3, 2, 3);
                        let bn = b.bn("s.bn", 3);
                        Block::Sequential(vec![conv, Block::BatchNorm(bn), Block::Relu])
                    },
                    Dims::new(3, 8, 8, c),
                    mode,
                    case,
                );
                assert_block(&format!("stem {mode:?} {case}"), &r);
            }
            let r = check_block(|b| b.linear("fc", d.row_len(), 3), d, Mode::Eval, case);
            assert_block(&format!("linear {case}"), &r);
        }
    }

    #[test]
    fn head_passes_gradcheck() {
        for case in 0..20u64 {
            let mut r = rng(case);
            let mut b = Builder {
                params: TensorStore::new(),
                buffers: TensorStore::new(),
                rng: &mut r,
            };
            let head = Head {
                norm: Some(b.bn("h.bn", 3)),
                fc: b.linear("h.fc", 3, 4),
                num_classes: 4,
            };
            let (params, buffers) = (b.params, b.buffers);
            let mut inputs = vec![Tensor4::randn(Dims::new(3, 3, 4, 3), 1.0, &mut r)];
            inputs.extend(params.iter().map(|(_, t)| jittered(t, &mut r)));
            let report = check_gradients(&inputs, 1e-3, case, |g, vars| {
                let mut ctx = Ctx::new(g, Mode::Train, &params, &buffers);
                ctx.params = vars[1..].to_vec();
                head.forward(&mut ctx, &vars[0])
            })
            .unwrap();
            assert_block(&format!("head {case}"), &report);
        }
    }

    /// Whole networks, judged on the concatenated gradient of every
    /// parameter: individual tensors deep in an f32 network can carry
    /// gradients near the rounding floor of the forward pass.
    #[test]
    fn networks_pass_gradcheck() {
        for seed in 0..4u64 {
            let net = if seed % 2 == 0 {
                build_preact_resnet(1, 3, [2, 3, 3], (4, 4, 2), &mut rng(seed)).unwrap()
            } else {
                build_resnet18_width(3, 2, (8, 8, 2), &mut rng(seed)).unwrap()
            };
            let (h, w, c) = net.input;
            let mut r = rng(seed + 100);
            let mut inputs = vec![Tensor4::randn(Dims::new(3, h, w, c), 1.0, &mut r)];
            inputs.extend(net.params.iter().map(|(_, t)| jittered(t, &mut r)));
            for mode in [Mode::Train, Mode::Eval] {
                let report = check_gradients(&inputs, 1e-3, seed, |g, vars| {
                    let mut ctx = Ctx::new(g, mode, &net.params, &net.buffers);
                    ctx.params = vars[1..].to_vec();
                    net.forward(&mut ctx, vars[0].clone())
                })
                .unwrap();
                let err = report.joint_rel_error();
                assert!(
                    err < 1e-2 && report.skipped_fraction() < MAX_SKIPPED,
                    "{} {mode:?}: {err}, skipped {}/{}",
                    net.arch,
                    report.skipped,
                    report.total
                );
            }
        }
    }
}
