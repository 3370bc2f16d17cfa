//! DenseNet acoustic models: a 3x3 stem convolution, dense blocks separated by
//! compressing transition layers, and a BN-ReLU-pool-affine classifier head.
//!
//! Inside block `b`, layer `n` (1-indexed) sees the concatenation of the block
//! input and the `n - 1` previous layer outputs, i.e. `k * (n - 1) + c_in`
//! channels, and contributes `k` new ones. A transition maps `y` channels to
//! `floor(theta * y)` and halves the spatial extent (rounding up).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParameterSet, RunningStats, StatsSet};
use crate::tensor::{Real, Tensor};

/// Depth figure quoted for the reference 4x14 architecture. It does not match
/// the count of weighted layers in that structure; both are reported.
pub const QUOTED_DEPTH: usize = 65;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub compression: f64,
    /// Channels produced by the stem convolution.
    pub initial_channels: usize,
    /// Raw input channels (static, delta, delta-delta).
    pub input_channels: usize,
    pub num_classes: usize,
}

impl Default for DenseNetConfig {
    fn default() -> Self {
        DenseNetConfig {
            num_blocks: 4,
            layers_per_block: 14,
            growth_rate: 12,
            compression: 0.5,
            initial_channels: 16,
            input_channels: 3,
            num_classes: 10,
        }
    }
}

impl DenseNetConfig {
    /// Two blocks of two layers with growth rate 4; used for gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        DenseNetConfig {
            num_blocks: 2,
            layers_per_block: 2,
            growth_rate: 4,
            compression: 0.5,
            initial_channels: 4,
            input_channels: 3,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_blocks", self.num_blocks),
            ("layers_per_block", self.layers_per_block),
            ("growth_rate", self.growth_rate),
            ("initial_channels", self.initial_channels),
            ("input_channels", self.input_channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression must lie in (0, 1], got {}",
                self.compression
            )));
        }
        let mut c = self.initial_channels;
        for b in 1..self.num_blocks {
            let y = c + self.growth_rate * self.layers_per_block;
            c = compress(y, self.compression);
            if c == 0 {
                return Err(Error::Config(format!(
                    "transition {b} compresses {y} channels to 0 (compression {})",
                    self.compression
                )));
            }
        }
        Ok(())
    }
}

/// `floor(theta * y)`, guarded against representation error for exact
/// products such as `0.5 * 96`.
pub fn compress(y: usize, theta: f64) -> usize {
    (theta * y as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub in_channels: usize,
    pub growth_rate: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub name: String,
    pub in_channels: usize,
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StemConv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub name: String,
    pub in_channels: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Stem(StemConv),
    Block(DenseBlock),
    Transition(TransitionLayer),
    Head(ClassifierHead),
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Stem(s) => &s.name,
            Stage::Block(b) => &b.name,
            Stage::Transition(t) => &t.name,
            Stage::Head(h) => &h.name,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Stage::Stem(s) => s.out_channels,
            Stage::Block(b) => b.out_channels(),
            Stage::Transition(t) => t.out_channels,
            Stage::Head(h) => h.num_classes,
        }
    }
}

/// One conv layer's channel bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvChannels {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Pure channel arithmetic for every conv layer implied by `config`.
pub fn count_feature_maps(config: &DenseNetConfig) -> Vec<ConvChannels> {
    let mut report = vec![ConvChannels {
        name: "stem.conv".into(),
        in_channels: config.input_channels,
        out_channels: config.initial_channels,
    }];
    let mut c = config.initial_channels;
    for b in 1..=config.num_blocks {
        for n in 1..=config.layers_per_block {
            report.push(ConvChannels {
                name: format!("block{b}.layer{n}.conv"),
                in_channels: config.growth_rate * (n - 1) + c,
                out_channels: config.growth_rate,
            });
        }
        let y = c + config.growth_rate * config.layers_per_block;
        if b < config.num_blocks {
            c = compress(y, config.compression);
            report.push(ConvChannels {
                name: format!("trans{b}.conv"),
                in_channels: y,
                out_channels: c,
            });
        }
    }
    report
}

fn bn_params<F: Real>(params: &mut ParameterSet<F>, stats: &mut StatsSet<F>, prefix: &str, c: usize) -> Result<()> {
    params.insert(format!("{prefix}.bn.gamma"), Tensor::ones(&[c]))?;
    params.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[c]))?;
    stats.insert(format!("{prefix}.bn"), RunningStats::new(c));
    Ok(())
}

/// Fan-in scaled Gaussian, `N(0, gain / fan_in)`.
pub(crate) fn gaussian<F: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| F::of(normal.sample(rng))).collect())
        .expect("shape matches")
}

fn bn_relu<F: Real>(
    g: &mut Graph<F>,
    params: &ParameterSet<F>,
    stats: &mut StatsSet<F>,
    prefix: &str,
    x: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    let gamma = g.param(params, &format!("{prefix}.bn.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.bn.beta"))?;
    let y = g.batch_norm(x, gamma, beta, mode, stats.get_mut(&format!("{prefix}.bn"))?)?;
    Ok(g.relu(y))
}

impl StemConv {
    fn init<F: Real>(&self, params: &mut ParameterSet<F>, rng: &mut ChaCha8Rng) -> Result<()> {
        let shape = [self.out_channels, self.in_channels, 3, 3];
        params.insert(format!("{}.conv.weight", self.name), gaussian(&shape, 9 * self.in_channels, 2.0, rng))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, params: &ParameterSet<F>, x: NodeId) -> Result<NodeId> {
        let k = g.param(params, &format!("{}.conv.weight", self.name))?;
        g.conv2d(x, k, None)
    }
}

impl DenseLayer {
    fn init<F: Real>(&self, params: &mut ParameterSet<F>, stats: &mut StatsSet<F>, rng: &mut ChaCha8Rng) -> Result<()> {
        bn_params(params, stats, &self.name, self.in_channels)?;
        let shape = [self.growth_rate, self.in_channels, 3, 3];
        params.insert(format!("{}.conv.weight", self.name), gaussian(&shape, 9 * self.in_channels, 2.0, rng))
    }

    /// `H_n`: batch norm, ReLU, 3x3 convolution.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParameterSet<F>,
        stats: &mut StatsSet<F>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let h = bn_relu(g, params, stats, &self.name, x, mode)?;
        let k = g.param(params, &format!("{}.conv.weight", self.name))?;
        g.conv2d(h, k, None)
    }
}

impl DenseBlock {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.iter().map(|l| l.growth_rate).sum::<usize>()
    }

    /// Dense connectivity: layer n consumes `[x0, x1, ..., x_{n-1}]`; the
    /// block returns `[x0, x1, ..., x_L]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParameterSet<F>,
        stats: &mut StatsSet<F>,
        x0: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let c = g.value(x0).dims4("dense_block")?.1;
        if c != self.in_channels {
            return Err(Error::shape(
                "dense_block",
                format!("{} expects {} input channels, got {:?}", self.name, self.in_channels, g.value(x0).shape()),
            ));
        }
        let mut features = vec![x0];
        for layer in &self.layers {
            let input = if features.len() == 1 {
                x0
            } else {
                g.concat_channels(&features)?
            };
            let out = layer.forward(g, params, stats, input, mode)?;
            features.push(out);
        }
        g.concat_channels(&features)
    }
}

impl TransitionLayer {
    /// Batch norm, ReLU, 1x1 convolution to `floor(theta * y)` channels, then
    /// 2x2 average pooling.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParameterSet<F>,
        stats: &mut StatsSet<F>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dims4("transition")?;
        if c != self.in_channels {
            return Err(Error::shape(
                "transition",
                format!("{} expects {} channels, got {:?}", self.name, self.in_channels, g.value(x).shape()),
            ));
        }
        if h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "spatial collapse at {}: input is {h}x{w}, pooling needs at least 2x2",
                self.name
            )));
        }
        let r = bn_relu(g, params, stats, &self.name, x, mode)?;
        let k = g.param(params, &format!("{}.conv.weight", self.name))?;
        let y = g.conv2d(r, k, None)?;
        g.avg_pool_2x2(y)
    }

    fn init<F: Real>(&self, params: &mut ParameterSet<F>, stats: &mut StatsSet<F>, rng: &mut ChaCha8Rng) -> Result<()> {
        bn_params(params, stats, &self.name, self.in_channels)?;
        let shape = [self.out_channels, self.in_channels, 1, 1];
        params.insert(format!("{}.conv.weight", self.name), gaussian(&shape, self.in_channels, 2.0, rng))
    }
}

impl ClassifierHead {
    fn init<F: Real>(&self, params: &mut ParameterSet<F>, stats: &mut StatsSet<F>, rng: &mut ChaCha8Rng) -> Result<()> {
        bn_params(params, stats, &self.name, self.in_channels)?;
        params.insert(
            format!("{}.fc.weight", self.name),
            gaussian(&[self.in_channels, self.num_classes], self.in_channels, 1.0, rng),
        )?;
        params.insert(format!("{}.fc.bias", self.name), Tensor::zeros(&[self.num_classes]))
    }

    /// Batch norm, ReLU, global average pool, affine; returns logits.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParameterSet<F>,
        stats: &mut StatsSet<F>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let r = bn_relu(g, params, stats, &self.name, x, mode)?;
        let pooled = g.global_avg_pool(r)?;
        let w = g.param(params, &format!("{}.fc.weight", self.name))?;
        let b = g.param(params, &format!("{}.fc.bias", self.name))?;
        g.affine(pooled, w, b)
    }
}

/// Architecture of a DenseNet: the ordered stages and their channel counts.
/// Parameters live separately in a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    pub config: DenseNetConfig,
    pub stages: Vec<Stage>,
}

impl DenseNet {
    /// Lay out the stages; `prefix(i)` is prepended to the names of stage `i`.
    pub fn layout(config: &DenseNetConfig, prefix: impl Fn(usize) -> String) -> Result<Self> {
        config.validate()?;
        let mut stages = vec![Stage::Stem(StemConv {
            name: format!("{}stem", prefix(0)),
            in_channels: config.input_channels,
            out_channels: config.initial_channels,
        })];
        let mut c = config.initial_channels;
        for b in 1..=config.num_blocks {
            let p = prefix(stages.len());
            let block = DenseBlock {
                name: format!("{p}block{b}"),
                in_channels: c,
                layers: (1..=config.layers_per_block)
                    .map(|n| DenseLayer {
                        name: format!("{p}block{b}.layer{n}"),
                        in_channels: config.growth_rate * (n - 1) + c,
                        growth_rate: config.growth_rate,
                    })
                    .collect(),
            };
            let y = block.out_channels();
            stages.push(Stage::Block(block));
            if b < config.num_blocks {
                c = compress(y, config.compression);
                stages.push(Stage::Transition(TransitionLayer {
                    name: format!("{}trans{b}", prefix(stages.len())),
                    in_channels: y,
                    out_channels: c,
                }));
            } else {
                c = y;
            }
        }
        stages.push(Stage::Head(ClassifierHead {
            name: format!("{}head", prefix(stages.len())),
            in_channels: c,
            num_classes: config.num_classes,
        }));
        Ok(DenseNet {
            config: config.clone(),
            stages,
        })
    }

    /// Initialize parameters and running statistics in stage order.
    pub fn init_params<F: Real>(
        &self,
        params: &mut ParameterSet<F>,
        stats: &mut StatsSet<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for stage in &self.stages {
            match stage {
                Stage::Stem(s) => s.init(params, rng)?,
                Stage::Block(b) => {
                    for layer in &b.layers {
                        layer.init(params, stats, rng)?;
                    }
                }
                Stage::Transition(t) => t.init(params, stats, rng)?,
                Stage::Head(h) => h.init(params, stats, rng)?,
            }
        }
        Ok(())
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| {
            let n = s.name();
            n == name || n.rsplit('.').next() == Some(name)
        })
    }

    /// Run stages `range` starting from node `x`.
    pub fn forward_stages<F: Real>(
        &self,
        range: std::ops::Range<usize>,
        g: &mut Graph<F>,
        params: &ParameterSet<F>,
        stats: &mut StatsSet<F>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let mut cur = x;
        for stage in &self.stages[range] {
            cur = match stage {
                Stage::Stem(s) => s.forward(g, params, cur)?,
                Stage::Block(b) => b.forward(g, params, stats, cur, mode)?,
                Stage::Transition(t) => t.forward(g, params, stats, cur, mode)?,
                Stage::Head(h) => h.forward(g, params, stats, cur, mode)?,
            };
        }
        Ok(cur)
    }

    /// Weighted layers: every convolution plus the classifier.
    pub fn weighted_depth(&self) -> usize {
        count_feature_maps(&self.config).len() + 1
    }
}

/// A DenseNet with its parameters and batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub arch: DenseNet,
    pub params: ParameterSet<F>,
    pub stats: StatsSet<F>,
}

pub fn build_densenet<F: Real>(config: &DenseNetConfig, seed: u64) -> Result<Model<F>> {
    let arch = DenseNet::layout(config, |_| String::new())?;
    let mut params = ParameterSet::new();
    let mut stats = StatsSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    arch.init_params(&mut params, &mut stats, &mut rng)?;
    Ok(Model { arch, params, stats })
}

impl<F: Real> Model<F> {
    pub fn forward(&mut self, g: &mut Graph<F>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let n = self.arch.stages.len();
        self.arch
            .forward_stages(0..n, g, &self.params, &mut self.stats, x, mode)
    }

    /// Eval-mode logits `[B, num_classes]` for a `[B, C, H, W]` input.
    pub fn predict(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let mut stats = self.stats.clone();
        let n = self.arch.stages.len();
        let y = self
            .arch
            .forward_stages(0..n, &mut g, &self.params, &mut stats, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }
}
