//! Parameterized building blocks. Each block owns [`ParamId`]s into a
//! [`ParamStore`] and records its computation on the graph held by a [`Ctx`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{BnStats, ConvSpec, Graph, ParamId, Var};
use super::tensor::Tensor;
use super::NnError;

/// Half-width of the uniform weight initialization.
pub const INIT_RANGE: f64 = 0.05;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, ..Default::default() }
    }

    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in ±[`INIT_RANGE`], drawn from a stream keyed by the
    /// parameter name so unrelated parameters keep their values when the
    /// architecture changes elsewhere.
    pub fn add_uniform(&mut self, name: String, shape: [usize; 4]) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&name));
        let t = Tensor::from_fn(shape, |_| rng.random_range(-INIT_RANGE..=INIT_RANGE));
        self.add(name, t)
    }

    pub fn add_filled(&mut self, name: String, shape: [usize; 4], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffer {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-forward recording state.
pub struct Ctx<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    buffers: &'a [BnBuffer],
    mode: Mode,
    /// Batch statistics observed in training mode: buffer index, mean,
    /// variance and values per channel.
    pub bn_updates: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, buffers: &'a [BnBuffer], mode: Mode) -> Self {
        Ctx { graph: Graph::new(), params, buffers, mode, bn_updates: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(id, self.params.value(id))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, bias: bool) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), [cout, cin / spec.groups, k, k]);
        let bias = bias.then(|| store.add_filled(format!("{name}.bias"), [cout, 1, 1, 1], 0.0));
        Conv { weight, bias, spec }
    }

    /// 1×1 convolution with bias: a per-position linear map.
    pub fn linear(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, name, cin, cout, 1, ConvSpec::POINTWISE, true)
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, self.spec)
    }
}

/// Layer normalization over channels.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: store.add_filled(format!("{name}.gamma"), [c, 1, 1, 1], 1.0),
            beta: store.add_filled(format!("{name}.beta"), [c, 1, 1, 1], 0.0),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        ctx.graph.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, buffers: &mut Vec<BnBuffer>, name: &str, c: usize) -> Self {
        buffers.push(BnBuffer { name: name.to_string(), mean: vec![0.0; c], var: vec![1.0; c] });
        BatchNorm {
            gamma: store.add_filled(format!("{name}.gamma"), [c, 1, 1, 1], 1.0),
            beta: store.add_filled(format!("{name}.beta"), [c, 1, 1, 1], 0.0),
            buffer: buffers.len() - 1,
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        match ctx.mode {
            Mode::Train => {
                let shape = ctx.graph.value(x).shape();
                let (y, stats) = ctx.graph.batch_norm(x, g, b, BnStats::Batch)?;
                let (mean, var) = stats.expect("batch statistics");
                ctx.bn_updates.push((self.buffer, mean, var, shape[0] * shape[2] * shape[3]));
                Ok(y)
            }
            Mode::Eval => {
                let buf = &ctx.buffers[self.buffer];
                Ok(ctx.graph.batch_norm(x, g, b, BnStats::Running { mean: &buf.mean, var: &buf.var })?.0)
            }
        }
    }
}

/// Blend observed batch statistics into the running buffers. `count` is the
/// number of values per channel behind each variance, used for the unbiased
/// correction.
pub fn update_running(buffer: &mut BnBuffer, mean: &[f64], var: &[f64], count: usize) {
    let corr = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    for (k, (m, v)) in mean.iter().zip(var).enumerate() {
        buffer.mean[k] = (1.0 - BN_MOMENTUM) * buffer.mean[k] + BN_MOMENTUM * m;
        buffer.var[k] = (1.0 - BN_MOMENTUM) * buffer.var[k] + BN_MOMENTUM * v * corr;
    }
}

/// Spatial-reduction multi-head self-attention. Keys and values come from a
/// `ratio × ratio` strided convolution of the input when `ratio > 1`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub proj: Conv,
    pub reduce: Option<(Conv, LayerNorm)>,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize, ratio: usize) -> Self {
        let reduce = (ratio > 1).then(|| {
            (
                Conv::new(store, &format!("{name}.sr"), c, c, ratio, ConvSpec::new(ratio, 0), true),
                LayerNorm::new(store, &format!("{name}.sr_norm"), c),
            )
        });
        Attention {
            q: Conv::linear(store, &format!("{name}.q"), c, c),
            k: Conv::linear(store, &format!("{name}.k"), c, c),
            v: Conv::linear(store, &format!("{name}.v"), c, c),
            proj: Conv::linear(store, &format!("{name}.proj"), c, c),
            reduce,
            heads,
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let q = self.q.apply(ctx, x)?;
        let src = match &self.reduce {
            Some((conv, norm)) => {
                let r = conv.apply(ctx, x)?;
                norm.apply(ctx, r)?
            }
            None => x,
        };
        let k = self.k.apply(ctx, src)?;
        let v = self.v.apply(ctx, src)?;
        let o = ctx.graph.attention(q, k, v, self.heads)?;
        self.proj.apply(ctx, o)
    }
}

/// Linear → 3×3 depthwise convolution → GELU → linear.
#[derive(Debug, Clone)]
pub struct MixFfn {
    pub fc1: Conv,
    pub dw: Conv,
    pub fc2: Conv,
}

impl MixFfn {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, hidden: usize) -> Self {
        MixFfn {
            fc1: Conv::linear(store, &format!("{name}.fc1"), c, hidden),
            dw: Conv::new(store, &format!("{name}.dw"), hidden, hidden, 3, ConvSpec { stride: 1, pad: 1, groups: hidden }, true),
            fc2: Conv::linear(store, &format!("{name}.fc2"), hidden, c),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let h = self.fc1.apply(ctx, x)?;
        let h = self.dw.apply(ctx, h)?;
        let h = ctx.graph.gelu(h);
        self.fc2.apply(ctx, h)
    }
}

/// Channel gate from average- and max-pooled descriptors passed through a
/// shared two-layer bottleneck, summed, then squashed by a sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, reduction: usize) -> Self {
        let hidden = (c / reduction).max(1);
        ChannelAttention { fc1: Conv::linear(store, &format!("{name}.fc1"), c, hidden), fc2: Conv::linear(store, &format!("{name}.fc2"), hidden, c) }
    }

    fn branch(&self, ctx: &mut Ctx, d: Var) -> Result<Var, NnError> {
        let h = self.fc1.apply(ctx, d)?;
        let h = ctx.graph.relu(h);
        self.fc2.apply(ctx, h)
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var, NnError> {
        let avg = ctx.graph.global_avg_pool(x);
        let max = ctx.graph.global_max_pool(x);
        let a = self.branch(ctx, avg)?;
        let m = self.branch(ctx, max)?;
        let s = ctx.graph.add(a, m)?;
        let gate = ctx.graph.sigmoid(s);
        ctx.graph.gate(x, gate)
    }
}
