//! The four-stage encoder with structure prompts and a multi-scale decoder.

use std::fmt;
use std::str::FromStr;

use crate::frequency::{extract_hf, Image, ImagePlane};
use crate::heatmap::HeatmapStack;
use crate::protocol::NUM_UNIFIED;

use super::fgsa::{build_prompt, inject, FgsaStage};
use super::graph::{ConvSpec, ParamId, Var};
use super::layers::{update_running, Attention, BatchNorm, BnBuffer, Conv, Ctx, LayerNorm, MixFfn, Mode, ParamStore};
use super::tensor::Tensor;
use super::NnError;

pub const NUM_STAGES: usize = 4;
/// Input pixels per stage-1 token.
pub const STEM_STRIDE: usize = 4;

/// Where the prompt joins a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectPoint {
    BeforeAttention,
    BeforeFeedForward,
}

impl fmt::Display for InjectPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InjectPoint::BeforeAttention => "attention",
            InjectPoint::BeforeFeedForward => "ffn",
        })
    }
}

impl FromStr for InjectPoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(InjectPoint::BeforeAttention),
            "ffn" => Ok(InjectPoint::BeforeFeedForward),
            other => Err(format!("unknown injection point `{other}` (attention|ffn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub widths: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub sr_ratios: [usize; NUM_STAGES],
    pub mlp_ratio: usize,
    /// Structure-branch prompt channels.
    pub structure_width: usize,
    /// Image-branch prompt channels.
    pub image_width: usize,
    pub inject: InjectPoint,
    pub decoder_width: usize,
    pub num_outputs: usize,
    /// Gaussian width of the high-pass mask used to build the structure input.
    pub hf_sigma: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            in_channels: 3,
            widths: [8, 16, 32, 64],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 2, 4],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 2,
            structure_width: 4,
            image_width: 4,
            inject: InjectPoint::BeforeAttention,
            decoder_width: 32,
            num_outputs: NUM_UNIFIED,
            hf_sigma: 20.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn prompt_width(&self) -> usize {
        self.structure_width + self.image_width
    }

    /// Split `width` between the two prompt branches, structure taking the
    /// larger half.
    pub fn set_prompt_width(&mut self, width: usize) {
        self.image_width = width / 2;
        self.structure_width = width - width / 2;
    }

    pub fn fgsa_enabled(&self) -> bool {
        self.prompt_width() > 0
    }

    /// Token grid side per stage.
    pub fn grids(&self) -> [usize; NUM_STAGES] {
        let mut g = [self.image_size / STEM_STRIDE; NUM_STAGES];
        for i in 1..NUM_STAGES {
            g[i] = g[i - 1] / 2;
        }
        g
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        let unit = STEM_STRIDE << (NUM_STAGES - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(unit) {
            return bad(format!("image size {} must be a positive multiple of {unit}", self.image_size));
        }
        if self.in_channels == 0 || self.num_outputs == 0 || self.mlp_ratio == 0 || self.decoder_width == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.hf_sigma > 0.0) {
            return bad(format!("hf sigma must be positive, got {}", self.hf_sigma));
        }
        let grids = self.grids();
        for i in 0..NUM_STAGES {
            let (w, h, r) = (self.widths[i], self.heads[i], self.sr_ratios[i]);
            if w == 0 || h == 0 || w % h != 0 {
                return bad(format!("stage {}: width {w} not divisible into {h} heads", i + 1));
            }
            if self.depths[i] == 0 {
                return bad(format!("stage {}: needs at least one layer", i + 1));
            }
            if r == 0 || !grids[i].is_multiple_of(r) {
                return bad(format!("stage {}: grid {} not divisible by reduction ratio {r}", i + 1, grids[i]));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: MixFfn,
    /// Per-layer projection closing the prompt regularization.
    mlp_s: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Stage {
    embed: Conv,
    embed_norm: LayerNorm,
    fgsa: Option<FgsaStage>,
    layers: Vec<Layer>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct Decoder {
    fuse: Conv,
    bn: BatchNorm,
    head: Conv,
}

struct Recorded {
    graph: super::graph::Graph,
    output: Var,
}

/// Per-parameter gradients aligned with [`Network::params`].
pub type Grads = Vec<Tensor>;

pub struct Network {
    config: NetConfig,
    params: ParamStore,
    buffers: Vec<BnBuffer>,
    frozen: Vec<bool>,
    stages: Vec<Stage>,
    decoder: Decoder,
    tape: Option<Recorded>,
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network").field("config", &self.config).field("params", &self.params.num_scalars()).finish()
    }
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self, NnError> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let mut buffers = Vec::new();
        let s = &mut store;
        let (ps, pa) = (config.structure_width, config.image_width);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let c = config.widths[i];
            let cin = if i == 0 { config.in_channels } else { config.widths[i - 1] };
            let name = format!("stage{}", i + 1);
            let embed = if i == 0 {
                Conv::new(s, &format!("{name}.embed"), cin, c, 7, ConvSpec::new(STEM_STRIDE, 3), true)
            } else {
                Conv::new(s, &format!("{name}.embed"), cin, c, 3, ConvSpec::new(2, 1), true)
            };
            let embed_norm = LayerNorm::new(s, &format!("{name}.embed_norm"), c);
            let fgsa = config.fgsa_enabled().then(|| {
                let (sin, iin) = if i == 0 { (config.in_channels, config.in_channels) } else { (ps, pa) };
                FgsaStage::new(s, &mut buffers, &format!("fgsa{}", i + 1), i == 0, sin, iin, ps, pa, c)
            });
            let layers = (0..config.depths[i])
                .map(|j| {
                    let ln = format!("{name}.layer{j}");
                    Layer {
                        norm1: LayerNorm::new(s, &format!("{ln}.norm1"), c),
                        attn: Attention::new(s, &format!("{ln}.attn"), c, config.heads[i], config.sr_ratios[i]),
                        norm2: LayerNorm::new(s, &format!("{ln}.norm2"), c),
                        ffn: MixFfn::new(s, &format!("{ln}.ffn"), c, c * config.mlp_ratio),
                        mlp_s: config.fgsa_enabled().then(|| Conv::linear(s, &format!("fgsa{}.layer{j}.mlp_s", i + 1), ps + pa + c, c)),
                    }
                })
                .collect();
            let norm = LayerNorm::new(s, &format!("{name}.norm"), c);
            stages.push(Stage { embed, embed_norm, fgsa, layers, norm });
        }
        let total: usize = config.widths.iter().sum();
        let decoder = Decoder {
            fuse: Conv::new(s, "decoder.fuse", total, config.decoder_width, 1, ConvSpec::POINTWISE, false),
            bn: BatchNorm::new(s, &mut buffers, "decoder.bn", config.decoder_width),
            head: Conv::linear(s, "decoder.head", config.decoder_width, config.num_outputs),
        };
        let frozen = vec![false; store.len()];
        Ok(Network { config, params: store, buffers, frozen, stages, decoder, tape: None })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BnBuffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BnBuffer] {
        &mut self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`
    /// (`stage2.`, `fgsa`, `decoder.` ...). Returns how many matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for id in self.params.ids() {
            if self.params.name(id).starts_with(prefix) {
                self.frozen[id.0] = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Stack images into an `N × C × S × S` tensor.
    pub fn images_to_tensor(&self, images: &[&Image]) -> Result<Tensor, NnError> {
        let (c, s) = (self.config.in_channels, self.config.image_size);
        let mut data = Vec::with_capacity(images.len() * c * s * s);
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(NnError::Shape(format!("image {}x{} for network input {s}x{s}", img.height(), img.width())));
            }
            for k in 0..c {
                // grey images feed every input channel
                let plane = &img.channels[if img.num_channels() == 1 { 0 } else { k }];
                data.extend_from_slice(plane.data());
            }
        }
        Tensor::from_vec([images.len(), c, s, s], data)
    }

    /// Per-channel high-pass of an image batch.
    pub fn high_frequency(&self, images: &Tensor) -> Result<Tensor, NnError> {
        let [n, c, h, w] = images.shape();
        let mut data = Vec::with_capacity(images.len());
        for b in 0..n {
            for k in 0..c {
                let s = images.index(b, k, 0, 0);
                let plane = ImagePlane::from_vec(h, w, images.data()[s..s + h * w].to_vec()).map_err(|e| NnError::Shape(e.to_string()))?;
                let hf = extract_hf(&plane, self.config.hf_sigma).map_err(|e| NnError::Shape(e.to_string()))?;
                data.extend(hf.into_vec());
            }
        }
        Tensor::from_vec(images.shape(), data)
    }

    fn run(&self, ctx: &mut Ctx, images: &Tensor, hf: &Tensor) -> Result<(Var, Vec<[usize; 4]>), NnError> {
        let cfg = &self.config;
        let expect = [images.shape()[0], cfg.in_channels, cfg.image_size, cfg.image_size];
        if images.shape() != expect || hf.shape() != expect {
            return Err(NnError::Shape(format!("inputs {:?} / {:?}, expected {expect:?}", images.shape(), hf.shape())));
        }
        let mut x = ctx.graph.input(images.clone());
        let image_in = x;
        // the structure input never enters the graph without prompts, so the
        // output cannot depend on it
        let (mut fs, mut fpa) = if cfg.fgsa_enabled() { (Some(ctx.graph.input(hf.clone())), Some(image_in)) } else { (None, None) };
        let mut feats = Vec::with_capacity(NUM_STAGES);
        let mut ledger = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            x = stage.embed.apply(ctx, x)?;
            x = stage.embed_norm.apply(ctx, x)?;
            let prompt = match (&stage.fgsa, fs, fpa) {
                (Some(f), Some(s), Some(a)) => {
                    let s = f.refine_structure(ctx, s)?;
                    let a = f.refine_image(ctx, a)?;
                    fs = Some(s);
                    fpa = Some(a);
                    Some((f, build_prompt(ctx, s, a)?))
                }
                _ => None,
            };
            for layer in &stage.layers {
                let regularize = |ctx: &mut Ctx, x: Var| -> Result<Var, NnError> {
                    match (&prompt, &layer.mlp_s) {
                        (Some((f, p)), Some(mlp)) => {
                            let joined = inject(ctx, *p, x)?;
                            f.regularize(ctx, joined, mlp)
                        }
                        _ => Ok(x),
                    }
                };
                if cfg.inject == InjectPoint::BeforeAttention {
                    x = regularize(ctx, x)?;
                }
                let h = layer.norm1.apply(ctx, x)?;
                let h = layer.attn.apply(ctx, h)?;
                x = ctx.graph.add(x, h)?;
                if cfg.inject == InjectPoint::BeforeFeedForward {
                    x = regularize(ctx, x)?;
                }
                let h = layer.norm2.apply(ctx, x)?;
                let h = layer.ffn.apply(ctx, h)?;
                x = ctx.graph.add(x, h)?;
            }
            x = stage.norm.apply(ctx, x)?;
            ledger.push(ctx.graph.value(x).shape());
            feats.push(x);
        }
        let g = cfg.grids()[0];
        let ups: Vec<Var> = feats.iter().map(|&f| ctx.graph.upsample(f, g, g)).collect();
        let cat = ctx.graph.concat(&ups)?;
        let h = self.decoder.fuse.apply(ctx, cat)?;
        let h = self.decoder.bn.apply(ctx, h)?;
        let h = ctx.graph.relu(h);
        let out = self.decoder.head.apply(ctx, h)?;
        Ok((out, ledger))
    }

    /// Output heatmaps `N × num_outputs × G × G` with `G` the stage-1 grid.
    /// Records the computation for a following [`Network::backward`]; in
    /// training mode, batch-norm running statistics are updated.
    pub fn forward(&mut self, images: &Tensor, hf: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        let mut ctx = Ctx::new(&self.params, &self.buffers, mode);
        let (out, _) = self.run(&mut ctx, images, hf)?;
        let Ctx { graph, bn_updates, .. } = ctx;
        for (idx, mean, var, count) in bn_updates {
            update_running(&mut self.buffers[idx], &mean, &var, count);
        }
        let value = graph.value(out).clone();
        self.tape = Some(Recorded { graph, output: out });
        Ok(value)
    }

    /// Stage output shapes of a forward pass, without recording.
    pub fn shape_ledger(&self, images: &Tensor, hf: &Tensor) -> Result<Vec<[usize; 4]>, NnError> {
        let mut ctx = Ctx::new(&self.params, &self.buffers, Mode::Eval);
        Ok(self.run(&mut ctx, images, hf)?.1)
    }

    /// Gradients of `sum(grad_out ⊙ output)` for every parameter; zero for
    /// frozen parameters. Consumes the recorded forward.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Grads, NnError> {
        let tape = self.tape.take().ok_or(NnError::NoForward)?;
        let grads = tape.graph.backward(tape.output, grad_out.clone())?;
        let mut out: Grads = self.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (pid, var) in tape.graph.param_vars() {
            if self.frozen[pid.0] {
                continue;
            }
            if let Some(g) = &grads[var.index()] {
                out[pid.0] = g.clone();
            }
        }
        Ok(out)
    }

    pub fn has_recorded_forward(&self) -> bool {
        self.tape.is_some()
    }

    /// Named tensors for checkpointing: parameters, then running statistics.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = self.params.ids().map(|id| (self.params.name(id).to_string(), self.params.value(id).clone())).collect();
        for b in &self.buffers {
            let c = b.mean.len();
            v.push((format!("{}.running_mean", b.name), Tensor::from_vec([c, 1, 1, 1], b.mean.clone()).expect("buffer shape")));
            v.push((format!("{}.running_var", b.name), Tensor::from_vec([c, 1, 1, 1], b.var.clone()).expect("buffer shape")));
        }
        v
    }

    /// Restore from [`Network::state`] output. Every entry must be present
    /// with a matching shape and no unknown names may remain.
    pub fn load_state(&mut self, entries: Vec<(String, Tensor)>) -> Result<(), NnError> {
        let mut map: std::collections::BTreeMap<String, Tensor> = entries.into_iter().collect();
        let mut take = |name: &str, shape: [usize; 4]| -> Result<Tensor, NnError> {
            let t = map.remove(name).ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(NnError::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let t = take(&name, self.params.value(id).shape())?;
            *self.params.value_mut(id) = t;
        }
        for b in &mut self.buffers {
            let c = b.mean.len();
            b.mean = take(&format!("{}.running_mean", b.name), [c, 1, 1, 1])?.into_vec();
            b.var = take(&format!("{}.running_var", b.name), [c, 1, 1, 1])?.into_vec();
        }
        if let Some(extra) = map.keys().next() {
            return Err(NnError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        self.tape = None;
        Ok(())
    }
}

/// Split a network output into per-sample heatmap stacks.
pub fn output_to_stacks(out: &Tensor, stride: usize) -> Vec<HeatmapStack> {
    let [n, c, h, w] = out.shape();
    (0..n)
        .map(|b| {
            let planes = (0..c)
                .map(|k| {
                    let s = out.index(b, k, 0, 0);
                    ImagePlane::from_vec(h, w, out.data()[s..s + h * w].to_vec()).expect("plane size")
                })
                .collect();
            HeatmapStack::from_planes(planes, stride)
        })
        .collect()
}

/// Inverse of [`output_to_stacks`].
pub fn stacks_to_tensor(stacks: &[HeatmapStack]) -> Result<Tensor, NnError> {
    let first = stacks.first().ok_or_else(|| NnError::Shape("empty batch".into()))?;
    let (c, h, w) = (first.num_planes(), first.height, first.width);
    let mut data = Vec::with_capacity(stacks.len() * c * h * w);
    for s in stacks {
        if s.num_planes() != c || s.height != h || s.width != w {
            return Err(NnError::Shape("heatmap stacks differ in shape".into()));
        }
        for p in &s.planes {
            data.extend_from_slice(p.data());
        }
    }
    Tensor::from_vec([stacks.len(), c, h, w], data)
}
