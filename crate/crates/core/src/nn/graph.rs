//! Reverse-mode differentiation over a recorded list of tensor ops.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every consumer before its inputs. Parameters enter the graph once per
//! [`ParamId`]; reusing a parameter returns the same node, and its gradient
//! accumulates over every use.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    /// Position in the graph, and in the vector returned by [`Graph::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

const NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec { stride: 1, pad: 0, groups: 1 };

    pub fn new(stride: usize, pad: usize) -> Self {
        ConvSpec { stride, pad, groups: 1 }
    }
}

/// Batch statistics or frozen running statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    /// `xhat` is the normalized input, `inv_std` one entry per normalization group.
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Gate { x: Var, g: Var },
    GlobalAvg(Var),
    GlobalMax { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    Concat(Vec<Var>),
    Upsample(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

/// Source coordinate and weights for half-pixel-centered bilinear resizing.
fn bilinear_axis(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var, NnError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, ci, h, wd] = xv.shape();
        let [co, cig, kh, kw] = wv.shape();
        let g = spec.groups;
        if g == 0 || ci % g != 0 || co % g != 0 || cig != ci / g {
            return Err(shape_err(format!("conv weight {:?} does not fit input {:?} with {g} groups", wv.shape(), xv.shape())));
        }
        if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw || spec.stride == 0 {
            return Err(shape_err(format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != co {
                return Err(shape_err(format!("bias of {} for {co} output channels", bv.len())));
            }
            for bn in 0..n {
                for o in 0..co {
                    let base = out.index(bn, o, 0, 0);
                    out.data_mut()[base..base + ho * wo].fill(bv.data()[o]);
                }
            }
        }
        let co_g = co / g;
        let (xd, wdat) = (xv.data(), wv.data());
        let od = out.data_mut();
        for bn in 0..n {
            for o in 0..co {
                let grp = o / co_g;
                for cl in 0..cig {
                    let c = grp * cig + cl;
                    let xbase = (bn * ci + c) * h * wd;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = wdat[((o * cig + cl) * kh + ky) * kw + kx];
                            for oy in 0..ho {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let obase = ((bn * co + o) * ho + oy) * wo;
                                let xrow = xbase + iy as usize * wd;
                                for ox in 0..wo {
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    od[obase + ox] += wgt * xd[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv { x, w, b, spec }))
    }

    /// Per-channel normalization over batch and space. With batch statistics
    /// the (mean, biased variance) pair is returned for running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>), NnError> {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let hw = xv.plane();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != c || bv.len() != c {
            return Err(shape_err(format!("batch norm affine of {} for {c} channels", gv.len())));
        }
        let (mean, var, batch) = match stats {
            BnStats::Batch => {
                let m = (n * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    for b in 0..n {
                        let s = xv.index(b, ch, 0, 0);
                        mean[ch] += xv.data()[s..s + hw].iter().sum::<f64>();
                    }
                    mean[ch] /= m;
                    for b in 0..n {
                        let s = xv.index(b, ch, 0, 0);
                        var[ch] += xv.data()[s..s + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                    var[ch] /= m;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(format!("running stats of {} for {c} channels", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            for ch in 0..c {
                let s = xv.index(b, ch, 0, 0);
                for i in s..s + hw {
                    xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    out.data_mut()[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let ret = batch.then_some((mean, var));
        Ok((self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch }), ret))
    }

    /// Normalization over channels at every spatial position.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let hw = xv.plane();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != c || bv.len() != c {
            return Err(shape_err(format!("layer norm affine of {} for {c} channels", gv.len())));
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * hw];
        let mut out = Tensor::zeros(xv.shape());
        let xd = xv.data();
        for b in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + p;
                let mean = (0..c).map(|ch| xd[at(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[b * hw + p] = is;
                for ch in 0..c {
                    let i = at(ch);
                    xhat[i] = (xd[i] - mean) * is;
                    out.data_mut()[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Scale every channel of `x` by `g[n, c, 0, 0]`.
    pub fn gate(&mut self, x: Var, g: Var) -> Result<Var, NnError> {
        let (xv, gv) = (self.value(x), self.value(g));
        let [n, c, _, _] = xv.shape();
        if gv.shape() != [n, c, 1, 1] {
            return Err(shape_err(format!("gate {:?} for input {:?}", gv.shape(), xv.shape())));
        }
        let hw = xv.plane();
        let mut out = xv.clone();
        for (k, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let s = gv.data()[k];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::Gate { x, g }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let hw = xv.plane();
        let data = xv.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("pooled shape");
        self.push(out, Op::GlobalAvg(x))
    }

    /// Ties resolve to the first position in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, _, _] = xv.shape();
        let hw = xv.plane();
        let mut argmax = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for ch in xv.data().chunks(hw) {
            let (mut bi, mut bv) = (0, ch[0]);
            for (i, &v) in ch.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            argmax.push(bi);
            data.push(bv);
        }
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("pooled shape");
        self.push(out, Op::GlobalMax { x, argmax })
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err(format!("{h}x{w} is not divisible into {k}x{k} windows")));
        }
        let inv = 1.0 / (k * k) as f64;
        let out = Tensor::from_fn([n, c, h / k, w / k], |[b, ch, y, x]| {
            let mut s = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    s += xv.get(b, ch, y * k + dy, x * k + dx);
                }
            }
            s * inv
        });
        Ok(self.push(out, Op::AvgPool { x, k }))
    }

    /// Channel-axis concatenation in argument order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = self.value(parts[0]).shape();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(shape_err(format!("concat {s:?} with {first:?}")));
            }
            channels += s[1];
        }
        let [n, _, h, w] = first;
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let item = v.shape()[1] * h * w;
                data.extend_from_slice(&v.data()[b * item..(b + 1) * item]);
            }
        }
        let out = Tensor::from_vec([n, channels, h, w], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (ay, ax) = (bilinear_axis(out_h, h), bilinear_axis(out_w, w));
        let out = Tensor::from_fn([n, c, out_h, out_w], |[b, ch, y, x]| {
            let (y0, y1, fy) = ay[y];
            let (x0, x1, fx) = ax[x];
            (1.0 - fy) * ((1.0 - fx) * xv.get(b, ch, y0, x0) + fx * xv.get(b, ch, y0, x1))
                + fy * ((1.0 - fx) * xv.get(b, ch, y1, x0) + fx * xv.get(b, ch, y1, x1))
        });
        self.push(out, Op::Upsample(x))
    }

    /// Multi-head scaled dot-product attention. Tokens are spatial positions,
    /// features are channels; `k` and `v` may live on a coarser grid than `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [n, c, _, _] = qv.shape();
        if kv.shape() != vv.shape() || kv.shape()[0] != n || kv.shape()[1] != c || heads == 0 || c % heads != 0 {
            return Err(shape_err(format!("attention q {:?} k {:?} v {:?} heads {heads}", qv.shape(), kv.shape(), vv.shape())));
        }
        let (lq, lk, d) = (qv.plane(), kv.plane(), c / heads);
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; n * heads * lq * lk];
        let mut out = Tensor::zeros(qv.shape());
        let mut row = vec![0.0; lk];
        for b in 0..n {
            for hd in 0..heads {
                for i in 0..lq {
                    for (t, r) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for j in 0..d {
                            let cc = hd * d + j;
                            s += qv.data()[(b * c + cc) * lq + i] * kv.data()[(b * c + cc) * lk + t];
                        }
                        *r = s * scale;
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - m).exp();
                        z += *r;
                    }
                    let pbase = ((b * heads + hd) * lq + i) * lk;
                    for (t, r) in row.iter().enumerate() {
                        probs[pbase + t] = r / z;
                    }
                    for j in 0..d {
                        let cc = hd * d + j;
                        let vrow = &vv.data()[(b * c + cc) * lk..(b * c + cc + 1) * lk];
                        let s: f64 = probs[pbase..pbase + lk].iter().zip(vrow).map(|(p, x)| p * x).sum();
                        out.data_mut()[(b * c + cc) * lq + i] = s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// Gradients of `seed · out` with respect to every node. Entries are
    /// `None` for nodes that do not influence `out`.
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Vec<Option<Tensor>>, NnError> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err(format!("seed gradient {:?} for output {:?}", seed.shape(), self.value(out).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(grads)
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [n, ci, h, wd] = xv.shape();
                let [co, cig, kh, kw] = wv.shape();
                let [_, _, ho, wo] = y.shape();
                let co_g = co / spec.groups;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                let (xd, wdat, gd) = (xv.data(), wv.data(), gy.data());
                {
                    let dxd = dx.data_mut();
                    let dwd = dw.data_mut();
                    for bn in 0..n {
                        for o in 0..co {
                            let grp = o / co_g;
                            for cl in 0..cig {
                                let c = grp * cig + cl;
                                let xbase = (bn * ci + c) * h * wd;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let widx = ((o * cig + cl) * kh + ky) * kw + kx;
                                        let wgt = wdat[widx];
                                        let mut gw = 0.0;
                                        for oy in 0..ho {
                                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let obase = ((bn * co + o) * ho + oy) * wo;
                                            let xrow = xbase + iy as usize * wd;
                                            for ox in 0..wo {
                                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                                if ix < 0 || ix >= wd as isize {
                                                    continue;
                                                }
                                                let g = gd[obase + ox];
                                                gw += g * xd[xrow + ix as usize];
                                                dxd[xrow + ix as usize] += g * wgt;
                                            }
                                        }
                                        dwd[widx] += gw;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let mut db = Tensor::zeros(self.value(*b).shape());
                    for (k, chunk) in gd.chunks(ho * wo).enumerate() {
                        db.data_mut()[k % co] += chunk.iter().sum::<f64>();
                    }
                    acc(*b, db);
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let [n, c, _, _] = y.shape();
                let hw = y.plane();
                let gv = self.value(*gamma).data();
                let mut dgamma = Tensor::zeros(self.value(*gamma).shape());
                let mut dbeta = Tensor::zeros(self.value(*beta).shape());
                let mut dx = Tensor::zeros(y.shape());
                let m = (n * hw) as f64;
                for ch in 0..c {
                    let idx_iter = || (0..n).flat_map(move |b| {
                        let s = (b * c + ch) * hw;
                        s..s + hw
                    });
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for i in idx_iter() {
                        sg += gy.data()[i];
                        sgx += gy.data()[i] * xhat[i];
                    }
                    dgamma.data_mut()[ch] = sgx;
                    dbeta.data_mut()[ch] = sg;
                    let k = gv[ch] * inv_std[ch];
                    for i in idx_iter() {
                        dx.data_mut()[i] = if *batch {
                            k * (gy.data()[i] - sg / m - xhat[i] * sgx / m)
                        } else {
                            k * gy.data()[i]
                        };
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let [n, c, _, _] = y.shape();
                let hw = y.plane();
                let gv = self.value(*gamma).data();
                let mut dgamma = Tensor::zeros(self.value(*gamma).shape());
                let mut dbeta = Tensor::zeros(self.value(*beta).shape());
                let mut dx = Tensor::zeros(y.shape());
                let gd = gy.data();
                for b in 0..n {
                    for p in 0..hw {
                        let at = |ch: usize| (b * c + ch) * hw + p;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for ch in 0..c {
                            let i = at(ch);
                            let dxh = gd[i] * gv[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[i];
                            dgamma.data_mut()[ch] += gd[i] * xhat[i];
                            dbeta.data_mut()[ch] += gd[i];
                        }
                        let (s1, s2) = (s1 / c as f64, s2 / c as f64);
                        let is = inv_std[b * hw + p];
                        for ch in 0..c {
                            let i = at(ch);
                            dx.data_mut()[i] = is * (gd[i] * gv[ch] - s1 - xhat[i] * s2);
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = gy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = gy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    *g *= d;
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = gy.clone();
                for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g *= s * (1.0 - s);
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Gate { x, g } => {
                let (xv, gv) = (self.value(*x), self.value(*g));
                let hw = xv.plane();
                let mut dx = gy.clone();
                let mut dg = Tensor::zeros(gv.shape());
                for (k, (gchunk, xchunk)) in dx.data_mut().chunks_mut(hw).zip(xv.data().chunks(hw)).enumerate() {
                    let s = gv.data()[k];
                    let mut acc_g = 0.0;
                    for (gval, &xval) in gchunk.iter_mut().zip(xchunk) {
                        acc_g += *gval * xval;
                        *gval *= s;
                    }
                    dg.data_mut()[k] = acc_g;
                }
                acc(*x, dx);
                acc(*g, dg);
            }
            Op::GlobalAvg(x) => {
                let xv = self.value(*x);
                let hw = xv.plane();
                let mut dx = Tensor::zeros(xv.shape());
                for (k, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(gy.data()[k] / hw as f64);
                }
                acc(*x, dx);
            }
            Op::GlobalMax { x, argmax } => {
                let xv = self.value(*x);
                let hw = xv.plane();
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &a) in argmax.iter().enumerate() {
                    dx.data_mut()[k * hw + a] = gy.data()[k];
                }
                acc(*x, dx);
            }
            Op::AvgPool { x, k } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.shape();
                let inv = 1.0 / (k * k) as f64;
                let dx = Tensor::from_fn([n, c, h, w], |[b, ch, yy, xx]| gy.get(b, ch, yy / k, xx / k) * inv);
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let [n, c, h, w] = y.shape();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    let mut d = Vec::with_capacity(n * pc * h * w);
                    for b in 0..n {
                        let s = (b * c + offset) * h * w;
                        d.extend_from_slice(&gy.data()[s..s + pc * h * w]);
                    }
                    acc(p, Tensor::from_vec([n, pc, h, w], d).expect("concat slice"));
                    offset += pc;
                }
            }
            Op::Upsample(x) => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.shape();
                let [_, _, oh, ow] = y.shape();
                let (ay, ax) = (bilinear_axis(oh, h), bilinear_axis(ow, w));
                let mut dx = Tensor::zeros(xv.shape());
                for b in 0..n {
                    for ch in 0..c {
                        for (yy, &(y0, y1, fy)) in ay.iter().enumerate() {
                            for (xx, &(x0, x1, fx)) in ax.iter().enumerate() {
                                let g = gy.get(b, ch, yy, xx);
                                let i00 = dx.index(b, ch, y0, x0);
                                let i01 = dx.index(b, ch, y0, x1);
                                let i10 = dx.index(b, ch, y1, x0);
                                let i11 = dx.index(b, ch, y1, x1);
                                let d = dx.data_mut();
                                d[i00] += g * (1.0 - fy) * (1.0 - fx);
                                d[i01] += g * (1.0 - fy) * fx;
                                d[i10] += g * fy * (1.0 - fx);
                                d[i11] += g * fy * fx;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let [n, c, _, _] = qv.shape();
                let (lq, lk, d) = (qv.plane(), kv.plane(), c / heads);
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                let mut dp = vec![0.0; lk];
                for b in 0..n {
                    for hd in 0..*heads {
                        for i in 0..lq {
                            let pbase = ((b * heads + hd) * lq + i) * lk;
                            let p = &probs[pbase..pbase + lk];
                            dp.fill(0.0);
                            for j in 0..d {
                                let cc = b * c + hd * d + j;
                                let go = gy.data()[cc * lq + i];
                                let vrow = &vv.data()[cc * lk..(cc + 1) * lk];
                                for t in 0..lk {
                                    dp[t] += go * vrow[t];
                                    dv.data_mut()[cc * lk + t] += p[t] * go;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for t in 0..lk {
                                let ds = p[t] * (dp[t] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for j in 0..d {
                                    let cc = b * c + hd * d + j;
                                    dq.data_mut()[cc * lq + i] += ds * kv.data()[cc * lk + t];
                                    dk.data_mut()[cc * lk + t] += ds * qv.data()[cc * lq + i];
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
    }
}
