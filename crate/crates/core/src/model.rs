//! Decoder-only transformer: pre-norm residual blocks with RMSNorm, rotary
//! causal attention and a SwiGLU feed-forward network.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::lora::LoraLinear;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const RMS_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_INIT_STD: f64 = 0.02;
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub ffn_hidden: usize,
    pub rope_base: f64,
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(hidden: usize, heads: usize, layers: usize, vocab: usize, seq_len: usize) -> Self {
        ModelConfig {
            hidden,
            heads,
            layers,
            vocab,
            seq_len,
            ffn_hidden: Self::default_ffn_hidden(hidden),
            rope_base: DEFAULT_ROPE_BASE,
            tie_embeddings: true,
            init_std: DEFAULT_INIT_STD,
        }
    }

    /// `8/3 * hidden`, rounded up to a multiple of 8.
    pub fn default_ffn_hidden(hidden: usize) -> usize {
        let raw = (8 * hidden).div_ceil(3);
        raw.div_ceil(8) * 8
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 || self.vocab == 0 || self.seq_len == 0 {
            return bad("hidden, heads, layers, vocab and seq_len must all be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.ffn_hidden < self.hidden {
            return bad(format!("ffn_hidden {} is smaller than hidden {}", self.ffn_hidden, self.hidden));
        }
        if !(self.rope_base > 0.0) || !(self.init_std > 0.0) {
            return bad("rope_base and init_std must be positive".into());
        }
        Ok(())
    }

    /// `(in, out)` of a per-layer projection.
    pub fn linear_shape(&self, kind: LinearKind) -> (usize, usize) {
        let (h, f) = (self.hidden, self.ffn_hidden);
        match kind {
            LinearKind::Q | LinearKind::K | LinearKind::V | LinearKind::O => (h, h),
            LinearKind::Gate | LinearKind::Up => (h, f),
            LinearKind::Down => (f, h),
        }
    }

    /// Closed-form parameter count:
    /// `vocab*h*(1 + untied) + layers*(4h^2 + 3*h*ffn + 2h) + h`.
    pub fn param_count(&self) -> usize {
        let (h, f) = (self.hidden, self.ffn_hidden);
        let embed = self.vocab * h * if self.tie_embeddings { 1 } else { 2 };
        embed + self.layers * (4 * h * h + 3 * h * f + 2 * h) + h
    }

    /// Expected shape of every parameter tensor of a dense model.
    pub fn expected_shape(&self, id: ParamId) -> Option<Vec<usize>> {
        let h = self.hidden;
        let in_range = |l: usize| l < self.layers;
        match id {
            ParamId::Embed => Some(vec![self.vocab, h]),
            ParamId::LmHead => (!self.tie_embeddings).then(|| vec![h, self.vocab]),
            ParamId::FinalNorm => Some(vec![h]),
            ParamId::AttnNorm(l) | ParamId::MlpNorm(l) => in_range(l).then(|| vec![h]),
            ParamId::Weight(l, kind) => in_range(l).then(|| {
                let (i, o) = self.linear_shape(kind);
                vec![i, o]
            }),
            ParamId::LoraA(..) | ParamId::LoraB(..) => None,
        }
    }
}

/// The seven per-layer projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 7] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Gate,
        LinearKind::Up,
        LinearKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Q => "wq",
            LinearKind::K => "wk",
            LinearKind::V => "wv",
            LinearKind::O => "wo",
            LinearKind::Gate => "w_gate",
            LinearKind::Up => "w_up",
            LinearKind::Down => "w_down",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Projections that write into the residual stream.
    pub fn is_residual_output(self) -> bool {
        matches!(self, LinearKind::O | LinearKind::Down)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Stable name of every tensor a model can own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Embed,
    LmHead,
    FinalNorm,
    AttnNorm(usize),
    MlpNorm(usize),
    /// Dense weight, or the frozen base of a wrapped projection.
    Weight(usize, LinearKind),
    LoraA(usize, LinearKind),
    LoraB(usize, LinearKind),
}

impl ParamId {
    pub fn is_lora_factor(self) -> bool {
        matches!(self, ParamId::LoraA(..) | ParamId::LoraB(..))
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Embed => f.write_str("embed"),
            ParamId::LmHead => f.write_str("lm_head"),
            ParamId::FinalNorm => f.write_str("final_norm"),
            ParamId::AttnNorm(l) => write!(f, "layers.{l}.attn_norm"),
            ParamId::MlpNorm(l) => write!(f, "layers.{l}.mlp_norm"),
            ParamId::Weight(l, k) => write!(f, "layers.{l}.{}", k.name()),
            ParamId::LoraA(l, k) => write!(f, "layers.{l}.{}.lora_a", k.name()),
            ParamId::LoraB(l, k) => write!(f, "layers.{l}.{}.lora_b", k.name()),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Checkpoint(format!("unknown parameter name `{s}`"));
        match s {
            "embed" => return Ok(ParamId::Embed),
            "lm_head" => return Ok(ParamId::LmHead),
            "final_norm" => return Ok(ParamId::FinalNorm),
            _ => {}
        }
        let rest = s.strip_prefix("layers.").ok_or_else(unknown)?;
        let mut parts = rest.split('.');
        let layer: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(unknown)?;
        let name = parts.next().ok_or_else(unknown)?;
        let suffix = parts.next();
        if parts.next().is_some() {
            return Err(unknown());
        }
        match (name, suffix) {
            ("attn_norm", None) => Ok(ParamId::AttnNorm(layer)),
            ("mlp_norm", None) => Ok(ParamId::MlpNorm(layer)),
            (k, None) => LinearKind::from_name(k).map(|k| ParamId::Weight(layer, k)).ok_or_else(unknown),
            (k, Some("lora_a")) => LinearKind::from_name(k).map(|k| ParamId::LoraA(layer, k)).ok_or_else(unknown),
            (k, Some("lora_b")) => LinearKind::from_name(k).map(|k| ParamId::LoraB(layer, k)).ok_or_else(unknown),
            _ => Err(unknown()),
        }
    }
}

/// A per-layer projection, either plain or low-rank wrapped.
#[derive(Clone, Debug)]
pub enum Linear<T> {
    Dense(Tensor<T>),
    Lora(LoraLinear<T>),
}

impl<T: Scalar> Linear<T> {
    /// The full-rank matrix: the dense weight or the frozen base.
    pub fn weight(&self) -> &Tensor<T> {
        match self {
            Linear::Dense(w) => w,
            Linear::Lora(l) => l.base(),
        }
    }

    pub fn as_lora(&self) -> Option<&LoraLinear<T>> {
        match self {
            Linear::Lora(l) => Some(l),
            Linear::Dense(_) => None,
        }
    }

    pub fn as_lora_mut(&mut self) -> Option<&mut LoraLinear<T>> {
        match self {
            Linear::Lora(l) => Some(l),
            Linear::Dense(_) => None,
        }
    }

    /// Effective weight `W (+ s A B)` in double precision, row-major.
    pub fn effective_weight_f64(&self) -> Vec<f64> {
        match self {
            Linear::Dense(w) => w.to_f64(),
            Linear::Lora(l) => l.effective_weight_f64(),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, layer: usize, kind: LinearKind, bound: &mut Vec<(ParamId, Var)>) -> Result<Var> {
        match self {
            Linear::Dense(w) => {
                let wv = g.leaf(w);
                bound.push((ParamId::Weight(layer, kind), wv));
                g.matmul(x, wv)
            }
            Linear::Lora(l) => {
                let vars = l.forward_graph(g, x)?;
                bound.push((ParamId::Weight(layer, kind), vars.base));
                bound.push((ParamId::LoraA(layer, kind), vars.lora_a));
                bound.push((ParamId::LoraB(layer, kind), vars.lora_b));
                Ok(vars.out)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    linears: Vec<Linear<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn linear(&self, kind: LinearKind) -> &Linear<T> {
        &self.linears[kind.index()]
    }

    pub fn linear_mut(&mut self, kind: LinearKind) -> &mut Linear<T> {
        &mut self.linears[kind.index()]
    }
}

#[derive(Clone, Debug)]
pub struct Transformer<T> {
    config: ModelConfig,
    embed: Tensor<T>,
    lm_head: Option<Tensor<T>>,
    final_norm: Tensor<T>,
    blocks: Vec<Block<T>>,
}

impl<T: Scalar> Transformer<T> {
    /// Fresh model. Projections draw from a normal truncated at two standard
    /// deviations; residual-output projections use
    /// `init_std / sqrt(2 * layers)`. Norm gains start at one.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let h = config.hidden;
        let embed = Tensor::trunc_normal(&[config.vocab, h], std, rng).with_requires_grad(true);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let linears = LinearKind::ALL
                .iter()
                .map(|&kind| {
                    let (i, o) = config.linear_shape(kind);
                    let s = if kind.is_residual_output() { resid_std } else { std };
                    Linear::Dense(Tensor::trunc_normal(&[i, o], s, rng).with_requires_grad(true))
                })
                .collect();
            blocks.push(Block {
                attn_norm: Tensor::full(&[h], T::one()).with_requires_grad(true),
                mlp_norm: Tensor::full(&[h], T::one()).with_requires_grad(true),
                linears,
            });
        }
        let lm_head = (!config.tie_embeddings)
            .then(|| Tensor::trunc_normal(&[h, config.vocab], std, rng).with_requires_grad(true));
        Ok(Transformer {
            final_norm: Tensor::full(&[h], T::one()).with_requires_grad(true),
            config,
            embed,
            lm_head,
            blocks,
        })
    }

    /// Rebuilds a model from named tensors. Projections with `lora_a` and
    /// `lora_b` entries come back wrapped with the given scale and merge
    /// counts.
    pub fn from_tensors(
        config: ModelConfig,
        mut tensors: BTreeMap<ParamId, Tensor<T>>,
        lora_scale: f64,
        merged_counts: &BTreeMap<ParamId, usize>,
    ) -> Result<Self> {
        config.validate()?;
        let take = |tensors: &mut BTreeMap<ParamId, Tensor<T>>, id: ParamId, trainable: bool| -> Result<Tensor<T>> {
            let t = tensors
                .remove(&id)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{id}`")))?;
            if let Some(expected) = config.expected_shape(id) {
                if t.shape() != expected.as_slice() {
                    return Err(Error::TensorShape {
                        name: id.to_string(),
                        expected,
                        found: t.shape().to_vec(),
                    });
                }
            }
            Ok(t.with_requires_grad(trainable))
        };
        let embed = take(&mut tensors, ParamId::Embed, true)?;
        let lm_head = if config.tie_embeddings { None } else { Some(take(&mut tensors, ParamId::LmHead, true)?) };
        let final_norm = take(&mut tensors, ParamId::FinalNorm, true)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let attn_norm = take(&mut tensors, ParamId::AttnNorm(l), true)?;
            let mlp_norm = take(&mut tensors, ParamId::MlpNorm(l), true)?;
            let mut linears = Vec::with_capacity(7);
            for kind in LinearKind::ALL {
                let wrapped = tensors.contains_key(&ParamId::LoraA(l, kind));
                let w = take(&mut tensors, ParamId::Weight(l, kind), !wrapped)?;
                if wrapped {
                    let a = take(&mut tensors, ParamId::LoraA(l, kind), true)?;
                    let b = take(&mut tensors, ParamId::LoraB(l, kind), true)?;
                    let merged = merged_counts.get(&ParamId::Weight(l, kind)).copied().unwrap_or(0);
                    linears.push(Linear::Lora(LoraLinear::from_parts(w, a, b, lora_scale, merged)?));
                } else {
                    linears.push(Linear::Dense(w));
                }
            }
            blocks.push(Block {
                attn_norm,
                mlp_norm,
                linears,
            });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let model = Transformer {
            config,
            embed,
            lm_head,
            final_norm,
            blocks,
        };
        model.shape_audit()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    pub fn embed(&self) -> &Tensor<T> {
        &self.embed
    }

    pub fn is_wrapped(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.linears.iter().any(|l| matches!(l, Linear::Lora(_))))
    }

    /// Every tensor in a fixed order, frozen ones included.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out = vec![(ParamId::Embed, &self.embed)];
        if let Some(head) = &self.lm_head {
            out.push((ParamId::LmHead, head));
        }
        for (l, block) in self.blocks.iter().enumerate() {
            out.push((ParamId::AttnNorm(l), &block.attn_norm));
            out.push((ParamId::MlpNorm(l), &block.mlp_norm));
            for (kind, lin) in LinearKind::ALL.iter().zip(&block.linears) {
                match lin {
                    Linear::Dense(w) => out.push((ParamId::Weight(l, *kind), w)),
                    Linear::Lora(lora) => {
                        out.push((ParamId::Weight(l, *kind), lora.base()));
                        out.push((ParamId::LoraA(l, *kind), lora.lora_a()));
                        out.push((ParamId::LoraB(l, *kind), lora.lora_b()));
                    }
                }
            }
        }
        out.push((ParamId::FinalNorm, &self.final_norm));
        out
    }

    /// Mutable counterpart of [`Transformer::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Tensor<T>)> {
        let mut out = vec![(ParamId::Embed, &mut self.embed)];
        if let Some(head) = &mut self.lm_head {
            out.push((ParamId::LmHead, head));
        }
        for (l, block) in self.blocks.iter_mut().enumerate() {
            out.push((ParamId::AttnNorm(l), &mut block.attn_norm));
            out.push((ParamId::MlpNorm(l), &mut block.mlp_norm));
            for (kind, lin) in LinearKind::ALL.iter().zip(block.linears.iter_mut()) {
                match lin {
                    Linear::Dense(w) => out.push((ParamId::Weight(l, *kind), w)),
                    Linear::Lora(lora) => {
                        let (base, a, b) = lora.parts_mut();
                        out.push((ParamId::Weight(l, *kind), base));
                        out.push((ParamId::LoraA(l, *kind), a));
                        out.push((ParamId::LoraB(l, *kind), b));
                    }
                }
            }
        }
        out.push((ParamId::FinalNorm, &mut self.final_norm));
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        match id {
            ParamId::Embed => Some(&self.embed),
            ParamId::LmHead => self.lm_head.as_ref(),
            ParamId::FinalNorm => Some(&self.final_norm),
            ParamId::AttnNorm(l) => self.blocks.get(l).map(|b| &b.attn_norm),
            ParamId::MlpNorm(l) => self.blocks.get(l).map(|b| &b.mlp_norm),
            ParamId::Weight(l, k) => self.blocks.get(l).map(|b| b.linear(k).weight()),
            ParamId::LoraA(l, k) => self.blocks.get(l).and_then(|b| b.linear(k).as_lora()).map(|x| x.lora_a()),
            ParamId::LoraB(l, k) => self.blocks.get(l).and_then(|b| b.linear(k).as_lora()).map(|x| x.lora_b()),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        match id {
            ParamId::Embed => Some(&mut self.embed),
            ParamId::LmHead => self.lm_head.as_mut(),
            ParamId::FinalNorm => Some(&mut self.final_norm),
            ParamId::AttnNorm(l) => self.blocks.get_mut(l).map(|b| &mut b.attn_norm),
            ParamId::MlpNorm(l) => self.blocks.get_mut(l).map(|b| &mut b.mlp_norm),
            ParamId::Weight(l, k) => self.blocks.get_mut(l).map(|b| match b.linear_mut(k) {
                Linear::Dense(w) => w,
                Linear::Lora(lora) => lora.parts_mut().0,
            }),
            ParamId::LoraA(l, k) => self
                .blocks
                .get_mut(l)
                .and_then(|b| b.linear_mut(k).as_lora_mut())
                .map(|x| x.parts_mut().1),
            ParamId::LoraB(l, k) => self
                .blocks
                .get_mut(l)
                .and_then(|b| b.linear_mut(k).as_lora_mut())
                .map(|x| x.parts_mut().2),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| !t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks every tensor against the shape implied by the config.
    pub fn shape_audit(&self) -> Result<()> {
        for (id, t) in self.params() {
            let expected = match id {
                ParamId::LoraA(l, k) => {
                    let rank = self.blocks[l].linear(k).as_lora().map_or(0, |x| x.rank());
                    vec![self.config.linear_shape(k).0, rank]
                }
                ParamId::LoraB(l, k) => {
                    let rank = self.blocks[l].linear(k).as_lora().map_or(0, |x| x.rank());
                    vec![rank, self.config.linear_shape(k).1]
                }
                _ => self.config.expected_shape(id).ok_or_else(|| {
                    Error::Config(format!("tensor `{id}` is not part of this configuration"))
                })?,
            };
            if t.shape() != expected.as_slice() {
                return Err(Error::TensorShape {
                    name: id.to_string(),
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            if let Some(g) = t.grad() {
                if g.len() != t.numel() {
                    return Err(Error::Config(format!("gradient of `{id}` has the wrong length")));
                }
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
        if tokens.len() != batch * seq {
            return Err(Error::shape("forward", &[tokens.len()], &[batch, seq]));
        }
        if seq > self.config.seq_len {
            return Err(Error::Index {
                what: "model context length",
                index: seq,
                bound: self.config.seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g`; returns the `[batch*seq, vocab]`
    /// logits and the graph leaf of every parameter.
    pub fn forward_graph(&self, g: &mut Graph<T>, tokens: &[usize], batch: usize, seq: usize) -> Result<(Var, Vec<(ParamId, Var)>)> {
        self.check_tokens(tokens, batch, seq)?;
        let cfg = &self.config;
        let mut bound = Vec::new();
        let embed = g.leaf(&self.embed);
        bound.push((ParamId::Embed, embed));
        let mut x = g.embedding(embed, tokens)?;
        let positions: Vec<usize> = (0..batch * seq).map(|i| i % seq).collect();

        for (l, block) in self.blocks.iter().enumerate() {
            let gain = g.leaf(&block.attn_norm);
            bound.push((ParamId::AttnNorm(l), gain));
            let hn = g.rms_norm(x, gain, RMS_NORM_EPS)?;
            let q = block.linear(LinearKind::Q).forward(g, hn, l, LinearKind::Q, &mut bound)?;
            let k = block.linear(LinearKind::K).forward(g, hn, l, LinearKind::K, &mut bound)?;
            let v = block.linear(LinearKind::V).forward(g, hn, l, LinearKind::V, &mut bound)?;
            let q = g.rope(q, &positions, cfg.heads, cfg.rope_base)?;
            let k = g.rope(k, &positions, cfg.heads, cfg.rope_base)?;
            let attn = g.causal_attention(q, k, v, batch, seq, cfg.heads)?;
            let o = block.linear(LinearKind::O).forward(g, attn, l, LinearKind::O, &mut bound)?;
            x = g.add(x, o)?;

            let gain = g.leaf(&block.mlp_norm);
            bound.push((ParamId::MlpNorm(l), gain));
            let hn = g.rms_norm(x, gain, RMS_NORM_EPS)?;
            let gate = block.linear(LinearKind::Gate).forward(g, hn, l, LinearKind::Gate, &mut bound)?;
            let up = block.linear(LinearKind::Up).forward(g, hn, l, LinearKind::Up, &mut bound)?;
            let act = g.silu(gate)?;
            let act = g.mul(act, up)?;
            let down = block.linear(LinearKind::Down).forward(g, act, l, LinearKind::Down, &mut bound)?;
            x = g.add(x, down)?;
        }

        let gain = g.leaf(&self.final_norm);
        bound.push((ParamId::FinalNorm, gain));
        let x = g.rms_norm(x, gain, RMS_NORM_EPS)?;
        let logits = match &self.lm_head {
            Some(head) => {
                let hv = g.leaf(head);
                bound.push((ParamId::LmHead, hv));
                g.matmul(x, hv)?
            }
            None => g.matmul_nt(x, embed)?,
        };
        Ok((logits, bound))
    }

    /// Logits shaped `[batch, seq, vocab]`.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (logits, _) = self.forward_graph(&mut g, tokens, batch, seq)?;
        g.to_tensor(logits).reshape(&[batch, seq, self.config.vocab])
    }

    /// Mean next-token loss without touching gradients.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize, seq: usize) -> Result<f64> {
        let mut g = Graph::new();
        let (logits, _) = self.forward_graph(&mut g, inputs, batch, seq)?;
        let loss = g.cross_entropy(logits, targets)?;
        Ok(g.value(loss)[0].f64())
    }

    /// Forward and backward; every trainable tensor ends up holding its
    /// gradient, frozen tensors hold none.
    pub fn loss_and_grad(&mut self, inputs: &[usize], targets: &[usize], batch: usize, seq: usize) -> Result<f64> {
        let mut g = Graph::new();
        let (logits, bound) = self.forward_graph(&mut g, inputs, batch, seq)?;
        let loss = g.cross_entropy(logits, targets)?;
        let value = g.value(loss)[0].f64();
        let mut grads = g.backward(loss)?;
        for (id, var) in bound {
            let t = self.param_mut(id).expect("bound parameter exists");
            if t.requires_grad() {
                let grad = grads.take(var).unwrap_or_else(|| vec![T::zero(); t.numel()]);
                t.set_grad(grad)?;
            } else {
                t.clear_grad();
            }
        }
        Ok(value)
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.clear_grad();
        }
    }

    /// Plain full-rank copy with every wrapped projection merged into a
    /// dense weight (computed in double precision).
    pub fn export_merged(&self) -> Transformer<T> {
        let mut out = self.clone();
        for block in &mut out.blocks {
            for lin in &mut block.linears {
                if let Linear::Lora(lora) = lin {
                    let merged: Vec<T> = lora.effective_weight_f64().into_iter().map(T::of).collect();
                    let shape = lora.base().shape().to_vec();
                    *lin = Linear::Dense(
                        Tensor::from_vec(&shape, merged)
                            .expect("effective weight matches base shape")
                            .with_requires_grad(true),
                    );
                }
            }
        }
        out
    }
}

fn single_graph<T: Scalar, F>(f: F) -> Result<Tensor<T>>
where
    F: FnOnce(&mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g)?;
    Ok(g.to_tensor(out))
}

/// `x / sqrt(mean(x^2) + eps) * gain` over the last dimension of a 2-D `x`.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    single_graph(|g| {
        let xv = g.leaf(x);
        let gv = g.leaf(gain);
        g.rms_norm(xv, gv, RMS_NORM_EPS)
    })
}

/// `(silu(x W_gate) * (x W_up)) W_down`
pub fn swiglu_ffn<T: Scalar>(x: &Tensor<T>, w_gate: &Tensor<T>, w_up: &Tensor<T>, w_down: &Tensor<T>) -> Result<Tensor<T>> {
    single_graph(|g| {
        let xv = g.leaf(x);
        let (wg, wu, wd) = (g.leaf(w_gate), g.leaf(w_up), g.leaf(w_down));
        let gate = g.matmul(xv, wg)?;
        let up = g.matmul(xv, wu)?;
        let act = g.silu(gate)?;
        let act = g.mul(act, up)?;
        g.matmul(act, wd)
    })
}

/// Rotary embedding of `x[n, heads * head_dim]` with row `i` at
/// `positions[i]`.
pub fn apply_rotary<T: Scalar>(x: &Tensor<T>, positions: &[usize], heads: usize, base: f64) -> Result<Tensor<T>> {
    single_graph(|g| {
        let xv = g.leaf(x);
        g.rope(xv, positions, heads, base)
    })
}
