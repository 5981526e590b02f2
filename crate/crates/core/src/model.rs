//! Pre-LN transformer blocks and the models built from them.
//!
//! Every block computes `x + Attn(LN(x))`, then (decoder blocks of an
//! encoder-decoder model) `x + Cross(LN(x), enc)`, then `x + FFN(LN(x))`.
//! Token embeddings are scaled by `sqrt(d)` and summed with sinusoidal
//! positions; output logits reuse the embedding table.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::baseline::{affine, affine_eager, attention_param_count, EluParams, EluState, KvCache, SaParams};
use crate::checkpoint::Checkpoint;
use crate::config::{Flag, KeyValues};
use crate::counter::{self, Category};
use crate::error::{Error, Result};
use crate::kernels::Segments;
use crate::memsizer::{MemSizerConfig, MemSizerLayer, RecurrentState};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{layer_norm_raw, relu, Matrix, DEFAULT_LN_EPS};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id that is an ordinary token.
pub const FIRST_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    MemSizer,
    Sa,
    Elu,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::MemSizer, AttentionKind::Sa, AttentionKind::Elu];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::MemSizer => "memsizer",
            AttentionKind::Sa => "sa",
            AttentionKind::Elu => "elu",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "memsizer" => Ok(AttentionKind::MemSizer),
            "sa" => Ok(AttentionKind::Sa),
            "elu" => Ok(AttentionKind::Elu),
            other => Err(Error::Config(format!("unknown attention kind {other:?} (memsizer, sa, elu)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub kind: AttentionKind,
    pub k_cross: usize,
    pub k_causal: usize,
    pub attn_scale: Option<f64>,
    pub freeze_keys: bool,
}

impl BlockConfig {
    pub fn new(kind: AttentionKind, model_dim: usize, heads: usize) -> Self {
        BlockConfig {
            model_dim,
            ffn_dim: 4 * model_dim,
            heads,
            kind,
            k_cross: 32,
            k_causal: 4,
            attn_scale: None,
            freeze_keys: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::Config("model_dim, ffn_dim and heads must be positive".into()));
        }
        match self.kind {
            AttentionKind::MemSizer => {
                if self.k_cross < 2 || self.k_causal < 2 {
                    return Err(Error::Config(format!(
                        "memory slots must be at least 2 (k_cross={}, k_causal={})",
                        self.k_cross, self.k_causal
                    )));
                }
            }
            AttentionKind::Sa | AttentionKind::Elu => {
                if self.model_dim % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "model_dim {} not divisible by heads {}",
                        self.model_dim, self.heads
                    )));
                }
            }
        }
        Ok(())
    }

    fn memsizer(&self, slots: usize) -> MemSizerConfig {
        let mut c = MemSizerConfig::new(self.heads, slots, self.model_dim);
        c.attn_scale = self.attn_scale;
        c.freeze_keys = self.freeze_keys;
        c
    }

    /// Parameters of one attention module with `slots` memory slots (the
    /// slot count is ignored by the baselines).
    pub fn attention_params(&self, slots: usize) -> usize {
        match self.kind {
            AttentionKind::MemSizer => self.memsizer(slots).param_count(),
            AttentionKind::Sa | AttentionKind::Elu => attention_param_count(self.model_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    /// Zero gives a decoder-only language model without cross attention.
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub block: BlockConfig,
    pub positions: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(kind: AttentionKind, vocab: usize, model_dim: usize, heads: usize, layers: usize) -> Self {
        ModelConfig {
            vocab,
            encoder_layers: layers,
            decoder_layers: layers,
            block: BlockConfig::new(kind, model_dim, heads),
            positions: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.vocab <= FIRST_TOKEN {
            return Err(Error::Config(format!("vocab must exceed {FIRST_TOKEN} reserved ids, got {}", self.vocab)));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("need at least one decoder layer".into()));
        }
        Ok(())
    }

    pub fn is_decoder_only(&self) -> bool {
        self.encoder_layers == 0
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let b = &self.block;
        kv.set("arch", b.kind);
        kv.set("vocab", self.vocab);
        kv.set("encoder_layers", self.encoder_layers);
        kv.set("decoder_layers", self.decoder_layers);
        kv.set("d", b.model_dim);
        kv.set("ffn_dim", b.ffn_dim);
        kv.set("heads", b.heads);
        kv.set("k_cross", b.k_cross);
        kv.set("k_causal", b.k_causal);
        if let Some(s) = b.attn_scale {
            kv.set("attn_scale", s);
        }
        kv.set("freeze_keys", b.freeze_keys);
        kv.set("positions", self.positions);
        kv.set("init_seed", self.init_seed);
        kv
    }

    /// Consumes the model keys from `kv`, starting from `self` as defaults.
    /// `layers` sets both stacks at once.
    pub fn take_from(mut self, kv: &mut KeyValues) -> Result<Self> {
        if let Some(a) = kv.take::<AttentionKind>("arch")? {
            self.block.kind = a;
        }
        if let Some(l) = kv.take::<usize>("layers")? {
            self.encoder_layers = l;
            self.decoder_layers = l;
        }
        let b = &mut self.block;
        self.vocab = kv.take_or("vocab", self.vocab)?;
        self.encoder_layers = kv.take_or("encoder_layers", self.encoder_layers)?;
        self.decoder_layers = kv.take_or("decoder_layers", self.decoder_layers)?;
        if let Some(d) = kv.take::<usize>("d")? {
            b.model_dim = d;
            b.ffn_dim = 4 * d;
        }
        b.ffn_dim = kv.take_or("ffn_dim", b.ffn_dim)?;
        b.heads = kv.take_or("heads", b.heads)?;
        b.k_cross = kv.take_or("k_cross", b.k_cross)?;
        b.k_causal = kv.take_or("k_causal", b.k_causal)?;
        if let Some(s) = kv.take::<f64>("attn_scale")? {
            b.attn_scale = Some(s);
        }
        b.freeze_keys = kv.take_or("freeze_keys", Flag(b.freeze_keys))?.0;
        self.positions = kv.take_or("positions", Flag(self.positions))?.0;
        self.init_seed = kv.take_or("init_seed", self.init_seed)?;
        self.validate()?;
        Ok(self)
    }

    /// `(module, slots)` for every attention module in the model.
    pub fn attention_sites(&self) -> Vec<(String, usize)> {
        let b = &self.block;
        let mut sites = Vec::new();
        for l in 0..self.encoder_layers {
            sites.push((format!("enc.{l}.self"), b.k_cross));
        }
        for l in 0..self.decoder_layers {
            sites.push((format!("dec.{l}.self"), b.k_causal));
            if !self.is_decoder_only() {
                sites.push((format!("dec.{l}.cross"), b.k_cross));
            }
        }
        sites
    }

    /// Total parameter count, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let b = &self.block;
        let d = b.model_dim;
        let ln = 2 * d;
        let ffn = d * b.ffn_dim + b.ffn_dim + b.ffn_dim * d + d;
        let attn: usize = self.attention_sites().iter().map(|(_, k)| b.attention_params(*k)).sum();
        let sites = self.attention_sites().len();
        let blocks = self.encoder_layers + self.decoder_layers;
        let final_ln = if self.is_decoder_only() { 1 } else { 2 };
        self.vocab * d + attn + sites * ln + blocks * (ln + ffn) + final_ln * ln
    }
}

/// Per-layer decode state: the rolling value sum, the key/value cache or
/// the kernel statistics.
#[derive(Clone, Debug, PartialEq)]
pub enum DecodeState {
    MemSizer(RecurrentState),
    Sa(KvCache),
    Elu(EluState),
}

impl DecodeState {
    pub fn byte_size(&self) -> usize {
        match self {
            DecodeState::MemSizer(s) => s.byte_size(),
            DecodeState::Sa(c) => c.byte_size(),
            DecodeState::Elu(s) => s.byte_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    MemSizer(MemSizerLayer),
    Sa(SaParams),
    Elu(EluParams),
}

impl Attention {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, slots: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match cfg.kind {
            AttentionKind::MemSizer => Attention::MemSizer(MemSizerLayer::new(store, prefix, cfg.memsizer(slots), rng)?),
            AttentionKind::Sa => Attention::Sa(SaParams::new(store, prefix, cfg.heads, cfg.model_dim, rng)?),
            AttentionKind::Elu => Attention::Elu(EluParams::new(store, prefix, cfg.heads, cfg.model_dim, rng)?),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Attention::MemSizer(m) => m.param_ids(),
            Attention::Sa(p) => p.proj.param_ids(),
            Attention::Elu(p) => p.proj.param_ids(),
        }
    }

    fn self_graph(&self, g: &mut Graph<'_>, x: Var, count: usize, len: usize, causal: bool) -> Result<Var> {
        let seg = Segments { count, n: len, m: len };
        match self {
            Attention::MemSizer(m) if causal => Ok(m.graph_causal(g, x, count, len)?.0),
            Attention::MemSizer(m) => Ok(m.graph_cross(g, x, x, seg)?.0),
            Attention::Sa(p) => p.graph_forward(g, x, x, seg, causal),
            Attention::Elu(p) => p.graph_forward(g, x, x, seg, causal),
        }
    }

    fn cross_graph(&self, g: &mut Graph<'_>, x_t: Var, x_s: Var, seg: Segments) -> Result<Var> {
        match self {
            Attention::MemSizer(m) => Ok(m.graph_cross(g, x_t, x_s, seg)?.0),
            Attention::Sa(p) => p.graph_forward(g, x_t, x_s, seg, false),
            Attention::Elu(p) => p.graph_forward(g, x_t, x_s, seg, false),
        }
    }

    fn empty_state(&self) -> DecodeState {
        match self {
            Attention::MemSizer(m) => DecodeState::MemSizer(RecurrentState::new(m.cfg.slots, m.cfg.model_dim)),
            Attention::Sa(p) => DecodeState::Sa(KvCache::new(p.proj.model_dim)),
            Attention::Elu(p) => DecodeState::Elu(p.empty_state()),
        }
    }

    fn source_state(&self, store: &ParamStore, x_s: &Matrix) -> Result<DecodeState> {
        Ok(match self {
            Attention::MemSizer(m) => DecodeState::MemSizer(RecurrentState {
                v_sum: m.value_matrix_unscaled(store, x_s)?,
                count: x_s.rows(),
            }),
            Attention::Sa(p) => DecodeState::Sa(p.source_cache(store, x_s)?),
            Attention::Elu(p) => DecodeState::Elu(p.source_state(store, x_s)?),
        })
    }

    /// Absorbs `x` into the state and reads it.
    fn step(&self, store: &ParamStore, st: &mut DecodeState, x: &Matrix) -> Result<Matrix> {
        match (self, st) {
            (Attention::MemSizer(m), DecodeState::MemSizer(s)) => m.causal_step_mut(store, s, x),
            (Attention::Sa(p), DecodeState::Sa(c)) => p.step_mut(store, c, x),
            (Attention::Elu(p), DecodeState::Elu(s)) => p.step_mut(store, s, x),
            _ => Err(Error::invalid("Attention::step", "decode state does not match attention kind")),
        }
    }

    /// Reads a fixed (source) state.
    fn read(&self, store: &ParamStore, st: &DecodeState, x: &Matrix) -> Result<Matrix> {
        match (self, st) {
            (Attention::MemSizer(m), DecodeState::MemSizer(s)) => {
                let alpha = m.attention_weights_avg(store, x)?;
                Ok(m.read(&alpha, &s.v_sum, s.count))
            }
            (Attention::Sa(p), DecodeState::Sa(c)) => p.attend(store, c, x),
            (Attention::Elu(p), DecodeState::Elu(s)) => p.attend(store, s, x),
            _ => Err(Error::invalid("Attention::read", "decode state does not match attention kind")),
        }
    }

    fn eager_self(&self, store: &ParamStore, x: &Matrix, causal: bool) -> Result<Matrix> {
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let out = self.self_graph(&mut g, xv, 1, x.rows(), causal)?;
        Ok(g.value(out).clone())
    }
}

/// Layer-norm gain and bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{prefix}.gain"), Matrix::filled(1, d, 1.0)),
            bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, d)),
        }
    }

    fn graph(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gn, bs) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gn, bs, DEFAULT_LN_EPS)
    }

    fn eager(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        Ok(layer_norm_raw(x, store.get(self.gain).data(), store.get(self.bias).data(), DEFAULT_LN_EPS)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, f: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: store.add(format!("{prefix}.w1"), xavier_uniform(d, f, rng)),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, f)),
            w2: store.add(format!("{prefix}.w2"), xavier_uniform(f, d, rng)),
            b2: store.add(format!("{prefix}.b2"), Matrix::zeros(1, d)),
        }
    }

    fn graph(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let _scope = counter::scope(Category::FeedForward);
        let h = affine(g, x, self.w1, self.b1)?;
        let h = g.relu(h);
        affine(g, h, self.w2, self.b2)
    }

    fn eager(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let _scope = counter::scope(Category::FeedForward);
        let h = relu(&affine_eager(store, x, self.w1, self.b1)?);
        affine_eager(store, &h, self.w2, self.b2)
    }
}

/// Cross-attention sub-layer of a decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSublayer {
    pub norm: Norm,
    pub attn: Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub causal: bool,
    pub cross: Option<CrossSublayer>,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

/// Decode state of one decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub self_state: DecodeState,
    pub cross: Option<DecodeState>,
}

impl LayerState {
    pub fn byte_size(&self) -> usize {
        self.self_state.byte_size() + self.cross.as_ref().map_or(0, DecodeState::byte_size)
    }
}

/// How a block is being run.
pub enum BlockMode<'a> {
    /// Bidirectional self-attention over `count` sequences of `len` rows.
    Encode { count: usize, len: usize },
    /// Teacher-forced decoder over all positions at once; `memory` is the
    /// encoder output with its segment layout.
    DecodeParallel { count: usize, len: usize, memory: Option<(Var, Segments)> },
    /// One token for one stream.
    DecodeStep(&'a mut LayerState),
}

impl Block {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, causal: bool, cross: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.model_dim;
        let self_slots = if causal { cfg.k_causal } else { cfg.k_cross };
        let self_norm = Norm::new(store, &format!("{prefix}.self_ln"), d);
        let self_attn = Attention::new(store, &format!("{prefix}.self"), cfg, self_slots, rng)?;
        let cross = if cross {
            Some(CrossSublayer {
                norm: Norm::new(store, &format!("{prefix}.cross_ln"), d),
                attn: Attention::new(store, &format!("{prefix}.cross"), cfg, cfg.k_cross, rng)?,
            })
        } else {
            None
        };
        let ffn_norm = Norm::new(store, &format!("{prefix}.ffn_ln"), d);
        let ffn = FeedForward::new(store, &format!("{prefix}.ffn"), d, cfg.ffn_dim, rng);
        Ok(Block {
            self_norm,
            self_attn,
            causal,
            cross,
            ffn_norm,
            ffn,
        })
    }

    /// Parallel forward on the tape.
    pub fn graph_forward(&self, g: &mut Graph<'_>, x: Var, count: usize, len: usize, memory: Option<(Var, Segments)>) -> Result<Var> {
        let h = self.self_norm.graph(g, x)?;
        let a = self.self_attn.self_graph(g, h, count, len, self.causal)?;
        let mut x = g.add(x, a)?;
        if let Some(c) = &self.cross {
            let (mem, seg) = memory.ok_or(Error::invalid("Block::graph_forward", "decoder block needs encoder output"))?;
            let h = c.norm.graph(g, x)?;
            let a = c.attn.cross_graph(g, h, mem, seg)?;
            x = g.add(x, a)?;
        }
        let h = self.ffn_norm.graph(g, x)?;
        let f = self.ffn.graph(g, h)?;
        g.add(x, f)
    }

    /// One decoding step for a `1 x d` row.
    pub fn step(&self, store: &ParamStore, x: &Matrix, st: &mut LayerState) -> Result<Matrix> {
        let h = self.self_norm.eager(store, x)?;
        let a = self.self_attn.step(store, &mut st.self_state, &h)?;
        let mut x = x.add(&a)?;
        match (&self.cross, &st.cross) {
            (Some(c), Some(mem)) => {
                let h = c.norm.eager(store, &x)?;
                x.add_assign(&c.attn.read(store, mem, &h)?)?;
            }
            (Some(_), None) => return Err(Error::invalid("Block::step", "decoder block needs encoder output")),
            _ => {}
        }
        let h = self.ffn_norm.eager(store, &x)?;
        x.add_assign(&self.ffn.eager(store, &h)?)?;
        Ok(x)
    }

    /// Runs the block in any mode on a single sequence (or a stack of
    /// them for the parallel modes) given as plain matrices.
    pub fn forward(&self, store: &ParamStore, x: &Matrix, memory: Option<&Matrix>, mode: BlockMode<'_>) -> Result<Matrix> {
        match mode {
            BlockMode::DecodeStep(st) => self.step(store, x, st),
            BlockMode::Encode { count, len } => {
                let mut g = Graph::inference(store);
                let xv = g.constant(x.clone());
                let y = self.graph_forward(&mut g, xv, count, len, None)?;
                Ok(g.value(y).clone())
            }
            BlockMode::DecodeParallel { count, len, .. } => {
                let mut g = Graph::inference(store);
                let xv = g.constant(x.clone());
                let mem = match memory {
                    Some(m) => {
                        let seg = Segments {
                            count,
                            n: len,
                            m: m.rows() / count.max(1),
                        };
                        Some((g.constant(m.clone()), seg))
                    }
                    None => None,
                };
                let y = self.graph_forward(&mut g, xv, count, len, mem)?;
                Ok(g.value(y).clone())
            }
        }
    }

    fn start(&self, store: &ParamStore, memory: Option<&Matrix>) -> Result<LayerState> {
        let cross = match (&self.cross, memory) {
            (Some(c), Some(m)) => Some(c.attn.source_state(store, m)?),
            (Some(_), None) => return Err(Error::invalid("Block::start", "decoder block needs encoder output")),
            (None, _) => None,
        };
        Ok(LayerState {
            self_state: self.self_attn.empty_state(),
            cross,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.self_norm.gain, self.self_norm.bias];
        ids.extend(self.self_attn.param_ids());
        if let Some(c) = &self.cross {
            ids.extend([c.norm.gain, c.norm.bias]);
            ids.extend(c.attn.param_ids());
        }
        ids.extend([self.ffn_norm.gain, self.ffn_norm.bias, self.ffn.w1, self.ffn.b1, self.ffn.w2, self.ffn.b2]);
        ids
    }

    /// Eager self-attention sub-layer output alone, for tests.
    pub fn self_attention(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        self.self_attn.eager_self(store, x, self.causal)
    }
}

/// Sinusoidal position code for one position.
pub fn position_code(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Decoding session for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSession {
    pub layers: Vec<LayerState>,
    pub position: usize,
}

impl DecodeSession {
    /// Bytes held by all per-layer decode state.
    pub fn byte_size(&self) -> usize {
        self.layers.iter().map(LayerState::byte_size).sum()
    }

    /// Bytes of the decoder self-attention states only.
    pub fn self_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.self_state.byte_size()).sum()
    }

    pub fn cross_bytes(&self) -> usize {
        self.byte_size() - self.self_bytes()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: ParamId,
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
    pub enc_norm: Option<Norm>,
    pub dec_norm: Norm,
}

fn check_batch(op: &'static str, seqs: &[Vec<usize>], vocab: usize) -> Result<usize> {
    let first = seqs.first().ok_or(Error::Empty(op))?;
    let len = first.len();
    if len == 0 {
        return Err(Error::Empty(op));
    }
    for s in seqs {
        if s.len() != len {
            return Err(Error::invalid(op, "all sequences in a batch must have the same length"));
        }
        if let Some(&t) = s.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid(op, format!("token {t} outside vocab {vocab}")));
        }
    }
    Ok(len)
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let d = cfg.block.model_dim;
        let embed = store.add("embed", xavier_uniform(cfg.vocab, d, &mut rng));
        let mut encoder = Vec::new();
        for l in 0..cfg.encoder_layers {
            encoder.push(Block::new(&mut store, &format!("enc.{l}"), &cfg.block, false, false, &mut rng)?);
        }
        let enc_norm = (!cfg.is_decoder_only()).then(|| Norm::new(&mut store, "enc.ln", d));
        let mut decoder = Vec::new();
        for l in 0..cfg.decoder_layers {
            decoder.push(Block::new(&mut store, &format!("dec.{l}"), &cfg.block, true, !cfg.is_decoder_only(), &mut rng)?);
        }
        let dec_norm = Norm::new(&mut store, "dec.ln", d);
        Ok(Model {
            cfg,
            store,
            embed,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn model_dim(&self) -> usize {
        self.cfg.block.model_dim
    }

    /// Every memory-key parameter, for freeze checks.
    pub fn key_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in self.encoder.iter().chain(&self.decoder) {
            let attns = std::iter::once(&b.self_attn).chain(b.cross.as_ref().map(|c| &c.attn));
            for a in attns {
                if let Attention::MemSizer(m) = a {
                    ids.extend(&m.phi);
                }
            }
        }
        ids
    }

    fn positions(&self, count: usize, len: usize) -> Matrix {
        let d = self.model_dim();
        let mut m = Matrix::zeros(count * len, d);
        if self.cfg.positions {
            for i in 0..len {
                let code = position_code(i, d);
                for s in 0..count {
                    m.row_mut(s * len + i).copy_from_slice(&code);
                }
            }
        }
        m
    }

    fn embed_graph(&self, g: &mut Graph<'_>, seqs: &[Vec<usize>]) -> Result<(Var, usize)> {
        let len = check_batch("embed", seqs, self.cfg.vocab)?;
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let table = g.param(self.embed);
        let e = g.gather(table, &ids)?;
        let e = g.scale(e, (self.model_dim() as f64).sqrt());
        let pos = g.constant(self.positions(seqs.len(), len));
        Ok((g.add(e, pos)?, len))
    }

    /// Encoder output for a batch of equal-length sources, rows stacked by
    /// sequence.
    pub fn encode_graph(&self, g: &mut Graph<'_>, src: &[Vec<usize>]) -> Result<Var> {
        let norm = self.enc_norm.ok_or(Error::invalid("encode", "decoder-only model has no encoder"))?;
        let (mut x, len) = self.embed_graph(g, src)?;
        for b in &self.encoder {
            x = b.graph_forward(g, x, src.len(), len, None)?;
        }
        norm.graph(g, x)
    }

    /// Teacher-forced logits, one row per decoder input position.
    pub fn logits_graph(&self, g: &mut Graph<'_>, src: Option<&[Vec<usize>]>, tgt_in: &[Vec<usize>]) -> Result<Var> {
        let memory = match (self.cfg.is_decoder_only(), src) {
            (true, _) => None,
            (false, Some(src)) => {
                if src.len() != tgt_in.len() {
                    return Err(Error::invalid("logits", "source and target batch sizes differ"));
                }
                let m = check_batch("logits", src, self.cfg.vocab)?;
                let enc = self.encode_graph(g, src)?;
                Some((enc, m))
            }
            (false, None) => return Err(Error::invalid("logits", "encoder-decoder model needs a source")),
        };
        let (mut x, len) = self.embed_graph(g, tgt_in)?;
        let memory = memory.map(|(enc, m)| {
            (
                enc,
                Segments {
                    count: tgt_in.len(),
                    n: len,
                    m,
                },
            )
        });
        for b in &self.decoder {
            x = b.graph_forward(g, x, tgt_in.len(), len, memory)?;
        }
        let h = self.dec_norm.graph(g, x)?;
        let table = g.param(self.embed);
        let _scope = counter::scope(Category::Projection);
        g.matmul_nt(h, table)
    }

    pub fn logits(&self, src: Option<&[Vec<usize>]>, tgt_in: &[Vec<usize>]) -> Result<Matrix> {
        let mut g = Graph::inference(&self.store);
        let out = self.logits_graph(&mut g, src, tgt_in)?;
        Ok(g.value(out).clone())
    }

    /// Encodes `src` (ignored by decoder-only models) and prepares per-layer
    /// states.
    pub fn start(&self, src: Option<&[usize]>) -> Result<DecodeSession> {
        let memory = if self.cfg.is_decoder_only() {
            None
        } else {
            let src = src.filter(|s| !s.is_empty()).ok_or(Error::Empty("source tokens"))?;
            let mut g = Graph::inference(&self.store);
            let enc = self.encode_graph(&mut g, &[src.to_vec()])?;
            Some(g.value(enc).clone())
        };
        let layers = self
            .decoder
            .iter()
            .map(|b| b.start(&self.store, memory.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodeSession { layers, position: 0 })
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&self, sess: &mut DecodeSession, token: usize) -> Result<Vec<f64>> {
        if token >= self.cfg.vocab {
            return Err(Error::invalid("step", format!("token {token} outside vocab {}", self.cfg.vocab)));
        }
        let d = self.model_dim();
        let table = self.store.get(self.embed);
        let scale = (d as f64).sqrt();
        let pos = if self.cfg.positions { position_code(sess.position, d) } else { vec![0.0; d] };
        let row: Vec<f64> = table.row(token).iter().zip(&pos).map(|(e, p)| e * scale + p).collect();
        let mut x = Matrix::new(1, d, row)?;
        for (b, st) in self.decoder.iter().zip(sess.layers.iter_mut()) {
            x = b.step(&self.store, &x, st)?;
        }
        sess.position += 1;
        let h = self.dec_norm.eager(&self.store, &x)?;
        let _scope = counter::scope(Category::Projection);
        Ok(h.matmul_nt(table)?.into_data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_store(self.cfg.to_kv().to_text(), &self.store).save(path)
    }

    /// Rebuilds the model from the configuration stored in the checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut kv = KeyValues::parse(&ck.config)?;
        let cfg = ModelConfig::new(AttentionKind::MemSizer, 16, 8, 1, 1).take_from(&mut kv)?;
        kv.finish()?;
        let mut m = Model::new(cfg)?;
        ck.apply(&mut m.store)?;
        Ok(m)
    }

    /// Loads parameters into this model, which must have the same layout.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        Checkpoint::load(path)?.apply(&mut self.store)
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. Encoder-decoder models condition on `src`; decoder-only
/// models treat it as a prompt. Returns at most `max_len` generated tokens,
/// ending with `eos` if it was produced.
pub fn greedy_decode(model: &Model, src: &[usize], max_len: usize, eos: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::invalid("greedy_decode", "max_len must be at least 1"));
    }
    if src.is_empty() {
        return Err(Error::Empty("greedy_decode source"));
    }
    let mut sess = model.start(Some(src))?;
    let mut logits = model.step(&mut sess, BOS)?;
    if model.cfg.is_decoder_only() {
        for &t in src {
            logits = model.step(&mut sess, t)?;
        }
    }
    let mut out = Vec::new();
    loop {
        let next = argmax(&logits);
        out.push(next);
        if next == eos || out.len() == max_len {
            return Ok(out);
        }
        logits = model.step(&mut sess, next)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(kind: AttentionKind, layers: usize) -> ModelConfig {
        let mut c = ModelConfig::new(kind, 11, 8, 2, layers);
        c.block.k_cross = 3;
        c.block.k_causal = 2;
        c.block.ffn_dim = 12;
        c
    }

    fn perturb(m: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.store.ids().collect::<Vec<_>>() {
            let (r, c) = m.store.get(id).shape();
            let noise = Matrix::from_fn(r, c, |_, _| rng.gen_range(-0.3..0.3));
            let v = m.store.get(id).add(&noise).unwrap();
            m.store.assign(id, v).unwrap();
        }
    }

    fn seqs(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..len).map(|_| rng.gen_range(FIRST_TOKEN..vocab)).collect()).collect()
    }

    #[test]
    fn teacher_forcing_matches_steps() {
        for kind in AttentionKind::ALL {
            for decoder_only in [false, true] {
                let mut cfg = small(kind, 2);
                if decoder_only {
                    cfg.encoder_layers = 0;
                }
                let mut m = Model::new(cfg).unwrap();
                perturb(&mut m, 3);
                let src = seqs(2, 5, 11, 1);
                let tgt = seqs(2, 7, 11, 2);
                let par = m.logits(Some(&src), &tgt).unwrap();
                for (s, (src_s, tgt_s)) in src.iter().zip(&tgt).enumerate() {
                    let mut sess = m.start(Some(src_s)).unwrap();
                    for (i, &t) in tgt_s.iter().enumerate() {
                        let l = m.step(&mut sess, t).unwrap();
                        for (c, v) in l.iter().enumerate() {
                            let diff = (v - par.get(s * 7 + i, c)).abs();
                            assert!(diff < 1e-8, "{kind} decoder_only={decoder_only} pos {i}: {diff}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn parameter_count_matches_config() {
        for kind in AttentionKind::ALL {
            for enc in [0, 2] {
                let mut cfg = small(kind, 2);
                cfg.encoder_layers = enc;
                let m = Model::new(cfg.clone()).unwrap();
                assert_eq!(m.param_count(), cfg.param_count(), "{kind}");
            }
        }
    }

    #[test]
    fn memsizer_smaller_than_sa_by_formula() {
        let mut ms = ModelConfig::new(AttentionKind::MemSizer, 50, 16, 4, 6);
        ms.block.k_cross = 8;
        ms.block.k_causal = 4;
        let mut sa = ms.clone();
        sa.block.kind = AttentionKind::Sa;
        let diff: usize = ms
            .attention_sites()
            .iter()
            .map(|(_, k)| attention_param_count(16) - ms.block.attention_params(*k))
            .sum();
        assert_eq!(sa.param_count() - ms.param_count(), diff);
        assert_eq!(
            Model::new(sa).unwrap().param_count() - Model::new(ms).unwrap().param_count(),
            diff
        );
    }

    #[test]
    fn zero_branches_make_block_identity() {
        for kind in AttentionKind::ALL {
            let mut m = Model::new(small(kind, 1)).unwrap();
            let b = m.decoder[0].clone();
            let zero = |m: &mut Model, id: ParamId| {
                let (r, c) = m.store.get(id).shape();
                m.store.assign(id, Matrix::zeros(r, c)).unwrap();
            };
            for a in std::iter::once(&b.self_attn).chain(b.cross.as_ref().map(|c| &c.attn)) {
                match a {
                    Attention::MemSizer(l) => zero(&mut m, l.w_r),
                    Attention::Sa(p) => {
                        zero(&mut m, p.proj.w_o);
                        zero(&mut m, p.proj.b_o);
                    }
                    Attention::Elu(p) => {
                        zero(&mut m, p.proj.w_o);
                        zero(&mut m, p.proj.b_o);
                    }
                }
            }
            zero(&mut m, b.ffn.w2);
            zero(&mut m, b.ffn.b2);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = Matrix::from_fn(4, 8, |_, _| rng.gen_range(-1.0..1.0));
            let mem = Matrix::from_fn(3, 8, |_, _| rng.gen_range(-1.0..1.0));
            let y = b
                .forward(&m.store, &x, Some(&mem), BlockMode::DecodeParallel { count: 1, len: 4, memory: None })
                .unwrap();
            assert!(y.max_abs_diff(&x) < 1e-15, "{kind}");
        }
    }

    #[test]
    fn decoder_block_requires_memory() {
        let m = Model::new(small(AttentionKind::Sa, 1)).unwrap();
        let x = Matrix::zeros(2, 8);
        let r = m.decoder[0].forward(&m.store, &x, None, BlockMode::DecodeParallel { count: 1, len: 2, memory: None });
        assert!(r.is_err());
        assert!(m.start(None).is_err());
    }

    #[test]
    fn memsizer_encoder_without_positions_is_permutation_equivariant() {
        let mut cfg = small(AttentionKind::MemSizer, 2);
        cfg.positions = false;
        let m = Model::new(cfg).unwrap();
        let src = vec![vec![3, 7, 5, 9, 4]];
        let perm = [4usize, 2, 0, 3, 1];
        let psrc = vec![perm.iter().map(|&i| src[0][i]).collect::<Vec<_>>()];
        let run = |s: &[Vec<usize>]| {
            let mut g = Graph::inference(&m.store);
            let v = m.encode_graph(&mut g, s).unwrap();
            g.value(v).clone()
        };
        let a = run(&src).select_rows(&perm).unwrap();
        assert!(a.max_abs_diff(&run(&psrc)) < 1e-12);
        let mut with_pos = small(AttentionKind::MemSizer, 2);
        with_pos.positions = true;
        let m = Model::new(with_pos).unwrap();
        let mut g = Graph::inference(&m.store);
        let v = m.encode_graph(&mut g, &src).unwrap();
        let a = g.value(v).select_rows(&perm).unwrap();
        let mut g = Graph::inference(&m.store);
        let v = m.encode_graph(&mut g, &psrc).unwrap();
        assert!(a.max_abs_diff(g.value(v)) > 1e-6);
    }

    #[test]
    fn greedy_decode_cases() {
        let mut m = Model::new(small(AttentionKind::Sa, 1)).unwrap();
        // Make every logit row favour EOS by pushing its embedding along the
        // final layer-norm bias.
        let bias: Vec<f64> = m.store.get(m.embed).row(EOS).iter().map(|v| v * 100.0).collect();
        m.store.assign(m.dec_norm.bias, Matrix::row_vector(&bias).unwrap()).unwrap();
        m.store.assign(m.dec_norm.gain, Matrix::zeros(1, 8)).unwrap();
        assert_eq!(greedy_decode(&m, &[5, 6], 10, EOS).unwrap(), vec![EOS]);
        assert!(greedy_decode(&m, &[], 10, EOS).is_err());
        assert!(greedy_decode(&m, &[4], 0, EOS).is_err());
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn greedy_is_deterministic() {
        let mut m = Model::new(small(AttentionKind::MemSizer, 1)).unwrap();
        perturb(&mut m, 9);
        let a = greedy_decode(&m, &[3, 4, 5], 6, EOS).unwrap();
        let b = greedy_decode(&m, &[3, 4, 5], 6, EOS).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 6);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = Model::new(small(AttentionKind::MemSizer, 1)).unwrap();
        perturb(&mut m, 4);
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.cfg, m.cfg);
        let mut sa = Model::new(small(AttentionKind::Sa, 1)).unwrap();
        assert!(sa.load_params(&path).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Model::load(&path).is_err());
    }

    #[test]
    fn full_model_gradient_check() {
        use crate::autodiff::grad_check;
        for kind in AttentionKind::ALL {
            let mut m = Model::new(small(kind, 2)).unwrap();
            perturb(&mut m, 5);
            let src = seqs(2, 3, 11, 7);
            let tgt = seqs(2, 4, 11, 8);
            let targets: Vec<usize> = seqs(2, 4, 11, 9).concat();
            let ids: Vec<ParamId> = m.store.ids().collect();
            let r = grad_check(&m.store, &ids, 1e-5, |g| {
                let l = m.logits_graph(g, Some(&src), &tgt)?;
                g.smoothed_cross_entropy(l, &targets, 0.1, Some(PAD))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-3, "{kind}: {r:?}");
        }
    }

    #[test]
    fn config_round_trip() {
        let mut c = small(AttentionKind::Elu, 2);
        c.block.attn_scale = Some(0.25);
        c.block.freeze_keys = true;
        let mut kv = c.to_kv();
        let back = ModelConfig::new(AttentionKind::Sa, 99, 4, 1, 1).take_from(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, c);
        let mut bad = KeyValues::parse("arch = memsizer\nk_causal = 1").unwrap();
        assert!(small(AttentionKind::MemSizer, 1).take_from(&mut bad).is_err());
    }
}
