//! Generation benchmarks: wall-clock tokens per second, decode-state bytes
//! and instrumented multiply-adds per decoded token, across lengths, slot
//! counts and head counts.
//!
//! Each cell encodes a random source of length `L` and greedily decodes
//! exactly `L` tokens per stream. Cells run one after another on the
//! calling thread.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::counter::{self, Category, Counts};
use crate::error::{Error, Result};
use crate::model::{argmax, AttentionKind, DecodeSession, Model, ModelConfig, BOS, FIRST_TOKEN};

pub const CSV_HEADER: &str = "arch,length,tokens_per_sec,cache_bytes_analytic,cache_bytes_observed,muladds_per_token";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub archs: Vec<AttentionKind>,
    pub model_dim: usize,
    pub heads: usize,
    pub k_cross: usize,
    pub k_causal: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub batch: usize,
    pub lengths: Vec<usize>,
    pub warmup: usize,
    pub measured: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            archs: vec![AttentionKind::MemSizer, AttentionKind::Sa],
            model_dim: 128,
            heads: 4,
            k_cross: 8,
            k_causal: 4,
            layers: 4,
            ffn_dim: 512,
            vocab: 64,
            batch: 4,
            lengths: vec![64, 128, 256, 512, 1024],
            warmup: 2,
            measured: 5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() || self.lengths.is_empty() {
            return Err(Error::Config("need at least one architecture and one length".into()));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return Err(Error::Config(format!("lengths must be positive and strictly ascending: {:?}", self.lengths)));
        }
        if self.measured < 3 {
            return Err(Error::Config(format!("need at least 3 measured iterations, got {}", self.measured)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        for &a in &self.archs {
            self.model_config(a).validate()?;
        }
        Ok(())
    }

    pub fn take_from(mut self, kv: &mut KeyValues) -> Result<Self> {
        if let Some(a) = kv.take_list::<AttentionKind>("arch")? {
            self.archs = a;
        }
        if let Some(l) = kv.take_list::<usize>("lengths")? {
            self.lengths = l;
        }
        if let Some(d) = kv.take::<usize>("d")? {
            self.model_dim = d;
            self.ffn_dim = 4 * d;
        }
        self.heads = kv.take_or("heads", self.heads)?;
        self.k_cross = kv.take_or("k_cross", self.k_cross)?;
        self.k_causal = kv.take_or("k_causal", self.k_causal)?;
        self.layers = kv.take_or("layers", self.layers)?;
        self.ffn_dim = kv.take_or("ffn_dim", self.ffn_dim)?;
        self.vocab = kv.take_or("vocab", self.vocab)?;
        self.batch = kv.take_or("batch", self.batch)?;
        self.warmup = kv.take_or("warmup", self.warmup)?;
        self.measured = kv.take_or("measured", self.measured)?;
        self.seed = kv.take_or("seed", self.seed)?;
        self.validate()?;
        Ok(self)
    }

    pub fn model_config(&self, kind: AttentionKind) -> ModelConfig {
        let mut c = ModelConfig::new(kind, self.vocab, self.model_dim, self.heads, self.layers);
        c.block.k_cross = self.k_cross;
        c.block.k_causal = self.k_causal;
        c.block.ffn_dim = self.ffn_dim;
        c.init_seed = self.seed;
        c
    }
}

/// Decode-state bytes of one stream after reading a length-`length` source
/// and decoding `length` tokens, split into (self attention, cross
/// attention).
pub fn cache_bytes_parts(kind: AttentionKind, cfg: &BenchConfig, length: usize) -> (usize, usize) {
    let f = std::mem::size_of::<f64>();
    let (l, d) = (cfg.layers, cfg.model_dim);
    match kind {
        AttentionKind::MemSizer => (l * cfg.k_causal * d * f, l * cfg.k_cross * d * f),
        AttentionKind::Sa => (l * 2 * length * d * f, l * 2 * length * d * f),
        AttentionKind::Elu => {
            let h = d / cfg.heads;
            let per = cfg.heads * (h * h + h) * f;
            (l * per, l * per)
        }
    }
}

pub fn cache_bytes_analytic(kind: AttentionKind, cfg: &BenchConfig, length: usize) -> usize {
    let (s, c) = cache_bytes_parts(kind, cfg, length);
    s + c
}

/// Attention-stage multiply-adds (weights plus value path) per decoded
/// token, derived from the layer definitions. Exact for memsizer and elu;
/// for sa it is the mean over a length-`length` decode.
pub fn predicted_attention_muladds(kind: AttentionKind, cfg: &BenchConfig, length: usize) -> f64 {
    let (l, d, r) = (cfg.layers as f64, cfg.model_dim as f64, cfg.heads as f64);
    match kind {
        AttentionKind::MemSizer => {
            let (kc, kx) = (cfg.k_causal as f64, cfg.k_cross as f64);
            // self: outer + r logits + read; cross: r logits + read
            l * ((kc * d + r * kc * d + kc * d) + (r * kx * d + kx * d))
        }
        AttentionKind::Sa => {
            let n = length as f64;
            let mean_prefix = (n + 1.0) / 2.0;
            l * 2.0 * d * (mean_prefix + n)
        }
        AttentionKind::Elu => {
            let h = d / r;
            // self: S update + den + read; cross: den + read
            l * (r * (h * h + h + h * h) + r * (h + h * h))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub arch: AttentionKind,
    pub length: usize,
    pub tokens_per_sec: f64,
    pub cache_bytes_analytic: usize,
    pub cache_bytes_observed: usize,
    /// Decode-step attention multiply-adds per generated token.
    pub muladds_per_token: f64,
    /// Every counter category, summed over one iteration's decode steps.
    pub decode_counts: Counts,
    pub decoded_tokens: usize,
    pub failure: Option<String>,
}

impl BenchRecord {
    pub fn per_token(&self, cat: Category) -> f64 {
        self.decode_counts.get(cat) as f64 / self.decoded_tokens.max(1) as f64
    }
}

struct Iteration {
    seconds: f64,
    decode_counts: Counts,
    decoded: usize,
    session_bytes: usize,
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(FIRST_TOKEN..vocab)).collect()
}

/// Encodes `src` and decodes `steps` tokens, ignoring end-of-sequence.
/// Returns the session after the last step and the decode-only counts.
pub fn generate(model: &Model, src: &[usize], steps: usize) -> Result<(DecodeSession, Counts, Vec<usize>)> {
    let mut sess = model.start(Some(src))?;
    let before = counter::snapshot();
    let mut token = BOS;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = model.step(&mut sess, token)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "generate",
                detail: format!("logits at step {}", out.len()),
            });
        }
        token = argmax(&logits);
        out.push(token);
    }
    Ok((sess, counter::snapshot().since(&before), out))
}

fn run_iteration(model: &Model, cfg: &BenchConfig, length: usize, rng: &mut ChaCha8Rng) -> Result<Iteration> {
    let sources: Vec<Vec<usize>> = (0..cfg.batch).map(|_| random_tokens(rng, length, cfg.vocab)).collect();
    let start = Instant::now();
    let mut decode_counts = Counts::default();
    let mut session_bytes = 0;
    for src in &sources {
        let (sess, counts, _) = generate(model, src, length)?;
        decode_counts = decode_counts.plus(&counts);
        session_bytes = sess.byte_size();
    }
    Ok(Iteration {
        seconds: start.elapsed().as_secs_f64(),
        decode_counts,
        decoded: cfg.batch * length,
        session_bytes,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn measure_cell(model: &Model, cfg: &BenchConfig, kind: AttentionKind, length: usize) -> BenchRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (length as u64) << 8);
    let analytic = cache_bytes_analytic(kind, cfg, length);
    let mut rec = BenchRecord {
        arch: kind,
        length,
        tokens_per_sec: 0.0,
        cache_bytes_analytic: analytic,
        cache_bytes_observed: 0,
        muladds_per_token: 0.0,
        decode_counts: Counts::default(),
        decoded_tokens: 0,
        failure: None,
    };
    let mut rates = Vec::new();
    for it in 0..cfg.warmup + cfg.measured {
        match run_iteration(model, cfg, length, &mut rng) {
            Ok(r) => {
                if it == cfg.warmup {
                    rec.decode_counts = r.decode_counts;
                    rec.decoded_tokens = r.decoded;
                    rec.cache_bytes_observed = r.session_bytes;
                    rec.muladds_per_token = r.decode_counts.attention() as f64 / r.decoded as f64;
                }
                if it >= cfg.warmup {
                    rates.push(r.decoded as f64 / r.seconds);
                }
            }
            Err(e) => {
                rec.failure = Some(e.to_string());
                return rec;
            }
        }
    }
    rec.tokens_per_sec = median(rates);
    rec
}

/// One record per (architecture, length), in config order.
pub fn measure_generation(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &kind in &cfg.archs {
        let model = Model::new(cfg.model_config(kind))?;
        for &length in &cfg.lengths {
            out.push(measure_cell(&model, cfg, kind, length));
        }
    }
    Ok(out)
}

/// Counts only, no timing: a single stream of `length` steps.
pub fn count_generation(kind: AttentionKind, cfg: &BenchConfig, length: usize) -> Result<BenchRecord> {
    let model = Model::new(cfg.model_config(kind))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let src = random_tokens(&mut rng, length, cfg.vocab);
    let (sess, counts, _) = generate(&model, &src, length)?;
    Ok(BenchRecord {
        arch: kind,
        length,
        tokens_per_sec: 0.0,
        cache_bytes_analytic: cache_bytes_analytic(kind, cfg, length),
        cache_bytes_observed: sess.byte_size(),
        muladds_per_token: counts.attention() as f64 / length as f64,
        decode_counts: counts,
        decoded_tokens: length,
        failure: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObservedBytes {
    pub length: usize,
    pub total: usize,
    pub self_bytes: usize,
}

/// Decode-state bytes after a length-`L` generation, for each length.
pub fn observed_self_bytes(kind: AttentionKind, cfg: &BenchConfig, lengths: &[usize]) -> Result<Vec<ObservedBytes>> {
    let model = Model::new(cfg.model_config(kind))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    lengths
        .iter()
        .map(|&length| {
            let src = random_tokens(&mut rng, length, cfg.vocab);
            let (sess, _, _) = generate(&model, &src, length)?;
            Ok(ObservedBytes {
                length,
                total: sess.byte_size(),
                self_bytes: sess.self_bytes(),
            })
        })
        .collect()
}

/// Memsizer records for each slot count, used for both cross and causal
/// memories.
pub fn k_sweep(cfg: &BenchConfig, ks: &[usize], length: usize) -> Result<Vec<(usize, BenchRecord)>> {
    ks.iter()
        .map(|&k| {
            let c = BenchConfig {
                k_cross: k,
                k_causal: k,
                ..cfg.clone()
            };
            Ok((k, count_generation(AttentionKind::MemSizer, &c, length)?))
        })
        .collect()
}

/// Memsizer records for each head count.
pub fn r_sweep(cfg: &BenchConfig, rs: &[usize], length: usize) -> Result<Vec<(usize, BenchRecord)>> {
    rs.iter()
        .map(|&r| {
            let c = BenchConfig {
                heads: r,
                ..cfg.clone()
            };
            Ok((r, count_generation(AttentionKind::MemSizer, &c, length)?))
        })
        .collect()
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.arch, r.length, r.tokens_per_sec, r.cache_bytes_analytic, r.cache_bytes_observed, r.muladds_per_token
        );
    }
    s
}

pub fn summary(records: &[BenchRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(
            s,
            "{:>8} L={:<5} {:>10.1} tok/s  cache {:>10} B (analytic {:>10})  attn muladds/token {:>12.1}",
            r.arch.name(),
            r.length,
            r.tokens_per_sec,
            r.cache_bytes_observed,
            r.cache_bytes_analytic,
            r.muladds_per_token
        );
        if let Some(f) = &r.failure {
            let _ = write!(s, "  FAILED: {f}");
        }
        s.push('\n');
    }
    s
}
