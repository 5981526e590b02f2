//! Unbalanced key-value memory attention.
//!
//! For target rows `X_t` (`N x d`) and source rows `X_s` (`M x d`) a layer
//! with `r` heads and `k` memory slots computes
//!
//! ```text
//! alpha_i  = softmax(attn_scale * X_t Phi_i^T)            (N x k, per head)
//! alpha    = (1/r) sum_i alpha_i
//! V        = sum_j LN_slot(W_l x_j^T) LN_feat(x_j W_r)    (k x d)
//! out      = alpha V / sqrt(M)
//! ```
//!
//! The keys `Phi_i` (`k x d`) are learned and input-independent; the value
//! matrix is shared by all heads, so averaging the head weights first is
//! exactly the mean of the per-head outputs. There is no output projection.
//!
//! Both layer norms act per token: over the `k` entries of `W_l x_j^T` and
//! over the `d` entries of `x_j W_r`. That makes `V` a plain sum of per-token
//! outer products, so during causal decoding it is a rolling sum
//! ([`RecurrentState`]) and each step costs the same regardless of how many
//! tokens came before. The `1/sqrt(count)` factor is applied when reading,
//! never folded into the stored sum.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::counter::{self, Category};
use crate::error::{Error, Result};
use crate::kernels::Segments;
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{axpy, layer_norm_raw, outer, softmax_rows, Matrix, DEFAULT_LN_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct MemSizerConfig {
    pub heads: usize,
    pub slots: usize,
    pub model_dim: usize,
    /// Logit scale for the key similarities; `None` means `1/sqrt(d)`.
    pub attn_scale: Option<f64>,
    pub ln_eps: f64,
    /// Learnable gain/bias on both layer norms. When off they stay at 1/0.
    pub ln_affine: bool,
    pub freeze_keys: bool,
}

impl MemSizerConfig {
    pub fn new(heads: usize, slots: usize, model_dim: usize) -> Self {
        MemSizerConfig {
            heads,
            slots,
            model_dim,
            attn_scale: None,
            ln_eps: DEFAULT_LN_EPS,
            ln_affine: true,
            freeze_keys: false,
        }
    }

    pub fn scale(&self) -> f64 {
        self.attn_scale
            .unwrap_or_else(|| 1.0 / (self.model_dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots < 2 {
            return Err(Error::invalid(
                "MemSizerConfig",
                format!("need at least 2 memory slots, got {}", self.slots),
            ));
        }
        if self.heads == 0 || self.model_dim == 0 {
            return Err(Error::invalid("MemSizerConfig", "heads and model_dim must be positive"));
        }
        let s = self.scale();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("MemSizerConfig", format!("attention scale {s}")));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::invalid("MemSizerConfig", format!("layer norm epsilon {}", self.ln_eps)));
        }
        Ok(())
    }

    /// `r*k*d + k*d + d^2 + 2k + 2d`.
    pub fn param_count(&self) -> usize {
        let (r, k, d) = (self.heads, self.slots, self.model_dim);
        r * k * d + k * d + d * d + 2 * k + 2 * d
    }
}

/// Parameter count of one memory attention layer.
pub fn memsizer_param_count(cfg: &MemSizerConfig) -> usize {
    cfg.param_count()
}

/// Handles into a [`ParamStore`] for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MemSizerLayer {
    pub cfg: MemSizerConfig,
    pub phi: Vec<ParamId>,
    pub w_l: ParamId,
    pub w_r: ParamId,
    pub slot_gain: ParamId,
    pub slot_bias: ParamId,
    pub feat_gain: ParamId,
    pub feat_bias: ParamId,
}

/// Rolling-sum decode state: the unscaled value matrix and how many tokens
/// it has absorbed.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub v_sum: Matrix,
    pub count: usize,
}

impl RecurrentState {
    pub fn new(slots: usize, model_dim: usize) -> Self {
        RecurrentState {
            v_sum: Matrix::zeros(slots, model_dim),
            count: 0,
        }
    }

    /// Bytes of the stored value matrix.
    pub fn byte_size(&self) -> usize {
        self.v_sum.byte_size()
    }
}

#[derive(Clone, Debug)]
pub struct MemSizerOutput {
    pub out: Matrix,
    pub alpha_bar: Option<Matrix>,
}

/// `v_sum / sqrt(m)`.
pub fn scaled_value(v_sum: &Matrix, m: usize) -> Result<Matrix> {
    if m == 0 {
        return Err(Error::invalid("scaled_value", "token count must be at least 1"));
    }
    Ok(v_sum.scale(1.0 / (m as f64).sqrt()))
}

impl MemSizerLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: MemSizerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (r, k, d) = (cfg.heads, cfg.slots, cfg.model_dim);
        let phi: Vec<ParamId> = (0..r)
            .map(|i| store.add(format!("{prefix}.phi.{i}"), xavier_uniform(k, d, rng)))
            .collect();
        let w_l = store.add(format!("{prefix}.w_l"), xavier_uniform(k, d, rng));
        let w_r = store.add(format!("{prefix}.w_r"), xavier_uniform(d, d, rng));
        let slot_gain = store.add(format!("{prefix}.ln_slot.gain"), Matrix::filled(1, k, 1.0));
        let slot_bias = store.add(format!("{prefix}.ln_slot.bias"), Matrix::zeros(1, k));
        let feat_gain = store.add(format!("{prefix}.ln_feat.gain"), Matrix::filled(1, d, 1.0));
        let feat_bias = store.add(format!("{prefix}.ln_feat.bias"), Matrix::zeros(1, d));
        let layer = MemSizerLayer {
            cfg,
            phi,
            w_l,
            w_r,
            slot_gain,
            slot_bias,
            feat_gain,
            feat_bias,
        };
        layer.apply_flags(store);
        Ok(layer)
    }

    /// Re-applies `freeze_keys` / `ln_affine` to the trainable flags.
    pub fn apply_flags(&self, store: &mut ParamStore) {
        for &p in &self.phi {
            store.set_trainable(p, !self.cfg.freeze_keys);
        }
        for p in [self.slot_gain, self.slot_bias, self.feat_gain, self.feat_bias] {
            store.set_trainable(p, self.cfg.ln_affine);
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.phi.clone();
        ids.extend([
            self.w_l,
            self.w_r,
            self.slot_gain,
            self.slot_bias,
            self.feat_gain,
            self.feat_bias,
        ]);
        ids
    }

    fn check_cols(&self, op: &'static str, x: &Matrix) -> Result<()> {
        if x.cols() != self.cfg.model_dim {
            return Err(Error::Shape {
                op,
                left: x.shape(),
                right: (1, self.cfg.model_dim),
            });
        }
        Ok(())
    }

    /// Per-token slot and feature factors: `LN_slot(x W_l^T)` (`M x k`) and
    /// `LN_feat(x W_r)` (`M x d`).
    fn factors(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let (a, b) = {
            let _scope = counter::scope(Category::Projection);
            (x.matmul_nt(store.get(self.w_l))?, x.matmul(store.get(self.w_r))?)
        };
        let eps = self.cfg.ln_eps;
        let (a, _, _) = layer_norm_raw(&a, store.get(self.slot_gain).data(), store.get(self.slot_bias).data(), eps)?;
        let (b, _, _) = layer_norm_raw(&b, store.get(self.feat_gain).data(), store.get(self.feat_bias).data(), eps)?;
        Ok((a, b))
    }

    /// The addend one token contributes to the value matrix, unscaled.
    pub fn token_value_increment(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        self.check_cols("token_value_increment", x)?;
        if x.rows() != 1 {
            return Err(Error::Shape {
                op: "token_value_increment",
                left: x.shape(),
                right: (1, self.cfg.model_dim),
            });
        }
        let (a, b) = self.factors(store, x)?;
        let _scope = counter::scope(Category::ValueRead);
        outer(a.data(), b.data())
    }

    /// Absorbs one token; the input state is left untouched.
    pub fn state_update(&self, store: &ParamStore, s: &RecurrentState, x: &Matrix) -> Result<RecurrentState> {
        let inc = self.token_value_increment(store, x)?;
        let mut next = s.clone();
        next.v_sum.add_assign(&inc)?;
        next.count += 1;
        Ok(next)
    }

    /// `sum_j LN_slot(W_l x_j^T) LN_feat(x_j W_r)` over all source rows.
    pub fn value_matrix_unscaled(&self, store: &ParamStore, x_s: &Matrix) -> Result<Matrix> {
        self.check_cols("value_matrix_unscaled", x_s)?;
        let (a, b) = self.factors(store, x_s)?;
        let _scope = counter::scope(Category::ValueRead);
        a.matmul_tn(&b)
    }

    /// Mean over heads of `softmax(attn_scale * X_t Phi_i^T)`.
    pub fn attention_weights_avg(&self, store: &ParamStore, x_t: &Matrix) -> Result<Matrix> {
        self.check_cols("attention_weights_avg", x_t)?;
        let _scope = counter::scope(Category::AttentionWeights);
        let mut acc: Option<Matrix> = None;
        for &p in &self.phi {
            let w = softmax_rows(&x_t.matmul_nt(store.get(p))?, self.cfg.scale())?;
            match &mut acc {
                Some(a) => a.add_assign(&w)?,
                None => acc = Some(w),
            }
        }
        let acc = acc.ok_or(Error::Empty("attention_weights_avg"))?;
        Ok(acc.scale(1.0 / self.cfg.heads as f64))
    }

    /// Target rows read the memory built from all source rows.
    pub fn cross_forward(&self, store: &ParamStore, x_t: &Matrix, x_s: &Matrix) -> Result<MemSizerOutput> {
        let alpha = self.attention_weights_avg(store, x_t)?;
        let v = scaled_value(&self.value_matrix_unscaled(store, x_s)?, x_s.rows())?;
        let out = {
            let _scope = counter::scope(Category::ValueRead);
            alpha.matmul(&v)?
        };
        Ok(MemSizerOutput {
            out,
            alpha_bar: Some(alpha),
        })
    }

    /// Reference multi-head read: every head reads `V` with its own weights
    /// and the outputs are averaged.
    pub fn naive_multihead_forward(&self, store: &ParamStore, x_t: &Matrix, x_s: &Matrix) -> Result<Matrix> {
        self.check_cols("naive_multihead_forward", x_t)?;
        let v = scaled_value(&self.value_matrix_unscaled(store, x_s)?, x_s.rows())?;
        let mut acc = Matrix::zeros(x_t.rows(), self.cfg.model_dim);
        for &p in &self.phi {
            let alpha = softmax_rows(&x_t.matmul_nt(store.get(p))?, self.cfg.scale())?;
            acc.add_assign(&alpha.matmul(&v)?)?;
        }
        Ok(acc.scale(1.0 / self.cfg.heads as f64))
    }

    /// Causal self-attention over all positions in one pass: row `i` reads
    /// the prefix sum through token `i`, scaled by `1/sqrt(i+1)`.
    pub fn causal_forward_parallel(&self, store: &ParamStore, x: &Matrix) -> Result<MemSizerOutput> {
        self.check_cols("causal_forward_parallel", x)?;
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let (out, alpha) = self.graph_causal(&mut g, xv, 1, x.rows())?;
        Ok(MemSizerOutput {
            out: g.value(out).clone(),
            alpha_bar: Some(g.value(alpha).clone()),
        })
    }

    /// One decoding step: absorb `x_i`, then read the updated memory.
    pub fn causal_step(&self, store: &ParamStore, s: &RecurrentState, x_i: &Matrix) -> Result<(Matrix, RecurrentState)> {
        let next = self.state_update(store, s, x_i)?;
        let alpha = self.attention_weights_avg(store, x_i)?;
        let out = self.read(&alpha, &next.v_sum, next.count);
        Ok((out, next))
    }

    /// In-place variant of [`Self::causal_step`] for decode loops; returns
    /// the `1 x d` output.
    pub fn causal_step_mut(&self, store: &ParamStore, s: &mut RecurrentState, x_i: &Matrix) -> Result<Matrix> {
        let inc = self.token_value_increment(store, x_i)?;
        s.v_sum.add_assign(&inc)?;
        s.count += 1;
        let alpha = self.attention_weights_avg(store, x_i)?;
        Ok(self.read(&alpha, &s.v_sum, s.count))
    }

    /// `alpha (v_sum / sqrt(count))` for a single query row.
    pub(crate) fn read(&self, alpha: &Matrix, v_sum: &Matrix, count: usize) -> Matrix {
        let _scope = counter::scope(Category::ValueRead);
        let d = self.cfg.model_dim;
        let mut out = Matrix::zeros(1, d);
        for (slot, &w) in alpha.row(0).iter().enumerate() {
            axpy(out.row_mut(0), w, v_sum.row(slot));
        }
        let c = 1.0 / (count as f64).sqrt();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        out
    }

    /// Precomputed cross-attention memory for decoding: `V / sqrt(M)`.
    pub fn cross_memory(&self, store: &ParamStore, x_s: &Matrix) -> Result<Matrix> {
        scaled_value(&self.value_matrix_unscaled(store, x_s)?, x_s.rows())
    }

    /// Reads a precomputed cross memory for a batch of query rows.
    pub fn cross_read(&self, store: &ParamStore, x_t: &Matrix, memory: &Matrix) -> Result<Matrix> {
        let alpha = self.attention_weights_avg(store, x_t)?;
        let _scope = counter::scope(Category::ValueRead);
        alpha.matmul(memory)
    }

    // -- differentiable forms --------------------------------------------

    /// Averaged head weights on the tape.
    pub fn graph_attention_weights(&self, g: &mut Graph<'_>, x_t: Var) -> Result<Var> {
        let _scope = counter::scope(Category::AttentionWeights);
        let mut acc: Option<Var> = None;
        for &p in &self.phi {
            let phi = g.param(p);
            let logits = g.matmul_nt(x_t, phi)?;
            let w = g.softmax_rows(logits, self.cfg.scale())?;
            acc = Some(match acc {
                Some(a) => g.add(a, w)?,
                None => w,
            });
        }
        let acc = acc.ok_or(Error::Empty("graph_attention_weights"))?;
        Ok(if self.cfg.heads == 1 {
            acc
        } else {
            g.scale(acc, 1.0 / self.cfg.heads as f64)
        })
    }

    fn graph_factors(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let (a, b) = {
            let _scope = counter::scope(Category::Projection);
            let w_l = g.param(self.w_l);
            let w_r = g.param(self.w_r);
            (g.matmul_nt(x, w_l)?, g.matmul(x, w_r)?)
        };
        let (sg, sb) = (g.param(self.slot_gain), g.param(self.slot_bias));
        let (fg, fb) = (g.param(self.feat_gain), g.param(self.feat_bias));
        let a = g.layer_norm(a, sg, sb, self.cfg.ln_eps)?;
        let b = g.layer_norm(b, fg, fb, self.cfg.ln_eps)?;
        Ok((a, b))
    }

    /// Cross (or non-causal self) attention over `seg.count` stacked
    /// sequences. Returns `(out, alpha_bar)`.
    pub fn graph_cross(&self, g: &mut Graph<'_>, x_t: Var, x_s: Var, seg: Segments) -> Result<(Var, Var)> {
        let alpha = self.graph_attention_weights(g, x_t)?;
        let (a, b) = self.graph_factors(g, x_s)?;
        Ok((g.memory_read(alpha, a, b, seg)?, alpha))
    }

    /// Causal self-attention over `count` stacked sequences of `len` rows.
    /// Returns `(out, alpha_bar)`.
    pub fn graph_causal(&self, g: &mut Graph<'_>, x: Var, count: usize, len: usize) -> Result<(Var, Var)> {
        let alpha = self.graph_attention_weights(g, x)?;
        let (a, b) = self.graph_factors(g, x)?;
        Ok((g.causal_memory_read(alpha, a, b, count, len)?, alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn layer(r: usize, k: usize, d: usize, seed: u64) -> (ParamStore, MemSizerLayer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = MemSizerLayer::new(&mut store, "m", MemSizerConfig::new(r, k, d), &mut rng).unwrap();
        // Non-trivial affine parameters so they are exercised.
        for id in [l.slot_gain, l.slot_bias, l.feat_gain, l.feat_bias] {
            let (rr, cc) = store.get(id).shape();
            let m = Matrix::from_fn(rr, cc, |_, _| rng.gen_range(0.5..1.5));
            store.assign(id, m).unwrap();
        }
        (store, l, rng)
    }

    fn affine_free(r: usize, k: usize, d: usize, eps: f64, seed: u64) -> (ParamStore, MemSizerLayer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cfg = MemSizerConfig::new(r, k, d);
        cfg.ln_affine = false;
        cfg.ln_eps = eps;
        let l = MemSizerLayer::new(&mut store, "m", cfg, &mut rng).unwrap();
        (store, l, rng)
    }

    #[test]
    fn rejects_single_slot() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MemSizerLayer::new(&mut store, "m", MemSizerConfig::new(1, 1, 4), &mut rng).is_err());
    }

    #[test]
    fn zero_token_gives_zero_increment() {
        let (store, l, _) = affine_free(2, 3, 4, 1e-5, 1);
        let inc = l.token_value_increment(&store, &Matrix::zeros(1, 4)).unwrap();
        assert_eq!(inc, Matrix::zeros(3, 4));
        let s = RecurrentState::new(3, 4);
        let s2 = l.state_update(&store, &s, &Matrix::zeros(1, 4)).unwrap();
        assert_eq!(s2.v_sum, s.v_sum);
        assert_eq!(s2.count, 1);
        assert_eq!(s.count, 0);
    }

    #[test]
    fn identity_adaptors_hand_case() {
        let (mut store, l, _) = affine_free(1, 2, 2, 1e-14, 2);
        store.assign(l.w_l, Matrix::identity(2)).unwrap();
        store.assign(l.w_r, Matrix::identity(2)).unwrap();
        let inc = l
            .token_value_increment(&store, &Matrix::row_vector(&[3.0, 1.0]).unwrap())
            .unwrap();
        let want = Matrix::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]).unwrap();
        assert!(inc.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn increment_is_scale_invariant() {
        let (store, l, mut rng) = affine_free(2, 4, 6, 1e-12, 3);
        let x = random(1, 6, &mut rng);
        let a = l.token_value_increment(&store, &x).unwrap();
        let b = l.token_value_increment(&store, &x.scale(5.0)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn folding_tokens_matches_parallel_sum() {
        let (store, l, mut rng) = layer(2, 3, 4, 4);
        for m in [1usize, 6, 7] {
            let x = random(m, 4, &mut rng);
            let mut s = RecurrentState::new(3, 4);
            for i in 0..m {
                s = l.state_update(&store, &s, &x.slice_rows(i, 1).unwrap()).unwrap();
            }
            let par = l.value_matrix_unscaled(&store, &x).unwrap();
            assert!(par.max_abs_diff(&s.v_sum) < 1e-12);
            assert_eq!(s.count, m);
        }
    }

    #[test]
    fn value_matrix_ignores_row_order() {
        let (store, l, mut rng) = layer(2, 3, 4, 5);
        let x = random(5, 4, &mut rng);
        let perm = x.select_rows(&[3, 0, 4, 1, 2]).unwrap();
        let a = l.value_matrix_unscaled(&store, &x).unwrap();
        let b = l.value_matrix_unscaled(&store, &perm).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn scaled_value_cases() {
        let v = Matrix::filled(2, 2, 1.0);
        assert_eq!(scaled_value(&v, 1).unwrap(), v);
        assert_eq!(scaled_value(&v, 4).unwrap(), Matrix::filled(2, 2, 0.5));
        assert!((scaled_value(&v, 2).unwrap().get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(scaled_value(&v, 0).is_err());
    }

    #[test]
    fn attention_weight_cases() {
        let (store, l, mut rng) = layer(4, 5, 6, 6);
        let zero = l.attention_weights_avg(&store, &Matrix::zeros(2, 6)).unwrap();
        assert!(zero.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
        let x = random(3, 6, &mut rng);
        let got = l.attention_weights_avg(&store, &x).unwrap();
        let mut naive = Matrix::zeros(3, 5);
        for &p in &l.phi {
            let logits = x.matmul_nt(store.get(p)).unwrap();
            naive.add_assign(&softmax_rows(&logits, l.cfg.scale()).unwrap()).unwrap();
        }
        assert!(got.max_abs_diff(&naive.scale(0.25)) < 1e-14);

        let (store1, l1, _) = layer(1, 5, 6, 7);
        let one = l1.attention_weights_avg(&store1, &x).unwrap();
        let plain = softmax_rows(&x.matmul_nt(store1.get(l1.phi[0])).unwrap(), l1.cfg.scale()).unwrap();
        assert_eq!(one, plain);
    }

    #[test]
    fn cross_forward_matches_naive_and_graph() {
        let (store, l, mut rng) = layer(3, 4, 6, 8);
        let xt = random(3, 6, &mut rng);
        let xs = random(5, 6, &mut rng);
        let fast = l.cross_forward(&store, &xt, &xs).unwrap();
        let naive = l.naive_multihead_forward(&store, &xt, &xs).unwrap();
        assert!(fast.out.max_abs_diff(&naive) < 1e-12);
        for r in 0..3 {
            assert!((fast.alpha_bar.as_ref().unwrap().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut g = Graph::inference(&store);
        let (t, s) = (g.constant(xt.clone()), g.constant(xs.clone()));
        let (out, _) = l.graph_cross(&mut g, t, s, Segments { count: 1, n: 3, m: 5 }).unwrap();
        assert!(g.value(out).max_abs_diff(&fast.out) < 1e-12);
    }

    #[test]
    fn cross_forward_target_permutation_equivariant() {
        let (store, l, mut rng) = layer(2, 4, 6, 9);
        let xt = random(4, 6, &mut rng);
        let xs = random(5, 6, &mut rng);
        let idx = [2, 0, 3, 1];
        let a = l.cross_forward(&store, &xt, &xs).unwrap().out;
        let b = l.cross_forward(&store, &xt.select_rows(&idx).unwrap(), &xs).unwrap().out;
        assert!(a.select_rows(&idx).unwrap().max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn causal_single_row_equals_cross() {
        let (store, l, mut rng) = layer(2, 4, 6, 10);
        let x = random(1, 6, &mut rng);
        let c = l.causal_forward_parallel(&store, &x).unwrap();
        let x2 = l.cross_forward(&store, &x, &x).unwrap();
        assert!(c.out.max_abs_diff(&x2.out) < 1e-14);
    }

    #[test]
    fn causal_parallel_matches_steps() {
        let (store, l, mut rng) = layer(2, 4, 8, 11);
        let x = random(16, 8, &mut rng);
        let par = l.causal_forward_parallel(&store, &x).unwrap().out;
        let mut s = RecurrentState::new(4, 8);
        for i in 0..16 {
            let (o, next) = l.causal_step(&store, &s, &x.slice_rows(i, 1).unwrap()).unwrap();
            s = next;
            for c in 0..8 {
                assert!((o.get(0, c) - par.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let (store, l, mut rng) = layer(2, 4, 6, 12);
        let x = random(6, 6, &mut rng);
        let mut y = x.clone();
        for c in 0..6 {
            y.set(4, c, 0.3 * c as f64);
            y.set(5, c, -1.0);
        }
        let a = l.causal_forward_parallel(&store, &x).unwrap().out;
        let b = l.causal_forward_parallel(&store, &y).unwrap().out;
        assert!(a.slice_rows(0, 4).unwrap().max_abs_diff(&b.slice_rows(0, 4).unwrap()) == 0.0);
    }

    #[test]
    fn state_size_is_constant() {
        let (store, l, mut rng) = layer(2, 4, 6, 13);
        let mut s = RecurrentState::new(4, 6);
        let mut at16 = 0;
        for i in 0..4096 {
            let x = random(1, 6, &mut rng);
            l.causal_step_mut(&store, &mut s, &x).unwrap();
            if i + 1 == 16 {
                at16 = s.byte_size();
            }
        }
        assert_eq!(at16, s.byte_size());
        assert_eq!(s.count, 4096);
    }

    #[test]
    fn step_work_is_constant() {
        let (store, l, mut rng) = layer(3, 4, 8, 14);
        let mut s = RecurrentState::new(4, 8);
        let mut counts = Vec::new();
        for _ in 0..1000 {
            let x = random(1, 8, &mut rng);
            let before = counter::snapshot();
            l.causal_step_mut(&store, &mut s, &x).unwrap();
            counts.push(counter::snapshot().since(&before).total());
        }
        assert!(counts[0] > 0);
        assert_eq!(counts[1], counts[999]);
        // W_l + W_r + outer + logits + read
        let (r, k, d) = (3u64, 4u64, 8u64);
        assert_eq!(counts[1], k * d + d * d + k * d + r * k * d + k * d);
    }

    #[test]
    fn param_count_formula() {
        let cfg = MemSizerConfig::new(16, 32, 1024);
        assert_eq!(cfg.param_count(), 1_607_744);
        assert_eq!(MemSizerConfig::new(1, 2, 2).param_count(), 20);
        let base = MemSizerConfig::new(4, 8, 64);
        let doubled = MemSizerConfig::new(8, 8, 64);
        assert_eq!(doubled.param_count() - base.param_count(), 4 * 8 * 64);
        let (store, l, _) = layer(3, 4, 6, 0);
        assert_eq!(store.scalar_count(), l.cfg.param_count());
    }

    #[test]
    fn freeze_keys_marks_phi_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut cfg = MemSizerConfig::new(2, 3, 4);
        cfg.freeze_keys = true;
        let l = MemSizerLayer::new(&mut store, "m", cfg, &mut rng).unwrap();
        assert!(l.phi.iter().all(|&p| !store.is_trainable(p)));
        assert!(store.is_trainable(l.w_l));
    }

    #[test]
    fn shape_errors() {
        let (store, l, _) = layer(2, 3, 4, 0);
        assert!(l.token_value_increment(&store, &Matrix::zeros(1, 5)).is_err());
        assert!(l.token_value_increment(&store, &Matrix::zeros(2, 4)).is_err());
        assert!(l.cross_forward(&store, &Matrix::zeros(1, 3), &Matrix::zeros(1, 4)).is_err());
        assert!(l.attention_weights_avg(&store, &Matrix::zeros(2, 3)).is_err());
    }
}
