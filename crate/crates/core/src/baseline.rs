//! Reference attentions: softmax attention with a growing key/value cache
//! and `elu(x) + 1` kernelized attention with fixed-size recurrent state.
//!
//! Both use the same projection layout. Head `i` owns columns
//! `i*h .. (i+1)*h` of the stacked `d x d` query/key/value weights, which is
//! the same as `r` separate `d x h` projections side by side. The head
//! outputs are concatenated and passed through `W_o`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::counter::{self, Category};
use crate::error::{Error, Result};
use crate::kernels::{self, check_denominator, HeadLayout, Segments, MASK_LOGIT};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{axpy, dot, elu_plus_one, softmax_rows, Matrix};

/// `x W + b` on the tape.
pub(crate) fn affine(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn affine_eager(store: &ParamStore, x: &Matrix, w: ParamId, b: ParamId) -> Result<Matrix> {
    x.matmul(store.get(w))?.add_row(store.get(b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub heads: usize,
    pub model_dim: usize,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl Projections {
    fn new(store: &mut ParamStore, prefix: &str, heads: usize, model_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || model_dim == 0 || model_dim % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("model dim {model_dim} is not divisible into {heads} heads"),
            ));
        }
        let d = model_dim;
        let mut pair = |name: &str| {
            let w = store.add(format!("{prefix}.{name}.weight"), xavier_uniform(d, d, rng));
            let b = store.add(format!("{prefix}.{name}.bias"), Matrix::zeros(1, d));
            (w, b)
        };
        let (w_q, b_q) = pair("q");
        let (w_k, b_k) = pair("k");
        let (w_v, b_v) = pair("v");
        let (w_o, b_o) = pair("o");
        Ok(Projections {
            heads,
            model_dim,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o,
        ]
    }

    fn layout(&self, causal: bool) -> HeadLayout {
        HeadLayout {
            heads: self.heads,
            head_dim: self.head_dim(),
            causal,
        }
    }

    fn qkv(&self, g: &mut Graph<'_>, x_t: Var, x_s: Var) -> Result<(Var, Var, Var)> {
        let _scope = counter::scope(Category::Projection);
        Ok((
            affine(g, x_t, self.w_q, self.b_q)?,
            affine(g, x_s, self.w_k, self.b_k)?,
            affine(g, x_s, self.w_v, self.b_v)?,
        ))
    }

    fn output(&self, g: &mut Graph<'_>, heads: Var) -> Result<Var> {
        let _scope = counter::scope(Category::Projection);
        affine(g, heads, self.w_o, self.b_o)
    }

    fn output_eager(&self, store: &ParamStore, heads: &Matrix) -> Result<Matrix> {
        let _scope = counter::scope(Category::Projection);
        affine_eager(store, heads, self.w_o, self.b_o)
    }

    fn check_cols(&self, op: &'static str, x: &Matrix) -> Result<()> {
        if x.cols() != self.model_dim {
            return Err(Error::Shape {
                op,
                left: x.shape(),
                right: (1, self.model_dim),
            });
        }
        Ok(())
    }
}

/// Per-layer attention parameters: `4 (d^2 + d)` scalars.
pub fn attention_param_count(model_dim: usize) -> usize {
    4 * (model_dim * model_dim + model_dim)
}

fn check_causal(op: &'static str, x_t: &Matrix, x_s: &Matrix, causal: bool) -> Result<()> {
    if causal && x_t.rows() != x_s.rows() {
        return Err(Error::invalid(op, "causal attention needs the target to be its own source"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Softmax attention.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SaParams {
    pub proj: Projections,
}

/// Keys and values of every token seen so far, all heads side by side.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    width: usize,
}

impl KvCache {
    pub fn new(model_dim: usize) -> Self {
        KvCache {
            keys: Vec::new(),
            values: Vec::new(),
            width: model_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Bytes held by the cached key and value rows.
    pub fn byte_size(&self) -> usize {
        (self.keys.len() + self.values.len()) * std::mem::size_of::<f64>()
    }

    fn push(&mut self, k: &[f64], v: &[f64]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl SaParams {
    pub fn new(store: &mut ParamStore, prefix: &str, heads: usize, model_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(SaParams {
            proj: Projections::new(store, prefix, heads, model_dim, rng)?,
        })
    }

    pub fn graph_forward(&self, g: &mut Graph<'_>, x_t: Var, x_s: Var, seg: Segments, causal: bool) -> Result<Var> {
        let (q, k, v) = self.proj.qkv(g, x_t, x_s)?;
        let heads = g.softmax_attention(q, k, v, seg, self.proj.heads, causal)?;
        self.proj.output(g, heads)
    }

    /// Keys and values of a full source sequence, for cross attention.
    pub fn source_cache(&self, store: &ParamStore, x_s: &Matrix) -> Result<KvCache> {
        self.proj.check_cols("source_cache", x_s)?;
        let (k, v) = {
            let _scope = counter::scope(Category::Projection);
            let p = &self.proj;
            (affine_eager(store, x_s, p.w_k, p.b_k)?, affine_eager(store, x_s, p.w_v, p.b_v)?)
        };
        let mut cache = KvCache::new(self.proj.model_dim);
        cache.push(k.data(), v.data());
        Ok(cache)
    }

    /// Attends query rows over a cache without modifying it.
    pub fn attend(&self, store: &ParamStore, cache: &KvCache, x_t: &Matrix) -> Result<Matrix> {
        self.proj.check_cols("attend", x_t)?;
        if cache.is_empty() {
            return Err(Error::Empty("attend"));
        }
        let q = {
            let _scope = counter::scope(Category::Projection);
            affine_eager(store, x_t, self.proj.w_q, self.proj.b_q)?
        };
        let seg = Segments {
            count: 1,
            n: x_t.rows(),
            m: cache.len(),
        };
        let (heads, _) = kernels::softmax_attention(q.data(), &cache.keys, &cache.values, seg, self.proj.layout(false), false);
        let heads = Matrix::new(x_t.rows(), self.proj.model_dim, heads)?;
        self.proj.output_eager(store, &heads)
    }

    /// Appends `x_i`'s key and value then attends over the whole cache.
    pub fn step_mut(&self, store: &ParamStore, cache: &mut KvCache, x_i: &Matrix) -> Result<Matrix> {
        self.proj.check_cols("sa_step", x_i)?;
        if x_i.rows() != 1 {
            return Err(Error::invalid("sa_step", "expects a single token row"));
        }
        let (k, v) = {
            let _scope = counter::scope(Category::Projection);
            let p = &self.proj;
            (affine_eager(store, x_i, p.w_k, p.b_k)?, affine_eager(store, x_i, p.w_v, p.b_v)?)
        };
        cache.push(k.data(), v.data());
        self.attend(store, cache, x_i)
    }
}

pub fn sa_forward(store: &ParamStore, p: &SaParams, x_t: &Matrix, x_s: &Matrix, causal: bool) -> Result<Matrix> {
    p.proj.check_cols("sa_forward", x_t)?;
    p.proj.check_cols("sa_forward", x_s)?;
    check_causal("sa_forward", x_t, x_s, causal)?;
    let mut g = Graph::inference(store);
    let (t, s) = (g.constant(x_t.clone()), g.constant(x_s.clone()));
    let seg = Segments {
        count: 1,
        n: x_t.rows(),
        m: x_s.rows(),
    };
    let out = p.graph_forward(&mut g, t, s, seg, causal)?;
    Ok(g.value(out).clone())
}

pub fn sa_step(store: &ParamStore, p: &SaParams, cache: &KvCache, x_i: &Matrix) -> Result<(Matrix, KvCache)> {
    let mut next = cache.clone();
    let out = p.step_mut(store, &mut next, x_i)?;
    Ok((out, next))
}

/// Per-head softmax weights (`N x M` each), masked when `causal`.
pub fn sa_attention_weights(store: &ParamStore, p: &SaParams, x_t: &Matrix, x_s: &Matrix, causal: bool) -> Result<Vec<Matrix>> {
    check_causal("sa_attention_weights", x_t, x_s, causal)?;
    let q = affine_eager(store, x_t, p.proj.w_q, p.proj.b_q)?;
    let k = affine_eager(store, x_s, p.proj.w_k, p.proj.b_k)?;
    let h = p.proj.head_dim();
    (0..p.proj.heads)
        .map(|hd| {
            let logits = Matrix::from_fn(x_t.rows(), x_s.rows(), |i, j| {
                if causal && j > i {
                    MASK_LOGIT
                } else {
                    dot(&q.row(i)[hd * h..][..h], &k.row(j)[hd * h..][..h])
                }
            });
            softmax_rows(&logits, 1.0 / (h as f64).sqrt())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Kernelized attention with phi(x) = elu(x) + 1.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EluParams {
    pub proj: Projections,
}

/// Per head: `S = sum phi(k)^T v` (`h x h`) and `z = sum phi(k)` (`h`).
#[derive(Clone, Debug, PartialEq)]
pub struct EluState {
    heads: usize,
    head_dim: usize,
    s: Vec<f64>,
    z: Vec<f64>,
    count: usize,
}

impl EluState {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        EluState {
            heads,
            head_dim,
            s: vec![0.0; heads * head_dim * head_dim],
            z: vec![0.0; heads * head_dim],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn byte_size(&self) -> usize {
        (self.s.len() + self.z.len()) * std::mem::size_of::<f64>()
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Folds in one featurized key row and its value row.
    fn absorb(&mut self, fk: &[f64], v: &[f64]) {
        let h = self.head_dim;
        let _scope = counter::scope(Category::ValueRead);
        for hd in 0..self.heads {
            let kh = &fk[hd * h..][..h];
            let vh = &v[hd * h..][..h];
            let s = &mut self.s[hd * h * h..][..h * h];
            for (a, &ka) in kh.iter().enumerate() {
                axpy(&mut s[a * h..(a + 1) * h], ka, vh);
            }
            for (z, &ka) in self.z[hd * h..][..h].iter_mut().zip(kh) {
                *z += ka;
            }
        }
        self.count += 1;
    }

    /// `(phi(q) S) / (phi(q) z)` per head for one featurized query row.
    fn read(&self, fq: &[f64]) -> Result<Vec<f64>> {
        let h = self.head_dim;
        let mut out = vec![0.0; self.heads * h];
        for hd in 0..self.heads {
            let qh = &fq[hd * h..][..h];
            let den = {
                let _scope = counter::scope(Category::AttentionWeights);
                dot(qh, &self.z[hd * h..][..h])
            };
            check_denominator(den)?;
            let _scope = counter::scope(Category::ValueRead);
            let o = &mut out[hd * h..][..h];
            let s = &self.s[hd * h * h..][..h * h];
            for (a, &qa) in qh.iter().enumerate() {
                axpy(o, qa / den, &s[a * h..(a + 1) * h]);
            }
        }
        Ok(out)
    }
}

impl EluParams {
    pub fn new(store: &mut ParamStore, prefix: &str, heads: usize, model_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(EluParams {
            proj: Projections::new(store, prefix, heads, model_dim, rng)?,
        })
    }

    pub fn graph_forward(&self, g: &mut Graph<'_>, x_t: Var, x_s: Var, seg: Segments, causal: bool) -> Result<Var> {
        let (q, k, v) = self.proj.qkv(g, x_t, x_s)?;
        let fq = g.elu_plus_one(q);
        let fk = g.elu_plus_one(k);
        let heads = g.linear_attention(fq, fk, v, seg, self.proj.heads, causal)?;
        self.proj.output(g, heads)
    }

    pub fn empty_state(&self) -> EluState {
        EluState::new(self.proj.heads, self.proj.head_dim())
    }

    fn key_value(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let _scope = counter::scope(Category::Projection);
        let p = &self.proj;
        let k = affine_eager(store, x, p.w_k, p.b_k)?;
        Ok((elu_plus_one(&k), affine_eager(store, x, p.w_v, p.b_v)?))
    }

    /// Statistics of a full source sequence, for cross attention.
    pub fn source_state(&self, store: &ParamStore, x_s: &Matrix) -> Result<EluState> {
        self.proj.check_cols("source_state", x_s)?;
        let (fk, v) = self.key_value(store, x_s)?;
        let mut st = self.empty_state();
        for j in 0..x_s.rows() {
            st.absorb(fk.row(j), v.row(j));
        }
        Ok(st)
    }

    /// Reads the state for each query row without modifying it.
    pub fn attend(&self, store: &ParamStore, st: &EluState, x_t: &Matrix) -> Result<Matrix> {
        self.proj.check_cols("attend", x_t)?;
        let fq = {
            let _scope = counter::scope(Category::Projection);
            elu_plus_one(&affine_eager(store, x_t, self.proj.w_q, self.proj.b_q)?)
        };
        let mut heads = Vec::with_capacity(x_t.rows() * self.proj.model_dim);
        for i in 0..x_t.rows() {
            heads.extend(st.read(fq.row(i))?);
        }
        let heads = Matrix::new(x_t.rows(), self.proj.model_dim, heads)?;
        self.proj.output_eager(store, &heads)
    }

    pub fn step_mut(&self, store: &ParamStore, st: &mut EluState, x_i: &Matrix) -> Result<Matrix> {
        self.proj.check_cols("elu_step", x_i)?;
        if x_i.rows() != 1 {
            return Err(Error::invalid("elu_step", "expects a single token row"));
        }
        let (fk, v) = self.key_value(store, x_i)?;
        st.absorb(fk.row(0), v.row(0));
        self.attend(store, st, x_i)
    }
}

pub fn elu_forward(store: &ParamStore, p: &EluParams, x_t: &Matrix, x_s: &Matrix, causal: bool) -> Result<Matrix> {
    p.proj.check_cols("elu_forward", x_t)?;
    p.proj.check_cols("elu_forward", x_s)?;
    check_causal("elu_forward", x_t, x_s, causal)?;
    let mut g = Graph::inference(store);
    let (t, s) = (g.constant(x_t.clone()), g.constant(x_s.clone()));
    let seg = Segments {
        count: 1,
        n: x_t.rows(),
        m: x_s.rows(),
    };
    let out = p.graph_forward(&mut g, t, s, seg, causal)?;
    Ok(g.value(out).clone())
}

pub fn elu_step(store: &ParamStore, p: &EluParams, st: &EluState, x_i: &Matrix) -> Result<(Matrix, EluState)> {
    let mut next = st.clone();
    let out = p.step_mut(store, &mut next, x_i)?;
    Ok((out, next))
}

/// The weights implied by the kernel ratio, normalized explicitly: per head
/// `w_ij = phi(q_i).phi(k_j) / sum_j' phi(q_i).phi(k_j')`.
pub fn elu_attention_weights(store: &ParamStore, p: &EluParams, x_t: &Matrix, x_s: &Matrix, causal: bool) -> Result<Vec<Matrix>> {
    check_causal("elu_attention_weights", x_t, x_s, causal)?;
    let fq = elu_plus_one(&affine_eager(store, x_t, p.proj.w_q, p.proj.b_q)?);
    let fk = elu_plus_one(&affine_eager(store, x_s, p.proj.w_k, p.proj.b_k)?);
    let h = p.proj.head_dim();
    (0..p.proj.heads)
        .map(|hd| {
            let mut w = Matrix::from_fn(x_t.rows(), x_s.rows(), |i, j| {
                if causal && j > i {
                    0.0
                } else {
                    dot(&fq.row(i)[hd * h..][..h], &fk.row(j)[hd * h..][..h])
                }
            });
            for i in 0..w.rows() {
                let den: f64 = w.row(i).iter().sum();
                check_denominator(den)?;
                w.row_mut(i).iter_mut().for_each(|x| *x /= den);
            }
            Ok(w)
        })
        .collect()
}
