//! Invariant suite behind the `verify` command: parallel/recurrent
//! equivalence, the multi-head fast path, gradient checks, invariances,
//! decode-state sizes and multiply-add counts.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, Var};
use crate::baseline::{EluParams, SaParams};
use crate::bench::{cache_bytes_analytic, cache_bytes_parts, count_generation, k_sweep, r_sweep, BenchConfig};
use crate::counter::Category;
use crate::error::Result;
use crate::kernels::Segments;
use crate::memsizer::{MemSizerConfig, MemSizerLayer, RecurrentState};
use crate::model::{AttentionKind, Model, ModelConfig, PAD};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const PARALLEL_RECURRENT_TOL: f64 = 1e-10;
pub const MULTIHEAD_TOL: f64 = 1e-12;
pub const LAYER_GRAD_TOL: f64 = 1e-4;
pub const MODEL_GRAD_TOL: f64 = 1e-3;
pub const GRAD_STEP: f64 = 1e-5;
pub const PERMUTATION_TOL: f64 = 1e-12;
pub const RESCALE_TOL: f64 = 1e-8;
pub const ROW_SUM_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: String,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} {}", self.name, self.measured)
    }
}

fn below(name: &'static str, value: f64, tol: f64) -> PropertyResult {
    PropertyResult {
        name,
        passed: value < tol,
        measured: format!("{value:.3e}"),
    }
}

fn errored(name: &'static str, e: crate::error::Error) -> PropertyResult {
    PropertyResult {
        name,
        passed: false,
        measured: format!("error: {e}"),
    }
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// A memsizer layer with non-trivial layer-norm gains and biases.
fn layer(r: usize, k: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<(ParamStore, MemSizerLayer)> {
    let mut store = ParamStore::new();
    let l = MemSizerLayer::new(&mut store, "m", MemSizerConfig::new(r, k, d), rng)?;
    for (id, centre) in [(l.slot_gain, 1.0), (l.slot_bias, 0.0), (l.feat_gain, 1.0), (l.feat_bias, 0.0)] {
        let (a, b) = store.get(id).shape();
        let m = Matrix::from_fn(a, b, |_, _| centre + rng.gen_range(-0.5..0.5));
        store.assign(id, m)?;
    }
    Ok((store, l))
}

/// Scalar probe `sum(out * W)` with a fixed random `W`.
fn probe(g: &mut Graph<'_>, out: Var, w: &Matrix) -> Result<Var> {
    let wv = g.constant(w.clone());
    let y = g.matmul(out, wv)?;
    Ok(g.sum(y))
}

pub fn parallel_recurrent(quick: bool) -> PropertyResult {
    let name = "causal_parallel_equals_recurrent";
    let lengths: &[usize] = if quick { &[1, 2, 7, 64] } else { &[1, 2, 7, 64, 128] };
    let seeds = if quick { 1 } else { 5 };
    let mut worst = 0.0f64;
    let mut run = || -> Result<()> {
        for &len in lengths {
            for k in [2, 4, 32] {
                for d in [8, 64] {
                    for r in [1, 4] {
                        for seed in 0..seeds {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + (len * 31 + k * 7 + d + r) as u64);
                            let (store, l) = layer(r, k, d, &mut rng)?;
                            let x = random(len, d, &mut rng);
                            let par = l.causal_forward_parallel(&store, &x)?.out;
                            let mut st = RecurrentState::new(k, d);
                            for i in 0..len {
                                let (o, next) = l.causal_step(&store, &st, &x.slice_rows(i, 1)?)?;
                                st = next;
                                for c in 0..d {
                                    worst = worst.max((o.get(0, c) - par.get(i, c)).abs());
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    };
    match run() {
        Ok(()) => below(name, worst, PARALLEL_RECURRENT_TOL),
        Err(e) => errored(name, e),
    }
}

pub fn multihead_fast_path(quick: bool) -> PropertyResult {
    let name = "lightweight_multihead_equals_naive";
    let instances = if quick { 30 } else { 100 };
    let mut worst = 0.0f64;
    let mut run = || -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..instances {
            let r = [1, 2, 8][i % 3];
            let k = rng.gen_range(2..=12);
            let d = rng.gen_range(2..=24);
            let (store, l) = layer(r, k, d, &mut rng)?;
            let xt = random(rng.gen_range(1..=9), d, &mut rng);
            let xs = random(rng.gen_range(1..=9), d, &mut rng);
            let fast = l.cross_forward(&store, &xt, &xs)?.out;
            worst = worst.max(fast.max_abs_diff(&l.naive_multihead_forward(&store, &xt, &xs)?));
        }
        Ok(())
    };
    match run() {
        Ok(()) => below(name, worst, MULTIHEAD_TOL),
        Err(e) => errored(name, e),
    }
}

fn trainable(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&i| store.is_trainable(i)).collect()
}

pub fn gradient_checks() -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let cross = (|| -> Result<f64> {
        let (store, l) = layer(2, 3, 5, &mut rng)?;
        let (xt, xs, w) = (random(3, 5, &mut rng), random(4, 5, &mut rng), random(5, 1, &mut rng));
        Ok(grad_check(&store, &trainable(&store), GRAD_STEP, |g| {
            let (t, s) = (g.constant(xt.clone()), g.constant(xs.clone()));
            let (o, _) = l.graph_cross(g, t, s, Segments { count: 1, n: 3, m: 4 })?;
            probe(g, o, &w)
        })?
        .max_rel_error)
    })();
    out.push(match cross {
        Ok(v) => below("gradcheck_memsizer_cross", v, LAYER_GRAD_TOL),
        Err(e) => errored("gradcheck_memsizer_cross", e),
    });

    let causal = (|| -> Result<f64> {
        let (store, l) = layer(2, 3, 5, &mut rng)?;
        let (x, w) = (random(2 * 4, 5, &mut rng), random(5, 1, &mut rng));
        Ok(grad_check(&store, &trainable(&store), GRAD_STEP, |g| {
            let xv = g.constant(x.clone());
            let (o, _) = l.graph_causal(g, xv, 2, 4)?;
            probe(g, o, &w)
        })?
        .max_rel_error)
    })();
    out.push(match causal {
        Ok(v) => below("gradcheck_memsizer_causal", v, LAYER_GRAD_TOL),
        Err(e) => errored("gradcheck_memsizer_causal", e),
    });

    for (name, kind) in [("gradcheck_sa", AttentionKind::Sa), ("gradcheck_elu", AttentionKind::Elu)] {
        let res = (|| -> Result<f64> {
            let mut store = ParamStore::new();
            let fwd: Box<dyn Fn(&mut Graph<'_>, Var, Var, Segments, bool) -> Result<Var>> = match kind {
                AttentionKind::Sa => {
                    let p = SaParams::new(&mut store, "a", 2, 6, &mut rng)?;
                    Box::new(move |g, t, s, seg, c| p.graph_forward(g, t, s, seg, c))
                }
                _ => {
                    let p = EluParams::new(&mut store, "a", 2, 6, &mut rng)?;
                    Box::new(move |g, t, s, seg, c| p.graph_forward(g, t, s, seg, c))
                }
            };
            for id in store.ids().collect::<Vec<_>>() {
                let (a, b) = store.get(id).shape();
                if a == 1 {
                    store.assign(id, random(a, b, &mut rng))?;
                }
            }
            let (xt, xs, w) = (random(3, 6, &mut rng), random(4, 6, &mut rng), random(6, 1, &mut rng));
            let mut worst = 0.0f64;
            for causal in [false, true] {
                let src = if causal { xt.clone() } else { xs.clone() };
                let r = grad_check(&store, &trainable(&store), GRAD_STEP, |g| {
                    let (t, s) = (g.constant(xt.clone()), g.constant(src.clone()));
                    let seg = Segments { count: 1, n: 3, m: src.rows() };
                    let o = fwd(g, t, s, seg, causal)?;
                    probe(g, o, &w)
                })?;
                worst = worst.max(r.max_rel_error);
            }
            Ok(worst)
        })();
        out.push(match res {
            Ok(v) => below(name, v, LAYER_GRAD_TOL),
            Err(e) => errored(name, e),
        });
    }

    let full = (|| -> Result<f64> {
        let mut worst = 0.0f64;
        for kind in AttentionKind::ALL {
            let mut cfg = ModelConfig::new(kind, 10, 8, 2, 2);
            cfg.block.k_cross = 3;
            cfg.block.k_causal = 2;
            cfg.block.ffn_dim = 8;
            let mut m = Model::new(cfg)?;
            for id in m.store.ids().collect::<Vec<_>>() {
                let (a, b) = m.store.get(id).shape();
                let v = m.store.get(id).add(&Matrix::from_fn(a, b, |_, _| rng.gen_range(-0.2..0.2)))?;
                m.store.assign(id, v)?;
            }
            let src = vec![vec![3, 5, 7], vec![9, 4, 6]];
            let tgt = vec![vec![1, 8, 3, 5], vec![1, 4, 4, 9]];
            let targets = vec![8, 3, 5, 2, 4, 4, 9, 2];
            let r = grad_check(&m.store, &trainable(&m.store), GRAD_STEP, |g| {
                let l = m.logits_graph(g, Some(&src), &tgt)?;
                g.smoothed_cross_entropy(l, &targets, 0.1, Some(PAD))
            })?;
            worst = worst.max(r.max_rel_error);
        }
        Ok(worst)
    })();
    out.push(match full {
        Ok(v) => below("gradcheck_full_model", v, MODEL_GRAD_TOL),
        Err(e) => errored("gradcheck_full_model", e),
    });
    out
}

pub fn invariances(quick: bool) -> Vec<PropertyResult> {
    let trials = if quick { 10 } else { 50 };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut perm = 0.0f64;
    let mut rescale = 0.0f64;
    let mut rowsum = 0.0f64;
    let res = (|| -> Result<()> {
        for _ in 0..trials {
            let (r, k, d) = (rng.gen_range(1..=4), rng.gen_range(2..=16), rng.gen_range(2..=16));
            let (store, l) = layer(r, k, d, &mut rng)?;
            let m = rng.gen_range(1..=12);
            let xt = random(rng.gen_range(1..=6), d, &mut rng);
            let xs = random(m, d, &mut rng);
            let mut idx: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let a = l.cross_forward(&store, &xt, &xs)?;
            let b = l.cross_forward(&store, &xt, &xs.select_rows(&idx)?)?;
            perm = perm.max(a.out.max_abs_diff(&b.out));
            if let Some(alpha) = &a.alpha_bar {
                for i in 0..alpha.rows() {
                    rowsum = rowsum.max((alpha.row(i).iter().sum::<f64>() - 1.0).abs());
                }
            }
            let c = l.causal_forward_parallel(&store, &xs)?;
            if let Some(alpha) = &c.alpha_bar {
                for i in 0..alpha.rows() {
                    rowsum = rowsum.max((alpha.row(i).iter().sum::<f64>() - 1.0).abs());
                }
            }

            let mut plain = ParamStore::new();
            let mut cfg = MemSizerConfig::new(r, k, d);
            cfg.ln_affine = false;
            cfg.ln_eps = 0.0;
            let pl = MemSizerLayer::new(&mut plain, "p", cfg, &mut rng)?;
            let mut scaled = xs.clone();
            for i in 0..m {
                let c = rng.gen_range(0.1..10.0);
                scaled.row_mut(i).iter_mut().for_each(|v| *v *= c);
            }
            let v0 = pl.value_matrix_unscaled(&plain, &xs)?;
            let v1 = pl.value_matrix_unscaled(&plain, &scaled)?;
            rescale = rescale.max(v0.max_abs_diff(&v1));
        }
        Ok(())
    })();
    if let Err(e) = res {
        return vec![errored("invariance_suite", e)];
    }
    vec![
        below("source_permutation_invariance", perm, PERMUTATION_TOL),
        below("value_rescaling_invariance", rescale, RESCALE_TOL),
        below("alpha_rows_sum_to_one", rowsum, ROW_SUM_TOL),
    ]
}

/// Small decode configuration for long-sequence state measurements.
pub fn memory_config() -> BenchConfig {
    BenchConfig {
        model_dim: 16,
        heads: 2,
        k_cross: 8,
        k_causal: 4,
        layers: 2,
        ffn_dim: 16,
        vocab: 16,
        batch: 1,
        ..BenchConfig::default()
    }
}

pub fn constant_memory() -> Vec<PropertyResult> {
    let cfg = memory_config();
    let res = (|| -> Result<Vec<PropertyResult>> {
        let ms16 = count_generation(AttentionKind::MemSizer, &cfg, 16)?;
        let ms4096 = count_generation(AttentionKind::MemSizer, &cfg, 4096)?;
        let exact = ms16.cache_bytes_observed == ms16.cache_bytes_analytic
            && ms4096.cache_bytes_observed == ms4096.cache_bytes_analytic;
        let ms = PropertyResult {
            name: "memsizer_cache_constant",
            passed: exact && ms16.cache_bytes_observed == ms4096.cache_bytes_observed,
            measured: format!("{}B@16 {}B@4096", ms16.cache_bytes_observed, ms4096.cache_bytes_observed),
        };
        let sa = crate::bench::observed_self_bytes(AttentionKind::Sa, &cfg, &[16, 4096])?;
        let (a16, _) = cache_bytes_parts(AttentionKind::Sa, &cfg, 16);
        let (a4096, _) = cache_bytes_parts(AttentionKind::Sa, &cfg, 4096);
        let full_ok = sa.iter().all(|o| o.total == cache_bytes_analytic(AttentionKind::Sa, &cfg, o.length));
        let sa_prop = PropertyResult {
            name: "sa_cache_ratio_256",
            passed: full_ok && sa[0].self_bytes == a16 && sa[1].self_bytes == a4096 && sa[1].self_bytes == 256 * sa[0].self_bytes,
            measured: format!("{}", sa[1].self_bytes as f64 / sa[0].self_bytes as f64),
        };
        Ok(vec![ms, sa_prop])
    })();
    res.unwrap_or_else(|e| vec![errored("constant_memory", e)])
}

pub fn complexity(quick: bool) -> Vec<PropertyResult> {
    let cfg = if quick { memory_config() } else { BenchConfig::default() };
    let res = (|| -> Result<Vec<PropertyResult>> {
        let m64 = count_generation(AttentionKind::MemSizer, &cfg, 64)?;
        let m1024 = count_generation(AttentionKind::MemSizer, &cfg, 1024)?;
        let s64 = count_generation(AttentionKind::Sa, &cfg, 64)?;
        let s1024 = count_generation(AttentionKind::Sa, &cfg, 1024)?;
        let ratio = s1024.muladds_per_token / s64.muladds_per_token;
        let mut out = vec![
            PropertyResult {
                name: "memsizer_muladds_constant",
                passed: m64.muladds_per_token == m1024.muladds_per_token && m64.muladds_per_token > 0.0,
                measured: format!("{}@64 {}@1024", m64.muladds_per_token, m1024.muladds_per_token),
            },
            PropertyResult {
                name: "sa_muladds_growth",
                passed: ratio > 8.0,
                measured: format!("{ratio:.3}"),
            },
        ];

        let ks = [2usize, 4, 8, 16, 32];
        let sweep = k_sweep(&cfg, &ks, 16)?;
        let slopes: Vec<f64> = sweep
            .windows(2)
            .map(|w| (w[1].1.muladds_per_token - w[0].1.muladds_per_token) / (w[1].0 - w[0].0) as f64)
            .collect();
        let predicted = (cfg.layers * (2 * cfg.heads + 3) * cfg.model_dim) as f64;
        out.push(PropertyResult {
            name: "k_sweep_affine",
            passed: slopes.iter().all(|&s| s == predicted),
            measured: format!("slope {} predicted {predicted}", slopes[0]),
        });

        let rs = [1usize, 2, 4, 8];
        let sweep = r_sweep(&cfg, &rs, 16)?;
        let weights: Vec<f64> = sweep.iter().map(|(_, r)| r.per_token(Category::AttentionWeights)).collect();
        let values: Vec<f64> = sweep.iter().map(|(_, r)| r.per_token(Category::ValueRead)).collect();
        out.push(PropertyResult {
            name: "r_sweep_shared_values",
            passed: weights.windows(2).all(|w| w[1] > w[0]) && values.windows(2).all(|w| w[1] == w[0]),
            measured: format!("weights {weights:?} values {values:?}"),
        });
        Ok(out)
    })();
    res.unwrap_or_else(|e| vec![errored("complexity_counters", e)])
}

/// Runs every property. `quick` shrinks instance counts and the counter
/// configuration but keeps every tolerance.
pub fn run(quick: bool) -> Vec<PropertyResult> {
    let mut out = vec![parallel_recurrent(quick), multihead_fast_path(quick)];
    out.extend(gradient_checks());
    out.extend(invariances(quick));
    out.extend(constant_memory());
    out.extend(complexity(quick));
    out
}

/// Process exit code for a result set (0 all pass, 1 otherwise) and the
/// names of the failing properties.
pub fn outcome(results: &[PropertyResult]) -> (u8, Vec<&'static str>) {
    let failed: Vec<&'static str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    (if failed.is_empty() { 0 } else { 1 }, failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_format() {
        let p = below("x", 0.5, 1.0);
        assert_eq!(p.to_string(), "PASS x 5.000e-1");
        assert!(!below("x", 2.0, 1.0).passed);
        assert_eq!(outcome(&[below("a", 0.0, 1.0)]), (0, vec![]));
        assert_eq!(outcome(&[below("a", 0.0, 1.0), below("b", 3.0, 1.0)]), (1, vec!["b"]));
    }
}
