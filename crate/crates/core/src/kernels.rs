//! Fused attention kernels over batches of equal-length segments, with their
//! adjoints. Inputs stack `segments` sequences row-wise: a query matrix has
//! `segments * n` rows, key/value matrices `segments * m` rows.

use crate::counter::{self, Category};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, gemm_raw, softmax_in_place};

/// Additive mask logit for future positions.
pub const MASK_LOGIT: f64 = -1e30;

/// Smallest admissible normalizer in kernelized attention.
pub const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub count: usize,
    /// Query rows per segment.
    pub n: usize,
    /// Key/value rows per segment.
    pub m: usize,
}

impl Segments {
    pub fn check(&self, op: &'static str, q_rows: usize, kv_rows: usize) -> Result<()> {
        if self.count == 0 || self.n == 0 || self.m == 0 {
            return Err(Error::Empty(op));
        }
        if q_rows != self.count * self.n || kv_rows != self.count * self.m {
            return Err(Error::invalid(
                op,
                format!(
                    "{} query rows / {} source rows do not split into {} segments of {}/{}",
                    q_rows, kv_rows, self.count, self.n, self.m
                ),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Memory read: out = alpha * (A^T B) / sqrt(m), A^T B summed over one segment.
// ---------------------------------------------------------------------------

/// `alpha`: `(S n) x k`, `a`: `(S m) x k`, `b`: `(S m) x d`.
pub(crate) fn memory_read(alpha: &[f64], a: &[f64], b: &[f64], k: usize, d: usize, seg: Segments) -> Vec<f64> {
    let _scope = counter::scope(Category::ValueRead);
    let Segments { count, n, m } = seg;
    let scale = 1.0 / (m as f64).sqrt();
    let mut out = vec![0.0; count * n * d];
    let mut v = vec![0.0; k * d];
    for s in 0..count {
        gemm_raw(k, m, d, &a[s * m * k..(s + 1) * m * k], true, &b[s * m * d..(s + 1) * m * d], false, 0.0, &mut v);
        let o = &mut out[s * n * d..(s + 1) * n * d];
        gemm_raw(n, k, d, &alpha[s * n * k..(s + 1) * n * k], false, &v, false, 0.0, o);
        o.iter_mut().for_each(|x| *x *= scale);
    }
    out
}

/// Returns `(d_alpha, d_a, d_b)`.
pub(crate) fn memory_read_backward(
    alpha: &[f64],
    a: &[f64],
    b: &[f64],
    dout: &[f64],
    k: usize,
    d: usize,
    seg: Segments,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Segments { count, n, m } = seg;
    let scale = 1.0 / (m as f64).sqrt();
    let mut dalpha = vec![0.0; count * n * k];
    let mut da = vec![0.0; count * m * k];
    let mut db = vec![0.0; count * m * d];
    let mut v = vec![0.0; k * d];
    let mut dv = vec![0.0; k * d];
    for s in 0..count {
        let a_s = &a[s * m * k..(s + 1) * m * k];
        let b_s = &b[s * m * d..(s + 1) * m * d];
        let al = &alpha[s * n * k..(s + 1) * n * k];
        let go = &dout[s * n * d..(s + 1) * n * d];
        gemm_raw(k, m, d, a_s, true, b_s, false, 0.0, &mut v);
        // d_alpha = dout V^T * scale
        let dal = &mut dalpha[s * n * k..(s + 1) * n * k];
        gemm_raw(n, d, k, go, false, &v, true, 0.0, dal);
        dal.iter_mut().for_each(|x| *x *= scale);
        // dV = alpha^T dout * scale
        gemm_raw(k, n, d, al, true, go, false, 0.0, &mut dv);
        dv.iter_mut().for_each(|x| *x *= scale);
        gemm_raw(m, d, k, b_s, false, &dv, true, 0.0, &mut da[s * m * k..(s + 1) * m * k]);
        gemm_raw(m, k, d, a_s, false, &dv, false, 0.0, &mut db[s * m * d..(s + 1) * m * d]);
    }
    (dalpha, da, db)
}

// ---------------------------------------------------------------------------
// Causal memory read: out_i = alpha_i * (sum_{j<=i} a_j^T b_j) / sqrt(i + 1).
// ---------------------------------------------------------------------------

/// All three inputs have `S * len` rows.
pub(crate) fn causal_memory_read(alpha: &[f64], a: &[f64], b: &[f64], k: usize, d: usize, count: usize, len: usize) -> Vec<f64> {
    let _scope = counter::scope(Category::ValueRead);
    let mut out = vec![0.0; count * len * d];
    let mut state = vec![0.0; k * d];
    for s in 0..count {
        state.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..len {
            let row = s * len + i;
            let ai = &a[row * k..(row + 1) * k];
            let bi = &b[row * d..(row + 1) * d];
            for (slot, &w) in ai.iter().enumerate() {
                axpy(&mut state[slot * d..(slot + 1) * d], w, bi);
            }
            let c = 1.0 / ((i + 1) as f64).sqrt();
            let o = &mut out[row * d..(row + 1) * d];
            let al = &alpha[row * k..(row + 1) * k];
            for (slot, &w) in al.iter().enumerate() {
                axpy(o, w, &state[slot * d..(slot + 1) * d]);
            }
            o.iter_mut().for_each(|x| *x *= c);
        }
    }
    out
}

pub(crate) fn causal_memory_read_backward(
    alpha: &[f64],
    a: &[f64],
    b: &[f64],
    dout: &[f64],
    k: usize,
    d: usize,
    count: usize,
    len: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dalpha = vec![0.0; count * len * k];
    let mut da = vec![0.0; count * len * k];
    let mut db = vec![0.0; count * len * d];
    let mut state = vec![0.0; k * d];
    for s in 0..count {
        // Forward sweep: d_alpha_i = c_i * S_i dout_i^T.
        state.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..len {
            let row = s * len + i;
            let ai = &a[row * k..(row + 1) * k];
            let bi = &b[row * d..(row + 1) * d];
            for (slot, &w) in ai.iter().enumerate() {
                axpy(&mut state[slot * d..(slot + 1) * d], w, bi);
            }
            let c = 1.0 / ((i + 1) as f64).sqrt();
            let go = &dout[row * d..(row + 1) * d];
            for slot in 0..k {
                dalpha[row * k + slot] = c * dot(&state[slot * d..(slot + 1) * d], go);
            }
        }
        // Reverse sweep: G_j = sum_{i>=j} c_i alpha_i^T dout_i.
        state.iter_mut().for_each(|x| *x = 0.0);
        for i in (0..len).rev() {
            let row = s * len + i;
            let c = 1.0 / ((i + 1) as f64).sqrt();
            let go = &dout[row * d..(row + 1) * d];
            let al = &alpha[row * k..(row + 1) * k];
            for (slot, &w) in al.iter().enumerate() {
                axpy(&mut state[slot * d..(slot + 1) * d], c * w, go);
            }
            let ai = &a[row * k..(row + 1) * k];
            let bi = &b[row * d..(row + 1) * d];
            let dbi = &mut db[row * d..(row + 1) * d];
            for slot in 0..k {
                let g = &state[slot * d..(slot + 1) * d];
                da[row * k + slot] = dot(g, bi);
                axpy(dbi, ai[slot], g);
            }
        }
    }
    (dalpha, da, db)
}

// ---------------------------------------------------------------------------
// Multi-head softmax attention.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadLayout {
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl HeadLayout {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Softmax attention, scale `1/sqrt(h)`. Returns the output and, when
/// `keep_probs`, the probabilities laid out `[segment][head][i][j]`.
pub(crate) fn softmax_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    seg: Segments,
    lay: HeadLayout,
    keep_probs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let Segments { count, n, m } = seg;
    let HeadLayout { heads, head_dim: h, causal } = lay;
    let dm = lay.width();
    let scale = 1.0 / (h as f64).sqrt();
    let mut out = vec![0.0; count * n * dm];
    let mut probs = if keep_probs { vec![0.0; count * heads * n * m] } else { Vec::new() };
    let mut row = vec![0.0; m];
    for s in 0..count {
        for hd in 0..heads {
            for i in 0..n {
                let qi = &q[(s * n + i) * dm + hd * h..][..h];
                let visible = if causal { i + 1 } else { m };
                {
                    let _scope = counter::scope(Category::AttentionWeights);
                    for (j, r) in row.iter_mut().enumerate().take(m) {
                        *r = if j < visible {
                            dot(qi, &k[(s * m + j) * dm + hd * h..][..h])
                        } else {
                            MASK_LOGIT
                        };
                    }
                }
                softmax_in_place(&mut row, scale);
                let _scope = counter::scope(Category::ValueRead);
                let o = &mut out[(s * n + i) * dm + hd * h..][..h];
                for (j, &p) in row.iter().enumerate().take(visible) {
                    axpy(o, p, &v[(s * m + j) * dm + hd * h..][..h]);
                }
                if keep_probs {
                    probs[((s * heads + hd) * n + i) * m..][..m].copy_from_slice(&row);
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn softmax_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    seg: Segments,
    lay: HeadLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Segments { count, n, m } = seg;
    let HeadLayout { heads, head_dim: h, causal } = lay;
    let dm = lay.width();
    let scale = 1.0 / (h as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; m];
    for s in 0..count {
        for hd in 0..heads {
            for i in 0..n {
                let visible = if causal { i + 1 } else { m };
                let p = &probs[((s * heads + hd) * n + i) * m..][..m];
                let go = &dout[(s * n + i) * dm + hd * h..][..h];
                let mut weighted = 0.0;
                for j in 0..visible {
                    let vj = &v[(s * m + j) * dm + hd * h..][..h];
                    dp[j] = dot(go, vj);
                    weighted += p[j] * dp[j];
                    axpy(&mut dv[(s * m + j) * dm + hd * h..][..h], p[j], go);
                }
                for j in 0..visible {
                    let dlogit = p[j] * (dp[j] - weighted) * scale;
                    if dlogit == 0.0 {
                        continue;
                    }
                    let kj = &k[(s * m + j) * dm + hd * h..][..h];
                    axpy(&mut dq[(s * n + i) * dm + hd * h..][..h], dlogit, kj);
                    let qi = &q[(s * n + i) * dm + hd * h..][..h];
                    axpy(&mut dk[(s * m + j) * dm + hd * h..][..h], dlogit, qi);
                }
            }
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// Kernelized (linear) attention on already-featurized queries and keys.
// ---------------------------------------------------------------------------

/// Non-causal: sufficient statistics `S = sum fk^T v`, `z = sum fk` per head.
/// Causal: explicit normalized weights over the visible prefix.
pub(crate) fn linear_attention(
    fq: &[f64],
    fk: &[f64],
    v: &[f64],
    seg: Segments,
    lay: HeadLayout,
) -> Result<Vec<f64>> {
    let Segments { count, n, m } = seg;
    let HeadLayout { heads, head_dim: h, causal } = lay;
    let dm = lay.width();
    let mut out = vec![0.0; count * n * dm];
    let mut sums = vec![0.0; h * h];
    let mut z = vec![0.0; h];
    let mut w = vec![0.0; m];
    for s in 0..count {
        for hd in 0..heads {
            if causal {
                for i in 0..n {
                    let qi = &fq[(s * n + i) * dm + hd * h..][..h];
                    let den = {
                        let _scope = counter::scope(Category::AttentionWeights);
                        let mut den = 0.0;
                        for (j, wj) in w.iter_mut().enumerate().take(i + 1) {
                            *wj = dot(qi, &fk[(s * m + j) * dm + hd * h..][..h]);
                            den += *wj;
                        }
                        den
                    };
                    check_denominator(den)?;
                    let _scope = counter::scope(Category::ValueRead);
                    let o = &mut out[(s * n + i) * dm + hd * h..][..h];
                    for (j, &wj) in w.iter().enumerate().take(i + 1) {
                        axpy(o, wj / den, &v[(s * m + j) * dm + hd * h..][..h]);
                    }
                }
            } else {
                {
                    let _scope = counter::scope(Category::ValueRead);
                    sums.iter_mut().for_each(|x| *x = 0.0);
                    z.iter_mut().for_each(|x| *x = 0.0);
                    for j in 0..m {
                        let kj = &fk[(s * m + j) * dm + hd * h..][..h];
                        let vj = &v[(s * m + j) * dm + hd * h..][..h];
                        for (a, &ka) in kj.iter().enumerate() {
                            axpy(&mut sums[a * h..(a + 1) * h], ka, vj);
                            z[a] += ka;
                        }
                    }
                }
                for i in 0..n {
                    let qi = &fq[(s * n + i) * dm + hd * h..][..h];
                    let den = {
                        let _scope = counter::scope(Category::AttentionWeights);
                        dot(qi, &z)
                    };
                    check_denominator(den)?;
                    let _scope = counter::scope(Category::ValueRead);
                    let o = &mut out[(s * n + i) * dm + hd * h..][..h];
                    for (a, &qa) in qi.iter().enumerate() {
                        axpy(o, qa / den, &sums[a * h..(a + 1) * h]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_denominator(den: f64) -> Result<()> {
    if !(den >= MIN_DENOMINATOR) {
        return Err(Error::NonFinite {
            op: "linear_attention",
            detail: format!("normalizer {den:e} below {MIN_DENOMINATOR:e}"),
        });
    }
    Ok(())
}

pub(crate) fn linear_attention_backward(
    fq: &[f64],
    fk: &[f64],
    v: &[f64],
    dout: &[f64],
    seg: Segments,
    lay: HeadLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Segments { count, n, m } = seg;
    let HeadLayout { heads, head_dim: h, causal } = lay;
    let dm = lay.width();
    let mut dfq = vec![0.0; fq.len()];
    let mut dfk = vec![0.0; fk.len()];
    let mut dv = vec![0.0; v.len()];
    let mut w = vec![0.0; m];
    let mut dw = vec![0.0; m];
    let mut sums = vec![0.0; h * h];
    let mut z = vec![0.0; h];
    let mut dsums = vec![0.0; h * h];
    let mut dz = vec![0.0; h];
    let mut num = vec![0.0; h];
    for s in 0..count {
        for hd in 0..heads {
            if causal {
                for i in 0..n {
                    let qi = &fq[(s * n + i) * dm + hd * h..][..h];
                    let go = &dout[(s * n + i) * dm + hd * h..][..h];
                    let mut den = 0.0;
                    for j in 0..=i {
                        w[j] = dot(qi, &fk[(s * m + j) * dm + hd * h..][..h]);
                        den += w[j];
                    }
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let vj = &v[(s * m + j) * dm + hd * h..][..h];
                        dw[j] = dot(go, vj);
                        let wn = w[j] / den;
                        weighted += wn * dw[j];
                        axpy(&mut dv[(s * m + j) * dm + hd * h..][..h], wn, go);
                    }
                    for j in 0..=i {
                        let ds = (dw[j] - weighted) / den;
                        let kj = &fk[(s * m + j) * dm + hd * h..][..h];
                        axpy(&mut dfq[(s * n + i) * dm + hd * h..][..h], ds, kj);
                        axpy(&mut dfk[(s * m + j) * dm + hd * h..][..h], ds, qi);
                    }
                }
            } else {
                sums.iter_mut().for_each(|x| *x = 0.0);
                z.iter_mut().for_each(|x| *x = 0.0);
                dsums.iter_mut().for_each(|x| *x = 0.0);
                dz.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..m {
                    let kj = &fk[(s * m + j) * dm + hd * h..][..h];
                    let vj = &v[(s * m + j) * dm + hd * h..][..h];
                    for (a, &ka) in kj.iter().enumerate() {
                        axpy(&mut sums[a * h..(a + 1) * h], ka, vj);
                        z[a] += ka;
                    }
                }
                for i in 0..n {
                    let qi = &fq[(s * n + i) * dm + hd * h..][..h];
                    let go = &dout[(s * n + i) * dm + hd * h..][..h];
                    let den = dot(qi, &z);
                    num.iter_mut().for_each(|x| *x = 0.0);
                    for (a, &qa) in qi.iter().enumerate() {
                        axpy(&mut num, qa, &sums[a * h..(a + 1) * h]);
                    }
                    // out = num / den
                    let dden = -dot(go, &num) / (den * den);
                    let dq = &mut dfq[(s * n + i) * dm + hd * h..][..h];
                    for a in 0..h {
                        dq[a] = dot(&sums[a * h..(a + 1) * h], go) / den + dden * z[a];
                        axpy(&mut dsums[a * h..(a + 1) * h], qi[a] / den, go);
                        dz[a] += dden * qi[a];
                    }
                }
                for j in 0..m {
                    let kj = &fk[(s * m + j) * dm + hd * h..][..h];
                    let vj = &v[(s * m + j) * dm + hd * h..][..h];
                    let dkj = &mut dfk[(s * m + j) * dm + hd * h..][..h];
                    for a in 0..h {
                        dkj[a] = dot(&dsums[a * h..(a + 1) * h], vj) + dz[a];
                    }
                    let dvj = &mut dv[(s * m + j) * dm + hd * h..][..h];
                    for (a, &ka) in kj.iter().enumerate() {
                        axpy(dvj, ka, &dsums[a * h..(a + 1) * h]);
                    }
                }
            }
        }
    }
    (dfq, dfk, dv)
}
