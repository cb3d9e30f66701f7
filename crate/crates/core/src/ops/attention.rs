//! Fused attention and row-wise normalization ops.
//!
//! One attention kernel covers every use in the model: full self-attention
//! (`windows = 1`), windowed attention (rows grouped per window), pooled-key
//! attention (`lq != lk`), causal decoding and cross-attention. Attention
//! probabilities are saved for the backward sweep.

use super::gemm_into;
use crate::scalar::Scalar;
use crate::tape::{acc_slice, Buf, Result, Tape, Tensor, TensorError};

/// Attention configuration.
#[derive(Clone, Copy, Debug)]
pub struct AttnOpts {
    pub heads: usize,
    /// Number of independent row groups; queries are `[windows * lq, d]`.
    pub windows: usize,
    /// Mask out keys with index greater than the query index (needs lq == lk).
    pub causal: bool,
    /// Optional additive logit bias `[heads, lq, lk]`, shared across windows.
    pub bias: Option<Tensor>,
}

impl AttnOpts {
    pub fn full(heads: usize) -> Self {
        AttnOpts { heads, windows: 1, causal: false, bias: None }
    }
}

/// Strided gemm where `C` has an explicit physical row stride.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    a_stride: usize,
    ta: bool,
    b: &[S],
    b_stride: usize,
    tb: bool,
    beta: S,
    c: &mut [S],
    c_stride: usize,
) {
    let (rsa, csa) = if ta { (1, a_stride as isize) } else { (a_stride as isize, 1) };
    let (rsb, csb) = if tb { (1, b_stride as isize) } else { (b_stride as isize, 1) };
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            c_stride as isize,
            1,
        );
    }
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = S::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = S::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

impl<S: Scalar> Tape<S> {
    /// Scaled dot-product multi-head attention.
    ///
    /// `q: [windows*lq, d]`, `k, v: [windows*lk, d]`; output `[windows*lq, d]`.
    /// Per head `softmax(Q K^T / sqrt(d/heads) + bias) V`, heads concatenated.
    pub fn attention(&mut self, q: Tensor, k: Tensor, v: Tensor, opts: AttnOpts) -> Result<Tensor> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks != vs {
            return Err(TensorError::dim(format!(
                "attention: q {qs:?}, k {ks:?}, v {vs:?}"
            )));
        }
        let d = qs[1];
        let (heads, nw) = (opts.heads, opts.windows);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::invalid(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        if nw == 0 || qs[0] % nw != 0 || ks[0] % nw != 0 {
            return Err(TensorError::dim(format!(
                "attention: rows {}/{} not divisible by {nw} windows",
                qs[0], ks[0]
            )));
        }
        let lq = qs[0] / nw;
        let lk = ks[0] / nw;
        if opts.causal && lq != lk {
            return Err(TensorError::invalid("causal attention needs lq == lk"));
        }
        if let Some(b) = opts.bias {
            if self.shape(b) != [heads, lq, lk] {
                return Err(TensorError::dim(format!(
                    "attention bias {:?}, expected [{heads}, {lq}, {lk}]",
                    self.shape(b)
                )));
            }
        }
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let neg = S::from_f64(-1e30);

        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let bias_data: Option<Vec<S>> = opts.bias.map(|b| self.data(b).to_vec());

        let mut out = vec![S::ZERO; nw * lq * d];
        let mut probs = vec![S::ZERO; nw * heads * lq * lk];
        for wi in 0..nw {
            for h in 0..heads {
                let qoff = wi * lq * d + h * dh;
                let koff = wi * lk * d + h * dh;
                let p = &mut probs[(wi * heads + h) * lq * lk..][..lq * lk];
                gemm_strided(lq, dh, lk, scale, &qd[qoff..], d, false, &kd[koff..], d, true, S::ZERO, p, lk);
                if let Some(bd) = &bias_data {
                    let b = &bd[h * lq * lk..(h + 1) * lq * lk];
                    for (pv, &bv) in p.iter_mut().zip(b) {
                        *pv += bv;
                    }
                }
                if opts.causal {
                    for i in 0..lq {
                        for j in i + 1..lk {
                            p[i * lk + j] = neg;
                        }
                    }
                }
                for row in p.chunks_mut(lk) {
                    softmax_row(row);
                }
                gemm_strided(lq, lk, dh, S::ONE, p, lk, false, &vd[koff..], d, false, S::ZERO, &mut out[qoff..], d);
            }
        }

        let (nq, nk, nv) = (self.needs_grad(q), self.needs_grad(k), self.needs_grad(v));
        let nb = opts.bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        let bias = opts.bias;
        let (q_numel, k_numel) = (nw * lq * d, nw * lk * d);
        self.push_op(
            Buf::new(vec![nw * lq, d], out),
            nq || nk || nv || nb,
            "attention",
            move |ctx| {
                let Some(g) = ctx.take_out() else { return };
                let qd = &ctx.vals[q.idx()].data;
                let kd = &ctx.vals[k.idx()].data;
                let vd = &ctx.vals[v.idx()].data;
                let mut dq = if nq { vec![S::ZERO; q_numel] } else { Vec::new() };
                let mut dk = if nk { vec![S::ZERO; k_numel] } else { Vec::new() };
                let mut dv = if nv { vec![S::ZERO; k_numel] } else { Vec::new() };
                let mut db = if nb { vec![S::ZERO; heads * lq * lk] } else { Vec::new() };
                let mut dp = vec![S::ZERO; lq * lk];
                for wi in 0..nw {
                    for h in 0..heads {
                        let qoff = wi * lq * d + h * dh;
                        let koff = wi * lk * d + h * dh;
                        let p = &probs[(wi * heads + h) * lq * lk..][..lq * lk];
                        if nv {
                            gemm_strided(lk, lq, dh, S::ONE, p, lk, true, &g[qoff..], d, false, S::ONE, &mut dv[koff..], d);
                        }
                        if !(nq || nk || nb) {
                            continue;
                        }
                        // dP = gO V^T, then dS = P o (dP - rowsum(dP o P))
                        gemm_strided(lq, dh, lk, S::ONE, &g[qoff..], d, false, &vd[koff..], d, true, S::ZERO, &mut dp, lk);
                        for i in 0..lq {
                            let prow = &p[i * lk..(i + 1) * lk];
                            let drow = &mut dp[i * lk..(i + 1) * lk];
                            let mut dot = S::ZERO;
                            for (a, b) in drow.iter().zip(prow) {
                                dot += *a * *b;
                            }
                            for (a, b) in drow.iter_mut().zip(prow) {
                                *a = *b * (*a - dot);
                            }
                        }
                        if nb {
                            let brow = &mut db[h * lq * lk..(h + 1) * lq * lk];
                            for (a, &dsv) in brow.iter_mut().zip(dp.iter()) {
                                *a += dsv;
                            }
                        }
                        if nq {
                            gemm_strided(lq, lk, dh, scale, &dp, lk, false, &kd[koff..], d, false, S::ONE, &mut dq[qoff..], d);
                        }
                        if nk {
                            gemm_strided(lk, lq, dh, scale, &dp, lk, true, &qd[qoff..], d, false, S::ONE, &mut dk[koff..], d);
                        }
                    }
                }
                if nq {
                    let acc = acc_slice(ctx.grads, q, q_numel);
                    for (a, d) in acc.iter_mut().zip(&dq) {
                        *a += *d;
                    }
                }
                if nk {
                    let acc = acc_slice(ctx.grads, k, k_numel);
                    for (a, d) in acc.iter_mut().zip(&dk) {
                        *a += *d;
                    }
                }
                if nv {
                    let acc = acc_slice(ctx.grads, v, k_numel);
                    for (a, d) in acc.iter_mut().zip(&dv) {
                        *a += *d;
                    }
                }
                if nb {
                    if let Some(b) = bias {
                        let acc = acc_slice(ctx.grads, b, heads * lq * lk);
                        for (a, d) in acc.iter_mut().zip(&db) {
                            *a += *d;
                        }
                    }
                }
            },
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| TensorError::dim("softmax on 0-d"))?;
        if c == 0 {
            return Err(TensorError::dim("softmax over empty dim"));
        }
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let n = data.len();
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(xs, data), needs, "softmax_lastdim", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let out = ctx.out;
            let od = &ctx.vals[out.idx()].data;
            let acc = acc_slice(ctx.grads, x, n);
            for r in 0..n / c {
                let o = &od[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mut dot = S::ZERO;
                for (a, b) in gr.iter().zip(o) {
                    dot += *a * *b;
                }
                for i in 0..c {
                    acc[r * c + i] += o[i] * (gr[i] - dot);
                }
            }
        })
    }

    /// Log-softmax over the last dimension (stable).
    pub fn log_softmax_lastdim(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| TensorError::dim("log_softmax on 0-d"))?;
        if c == 0 {
            return Err(TensorError::dim("log_softmax over empty dim"));
        }
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::ZERO;
            for v in row.iter() {
                sum += (*v - mx).exp();
            }
            let lse = mx + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let n = data.len();
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(xs, data), needs, "log_softmax_lastdim", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let out = ctx.out;
            let od = &ctx.vals[out.idx()].data;
            let acc = acc_slice(ctx.grads, x, n);
            for r in 0..n / c {
                let o = &od[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mut gsum = S::ZERO;
                for &v in gr {
                    gsum += v;
                }
                for i in 0..c {
                    acc[r * c + i] += gr[i] - o[i].exp() * gsum;
                }
            }
        })
    }

    /// Layer normalization over the last dimension with learned scale/shift.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| TensorError::dim("layer_norm on 0-d"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::dim(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                xs,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.val(x).numel() / c;
        let epsv = S::from_f64(eps);
        let invc = S::from_f64(1.0 / c as f64);
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut data = vec![S::ZERO; rows * c];
        let mut xhat = vec![S::ZERO; rows * c];
        let mut inv_std = vec![S::ZERO; rows];
        for r in 0..rows {
            let xin = &xd[r * c..(r + 1) * c];
            let mut mean = S::ZERO;
            for &v in xin {
                mean += v;
            }
            mean *= invc;
            let mut var = S::ZERO;
            for &v in xin {
                let dv = v - mean;
                var += dv * dv;
            }
            var *= invc;
            let istd = S::ONE / (var + epsv).sqrt();
            inv_std[r] = istd;
            for i in 0..c {
                let xh = (xin[i] - mean) * istd;
                xhat[r * c + i] = xh;
                data[r * c + i] = xh * gd[i] + bd[i];
            }
        }
        let (nx, ng, nb) = (self.needs_grad(x), self.needs_grad(gamma), self.needs_grad(beta));
        self.push_op(Buf::new(xs, data), nx || ng || nb, "layer_norm", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            if ng {
                let acc = acc_slice(ctx.grads, gamma, c);
                for r in 0..rows {
                    for i in 0..c {
                        acc[i] += g[r * c + i] * xhat[r * c + i];
                    }
                }
            }
            if nb {
                let acc = acc_slice(ctx.grads, beta, c);
                for r in 0..rows {
                    for i in 0..c {
                        acc[i] += g[r * c + i];
                    }
                }
            }
            if nx {
                let gd = &ctx.vals[gamma.idx()].data;
                let acc = acc_slice(ctx.grads, x, rows * c);
                for r in 0..rows {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut m1 = S::ZERO; // mean of dxhat
                    let mut m2 = S::ZERO; // mean of dxhat * xhat
                    for i in 0..c {
                        let dxh = gr[i] * gd[i];
                        m1 += dxh;
                        m2 += dxh * xh[i];
                    }
                    m1 *= invc;
                    m2 *= invc;
                    for i in 0..c {
                        let dxh = gr[i] * gd[i];
                        acc[r * c + i] += inv_std[r] * (dxh - m1 - xh[i] * m2);
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Tape, Tensor};

    fn leaf(t: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        t.leaf(shape, data, true).unwrap()
    }

    fn rng(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn single_key_attention_broadcasts_value() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(2);
        let q: Vec<f64> = (0..3 * 4).map(|_| r()).collect();
        let kv: Vec<f64> = (0..4).map(|_| r()).collect();
        let tq = leaf(&mut t, vec![3, 4], q);
        let tk = leaf(&mut t, vec![1, 4], kv.clone());
        let tv = leaf(&mut t, vec![1, 4], kv.clone());
        let y = t.attention(tq, tk, tv, AttnOpts::full(2)).unwrap();
        for row in t.data(y).chunks(4) {
            for (a, b) in row.iter().zip(&kv) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        // with all keys equal, attention output is the mean of the values
        let mut t = Tape::<f64>::new();
        let mut r = rng(4);
        let q: Vec<f64> = (0..2 * 4).map(|_| r()).collect();
        let k: Vec<f64> = [0.3, -0.2, 0.9, 0.1].repeat(5);
        let v: Vec<f64> = (0..5 * 4).map(|_| r()).collect();
        let mut mean = vec![0.0; 4];
        for row in v.chunks(4) {
            for i in 0..4 {
                mean[i] += row[i] / 5.0;
            }
        }
        let tq = leaf(&mut t, vec![2, 4], q);
        let tk = leaf(&mut t, vec![5, 4], k);
        let tv = leaf(&mut t, vec![5, 4], v);
        let y = t.attention(tq, tk, tv, AttnOpts::full(1)).unwrap();
        for row in t.data(y).chunks(4) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_matches_explicit_softmax() {
        let q = vec![1.0, 0.0, 0.0, 1.0];
        let k = vec![0.5, -0.5, 1.0, 2.0];
        let v = vec![1.0, 2.0, 3.0, 4.0];
        // single head, d=2, scale 1/sqrt(2)
        let s = 1.0 / 2.0_f64.sqrt();
        let mut want = vec![0.0; 4];
        for i in 0..2 {
            let l0 = s * (q[i * 2] * k[0] + q[i * 2 + 1] * k[1]);
            let l1 = s * (q[i * 2] * k[2] + q[i * 2 + 1] * k[3]);
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            let z = e0 + e1;
            for c in 0..2 {
                want[i * 2 + c] = (e0 / z) * v[c] + (e1 / z) * v[2 + c];
            }
        }
        let mut t = Tape::<f64>::new();
        let tq = leaf(&mut t, vec![2, 2], q);
        let tk = leaf(&mut t, vec![2, 2], k);
        let tv = leaf(&mut t, vec![2, 2], v);
        let y = t.attention(tq, tk, tv, AttnOpts::full(1)).unwrap();
        for (a, b) in t.data(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut t = Tape::<f64>::new();
        let q = leaf(&mut t, vec![2, 3], vec![0.0; 6]);
        assert!(t.attention(q, q, q, AttnOpts::full(2)).is_err());
    }

    #[test]
    fn windowed_attention_isolates_windows() {
        // zeroing the second window's q/k/v must not change the first window
        let mut r = rng(8);
        let x: Vec<f64> = (0..8 * 4).map(|_| r()).collect();
        let mut t = Tape::<f64>::new();
        let tx = leaf(&mut t, vec![8, 4], x.clone());
        let opts = AttnOpts { heads: 2, windows: 2, causal: false, bias: None };
        let y_full = t.attention(tx, tx, tx, opts).unwrap();
        let mut x2 = x.clone();
        for v in &mut x2[16..] {
            *v = 0.0;
        }
        let tx2 = leaf(&mut t, vec![8, 4], x2);
        let y_zero = t.attention(tx2, tx2, tx2, opts).unwrap();
        let a = t.data(y_full);
        let b = t.data(y_zero);
        for i in 0..16 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let mut r = rng(16);
        let x: Vec<f64> = (0..4 * 4).map(|_| r()).collect();
        let mut x_tail = x.clone();
        for v in &mut x_tail[8..] {
            *v = r();
        }
        let opts = AttnOpts { heads: 2, windows: 1, causal: true, bias: None };
        let mut t = Tape::<f64>::new();
        let ta = leaf(&mut t, vec![4, 4], x);
        let ya = t.attention(ta, ta, ta, opts).unwrap();
        let tb = leaf(&mut t, vec![4, 4], x_tail);
        let yb = t.attention(tb, tb, tb, opts).unwrap();
        // rows 0 and 1 may only depend on tokens 0..=1
        for i in 0..8 {
            assert!((t.data(ya)[i] - t.data(yb)[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![3, 4], (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect());
        let y = t.softmax_lastdim(x).unwrap();
        for row in t.data(y).chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 4], vec![0.7; 4]);
        let y = t.softmax_lastdim(x).unwrap();
        for &v in t.data(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut r = rng(21);
        let x: Vec<f64> = (0..6 * 8).map(|_| 3.0 * r() + 1.0).collect();
        let mut t = Tape::<f64>::new();
        let tx = leaf(&mut t, vec![6, 8], x);
        let g = t.constant(vec![8], vec![1.0; 8]).unwrap();
        let b = t.constant(vec![8], vec![0.0; 8]).unwrap();
        let y = t.layer_norm(tx, g, b, 1e-9).unwrap();
        for row in t.data(y).chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
