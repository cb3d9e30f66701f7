//! Differentiable operations recorded on the [`Tape`].
//!
//! Each method computes the forward value eagerly and registers a backward
//! closure capturing only ids and small saved buffers. Shape checks return
//! [`TensorError::Dim`]; nothing panics on user input.

mod attention;
mod conv;

pub use attention::*;
pub use conv::*;

use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tape::{acc_slice, Buf, Result, Tape, Tensor, TensorError};

fn same_shape<S: Scalar>(tape: &Tape<S>, a: Tensor, b: Tensor, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Row-major strided product `op(A)[m,k] * op(B)[k,n]` written to `c` (beta=0
/// overwrite, beta=1 accumulate).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    a_cols: usize,
    ta: bool,
    b: &[S],
    b_cols: usize,
    tb: bool,
    beta: S,
    c: &mut [S],
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
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
            n as isize,
            1,
        );
    }
}

impl<S: Scalar> Tape<S> {
    fn binary(
        &mut self,
        a: Tensor,
        b: Tensor,
        name: &'static str,
        fwd: impl Fn(S, S) -> S,
        // (x, y, out, g) -> (dx, dy)
        bwd: impl Fn(S, S, S, S) -> (S, S) + 'static,
    ) -> Result<Tensor> {
        same_shape(self, a, b, name)?;
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let n = data.len();
        let shape = self.shape(a).to_vec();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(Buf::new(shape, data), na || nb, name, move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let out = ctx.out;
            if na {
                let xd = &ctx.vals[a.idx()].data;
                let yd = &ctx.vals[b.idx()].data;
                let od = &ctx.vals[out.idx()].data;
                let acc = acc_slice(ctx.grads, a, n);
                for i in 0..n {
                    acc[i] += bwd(xd[i], yd[i], od[i], g[i]).0;
                }
            }
            if nb {
                let xd = &ctx.vals[a.idx()].data;
                let yd = &ctx.vals[b.idx()].data;
                let od = &ctx.vals[out.idx()].data;
                let acc = acc_slice(ctx.grads, b, n);
                for i in 0..n {
                    acc[i] += bwd(xd[i], yd[i], od[i], g[i]).1;
                }
            }
        })
    }

    fn unary(
        &mut self,
        x: Tensor,
        name: &'static str,
        fwd: impl Fn(S) -> S,
        // (x, out, g) -> dx
        bwd: impl Fn(S, S, S) -> S + 'static,
    ) -> Result<Tensor> {
        let data: Vec<S> = self.data(x).iter().map(|&v| fwd(v)).collect();
        let n = data.len();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(shape, data), needs, name, move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let out = ctx.out;
            let xd = &ctx.vals[x.idx()].data;
            let od = &ctx.vals[out.idx()].data;
            let acc = acc_slice(ctx.grads, x, n);
            for i in 0..n {
                acc[i] += bwd(xd[i], od[i], g[i]);
            }
        })
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "add", |x, y| x + y, |_, _, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "sub", |x, y| x - y, |_, _, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "mul", |x, y| x * y, |x, y, _, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "div", |x, y| x / y, |_, y, o, g| (g / y, -g * o / y))
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min2(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(
            a,
            b,
            "min2",
            |x, y| x.minv(y),
            |x, y, _, g| if x <= y { (g, S::ZERO) } else { (S::ZERO, g) },
        )
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn max2(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(
            a,
            b,
            "max2",
            |x, y| x.maxv(y),
            |x, y, _, g| if x >= y { (g, S::ZERO) } else { (S::ZERO, g) },
        )
    }

    pub fn neg(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary(x, "neg", |v| -v, |_, _, g| -g)
    }

    pub fn abs(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary(
            x,
            "abs",
            |v| v.abs(),
            |v, _, g| {
                if v > S::ZERO {
                    g
                } else if v < S::ZERO {
                    -g
                } else {
                    S::ZERO
                }
            },
        )
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary(
            x,
            "relu",
            |v| v.maxv(S::ZERO),
            |v, _, g| if v > S::ZERO { g } else { S::ZERO },
        )
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary(x, "sigmoid", sigmoid, |_, o, g| g * o * (S::ONE - o))
    }

    pub fn softplus(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary(x, "softplus", softplus, |v, _, g| g * sigmoid(v))
    }

    pub fn exp(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary(x, "exp", |v| v.exp(), |_, o, g| g * o)
    }

    pub fn ln(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary(x, "ln", |v| v.ln(), |v, _, g| g / v)
    }

    pub fn sqrt(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary(x, "sqrt", |v| v.sqrt(), |_, o, g| g / (o + o))
    }

    /// Elementwise `x^p` for non-negative inputs.
    pub fn powf(&mut self, x: Tensor, p: f64) -> Result<Tensor> {
        let pe = S::from_f64(p);
        let pm1 = S::from_f64(p - 1.0);
        self.unary(
            x,
            "powf",
            move |v| v.powf(pe),
            move |v, _, g| g * pe * v.powf(pm1),
        )
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let ce = S::from_f64(c);
        self.unary(x, "scale", move |v| v * ce, move |_, _, g| g * ce)
    }

    pub fn add_scalar(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let ce = S::from_f64(c);
        self.unary(x, "add_scalar", move |v| v + ce, |_, _, g| g)
    }

    /// `op(a)[m,k] * op(b)[k,n]` with optional transposes taken via strides.
    ///
    /// Backward accumulates `dA = G * op(B)^T` and `dB = op(A)^T * G`, mapped
    /// back into each operand's storage layout.
    pub fn matmul_t(&mut self, a: Tensor, ta: bool, b: Tensor, tb: bool) -> Result<Tensor> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(TensorError::dim(format!(
                "matmul expects 2-d operands, got {ash:?} x {bsh:?}"
            )));
        }
        let (m, ka) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
        let (kb, n) = if tb { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if ka != kb {
            return Err(TensorError::dim(format!(
                "matmul inner dims differ: {ash:?} (t={ta}) x {bsh:?} (t={tb})"
            )));
        }
        let k = ka;
        let (a_cols, b_cols) = (ash[1], bsh[1]);
        let (a_numel, b_numel) = (ash[0] * ash[1], bsh[0] * bsh[1]);
        let mut out = vec![S::ZERO; m * n];
        gemm_into(m, k, n, S::ONE, self.data(a), a_cols, ta, self.data(b), b_cols, tb, S::ZERO, &mut out);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(Buf::new(vec![m, n], out), na || nb, "matmul", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            if na {
                let bd = &ctx.vals[b.idx()].data;
                let acc = acc_slice(ctx.grads, a, a_numel);
                if !ta {
                    gemm_into(m, n, k, S::ONE, &g, n, false, bd, b_cols, !tb, S::ONE, acc);
                } else {
                    gemm_into(k, n, m, S::ONE, bd, b_cols, tb, &g, n, true, S::ONE, acc);
                }
            }
            if nb {
                let ad = &ctx.vals[a.idx()].data;
                let acc = acc_slice(ctx.grads, b, b_numel);
                if !tb {
                    gemm_into(k, m, n, S::ONE, ad, a_cols, !ta, &g, n, false, S::ONE, acc);
                } else {
                    gemm_into(n, m, k, S::ONE, &g, n, true, ad, a_cols, ta, S::ONE, acc);
                }
            }
        })
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.matmul_t(a, false, b, false)
    }

    /// `x[r,c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(bias) != [xs[1]] {
            return Err(TensorError::dim(format!(
                "add_row_bias: {:?} + {:?}",
                xs,
                self.shape(bias)
            )));
        }
        let (r, c) = (xs[0], xs[1]);
        let mut data = self.data(x).to_vec();
        {
            let bd = self.data(bias);
            for row in data.chunks_mut(c) {
                for (v, &b) in row.iter_mut().zip(bd) {
                    *v += b;
                }
            }
        }
        let (nx, nb) = (self.needs_grad(x), self.needs_grad(bias));
        self.push_op(Buf::new(vec![r, c], data), nx || nb, "add_row_bias", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            if nx {
                let acc = acc_slice(ctx.grads, x, r * c);
                for (a, &gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
            if nb {
                let acc = acc_slice(ctx.grads, bias, c);
                for row in g.chunks(c) {
                    for (a, &gi) in acc.iter_mut().zip(row) {
                        *a += gi;
                    }
                }
            }
        })
    }

    /// `x[c,h,w] + bias[c]` broadcast over the spatial extent.
    pub fn add_channel_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(bias) != [xs[0]] {
            return Err(TensorError::dim(format!(
                "add_channel_bias: {:?} + {:?}",
                xs,
                self.shape(bias)
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let mut data = self.data(x).to_vec();
        {
            let bd = self.data(bias);
            for (ch, chunk) in data.chunks_mut(hw).enumerate() {
                let b = bd[ch];
                for v in chunk {
                    *v += b;
                }
            }
        }
        let (nx, nb) = (self.needs_grad(x), self.needs_grad(bias));
        self.push_op(Buf::new(xs, data), nx || nb, "add_channel_bias", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            if nx {
                let acc = acc_slice(ctx.grads, x, c * hw);
                for (a, &gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
            if nb {
                let acc = acc_slice(ctx.grads, bias, c);
                for ch in 0..c {
                    let mut s = S::ZERO;
                    for &gi in &g[ch * hw..(ch + 1) * hw] {
                        s += gi;
                    }
                    acc[ch] += s;
                }
            }
        })
    }

    pub fn sum_all(&mut self, x: Tensor) -> Result<Tensor> {
        let mut s = S::ZERO;
        for &v in self.data(x) {
            s += v;
        }
        let n = self.val(x).numel();
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(vec![1], vec![s]), needs, "sum_all", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let gi = g[0];
            for a in acc_slice(ctx.grads, x, n) {
                *a += gi;
            }
        })
    }

    pub fn mean_all(&mut self, x: Tensor) -> Result<Tensor> {
        let n = self.val(x).numel();
        if n == 0 {
            return Err(TensorError::invalid("mean of empty tensor"));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.val(x).numel() {
            return Err(TensorError::dim(format!(
                "reshape {:?} -> {:?}",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(shape, data), needs, "reshape", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, n);
            for (a, &gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        })
    }

    /// 2-d transpose, materialised.
    pub fn transpose2d(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(TensorError::dim(format!("transpose2d on {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        let xd = self.data(x);
        let mut data = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(vec![c, r], data), needs, "transpose2d", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, r * c);
            for i in 0..r {
                for j in 0..c {
                    acc[i * c + j] += g[j * r + i];
                }
            }
        })
    }

    /// Rows `r0..r1` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Tensor, r0: usize, r1: usize) -> Result<Tensor> {
        let xs = self.shape(x);
        if xs.len() != 2 || r1 > xs[0] || r0 >= r1 {
            return Err(TensorError::dim(format!("slice_rows {r0}..{r1} of {xs:?}")));
        }
        let (rows, c) = (xs[0], xs[1]);
        let data = self.data(x)[r0 * c..r1 * c].to_vec();
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(vec![r1 - r0, c], data), needs, "slice_rows", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, rows * c);
            for (a, &gi) in acc[r0 * c..r1 * c].iter_mut().zip(&g) {
                *a += gi;
            }
        })
    }

    /// Columns `c0..c1` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Tensor, c0: usize, c1: usize) -> Result<Tensor> {
        let xs = self.shape(x);
        if xs.len() != 2 || c1 > xs[1] || c0 >= c1 {
            return Err(TensorError::dim(format!("slice_cols {c0}..{c1} of {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        let w = c1 - c0;
        let xd = self.data(x);
        let mut data = vec![S::ZERO; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&xd[i * c + c0..i * c + c1]);
        }
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(vec![r, w], data), needs, "slice_cols", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, r * c);
            for i in 0..r {
                for j in 0..w {
                    acc[i * c + c0 + j] += g[i * w + j];
                }
            }
        })
    }

    /// Stack 2-d tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_rows of nothing"));
        }
        let first = self.shape(parts[0]);
        if first.len() != 2 {
            return Err(TensorError::dim(format!("concat_rows needs 2-d parts, got {first:?}")));
        }
        let c = first[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != c {
                return Err(TensorError::dim(format!("concat_rows part {s:?} vs {c} cols")));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        let parts: Vec<(Tensor, usize, bool)> = parts
            .iter()
            .map(|&p| (p, self.shape(p)[0], self.needs_grad(p)))
            .collect();
        self.push_op(Buf::new(vec![rows, c], data), needs, "concat_rows", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let mut off = 0;
            for &(p, r, np) in &parts {
                let nel = r * c;
                if np {
                    let acc = acc_slice(ctx.grads, p, nel);
                    for (a, &gi) in acc.iter_mut().zip(&g[off..off + nel]) {
                        *a += gi;
                    }
                }
                off += nel;
            }
        })
    }

    /// Gather whole rows by index (embedding lookup); repeated indices
    /// accumulate gradients.
    pub fn gather_rows(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(TensorError::dim(format!("gather_rows on {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::invalid(format!("gather_rows index {bad} >= {r}")));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let needs = self.needs_grad(x);
        let rows = idx.len();
        let idx = idx.to_vec();
        self.push_op(Buf::new(vec![rows, c], data), needs, "gather_rows", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, r * c);
            for (kk, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    acc[i * c + j] += g[kk * c + j];
                }
            }
        })
    }

    /// Pick one element per row: `out[r] = x[r, idx[r]]`.
    pub fn select_lastdim(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor> {
        let xs = self.shape(x);
        if xs.len() != 2 || idx.len() != xs[0] {
            return Err(TensorError::dim(format!(
                "select_lastdim: {} indices for {xs:?}",
                idx.len()
            )));
        }
        let (r, c) = (xs[0], xs[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(TensorError::invalid(format!("select index {bad} >= {c}")));
        }
        let xd = self.data(x);
        let data: Vec<S> = idx.iter().enumerate().map(|(row, &i)| xd[row * c + i]).collect();
        let needs = self.needs_grad(x);
        let idx = idx.to_vec();
        self.push_op(Buf::new(vec![idx.len()], data), needs, "select_lastdim", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, r * c);
            for (row, &i) in idx.iter().enumerate() {
                acc[row * c + i] += g[row];
            }
        })
    }
}
