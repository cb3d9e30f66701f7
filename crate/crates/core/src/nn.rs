//! Parameter management and small reusable layers.
//!
//! Parameters are leaves on the model's tape, registered by hierarchical name
//! so checkpoints are order-stable and shape-checked on load. Weights start
//! Xavier-uniform, biases at zero; the deformable offset predictor is
//! zero-initialised so dynamic alignment begins as a plain convolution.

use crate::scalar::Scalar;
use crate::tape::{Result, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Which part of the model a parameter belongs to, for parameter counting
/// and ablation reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Fpn,
    Bss,
    Detector,
    Bridge,
    Recognizer,
}

#[derive(Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Ordered list of every trainable tensor in the model.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    pub entries: Vec<ParamEntry>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn tensors(&self) -> impl Iterator<Item = Tensor> + '_ {
        self.entries.iter().map(|e| e.tensor)
    }

    pub fn count_scalars<S: Scalar>(&self, tape: &Tape<S>, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| tape.val(e.tensor).numel())
            .sum()
    }

    pub fn total_scalars<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        self.entries.iter().map(|e| tape.val(e.tensor).numel()).sum()
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum InitKind {
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
    One,
}

/// Construction context threading the tape, registry, RNG and name prefix
/// through module constructors.
pub struct Init<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub reg: &'a mut ParamRegistry,
    pub rng: &'a mut ChaCha12Rng,
    pub group: ParamGroup,
    prefix: String,
}

impl<'a, S: Scalar> Init<'a, S> {
    pub fn new(
        tape: &'a mut Tape<S>,
        reg: &'a mut ParamRegistry,
        rng: &'a mut ChaCha12Rng,
        group: ParamGroup,
    ) -> Self {
        Init { tape, reg, rng, group, prefix: String::new() }
    }

    /// Reborrow with an extended name prefix.
    pub fn child(&mut self, seg: &str) -> Init<'_, S> {
        let prefix = if self.prefix.is_empty() {
            format!("{seg}.")
        } else {
            format!("{}{seg}.", self.prefix)
        };
        Init { tape: self.tape, reg: self.reg, rng: self.rng, group: self.group, prefix }
    }

    /// Same scope, different parameter group.
    pub fn with_group(&mut self, group: ParamGroup) -> Init<'_, S> {
        Init { tape: self.tape, reg: self.reg, rng: self.rng, group, prefix: self.prefix.clone() }
    }

    pub fn param(&mut self, name: &str, shape: Vec<usize>, kind: InitKind) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<S> = match kind {
            InitKind::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n)
                    .map(|_| S::from_f64(self.rng.gen_range(-bound..bound)))
                    .collect()
            }
            InitKind::Zero => vec![S::ZERO; n],
            InitKind::One => vec![S::ONE; n],
        };
        let t = self
            .tape
            .leaf(shape, data, true)
            .expect("parameter shape/data mismatch");
        self.reg.entries.push(ParamEntry {
            name: format!("{}{name}", self.prefix),
            tensor: t,
            group: self.group,
        });
        t
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new<S: Scalar>(init: &mut Init<S>, name: &str, din: usize, dout: usize) -> Self {
        let mut scope = init.child(name);
        let w = scope.param("w", vec![din, dout], InitKind::Xavier { fan_in: din, fan_out: dout });
        let b = scope.param("b", vec![dout], InitKind::Zero);
        Linear { w, b: Some(b) }
    }

    pub fn new_no_bias<S: Scalar>(init: &mut Init<S>, name: &str, din: usize, dout: usize) -> Self {
        let mut scope = init.child(name);
        let w = scope.param("w", vec![din, dout], InitKind::Xavier { fan_in: din, fan_out: dout });
        Linear { w, b: None }
    }

    /// Zero-initialised weights and bias (offset predictors, gates).
    pub fn new_zero<S: Scalar>(init: &mut Init<S>, name: &str, din: usize, dout: usize) -> Self {
        let mut scope = init.child(name);
        let w = scope.param("w", vec![din, dout], InitKind::Zero);
        let b = scope.param("b", vec![dout], InitKind::Zero);
        Linear { w, b: Some(b) }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, x: Tensor) -> Result<Tensor> {
        let y = t.matmul(x, self.w)?;
        match self.b {
            Some(b) => t.add_row_bias(y, b),
            None => Ok(y),
        }
    }
}

/// Convolution layer wrapping [`Tape::conv2d`].
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        init: &mut Init<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut scope = init.child(name);
        let w = scope.param(
            "w",
            vec![cout, cin, k, k],
            InitKind::Xavier { fan_in: cin * k * k, fan_out: cout * k * k },
        );
        let b = scope.param("b", vec![cout], InitKind::Zero);
        Conv2d { w, b: Some(b), stride, pad }
    }

    /// All-zero weights and bias; used for the deformable offset predictor.
    pub fn new_zero<S: Scalar>(
        init: &mut Init<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut scope = init.child(name);
        let w = scope.param("w", vec![cout, cin, k, k], InitKind::Zero);
        let b = scope.param("b", vec![cout], InitKind::Zero);
        Conv2d { w, b: Some(b), stride, pad }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, x: Tensor) -> Result<Tensor> {
        let y = t.conv2d(x, self.w, self.stride, self.pad)?;
        match self.b {
            Some(b) => t.add_channel_bias(y, b),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: Tensor,
    pub b: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(init: &mut Init<S>, name: &str, dim: usize) -> Self {
        let mut scope = init.child(name);
        let g = scope.param("g", vec![dim], InitKind::One);
        let b = scope.param("b", vec![dim], InitKind::Zero);
        LayerNorm { g, b, eps: 1e-5 }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, x: Tensor) -> Result<Tensor> {
        t.layer_norm(x, self.g, self.b, self.eps)
    }
}

/// Projection set for one attention block: queries from the model stream,
/// keys/values possibly from a different width, plus the output projection.
#[derive(Debug, Clone, Copy)]
pub struct AttnProj {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl AttnProj {
    pub fn new<S: Scalar>(
        init: &mut Init<S>,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d_model: usize,
        heads: usize,
    ) -> Self {
        let mut scope = init.child(name);
        AttnProj {
            wq: Linear::new(&mut scope, "wq", d_q, d_model),
            wk: Linear::new(&mut scope, "wk", d_kv, d_model),
            wv: Linear::new(&mut scope, "wv", d_kv, d_model),
            proj: Linear::new(&mut scope, "proj", d_model, d_model),
            heads,
        }
    }

    /// Project, attend, project back. `opts.heads` is overwritten by the
    /// layer's head count.
    pub fn forward<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        q_in: Tensor,
        kv_in: Tensor,
        mut opts: crate::ops::AttnOpts,
    ) -> Result<Tensor> {
        opts.heads = self.heads;
        let q = self.wq.forward(t, q_in)?;
        let k = self.wk.forward(t, kv_in)?;
        let v = self.wv.forward(t, kv_in)?;
        let a = t.attention(q, k, v, opts)?;
        self.proj.forward(t, a)
    }
}

/// Two-layer MLP with ReLU.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<S: Scalar>(init: &mut Init<S>, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        let mut scope = init.child(name);
        Mlp {
            fc1: Linear::new(&mut scope, "fc1", din, hidden),
            fc2: Linear::new(&mut scope, "fc2", hidden, dout),
        }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, x: Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(t, x)?;
        let h = t.relu(h)?;
        self.fc2.forward(t, h)
    }
}

/// First/second-moment adaptive optimizer (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(tape: &Tape<S>, params: &ParamRegistry, lr: f64, clip_norm: f64) -> Self {
        let m = params
            .tensors()
            .map(|t| vec![S::ZERO; tape.val(t).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, step: 0, m, v }
    }

    /// Apply one update from the gradients currently on the tape.
    /// Parameters without a gradient are skipped.
    pub fn step(&mut self, tape: &mut Tape<S>, params: &ParamRegistry) {
        self.step += 1;
        let mut scale = 1.0;
        if self.clip_norm > 0.0 {
            let mut sq = 0.0f64;
            for e in &params.entries {
                if let Some(g) = tape.grad(e.tensor) {
                    for &v in g {
                        let v = v.to_f64();
                        sq += v * v;
                    }
                }
            }
            let norm = sq.sqrt();
            if norm > self.clip_norm {
                scale = self.clip_norm / norm;
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = self.lr * bc2.sqrt() / bc1;
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (ob1, ob2) = (S::from_f64(1.0 - self.beta1), S::from_f64(1.0 - self.beta2));
        let epsv = S::from_f64(self.eps);
        let lrv = S::from_f64(lr_t);
        let sc = S::from_f64(scale);
        for (i, e) in params.entries.iter().enumerate() {
            let Some(g) = tape.grad(e.tensor) else { continue };
            let g: Vec<S> = g.iter().map(|&x| x * sc).collect();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
            }
            let data = tape.data_mut(e.tensor);
            for j in 0..g.len() {
                data[j] -= lrv * m[j] / (v[j].sqrt() + epsv);
            }
        }
    }
}

/// 2-d sinusoidal positional encoding laid out `[h*w, c]`; the first half of
/// the channels encodes the row, the second half the column.
pub fn sincos_2d(c: usize, h: usize, w: usize) -> Vec<f64> {
    assert!(c % 4 == 0, "positional channels must be a multiple of 4");
    let quarter = c / 4;
    let mut pe = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * c;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                pe[row + 2 * i] = (y as f64 * freq).sin();
                pe[row + 2 * i + 1] = (y as f64 * freq).cos();
                pe[row + c / 2 + 2 * i] = (x as f64 * freq).sin();
                pe[row + c / 2 + 2 * i + 1] = (x as f64 * freq).cos();
            }
        }
    }
    pe
}

/// 1-d sinusoidal positional encoding laid out `[len, c]`.
pub fn sincos_1d(c: usize, len: usize) -> Vec<f64> {
    assert!(c % 2 == 0, "positional channels must be even");
    let half = c / 2;
    let mut pe = vec![0.0; len * c];
    for p in 0..len {
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
            pe[p * c + 2 * i] = (p as f64 * freq).sin();
            pe[p * c + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registry_names_are_hierarchical() {
        let mut tape = Tape::<f32>::new();
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut init = Init::new(&mut tape, &mut reg, &mut rng, ParamGroup::Detector);
        let mut stage = init.child("stage0");
        let _lin = Linear::new(&mut stage, "proj", 4, 8);
        assert_eq!(reg.entries[0].name, "stage0.proj.w");
        assert_eq!(reg.entries[1].name, "stage0.proj.b");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut tape = Tape::<f32>::new();
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut init = Init::new(&mut tape, &mut reg, &mut rng, ParamGroup::Detector);
        let x = init.param("x", vec![3], InitKind::One);
        tape.mark_persistent();
        let mut opt = Adam::new(&tape, &reg, 0.05, 0.0);
        let mut last = f32::INFINITY;
        for _ in 0..200 {
            tape.reset();
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let lv = tape.item(loss);
            tape.backward(loss).unwrap();
            opt.step(&mut tape, &reg);
            last = lv;
        }
        assert!(last < 1e-2, "loss stayed at {last}");
    }
}
