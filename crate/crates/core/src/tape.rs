//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends its output buffer to the tape and, when gradients
//! are enabled and some input requires them, a backward closure. Closures are
//! replayed once, in reverse recording order, by [`Tape::backward`]; inputs
//! of an op always precede it, so the traversal is a valid reverse
//! topological order. Parameters are leaves created before
//! [`Tape::mark_persistent`]; [`Tape::reset`] drops everything recorded after
//! that point so the same tape can run one forward/backward pass per step
//! without re-registering parameters.

use crate::scalar::Scalar;
use std::fmt;

/// Handle to a value on the tape. Cheap to copy; only valid for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(pub(crate) u32);

impl Tensor {
    #[inline]
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Shape plus row-major data.
#[derive(Clone, Debug)]
pub struct Buf<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Buf<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Buf { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Buf { shape, data: vec![S::ZERO; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

impl TensorError {
    pub fn dim(msg: impl fmt::Display) -> Self {
        TensorError::Dim(msg.to_string())
    }
    pub fn invalid(msg: impl fmt::Display) -> Self {
        TensorError::Invalid(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Context handed to backward closures: read access to every recorded value,
/// write access to the gradient slots, and the id of the op's own output.
///
/// Closures access `vals` and `grads` as plain fields so the borrow checker
/// can see the two are disjoint.
pub struct Bwd<'a, S> {
    pub vals: &'a [Buf<S>],
    pub grads: &'a mut [Option<Vec<S>>],
    pub out: Tensor,
}

impl<'a, S: Scalar> Bwd<'a, S> {
    /// Take the (complete) gradient of the op's output, leaving `None` so the
    /// buffer is freed as the sweep moves on.
    pub fn take_out(&mut self) -> Option<Vec<S>> {
        self.grads[self.out.idx()].take()
    }
}

/// Gradient accumulator for `t`, zero-initialised on first touch.
#[inline]
pub(crate) fn acc_slice<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    t: Tensor,
    n: usize,
) -> &mut [S] {
    grads[t.idx()].get_or_insert_with(|| vec![S::ZERO; n]).as_mut_slice()
}

type BackFn<S> = Box<dyn Fn(&mut Bwd<'_, S>)>;

struct OpRec<S> {
    out: Tensor,
    back: BackFn<S>,
}

/// The recording tape. One per model instance; single-threaded.
pub struct Tape<S: Scalar> {
    vals: Vec<Buf<S>>,
    grads: Vec<Option<Vec<S>>>,
    needs: Vec<bool>,
    ops: Vec<OpRec<S>>,
    persistent: usize,
    grad_enabled: bool,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
            persistent: 0,
            grad_enabled: true,
            check_finite: false,
        }
    }

    /// Enable or disable recording of backward closures (inference mode).
    pub fn set_grad_enabled(&mut self, on: bool) {
        self.grad_enabled = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// When set, every op output is scanned for NaN/Inf and reported.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Create a leaf value.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::dim(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(Buf { shape, data }, requires_grad))
    }

    /// Leaf that never receives gradients (masks, targets, codec tables).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Tensor> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, x: S) -> Tensor {
        self.push(Buf { shape: vec![1], data: vec![x] }, false)
    }

    pub(crate) fn push(&mut self, buf: Buf<S>, needs: bool) -> Tensor {
        let id = self.vals.len() as u32;
        self.vals.push(buf);
        self.grads.push(None);
        self.needs.push(needs);
        Tensor(id)
    }

    /// Record an op output together with its backward closure. The closure is
    /// kept only when gradients are enabled and `needs` is true.
    pub(crate) fn push_op(
        &mut self,
        buf: Buf<S>,
        needs: bool,
        name: &'static str,
        back: impl Fn(&mut Bwd<'_, S>) + 'static,
    ) -> Result<Tensor> {
        if self.check_finite && !buf.data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        let needs = needs && self.grad_enabled;
        let t = self.push(buf, needs);
        if needs {
            self.ops.push(OpRec { out: t, back: Box::new(back) });
        }
        Ok(t)
    }

    #[inline]
    pub fn needs_grad(&self, t: Tensor) -> bool {
        self.needs[t.idx()]
    }

    #[inline]
    pub fn val(&self, t: Tensor) -> &Buf<S> {
        &self.vals[t.idx()]
    }

    #[inline]
    pub fn data(&self, t: Tensor) -> &[S] {
        &self.vals[t.idx()].data
    }

    #[inline]
    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.vals[t.idx()].shape
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self, t: Tensor) -> S {
        debug_assert_eq!(self.vals[t.idx()].numel(), 1);
        self.vals[t.idx()].data[0]
    }

    /// Overwrite a leaf's data in place (optimizer updates, perturbations).
    pub fn set_data(&mut self, t: Tensor, data: &[S]) {
        let buf = &mut self.vals[t.idx()];
        assert_eq!(buf.data.len(), data.len(), "set_data length mismatch");
        buf.data.copy_from_slice(data);
    }

    pub fn data_mut(&mut self, t: Tensor) -> &mut [S] {
        &mut self.vals[t.idx()].data
    }

    /// Gradient of `t` after a backward pass, if any was accumulated.
    pub fn grad(&self, t: Tensor) -> Option<&[S]> {
        self.grads[t.idx()].as_deref()
    }

    /// Freeze everything recorded so far (parameters, codec constants) so
    /// [`Tape::reset`] keeps it.
    pub fn mark_persistent(&mut self) {
        assert!(self.ops.is_empty(), "persistent prefix must be leaves only");
        self.persistent = self.vals.len();
    }

    pub fn persistent_len(&self) -> usize {
        self.persistent
    }

    /// Drop all values and closures recorded after the persistent prefix and
    /// clear every gradient slot.
    pub fn reset(&mut self) {
        self.vals.truncate(self.persistent);
        self.grads.truncate(self.persistent);
        self.needs.truncate(self.persistent);
        self.ops.clear();
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse sweep: seeds `d loss/d loss = 1` and replays every recorded
    /// closure once in reverse order. Gradients of multiple uses accumulate
    /// by summation.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.vals[loss.idx()].numel() != 1 {
            return Err(TensorError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.vals[loss.idx()].shape
            )));
        }
        if !self.grad_enabled {
            return Err(TensorError::invalid("backward with gradients disabled"));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.idx()] = Some(vec![S::ONE]);
        let mut ctx = Bwd { vals: &self.vals, grads: &mut self.grads, out: loss };
        for op in self.ops.iter().rev() {
            ctx.out = op.out;
            (op.back)(&mut ctx);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_mismatch_is_error() {
        let mut t = Tape::<f64>::new();
        assert!(t.leaf(vec![2, 2], vec![1.0; 3], false).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn reset_keeps_persistent_prefix() {
        let mut t = Tape::<f32>::new();
        let p = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        t.mark_persistent();
        let _x = t.leaf(vec![3], vec![0.0; 3], false).unwrap();
        assert_eq!(t.len(), 2);
        t.reset();
        assert_eq!(t.len(), 1);
        assert_eq!(t.data(p), &[1.0, 2.0]);
    }
}
