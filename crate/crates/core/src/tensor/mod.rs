//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every operation produces a new [`Tensor`] that remembers its parents and
//! a backward rule. Calling [`Tensor::backward`] on a scalar walks the graph
//! in reverse topological order and accumulates gradients into every leaf
//! that was created with `requires_grad`.
//!
//! Tensors are reference counted handles; cloning one aliases the same
//! storage, which is how shared parameters are expressed.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, GradCheckReport, TensorCheck};
pub use ops::{concat_cols, concat_rows, embedding, layer_norm, mix_rows, negative_cosine, Activation};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: given the output gradient and the parent handles, return
/// one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    retain_grad: Cell<bool>,
    name: Option<String>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

impl Drop for Node {
    // Long recurrent chains would otherwise overflow the stack on drop.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("name", &self.0.name)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if shape.is_empty() || shape.iter().any(|&s| s == 0) || n != len {
        return Err(Error::shape(
            "new",
            format!("shape {shape:?} does not describe {len} elements"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        name: Option<String>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            retain_grad: Cell::new(false),
            name,
            parents,
            backward,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::build("const", shape.to_vec(), data, false, None, vec![], None))
    }

    /// Trainable leaf.
    pub fn param(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::build(
            "param",
            shape.to_vec(),
            data,
            true,
            Some(name.into()),
            vec![],
            None,
        ))
    }

    /// Row-major `rows × cols` constant.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Self::new(data, &[rows, cols])
    }

    /// `1 × n` constant.
    pub fn row_vector(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Self::new(data, &[1, n])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::build("const", shape.to_vec(), vec![0.0; n], false, None, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build("const", vec![1], vec![v], false, None, vec![], None)
    }

    /// Result of an operation. Parents and the backward rule are kept only
    /// when some parent takes part in differentiation.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        if parents.iter().any(Tensor::requires_grad) {
            Self::build(op, shape, data, true, None, parents, Some(backward))
        } else {
            Self::build(op, shape, data, false, None, vec![], None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Leading extent of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.0.shape.last().expect("tensor has at least one axis")
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    /// Overwrite the values in place. Used by optimizers, checkpoint
    /// loading and finite-difference probes; never during a backward pass.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut d = self.0.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} values, got {}", d.len(), values.len()),
            ));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    /// Reset the accumulator to an all-zero buffer.
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    pub fn set_grad(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape("set_grad", format!("{} values for {} elements", values.len(), self.numel())));
        }
        *self.0.grad.borrow_mut() = Some(values.to_vec());
        Ok(())
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Keep the gradient of this (non-leaf) tensor after backward.
    pub fn retain_grad(&self) {
        self.0.retain_grad.set(true);
    }

    /// Copy of the values as a constant: the stop-gradient operation.
    pub fn detach(&self) -> Tensor {
        Self::build(
            "detach",
            self.0.shape.clone(),
            frozen::pass(self.to_vec()),
            false,
            None,
            vec![],
            None,
        )
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse accumulation from a scalar. Leaf gradients accumulate across
    /// calls; call [`Tensor::zero_grad`] on parameters between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(std::slice::from_ref(self));
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            let n = &node.0;
            match &n.backward {
                None => node.accumulate(&g),
                Some(rule) => {
                    if n.retain_grad.get() {
                        node.accumulate(&g);
                    }
                    let scale = fault::factor(n.op);
                    let grads = rule(&g, &n.parents);
                    for (parent, pg) in n.parents.iter().zip(grads) {
                        let Some(mut pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        if scale != 1.0 {
                            pg.iter_mut().for_each(|x| *x *= scale);
                        }
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Nodes reachable from `roots` that take part in differentiation, parents
/// before children.
fn topo_order(roots: &[Tensor]) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = roots.iter().rev().map(|t| (t.clone(), false)).collect();
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.requires_grad() || !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.0.parents.iter().rev() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Distinct trainable leaves reachable from `roots`, in discovery order.
pub fn reachable_leaves(roots: &[Tensor]) -> Vec<Tensor> {
    topo_order(roots)
        .into_iter()
        .filter(|t| t.is_leaf() && t.requires_grad())
        .collect()
}

/// Multiply–accumulate tally for contraction primitives on this thread.
///
/// Only operations that contract over an axis count: matrix products
/// (`m·k·n`) and convex row mixing (`rows·k·cols`). Elementwise work,
/// normalisation and reductions count zero.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static TALLY: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        TALLY.with(|t| t.set(0));
    }

    pub fn read() -> u64 {
        TALLY.with(|t| t.get())
    }

    pub(crate) fn add(n: u64) {
        TALLY.with(|t| t.set(t.get() + n));
    }

    /// Tally accumulated while running `f`.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let before = read();
        let out = f();
        (out, read() - before)
    }
}

/// Replays stop-gradient values so a finite-difference probe differentiates
/// the same surrogate objective as reverse mode, where every detached value
/// is a constant.
pub(crate) mod frozen {
    use std::cell::RefCell;

    enum Mode {
        Off,
        Record(Vec<Vec<f64>>),
        Replay(Vec<Vec<f64>>, usize),
    }

    thread_local! {
        static MODE: RefCell<Mode> = const { RefCell::new(Mode::Off) };
    }

    pub(crate) fn pass(values: Vec<f64>) -> Vec<f64> {
        MODE.with(|m| match &mut *m.borrow_mut() {
            Mode::Off => values,
            Mode::Record(tape) => {
                tape.push(values.clone());
                values
            }
            Mode::Replay(tape, cursor) => {
                let out = tape.get(*cursor).filter(|v| v.len() == values.len()).cloned();
                *cursor += 1;
                out.unwrap_or(values)
            }
        })
    }

    /// Runs `f` while recording every detached value.
    pub(crate) fn record<T>(f: impl FnOnce() -> T) -> (T, Vec<Vec<f64>>) {
        MODE.with(|m| *m.borrow_mut() = Mode::Record(Vec::new()));
        let out = f();
        let tape = MODE.with(|m| match std::mem::replace(&mut *m.borrow_mut(), Mode::Off) {
            Mode::Record(tape) => tape,
            _ => Vec::new(),
        });
        (out, tape)
    }

    /// Runs `f` substituting recorded values in order.
    pub(crate) fn replay<T>(tape: &[Vec<f64>], f: impl FnOnce() -> T) -> T {
        MODE.with(|m| *m.borrow_mut() = Mode::Replay(tape.to_vec(), 0));
        let out = f();
        MODE.with(|m| *m.borrow_mut() = Mode::Off);
        out
    }
}

/// Test hook that scales the gradient an op passes to its parents, so a
/// gradient check can be shown to catch a wrong backward rule.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static TARGET: Cell<Option<(&'static str, f64)>> = const { Cell::new(None) };
    }

    pub fn corrupt_backward(op: &'static str, factor: f64) {
        TARGET.with(|t| t.set(Some((op, factor))));
    }

    pub fn clear() {
        TARGET.with(|t| t.set(None));
    }

    pub(crate) fn factor(op: &'static str) -> f64 {
        TARGET.with(|t| match t.get() {
            Some((target, f)) if target == op => f,
            _ => 1.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::param("x", vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let x = Tensor::param("x", vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let x = Tensor::param("x", vec![0.5, -1.5], &[1, 2]).unwrap();
        let loss = x.tanh().mul(&x).unwrap().sum();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::param("x", vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn bad_shape_is_rejected() {
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::param("x", vec![2.0], &[1]).unwrap();
        let y = x.mul(&x.detach()).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let x = Tensor::param("x", vec![1.0], &[1]).unwrap();
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.scale(1.0);
        }
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
        drop(y);
    }

    #[test]
    fn retained_intermediate_gradient() {
        let x = Tensor::param("x", vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(3.0);
        y.retain_grad();
        y.mul(&y).unwrap().sum().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![6.0, 12.0]);
        assert_eq!(x.grad().unwrap(), vec![18.0, 36.0]);
    }
}
