//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`] holding its
//! output value, the ids of its inputs and a closure mapping the output's
//! cotangent to input cotangents. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because a
//! node can only reference nodes created before it.
//!
//! Nodes whose inputs do not require gradients never store a backward
//! closure, so running frozen layers on a tape costs no extra memory.

use std::cell::RefCell;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, axis_split, gemm, Element, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of the primitive operations of one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records an operation. `backward` receives the output cotangent and,
    /// per parent, whether that parent needs a gradient.
    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Replays the tape backward from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        root.value.ensure_finite("loss")?;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`]: cotangents of every leaf that requires a
/// gradient and is reachable from the loss.
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// The gradient for `var`, or zeros if it did not influence the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn matmul_raw<T: Element>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Tensor<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(ta, tb, m, k, n, a.data(), b.data(), T::zero(), &mut out);
    Tensor::from_parts(vec![m, n], out)
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    fn check_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::Contract("operands live on different tapes".into()));
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.tape.push(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.tape.push(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.push(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |u, v| u * v).expect("shape")),
                needs[1].then(|| g.zip_map(&a, |u, v| u * v).expect("shape")),
            ]
        }))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * factor);
        self.tape
            .push(out, &[self], move |g, _| vec![Some(g.map(|v| v * factor))])
    }

    /// Adds `bias[d]` to every row of a tensor whose last axis is `d`.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&bias)?;
        let (x, b) = (self.value(), bias.value());
        let d = *x.shape().last().ok_or_else(|| dim_err!("add_row on scalar"))?;
        if b.shape() != [d] {
            return Err(dim_err!("bias {:?} for rows of width {d}", b.shape()));
        }
        let mut out = x.into_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let shape = self.shape();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            &[self, bias],
            move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for row in g.data().chunks(d.max(1)) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(vec![d], acc)
                });
                vec![Some(g.clone()), gb]
            },
        ))
    }

    /// Multiplies every row of a tensor whose last axis is `d` by `scale[d]`.
    pub fn mul_row(self, scale: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&scale)?;
        let (x, s) = (self.value(), scale.value());
        let d = *x.shape().last().ok_or_else(|| dim_err!("mul_row on scalar"))?;
        if s.shape() != [d] {
            return Err(dim_err!("scale {:?} for rows of width {d}", s.shape()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (v, &sv) in row.iter_mut().zip(s.data()) {
                *v *= sv;
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(shape.clone(), out),
            &[self, scale],
            move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut dx = g.data().to_vec();
                    for row in dx.chunks_mut(d.max(1)) {
                        for (v, &sv) in row.iter_mut().zip(s.data()) {
                            *v *= sv;
                        }
                    }
                    Tensor::from_parts(shape.clone(), dx)
                });
                let gs = needs[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (grow, xrow) in g.data().chunks(d.max(1)).zip(x.data().chunks(d.max(1))) {
                        for ((a, &gv), &xv) in acc.iter_mut().zip(grow).zip(xrow) {
                            *a += gv * xv;
                        }
                    }
                    Tensor::from_parts(vec![d], acc)
                });
                vec![gx, gs]
            },
        ))
    }

    /// Matrix product `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(dim_err!("matmul {:?} x {:?}", a.shape(), b.shape()));
        }
        let out = matmul_raw(false, false, m, k, n, &a, &b);
        Ok(self.tape.push(out, &[self, other], move |g, needs| {
            vec![
                // dA = G·Bᵀ, dB = Aᵀ·G
                needs[0].then(|| matmul_raw(false, true, m, n, k, g, &b)),
                needs[1].then(|| matmul_raw(true, false, k, m, n, &a, g)),
            ]
        }))
    }

    /// `self · otherᵀ` for `[m, k]` and `[n, k]` operands.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(dim_err!("matmul_t {:?} x {:?}ᵀ", a.shape(), b.shape()));
        }
        let out = matmul_raw(false, true, m, k, n, &a, &b);
        Ok(self.tape.push(out, &[self, other], move |g, needs| {
            vec![
                // dA = G·B, dB = Gᵀ·A
                needs[0].then(|| matmul_raw(false, false, m, n, k, g, &b)),
                needs[1].then(|| matmul_raw(true, false, n, m, k, g, &a)),
            ]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose2d()?;
        Ok(self.tape.push(out, &[self], |g, _| {
            vec![Some(g.transpose2d().expect("matrix"))]
        }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let original = self.shape();
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, &[self], move |g, _| {
            vec![Some(g.reshape(original.clone()).expect("reshape"))]
        }))
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let gate = branch::choices(|| x.data().iter().map(|&v| (v > T::zero()) as u32).collect());
        let out: Vec<T> = x
            .data()
            .iter()
            .zip(&gate)
            .map(|(&v, &on)| if on == 1 { v } else { T::zero() })
            .collect();
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self],
            move |g, _| {
                let dx = g
                    .data()
                    .iter()
                    .zip(&gate)
                    .map(|(&u, &on)| if on == 1 { u } else { T::zero() })
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
            },
        )
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(self) -> Var<'t, T> {
        let x = self.value();
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        let out = x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.tape.push(out, &[self], move |g, _| {
            let dx = x.map(|v| {
                let th = (c * (v + a * v * v * v)).tanh();
                half * (T::one() + th)
                    + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v)
            });
            vec![Some(g.zip_map(&dx, |u, d| u * d).expect("shape"))]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let y = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let saved = y.clone();
        self.tape.push(y, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&saved, |u, s| u * s * (T::one() - s))
                    .expect("shape"),
            )]
        })
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, len, inner) = axis_split(x.shape(), axis)?;
        let y = tensor::softmax(&x, axis)?;
        let saved = y.clone();
        Ok(self.tape.push(y, &[self], move |g, _| {
            // dx = y ⊙ (g − Σ g⊙y)
            let (gv, yv) = (g.data(), saved.data());
            let mut dx = vec![T::zero(); gv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| gv[at(j)] * yv[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = yv[at(j)] * (gv[at(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(saved.shape().to_vec(), dx))]
        }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, len, inner) = axis_split(x.shape(), axis)?;
        let y = tensor::log_softmax(&x, axis)?;
        let probs = y.map(|v| v.exp());
        Ok(self.tape.push(y, &[self], move |g, _| {
            // dx = g − softmax·Σ g
            let (gv, pv) = (g.data(), probs.data());
            let mut dx = vec![T::zero(); gv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let total: T = (0..len).map(|j| gv[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = gv[at(j)] - pv[at(j)] * total;
                    }
                }
            }
            vec![Some(Tensor::from_parts(probs.shape().to_vec(), dx))]
        }))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::from_f64(n as f64))
    }

    /// Rows `start..start + len` of a `[rows, ...]` tensor.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.slice_rows(start, len)?;
        let shape = x.shape().to_vec();
        let width = x.numel() / shape[0].max(1);
        Ok(self.tape.push(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); shape.iter().product()];
            dx[start * width..(start + len) * width].copy_from_slice(g.data());
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// Stacks `[r_i, ...]` tensors along the first axis.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tail: Vec<usize> = first.shape()[1..].to_vec();
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            first.check_tape(p)?;
            let v = p.value();
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(dim_err!("concat_rows: {:?} vs tail {:?}", v.shape(), tail));
            }
            rows.push(v.numel());
            data.extend_from_slice(v.data());
        }
        let total_rows = data.len() / tail.iter().product::<usize>().max(1);
        let mut shape = vec![total_rows];
        shape.extend_from_slice(&tail);
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        Ok(first
            .tape
            .push(Tensor::from_parts(shape, data), parts, move |g, needs| {
                let mut offset = 0;
                rows.iter()
                    .zip(&shapes)
                    .zip(needs)
                    .map(|((&n, s), &need)| {
                        let piece = need
                            .then(|| Tensor::from_parts(s.clone(), g.data()[offset..offset + n].to_vec()));
                        offset += n;
                        piece
                    })
                    .collect()
            }))
    }

    /// Joins `[r, c_i]` matrices side by side into `[r, Σ c_i]`.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for (p, v) in parts.iter().zip(&values) {
            first.check_tape(p)?;
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(dim_err!("concat_cols: {r} rows vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &c) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        Ok(first
            .tape
            .push(Tensor::from_parts(vec![rows, total], out), parts, move |g, needs| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let piece = need.then(|| {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * total + start..r * total + start + c]);
                            }
                            Tensor::from_parts(vec![rows, c], d)
                        });
                        start += c;
                        piece
                    })
                    .collect()
            }))
    }
}


/// Branch choices of non-smooth primitives (ReLU gates, max-pool argmaxes).
///
/// Outside gradient checking every call simply computes its choices. During
/// a check the unperturbed pass records them and the perturbed passes replay
/// them, so central differences are taken on a single linear piece.
pub(crate) mod branch {
    use std::cell::RefCell;

    enum Mode {
        Live,
        Record(Vec<Vec<u32>>),
        Replay(Vec<Vec<u32>>, usize),
    }

    thread_local! {
        static MODE: RefCell<Mode> = const { RefCell::new(Mode::Live) };
    }

    pub(crate) fn choices(compute: impl FnOnce() -> Vec<u32>) -> Vec<u32> {
        MODE.with(|m| {
            let mut mode = m.borrow_mut();
            match &mut *mode {
                Mode::Live => compute(),
                Mode::Record(log) => {
                    let c = compute();
                    log.push(c.clone());
                    c
                }
                Mode::Replay(log, cursor) => {
                    let c = log.get(*cursor).cloned();
                    *cursor += 1;
                    c.unwrap_or_else(compute)
                }
            }
        })
    }

    pub(crate) fn start_recording() {
        MODE.with(|m| *m.borrow_mut() = Mode::Record(Vec::new()));
    }

    /// Stops recording and returns the log.
    pub(crate) fn finish_recording() -> Vec<Vec<u32>> {
        MODE.with(|m| match std::mem::replace(&mut *m.borrow_mut(), Mode::Live) {
            Mode::Record(log) => log,
            _ => Vec::new(),
        })
    }

    pub(crate) fn start_replay(log: Vec<Vec<u32>>) {
        MODE.with(|m| *m.borrow_mut() = Mode::Replay(log, 0));
    }

    /// Ends replay, handing the log back for the next perturbation.
    pub(crate) fn finish_replay() -> Vec<Vec<u32>> {
        MODE.with(|m| match std::mem::replace(&mut *m.borrow_mut(), Mode::Live) {
            Mode::Replay(log, _) => log,
            _ => Vec::new(),
        })
    }

    pub(crate) fn reset() {
        MODE.with(|m| *m.borrow_mut() = Mode::Live);
    }
}
