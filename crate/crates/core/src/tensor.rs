//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every differentiable op; [`Tensor::backward`] sweeps the
//! tape in reverse insertion order and accumulates gradients by addition.
//! Slice/reshape copy rather than alias, and broadcasting is limited to
//! leading-axis (suffix-aligned) broadcast.
//!
//! A tape and its tensors belong to one logical owner; distinct training
//! contexts each build their own tape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradient tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    fn push(&self, parents: Vec<usize>, backward: Option<BackwardFn>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { parents, backward });
        inner.nodes.len() - 1
    }

    /// Create a differentiable leaf (a parameter or input that wants a
    /// gradient).
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidInput {
                op: "leaf",
                msg: format!("shape {shape:?} does not match data length {}", data.len()),
            });
        }
        let id = self.push(Vec::new(), None);
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: Some((self.clone(), id)),
        })
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `t`. A tensor the root never
    /// touched gets an all-zero gradient of matching shape.
    pub fn get(&self, t: &Tensor) -> Result<Tensor> {
        let (_, id) = t.node.as_ref().ok_or(Error::InvalidInput {
            op: "Gradients::get",
            msg: "tensor is not on the tape".to_string(),
        })?;
        let data = match self.grads.get(*id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; t.len()],
        };
        Ok(Tensor::constant(&t.shape, data).expect("shape matches"))
    }
}

/// Dense row-major f64 tensor.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<(Tape, usize)>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    /// Untracked tensor from raw data.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidInput {
                op: "constant",
                msg: format!("shape {shape:?} does not match data length {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; numel(shape)]).expect("consistent")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1], vec![v]).expect("consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::InvalidInput {
                op: "to_scalar",
                msg: format!("tensor of shape {:?} is not a scalar", self.shape),
            });
        }
        Ok(self.data[0])
    }

    fn tape_of(inputs: &[&Tensor]) -> Result<Option<Tape>> {
        let mut found: Option<Tape> = None;
        for t in inputs {
            if let Some((tape, _)) = &t.node {
                match &found {
                    None => found = Some(tape.clone()),
                    Some(existing) if existing.same_as(tape) => {}
                    Some(_) => {
                        return Err(Error::InvalidInput {
                            op: "tape_of",
                            msg: "inputs belong to different tapes".to_string(),
                        })
                    }
                }
            }
        }
        Ok(found)
    }

    /// Record an op whose `backward` yields one gradient per input, in input
    /// order. Untracked inputs are promoted to constant tape nodes so the
    /// sweep stays uniform; their gradients are simply never read.
    fn record(
        inputs: &[&Tensor],
        out_shape: Vec<usize>,
        out_data: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        let tape = Self::tape_of(inputs)?;
        let node = match tape {
            None => None,
            Some(tape) => {
                let parents: Vec<usize> = inputs
                    .iter()
                    .map(|t| match &t.node {
                        Some((_, id)) => *id,
                        None => tape.push(Vec::new(), None),
                    })
                    .collect();
                let id = tape.push(parents, Some(backward));
                Some((tape, id))
            }
        };
        Ok(Tensor {
            shape: out_shape,
            data: Rc::new(out_data),
            node,
        })
    }

    /// Reverse sweep from a scalar root. Gradients of all tracked tensors
    /// accumulate by addition. A second sweep on the same tape is an error.
    pub fn backward(&self) -> Result<Gradients> {
        if self.len() != 1 {
            return Err(Error::InvalidInput {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", self.shape),
            });
        }
        let (tape, root) = self.node.as_ref().ok_or(Error::InvalidInput {
            op: "backward",
            msg: "root tensor is not on a tape".to_string(),
        })?;
        let mut inner = tape.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::InvalidInput {
                op: "backward",
                msg: "tape already swept; build a fresh tape per backward pass".to_string(),
            });
        }
        inner.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[*root] = Some(vec![1.0]);
        for i in (0..=*root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &inner.nodes[i];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[*p] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&pg) {
                                *a += *b;
                            }
                        }
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise binary ops (suffix-aligned broadcast) ----

    fn broadcast_binary(
        a: &Tensor,
        b: &Tensor,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        // grads of (a, b) given (grad_out, a_val, b_val)
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let (big, small, a_is_big) = if a.len() >= b.len() {
            (a, b, true)
        } else {
            (b, a, false)
        };
        // a one-element tensor broadcasts against anything
        let scalar_small = small.len() == 1;
        if (!scalar_small && !is_suffix(&small.shape, &big.shape))
            || big.len() % small.len().max(1) != 0
        {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let sl = small.len();
        let out: Vec<f64> = big
            .data
            .iter()
            .enumerate()
            .map(|(i, &bv)| {
                let sv = small.data[i % sl];
                if a_is_big {
                    fwd(bv, sv)
                } else {
                    fwd(sv, bv)
                }
            })
            .collect();
        let (ad, bd) = (a.data.clone(), b.data.clone());
        let (alen, blen) = (a.len(), b.len());
        let out_shape = big.shape.clone();
        Tensor::record(&[a, b], out_shape, out, Box::new(move |g| {
            let mut ga = vec![0.0; alen];
            let mut gb = vec![0.0; blen];
            for (i, &gv) in g.iter().enumerate() {
                let av = ad[i % alen];
                let bv = bd[i % blen];
                let (da, db) = bwd(gv, av, bv);
                ga[i % alen] += da;
                gb[i % blen] += db;
            }
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::broadcast_binary(self, other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::broadcast_binary(self, other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::broadcast_binary(self, other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    // ---- elementwise unary ops ----

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        // grad_in given (grad_out, x, y)
        bwd: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let out: Vec<f64> = self.data.iter().map(|&x| fwd(x)).collect();
        let x = self.data.clone();
        let y = Rc::new(out.clone());
        Tensor::record(&[self], self.shape.clone(), out, Box::new(move |g| {
            vec![g
                .iter()
                .enumerate()
                .map(|(i, &gv)| bwd(gv, x[i], y[i]))
                .collect()]
        }))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(|x| -x, |g, _, _| -g)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary(move |x| x * s, move |g, _, _| g * s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.unary(move |x| x + s, |g, _, _| g)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary(|x| x.abs(), |g, x, _| if x < 0.0 { -g } else { g })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(|x| x.sqrt(), |g, _, y| g * 0.5 / y)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(|x| x.exp(), |g, _, y| g * y)
    }

    /// Elementwise x^p for a fixed exponent.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        self.unary(move |x| x.powf(p), move |g, x, _| g * p * x.powf(p - 1.0))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |g, x, _| {
                let u = C * (x + A * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * A * x * x);
                g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
            },
        )
    }

    // ---- reductions ----

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        let n = self.len();
        Tensor::record(&[self], vec![1], vec![s], Box::new(move |g| {
            vec![vec![g[0]; n]]
        }))
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let n = self.len();
        let s: f64 = self.data.iter().sum();
        Tensor::record(&[self], vec![1], vec![s / n as f64], Box::new(move |g| {
            vec![vec![g[0] / n as f64; n]]
        }))
    }

    // ---- shape ops (always copy) ----

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.data.as_ref().clone();
        Tensor::record(&[self], new_shape.to_vec(), data, Box::new(|g| vec![g.to_vec()]))
    }

    /// Swap two axes (copying).
    pub fn transpose(&self, ax1: usize, ax2: usize) -> Result<Tensor> {
        let rank = self.shape.len();
        if ax1 >= rank || ax2 >= rank {
            return Err(Error::InvalidInput {
                op: "transpose",
                msg: format!("axes ({ax1}, {ax2}) out of range for rank {rank}"),
            });
        }
        let mut out_shape = self.shape.clone();
        out_shape.swap(ax1, ax2);
        let out = permute_two(&self.data, &out_shape, ax1, ax2);
        let in_shape = self.shape.clone();
        Tensor::record(&[self], out_shape, out, Box::new(move |g| {
            vec![permute_two(g, &in_shape, ax1, ax2)]
        }))
    }

    /// Concatenate along `axis`. All parts must agree on the other extents.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let first = &parts[0].shape;
        let rank = first.len();
        if axis >= rank {
            return Err(Error::InvalidInput {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        for p in parts {
            if p.shape.len() != rank
                || p.shape
                    .iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let axis_lens: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let total_axis: usize = axis_lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut out = vec![0.0; outer * total_axis * inner];
        for o in 0..outer {
            let mut offset = 0;
            for (p, &alen) in parts.iter().zip(&axis_lens) {
                let src = &p.data[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = (o * total_axis + offset) * inner;
                out[dst_start..dst_start + alen * inner].copy_from_slice(src);
                offset += alen;
            }
        }
        let refs: Vec<&Tensor> = parts.to_vec();
        let axis_lens_b = axis_lens.clone();
        Tensor::record(&refs, out_shape, out, Box::new(move |g| {
            let mut grads: Vec<Vec<f64>> = axis_lens_b
                .iter()
                .map(|&alen| vec![0.0; outer * alen * inner])
                .collect();
            for o in 0..outer {
                let mut offset = 0;
                for (k, &alen) in axis_lens_b.iter().enumerate() {
                    let src_start = (o * total_axis + offset) * inner;
                    let dst = &mut grads[k][o * alen * inner..(o + 1) * alen * inner];
                    dst.copy_from_slice(&g[src_start..src_start + alen * inner]);
                    offset += alen;
                }
            }
            grads
        }))
    }

    /// Copy out `len` extents of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape.len();
        if axis >= rank || start + len > self.shape[axis] {
            return Err(Error::InvalidInput {
                op: "slice",
                msg: format!(
                    "slice [{start}, {}) on axis {axis} of shape {:?}",
                    start + len,
                    self.shape
                ),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let alen = self.shape[axis];
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * alen + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&self.data[src_start..src_start + len * inner]);
        }
        let total = self.len();
        Tensor::record(&[self], out_shape, out, Box::new(move |g| {
            let mut gi = vec![0.0; total];
            for o in 0..outer {
                let dst_start = (o * alen + start) * inner;
                gi[dst_start..dst_start + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![gi]
        }))
    }

    /// Gather rows of a 2-D tensor (with repetition); backward scatter-adds.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidInput {
                op: "select_rows",
                msg: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput {
                op: "select_rows",
                msg: format!("row index {bad} out of range for {rows} rows"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        let idx = indices.to_vec();
        Tensor::record(&[self], vec![indices.len(), cols], out, Box::new(move |g| {
            let mut gi = vec![0.0; rows * cols];
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    gi[i * cols + c] += g[k * cols + c];
                }
            }
            vec![gi]
        }))
    }

    // ---- linear algebra ----

    /// Matrix product. Supports [m,k]x[k,n] and batched [B,m,k]x[B,k,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        match (self.shape.len(), other.shape.len()) {
            (2, 2) => {
                let (m, k) = (self.shape[0], self.shape[1]);
                let (k2, n) = (other.shape[0], other.shape[1]);
                if k != k2 {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: self.shape.clone(),
                        rhs: other.shape.clone(),
                    });
                }
                let out = matmul_raw(&self.data, &other.data, m, k, n);
                let (a, b) = (self.data.clone(), other.data.clone());
                Tensor::record(&[self, other], vec![m, n], out, Box::new(move |g| {
                    vec![
                        matmul_nt(g, &b, m, n, k),
                        matmul_tn(&a, g, k, m, n),
                    ]
                }))
            }
            (3, 3) => {
                let (bsz, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
                let (b2, k2, n) = (other.shape[0], other.shape[1], other.shape[2]);
                if bsz != b2 || k != k2 {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: self.shape.clone(),
                        rhs: other.shape.clone(),
                    });
                }
                let mut out = vec![0.0; bsz * m * n];
                for i in 0..bsz {
                    let o = matmul_raw(
                        &self.data[i * m * k..(i + 1) * m * k],
                        &other.data[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                    out[i * m * n..(i + 1) * m * n].copy_from_slice(&o);
                }
                let (a, b) = (self.data.clone(), other.data.clone());
                Tensor::record(&[self, other], vec![bsz, m, n], out, Box::new(move |g| {
                    let mut ga = vec![0.0; bsz * m * k];
                    let mut gb = vec![0.0; bsz * k * n];
                    for i in 0..bsz {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let gai = matmul_nt(gs, &b[i * k * n..(i + 1) * k * n], m, n, k);
                        let gbi = matmul_tn(&a[i * m * k..(i + 1) * m * k], gs, k, m, n);
                        ga[i * m * k..(i + 1) * m * k].copy_from_slice(&gai);
                        gb[i * k * n..(i + 1) * k * n].copy_from_slice(&gbi);
                    }
                    vec![ga, gb]
                }))
            }
            _ => Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }),
        }
    }

    // ---- neural-net ops ----

    /// Softmax over the last axis, with max-subtraction. Rows containing
    /// -inf entries (from [`Tensor::masked_fill`]) get exactly zero there.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let d = *self.shape.last().ok_or(Error::EmptyInput("softmax_last"))?;
        let rows = self.len() / d;
        let mut out = vec![0.0; self.len()];
        for r in 0..rows {
            let x = &self.data[r * d..(r + 1) * d];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::InvalidInput {
                    op: "softmax_last",
                    msg: format!("row {r} is fully masked"),
                });
            }
            let mut s = 0.0;
            for (i, &v) in x.iter().enumerate() {
                let e = (v - mx).exp();
                out[r * d + i] = e;
                s += e;
            }
            for v in &mut out[r * d..(r + 1) * d] {
                *v /= s;
            }
        }
        let y = Rc::new(out.clone());
        Tensor::record(&[self], self.shape.clone(), out, Box::new(move |g| {
            let mut gi = vec![0.0; g.len()];
            for r in 0..rows {
                let ys = &y[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    gi[r * d + i] = (gs[i] - dot) * ys[i];
                }
            }
            vec![gi]
        }))
    }

    /// Write -inf wherever `mask` is true. The mask shape must be a suffix of
    /// the tensor shape (leading-axis broadcast). Gradient is zero at masked
    /// positions.
    pub fn masked_fill(&self, mask: &[bool], mask_shape: &[usize]) -> Result<Tensor> {
        if !is_suffix(mask_shape, &self.shape) || numel(mask_shape) != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: self.shape.clone(),
                rhs: mask_shape.to_vec(),
            });
        }
        let ml = mask.len();
        let out: Vec<f64> = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % ml] { f64::NEG_INFINITY } else { v })
            .collect();
        let mask_b = mask.to_vec();
        Tensor::record(&[self], self.shape.clone(), out, Box::new(move |g| {
            vec![g
                .iter()
                .enumerate()
                .map(|(i, &gv)| if mask_b[i % ml] { 0.0 } else { gv })
                .collect()]
        }))
    }

    /// Layer normalization over the last axis with learned scale and shift
    /// (both shaped [d]).
    pub fn layer_norm(&self, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape.last().ok_or(Error::EmptyInput("layer_norm"))?;
        if scale.shape() != [d] || shift.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: scale.shape.clone(),
            });
        }
        let rows = self.len() / d;
        let mut out = vec![0.0; self.len()];
        let mut xhat = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.data[r * d..(r + 1) * d];
            let mu: f64 = x.iter().sum::<f64>() / d as f64;
            let var: f64 = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..d {
                let xh = (x[i] - mu) * istd;
                xhat[r * d + i] = xh;
                out[r * d + i] = scale.data[i] * xh + shift.data[i];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gamma = scale.data.clone();
        let total = self.len();
        Tensor::record(
            &[self, scale, shift],
            self.shape.clone(),
            out,
            Box::new(move |g| {
                let mut gx = vec![0.0; total];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for i in 0..d {
                        let dxh = gs[i] * gamma[i];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[i];
                        ggamma[i] += gs[i] * xh[i];
                        gbeta[i] += gs[i];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for i in 0..d {
                        let dxh = gs[i] * gamma[i];
                        gx[r * d + i] = inv_std[r] * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
                    }
                }
                vec![gx, ggamma, gbeta]
            }),
        )
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn permute_two(data: &[f64], out_shape: &[usize], ax1: usize, ax2: usize) -> Vec<f64> {
    // `out_shape` is the shape of the RESULT; the input has ax1/ax2 swapped.
    let rank = out_shape.len();
    let mut in_shape = out_shape.to_vec();
    in_shape.swap(ax1, ax2);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let n = numel(out_shape);
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        // decompose flat into output coords
        let mut rem = flat;
        for i in (0..rank).rev() {
            coords[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        coords.swap(ax1, ax2);
        let src: usize = coords.iter().zip(&in_strides).map(|(c, s)| c * s).sum();
        *slot = data[src];
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// a[m,n] * b[k,n]^T -> [m,k]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut s = 0.0;
            for p in 0..n {
                s += a[i * n + p] * b[j * n + p];
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// a[m,k]^T * b[m,n] -> [k,n]
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}
