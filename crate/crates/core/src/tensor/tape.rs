use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        window: usize,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SquaredEuclidean(Var, Var),
    Xent {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Sum(Vec<Var>),
    SumAll(Var),
    Hinge {
        positive: Var,
        negative: Var,
        active: bool,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    // `None` for parameter leaves, whose values stay in the store.
    value: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation over a borrowed [`ParamStore`].
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<'p, T: Real = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(data), _) => data,
            (None, Op::Param(id)) => self.params.get(*id).data(),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives gradient.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Some(tensor.into_data()),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: None,
            op: Op::Param(id),
            requires_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Selects rows of a 2-D table; repeated ids are allowed.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be 2-D, got {shape:?}")));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no row ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), dim], out, op, &[table]))
    }

    /// Concatenates along the last axis. Inputs are all vectors, or all
    /// matrices with the same number of rows.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = self.shape(first).len();
        if rank > 2 {
            return Err(Error::shape("concat", "only vectors and matrices are supported"));
        }
        let rows = if rank == 2 { self.shape(first)[0] } else { 1 };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == rank && (rank == 1 || s[0] == rows);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} and {:?}", self.shape(first), s),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        Ok(self.push(shape, out, Op::Concat(inputs.to_vec()), inputs))
    }

    /// Valid 1-D convolution over time: `input` is `[L, D]`, `kernel` is
    /// `[w, D, F]`, `bias` is `[F]`; the result is `[L - w + 1, F]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ishape, kshape, bshape) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if ishape.len() != 2 || kshape.len() != 3 || bshape.len() != 1 {
            return Err(Error::shape(
                "conv1d",
                format!("expected [L,D], [w,D,F], [F]; got {ishape:?}, {kshape:?}, {bshape:?}"),
            ));
        }
        let (len, dim) = (ishape[0], ishape[1]);
        let (window, kdim, filters) = (kshape[0], kshape[1], kshape[2]);
        if kdim != dim || bshape[0] != filters {
            return Err(Error::shape(
                "conv1d",
                format!("input {ishape:?} incompatible with kernel {kshape:?} / bias {bshape:?}"),
            ));
        }
        if len < window {
            return Err(Error::SequenceShorterThanWindow { len, window });
        }
        let out_len = len - window + 1;
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let mut out = Vec::with_capacity(out_len * filters);
        for _ in 0..out_len {
            out.extend_from_slice(b);
        }
        for t in 0..out_len {
            let row = &mut out[t * filters..(t + 1) * filters];
            for j in 0..window {
                let xs = &x[(t + j) * dim..(t + j + 1) * dim];
                for (d, &xv) in xs.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    let kr = &k[(j * dim + d) * filters..(j * dim + d + 1) * filters];
                    for (o, &kv) in row.iter_mut().zip(kr) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let op = Op::Conv1d {
            input,
            kernel,
            bias,
            window,
        };
        Ok(self.push(vec![out_len, filters], out, op, &[input, kernel, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x), &[x])
    }

    /// Max over the time axis of `[L, F]`. Ties resolve to the earliest step.
    pub fn maxpool_over_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::shape(
                "maxpool_over_time",
                format!("expected [L,F], got {shape:?}"),
            ));
        }
        let (len, ch) = (shape[0], shape[1]);
        if len == 0 {
            return Err(Error::EmptyPooling);
        }
        let data = self.value(x);
        let mut out = data[..ch].to_vec();
        let mut argmax = vec![0usize; ch];
        for t in 1..len {
            for f in 0..ch {
                let v = data[t * ch + f];
                if v > out[f] {
                    out[f] = v;
                    argmax[f] = t;
                }
            }
        }
        Ok(self.push(vec![ch], out, Op::MaxPool { input: x, argmax }, &[x]))
    }

    /// `input · weight + bias` for a vector `[In]` or a batch `[B, In]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ishape, wshape, bshape) = (self.shape(input), self.shape(weight), self.shape(bias));
        if wshape.len() != 2 || bshape.len() != 1 || ishape.is_empty() || ishape.len() > 2 {
            return Err(Error::shape(
                "linear",
                format!("expected [In]|[B,In], [In,Out], [Out]; got {ishape:?}, {wshape:?}, {bshape:?}"),
            ));
        }
        let (fan_in, fan_out) = (wshape[0], wshape[1]);
        let batch = if ishape.len() == 2 { ishape[0] } else { 1 };
        if *ishape.last().unwrap() != fan_in || bshape[0] != fan_out {
            return Err(Error::shape(
                "linear",
                format!("input {ishape:?} incompatible with weight {wshape:?} / bias {bshape:?}"),
            ));
        }
        let out_shape = if ishape.len() == 2 {
            vec![batch, fan_out]
        } else {
            vec![fan_out]
        };
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let mut out = Vec::with_capacity(batch * fan_out);
        for r in 0..batch {
            let start = out.len();
            out.extend_from_slice(b);
            let row = &mut out[start..];
            for (i, &xv) in x[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                for (o, &wv) in row.iter_mut().zip(&w[i * fan_out..(i + 1) * fan_out]) {
                    *o += xv * wv;
                }
            }
        }
        let op = Op::Linear { input, weight, bias };
        Ok(self.push(out_shape, out, op, &[input, weight, bias]))
    }

    /// `Σ_d (a_d - b_d)²` as a one-element tensor.
    pub fn squared_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "squared_euclidean",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = squared_distance(self.value(a), self.value(b));
        Ok(self.push(vec![1], vec![d], Op::SquaredEuclidean(a, b), &[a, b]))
    }

    /// Cross-entropy of `softmax(logits)` against `label`, computed with
    /// max subtraction.
    pub fn log_softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 1 {
            return Err(Error::shape(
                "log_softmax_xent",
                format!("logits must be a vector, got {shape:?}"),
            ));
        }
        let n = shape[0];
        if label >= n {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        let l = self.value(logits);
        let (lse, probs) = log_sum_exp_and_softmax(l);
        let loss = lse - l[label];
        let op = Op::Xent { logits, label, probs };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, factor), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Elementwise sum of equally shaped inputs.
    pub fn sum(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("sum", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![T::zero(); shape.iter().product()];
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("sum", format!("{shape:?} vs {:?}", self.shape(v))));
            }
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o += x;
            }
        }
        Ok(self.push(shape, out, Op::Sum(inputs.to_vec()), inputs))
    }

    /// Elementwise mean of equally shaped inputs.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let total = self.sum(inputs)?;
        let n = T::from_usize(inputs.len()).expect("count representable");
        Ok(self.scale(total, T::one() / n))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    /// `max(0, margin + positive - negative)` on one-element inputs.
    pub fn hinge(&mut self, margin: T, positive: Var, negative: Var) -> Result<Var> {
        if self.shape(positive) != [1] || self.shape(negative) != [1] {
            return Err(Error::shape("hinge", "operands must be scalars"));
        }
        let z = margin + self.scalar(positive) - self.scalar(negative);
        let active = z > T::zero();
        let out = if active { z } else { T::zero() };
        let op = Op::Hinge {
            positive,
            negative,
            active,
        };
        Ok(self.push(vec![1], vec![out], op, &[positive, negative]))
    }

    /// Reverse sweep from a scalar `loss`, returning d loss / d param for
    /// every parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut out = Gradients::with_len(self.params.len());
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.add(*id, &g),
                Op::Gather { table, ids } => {
                    let dim = node.shape[1];
                    if let Some(acc) = self.slot(&mut grads, *table) {
                        for (r, &row) in ids.iter().enumerate() {
                            let dst = &mut acc[row * dim..(row + 1) * dim];
                            for (a, &x) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                                *a += x;
                            }
                        }
                    }
                }
                Op::Concat(inputs) => {
                    let rows = if node.shape.len() == 2 { node.shape[0] } else { 1 };
                    let total = *node.shape.last().unwrap();
                    let mut offset = 0;
                    for &v in inputs {
                        let w = *self.shape(v).last().unwrap();
                        if let Some(acc) = self.slot(&mut grads, v) {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                for (a, &x) in acc[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *a += x;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::Conv1d {
                    input,
                    kernel,
                    bias,
                    window,
                } => self.conv1d_backward(&mut grads, &g, &node.shape, *input, *kernel, *bias, *window),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    if let Some(acc) = self.slot(&mut grads, *x) {
                        for ((a, &gi), &v) in acc.iter_mut().zip(&g).zip(xv) {
                            if v > T::zero() {
                                *a += gi;
                            }
                        }
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let ch = node.shape[0];
                    if let Some(acc) = self.slot(&mut grads, *input) {
                        for (f, &t) in argmax.iter().enumerate() {
                            acc[t * ch + f] += g[f];
                        }
                    }
                }
                Op::Linear { input, weight, bias } => self.linear_backward(&mut grads, &g, *input, *weight, *bias),
                Op::SquaredEuclidean(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let two_g = T::lit(2.0) * g[0];
                    if let Some(acc) = self.slot(&mut grads, *a) {
                        for ((o, &x), &y) in acc.iter_mut().zip(av).zip(bv) {
                            *o += two_g * (x - y);
                        }
                    }
                    if let Some(acc) = self.slot(&mut grads, *b) {
                        for ((o, &x), &y) in acc.iter_mut().zip(av).zip(bv) {
                            *o -= two_g * (x - y);
                        }
                    }
                }
                Op::Xent { logits, label, probs } => {
                    if let Some(acc) = self.slot(&mut grads, *logits) {
                        for (k, (a, &p)) in acc.iter_mut().zip(probs).enumerate() {
                            let target = if k == *label { T::one() } else { T::zero() };
                            *a += g[0] * (p - target);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(acc) = self.slot(&mut grads, v) {
                            for (o, &x) in acc.iter_mut().zip(&g) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    if let Some(acc) = self.slot(&mut grads, *x) {
                        for (o, &gi) in acc.iter_mut().zip(&g) {
                            *o += gi * *factor;
                        }
                    }
                }
                Op::Sum(inputs) => {
                    for &v in inputs {
                        if let Some(acc) = self.slot(&mut grads, v) {
                            for (o, &x) in acc.iter_mut().zip(&g) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    if let Some(acc) = self.slot(&mut grads, *x) {
                        acc.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
                Op::Hinge {
                    positive,
                    negative,
                    active,
                } => {
                    if *active {
                        if let Some(acc) = self.slot(&mut grads, *positive) {
                            acc[0] += g[0];
                        }
                        if let Some(acc) = self.slot(&mut grads, *negative) {
                            acc[0] -= g[0];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.shape.iter().product();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        out_shape: &[usize],
        input: Var,
        kernel: Var,
        bias: Var,
        window: usize,
    ) {
        let (out_len, filters) = (out_shape[0], out_shape[1]);
        let dim = self.shape(input)[1];
        let (x, k) = (self.value(input), self.value(kernel));
        if let Some(acc) = self.slot(grads, bias) {
            for t in 0..out_len {
                for (a, &gv) in acc.iter_mut().zip(&g[t * filters..(t + 1) * filters]) {
                    *a += gv;
                }
            }
        }
        if let Some(acc) = self.slot(grads, kernel) {
            for t in 0..out_len {
                let gt = &g[t * filters..(t + 1) * filters];
                for j in 0..window {
                    for d in 0..dim {
                        let xv = x[(t + j) * dim + d];
                        if xv == T::zero() {
                            continue;
                        }
                        let kr = &mut acc[(j * dim + d) * filters..(j * dim + d + 1) * filters];
                        for (a, &gv) in kr.iter_mut().zip(gt) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
        if let Some(acc) = self.slot(grads, input) {
            for t in 0..out_len {
                let gt = &g[t * filters..(t + 1) * filters];
                for j in 0..window {
                    for d in 0..dim {
                        let kr = &k[(j * dim + d) * filters..(j * dim + d + 1) * filters];
                        let s: T = kr.iter().zip(gt).map(|(&kv, &gv)| kv * gv).sum();
                        acc[(t + j) * dim + d] += s;
                    }
                }
            }
        }
    }

    fn linear_backward(&self, grads: &mut [Option<Vec<T>>], g: &[T], input: Var, weight: Var, bias: Var) {
        let wshape = self.shape(weight);
        let (fan_in, fan_out) = (wshape[0], wshape[1]);
        let batch = g.len() / fan_out;
        let (x, w) = (self.value(input), self.value(weight));
        if let Some(acc) = self.slot(grads, bias) {
            for r in 0..batch {
                for (a, &gv) in acc.iter_mut().zip(&g[r * fan_out..(r + 1) * fan_out]) {
                    *a += gv;
                }
            }
        }
        if let Some(acc) = self.slot(grads, weight) {
            for r in 0..batch {
                let gr = &g[r * fan_out..(r + 1) * fan_out];
                for i in 0..fan_in {
                    let xv = x[r * fan_in + i];
                    for (a, &gv) in acc[i * fan_out..(i + 1) * fan_out].iter_mut().zip(gr) {
                        *a += xv * gv;
                    }
                }
            }
        }
        if let Some(acc) = self.slot(grads, input) {
            for r in 0..batch {
                let gr = &g[r * fan_out..(r + 1) * fan_out];
                for i in 0..fan_in {
                    let s: T = w[i * fan_out..(i + 1) * fan_out]
                        .iter()
                        .zip(gr)
                        .map(|(&wv, &gv)| wv * gv)
                        .sum();
                    acc[r * fan_in + i] += s;
                }
            }
        }
    }
}

pub(crate) fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Returns `(log Σ exp(l), softmax(l))` using max subtraction.
pub(crate) fn log_sum_exp_and_softmax<T: Real>(logits: &[T]) -> (T, Vec<T>) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    let lse = m + z.ln();
    (lse, exps.into_iter().map(|e| e / z).collect())
}
