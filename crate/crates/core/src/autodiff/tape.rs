use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{AdError, Tensor};

/// A differentiable operation whose forward pass runs outside the tape.
///
/// The implementor keeps whatever forward state it needs and maps the
/// output gradient back onto each input (`None` for inputs that receive
/// no gradient).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sqrt(usize),
    Powf(usize, f64),
    Affine(usize, f64),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Slice { input: usize, axis: usize, start: usize, end: usize },
    Gather { input: usize, rows: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    SumAll(usize),
    MeanAll(usize),
    MaxAll(usize, usize),
    SumAxis(usize, usize),
    Conv2d { input: usize, weight: usize, bias: Option<usize>, geom: ConvGeom, batch: usize, out_ch: usize, cols: Vec<f64> },
    MaxPool { input: usize, argmax: Vec<usize> },
    MeanPool { input: usize, k: usize },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph eagerly; values are available as soon as an
/// op is applied and gradients come from [`Tape::gradient`] or
/// [`Tape::backward`].
///
/// A tape is single-threaded. Use one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

/// Gradients of a scalar root with respect to every node that needs one.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.idx]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    fn value(&self, idx: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[idx].value)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Registers the output of a [`CustomOp`] computed outside the tape.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let req = inputs.iter().any(|v| self.needs(v.idx));
        self.push(output, Op::Custom { inputs: inputs.iter().map(|v| v.idx).collect(), op }, req)
    }

    /// Concatenates along `axis`; every other dimension must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>, AdError> {
        let first = vars.first().ok_or(AdError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(AdError::InvalidShape { op: "concat", shape: base, reason: format!("axis {axis}") });
        }
        let mut total = 0;
        for v in vars {
            let s = v.shape();
            if s.len() != base.len() || (0..s.len()).any(|d| d != axis && s[d] != base[d]) {
                return Err(AdError::ShapeMismatch { op: "concat", left: base.clone(), right: s });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for v in vars {
            let t = v.value();
            let w = t.shape()[axis] * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset;
                data[dst..dst + w].copy_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let req = vars.iter().any(|v| self.needs(v.idx));
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat { inputs: vars.iter().map(|v| v.idx).collect(), axis },
            req,
        ))
    }

    /// Gradients of scalar `root` with respect to `wrt`.
    pub fn gradient(&self, root: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>, AdError> {
        let grads = self.backward(root)?;
        Ok(wrt.iter().map(|&v| grads.wrt(v)).collect())
    }

    /// Reverse sweep from a scalar root. Accumulators start from zero on
    /// every call.
    pub fn backward(&self, root: Var<'_>) -> Result<Grads, AdError> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.idx].value.shape().to_vec();
        if nodes[root.idx].value.len() != 1 {
            return Err(AdError::NonScalarRoot { shape: root_shape });
        }
        let n = root.idx + 1;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(Tensor::full(&root_shape, 1.0));
        for i in (0..n).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], idx: usize, g: Tensor) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn like(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape.to_vec(), data)
}

fn backprop(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[i].value;
    let val = |j: usize| -> &Tensor { &nodes[j].value };
    let unary = |grads: &mut [Option<Tensor>], a: usize, f: &dyn Fn(usize) -> f64| {
        if nodes[a].requires_grad {
            let d: Vec<f64> = (0..g.len()).map(f).collect();
            accumulate(grads, nodes, a, like(val(a).shape(), d));
        }
    };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (j, s) in [(*a, 1.0), (*b, sign)] {
                if nodes[j].requires_grad {
                    let map = kernels::broadcast_map(out.shape(), val(j).shape());
                    let mut r = kernels::reduce_to(g.data(), &map, val(j).len());
                    if s < 0.0 {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, nodes, j, like(val(j).shape(), r));
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let ma = kernels::broadcast_map(out.shape(), ta.shape());
            let mb = kernels::broadcast_map(out.shape(), tb.shape());
            if nodes[*a].requires_grad {
                let prod: Vec<f64> = (0..g.len()).map(|k| g.data()[k] * tb.data()[mb[k]]).collect();
                accumulate(grads, nodes, *a, like(ta.shape(), kernels::reduce_to(&prod, &ma, ta.len())));
            }
            if nodes[*b].requires_grad {
                let prod: Vec<f64> = (0..g.len()).map(|k| g.data()[k] * ta.data()[ma[k]]).collect();
                accumulate(grads, nodes, *b, like(tb.shape(), kernels::reduce_to(&prod, &mb, tb.len())));
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let ma = kernels::broadcast_map(out.shape(), ta.shape());
            let mb = kernels::broadcast_map(out.shape(), tb.shape());
            if nodes[*a].requires_grad {
                let q: Vec<f64> = (0..g.len()).map(|k| g.data()[k] / tb.data()[mb[k]]).collect();
                accumulate(grads, nodes, *a, like(ta.shape(), kernels::reduce_to(&q, &ma, ta.len())));
            }
            if nodes[*b].requires_grad {
                let q: Vec<f64> = (0..g.len())
                    .map(|k| -g.data()[k] * out.data()[k] / tb.data()[mb[k]])
                    .collect();
                accumulate(grads, nodes, *b, like(tb.shape(), kernels::reduce_to(&q, &mb, tb.len())));
            }
        }
        Op::Neg(a) => unary(grads, *a, &|k| -g.data()[k]),
        Op::Exp(a) => unary(grads, *a, &|k| g.data()[k] * out.data()[k]),
        Op::Log(a) => unary(grads, *a, &|k| g.data()[k] / val(*a).data()[k]),
        Op::Tanh(a) => unary(grads, *a, &|k| {
            let y = out.data()[k];
            g.data()[k] * (1.0 - y * y)
        }),
        Op::Sigmoid(a) => unary(grads, *a, &|k| {
            let y = out.data()[k];
            g.data()[k] * y * (1.0 - y)
        }),
        Op::Softplus(a) => unary(grads, *a, &|k| g.data()[k] * kernels::sigmoid(val(*a).data()[k])),
        Op::Sqrt(a) => unary(grads, *a, &|k| g.data()[k] * 0.5 / out.data()[k]),
        Op::Powf(a, p) => unary(grads, *a, &|k| g.data()[k] * p * val(*a).data()[k].powf(p - 1.0)),
        Op::Affine(a, s) => unary(grads, *a, &|k| g.data()[k] * s),
        Op::ClampMin(a, lo) => {
            unary(grads, *a, &|k| if val(*a).data()[k] > *lo { g.data()[k] } else { 0.0 })
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if nodes[*a].requires_grad {
                let mut d = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, tb.data(), true, 0.0, &mut d);
                accumulate(grads, nodes, *a, like(ta.shape(), d));
            }
            if nodes[*b].requires_grad {
                let mut d = vec![0.0; k * n];
                kernels::gemm(k, m, n, ta.data(), true, g.data(), false, 0.0, &mut d);
                accumulate(grads, nodes, *b, like(tb.shape(), d));
            }
        }
        Op::Transpose(a) => {
            let s = out.shape();
            let d = swap_last_two(g.data(), s[s.len() - 2], s[s.len() - 1]);
            accumulate(grads, nodes, *a, like(val(*a).shape(), d));
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, like(val(*a).shape(), g.data().to_vec())),
        Op::Gather { input, rows } => {
            let ts = val(*input).shape();
            let inner: usize = ts[1..].iter().product();
            let mut d = vec![0.0; val(*input).len()];
            for (k, &r) in rows.iter().enumerate() {
                for (dst, src) in d[r * inner..(r + 1) * inner].iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                    *dst += src;
                }
            }
            accumulate(grads, nodes, *input, like(ts, d));
        }
        Op::Slice { input, axis, start, end } => {
            let ts = val(*input).shape();
            let outer: usize = ts[..*axis].iter().product();
            let inner: usize = ts[axis + 1..].iter().product();
            let full = ts[*axis] * inner;
            let w = (end - start) * inner;
            let mut d = vec![0.0; val(*input).len()];
            for o in 0..outer {
                d[o * full + start * inner..o * full + start * inner + w]
                    .copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            accumulate(grads, nodes, *input, like(ts, d));
        }
        Op::Concat { inputs, axis } => {
            let os = out.shape();
            let outer: usize = os[..*axis].iter().product();
            let inner: usize = os[axis + 1..].iter().product();
            let total = os[*axis] * inner;
            let mut offset = 0;
            for &j in inputs {
                let w = val(j).shape()[*axis] * inner;
                if nodes[j].requires_grad {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + w]);
                    }
                    accumulate(grads, nodes, j, like(val(j).shape(), d));
                }
                offset += w;
            }
        }
        Op::Softmax(a) => {
            let cols = *out.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; g.len()];
            for r in 0..g.len() / cols {
                let row = r * cols..(r + 1) * cols;
                let dot: f64 = g.data()[row.clone()].iter().zip(&out.data()[row.clone()]).map(|(a, b)| a * b).sum();
                for k in row {
                    d[k] = out.data()[k] * (g.data()[k] - dot);
                }
            }
            accumulate(grads, nodes, *a, like(val(*a).shape(), d));
        }
        Op::LogSoftmax(a) => {
            let cols = *out.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; g.len()];
            for r in 0..g.len() / cols {
                let row = r * cols..(r + 1) * cols;
                let gs: f64 = g.data()[row.clone()].iter().sum();
                for k in row {
                    d[k] = g.data()[k] - out.data()[k].exp() * gs;
                }
            }
            accumulate(grads, nodes, *a, like(val(*a).shape(), d));
        }
        Op::LogSumExp(a) => {
            let x = val(*a);
            let cols = *x.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; x.len()];
            for r in 0..x.len() / cols {
                for k in r * cols..(r + 1) * cols {
                    d[k] = g.data()[r] * (x.data()[k] - out.data()[r]).exp();
                }
            }
            accumulate(grads, nodes, *a, like(x.shape(), d));
        }
        Op::SumAll(a) => {
            let x = val(*a);
            accumulate(grads, nodes, *a, Tensor::full(x.shape(), g.item()));
        }
        Op::MeanAll(a) => {
            let x = val(*a);
            accumulate(grads, nodes, *a, Tensor::full(x.shape(), g.item() / x.len() as f64));
        }
        Op::MaxAll(a, at) => {
            let x = val(*a);
            let mut d = Tensor::zeros(x.shape());
            d.data_mut()[*at] = g.item();
            accumulate(grads, nodes, *a, d);
        }
        Op::SumAxis(a, axis) => {
            let xs = val(*a).shape();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let n = xs[*axis];
            let mut d = vec![0.0; val(*a).len()];
            for o in 0..outer {
                for j in 0..n {
                    for k in 0..inner {
                        d[(o * n + j) * inner + k] = g.data()[o * inner + k];
                    }
                }
            }
            accumulate(grads, nodes, *a, like(xs, d));
        }
        Op::Conv2d { input, weight, bias, geom, batch, out_ch, cols } => {
            let npix = geom.out_h() * geom.out_w();
            let patch = geom.patch();
            let wt = val(*weight);
            if let Some(b) = bias {
                if nodes[*b].requires_grad {
                    let mut d = vec![0.0; *out_ch];
                    for n in 0..*batch {
                        for (o, dv) in d.iter_mut().enumerate() {
                            let s = (n * out_ch + o) * npix;
                            *dv += g.data()[s..s + npix].iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, nodes, *b, like(val(*b).shape(), d));
                }
            }
            if nodes[*weight].requires_grad {
                let mut d = vec![0.0; out_ch * patch];
                for n in 0..*batch {
                    let gn = &g.data()[n * out_ch * npix..(n + 1) * out_ch * npix];
                    let cn = &cols[n * patch * npix..(n + 1) * patch * npix];
                    kernels::gemm(*out_ch, npix, patch, gn, false, cn, true, 1.0, &mut d);
                }
                accumulate(grads, nodes, *weight, like(wt.shape(), d));
            }
            if nodes[*input].requires_grad {
                let img = geom.channels * geom.height * geom.width;
                let mut d = vec![0.0; batch * img];
                let mut dcols = vec![0.0; patch * npix];
                for n in 0..*batch {
                    let gn = &g.data()[n * out_ch * npix..(n + 1) * out_ch * npix];
                    kernels::gemm(patch, *out_ch, npix, wt.data(), true, gn, false, 0.0, &mut dcols);
                    kernels::col2im(&dcols, geom, &mut d[n * img..(n + 1) * img]);
                }
                accumulate(grads, nodes, *input, like(val(*input).shape(), d));
            }
        }
        Op::MaxPool { input, argmax } => {
            let mut d = vec![0.0; val(*input).len()];
            for (k, &src) in argmax.iter().enumerate() {
                d[src] += g.data()[k];
            }
            accumulate(grads, nodes, *input, like(val(*input).shape(), d));
        }
        Op::MeanPool { input, k } => {
            let xs = val(*input).shape();
            let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
            let (oh, ow) = (h / k, w / k);
            let planes = val(*input).len() / (h * w);
            let scale = 1.0 / (k * k) as f64;
            let mut d = vec![0.0; val(*input).len()];
            for p in 0..planes {
                for y in 0..oh * k {
                    for x in 0..ow * k {
                        d[(p * h + y) * w + x] = g.data()[(p * oh + y / k) * ow + x / k] * scale;
                    }
                }
            }
            accumulate(grads, nodes, *input, like(xs, d));
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&j| val(j)).collect();
            let gs = op.backward(&ins, out, g);
            for (&j, gj) in inputs.iter().zip(gs) {
                if let Some(gj) = gj {
                    debug_assert_eq!(gj.len(), val(j).len(), "custom op {} gradient size", op.name());
                    accumulate(grads, nodes, j, gj);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.idx)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let x = self.value();
        self.tape.push(x.map(f), op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool), AdError> {
        let (a, b) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| AdError::ShapeMismatch {
            op: name,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })?;
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_map(&shape, a.shape());
            let mb = kernels::broadcast_map(&shape, b.shape());
            ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect()
        };
        Ok((Tensor::from_parts(shape, data), self.requires_grad() || other.requires_grad()))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        let (t, r) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(t, Op::Add(self.idx, other.idx), r))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        let (t, r) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(t, Op::Sub(self.idx, other.idx), r))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        let (t, r) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(t, Op::Mul(self.idx, other.idx), r))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        let (t, r) = self.binary(other, "div", |a, b| a / b)?;
        Ok(self.tape.push(t, Op::Div(self.idx, other.idx), r))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), |x| -x)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.idx), f64::ln)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), kernels::sigmoid)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.idx), kernels::softplus)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.idx), f64::sqrt)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.idx, p), move |x| x.powf(p))
    }

    pub fn square(&self) -> Var<'t> {
        self.powf(2.0)
    }

    /// `x * s`.
    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Affine(self.idx, s), move |x| x * s)
    }

    /// `x + c`; the gradient passes through unchanged.
    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::Affine(self.idx, 1.0), move |x| x + c)
    }

    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.idx, lo), move |x| x.max(lo))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, AdError> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
        let r = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(self.idx, other.idx), r))
    }

    /// Swaps the last two axes; leading axes are treated as a batch.
    pub fn transpose(&self) -> Result<Var<'t>, AdError> {
        let a = self.value();
        if a.rank() < 2 {
            return Err(AdError::InvalidShape { op: "transpose", shape: a.shape().to_vec(), reason: "rank < 2".into() });
        }
        let mut shape = a.shape().to_vec();
        let n = shape.len();
        let (r, c) = (shape[n - 2], shape[n - 1]);
        let d = swap_last_two(a.data(), r, c);
        shape.swap(n - 2, n - 1);
        Ok(self.tape.push(Tensor::from_parts(shape, d), Op::Transpose(self.idx), self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, AdError> {
        let t = self.value().reshaped(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.idx), self.requires_grad()))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>, AdError> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(AdError::InvalidShape {
                op: "slice",
                shape: s.to_vec(),
                reason: format!("axis {axis} range {start}..{end}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis] * inner;
        let w = (end - start) * inner;
        let mut d = Vec::with_capacity(outer * w);
        for o in 0..outer {
            d.extend_from_slice(&a.data()[o * full + start * inner..o * full + start * inner + w]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        Ok(self.tape.push(
            Tensor::from_parts(shape, d),
            Op::Slice { input: self.idx, axis, start, end },
            self.requires_grad(),
        ))
    }

    /// Picks rows of the leading axis, repeats allowed.
    pub fn gather(&self, rows: &[usize]) -> Result<Var<'t>, AdError> {
        let a = self.value();
        let s = a.shape();
        if s.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(AdError::InvalidShape { op: "gather", shape: s.to_vec(), reason: format!("rows {rows:?}") });
        }
        let inner: usize = s[1..].iter().product();
        let mut d = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            d.extend_from_slice(&a.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        Ok(self.tape.push(Tensor::from_parts(shape, d), Op::Gather { input: self.idx, rows: rows.to_vec() }, self.requires_grad()))
    }

    /// Row `i` of the leading axis, with that axis dropped.
    pub fn index(&self, i: usize) -> Result<Var<'t>, AdError> {
        let s = self.shape();
        let row = self.slice(0, i, i + 1)?;
        row.reshape(&s[1..])
    }

    pub fn softmax(&self) -> Var<'t> {
        let a = self.value();
        let cols = *a.shape().last().unwrap_or(&1);
        let mut d = a.data().to_vec();
        for row in d.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.tape.push(like(a.shape(), d), Op::Softmax(self.idx), self.requires_grad())
    }

    pub fn log_softmax(&self) -> Var<'t> {
        let a = self.value();
        let cols = *a.shape().last().unwrap_or(&1);
        let mut d = a.data().to_vec();
        for row in d.chunks_mut(cols) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.tape.push(like(a.shape(), d), Op::LogSoftmax(self.idx), self.requires_grad())
    }

    /// Log-sum-exp over the last axis, which is removed.
    pub fn logsumexp(&self) -> Var<'t> {
        let a = self.value();
        let cols = *a.shape().last().unwrap_or(&1);
        let d: Vec<f64> = a.data().chunks(cols).map(kernels::log_sum_exp).collect();
        let shape = a.shape()[..a.rank().saturating_sub(1)].to_vec();
        self.tape.push(like(&shape, d), Op::LogSumExp(self.idx), self.requires_grad())
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.idx), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let m = a.sum() / a.len() as f64;
        self.tape.push(Tensor::scalar(m), Op::MeanAll(self.idx), self.requires_grad())
    }

    pub fn max(&self) -> Var<'t> {
        let a = self.value();
        let (at, m) = a
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        self.tape.push(Tensor::scalar(m), Op::MaxAll(self.idx, at), self.requires_grad())
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>, AdError> {
        let a = self.value();
        let s = a.shape();
        if axis >= s.len() {
            return Err(AdError::InvalidShape { op: "sum_axis", shape: s.to_vec(), reason: format!("axis {axis}") });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let mut d = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for k in 0..inner {
                    d[o * inner + k] += a.data()[(o * n + j) * inner + k];
                }
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        Ok(self.tape.push(Tensor::from_parts(shape, d), Op::SumAxis(self.idx, axis), self.requires_grad()))
    }

    /// 2D convolution of `[N, C, H, W]` with `[O, C, KH, KW]` weights.
    pub fn conv2d(&self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>, AdError> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(AdError::ShapeMismatch { op: "conv2d", left: xs.to_vec(), right: ws.to_vec() });
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(AdError::ShapeMismatch { op: "conv2d", left: xs.to_vec(), right: ws.to_vec() });
        }
        let out_ch = ws[0];
        if let Some(b) = bias {
            if b.shape() != [out_ch] {
                return Err(AdError::ShapeMismatch { op: "conv2d bias", left: ws.to_vec(), right: b.shape() });
            }
        }
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kh: ws[2], kw: ws[3], stride, pad };
        let batch = xs[0];
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let npix = oh * ow;
        let patch = geom.patch();
        let img = geom.channels * geom.height * geom.width;
        let mut cols = vec![0.0; batch * patch * npix];
        let mut out = vec![0.0; batch * out_ch * npix];
        let bias_val = bias.map(|b| b.value());
        for n in 0..batch {
            let cn = &mut cols[n * patch * npix..(n + 1) * patch * npix];
            kernels::im2col(&x.data()[n * img..(n + 1) * img], &geom, cn);
            let on = &mut out[n * out_ch * npix..(n + 1) * out_ch * npix];
            if let Some(bv) = &bias_val {
                for o in 0..out_ch {
                    on[o * npix..(o + 1) * npix].fill(bv.data()[o]);
                }
            }
            kernels::gemm(out_ch, patch, npix, w.data(), false, cn, false, 1.0, on);
        }
        let req = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        // Patch matrices are only needed for the weight gradient.
        let cols = if weight.requires_grad() { cols } else { Vec::new() };
        Ok(self.tape.push(
            Tensor::from_parts(vec![batch, out_ch, oh, ow], out),
            Op::Conv2d { input: self.idx, weight: weight.idx, bias: bias.map(|b| b.idx), geom, batch, out_ch, cols },
            req,
        ))
    }

    fn pool_dims(&self, k: usize, op: &'static str) -> Result<(Vec<usize>, usize, usize, usize), AdError> {
        let s = self.shape();
        if s.len() < 2 || k == 0 || s[s.len() - 2] < k || s[s.len() - 1] < k {
            return Err(AdError::InvalidShape { op, shape: s, reason: format!("kernel {k}") });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.len() / (h * w);
        Ok((s, h, w, planes))
    }

    /// Non-overlapping max pooling over the trailing two axes.
    pub fn max_pool2d(&self, k: usize) -> Result<Var<'t>, AdError> {
        let (s, h, w, planes) = self.pool_dims(k, "max_pool2d")?;
        let a = self.value();
        let (oh, ow) = (h / k, w / k);
        let mut d = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (0, f64::NEG_INFINITY);
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (p * h + oy * k + dy) * w + ox * k + dx;
                            if a.data()[i] > best.1 {
                                best = (i, a.data()[i]);
                            }
                        }
                    }
                    argmax.push(best.0);
                    d.push(best.1);
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.tape.push(Tensor::from_parts(shape, d), Op::MaxPool { input: self.idx, argmax }, self.requires_grad()))
    }

    /// Non-overlapping mean pooling over the trailing two axes.
    pub fn mean_pool2d(&self, k: usize) -> Result<Var<'t>, AdError> {
        let (s, h, w, planes) = self.pool_dims(k, "mean_pool2d")?;
        let a = self.value();
        let (oh, ow) = (h / k, w / k);
        let mut d = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh * k {
                for x in 0..ow * k {
                    d[(p * oh + y / k) * ow + x / k] += a.data()[(p * h + y) * w + x];
                }
            }
        }
        let scale = 1.0 / (k * k) as f64;
        d.iter_mut().for_each(|v| *v *= scale);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.tape.push(Tensor::from_parts(shape, d), Op::MeanPool { input: self.idx, k }, self.requires_grad()))
    }
}

/// Transposes each trailing `r x c` block.
fn swap_last_two(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut d = vec![0.0; data.len()];
    for (src, dst) in data.chunks(r * c).zip(d.chunks_mut(r * c)) {
        for x in 0..r {
            for y in 0..c {
                dst[y * r + x] = src[x * c + y];
            }
        }
    }
    d
}
