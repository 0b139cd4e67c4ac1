//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node to the [`Graph`]; node indices are a
//! topological order by construction, so [`Graph::backward`] is a single
//! reverse sweep that visits each node once. Gradients arriving from several
//! consumers are summed.

use crate::error::{EngineError, Result};
use crate::tensor::{
    broadcast_map, broadcast_shapes, gemm_abt_acc, gemm_acc, gemm_atb_acc, numel, split_axis,
    Real, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output length `ceil(L / stride)`; the odd padding element goes right.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl Conv1dSpec {
    pub fn new(stride: usize, padding: Padding, groups: usize) -> Self {
        Self { stride, padding, groups }
    }
}

/// Output length and left padding of a 1-D convolution.
pub fn conv1d_output_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(EngineError::invalid("conv1d", "stride must be positive"));
    }
    if kernel == 0 {
        return Err(EngineError::invalid("conv1d", "kernel must be nonempty"));
    }
    match padding {
        Padding::Valid => {
            if kernel > len {
                return Err(EngineError::invalid(
                    "conv1d",
                    format!("kernel {kernel} longer than input {len}"),
                ));
            }
            Ok(((len - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            Ok((out, total / 2))
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary<F> {
    Neg,
    Scale(F),
    AddScalar(F),
    Powf(F),
    Exp,
    Ln(F),
    Abs,
    Relu,
    LeakyRelu(F),
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Unary { x: Var, kind: Unary<F> },
    Binary { a: Var, b: Var, kind: Binary },
    Matmul { a: Var, b: Var },
    SumAxes { x: Var, keep_shape: Vec<usize> },
    Softmax { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Conv1d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad_left: usize, groups: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    PairwiseL1 { p: Var, a: Var },
    Grl { x: Var, coefficient: F },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// `None` when the node does not influence the loss or carries no grad.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

struct BatchLayout {
    batch: usize,
    a_step: usize,
    b_step: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<BatchLayout> {
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(EngineError::shape("matmul", format!("{a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let n = b[b.len() - 1];
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let (lead, a_step, b_step) = if lead_a == lead_b {
        (lead_a, m * k, k * n)
    } else if lead_b.is_empty() {
        (lead_a, m * k, 0)
    } else if lead_a.is_empty() {
        (lead_b, 0, k * n)
    } else {
        return Err(EngineError::shape("matmul", format!("batch dims {a:?} x {b:?}")));
    };
    let mut out_shape = lead.to_vec();
    out_shape.extend([m, n]);
    Ok(BatchLayout { batch: numel(lead), a_step, b_step, m, k, n, out_shape })
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(EngineError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push("variable", value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    fn unary(&mut self, name: &'static str, x: Var, kind: Unary<F>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let value = match kind {
            Unary::Neg => xv.map(|v| -v),
            Unary::Scale(c) => xv.map(|v| v * c),
            Unary::AddScalar(c) => xv.map(|v| v + c),
            Unary::Powf(p) => xv.map(|v| v.powf(p)),
            Unary::Exp => xv.map(F::exp),
            Unary::Ln(floor) => xv.map(|v| v.max(floor).ln()),
            Unary::Abs => xv.map(F::abs),
            Unary::Relu => xv.map(|v| v.max(F::zero())),
            Unary::LeakyRelu(s) => xv.map(|v| if v >= F::zero() { v } else { s * v }),
            Unary::Sigmoid => xv.map(|v| F::one() / (F::one() + (-v).exp())),
            Unary::Tanh => xv.map(F::tanh),
        };
        let rg = self.rg(&[x]);
        self.push(name, value, Op::Unary { x, kind }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, Unary::Neg)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        self.unary("scale", x, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Result<Var> {
        self.unary("add_scalar", x, Unary::AddScalar(c))
    }

    pub fn powf(&mut self, x: Var, p: F) -> Result<Var> {
        self.unary("powf", x, Unary::Powf(p))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Unary::Exp)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, floor: F) -> Result<Var> {
        self.unary("ln", x, Unary::Ln(floor))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Unary::Abs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        self.unary("leaky_relu", x, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Unary::Tanh)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let f = |x: F, y: F| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if av.shape() == bv.shape() {
            av.zip_map(bv, f)
        } else {
            let shape = broadcast_shapes(av.shape(), bv.shape()).ok_or_else(|| {
                EngineError::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape()))
            })?;
            let ma = broadcast_map(av.shape(), &shape);
            let mb = broadcast_map(bv.shape(), &shape);
            let (ad, bd) = (av.data(), bv.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(ad[i], bd[j])).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[a, b]);
        self.push(name, value, Op::Binary { a, b, kind }, rg)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Binary::Div)
    }

    /// Batched matrix product `[..., M, K] x [..., K, N]`. Either side may be
    /// a plain matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let l = matmul_layout(av.shape(), bv.shape())?;
        let mut out = vec![F::zero(); numel(&l.out_shape)];
        for bi in 0..l.batch {
            gemm_acc(
                &av.data()[bi * l.a_step..bi * l.a_step + l.m * l.k],
                &bv.data()[bi * l.b_step..bi * l.b_step + l.k * l.n],
                &mut out[bi * l.m * l.n..(bi + 1) * l.m * l.n],
                l.m,
                l.k,
                l.n,
            );
        }
        let value = Tensor::new(l.out_shape, out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", value, Op::Matmul { a, b }, rg)
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let rank = xv.rank();
        if axes.iter().any(|&a| a >= rank) {
            return Err(EngineError::invalid("sum_axes", format!("{axes:?} for rank {rank}")));
        }
        let mut keep_shape = xv.shape().to_vec();
        for &a in axes {
            keep_shape[a] = 1;
        }
        let map = broadcast_map(&keep_shape, xv.shape());
        let mut out = vec![F::zero(); numel(&keep_shape)];
        for (&j, &v) in map.iter().zip(xv.data()) {
            out[j] = out[j] + v;
        }
        let shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            xv.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        self.push("sum_axes", value, Op::SumAxes { x, keep_shape }, rg)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x).get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes, keepdim)?;
        self.scale(s, F::one() / F::from_usize_lossy(count))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes, false)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = *xv.shape().last().ok_or_else(|| EngineError::invalid("softmax", "rank 0"))?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("softmax", value, Op::Softmax { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, Op::Reshape { x }, rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.permute(axes)?;
        let rg = self.rg(&[x]);
        self.push("permute", value, Op::Permute { x, axes: axes.to_vec() }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(EngineError::invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.nodes[x.0].value.slice_axis(axis, start, len)?;
        let rg = self.rg(&[x]);
        self.push("slice", value, Op::Slice { x, axis, start }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = self.rg(parts);
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Grouped 1-D convolution of `x: [N, C_in, L]` with
    /// `w: [C_out, C_in / groups, ks]`. Output channel `o` reads input
    /// group `o / (C_out / groups)`. Depth-wise convolution is
    /// `groups == C_in`, in which case each input channel owns
    /// `C_out / C_in` consecutive output channels.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv1dSpec) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(EngineError::shape("conv1d", format!("x {xs:?}, w {ws:?}")));
        }
        let (n, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, c_in_g, ks) = (ws[0], ws[1], ws[2]);
        let g = spec.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 || c_in / g != c_in_g {
            return Err(EngineError::shape(
                "conv1d",
                format!("groups {g} incompatible with x {xs:?}, w {ws:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].value.shape() != [c_out] {
                return Err(EngineError::shape("conv1d", "bias must be [C_out]"));
            }
        }
        let (out_len, pad_left) = conv1d_output_len(len, ks, spec.stride, spec.padding)?;
        let c_out_g = c_out / g;
        let (xd, wd) = (xv.data(), wv.data());
        let bd = bias.map(|b| self.nodes[b.0].value.data());
        let mut out = vec![F::zero(); n * c_out * out_len];
        for ni in 0..n {
            for co in 0..c_out {
                let grp = co / c_out_g;
                let b0 = bd.map_or(F::zero(), |b| b[co]);
                let orow = &mut out[(ni * c_out + co) * out_len..(ni * c_out + co + 1) * out_len];
                orow.iter_mut().for_each(|o| *o = b0);
                for cl in 0..c_in_g {
                    let ci = grp * c_in_g + cl;
                    let xrow = &xd[(ni * c_in + ci) * len..(ni * c_in + ci + 1) * len];
                    let wrow = &wd[(co * c_in_g + cl) * ks..(co * c_in_g + cl + 1) * ks];
                    for (o, ov) in orow.iter_mut().enumerate() {
                        let base = (o * spec.stride) as isize - pad_left as isize;
                        let mut acc = F::zero();
                        for (k, &wk) in wrow.iter().enumerate() {
                            let p = base + k as isize;
                            if p >= 0 && (p as usize) < len {
                                acc = acc + wk * xrow[p as usize];
                            }
                        }
                        *ov = *ov + acc;
                    }
                }
            }
        }
        let value = Tensor::new([n, c_out, out_len], out)?;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            "conv1d",
            value,
            Op::Conv1d { x, w, bias, stride: spec.stride, pad_left, groups: g },
            rg,
        )
    }

    /// Non-overlapping max pooling over the last axis; the trailing
    /// `L mod window` elements are dropped.
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let len = *xv.shape().last().ok_or_else(|| EngineError::invalid("maxpool1d", "rank 0"))?;
        if window == 0 {
            return Err(EngineError::invalid("maxpool1d", "window must be positive"));
        }
        if window > len {
            return Err(EngineError::invalid(
                "maxpool1d",
                format!("window {window} exceeds length {len}; output would be empty"),
            ));
        }
        let out_len = len / window;
        let rows = xv.len() / len;
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for o in 0..out_len {
                let base = r * len + o * window;
                let mut best = base;
                for p in base + 1..base + window {
                    if xv.data()[p] > xv.data()[best] {
                        best = p;
                    }
                }
                out.push(xv.data()[best]);
                argmax.push(best);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        self.push("maxpool1d", value, Op::MaxPool { x, argmax }, rg)
    }

    /// Pairwise weighted L1 scores: for `p: [N, V, F]` and `a: [F, 1]`,
    /// `out[n, i, j] = sum_f |p[n,i,f] - p[n,j,f]| * a[f]`.
    /// Equivalent to broadcasting the difference to `[N, V, V, F]`, taking
    /// `abs` and multiplying by `a`, without materializing the 4-D tensor.
    pub fn pairwise_l1(&mut self, p: Var, a: Var) -> Result<Var> {
        let pv = &self.nodes[p.0].value;
        let av = &self.nodes[a.0].value;
        let ps = pv.shape();
        if ps.len() != 3 || av.len() != ps[2] || !(av.rank() == 1 || av.shape() == [ps[2], 1]) {
            return Err(EngineError::shape(
                "pairwise_l1",
                format!("p {ps:?}, a {:?}", av.shape()),
            ));
        }
        let (n, v, f) = (ps[0], ps[1], ps[2]);
        let (pd, ad) = (pv.data(), av.data());
        let mut out = vec![F::zero(); n * v * v];
        for ni in 0..n {
            for i in 0..v {
                let pi = &pd[(ni * v + i) * f..(ni * v + i + 1) * f];
                for j in 0..v {
                    let pj = &pd[(ni * v + j) * f..(ni * v + j + 1) * f];
                    out[(ni * v + i) * v + j] =
                        pi.iter().zip(pj).zip(ad).map(|((&x, &y), &w)| (x - y).abs() * w).sum();
                }
            }
        }
        let value = Tensor::new([n, v, v], out)?;
        let rg = self.rg(&[p, a]);
        self.push("pairwise_l1", value, Op::PairwiseL1 { p, a }, rg)
    }

    /// Gradient reversal: identity forward, `-coefficient * g` backward.
    pub fn grl(&mut self, x: Var, coefficient: F) -> Result<Var> {
        if coefficient < F::zero() {
            return Err(EngineError::invalid("grl", "coefficient must be nonnegative"));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(&[x]);
        self.push("grl", value, Op::Grl { x, coefficient }, rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(EngineError::shape(
                "backward",
                format!("loss must hold one value, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (target, contrib) in self.local_backward(node, &g)? {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary { x, kind } => {
                let xv = val(*x);
                let y = &node.value;
                let gd = g.data();
                let data: Vec<F> = match *kind {
                    Unary::Neg => gd.iter().map(|&v| -v).collect(),
                    Unary::Scale(c) => gd.iter().map(|&v| v * c).collect(),
                    Unary::AddScalar(_) => gd.to_vec(),
                    Unary::Powf(p) => gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &xv)| gv * p * xv.powf(p - F::one()))
                        .collect(),
                    Unary::Exp => gd.iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect(),
                    Unary::Ln(floor) => gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &xv)| if xv > floor { gv / xv } else { F::zero() })
                        .collect(),
                    Unary::Abs => gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &xv)| {
                            if xv > F::zero() {
                                gv
                            } else if xv < F::zero() {
                                -gv
                            } else {
                                F::zero()
                            }
                        })
                        .collect(),
                    Unary::Relu => gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect(),
                    Unary::LeakyRelu(s) => gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &xv)| if xv >= F::zero() { gv } else { gv * s })
                        .collect(),
                    Unary::Sigmoid => gd
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                        .collect(),
                    Unary::Tanh => gd
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (F::one() - yv * yv))
                        .collect(),
                };
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (val(*a), val(*b));
                let shape = node.value.shape();
                let same = av.shape() == shape && bv.shape() == shape;
                let ma = if same { None } else { Some(broadcast_map(av.shape(), shape)) };
                let mb = if same { None } else { Some(broadcast_map(bv.shape(), shape)) };
                let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                if needs(*a) {
                    let mut ga = vec![F::zero(); av.len()];
                    for (i, &gv) in gd.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gv,
                            Binary::Mul => gv * bd[ib(i)],
                            Binary::Div => gv / bd[ib(i)],
                        };
                        ga[ia(i)] = ga[ia(i)] + d;
                    }
                    out.push((*a, Tensor::new(av.shape().to_vec(), ga)?));
                }
                if needs(*b) {
                    let mut gb = vec![F::zero(); bv.len()];
                    for (i, &gv) in gd.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gv,
                            Binary::Sub => -gv,
                            Binary::Mul => gv * ad[ia(i)],
                            Binary::Div => {
                                let y = bd[ib(i)];
                                -gv * ad[ia(i)] / (y * y)
                            }
                        };
                        gb[ib(i)] = gb[ib(i)] + d;
                    }
                    out.push((*b, Tensor::new(bv.shape().to_vec(), gb)?));
                }
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let l = matmul_layout(av.shape(), bv.shape())?;
                let gd = g.data();
                if needs(*a) {
                    let mut ga = vec![F::zero(); av.len()];
                    for bi in 0..l.batch {
                        gemm_abt_acc(
                            &gd[bi * l.m * l.n..(bi + 1) * l.m * l.n],
                            &bv.data()[bi * l.b_step..bi * l.b_step + l.k * l.n],
                            &mut ga[bi * l.a_step..bi * l.a_step + l.m * l.k],
                            l.m,
                            l.k,
                            l.n,
                        );
                    }
                    out.push((*a, Tensor::new(av.shape().to_vec(), ga)?));
                }
                if needs(*b) {
                    let mut gb = vec![F::zero(); bv.len()];
                    for bi in 0..l.batch {
                        gemm_atb_acc(
                            &av.data()[bi * l.a_step..bi * l.a_step + l.m * l.k],
                            &gd[bi * l.m * l.n..(bi + 1) * l.m * l.n],
                            &mut gb[bi * l.b_step..bi * l.b_step + l.k * l.n],
                            l.m,
                            l.k,
                            l.n,
                        );
                    }
                    out.push((*b, Tensor::new(bv.shape().to_vec(), gb)?));
                }
            }
            Op::SumAxes { x, keep_shape } => {
                let xv = val(*x);
                let map = broadcast_map(keep_shape, xv.shape());
                let data = map.iter().map(|&j| g.data()[j]).collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut data = vec![F::zero(); y.len()];
                for ((row, yr), gr) in
                    data.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n))
                {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in row.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::Reshape { x } => {
                out.push((*x, g.clone().reshape(val(*x).shape().to_vec())?));
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                out.push((*x, g.permute(&inv)?));
            }
            Op::Slice { x, axis, start } => {
                let xv = val(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let len = g.shape()[*axis];
                let mut data = vec![F::zero(); xv.len()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if needs(p) {
                        out.push((p, g.slice_axis(*axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Conv1d { x, w, bias, stride, pad_left, groups } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, c_in, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (c_out, c_in_g, ks) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let out_len = g.shape()[2];
                let c_out_g = c_out / groups;
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let mut gx = vec![F::zero(); if needs(*x) { xv.len() } else { 0 }];
                let mut gw = vec![F::zero(); if needs(*w) { wv.len() } else { 0 }];
                for ni in 0..n {
                    for co in 0..c_out {
                        let grp = co / c_out_g;
                        let grow = &gd[(ni * c_out + co) * out_len..(ni * c_out + co + 1) * out_len];
                        for cl in 0..c_in_g {
                            let ci = grp * c_in_g + cl;
                            let xoff = (ni * c_in + ci) * len;
                            let woff = (co * c_in_g + cl) * ks;
                            for (o, &gv) in grow.iter().enumerate() {
                                if gv == F::zero() {
                                    continue;
                                }
                                let base = (o * stride) as isize - *pad_left as isize;
                                for k in 0..ks {
                                    let p = base + k as isize;
                                    if p < 0 || p as usize >= len {
                                        continue;
                                    }
                                    let p = p as usize;
                                    if !gw.is_empty() {
                                        gw[woff + k] = gw[woff + k] + gv * xd[xoff + p];
                                    }
                                    if !gx.is_empty() {
                                        gx[xoff + p] = gx[xoff + p] + gv * wd[woff + k];
                                    }
                                }
                            }
                        }
                    }
                }
                if needs(*x) {
                    out.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                }
                if needs(*w) {
                    out.push((*w, Tensor::new(wv.shape().to_vec(), gw)?));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let mut gb = vec![F::zero(); c_out];
                        for (r, row) in gd.chunks(out_len).enumerate() {
                            let co = r % c_out;
                            gb[co] = gb[co] + row.iter().copied().sum();
                        }
                        out.push((*b, Tensor::new([c_out], gb)?));
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let xv = val(*x);
                let mut data = vec![F::zero(); xv.len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    data[src] = data[src] + gv;
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::PairwiseL1 { p, a } => {
                let (pv, av) = (val(*p), val(*a));
                let (n, v, f) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
                let (pd, ad, gd) = (pv.data(), av.data(), g.data());
                let mut gp = vec![F::zero(); pv.len()];
                let mut ga = vec![F::zero(); av.len()];
                for ni in 0..n {
                    for i in 0..v {
                        for j in 0..v {
                            let gv = gd[(ni * v + i) * v + j];
                            if gv == F::zero() {
                                continue;
                            }
                            let oi = (ni * v + i) * f;
                            let oj = (ni * v + j) * f;
                            for q in 0..f {
                                let d = pd[oi + q] - pd[oj + q];
                                ga[q] = ga[q] + gv * d.abs();
                                let s = if d > F::zero() {
                                    F::one()
                                } else if d < F::zero() {
                                    -F::one()
                                } else {
                                    F::zero()
                                };
                                let c = gv * s * ad[q];
                                gp[oi + q] = gp[oi + q] + c;
                                gp[oj + q] = gp[oj + q] - c;
                            }
                        }
                    }
                }
                if needs(*p) {
                    out.push((*p, Tensor::new(pv.shape().to_vec(), gp)?));
                }
                if needs(*a) {
                    out.push((*a, Tensor::new(av.shape().to_vec(), ga)?));
                }
            }
            Op::Grl { x, coefficient } => {
                let c = *coefficient;
                out.push((*x, g.map(|v| -(c * v))));
            }
        }
        Ok(out)
    }
}
