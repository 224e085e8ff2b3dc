use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Layout};
use crate::real::Real;
use crate::shape::{broadcast_offsets, broadcast_shapes, numel, split_axis, strides};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    requires_grad_leaf: bool,
}

/// Append-only record of a computation.
///
/// Every operation appends a node whose inputs precede it, so node order is
/// a topological order and the backward pass simply walks it in reverse.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of a consumed tape, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf registered with `requires_grad`. Leaves the loss
    /// does not depend on get a zero tensor rather than `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Maps every element of the permuted output to its flat offset in the input.
fn permute_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(in_shape);
    let rank = out_shape.len();
    let mut offsets = Vec::with_capacity(total);
    if rank == 0 {
        offsets.push(0);
        return offsets;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

impl<F: Real> Tape<F> {
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

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad_leaf: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op: name, index });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad_leaf: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else {
            let shape = broadcast_shapes(name, va.shape(), vb.shape())?;
            let oa = broadcast_offsets(&shape, va.shape());
            let ob = broadcast_offsets(&shape, vb.shape());
            let (da, db) = (va.data(), vb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(shape, data)
        };
        self.push(name, out, op, &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// Batched matrix product over the last two axes. Leading axes
    /// broadcast; a rank-2 right operand is shared by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let m = sa[sa.len() - 2];
        let out = if sb.len() == 2 {
            let rows = va.numel() / k;
            let mut data = vec![F::zero(); rows * n];
            kernels::gemm(rows, k, n, va.data(), Layout::Normal, vb.data(), Layout::Normal, &mut data, false);
            let mut shape = sa.to_vec();
            *shape.last_mut().expect("rank >= 2") = n;
            Tensor::from_parts(shape, data)
        } else {
            let ba = &sa[..sa.len() - 2];
            let bb = &sb[..sb.len() - 2];
            let batch = broadcast_shapes("matmul", ba, bb).map_err(|_| shape_err("matmul", sa, sb))?;
            let oa = broadcast_offsets(&batch, ba);
            let ob = broadcast_offsets(&batch, bb);
            let mut data = vec![F::zero(); oa.len() * m * n];
            for (i, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &va.data()[ia * m * k..(ia + 1) * m * k],
                    Layout::Normal,
                    &vb.data()[ib * k * n..(ib + 1) * k * n],
                    Layout::Normal,
                    &mut data[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let mut shape = batch;
            shape.push(m);
            shape.push(n);
            Tensor::from_parts(shape, data)
        };
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let rank = va.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                shape: va.shape().to_vec(),
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let offs = permute_offsets(va.shape(), perm);
        let data = offs.iter().map(|&o| va.data()[o]).collect();
        let shape = perm.iter().map(|&p| va.shape()[p]).collect();
        let out = Tensor::from_parts(shape, data);
        self.push("permute", out, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.nodes[a.0].value.rank();
        if rank < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if axis >= va.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "narrow",
                axis,
                rank: va.rank(),
            });
        }
        let (outer, full, inner) = split_axis(va.shape(), axis);
        if len == 0 || start + len > full {
            return Err(TensorError::InvalidShape {
                shape: va.shape().to_vec(),
                reason: format!("narrow [{start}, {}) exceeds axis {axis}", start + len),
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, data);
        self.push("narrow", out, Op::Narrow { x: a, axis, start }, &[a])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?.0]
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Softmax along `axis` (max-shifted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: vx.rank(),
            });
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut data = vec![F::zero(); vx.numel()];
        kernels::softmax_forward(vx.data(), &mut data, outer, len, inner);
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "layer_norm needs rank >= 1".into(),
        })?;
        let (vg, vb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.numel() / d;
        let dn = F::from_usize(d).expect("extent fits");
        let mut xhat = vec![F::zero(); vx.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut data = vec![F::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().fold(F::zero(), |a, b| a + b) / dn;
            let var = row.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, exact form `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v * kernels::std_normal_cdf(v));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout: zeroes with probability `p` and rescales survivors
    /// by `1/(1-p)`. Returns `x` unchanged when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let vx = &self.nodes[x.0].value;
        let mask: Vec<F> = (0..vx.numel())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.nodes[x.0].value.sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::scalar(v.sum() / F::from_usize(v.numel()).expect("count fits"));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (vp, vt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if vp.shape() != vt.shape() {
            return Err(shape_err("mse", vp.shape(), vt.shape()));
        }
        let total = vp
            .data()
            .iter()
            .zip(vt.data())
            .fold(F::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
        let out = Tensor::scalar(total / F::from_usize(vp.numel()).expect("count fits"));
        self.push("mse", out, Op::Mse(pred, target), &[pred, target])
    }

    /// Row lookup: `table` is `[rows, D]`; the result has shape
    /// `index_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 || numel(index_shape) != indices.len() {
            return Err(shape_err("embedding", vt.shape(), index_shape));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    rows,
                });
            }
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let out = Tensor::from_parts(shape, data);
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Depthwise 1-D convolution along the second-to-last axis.
    ///
    /// `x` is `[..., L, D]`, `w` is `[P, D]`, `b` is `[D]`; the output is
    /// `[..., (L-P)/stride + 1, D]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let sx = vx.shape();
        if sx.len() < 2 || vw.rank() != 2 || vw.shape()[1] != sx[sx.len() - 1] || vb.shape() != [vw.shape()[1]] {
            return Err(shape_err("depthwise_conv1d", sx, vw.shape()));
        }
        let (l, d) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let p = vw.shape()[0];
        if stride == 0 || p > l {
            return Err(shape_err("depthwise_conv1d", sx, vw.shape()));
        }
        let n = (l - p) / stride + 1;
        let outer = vx.numel() / (l * d);
        let mut data = vec![F::zero(); outer * n * d];
        for o in 0..outer {
            let xs = &vx.data()[o * l * d..(o + 1) * l * d];
            for t in 0..n {
                let dst = &mut data[(o * n + t) * d..(o * n + t + 1) * d];
                dst.copy_from_slice(vb.data());
                for k in 0..p {
                    let src = &xs[(t * stride + k) * d..(t * stride + k + 1) * d];
                    let wk = &vw.data()[k * d..(k + 1) * d];
                    for j in 0..d {
                        dst[j] += wk[j] * src[j];
                    }
                }
            }
        }
        let mut shape = sx.to_vec();
        let r = shape.len();
        shape[r - 2] = n;
        let out = Tensor::from_parts(shape, data);
        self.push("depthwise_conv1d", out, Op::DepthwiseConv { x, w, b, stride }, &[x, w, b])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if numel(&loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop_node(&nodes, i, &g, &mut grads);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad_leaf {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adds the contribution of node `i` (upstream gradient `g`) into the
/// gradient buffers of its inputs.
fn backprop_node<F: Real>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let out_shape = nodes[i].value.shape();
    // Accumulate into a single input's gradient buffer, allocating it lazily.
    macro_rules! with_grad {
        ($v:expr, |$dst:ident| $body:block) => {
            if nodes[$v.0].needs_grad {
                let n = nodes[$v.0].value.numel();
                let $dst: &mut Vec<F> = grads[$v.0].get_or_insert_with(|| vec![F::zero(); n]);
                $body
            }
        };
    }

    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -F::one() } else { F::one() };
            for (v, s) in [(*a, F::one()), (*b, sign)] {
                with_grad!(v, |dst| {
                    let in_shape = nodes[v.0].value.shape();
                    if in_shape == out_shape {
                        for (d, &x) in dst.iter_mut().zip(g) {
                            *d += s * x;
                        }
                    } else {
                        let offs = broadcast_offsets(out_shape, in_shape);
                        for (&o, &x) in offs.iter().zip(g) {
                            dst[o] += s * x;
                        }
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let oa = (va.shape() != out_shape).then(|| broadcast_offsets(out_shape, va.shape()));
            let ob = (vb.shape() != out_shape).then(|| broadcast_offsets(out_shape, vb.shape()));
            let at = |offs: &Option<Vec<usize>>, k: usize| offs.as_ref().map_or(k, |o| o[k]);
            with_grad!(*a, |dst| {
                for k in 0..g.len() {
                    dst[at(&oa, k)] += g[k] * vb.data()[at(&ob, k)];
                }
            });
            with_grad!(*b, |dst| {
                for k in 0..g.len() {
                    dst[at(&ob, k)] += g[k] * va.data()[at(&oa, k)];
                }
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let oa = (va.shape() != out_shape).then(|| broadcast_offsets(out_shape, va.shape()));
            let ob = (vb.shape() != out_shape).then(|| broadcast_offsets(out_shape, vb.shape()));
            let at = |offs: &Option<Vec<usize>>, k: usize| offs.as_ref().map_or(k, |o| o[k]);
            with_grad!(*a, |dst| {
                for k in 0..g.len() {
                    dst[at(&oa, k)] += g[k] / vb.data()[at(&ob, k)];
                }
            });
            with_grad!(*b, |dst| {
                for k in 0..g.len() {
                    let y = vb.data()[at(&ob, k)];
                    dst[at(&ob, k)] -= g[k] * va.data()[at(&oa, k)] / (y * y);
                }
            });
        }
        Op::Scale(a, s) => with_grad!(*a, |dst| {
            for (d, &x) in dst.iter_mut().zip(g) {
                *d += *s * x;
            }
        }),
        Op::AddScalar(a) | Op::Reshape(a) => with_grad!(*a, |dst| {
            for (d, &x) in dst.iter_mut().zip(g) {
                *d += x;
            }
        }),
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (va.shape(), vb.shape());
            let k = sa[sa.len() - 1];
            let n = sb[sb.len() - 1];
            let m = sa[sa.len() - 2];
            if sb.len() == 2 {
                let rows = va.numel() / k;
                with_grad!(*a, |dst| {
                    kernels::gemm(rows, n, k, g, Layout::Normal, vb.data(), Layout::Transposed, dst, true);
                });
                with_grad!(*b, |dst| {
                    kernels::gemm(k, rows, n, va.data(), Layout::Transposed, g, Layout::Normal, dst, true);
                });
            } else {
                let ba = &sa[..sa.len() - 2];
                let bb = &sb[..sb.len() - 2];
                let batch = &out_shape[..out_shape.len() - 2];
                let oa = broadcast_offsets(batch, ba);
                let ob = broadcast_offsets(batch, bb);
                with_grad!(*a, |dst| {
                    for (t, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            Layout::Normal,
                            &vb.data()[ib * k * n..(ib + 1) * k * n],
                            Layout::Transposed,
                            &mut dst[ia * m * k..(ia + 1) * m * k],
                            true,
                        );
                    }
                });
                with_grad!(*b, |dst| {
                    for (t, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va.data()[ia * m * k..(ia + 1) * m * k],
                            Layout::Transposed,
                            &g[t * m * n..(t + 1) * m * n],
                            Layout::Normal,
                            &mut dst[ib * k * n..(ib + 1) * k * n],
                            true,
                        );
                    }
                });
            }
        }
        Op::Permute(a, perm) => with_grad!(*a, |dst| {
            let offs = permute_offsets(nodes[a.0].value.shape(), perm);
            for (&o, &x) in offs.iter().zip(g) {
                dst[o] += x;
            }
        }),
        Op::Narrow { x, axis, start } => with_grad!(*x, |dst| {
            let in_shape = nodes[x.0].value.shape();
            let (outer, full, inner) = split_axis(in_shape, *axis);
            let len = out_shape[*axis];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let base = o * full * inner + start * inner;
                for (d, &v) in dst[base..base + len * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }),
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                with_grad!(*p, |dst| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, &v) in dst[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Softmax { x, axis } => with_grad!(*x, |dst| {
            let (outer, len, inner) = split_axis(out_shape, *axis);
            kernels::softmax_backward(nodes[i].value.data(), g, dst, outer, len, inner);
        }),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *out_shape.last().expect("rank >= 1");
            let rows = g.len() / d;
            let gv = nodes[gamma.0].value.data();
            with_grad!(*x, |dst| {
                let dn = F::from_usize(d).expect("extent fits");
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dst[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            });
            with_grad!(*gamma, |dst| {
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            with_grad!(*beta, |dst| {
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += g[r * d + j];
                    }
                }
            });
        }
        Op::Gelu(x) => with_grad!(*x, |dst| {
            for (k, &v) in nodes[x.0].value.data().iter().enumerate() {
                let dv = kernels::std_normal_cdf(v) + v * kernels::std_normal_pdf(v);
                dst[k] += g[k] * dv;
            }
        }),
        Op::Sigmoid(x) => with_grad!(*x, |dst| {
            for (k, &y) in nodes[i].value.data().iter().enumerate() {
                dst[k] += g[k] * y * (F::one() - y);
            }
        }),
        Op::Dropout { x, mask } => with_grad!(*x, |dst| {
            for k in 0..g.len() {
                dst[k] += g[k] * mask[k];
            }
        }),
        Op::Sum(x) => with_grad!(*x, |dst| {
            for d in dst.iter_mut() {
                *d += g[0];
            }
        }),
        Op::Mean(x) => with_grad!(*x, |dst| {
            let s = g[0] / F::from_usize(dst.len()).expect("count fits");
            for d in dst.iter_mut() {
                *d += s;
            }
        }),
        Op::Mse(p, t) => {
            let (vp, vt) = (nodes[p.0].value.data(), nodes[t.0].value.data());
            let s = (F::one() + F::one()) * g[0] / F::from_usize(vp.len()).expect("count fits");
            with_grad!(*p, |dst| {
                for k in 0..vp.len() {
                    dst[k] += s * (vp[k] - vt[k]);
                }
            });
            with_grad!(*t, |dst| {
                for k in 0..vp.len() {
                    dst[k] -= s * (vp[k] - vt[k]);
                }
            });
        }
        Op::Embedding { table, indices } => with_grad!(*table, |dst| {
            let d = nodes[table.0].value.shape()[1];
            for (r, &idx) in indices.iter().enumerate() {
                for j in 0..d {
                    dst[idx * d + j] += g[r * d + j];
                }
            }
        }),
        Op::DepthwiseConv { x, w, b, stride } => {
            let sx = nodes[x.0].value.shape();
            let (l, d) = (sx[sx.len() - 2], sx[sx.len() - 1]);
            let p = nodes[w.0].value.shape()[0];
            let n = out_shape[out_shape.len() - 2];
            let outer = g.len() / (n * d);
            let xv = nodes[x.0].value.data();
            let wv = nodes[w.0].value.data();
            with_grad!(*x, |dst| {
                for o in 0..outer {
                    for t in 0..n {
                        let gr = &g[(o * n + t) * d..(o * n + t + 1) * d];
                        for k in 0..p {
                            let row = (o * l + t * stride + k) * d;
                            for j in 0..d {
                                dst[row + j] += wv[k * d + j] * gr[j];
                            }
                        }
                    }
                }
            });
            with_grad!(*w, |dst| {
                for o in 0..outer {
                    for t in 0..n {
                        let gr = &g[(o * n + t) * d..(o * n + t + 1) * d];
                        for k in 0..p {
                            let row = (o * l + t * stride + k) * d;
                            for j in 0..d {
                                dst[k * d + j] += xv[row + j] * gr[j];
                            }
                        }
                    }
                }
            });
            with_grad!(*b, |dst| {
                for r in 0..outer * n {
                    for j in 0..d {
                        dst[j] += g[r * d + j];
                    }
                }
            });
        }
    }
}
