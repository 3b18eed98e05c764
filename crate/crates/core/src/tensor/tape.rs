//! Reverse-mode tape over dense tensors.
//!
//! Each operation appends a node holding the forward value plus whatever the
//! backward rule needs. [`Tape::backward`] replays the records once, in
//! reverse recording order, accumulating gradients into every node that
//! requires them. Inputs always precede outputs, so the reverse sweep is a
//! valid topological order.

use super::kernels as k;
use super::kernels::{BnMode, BnSaved, BnState, ConvDims, Padding};
use super::Tensor;
use crate::element::Element;
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Train/infer switch threaded through model forward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunMode {
    Train { dropout_rate: f64 },
    Infer,
}

impl RunMode {
    pub fn bn(self) -> BnMode {
        match self {
            RunMode::Train { .. } => BnMode::Train,
            RunMode::Infer => BnMode::Infer,
        }
    }
}

enum Op<F: Element> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: ConvDims,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        dims: (usize, usize, usize, usize),
        mode: BnMode,
        saved: BnSaved<F>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<F>,
        plane: usize,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        idx: Vec<usize>,
    },
    Gap {
        x: NodeId,
        dims: (usize, usize, usize, usize),
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Softmax {
        x: NodeId,
        d: usize,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: F,
    },
    MatMulBat {
        a: NodeId,
        b: NodeId,
        bdims: (usize, usize, usize, usize),
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Upsample2 {
        x: NodeId,
        dims: (usize, usize, usize, usize),
    },
    SelectChannels {
        x: NodeId,
        indices: Vec<usize>,
        dims: (usize, usize, usize, usize),
    },
    CrossEntropy {
        probs: NodeId,
        targets: Tensor<F>,
        classes: usize,
    },
    Sum {
        x: NodeId,
    },
}

struct Node<F: Element> {
    tensor: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].tensor
    }

    /// Gradient buffer of a node, populated by [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn leaf(&mut self, tensor: Tensor<F>) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    fn push(&mut self, tensor: Tensor<F>, op: Op<F>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = self.requires(inputs);
        self.push(
            Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        )
    }

    // ------------------------------------------------------------- ops

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: Padding) -> Result<NodeId> {
        let xt = self.value(x);
        let wt = self.value(w);
        let dims = ConvDims::resolve(&xt.shape, &wt.shape, padding)?;
        let bt = self.value(b);
        if bt.shape != [dims.filters] {
            return Err(Error::shape("conv2d: bias", &[dims.filters], &bt.shape));
        }
        let out = k::conv2d_forward(&xt.data, &wt.data, &bt.data, &dims);
        let shape = vec![dims.n, dims.filters, dims.h_out, dims.w_out];
        Ok(self.result(shape, out, Op::Conv2d { x, w, b, dims }, &[x, w, b]))
    }

    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState<F>,
        mode: BnMode,
    ) -> Result<NodeId> {
        let xt = self.value(x);
        let dims = xt.dims4("batchnorm2d")?;
        let gt = self.value(gamma);
        let bt = self.value(beta);
        if gt.shape != [dims.1] || bt.shape != [dims.1] {
            return Err(Error::shape("batchnorm2d: affine", &[dims.1], &gt.shape));
        }
        let (out, saved) =
            k::batchnorm_forward(&xt.data, &gt.data, &bt.data, dims, mode, state)?;
        let shape = xt.shape.clone();
        Ok(self.result(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                mode,
                saved,
            },
            &[x, gamma, beta],
        ))
    }

    /// Zeroes whole channels with probability `rate` and rescales survivors.
    /// Identity when not training or when the rate is zero.
    pub fn spatial_dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4("spatial_dropout")?;
        let mask = k::dropout_mask::<F, R>(n, c, rate, rng);
        let out = k::dropout_apply(&xt.data, &mask, h * w);
        let shape = xt.shape.clone();
        Ok(self.result(shape, out, Op::Dropout { x, mask, plane: h * w }, &[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = k::relu_forward(&self.value(x).data);
        let shape = self.value(x).shape.clone();
        self.result(shape, out, Op::Relu { x }, &[x])
    }

    pub fn maxpool2d(&mut self, x: NodeId, k_sz: usize) -> Result<NodeId> {
        let xt = self.value(x);
        let dims = xt.dims4("maxpool2d")?;
        if dims.2 < k_sz || dims.3 < k_sz {
            return Err(Error::shape("maxpool2d", &[k_sz, k_sz], &[dims.2, dims.3]));
        }
        let (out, idx, (h_out, w_out)) = k::maxpool_forward(&xt.data, dims, k_sz);
        let shape = vec![dims.0, dims.1, h_out, w_out];
        Ok(self.result(shape, out, Op::MaxPool { x, idx }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let dims = xt.dims4("global_avg_pool")?;
        let out = k::global_avg_pool_forward(&xt.data, dims);
        Ok(self.result(vec![dims.0, dims.1], out, Op::Gap { x, dims }, &[x]))
    }

    /// Linear layer over the last dimension; leading dimensions are batch.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let wt = self.value(w);
        let bt = self.value(b);
        let (&[d_in, d_out], &[last]) = match (wt.shape.as_slice(), xt.shape.last()) {
            (w @ &[_, _], Some(l)) => (<&[usize; 2]>::try_from(w).unwrap(), &[*l]),
            _ => return Err(Error::shape("dense", &[2], &[wt.shape.len()])),
        };
        if last != d_in {
            return Err(Error::shape("dense: input width", &wt.shape, &xt.shape));
        }
        if bt.shape != [d_out] {
            return Err(Error::shape("dense: bias", &[d_out], &bt.shape));
        }
        let rows = xt.numel() / d_in;
        let out = k::dense_forward(&xt.data, &wt.data, &bt.data, rows, d_in, d_out);
        let mut shape = xt.shape.clone();
        *shape.last_mut().unwrap() = d_out;
        Ok(self.result(
            shape,
            out,
            Op::Dense {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            },
            &[x, w, b],
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xt = self.value(x);
        let d = *xt.shape.last().unwrap();
        let out = k::softmax_forward(&xt.data, d);
        let shape = xt.shape.clone();
        self.result(shape, out, Op::Softmax { x, d }, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Parameter("concat: no inputs".into()));
        }
        let first = self.value(xs[0]).shape.clone();
        if axis >= first.len() {
            return Err(Error::Parameter(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &id in xs {
            let s = &self.value(id).shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![F::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &id in xs {
            let t = self.value(id);
            let extent = t.shape[axis];
            for o in 0..outer {
                let src = &t.data[o * extent * inner..(o + 1) * extent * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                out[dst_base..dst_base + extent * inner].copy_from_slice(src);
            }
            offset += extent;
        }
        Ok(self.result(shape, out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn eltwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(Error::shape("elementwise_mul", sa, sb));
        }
        let out: Vec<F> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = sa.clone();
        Ok(self.result(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let out: Vec<F> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = sa.clone();
        Ok(self.result(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, factor: F) -> NodeId {
        let out: Vec<F> = self.value(x).data.iter().map(|&v| v * factor).collect();
        let shape = self.value(x).shape.clone();
        self.result(shape, out, Op::Scale { x, factor }, &[x])
    }

    /// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn matmul_bat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape.clone();
        let sb = self.value(b).shape.clone();
        let (&[ba, m, ka], &[bb, kb, n]) = match (sa.as_slice(), sb.as_slice()) {
            (x @ &[_, _, _], y @ &[_, _, _]) => (
                <&[usize; 3]>::try_from(x).unwrap(),
                <&[usize; 3]>::try_from(y).unwrap(),
            ),
            _ => return Err(Error::shape("matmul_bat", &sa, &sb)),
        };
        if ba != bb || ka != kb {
            return Err(Error::shape("matmul_bat", &sa, &sb));
        }
        let mut out = vec![F::zero(); ba * m * n];
        for i in 0..ba {
            super::matmul::matmul(
                &self.value(a).data[i * m * ka..(i + 1) * m * ka],
                &self.value(b).data[i * ka * n..(i + 1) * ka * n],
                m,
                ka,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.result(
            vec![ba, m, n],
            out,
            Op::MatMulBat {
                a,
                b,
                bdims: (ba, m, ka, n),
            },
            &[a, b],
        ))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        let mut seen = vec![false; xt.shape.len()];
        if perm.len() != xt.shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parameter(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                xt.shape.len()
            )));
        }
        let (out, shape) = k::permute_forward(&xt.data, &xt.shape, perm);
        Ok(self.result(shape, out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xt.numel() {
            return Err(Error::shape("reshape", shape, &xt.shape));
        }
        let data = xt.data.clone();
        Ok(self.result(shape.to_vec(), data, Op::Reshape { x }, &[x]))
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let dims = xt.dims4("upsample_nearest2")?;
        let out = k::upsample2_forward(&xt.data, dims);
        let shape = vec![dims.0, dims.1, dims.2 * 2, dims.3 * 2];
        Ok(self.result(shape, out, Op::Upsample2 { x, dims }, &[x]))
    }

    /// Gather a subset of channels from an NCHW tensor, in the given order.
    pub fn select_channels(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xt = self.value(x);
        let dims = xt.dims4("select_channels")?;
        if indices.is_empty() || indices.iter().any(|&i| i >= dims.1) {
            return Err(Error::Parameter(format!(
                "select_channels: indices {indices:?} invalid for {} channels",
                dims.1
            )));
        }
        let out = k::select_channels_forward(&xt.data, dims, indices);
        let shape = vec![dims.0, indices.len(), dims.2, dims.3];
        Ok(self.result(
            shape,
            out,
            Op::SelectChannels {
                x,
                indices: indices.to_vec(),
                dims,
            },
            &[x],
        ))
    }

    /// Categorical cross entropy against one-hot targets; scalar output.
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &Tensor<F>) -> Result<NodeId> {
        let pt = self.value(probs);
        if pt.shape != targets.shape || pt.shape.len() != 2 {
            return Err(Error::shape("cross_entropy", &targets.shape, &pt.shape));
        }
        let classes = pt.shape[1];
        let loss = k::cross_entropy_forward(&pt.data, &targets.data, classes)?;
        Ok(self.result(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs,
                targets: targets.clone(),
                classes,
            },
            &[probs],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = F::zero();
        for &v in &self.value(x).data {
            s += v;
        }
        self.result(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    // -------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss. Fills `grad` on every node with
    /// `requires_grad`, visiting each recorded operation exactly once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = self
            .nodes
            .iter()
            .map(|node| {
                if node.tensor.requires_grad {
                    Some(vec![F::zero(); node.tensor.numel()])
                } else {
                    None
                }
            })
            .collect();
        match &mut grads[loss.0] {
            Some(g) => g[0] = F::one(),
            None => {
                return Err(Error::State(
                    "backward: loss does not depend on any gradient-tracked input".into(),
                ))
            }
        }
        for i in (0..n).rev() {
            let (inputs, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.backward_one(i, g, inputs);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.tensor.grad = g;
            if let Some(gr) = &node.tensor.grad {
                if !gr.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("backward gradient".into()));
                }
            }
        }
        Ok(())
    }

    fn backward_one(&self, i: usize, g: &[F], inputs: &mut [Option<Vec<F>>]) {
        let val = |id: NodeId| &self.nodes[id.0].tensor;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                // Input gradient is skipped entirely when untracked (training
                // feeds constant batches).
                let mut dw = vec![F::zero(); val(*w).numel()];
                let mut db = vec![F::zero(); val(*b).numel()];
                let mut dx = inputs[x.0].take();
                k::conv2d_backward(
                    &val(*x).data,
                    &val(*w).data,
                    dims,
                    g,
                    dx.as_deref_mut(),
                    &mut dw,
                    &mut db,
                );
                inputs[x.0] = dx;
                accumulate(inputs, *w, &dw);
                accumulate(inputs, *b, &db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                mode,
                saved,
            } => {
                let mut dx = vec![F::zero(); val(*x).numel()];
                let mut dgamma = vec![F::zero(); val(*gamma).numel()];
                let mut dbeta = vec![F::zero(); val(*beta).numel()];
                k::batchnorm_backward(
                    saved,
                    &val(*gamma).data,
                    *dims,
                    *mode,
                    g,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                );
                accumulate(inputs, *x, &dx);
                accumulate(inputs, *gamma, &dgamma);
                accumulate(inputs, *beta, &dbeta);
            }
            Op::Dropout { x, mask, plane } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    k::dropout_backward(mask, *plane, g, dx);
                }
            }
            Op::Relu { x } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    k::relu_backward(&val(*x).data, g, dx);
                }
            }
            Op::MaxPool { x, idx } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    k::maxpool_backward(idx, g, dx);
                }
            }
            Op::Gap { x, dims } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    k::global_avg_pool_backward(g, *dims, dx);
                }
            }
            Op::Dense {
                x,
                w,
                b,
                rows,
                d_in,
                d_out,
            } => {
                let mut dx = vec![F::zero(); val(*x).numel()];
                let mut dw = vec![F::zero(); val(*w).numel()];
                let mut db = vec![F::zero(); val(*b).numel()];
                k::dense_backward(
                    &val(*x).data,
                    &val(*w).data,
                    *rows,
                    *d_in,
                    *d_out,
                    g,
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                accumulate(inputs, *x, &dx);
                accumulate(inputs, *w, &dw);
                accumulate(inputs, *b, &db);
            }
            Op::Softmax { x, d } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    k::softmax_backward(&self.nodes[i].tensor.data, *d, g, dx);
                }
            }
            Op::Concat { xs, axis } => {
                let shape = &self.nodes[i].tensor.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let axis_total = shape[*axis];
                let mut offset = 0;
                for &id in xs {
                    let extent = val(id).shape[*axis];
                    if let Some(dx) = inputs[id.0].as_mut() {
                        for o in 0..outer {
                            let src_base = o * axis_total * inner + offset * inner;
                            let dst = &mut dx[o * extent * inner..(o + 1) * extent * inner];
                            for (d_v, &g_v) in
                                dst.iter_mut().zip(&g[src_base..src_base + extent * inner])
                            {
                                *d_v += g_v;
                            }
                        }
                    }
                    offset += extent;
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = inputs[a.0].as_mut() {
                    for ((d, &g_v), &b_v) in da.iter_mut().zip(g).zip(&val(*b).data) {
                        *d += g_v * b_v;
                    }
                }
                if let Some(db) = inputs[b.0].as_mut() {
                    for ((d, &g_v), &a_v) in db.iter_mut().zip(g).zip(&val(*a).data) {
                        *d += g_v * a_v;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(d) = inputs[id.0].as_mut() {
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *factor;
                    }
                }
            }
            Op::MatMulBat { a, b, bdims } => {
                let (bt, m, kk, n) = *bdims;
                for i_b in 0..bt {
                    let g_b = &g[i_b * m * n..(i_b + 1) * m * n];
                    if inputs[a.0].is_some() {
                        let mut da = vec![F::zero(); m * kk];
                        super::matmul::matmul_nt(
                            g_b,
                            &val(*b).data[i_b * kk * n..(i_b + 1) * kk * n],
                            m,
                            n,
                            kk,
                            &mut da,
                        );
                        let dst = inputs[a.0].as_mut().unwrap();
                        for (d, &v) in dst[i_b * m * kk..(i_b + 1) * m * kk].iter_mut().zip(&da) {
                            *d += v;
                        }
                    }
                    if inputs[b.0].is_some() {
                        let mut db = vec![F::zero(); kk * n];
                        super::matmul::matmul_tn(
                            &val(*a).data[i_b * m * kk..(i_b + 1) * m * kk],
                            g_b,
                            kk,
                            m,
                            n,
                            &mut db,
                        );
                        let dst = inputs[b.0].as_mut().unwrap();
                        for (d, &v) in dst[i_b * kk * n..(i_b + 1) * kk * n].iter_mut().zip(&db) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if inputs[x.0].is_some() {
                    let (g_perm, _) =
                        k::permute_forward(g, &self.nodes[i].tensor.shape, &k::invert_perm(perm));
                    accumulate(inputs, *x, &g_perm);
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Upsample2 { x, dims } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    k::upsample2_backward(g, *dims, dx);
                }
            }
            Op::SelectChannels { x, indices, dims } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    k::select_channels_backward(g, *dims, indices, dx);
                }
            }
            Op::CrossEntropy {
                probs,
                targets,
                classes,
            } => {
                if let Some(dp) = inputs[probs.0].as_mut() {
                    k::cross_entropy_backward(&val(*probs).data, &targets.data, *classes, g[0], dp);
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = inputs[x.0].as_mut() {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn accumulate<F: Element>(grads: &mut [Option<Vec<F>>], id: NodeId, delta: &[F]) {
    if let Some(dst) = grads[id.0].as_mut() {
        for (d, &v) in dst.iter_mut().zip(delta) {
            *d += v;
        }
    }
}
