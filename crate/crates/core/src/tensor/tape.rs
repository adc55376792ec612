use super::kernels::{self, Agreement, MarginParams, VoteDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of rows the statistics were taken over.
    pub count: usize,
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        f: usize,
        k: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Swish { x: Var, sig: Vec<f64> },
    Squash(Var),
    Softmax(Var),
    Norm(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedVoteSum {
        k: Var,
        v: Var,
        dims: VoteDims,
    },
    Agreement {
        v: Var,
        s: Var,
        dims: VoteDims,
        kind: Agreement,
    },
    CapsTransform {
        u: Var,
        w: Var,
        dims: [usize; 5],
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
        a: usize,
        d: usize,
    },
    Margin {
        lengths: Var,
        labels: Vec<usize>,
        params: MarginParams,
        a: usize,
    },
    Chamfer {
        x: Var,
        y: Var,
        nn_xy: Vec<usize>,
        nn_yx: Vec<usize>,
        dims: [usize; 4],
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of operations supporting reverse-mode differentiation.
///
/// Nodes are appended by every op and live until [`Tape::clear`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.shape(v).last().expect("rank >= 1")
    }

    // ------------------------------------------------------------- linear

    /// Applies `w` (shape `[K, F]`, or any shape with `K` leading and `F`
    /// values per row) to every row of `x`'s last axis: `[..., F] -> [..., K]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let f = self.last_dim(x);
        let wshape = self.shape(w);
        let k = wshape[0];
        if self.value(w).numel() != k * f {
            return Err(Error::dim(
                "linear",
                format!("weights {:?} do not map {f} features", wshape),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != k {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} for {k} outputs", self.shape(b)),
                ));
            }
        }
        let y = kernels::linear_fwd(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b)),
            f,
            k,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = k;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "linear",
            Tensor::from_parts(shape, y),
            Op::Linear { x, w, b: bias, f, k },
            &inputs,
        )
    }

    /// Full-feature 1D convolution: kernels `[K, 1, F]` each spanning one
    /// whole row of `x` `[..., C, F]`, producing `[..., C, K]`. Rows are
    /// processed independently.
    pub fn conv1d_feature(&mut self, x: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let ks = self.shape(kernels);
        let f = self.last_dim(x);
        if ks.len() != 3 || ks[1] != 1 || ks[2] != f {
            return Err(Error::dim(
                "conv1d_feature",
                format!("kernels {:?} incompatible with feature width {f}", ks),
            ));
        }
        self.linear(x, kernels, bias)
    }

    /// Height-1 2D convolution with kernel width equal to the stride:
    /// `[..., W, 1]` with kernels `[K, 1, n]` gives `[..., W / n, K]`.
    pub fn conv2d_strided(&mut self, x: Var, kernels: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels);
        if xs.len() < 2 || xs[xs.len() - 1] != 1 {
            return Err(Error::dim(
                "conv2d_strided",
                format!("input {xs:?} must end in a single channel"),
            ));
        }
        if ks.len() != 3 || ks[1] != 1 || ks[2] != stride || stride == 0 {
            return Err(Error::dim(
                "conv2d_strided",
                format!("kernels {:?} must be [K, 1, {stride}]", ks),
            ));
        }
        let width = xs[xs.len() - 2];
        if width % stride != 0 {
            return Err(Error::dim(
                "conv2d_strided",
                format!("width {width} not divisible by stride {stride}"),
            ));
        }
        let mut windows = xs[..xs.len() - 2].to_vec();
        windows.extend([conv_output_width(width, stride, stride), stride]);
        let x = self.reshape(x, windows)?;
        self.linear(x, kernels, bias)
    }

    /// Transposed convolution along the width axis with kernel width equal to
    /// the stride: `[..., W, C_in]` with kernels `[k, C_out, C_in]` gives
    /// `[..., W * k, C_out]`.
    pub fn deconv_width(&mut self, x: Var, kernels: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let ks = self.shape(kernels).to_vec();
        if ks.len() != 3 {
            return Err(Error::dim(
                "deconv_width",
                format!("kernels {ks:?} must be [k, C_out, C_in]"),
            ));
        }
        let (width, c_out, c_in) = (ks[0], ks[1], ks[2]);
        if width != stride || stride == 0 {
            return Err(Error::Config(format!(
                "unsupported deconvolution: kernel width {width} with stride {stride}"
            )));
        }
        if self.last_dim(x) != c_in {
            return Err(Error::dim(
                "deconv_width",
                format!("input {:?} has no {c_in} channels", self.shape(x)),
            ));
        }
        let xs = self.shape(x).to_vec();
        let w = self.reshape(kernels, [width * c_out, c_in])?;
        let y = self.linear(x, w, None)?;
        let mut shape = xs[..xs.len() - 2].to_vec();
        shape.extend([xs[xs.len() - 2] * width, c_out]);
        let y = self.reshape(y, shape)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Adds `b` `[K]` to every row of `x` `[..., K]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let k = self.last_dim(x);
        if self.value(b).numel() != k {
            return Err(Error::dim("add_bias", format!("bias {:?} for width {k}", self.shape(b))));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("add_bias", Tensor::from_parts(shape, out), Op::AddBias { x, b }, &[x, b])
    }

    // ------------------------------------------------------- elementwise

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let (y, sig) = kernels::swish_fwd(self.data(x));
        let shape = self.shape(x).to_vec();
        self.push("swish", Tensor::from_parts(shape, y), Op::Swish { x, sig }, &[x])
    }

    /// Capsule squash along the last axis.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x);
        let y = kernels::squash_fwd(self.data(x), d);
        let shape = self.shape(x).to_vec();
        self.push("squash", Tensor::from_parts(shape, y), Op::Squash(x), &[x])
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x);
        let y = kernels::softmax_fwd(self.data(x), d);
        let shape = self.shape(x).to_vec();
        self.push("softmax_rows", Tensor::from_parts(shape, y), Op::Softmax(x), &[x])
    }

    /// L2 norm along the last axis; the axis is dropped (rank-1 inputs give `[1]`).
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x);
        let y = kernels::norm_fwd(self.data(x), d);
        let xs = self.shape(x);
        let shape = if xs.len() == 1 { vec![1] } else { xs[..xs.len() - 1].to_vec() };
        self.push("norm_last", Tensor::from_parts(shape, y), Op::Norm(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(x, c), &[x])
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ----------------------------------------------------------- capsules

    fn vote_dims(&self, op: &'static str, votes: Var) -> Result<VoteDims> {
        let vs = self.shape(votes);
        if vs.len() != 4 {
            return Err(Error::dim(op, format!("votes must be [G, ci, cp, d], got {vs:?}")));
        }
        Ok(VoteDims {
            groups: vs[0],
            children: vs[1],
            parents: vs[2],
            dim: vs[3],
        })
    }

    /// `s[g, j, :] = sum_i k[g, i, j] * v[g, i, j, :]` for couplings
    /// `[G, ci, cp]` and votes `[G, ci, cp, d]`.
    pub fn weighted_vote_sum(&mut self, couplings: Var, votes: Var) -> Result<Var> {
        let dims = self.vote_dims("weighted_vote_sum", votes)?;
        if self.shape(couplings) != [dims.groups, dims.children, dims.parents] {
            return Err(Error::dim(
                "weighted_vote_sum",
                format!("couplings {:?} vs votes {:?}", self.shape(couplings), self.shape(votes)),
            ));
        }
        let s = kernels::weighted_vote_sum_fwd(self.data(couplings), self.data(votes), &dims);
        let shape = vec![dims.groups, dims.parents, dims.dim];
        self.push(
            "weighted_vote_sum",
            Tensor::from_parts(shape, s),
            Op::WeightedVoteSum { k: couplings, v: votes, dims },
            &[couplings, votes],
        )
    }

    fn agreement(&mut self, name: &'static str, votes: Var, parents: Var, kind: Agreement) -> Result<Var> {
        let dims = self.vote_dims(name, votes)?;
        if self.shape(parents) != [dims.groups, dims.parents, dims.dim] {
            return Err(Error::dim(
                name,
                format!("parents {:?} vs votes {:?}", self.shape(parents), self.shape(votes)),
            ));
        }
        let out = kernels::agreement_fwd(self.data(votes), self.data(parents), &dims, kind);
        let shape = vec![dims.groups, dims.children, dims.parents];
        self.push(
            name,
            Tensor::from_parts(shape, out),
            Op::Agreement { v: votes, s: parents, dims, kind },
            &[votes, parents],
        )
    }

    /// `||v[g, i, j] - s[g, j]||^2`, shape `[G, ci, cp]`.
    pub fn vote_distance_sq(&mut self, votes: Var, parents: Var) -> Result<Var> {
        self.agreement("vote_distance_sq", votes, parents, Agreement::DistanceSq)
    }

    /// `<v[g, i, j], s[g, j]>`, shape `[G, ci, cp]`.
    pub fn vote_dot(&mut self, votes: Var, parents: Var) -> Result<Var> {
        self.agreement("vote_dot", votes, parents, Agreement::Dot)
    }

    /// Normalised dot product; zero when either vector is zero.
    pub fn vote_cosine(&mut self, votes: Var, parents: Var) -> Result<Var> {
        self.agreement("vote_cosine", votes, parents, Agreement::Cosine)
    }

    /// Per-pair transformation `v[..., i, j, :] = W[i, j] u[..., i, :]` for
    /// inputs `[..., ci, din]` and weights `[ci, a, dout, din]`.
    pub fn capsule_transform(&mut self, u: Var, w: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let ws = self.shape(w).to_vec();
        if us.len() < 2 || ws.len() != 4 || ws[0] != us[us.len() - 2] || ws[3] != us[us.len() - 1] {
            return Err(Error::dim(
                "capsule_transform",
                format!("input {us:?} incompatible with weights {ws:?}"),
            ));
        }
        let (ci, a, dout, din) = (ws[0], ws[1], ws[2], ws[3]);
        let groups = self.value(u).numel() / (ci * din);
        let v = kernels::caps_transform_fwd(self.data(u), self.data(w), groups, ci, a, dout, din);
        let mut shape = us[..us.len() - 1].to_vec();
        shape.extend([a, dout]);
        self.push(
            "capsule_transform",
            Tensor::from_parts(shape, v),
            Op::CapsTransform { u, w, dims: [groups, ci, a, dout, din] },
            &[u, w],
        )
    }

    // --------------------------------------------------------- batch norm

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = self.last_dim(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim("batch_norm", format!("{c} channels, affine params mismatch")));
        }
        Ok(c)
    }

    /// Batch norm over every row of `x` `[..., C]` using the batch's own
    /// statistics. Returns the statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnStats)> {
        let c = self.check_bn(x, gamma, beta)?;
        let fwd = kernels::bn_train_fwd(self.data(x), self.data(gamma), self.data(beta), c, eps);
        let count = self.value(x).numel() / c;
        let stats = BnStats {
            mean: fwd.mean,
            var: fwd.var,
            count,
        };
        let shape = self.shape(x).to_vec();
        let out = self.push(
            "batch_norm",
            Tensor::from_parts(shape, fwd.y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        )?;
        Ok((out, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics width mismatch"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::bn_apply(self.data(x), self.data(gamma), self.data(beta), mean, &inv_std, c);
        let shape = self.shape(x).to_vec();
        self.push(
            "batch_norm",
            Tensor::from_parts(shape, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        )
    }

    // ---------------------------------------------------------- structure

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::dim("concat", format!("{sa:?} and {sb:?} on axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner = self.value(a).numel() / outer;
        let b_inner = self.value(b).numel() / outer;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&db[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat { a, b, outer, a_inner, b_inner },
            &[a, b],
        )
    }

    /// Picks row `rows[b]` from each `x[b]` of `x` `[B, a, d]`, giving `[B, d]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != rows.len() {
            return Err(Error::dim("select_rows", format!("{xs:?} with {} indices", rows.len())));
        }
        let (a, d) = (xs[1], xs[2]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= a) {
            return Err(Error::Input(format!("row {bad} out of range for {a} rows")));
        }
        let data = self.data(x);
        let out = rows
            .iter()
            .enumerate()
            .flat_map(|(b, &r)| data[(b * a + r) * d..(b * a + r + 1) * d].iter().copied())
            .collect();
        self.push(
            "select_rows",
            Tensor::from_parts(vec![xs[0], d], out),
            Op::SelectRows { x, rows: rows.to_vec(), a, d },
            &[x],
        )
    }

    // ------------------------------------------------------------- losses

    /// Margin loss on capsule lengths `[B, a]`, summed over classes and
    /// averaged over the batch.
    pub fn margin_loss(
        &mut self,
        lengths: Var,
        labels: &[usize],
        m_plus: f64,
        m_minus: f64,
        lambda: f64,
    ) -> Result<Var> {
        let ls = self.shape(lengths).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim("margin_loss", format!("lengths {ls:?} for {} labels", labels.len())));
        }
        let a = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= a) {
            return Err(Error::Input(format!("label {bad} out of range for {a} classes")));
        }
        let params = MarginParams { m_plus, m_minus, lambda };
        let value = kernels::margin_fwd(self.data(lengths), labels, a, &params);
        self.push(
            "margin_loss",
            Tensor::scalar(value),
            Op::Margin { lengths, labels: labels.to_vec(), params, a },
            &[lengths],
        )
    }

    /// Symmetric Chamfer distance between point sets `[B, N, D]` and
    /// `[B, M, D]`, averaged over the batch.
    pub fn chamfer(&mut self, x: Var, y: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sy = self.shape(y).to_vec();
        if sx.len() != 3 || sy.len() != 3 || sx[0] != sy[0] || sx[2] != sy[2] {
            return Err(Error::dim("chamfer", format!("{sx:?} vs {sy:?}")));
        }
        let dims = [sx[0], sx[1], sy[1], sx[2]];
        let fwd = kernels::chamfer_fwd(self.data(x), self.data(y), dims[0], dims[1], dims[2], dims[3]);
        self.push(
            "chamfer",
            Tensor::scalar(fwd.value),
            Op::Chamfer { x, y, nn_xy: fwd.nn_xy, nn_yx: fwd.nn_yx, dims },
            &[x, y],
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, accumulating gradients into every
    /// node that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape(format!("{loss:?} is not on this tape")))?;
        if node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Tape("loss is detached from every requires_grad leaf".into()));
        }
        accumulate(&mut self.nodes[loss.0], &[1.0]);
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(id, &g);
            self.nodes[id].grad = Some(g);
            for (v, c) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.nodes[v.0], &c);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Linear { x, w, b, f, k } => {
                let mut out = Vec::new();
                if rg(*x) {
                    out.push((*x, kernels::linear_bwd_x(g, self.data(*w), *f, *k)));
                }
                if rg(*w) {
                    out.push((*w, kernels::linear_bwd_w(g, self.data(*x), *f, *k)));
                }
                if let Some(b) = b {
                    out.push((*b, kernels::col_sums(g, *k)));
                }
                out
            }
            Op::AddBias { x, b } => {
                let k = self.last_dim(*x);
                vec![(*x, g.to_vec()), (*b, kernels::col_sums(g, k))]
            }
            Op::Swish { x, sig } => vec![(*x, kernels::swish_bwd(self.data(*x), sig, g))],
            Op::Squash(x) => vec![(*x, kernels::squash_bwd(self.data(*x), g, self.last_dim(*x)))],
            Op::Softmax(x) => vec![(*x, kernels::softmax_bwd(node.value.data(), g, self.last_dim(*x)))],
            Op::Norm(x) => vec![(
                *x,
                kernels::norm_bwd(self.data(*x), node.value.data(), g, self.last_dim(*x)),
            )],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(da).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::WeightedVoteSum { k, v, dims } => {
                let (dk, dv) = kernels::weighted_vote_sum_bwd(self.data(*k), self.data(*v), g, dims);
                vec![(*k, dk), (*v, dv)]
            }
            Op::Agreement { v, s, dims, kind } => {
                let (dv, ds) = kernels::agreement_bwd(self.data(*v), self.data(*s), g, dims, *kind);
                vec![(*v, dv), (*s, ds)]
            }
            Op::CapsTransform { u, w, dims } => {
                let [groups, ci, a, dout, din] = *dims;
                let (du, dw) =
                    kernels::caps_transform_bwd(self.data(*u), self.data(*w), g, groups, ci, a, dout, din);
                vec![(*u, du), (*w, dw)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let (dx, dg, db) = kernels::bn_bwd(g, xhat, self.data(*gamma), inv_std, c, *batch_stats);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let mut da = Vec::with_capacity(outer * a_inner);
                let mut db = Vec::with_capacity(outer * b_inner);
                let stride = a_inner + b_inner;
                for o in 0..*outer {
                    da.extend_from_slice(&g[o * stride..o * stride + a_inner]);
                    db.extend_from_slice(&g[o * stride + a_inner..(o + 1) * stride]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::SelectRows { x, rows, a, d } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (b, &r) in rows.iter().enumerate() {
                    let off = (b * a + r) * d;
                    dx[off..off + d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                vec![(*x, dx)]
            }
            Op::Margin {
                lengths,
                labels,
                params,
                a,
            } => vec![(
                *lengths,
                kernels::margin_bwd(self.data(*lengths), labels, *a, params, g[0]),
            )],
            Op::Chamfer {
                x,
                y,
                nn_xy,
                nn_yx,
                dims,
            } => {
                let [batch, n, m, d] = *dims;
                let (dx, dy) =
                    kernels::chamfer_bwd(self.data(*x), self.data(*y), nn_xy, nn_yx, g[0], batch, n, m, d);
                vec![(*x, dx), (*y, dy)]
            }
        }
    }
}

fn accumulate(node: &mut Node, contribution: &[f64]) {
    match &mut node.grad {
        Some(g) => {
            for (a, c) in g.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => node.grad = Some(contribution.to_vec()),
    }
}

/// Output width of a padding-free convolution: `(W - kernel) / stride + 1`.
pub fn conv_output_width(width: usize, kernel: usize, stride: usize) -> usize {
    (width - kernel) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::reference;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs())))
    }

    fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0..3.0f64, len)
    }

    fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
        flat.chunks(width).map(<[f64]>::to_vec).collect()
    }

    proptest! {
        #[test]
        fn linear_matches_row_products((r, f, k) in (1..6usize, 1..6usize, 1..6usize),
                                       seed in values(6 * 6 + 6 * 6 + 6)) {
            let x = seed[..r * f].to_vec();
            let w = seed[36..36 + k * f].to_vec();
            let b = seed[72..72 + k].to_vec();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new([r, f], x.clone()).unwrap());
            let wv = tape.constant(Tensor::new([k, f], w.clone()).unwrap());
            let bv = tape.constant(Tensor::new([k], b.clone()).unwrap());
            let y = tape.linear(xv, wv, Some(bv)).unwrap();
            let want = reference::conv_rows(&rows(&x, f), &rows(&w, f), Some(&b));
            prop_assert!(close(tape.value(y).data(), &reference::flatten(&want)));
        }

        #[test]
        fn strided_conv_matches_sliding_window((n, windows, k) in (1..5usize, 1..5usize, 1..4usize),
                                               seed in values(4 * 4 + 3 * 4)) {
            let signal = seed[..n * windows].to_vec();
            let kernels = seed[16..16 + k * n].to_vec();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new([n * windows, 1], signal.clone()).unwrap());
            let kv = tape.constant(Tensor::new([k, 1, n], kernels.clone()).unwrap());
            let y = tape.conv2d_strided(xv, kv, None, n).unwrap();
            prop_assert_eq!(tape.shape(y), &[windows, k]);
            let want = reference::sliding_conv(&signal, &rows(&kernels, n), n);
            prop_assert!(close(tape.value(y).data(), &reference::flatten(&want)));
        }

        #[test]
        fn deconv_matches_scatter((w, s, c_in, c_out) in (1..5usize, 1..5usize, 1..4usize, 1..4usize),
                                  seed in values(4 * 3 + 4 * 3 * 3)) {
            let x = seed[..w * c_in].to_vec();
            let kernels = seed[12..12 + s * c_out * c_in].to_vec();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new([w, c_in], x.clone()).unwrap());
            let kv = tape.constant(Tensor::new([s, c_out, c_in], kernels.clone()).unwrap());
            let y = tape.deconv_width(xv, kv, None, s).unwrap();
            let nested: Vec<Vec<Vec<f64>>> = kernels.chunks(c_out * c_in).map(|t| rows(t, c_in)).collect();
            let want = reference::deconv(&rows(&x, c_in), &nested, s);
            prop_assert!(close(tape.value(y).data(), &reference::flatten(&want)));
        }

        #[test]
        fn softmax_and_squash_match_reference((r, c) in (1..5usize, 1..6usize), seed in values(30)) {
            let x = seed[..r * c].to_vec();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new([r, c], x.clone()).unwrap());
            let sm = tape.softmax_rows(xv).unwrap();
            let sq = tape.squash(xv).unwrap();
            let want_sm: Vec<f64> = rows(&x, c).iter().flat_map(|row| reference::softmax(row)).collect();
            let want_sq: Vec<f64> = rows(&x, c).iter().flat_map(|row| reference::squash(row)).collect();
            prop_assert!(close(tape.value(sm).data(), &want_sm));
            prop_assert!(close(tape.value(sq).data(), &want_sq));
        }

        #[test]
        fn chamfer_matches_brute_force((n, m) in (1..8usize, 1..8usize), seed in values(48)) {
            let x: Vec<[f64; 3]> = seed[..3 * n].chunks(3).map(|p| [p[0], p[1], p[2]]).collect();
            let y: Vec<[f64; 3]> = seed[24..24 + 3 * m].chunks(3).map(|p| [p[0], p[1], p[2]]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new([1, n, 3], seed[..3 * n].to_vec()).unwrap());
            let yv = tape.constant(Tensor::new([1, m, 3], seed[24..24 + 3 * m].to_vec()).unwrap());
            let cd = tape.chamfer(xv, yv).unwrap();
            prop_assert!(close(&[tape.value(cd).item().unwrap()], &[reference::chamfer(&x, &y)]));
        }
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        // d/dx sum(x * x + x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let p = tape.param(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let y = tape.mul(c, p).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_needs_a_scalar() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn deconv_rejects_overlapping_kernels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 1]));
        let k = tape.constant(Tensor::zeros([3, 1, 1]));
        assert!(tape.deconv_width(x, k, None, 2).is_err());
    }
}
