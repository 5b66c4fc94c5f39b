//! Reverse-mode tape. A [`Tape`] is built per forward pass, borrowed
//! immutably from a [`VarStore`]; [`Tape::backward`] returns gradients for
//! every node and for every parameter that was touched.
//!
//! The op set is exactly what the models in this workspace need. Notably,
//! gradients themselves can be re-expressed *on* the tape (matmul against a
//! parameter node, transposed convolution with a shared weight node,
//! constant-mask multiplies), which is how the critic gradient penalty is
//! differentiated without a general second-order engine.

use crate::conv;
use crate::gemm;
use crate::store::{ParamId, VarStore};
use crate::Arr;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise multiply by a constant tensor (no gradient into the mask).
    MulConst(NodeId, Arr),
    /// k * x + c (the constant drops out of the gradient)
    Affine(NodeId, f64),
    /// [N,F] + [F] or [N,C,H,W] + [C]
    AddBias(NodeId, NodeId),
    /// [m,k] x [k,n]
    Matmul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Ln(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        /// cached (x_hat, inv_std); in eval mode inv_std comes from running stats
        cache: (Arr, Array1<f64>),
    },
    Reshape(NodeId),
    /// Concatenate along axis 1.
    Concat1(NodeId, NodeId),
    /// Slice axis 1 over [start, end).
    Slice1(NodeId, usize, usize),
    /// Row gather from a [V, E] table.
    Gather(NodeId, Vec<usize>),
    /// Log-softmax over the last axis of [N, V].
    LogSoftmax(NodeId),
    /// out[i] = x[i, idx[i]] for [N, V] input.
    PickRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    /// Sum over all axes except 0.
    SumPerSample(NodeId),
    /// Broadcast [N,C,1,1] over the spatial grid.
    Tile2d(NodeId),
    /// 2-D matrix transpose.
    Transpose2(NodeId),
}

struct Node {
    op: Op,
    value: Option<Arr>, // None for Param (resolved through the store)
}

pub struct Tape<'s> {
    store: &'s VarStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Result of a backward pass.
pub struct Grads {
    by_node: Vec<Option<Arr>>,
    by_param: HashMap<ParamId, Arr>,
}

impl Grads {
    pub fn node(&self, id: NodeId) -> Option<&Arr> {
        self.by_node[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Arr> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Arr> {
        &self.by_param
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s VarStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(64),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &VarStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Arr) -> NodeId {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        match &self.nodes[id.0].op {
            Op::Param(pid) => self.store.get(*pid),
            _ => self.nodes[id.0].value.as_ref().unwrap(),
        }
    }

    fn v2(&self, id: NodeId) -> ndarray::ArrayView2<'_, f64> {
        self.value(id)
            .view()
            .into_dimensionality()
            .expect("expected 2-d value")
    }

    fn v4(&self, id: NodeId) -> ndarray::ArrayView4<'_, f64> {
        self.value(id)
            .view()
            .into_dimensionality()
            .expect("expected 4-d value")
    }

    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Arr) -> NodeId {
        let v = self.value(a) * &c;
        self.push(Op::MulConst(a, c), v)
    }

    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| k * x + c);
        self.push(Op::Affine(a, k), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 0.0)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(b);
        let blen = bv.len();
        let v = match xv.ndim() {
            2 => {
                let mut out = xv.to_owned();
                let b1 = bv.view().into_shape_with_order(IxDyn(&[1, blen])).unwrap();
                out += &b1;
                out
            }
            4 => {
                let mut out = xv.to_owned();
                let b1 = bv
                    .view()
                    .into_shape_with_order(IxDyn(&[1, blen, 1, 1]))
                    .unwrap();
                out += &b1;
                out
            }
            d => panic!("add_bias on {d}-d tensor"),
        };
        self.push(Op::AddBias(x, b), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = gemm::matmul(self.v2(a), self.v2(b)).into_dyn();
        self.push(Op::Matmul(a, b), v)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv::conv2d(&self.v4(x), &self.v4(w), stride, pad).into_dyn();
        self.push(Op::Conv2d { x, w, stride, pad }, v)
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv::conv_transpose2d(&self.v4(x), &self.v4(w), stride, pad).into_dyn();
        self.push(Op::ConvT2d { x, w, stride, pad }, v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|v| v.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let v = self.value(x).mapv(|v| if v > 0.0 { v } else { alpha * v });
        self.push(Op::LeakyRelu(x, alpha), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x), v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::exp);
        self.push(Op::Exp(x), v)
    }

    /// sqrt(x + eps), eps keeping the derivative finite at 0.
    pub fn sqrt_eps(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = self.value(x).mapv(|v| (v + eps).sqrt());
        self.push(Op::Sqrt(x), v)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::ln);
        self.push(Op::Ln(x), v)
    }

    /// Batch norm over [N, C, H, W] (per-channel) or [N, F] (per-feature).
    /// In train mode the caller receives the batch statistics to fold into
    /// its running averages.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        running: (&Array1<f64>, &Array1<f64>),
        eps: f64,
    ) -> (NodeId, Option<(Array1<f64>, Array1<f64>)>) {
        let xv = self.value(x).to_owned();
        let c = self.value(gamma).len();
        let x2 = channels_last(&xv, c);
        let n = x2.nrows() as f64;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mean = x2.mean_axis(Axis(0)).unwrap();
                let diff = &x2 - &mean.view().insert_axis(Axis(0));
                let var = diff.mapv(|d| d * d).mean_axis(Axis(0)).unwrap();
                (mean, var)
            }
            BnMode::Eval => (running.0.clone(), running.1.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat2 = (&x2 - &mean.view().insert_axis(Axis(0)))
            * &inv_std.view().insert_axis(Axis(0));
        let gv = self.value(gamma).to_owned();
        let bv = self.value(beta).to_owned();
        let g1 = gv.view().into_shape_with_order((1, c)).unwrap().to_owned();
        let b1 = bv.view().into_shape_with_order((1, c)).unwrap().to_owned();
        let y2 = &xhat2 * &g1 + &b1;
        let y = channels_restore(&y2, xv.shape(), c);
        let xhat = channels_restore(&xhat2, xv.shape(), c);
        let stats = match mode {
            BnMode::Train => Some((mean, var.mapv(|v| v * n / (n - 1.0).max(1.0)))),
            BnMode::Eval => None,
        };
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                cache: (xhat, inv_std),
            },
            y,
        );
        (id, stats)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.push(Op::Reshape(x), v)
    }

    pub fn concat1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat shape mismatch");
        self.push(Op::Concat1(a, b), v)
    }

    pub fn slice1(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self
            .value(x)
            .slice_axis(Axis(1), ndarray::Slice::from(start..end))
            .to_owned();
        self.push(Op::Slice1(x, start, end), v)
    }

    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let t = self.v2(table);
        let e = t.ncols();
        let mut out = Array2::<f64>::zeros((indices.len(), e));
        for (i, &ix) in indices.iter().enumerate() {
            out.row_mut(i).assign(&t.row(ix));
        }
        self.push(Op::Gather(table, indices.to_vec()), out.into_dyn())
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.v2(x);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(Op::LogSoftmax(x), out.into_dyn())
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let ls = self.log_softmax(x);
        self.exp(ls)
    }

    pub fn pick_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let xv = self.v2(x);
        let out =
            Array1::from_iter(indices.iter().enumerate().map(|(i, &ix)| xv[[i, ix]]));
        self.push(Op::PickRows(x, indices.to_vec()), out.into_dyn())
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Op::SumAll(x), ndarray::arr1(&[s]).into_dyn())
    }

    pub fn sum_per_sample(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let flat = xv.view().into_shape_with_order((n, xv.len() / n)).unwrap();
        let s = flat.sum_axis(Axis(1));
        self.push(Op::SumPerSample(x), s.into_dyn())
    }

    /// Transpose a [m,n] matrix.
    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let v = self.v2(x).t().as_standard_layout().into_owned().into_dyn();
        self.push(Op::Transpose2(x), v)
    }

    /// Broadcast a [N,C,1,1] tensor to [N,C,h,w].
    pub fn tile_spatial(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = self.value(x);
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(xv.len(), n * c, "tile_spatial input must be [N,C,1,1]");
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
        {
            let flat = xv.view().into_shape_with_order((n, c)).unwrap();
            let mut o4 = out
                .view_mut()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    o4.slice_mut(ndarray::s![ni, ci, .., ..]).fill(flat[[ni, ci]]);
                }
            }
        }
        self.push(Op::Tile2d(x), out)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// mean((a - b)^2) over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[[0]]
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Grads {
        let rv = self.value(root);
        assert_eq!(rv.len(), 1, "backward root must be scalar");
        let seed = ArrayD::ones(rv.raw_dim());
        self.backward_multi(vec![(root, seed)])
    }

    /// Reverse pass from several roots with explicit output gradients. This
    /// is how gradients cross model boundaries: a frozen downstream model
    /// computes its input gradient on its own tape, which then seeds the
    /// producing node here.
    pub fn backward_multi(&self, seeds: Vec<(NodeId, Arr)>) -> Grads {
        self.backward_impl(seeds, None)
    }

    /// Reverse pass computing only the gradients of `wanted` nodes:
    /// gradient flow into subgraphs that cannot reach a wanted node is
    /// skipped entirely (no parameter gradients). Used when differentiating
    /// through frozen models where only an input gradient matters.
    pub fn backward_wrt(&self, seeds: Vec<(NodeId, Arr)>, wanted: &[NodeId]) -> Grads {
        self.backward_impl(seeds, Some(wanted))
    }

    fn backward_impl(&self, seeds: Vec<(NodeId, Arr)>, wanted: Option<&[NodeId]>) -> Grads {
        // usefulness: a node matters iff it is wanted or feeds one that is
        let useful: Vec<bool> = match wanted {
            None => vec![true; self.nodes.len()],
            Some(wanted) => {
                let mut useful = vec![false; self.nodes.len()];
                for w in wanted {
                    useful[w.0] = true;
                }
                for i in 0..self.nodes.len() {
                    if useful[i] {
                        continue;
                    }
                    let feeds_useful = self
                        .inputs_of(i)
                        .iter()
                        .any(|inp| useful[inp.0]);
                    if feeds_useful {
                        useful[i] = true;
                    }
                }
                useful
            }
        };
        let mut by_node: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        let mut hi = 0;
        for (root, seed) in seeds {
            assert_eq!(
                seed.shape(),
                self.value(root).shape(),
                "seed shape mismatch at node {}",
                root.0
            );
            hi = hi.max(root.0);
            Self::acc(&mut by_node, root, seed);
        }
        for i in (0..=hi).rev() {
            let g = match by_node[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut by_node, &useful);
            by_node[i] = Some(g);
        }
        let mut by_param = HashMap::new();
        if wanted.is_none() {
            for (&pid, &nid) in &self.param_nodes {
                if let Some(g) = &by_node[nid.0] {
                    by_param.insert(pid, g.clone());
                }
            }
        }
        Grads { by_node, by_param }
    }

    fn inputs_of(&self, i: usize) -> Vec<NodeId> {
        use Op::*;
        match &self.nodes[i].op {
            Constant | Param(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) | AddBias(a, b) | Concat1(a, b) => {
                vec![*a, *b]
            }
            MulConst(a, _)
            | Affine(a, _)
            | Relu(a)
            | LeakyRelu(a, _)
            | Tanh(a)
            | Sigmoid(a)
            | Exp(a)
            | Sqrt(a)
            | Ln(a)
            | Reshape(a)
            | Slice1(a, _, _)
            | Gather(a, _)
            | LogSoftmax(a)
            | PickRows(a, _)
            | SumAll(a)
            | SumPerSample(a)
            | Tile2d(a)
            | Transpose2(a) => vec![*a],
            Conv2d { x, w, .. } | ConvT2d { x, w, .. } => vec![*x, *w],
            BatchNorm {
                x, gamma, beta, ..
            } => vec![*x, *gamma, *beta],
        }
    }

    fn acc(by_node: &mut [Option<Arr>], id: NodeId, g: Arr) {
        match &mut by_node[id.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn accumulate(&self, i: usize, g: &Arr, by_node: &mut [Option<Arr>], useful: &[bool]) {
        use Op::*;
        let u = |id: &NodeId| useful[id.0];
        match &self.nodes[i].op {
            Constant | Param(_) => {}
            Add(a, b) => {
                if u(a) {
                    Self::acc(by_node, *a, g.clone());
                }
                if u(b) {
                    Self::acc(by_node, *b, g.clone());
                }
            }
            Sub(a, b) => {
                if u(a) {
                    Self::acc(by_node, *a, g.clone());
                }
                if u(b) {
                    Self::acc(by_node, *b, g.mapv(|v| -v));
                }
            }
            Mul(a, b) => {
                if u(a) {
                    Self::acc(by_node, *a, g * self.value(*b));
                }
                if u(b) {
                    Self::acc(by_node, *b, g * self.value(*a));
                }
            }
            MulConst(a, c) => {
                if u(a) {
                    Self::acc(by_node, *a, g * c);
                }
            }
            Affine(a, k) => {
                if u(a) {
                    Self::acc(by_node, *a, g.mapv(|v| v * k));
                }
            }
            AddBias(x, b) => {
                if u(x) {
                    Self::acc(by_node, *x, g.clone());
                }
                if u(b) {
                    let blen = self.value(*b).len();
                    let gb = match g.ndim() {
                        2 => g
                            .view()
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .sum_axis(Axis(0)),
                        4 => {
                            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                            let mut out = Array1::zeros(blen);
                            for c in 0..blen {
                                out[c] = g4.index_axis(Axis(1), c).sum();
                            }
                            out
                        }
                        d => panic!("add_bias grad on {d}-d"),
                    };
                    Self::acc(by_node, *b, gb.into_dyn());
                }
            }
            Matmul(a, b) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if u(a) {
                    let bv = self.v2(*b);
                    Self::acc(by_node, *a, gemm::matmul(gv.view(), bv.t()).into_dyn());
                }
                if u(b) {
                    let av = self.v2(*a);
                    Self::acc(by_node, *b, gemm::matmul(av.t(), gv.view()).into_dyn());
                }
            }
            Conv2d { x, w, stride, pad } => {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (gx, gw) = conv::conv2d_backward(
                    &self.v4(*x),
                    &self.v4(*w),
                    &g4.view(),
                    *stride,
                    *pad,
                    u(x),
                    u(w),
                );
                if let Some(gx) = gx {
                    Self::acc(by_node, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    Self::acc(by_node, *w, gw.into_dyn());
                }
            }
            ConvT2d { x, w, stride, pad } => {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (gx, gw) = conv::conv_transpose2d_backward(
                    &self.v4(*x),
                    &self.v4(*w),
                    &g4.view(),
                    *stride,
                    *pad,
                    u(x),
                    u(w),
                );
                if let Some(gx) = gx {
                    Self::acc(by_node, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    Self::acc(by_node, *w, gw.into_dyn());
                }
            }
            Relu(x) => {
                if !u(x) {
                    return;
                }
                let y = self.nodes[i].value.as_ref().unwrap();
                Self::acc(by_node, *x, g * &y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            LeakyRelu(x, alpha) => {
                if !u(x) {
                    return;
                }
                let y = self.nodes[i].value.as_ref().unwrap();
                Self::acc(
                    by_node,
                    *x,
                    g * &y.mapv(|v| if v > 0.0 { 1.0 } else { *alpha }),
                );
            }
            Tanh(x) => {
                if !u(x) {
                    return;
                }
                let y = self.nodes[i].value.as_ref().unwrap();
                Self::acc(by_node, *x, g * &y.mapv(|v| 1.0 - v * v));
            }
            Sigmoid(x) => {
                if !u(x) {
                    return;
                }
                let y = self.nodes[i].value.as_ref().unwrap();
                Self::acc(by_node, *x, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Exp(x) => {
                if !u(x) {
                    return;
                }
                let y = self.nodes[i].value.as_ref().unwrap();
                Self::acc(by_node, *x, g * y);
            }
            Sqrt(x) => {
                if !u(x) {
                    return;
                }
                let y = self.nodes[i].value.as_ref().unwrap();
                Self::acc(by_node, *x, g * &y.mapv(|v| 0.5 / v));
            }
            Ln(x) => {
                if !u(x) {
                    return;
                }
                let xv = self.value(*x);
                Self::acc(by_node, *x, g / xv);
            }
            BatchNorm {
                x,
                gamma,
                beta,
                mode,
                cache,
            } => {
                if !u(x) && !u(gamma) && !u(beta) {
                    return;
                }
                let (xhat, inv_std) = cache;
                let c = inv_std.len();
                let g2 = channels_last(g, c);
                let xhat2 = channels_last(xhat, c);
                let ggamma = (&g2 * &xhat2).sum_axis(Axis(0));
                let gbeta = g2.sum_axis(Axis(0));
                let gammav = self.value(*gamma);
                let gamma1 = gammav.view().into_shape_with_order((1, c)).unwrap();
                let gx2 = match mode {
                    BnMode::Eval => {
                        &g2 * &gamma1 * &inv_std.view().insert_axis(Axis(0))
                    }
                    BnMode::Train => {
                        let n = g2.nrows() as f64;
                        let gxhat = &g2 * &gamma1;
                        let sum_g = gxhat.sum_axis(Axis(0));
                        let sum_gx = (&gxhat * &xhat2).sum_axis(Axis(0));
                        let t = &gxhat * n
                            - &sum_g.view().insert_axis(Axis(0))
                            - &xhat2 * &sum_gx.view().insert_axis(Axis(0));
                        t * &inv_std.view().insert_axis(Axis(0)) / n
                    }
                };
                if u(x) {
                    let gx = channels_restore(&gx2, self.value(*x).shape(), c);
                    Self::acc(by_node, *x, gx);
                }
                if u(gamma) {
                    Self::acc(by_node, *gamma, ggamma.into_dyn());
                }
                if u(beta) {
                    Self::acc(by_node, *beta, gbeta.into_dyn());
                }
            }
            Reshape(x) => {
                if !u(x) {
                    return;
                }
                let shp = self.value(*x).raw_dim();
                Self::acc(
                    by_node,
                    *x,
                    g.view().into_shape_with_order(shp).unwrap().to_owned(),
                );
            }
            Concat1(a, b) => {
                let na = self.value(*a).shape()[1];
                if u(a) {
                    let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..na)).to_owned();
                    Self::acc(by_node, *a, ga);
                }
                if u(b) {
                    let gb = g
                        .slice_axis(Axis(1), ndarray::Slice::from(na..g.shape()[1]))
                        .to_owned();
                    Self::acc(by_node, *b, gb);
                }
            }
            Slice1(x, start, end) => {
                if !u(x) {
                    return;
                }
                let mut gx = ArrayD::zeros(self.value(*x).raw_dim());
                gx.slice_axis_mut(Axis(1), ndarray::Slice::from(*start..*end))
                    .assign(g);
                Self::acc(by_node, *x, gx);
            }
            Gather(table, indices) => {
                if !u(table) {
                    return;
                }
                let t = self.v2(*table);
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut gt = Array2::<f64>::zeros(t.dim());
                for (i, &ix) in indices.iter().enumerate() {
                    let mut row = gt.row_mut(ix);
                    row += &g2.row(i);
                }
                Self::acc(by_node, *table, gt.into_dyn());
            }
            LogSoftmax(x) => {
                if !u(x) {
                    return;
                }
                let y = self.nodes[i].value.as_ref().unwrap();
                let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut gx = g2.to_owned();
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y2.rows()) {
                    let gsum: f64 = grow.sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow.iter()) {
                        *gv -= yv.exp() * gsum;
                    }
                }
                Self::acc(by_node, *x, gx.into_dyn());
            }
            PickRows(x, indices) => {
                if !u(x) {
                    return;
                }
                let mut gx = ArrayD::zeros(self.value(*x).raw_dim());
                {
                    let mut gx2 = gx
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    for (i, &ix) in indices.iter().enumerate() {
                        gx2[[i, ix]] = g1[i];
                    }
                }
                Self::acc(by_node, *x, gx);
            }
            SumAll(x) => {
                if !u(x) {
                    return;
                }
                let gv = g[[0]];
                Self::acc(
                    by_node,
                    *x,
                    ArrayD::from_elem(self.value(*x).raw_dim(), gv),
                );
            }
            SumPerSample(x) => {
                if !u(x) {
                    return;
                }
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let mut gx = ArrayD::zeros(xv.raw_dim());
                {
                    let mut flat = gx
                        .view_mut()
                        .into_shape_with_order((n, xv.len() / n))
                        .unwrap();
                    let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    for r in 0..n {
                        flat.row_mut(r).fill(g1[r]);
                    }
                }
                Self::acc(by_node, *x, gx);
            }
            Transpose2(x) => {
                if !u(x) {
                    return;
                }
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                Self::acc(
                    by_node,
                    *x,
                    g2.t().as_standard_layout().into_owned().into_dyn(),
                );
            }
            Tile2d(x) => {
                if !u(x) {
                    return;
                }
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gx = ArrayD::zeros(xv.raw_dim());
                {
                    let mut flat = gx.view_mut().into_shape_with_order((n, c)).unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            flat[[ni, ci]] = g4.slice(ndarray::s![ni, ci, .., ..]).sum();
                        }
                    }
                }
                Self::acc(by_node, *x, gx);
            }
        }
    }
}

/// Flatten to [rows, C] with the channel axis last; works for [N, F] (C=F)
/// and [N, C, H, W] tensors.
fn channels_last(x: &Arr, c: usize) -> Array2<f64> {
    match x.ndim() {
        2 => x
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned(),
        4 => {
            let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (n, cc, h, w) = x4.dim();
            debug_assert_eq!(cc, c);
            x4.permuted_axes([0, 2, 3, 1])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n * h * w, c))
                .unwrap()
        }
        d => panic!("batch_norm on {d}-d tensor"),
    }
}

fn channels_restore(x2: &Array2<f64>, shape: &[usize], c: usize) -> Arr {
    match shape.len() {
        2 => x2.clone().into_dyn(),
        4 => {
            let (n, _cc, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let t = x2
                .view()
                .into_shape_with_order((n, h, w, c))
                .unwrap()
                .permuted_axes([0, 3, 1, 2]);
            t.as_standard_layout().into_owned().into_dyn()
        }
        d => panic!("batch_norm restore on {d}-d"),
    }
}
