//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every batch. Each operation appends a node
//! holding its forward value and whatever it needs for the backward pass;
//! [`Graph::backward`] then walks the nodes in reverse insertion order, which
//! is a valid reverse topological order because inputs always precede their
//! consumers. Gradients from several consumers of one node are summed.
//!
//! Non-smooth points use fixed subgradients: ReLU at 0 and Euclidean norm at
//! 0 both get 0, and max-pooling routes to the first maximal element.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    /// Shared by window and adaptive pooling: argmax holds flat input indices.
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Reshape { x: NodeId },
    Concat { xs: Vec<NodeId>, widths: Vec<usize> },
    SliceCols { x: NodeId, start: usize, width: usize },
    GatherRows { x: NodeId, rows: Vec<usize> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    AddScalar { x: NodeId },
    Sum { x: NodeId },
    RowNorm { x: NodeId, squared: bool },
    SoftmaxCe {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<Option<usize>>,
        labeled: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-owner computation graph. Not `Sync`-shared: build one per worker.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    signature: u64,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, or `None` if no gradient reached it
    /// (the node is detached or does not influence the loss).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Hash of every discrete branch decision taken so far (ReLU signs,
    /// pooling argmaxes, zero norms). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    fn mix(&mut self, v: u64) {
        self.signature ^= v;
        self.signature = self.signature.wrapping_mul(0x0100_0000_01b3);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` filters.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        expect_rank("conv2d", self.value(x), 4)?;
        expect_rank("conv2d", self.value(w), 4)?;
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input channels (axis 1) {} vs filter channels (axis 1) {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {bs:?} vs {} filters (axis 0)", ws[0]),
            ));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{} (axes 2,3)", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w: wd,
            f: ws[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![geom.n, geom.f, geom.oh, geom.ow], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, geom }))
    }

    fn pool_with_bins(
        &mut self,
        x: NodeId,
        ybins: Vec<(usize, usize)>,
        xbins: Vec<(usize, usize)>,
    ) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        let (vals, argmax) = kernels::region_max(
            s[0] * s[1],
            s[2],
            s[3],
            &ybins,
            &xbins,
            self.value(x).data(),
        );
        for &i in &argmax {
            self.mix(i as u64);
        }
        let value = Tensor::new(vec![s[0], s[1], ybins.len(), xbins.len()], vals)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
    }

    pub fn maxpool(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        expect_rank("maxpool", self.value(x), 4)?;
        let s = self.value(x).shape();
        if window == 0 || stride == 0 {
            return Err(Error::dim("maxpool", "window and stride must be positive"));
        }
        if window > s[2] || window > s[3] {
            return Err(Error::dim(
                "maxpool",
                format!("window {window} exceeds spatial extent {}x{}", s[2], s[3]),
            ));
        }
        let ybins = kernels::window_bins(s[2], window, stride);
        let xbins = kernels::window_bins(s[3], window, stride);
        self.pool_with_bins(x, ybins, xbins)
    }

    /// Max over a 3x3 grid of floor-partitioned bins, giving `[N,C,3,3]`.
    pub fn adaptive_maxpool_3x3(&mut self, x: NodeId) -> Result<NodeId> {
        expect_rank("adaptive_maxpool_3x3", self.value(x), 4)?;
        let s = self.value(x).shape();
        if s[2] < 3 || s[3] < 3 {
            return Err(Error::dim(
                "adaptive_maxpool_3x3",
                format!("spatial extent {}x{} smaller than 3x3", s[2], s[3]),
            ));
        }
        let ybins = kernels::adaptive_bins(s[2], 3);
        let xbins = kernels::adaptive_bins(s[3], 3);
        self.pool_with_bins(x, ybins, xbins)
    }

    /// `x[N,D] * w[D,M] + b[M]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        expect_rank("fully_connected", self.value(x), 2)?;
        expect_rank("fully_connected", self.value(w), 2)?;
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::dim(
                "fully_connected",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(
            n,
            d,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, rg, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let mut bits = 0u64;
        let mut data = Vec::with_capacity(src.len());
        let mut mixes = Vec::new();
        for (i, &v) in src.data().iter().enumerate() {
            let on = v > 0.0;
            bits = (bits << 1) | on as u64;
            if i % 64 == 63 {
                mixes.push(bits);
            }
            data.push(if on { v } else { 0.0 });
        }
        mixes.push(bits);
        for m in mixes {
            self.mix(m);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data).unwrap(), rg, Op::Relu { x })
    }

    /// Row-major reshape of `[N,...]` into `[N,D]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.ndim() < 1 {
            return Err(Error::dim("flatten", "scalar input"));
        }
        let n = t.shape()[0];
        let d = if n == 0 { 0 } else { t.len() / n };
        let value = t.clone().reshape(vec![n, d])?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Feature-axis concatenation of `[N,d_i]` tensors.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let n = self.value(first).shape()[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            expect_rank("concat", t, 2)?;
            if t.shape()[0] != n {
                return Err(Error::dim(
                    "concat",
                    format!("leading extent {} vs {n}", t.shape()[0]),
                ));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        let rg = self.rg(xs);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                widths,
            },
        ))
    }

    /// Columns `[start, end)` of a `[N,D]` tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(x);
        expect_rank("slice_cols", t, 2)?;
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if start > end || end > d {
            return Err(Error::dim(
                "slice_cols",
                format!("range {start}..{end} outside width {d}"),
            ));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(&t.data()[r * d + start..r * d + end]);
        }
        let value = Tensor::new(vec![n, width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::SliceCols { x, start, width }))
    }

    /// Selects rows of the leading axis (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let n = t.shape()[0];
        let stride = if n == 0 { 0 } else { t.len() / n };
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::dim(
                    "gather_rows",
                    format!("row {r} out of {n}"),
                ));
            }
            data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * k).collect())
            .unwrap();
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())
            .unwrap();
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::AddScalar { x })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum(x);
        if n == 0 {
            return s;
        }
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row Euclidean norm (or squared norm) of `[N,D]`, giving `[N]`.
    pub fn row_norm(&mut self, x: NodeId, squared: bool) -> Result<NodeId> {
        let t = self.value(x);
        expect_rank("row_norm", t, 2)?;
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(n);
        let mut zero_bits = Vec::new();
        for r in 0..n {
            let ss: f64 = t.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum();
            out.push(if squared { ss } else { ss.sqrt() });
            zero_bits.push((ss == 0.0) as u64);
        }
        if !squared {
            for z in zero_bits {
                self.mix(z);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(out), rg, Op::RowNorm { x, squared }))
    }

    /// Mean softmax cross-entropy over labelled rows. `None` labels contribute
    /// neither loss nor gradient; with no labelled rows the result is a
    /// detached constant 0.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[Option<usize>],
    ) -> Result<NodeId> {
        let t = self.value(logits);
        expect_rank("softmax_cross_entropy", t, 2)?;
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        for (row, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l >= k {
                    return Err(Error::LabelRange {
                        row,
                        label: l,
                        classes: k,
                    });
                }
            }
        }
        let labeled = labels.iter().filter(|l| l.is_some()).count();
        if labeled == 0 {
            return Ok(self.input(Tensor::scalar(0.0)));
        }
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for r in 0..n {
            let z = &t.data()[r * k..(r + 1) * k];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + se.ln();
            for j in 0..k {
                probs[r * k + j] = (z[j] - lse).exp();
            }
            if let Some(l) = labels[r] {
                total += lse - z[l];
            }
        }
        let value = Tensor::scalar(total / labeled as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
                labeled,
            },
        ))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).unwrap()))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let want_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    want_dx,
                );
                if let (Some(dx), Some(s)) = (dx, self.slot(grads, *x)) {
                    add_into(s, &dx);
                }
                if let Some(s) = self.slot(grads, *w) {
                    add_into(s, &dw);
                }
                if let Some(s) = self.slot(grads, *b) {
                    add_into(s, &db);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        s[src] += gv;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let m = self.value(*w).shape()[1];
                if let Some(s) = self.slot(grads, *x) {
                    kernels::gemm(n, m, d, g, false, self.value(*w).data(), true, s, 1.0);
                }
                if let Some(s) = self.slot(grads, *w) {
                    kernels::gemm(d, n, m, self.value(*x).data(), true, g, false, s, 1.0);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for r in 0..n {
                        add_into(s, &g[r * m..(r + 1) * m]);
                    }
                }
            }
            Op::Relu { x } => {
                let out = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((sv, gv), ov) in s.iter_mut().zip(g).zip(out) {
                        if *ov > 0.0 {
                            *sv += gv;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(s) = self.slot(grads, *x) {
                    add_into(s, g);
                }
            }
            Op::Concat { xs, widths } => {
                let total: usize = widths.iter().sum();
                let n = node.value.shape()[0];
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    if let Some(s) = self.slot(grads, x) {
                        for r in 0..n {
                            add_into(
                                &mut s[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start, width } => {
                let d = self.value(*x).shape()[1];
                let n = node.value.shape()[0];
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..n {
                        add_into(
                            &mut s[r * d + start..r * d + start + width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let n = self.value(*x).shape()[0];
                let stride = if n == 0 { 0 } else { self.value(*x).len() / n };
                if let Some(s) = self.slot(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut s[r * stride..(r + 1) * stride],
                            &g[k * stride..(k + 1) * stride],
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    add_into(s, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv -= gv;
                    }
                }
            }
            Op::Scale { x, k } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += gv * k;
                    }
                }
            }
            Op::AddScalar { x } => {
                if let Some(s) = self.slot(grads, *x) {
                    add_into(s, g);
                }
            }
            Op::Sum { x } => {
                if let Some(s) = self.slot(grads, *x) {
                    for sv in s.iter_mut() {
                        *sv += g[0];
                    }
                }
            }
            Op::RowNorm { x, squared } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let norms = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, (&nrm, &gv)) in norms.iter().zip(g).enumerate() {
                        let row = &xv.data()[r * d..(r + 1) * d];
                        let coef = if *squared {
                            2.0 * gv
                        } else if nrm > 0.0 {
                            gv / nrm
                        } else {
                            0.0
                        };
                        for (sv, &xv) in s[r * d..(r + 1) * d].iter_mut().zip(row) {
                            *sv += coef * xv;
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                labeled,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / *labeled as f64;
                if let Some(s) = self.slot(grads, *logits) {
                    for (r, l) in labels.iter().enumerate() {
                        let Some(l) = *l else { continue };
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            s[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
