//! A small reverse-mode autodiff tape for convolutional image-to-image
//! networks, generic over `f32` (training) and `f64` (gradient checking).
//!
//! Each training step builds one [`Graph`]: leaves are inserted for inputs
//! (no gradient) and parameters (gradient tracked), ops append nodes in
//! topological order, and [`Graph::backward`] walks the tape in reverse.
//! Freezing a network for a step is done structurally — insert its
//! parameters with [`Graph::input`] and they receive no gradient at all.

pub mod conv;

use crate::error::{Error, Result};
use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

use conv::{conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward};

/// Element type of a graph: `f32` or `f64`.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Numerically stable `ln(1 + exp(z))`.
pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Handle to a node in a [`Graph`]; only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    InstanceNorm {
        x: NodeId,
        /// `(mean, 1/sqrt(var + eps))` per (sample, channel), cached at forward.
        stats: Vec<(T, T)>,
    },
    ConcatC {
        a: NodeId,
        b: NodeId,
    },
    ConcatBatch {
        parts: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    ChannelMean {
        x: NodeId,
    },
    BroadcastC {
        x: NodeId,
        channels: usize,
    },
    /// `mean(softplus(-s))`: cross-entropy of logits `s` against label "real".
    BceRealMean {
        s: NodeId,
    },
    /// `mean(softplus(s))`: cross-entropy of logits `s` against label "fake".
    BceFakeMean {
        s: NodeId,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
    MseMean {
        a: NodeId,
        b: NodeId,
    },
    /// `sum_i k_i * v_i` over scalar nodes.
    WeightedSum {
        terms: Vec<(T, NodeId)>,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape: append-only node arena plus a gradient slot per node.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        // The conv kernels index node values as flat slices, so every value
        // on the tape is kept in standard (row-major, contiguous) layout.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a constant: no gradient is computed or stored for it.
    pub fn input(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a trainable leaf whose gradient [`Graph::grad`] will report.
    pub fn param(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    /// Extracts a scalar node's value.
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        *self.nodes[id.0].value.iter().next().expect("scalar node")
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `id`,
    /// or `None` if the node does not require (or did not receive) one.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads[id.0].as_ref()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn view4(&self, id: NodeId) -> Result<ndarray::ArrayView4<'_, T>> {
        self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| {
                Error::Dimension(format!(
                    "expected a (n, c, h, w) tensor, got shape {:?}",
                    self.nodes[id.0].value.shape()
                ))
            })
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Op constructors
    // ------------------------------------------------------------------

    /// 2-D convolution; `w` is `(c_out, c_in, kh, kw)`, zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let bias_view = match b {
            Some(bid) => Some(
                self.nodes[bid.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::Dimension("conv bias must be rank 1".into()))?,
            ),
            None => None,
        };
        let out = conv2d_forward(self.view4(x)?, self.view4(w)?, bias_view, stride, pad)?;
        let req =
            self.requires(x) || self.requires(w) || b.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            req,
        ))
    }

    /// Transposed 2-D convolution; `w` is `(c_in, c_out, kh, kw)`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let bias_view = match b {
            Some(bid) => Some(
                self.nodes[bid.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::Dimension("conv bias must be rank 1".into()))?,
            ),
            None => None,
        };
        let out =
            conv_transpose2d_forward(self.view4(x)?, self.view4(w)?, bias_view, stride, pad)?;
        let req =
            self.requires(x) || self.requires(w) || b.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            out.into_dyn(),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            req,
        ))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let k = T::from_f64(slope);
        let out = self.nodes[x.0]
            .value
            .mapv(|v| if v > T::zero() { v } else { v * k });
        let req = self.requires(x);
        self.push(out, Op::LeakyRelu { x, slope: k }, req)
    }

    /// Per-(sample, channel) normalization to zero mean / unit variance over
    /// the spatial axes (no learned affine).
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.view4(x)?;
        let (n, c, h, w) = xv.dim();
        let m = T::from_f64((h * w) as f64);
        let eps = T::from_f64(eps);
        let mut out = ndarray::Array4::<T>::zeros((n, c, h, w));
        let mut stats = Vec::with_capacity(n * c);
        for i in 0..n {
            for ch in 0..c {
                let plane = xv.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), ch);
                let mean = plane.iter().fold(T::zero(), |a, &v| a + v) / m;
                let var = plane
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / m;
                let inv_std = T::one() / (var + eps).sqrt();
                stats.push((mean, inv_std));
                let mut dst = out.index_axis_mut(Axis(0), i);
                let mut dst = dst.index_axis_mut(Axis(0), ch);
                ndarray::Zip::from(&mut dst)
                    .and(&plane)
                    .for_each(|o, &v| *o = (v - mean) * inv_std);
            }
        }
        let req = self.requires(x);
        Ok(self.push(out.into_dyn(), Op::InstanceNorm { x, stats }, req))
    }

    /// Concatenates two `(n, c, h, w)` tensors along the channel axis.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.view4(a)?;
        let bv = self.view4(b)?;
        let (na, _, ha, wa) = av.dim();
        let (nb, _, hb, wb) = bv.dim();
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat: incompatible shapes {:?} vs {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let out = ndarray::concatenate(Axis(1), &[av, bv]).expect("checked dims");
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out.into_dyn(), Op::ConcatC { a, b }, req))
    }

    /// Concatenates batches along axis 0. All parts must share (C, H, W).
    pub fn concat_batch(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_batch: no inputs".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let views: Vec<_> = parts
            .iter()
            .map(|&p| self.view4(p))
            .collect::<Result<_>>()?;
        let (_, c0, h0, w0) = views[0].dim();
        for v in &views[1..] {
            let (_, c, h, w) = v.dim();
            if (c, h, w) != (c0, h0, w0) {
                return Err(Error::Dimension(format!(
                    "concat_batch: incompatible shapes {:?} vs {:?}",
                    views[0].dim(),
                    v.dim()
                )));
            }
        }
        let out = ndarray::concatenate(Axis(0), &views).expect("checked dims");
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            out.into_dyn(),
            Op::ConcatBatch {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Sub { a, b }, req))
    }

    /// `(n, c, h, w) -> (n, 1, h, w)` mean over channels.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.view4(x)?;
        let c = xv.dim().1;
        let out = (xv.sum_axis(Axis(1)) / T::from_f64(c as f64)).insert_axis(Axis(1));
        let req = self.requires(x);
        Ok(self.push(out.into_dyn(), Op::ChannelMean { x }, req))
    }

    /// `(n, 1, h, w) -> (n, channels, h, w)` replication.
    pub fn broadcast_c(&mut self, x: NodeId, channels: usize) -> Result<NodeId> {
        let xv = self.view4(x)?;
        let (n, c, h, w) = xv.dim();
        if c != 1 {
            return Err(Error::Dimension(format!(
                "broadcast source must have 1 channel, got {c}"
            )));
        }
        let mut out = ndarray::Array4::<T>::zeros((n, channels, h, w));
        for ch in 0..channels {
            out.index_axis_mut(Axis(1), ch)
                .assign(&xv.index_axis(Axis(1), 0));
        }
        let req = self.requires(x);
        Ok(self.push(out.into_dyn(), Op::BroadcastC { x, channels }, req))
    }

    fn scalar_node(&mut self, v: T, op: Op<T>, req: bool) -> NodeId {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), op, req)
    }

    /// Mean binary cross-entropy of logits `s` against the "real" label,
    /// in stable softplus form: `mean(softplus(-s))`.
    pub fn bce_real_mean(&mut self, s: NodeId) -> NodeId {
        let v = mean_map(self.nodes[s.0].value.view(), |z| softplus(-z));
        let req = self.requires(s);
        self.scalar_node(v, Op::BceRealMean { s }, req)
    }

    /// Mean binary cross-entropy of logits `s` against the "fake" label:
    /// `mean(softplus(s))`.
    pub fn bce_fake_mean(&mut self, s: NodeId) -> NodeId {
        let v = mean_map(self.nodes[s.0].value.view(), softplus);
        let req = self.requires(s);
        self.scalar_node(v, Op::BceFakeMean { s }, req)
    }

    /// `mean(|a - b|)` over all elements.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "l1_mean")?;
        let m = T::from_f64(self.nodes[a.0].value.len() as f64);
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs())
            / m;
        let req = self.requires(a) || self.requires(b);
        Ok(self.scalar_node(v, Op::L1Mean { a, b }, req))
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mse_mean")?;
        let m = T::from_f64(self.nodes[a.0].value.len() as f64);
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            / m;
        let req = self.requires(a) || self.requires(b);
        Ok(self.scalar_node(v, Op::MseMean { a, b }, req))
    }

    /// Weighted sum of scalar nodes: the total-objective combinator.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let mut v = T::zero();
        let mut req = false;
        let mut held = Vec::with_capacity(terms.len());
        for &(k, id) in terms {
            if self.nodes[id.0].value.len() != 1 {
                return Err(Error::Dimension(format!(
                    "weighted_sum term must be scalar, got shape {:?}",
                    self.nodes[id.0].value.shape()
                )));
            }
            let k = T::from_f64(k);
            v = v + k * self.scalar(id);
            req = req || self.requires(id);
            held.push((k, id));
        }
        Ok(self.scalar_node(v, Op::WeightedSum { terms: held }, req))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Accumulates `delta` into the gradient slot of `id` if it tracks one.
    fn acc(grads: &mut [Option<ArrayD<T>>], nodes: &[Node<T>], id: NodeId, delta: ArrayD<T>) {
        if !nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar `root`; gradients are then readable via
    /// [`Graph::grad`]. Clears any gradients from a previous pass.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(()); // nothing upstream is trainable
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads[root.0] = Some(ArrayD::from_elem(
            nodes[root.0].value.raw_dim(),
            T::one(),
        ));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !nodes[i].requires_grad {
                continue;
            }
            // Interior gradients are taken (freed) as we pass them; leaves
            // keep theirs for the caller to read.
            let g = if matches!(nodes[i].op, Op::Leaf) {
                continue;
            } else {
                grads[i].take().expect("checked above")
            };
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let xv = nodes[x.0].value.view().into_dimensionality().unwrap();
                    let wv = nodes[w.0].value.view().into_dimensionality().unwrap();
                    let dout = g.view().into_dimensionality().unwrap();
                    let need_db = b.map(|b| nodes[b.0].requires_grad).unwrap_or(false);
                    let grads_out = conv2d_backward(
                        xv,
                        wv,
                        dout,
                        *stride,
                        *pad,
                        nodes[x.0].requires_grad,
                        nodes[w.0].requires_grad,
                        need_db,
                    );
                    if let Some(dx) = grads_out.dx {
                        Self::acc(grads, nodes, *x, dx.into_dyn());
                    }
                    if let Some(dw) = grads_out.dw {
                        Self::acc(grads, nodes, *w, dw.into_dyn());
                    }
                    if let (Some(db), Some(b)) = (grads_out.db, b) {
                        Self::acc(grads, nodes, *b, db.into_dyn());
                    }
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let xv = nodes[x.0].value.view().into_dimensionality().unwrap();
                    let wv = nodes[w.0].value.view().into_dimensionality().unwrap();
                    let dout = g.view().into_dimensionality().unwrap();
                    let need_db = b.map(|b| nodes[b.0].requires_grad).unwrap_or(false);
                    let grads_out = conv_transpose2d_backward(
                        xv,
                        wv,
                        dout,
                        *stride,
                        *pad,
                        nodes[x.0].requires_grad,
                        nodes[w.0].requires_grad,
                        need_db,
                    );
                    if let Some(dx) = grads_out.dx {
                        Self::acc(grads, nodes, *x, dx.into_dyn());
                    }
                    if let Some(dw) = grads_out.dw {
                        Self::acc(grads, nodes, *w, dw.into_dyn());
                    }
                    if let (Some(db), Some(b)) = (grads_out.db, b) {
                        Self::acc(grads, nodes, *b, db.into_dyn());
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let k = *slope;
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(&nodes[x.0].value)
                        .for_each(|d, &v| {
                            if v <= T::zero() {
                                *d = *d * k;
                            }
                        });
                    Self::acc(grads, nodes, *x, dx);
                }
                Op::InstanceNorm { x, stats } => {
                    let xv: ndarray::ArrayView4<T> =
                        nodes[x.0].value.view().into_dimensionality().unwrap();
                    let dyv: ndarray::ArrayView4<T> = g.view().into_dimensionality().unwrap();
                    let (n, c, h, w) = xv.dim();
                    let m = T::from_f64((h * w) as f64);
                    let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ch in 0..c {
                            let (mean, inv_std) = stats[i * c + ch];
                            let xp = xv.index_axis(Axis(0), i);
                            let xp = xp.index_axis(Axis(0), ch);
                            let dy = dyv.index_axis(Axis(0), i);
                            let dy = dy.index_axis(Axis(0), ch);
                            let mut sum_dy = T::zero();
                            let mut sum_dy_xhat = T::zero();
                            ndarray::Zip::from(&dy).and(&xp).for_each(|&d, &v| {
                                sum_dy = sum_dy + d;
                                sum_dy_xhat = sum_dy_xhat + d * (v - mean) * inv_std;
                            });
                            let mean_dy = sum_dy / m;
                            let mean_dy_xhat = sum_dy_xhat / m;
                            let mut dst = dx.index_axis_mut(Axis(0), i);
                            let mut dst = dst.index_axis_mut(Axis(0), ch);
                            ndarray::Zip::from(&mut dst).and(&dy).and(&xp).for_each(
                                |o, &d, &v| {
                                    let xhat = (v - mean) * inv_std;
                                    *o = inv_std * (d - mean_dy - xhat * mean_dy_xhat);
                                },
                            );
                        }
                    }
                    Self::acc(grads, nodes, *x, dx.into_dyn());
                }
                Op::ConcatC { a, b } => {
                    let ca = nodes[a.0].value.shape()[1];
                    let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                    let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
                    Self::acc(grads, nodes, *a, ga);
                    Self::acc(grads, nodes, *b, gb);
                }
                Op::ConcatBatch { parts } => {
                    let mut start = 0usize;
                    for &p in parts {
                        let n = nodes[p.0].value.shape()[0];
                        let gp = g
                            .slice_axis(Axis(0), ndarray::Slice::from(start..start + n))
                            .to_owned();
                        Self::acc(grads, nodes, p, gp);
                        start += n;
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    Self::acc(grads, nodes, a, g.clone());
                    Self::acc(grads, nodes, b, g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    Self::acc(grads, nodes, a, g.clone());
                    Self::acc(grads, nodes, b, g.mapv(|v| -v));
                }
                Op::ChannelMean { x } => {
                    let c = nodes[x.0].value.shape()[1];
                    let k = T::one() / T::from_f64(c as f64);
                    let shape = nodes[x.0].value.raw_dim();
                    let mut dx = ArrayD::<T>::zeros(shape);
                    let gsq = g.index_axis(Axis(1), 0);
                    for ch in 0..c {
                        let mut dst = dx.index_axis_mut(Axis(1), ch);
                        ndarray::Zip::from(&mut dst)
                            .and(&gsq)
                            .for_each(|o, &d| *o = d * k);
                    }
                    Self::acc(grads, nodes, *x, dx);
                }
                Op::BroadcastC { x, channels } => {
                    let mut dx = ArrayD::<T>::zeros(nodes[x.0].value.raw_dim());
                    {
                        let mut dst = dx.index_axis_mut(Axis(1), 0);
                        for ch in 0..*channels {
                            let gs = g.index_axis(Axis(1), ch);
                            ndarray::Zip::from(&mut dst)
                                .and(&gs)
                                .for_each(|o, &d| *o = *o + d);
                        }
                    }
                    Self::acc(grads, nodes, *x, dx);
                }
                Op::BceRealMean { s } => {
                    let gv = *g.iter().next().expect("scalar");
                    let m = T::from_f64(nodes[s.0].value.len() as f64);
                    let ds = nodes[s.0].value.mapv(|z| -sigmoid(-z) * gv / m);
                    Self::acc(grads, nodes, *s, ds);
                }
                Op::BceFakeMean { s } => {
                    let gv = *g.iter().next().expect("scalar");
                    let m = T::from_f64(nodes[s.0].value.len() as f64);
                    let ds = nodes[s.0].value.mapv(|z| sigmoid(z) * gv / m);
                    Self::acc(grads, nodes, *s, ds);
                }
                Op::L1Mean { a, b } => {
                    let gv = *g.iter().next().expect("scalar");
                    let m = T::from_f64(nodes[a.0].value.len() as f64);
                    let k = gv / m;
                    let mut da = ArrayD::<T>::zeros(nodes[a.0].value.raw_dim());
                    ndarray::Zip::from(&mut da)
                        .and(&nodes[a.0].value)
                        .and(&nodes[b.0].value)
                        .for_each(|o, &x, &y| {
                            *o = if x > y {
                                k
                            } else if x < y {
                                -k
                            } else {
                                T::zero()
                            }
                        });
                    let db = da.mapv(|v| -v);
                    Self::acc(grads, nodes, *a, da);
                    Self::acc(grads, nodes, *b, db);
                }
                Op::MseMean { a, b } => {
                    let gv = *g.iter().next().expect("scalar");
                    let m = T::from_f64(nodes[a.0].value.len() as f64);
                    let k = T::from_f64(2.0) * gv / m;
                    let mut da = ArrayD::<T>::zeros(nodes[a.0].value.raw_dim());
                    ndarray::Zip::from(&mut da)
                        .and(&nodes[a.0].value)
                        .and(&nodes[b.0].value)
                        .for_each(|o, &x, &y| *o = k * (x - y));
                    let db = da.mapv(|v| -v);
                    Self::acc(grads, nodes, *a, da);
                    Self::acc(grads, nodes, *b, db);
                }
                Op::WeightedSum { terms } => {
                    let gv = *g.iter().next().expect("scalar");
                    for &(k, id) in terms {
                        Self::acc(
                            grads,
                            nodes,
                            id,
                            ArrayD::from_elem(nodes[id.0].value.raw_dim(), k * gv),
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

fn mean_map<T: Scalar>(a: ArrayViewD<'_, T>, f: impl Fn(T) -> T) -> T {
    let m = T::from_f64(a.len() as f64);
    a.iter().fold(T::zero(), |acc, &v| acc + f(v)) / m
}
