//! Computation graph and reverse-mode differentiation for the fixed set of
//! operations the network needs.
//!
//! The graph is a flat list of nodes in topological order; every node caches
//! its output tensor. [`Graph::forward`] recomputes all derived nodes after
//! inputs or parameters change, and [`Graph::backward`] walks the list in
//! reverse accumulating gradients for every registered trainable parameter.
//!
//! Convolutions use stride 2 in both directions with "same"-style zero
//! padding chosen so the output spatial dims are `ceil(in/2)`: the total
//! padding per axis is `max((out-1)*2 + k - in, 0)`, split with the extra
//! cell on the bottom/right. The transposed convolution is the exact adjoint
//! of the forward convolution under this rule, which is what makes the
//! decoder invert the recorded encoder shapes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Output spatial size of a stride-2 convolution.
#[inline]
pub fn conv_out_dim(in_dim: usize) -> usize {
    in_dim.div_ceil(2)
}

/// (pad_begin, pad_end) for one axis: minimal total padding that realizes the
/// ceil output size, extra cell at the end (bottom/right).
#[inline]
fn pad_split(in_dim: usize, k: usize) -> (usize, usize) {
    let out = conv_out_dim(in_dim);
    let needed = ((out - 1) * 2 + k).saturating_sub(in_dim);
    (needed / 2, needed - needed / 2)
}

fn check_kernel(op: &'static str, kernel: &Tensor) -> Result<(usize, usize)> {
    if kernel.rank() != 4 {
        return Err(Error::shape(
            op,
            format!("kernel must be rank 4, got {:?}", kernel.shape()),
        ));
    }
    let kh = kernel.shape()[2];
    let kw = kernel.shape()[3];
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid(
            op,
            format!("kernel must be square with odd size, got {}x{}", kh, kw),
        ));
    }
    Ok((kh, kw))
}

/// Stride-2 convolution with bias.
///
/// `input` is [N, Cin, H, W], `kernel` is [Cout, Cin, k, k], `bias` is
/// [Cout]; the output is [N, Cout, ceil(H/2), ceil(W/2)].
pub fn conv2d_s2(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_kernel("conv2d_s2", kernel)?;
    if input.rank() != 4 {
        return Err(Error::shape(
            "conv2d_s2",
            format!("input must be rank 4, got {:?}", input.shape()),
        ));
    }
    let (n, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, kcin) = (kernel.shape()[0], kernel.shape()[1]);
    if kcin != cin {
        return Err(Error::shape(
            "conv2d_s2",
            format!("kernel expects {} input channels, input has {}", kcin, cin),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d_s2",
            format!("bias shape {:?}, expected [{}]", bias.shape(), cout),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("conv2d_s2", "spatial dims must be >= 1"));
    }
    let mut out = conv2d_raw(input, kernel);
    let (ho, wo) = (conv_out_dim(h), conv_out_dim(w));
    for ni in 0..n {
        for co in 0..cout {
            let base = ((ni * cout + co) * ho) * wo;
            let b = bias.data()[co];
            for idx in 0..ho * wo {
                out.data_mut()[base + idx] += b;
            }
        }
    }
    Ok(out)
}

/// Convolution without bias; shapes assumed validated.
fn conv2d_raw(input: &Tensor, kernel: &Tensor) -> Tensor {
    let (n, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let cout = kernel.shape()[0];
    let k = kernel.shape()[2];
    let (ho, wo) = (conv_out_dim(h), conv_out_dim(w));
    let (pt, _) = pad_split(h, k);
    let (pl, _) = pad_split(w, k);
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let x = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for ni in 0..n {
        for co in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        let xbase = ((ni * cin + ci) * h) * w;
                        let kbase = ((co * cin + ci) * k) * k;
                        for u in 0..k {
                            let row = (2 * i + u) as isize - pt as isize;
                            if row < 0 || row >= h as isize {
                                continue;
                            }
                            let xrow = xbase + row as usize * w;
                            let krow = kbase + u * k;
                            for v in 0..k {
                                let col = (2 * j + v) as isize - pl as isize;
                                if col < 0 || col >= w as isize {
                                    continue;
                                }
                                acc += x[xrow + col as usize] * kd[krow + v];
                            }
                        }
                    }
                    od[((ni * cout + co) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

/// Transposed stride-2 convolution with bias: the exact adjoint of
/// [`conv2d_s2`] under the same padding rule.
///
/// `input` is [N, Cin, h, w], `kernel` is [Cin, Cout, k, k], `bias` is
/// [Cout], and `target_hw` is the spatial size (H, W) being reconstructed;
/// `ceil(H/2)` must equal `h` and `ceil(W/2)` must equal `w`.
pub fn conv_t2d_s2(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    target_hw: (usize, usize),
) -> Result<Tensor> {
    let (_, _) = check_kernel("conv_t2d_s2", kernel)?;
    if input.rank() != 4 {
        return Err(Error::shape(
            "conv_t2d_s2",
            format!("input must be rank 4, got {:?}", input.shape()),
        ));
    }
    let (n, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (kcin, cout) = (kernel.shape()[0], kernel.shape()[1]);
    if kcin != cin {
        return Err(Error::shape(
            "conv_t2d_s2",
            format!("kernel expects {} input channels, input has {}", kcin, cin),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv_t2d_s2",
            format!("bias shape {:?}, expected [{}]", bias.shape(), cout),
        ));
    }
    let (th, tw) = target_hw;
    if conv_out_dim(th) != h || conv_out_dim(tw) != w {
        return Err(Error::invalid(
            "conv_t2d_s2",
            format!(
                "target {}x{} is incompatible with input {}x{} (need ceil(target/2) == input)",
                th, tw, h, w
            ),
        ));
    }
    let mut out = conv_t2d_raw(input, kernel, target_hw);
    for ni in 0..n {
        for co in 0..cout {
            let base = ((ni * cout + co) * th) * tw;
            let b = bias.data()[co];
            for idx in 0..th * tw {
                out.data_mut()[base + idx] += b;
            }
        }
    }
    Ok(out)
}

/// Adjoint of `conv2d_raw`: scatter instead of gather. Shapes assumed valid.
fn conv_t2d_raw(input: &Tensor, kernel: &Tensor, target_hw: (usize, usize)) -> Tensor {
    let (n, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let cout = kernel.shape()[1];
    let k = kernel.shape()[2];
    let (th, tw) = target_hw;
    let (pt, _) = pad_split(th, k);
    let (pl, _) = pad_split(tw, k);
    let mut out = Tensor::zeros(&[n, cout, th, tw]);
    let y = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..cin {
            for i in 0..h {
                for j in 0..w {
                    let yv = y[((ni * cin + ci) * h + i) * w + j];
                    if yv == 0.0 {
                        continue;
                    }
                    for co in 0..cout {
                        let obase = ((ni * cout + co) * th) * tw;
                        let kbase = ((ci * cout + co) * k) * k;
                        for u in 0..k {
                            let row = (2 * i + u) as isize - pt as isize;
                            if row < 0 || row >= th as isize {
                                continue;
                            }
                            let orow = obase + row as usize * tw;
                            let krow = kbase + u * k;
                            for v in 0..k {
                                let col = (2 * j + v) as isize - pl as isize;
                                if col < 0 || col >= tw as isize {
                                    continue;
                                }
                                od[orow + col as usize] += yv * kd[krow + v];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Kernel gradient shared by both convolution ops.
///
/// `wide` is the tensor living on the large spatial grid [N, Ca, H, W] and
/// `narrow` on the strided grid [N, Cb, ceil(H/2), ceil(W/2)]; returns
/// d/d(kernel) laid out as [Cb, Ca, k, k].
fn conv_kernel_grad(wide: &Tensor, narrow: &Tensor, k: usize) -> Tensor {
    let (n, ca, h, w) = (
        wide.shape()[0],
        wide.shape()[1],
        wide.shape()[2],
        wide.shape()[3],
    );
    let cb = narrow.shape()[1];
    let (ho, wo) = (narrow.shape()[2], narrow.shape()[3]);
    let (pt, _) = pad_split(h, k);
    let (pl, _) = pad_split(w, k);
    let mut dk = Tensor::zeros(&[cb, ca, k, k]);
    let xd = wide.data();
    let yd = narrow.data();
    let dkd = dk.data_mut();
    for ni in 0..n {
        for bi in 0..cb {
            for i in 0..ho {
                for j in 0..wo {
                    let yv = yd[((ni * cb + bi) * ho + i) * wo + j];
                    if yv == 0.0 {
                        continue;
                    }
                    for ai in 0..ca {
                        let xbase = ((ni * ca + ai) * h) * w;
                        let kbase = ((bi * ca + ai) * k) * k;
                        for u in 0..k {
                            let row = (2 * i + u) as isize - pt as isize;
                            if row < 0 || row >= h as isize {
                                continue;
                            }
                            let xrow = xbase + row as usize * w;
                            let krow = kbase + u * k;
                            for v in 0..k {
                                let col = (2 * j + v) as isize - pl as isize;
                                if col < 0 || col >= w as isize {
                                    continue;
                                }
                                dkd[krow + v] += yv * xd[xrow + col as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

/// Per-channel sum over batch and spatial dims (bias gradient).
fn channel_sums(t: &Tensor) -> Tensor {
    let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let mut out = Tensor::zeros(&[c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = ((ni * c + ci) * h) * w;
            let mut acc = 0.0;
            for idx in 0..h * w {
                acc += t.data()[base + idx];
            }
            out.data_mut()[ci] += acc;
        }
    }
    out
}

#[derive(Debug, Clone)]
enum OpKind {
    Input,
    Param,
    Conv2dS2,
    ConvT2dS2 { target: (usize, usize) },
    Relu,
    MatMul,
    Sub,
    Add,
    Reshape,
    FrobSq,
    L1Sum,
    Scale(f64),
}

#[derive(Debug)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Computation graph with cached forward values and a named-parameter
/// registry. Node ids are indices into a list kept in topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value });
        id
    }

    /// Constant input node (set or replaced via [`Graph::set_value`]).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Input, vec![], value)
    }

    /// Trainable parameter node; the name registers it for gradient lookup.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(OpKind::Param, vec![], value);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn conv2d_s2(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = conv2d_s2(self.value(x), self.value(kernel), self.value(bias))?;
        Ok(self.push(OpKind::Conv2dS2, vec![x, kernel, bias], value))
    }

    pub fn conv_t2d_s2(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        target: (usize, usize),
    ) -> Result<NodeId> {
        let value = conv_t2d_s2(self.value(x), self.value(kernel), self.value(bias), target)?;
        Ok(self.push(OpKind::ConvT2dS2 { target }, vec![x, kernel, bias], value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = crate::tensor::relu(self.value(x));
        self.push(OpKind::Relu, vec![x], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(OpKind::MatMul, vec![a, b], value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(OpKind::Sub, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(OpKind::Add, vec![a, b], value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(OpKind::Reshape, vec![x], value))
    }

    pub fn frobenius_sq(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(crate::tensor::frobenius_sq(self.value(x)));
        self.push(OpKind::FrobSq, vec![x], value)
    }

    pub fn l1_sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(crate::tensor::l1_sum(self.value(x)));
        self.push(OpKind::L1Sum, vec![x], value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).scale(c);
        self.push(OpKind::Scale(c), vec![x], value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Replace the value of an input or parameter node (same shape).
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id];
        if !matches!(node.op, OpKind::Input | OpKind::Param) {
            return Err(Error::invalid("set_value", "node is not a leaf"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Mutable access to a parameter tensor by node id (optimizer updates).
    pub fn value_mut(&mut self, id: NodeId) -> &mut Tensor {
        &mut self.nodes[id].value
    }

    /// Registered (name, node) pairs in registration order.
    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    /// Recompute every derived node in topological order.
    pub fn forward(&mut self) {
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let val = |id: NodeId| -> &Tensor { &before[id].value };
            node.value = match node.op {
                OpKind::Input | OpKind::Param => continue,
                OpKind::Conv2dS2 => {
                    let mut out = conv2d_raw(val(node.inputs[0]), val(node.inputs[1]));
                    add_channel_bias(&mut out, val(node.inputs[2]));
                    out
                }
                OpKind::ConvT2dS2 { target } => {
                    let mut out = conv_t2d_raw(val(node.inputs[0]), val(node.inputs[1]), target);
                    add_channel_bias(&mut out, val(node.inputs[2]));
                    out
                }
                OpKind::Relu => crate::tensor::relu(val(node.inputs[0])),
                OpKind::MatMul => {
                    crate::tensor::matmul(val(node.inputs[0]), val(node.inputs[1]))
                        .expect("shapes validated at build")
                }
                OpKind::Sub => val(node.inputs[0])
                    .sub(val(node.inputs[1]))
                    .expect("shapes validated at build"),
                OpKind::Add => val(node.inputs[0])
                    .add(val(node.inputs[1]))
                    .expect("shapes validated at build"),
                OpKind::Reshape => val(node.inputs[0])
                    .reshape(node.value.shape())
                    .expect("shapes validated at build"),
                OpKind::FrobSq => {
                    Tensor::scalar(crate::tensor::frobenius_sq(val(node.inputs[0])))
                }
                OpKind::L1Sum => Tensor::scalar(crate::tensor::l1_sum(val(node.inputs[0]))),
                OpKind::Scale(c) => val(node.inputs[0]).scale(c),
            };
        }
    }

    /// Reverse pass from a scalar loss node. Returns one gradient per
    /// registered parameter, shape-identical to the parameter (zero when the
    /// parameter does not reach the loss).
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss node must be scalar, got shape {:?}",
                    self.nodes[loss].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::from_vec(
            self.nodes[loss].value.shape(),
            vec![1.0],
        )?);

        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                OpKind::Input | OpKind::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                OpKind::Conv2dS2 => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let kern = &self.nodes[node.inputs[1]].value;
                    let k = kern.shape()[2];
                    let dx = conv_t2d_raw(&g, kern, (x.shape()[2], x.shape()[3]));
                    let dk = conv_kernel_grad(x, &g, k);
                    let db = channel_sums(&g);
                    accumulate(&mut grads, node.inputs[0], dx);
                    accumulate(&mut grads, node.inputs[1], dk);
                    accumulate(&mut grads, node.inputs[2], db);
                }
                OpKind::ConvT2dS2 { .. } => {
                    let y = &self.nodes[node.inputs[0]].value;
                    let kern = &self.nodes[node.inputs[1]].value;
                    let k = kern.shape()[2];
                    let dy = conv2d_raw(&g, kern);
                    debug_assert_eq!(dy.shape(), y.shape());
                    let dk = conv_kernel_grad(&g, y, k);
                    let db = channel_sums(&g);
                    accumulate(&mut grads, node.inputs[0], dy);
                    accumulate(&mut grads, node.inputs[1], dk);
                    accumulate(&mut grads, node.inputs[2], db);
                }
                OpKind::Relu => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let dx = x
                        .zip_map(&g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })
                        .expect("shape");
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                OpKind::MatMul => {
                    let a = &self.nodes[node.inputs[0]].value;
                    let b = &self.nodes[node.inputs[1]].value;
                    let da = crate::tensor::matmul(&g, &b.transpose()).expect("shape");
                    let db = crate::tensor::matmul(&a.transpose(), &g).expect("shape");
                    accumulate(&mut grads, node.inputs[0], da);
                    accumulate(&mut grads, node.inputs[1], db);
                }
                OpKind::Sub => {
                    accumulate(&mut grads, node.inputs[0], g.clone());
                    accumulate(&mut grads, node.inputs[1], g.scale(-1.0));
                }
                OpKind::Add => {
                    accumulate(&mut grads, node.inputs[0], g.clone());
                    accumulate(&mut grads, node.inputs[1], g);
                }
                OpKind::Reshape => {
                    let src_shape = self.nodes[node.inputs[0]].value.shape().to_vec();
                    let dx = g.reshape(&src_shape).expect("numel preserved");
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                OpKind::FrobSq => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let gs = g.item();
                    accumulate(&mut grads, node.inputs[0], x.map(|v| 2.0 * v * gs));
                }
                OpKind::L1Sum => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let gs = g.item();
                    // Subgradient convention: d|x|/dx = 0 at x = 0.
                    let dx = x.map(|v| {
                        if v > 0.0 {
                            gs
                        } else if v < 0.0 {
                            -gs
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, node.inputs[0], dx);
                }
                OpKind::Scale(c) => {
                    accumulate(&mut grads, node.inputs[0], g.scale(c));
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match &grads[*id] {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.nodes[*id].value.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn add_channel_bias(out: &mut Tensor, bias: &Tensor) {
    let (n, c, h, w) = (
        out.shape()[0],
        out.shape()[1],
        out.shape()[2],
        out.shape()[3],
    );
    for ni in 0..n {
        for ci in 0..c {
            let b = bias.data()[ci];
            let base = ((ni * c + ci) * h) * w;
            for idx in 0..h * w {
                out.data_mut()[base + idx] += b;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            *existing = existing.add(&g).expect("gradient shapes agree");
        }
        slot @ None => *slot = Some(g),
    }
}

/// Central finite-difference gradient of the loss node with respect to a
/// leaf node, used as the independent oracle for [`Graph::backward`].
pub fn finite_difference_gradient(
    graph: &mut Graph,
    loss: NodeId,
    leaf: NodeId,
    h: f64,
) -> Result<Tensor> {
    let base = graph.value(leaf).clone();
    let mut grad = Tensor::zeros(base.shape());
    for idx in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[idx] += h;
        graph.set_value(leaf, plus)?;
        graph.forward();
        let f_plus = graph.value(loss).item();

        let mut minus = base.clone();
        minus.data_mut()[idx] -= h;
        graph.set_value(leaf, minus)?;
        graph.forward();
        let f_minus = graph.value(loss).item();

        grad.data_mut()[idx] = (f_plus - f_minus) / (2.0 * h);
    }
    graph.set_value(leaf, base)?;
    graph.forward();
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random values bounded away from zero so relu/l1 kinks are not hit by
    /// the finite-difference probes.
    fn random_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let mag: f64 = rng.random_range(0.2..1.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_table_geometry() {
        // 42x42 input, 5x5 kernel, 10 channels -> 21x21.
        let x = Tensor::zeros(&[1, 1, 42, 42]);
        let k = Tensor::zeros(&[10, 1, 5, 5]);
        let b = Tensor::zeros(&[10]);
        let y = conv2d_s2(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 10, 21, 21]);
    }

    #[test]
    fn conv_zero_propagation() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::filled(&[3, 1, 3, 3], 0.7);
        let b = Tensor::zeros(&[3]);
        let y = conv2d_s2(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_hand_summed() {
        // 4x4 ones, 3x3 ones kernel, stride 2. Output 2x2; total padding 1
        // per axis with the extra cell on the bottom/right, so the window for
        // output (0,0) starts at input (0,0) and covers 3x3 = 9 cells, while
        // the window for (1,1) starts at (2,2) and covers 2x2 = 4 cells.
        let x = Tensor::filled(&[1, 1, 4, 4], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_s2(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[9.0, 6.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 8, 8]);
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::zeros(&[4]);
        assert!(conv2d_s2(&x, &k, &b).is_err());
    }

    #[test]
    fn conv_transpose_is_exact_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..6 {
            let x = random_away_from_zero(&[1, 1, 5, 5], &mut rng);
            let k = random_away_from_zero(&[2, 1, 3, 3], &mut rng);
            let zero_b2 = Tensor::zeros(&[2]);
            let zero_b1 = Tensor::zeros(&[1]);
            let y = random_away_from_zero(&[1, 2, 3, 3], &mut rng);
            let cx = conv2d_s2(&x, &k, &zero_b2).unwrap();
            let cty = conv_t2d_s2(&y, &k, &zero_b1, (5, 5)).unwrap();
            let lhs = dot(&cx, &y).unwrap();
            let rhs = dot(&x, &cty).unwrap();
            let rel = (lhs - rhs).abs() / lhs.abs().max(1.0);
            assert!(rel < 1e-12, "adjoint identity violated: {} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn conv_transpose_zero_input_gives_bias() {
        let y = Tensor::zeros(&[1, 2, 2, 2]);
        let k = Tensor::filled(&[2, 3, 3, 3], 0.5);
        let b = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.25]).unwrap();
        let out = conv_t2d_s2(&y, &k, &b, (4, 4)).unwrap();
        for ci in 0..3 {
            for idx in 0..16 {
                assert_eq!(out.data()[ci * 16 + idx], b.data()[ci]);
            }
        }
    }

    #[test]
    fn conv_then_transpose_round_trips_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_away_from_zero(&[1, 1, 42, 42], &mut rng);
        let k = random_away_from_zero(&[10, 1, 5, 5], &mut rng);
        let b10 = Tensor::zeros(&[10]);
        let b1 = Tensor::zeros(&[1]);
        let y = conv2d_s2(&x, &k, &b10).unwrap();
        let back = conv_t2d_s2(&y, &k, &b1, (42, 42)).unwrap();
        assert_eq!(back.shape(), &[1, 1, 42, 42]);
    }

    #[test]
    fn conv_transpose_rejects_bad_target() {
        let y = Tensor::zeros(&[1, 1, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(conv_t2d_s2(&y, &k, &b, (9, 9)).is_err());
    }

    #[test]
    fn backward_of_frobenius_is_two_w() {
        let mut g = Graph::new();
        let w_val = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = g.param("w", w_val.clone());
        let loss = g.frobenius_sq(w);
        let grads = g.backward(loss).unwrap();
        let gw = &grads["w"];
        for i in 0..4 {
            assert_eq!(gw.data()[i], 2.0 * w_val.data()[i]);
        }
    }

    #[test]
    fn backward_of_l1_is_sign() {
        let mut g = Graph::new();
        let w_val = Tensor::from_vec(&[3], vec![1.5, -0.2, 3.0]).unwrap();
        let w = g.param("w", w_val);
        let loss = g.l1_sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::zeros(&[2, 2]));
        let r = g.relu(w);
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::filled(&[2], 1.0));
        let _unused = g.param("unused", Tensor::filled(&[3], 1.0));
        let loss = g.frobenius_sq(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
    }

    /// Every differentiable op against the central-difference oracle.
    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            // Composite graph touching conv, convT, relu, matmul, reshape,
            // sub, add, scale, frobenius and l1 in one loss.
            let mut g = Graph::new();
            let x = g.input(random_away_from_zero(&[2, 1, 5, 5], &mut rng));
            let k1 = g.param("k1", random_away_from_zero(&[3, 1, 3, 3], &mut rng));
            let b1 = g.param("b1", random_away_from_zero(&[3], &mut rng));
            let h1 = g.conv2d_s2(x, k1, b1).unwrap();
            let a1 = g.relu(h1);
            let z = g.reshape(a1, &[2, 27]).unwrap();
            let c = g.param("c", random_away_from_zero(&[2, 2], &mut rng));
            let zc = g.matmul(c, z).unwrap();
            let back = g.reshape(zc, &[2, 3, 3, 3]).unwrap();
            let k2 = g.param("k2", random_away_from_zero(&[3, 1, 3, 3], &mut rng));
            let b2 = g.param("b2", random_away_from_zero(&[1], &mut rng));
            let xhat = g.conv_t2d_s2(back, k2, b2, (5, 5)).unwrap();
            let diff = g.sub(x, xhat).unwrap();
            let recon = g.frobenius_sq(diff);
            let reg = g.l1_sum(c);
            let reg_scaled = g.scale(reg, 0.3);
            let sdiff = g.sub(z, zc).unwrap();
            let se = g.frobenius_sq(sdiff);
            let se_scaled = g.scale(se, 0.45);
            let partial = g.add(recon, reg_scaled).unwrap();
            let loss = g.add(partial, se_scaled).unwrap();

            let analytic = g.backward(loss).unwrap();
            for name in ["k1", "b1", "c", "k2", "b2"] {
                let id = g.param_id(name).unwrap();
                let fd = finite_difference_gradient(&mut g, loss, id, 1e-5).unwrap();
                let a = &analytic[name];
                for i in 0..fd.len() {
                    let denom = fd.data()[i].abs().max(a.data()[i].abs()).max(1e-6);
                    let rel = (fd.data()[i] - a.data()[i]).abs() / denom;
                    assert!(
                        rel < 1e-4,
                        "seed {} param {} idx {}: analytic {} vs fd {}",
                        seed,
                        name,
                        i,
                        a.data()[i],
                        fd.data()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut g = Graph::new();
            let x = g.input(random_away_from_zero(&[1, 1, 6, 6], &mut rng));
            let k = g.param("k", random_away_from_zero(&[2, 1, 3, 3], &mut rng));
            let b = g.param("b", random_away_from_zero(&[2], &mut rng));
            let h = g.conv2d_s2(x, k, b).unwrap();
            let r = g.relu(h);
            let loss = g.frobenius_sq(r);
            g.forward();
            (g.value(loss).item(), g.backward(loss).unwrap())
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (k, v) in &g1 {
            let w = &g2[k];
            for i in 0..v.len() {
                assert_eq!(v.data()[i].to_bits(), w.data()[i].to_bits());
            }
        }
    }
}
