use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels;
use crate::params::{BnUpdate, ParamId, ParamStore};
use crate::{ShapeError, Tensor};

/// Whether batch norm uses batch statistics (and records running-stat
/// updates) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A value produced inside a [`Graph`]. Cloning is cheap.
#[derive(Clone)]
pub struct Var {
    node: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// True when gradients flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.value.shape())
            .finish()
    }
}

/// Parameters of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Option<usize>,
        gamma: Var,
        beta: Option<usize>,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: usize,
        out: Rc<Tensor>,
    },
    Sigmoid {
        x: usize,
        out: Rc<Tensor>,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    GateMul {
        gate: Var,
        x: Var,
    },
    MaxPool {
        x: usize,
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Upsample {
        x: usize,
        in_shape: Vec<usize>,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
        spatial: usize,
    },
}

/// Tape recording one forward pass over parameters held in a [`ParamStore`].
///
/// Node ids increase in creation order, so reverse id order is a valid
/// topological order for the backward sweep.
pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    grad_enabled: bool,
    ops: Vec<Op>,
    param_vars: HashMap<ParamId, Var>,
    leaf_params: HashMap<usize, ParamId>,
    bn_updates: Vec<BnUpdate>,
}

/// Result of a backward sweep.
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    inputs: HashMap<usize, Tensor>,
    pub bn_updates: Vec<BnUpdate>,
}

impl Gradients {
    /// Gradients of trainable parameters reached by the sweep, ordered by id.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .binary_search_by_key(&id, |(p, _)| *p)
            .ok()
            .map(|i| &self.params[i].1)
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|n| self.inputs.get(&n))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: Option<usize>, g: Tensor) {
    if let Some(i) = node {
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            grad_enabled: true,
            ops: Vec::new(),
            param_vars: HashMap::new(),
            leaf_params: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Evaluation-mode graph that records nothing; intermediates are freed as
    /// soon as their `Var`s drop.
    pub fn inference(store: &'s ParamStore) -> Self {
        let mut g = Self::new(store, Mode::Eval);
        g.grad_enabled = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.push_rc(op, Rc::new(value), tracked)
    }

    fn push_rc(&mut self, op: Op, value: Rc<Tensor>, tracked: bool) -> Var {
        if self.grad_enabled && tracked {
            self.ops.push(op);
            Var {
                node: Some(self.ops.len() - 1),
                value,
            }
        } else {
            Var { node: None, value }
        }
    }

    /// Untracked value.
    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            node: None,
            value: Rc::new(t),
        }
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return v.clone();
        }
        let value = Rc::new(self.store.get(id).clone());
        let var = self.push_rc(Op::Leaf, value, true);
        if let Some(n) = var.node {
            self.leaf_params.insert(n, id);
        }
        self.param_vars.insert(id, var.clone());
        var
    }

    pub fn conv2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, ShapeError> {
        let out = kernels::conv2d_forward(&x.value, &w.value, b.map(|b| &*b.value), stride, pad)?;
        let tracked = x.is_tracked() || w.is_tracked() || b.is_some_and(Var::is_tracked);
        let op = Op::Conv {
            x: x.clone(),
            w: w.clone(),
            b: b.and_then(|b| b.node),
            stride,
            pad,
        };
        Ok(self.push(op, out, tracked))
    }

    pub fn batch_norm(&mut self, x: &Var, p: &BnParams) -> Result<Var, ShapeError> {
        let (n, c, h, w) = x.value.dims4()?;
        let gamma = self.param(p.gamma);
        let beta = self.param(p.beta);
        if gamma.value.len() != c || beta.value.len() != c {
            return Err(ShapeError::new(format!(
                "batch_norm: {c} channels but affine parameters have {}",
                gamma.value.len()
            )));
        }
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let (mean, var) = kernels::channel_moments(&x.value)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                var.iter().map(|v| v * count / (count - 1.0)).collect()
            } else {
                var.clone()
            };
            self.bn_updates.push(BnUpdate {
                running_mean: p.running_mean,
                running_var: p.running_var,
                batch_mean: mean.clone(),
                batch_var: unbiased,
                momentum: p.momentum,
            });
            (mean, var)
        } else {
            (
                self.store.get(p.running_mean).data().to_vec(),
                self.store.get(p.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
        let hw = h * w;
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        {
            let xd = x.value.data();
            let (gd, bd) = (gamma.value.data(), beta.value.data());
            let xh = xhat.data_mut();
            let od = out.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    for i in r {
                        let v = (xd[i] - mean[ch]) * inv_std[ch];
                        xh[i] = v;
                        od[i] = gd[ch] * v + bd[ch];
                    }
                }
            }
        }
        let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        let op = Op::BatchNorm {
            x: x.node,
            gamma,
            beta: beta.node,
            xhat,
            inv_std,
            batch_stats,
        };
        Ok(self.push(op, out, tracked))
    }

    pub fn relu(&mut self, x: &Var) -> Var {
        let out = Rc::new(x.value.map(|v| v.max(0.0)));
        match x.node {
            Some(n) => self.push_rc(Op::Relu { x: n, out: out.clone() }, out, true),
            None => self.push_rc(Op::Leaf, out, false),
        }
    }

    pub fn sigmoid(&mut self, x: &Var) -> Var {
        let out = Rc::new(x.value.map(sigmoid));
        match x.node {
            Some(n) => self.push_rc(Op::Sigmoid { x: n, out: out.clone() }, out, true),
            None => self.push_rc(Op::Leaf, out, false),
        }
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var, ShapeError> {
        if a.shape() != b.shape() {
            return Err(ShapeError::new(format!(
                "add: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = (*a.value).clone();
        out.add_assign(&b.value);
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(Op::Add { a: a.node, b: b.node }, out, tracked))
    }

    /// `gate (N×1×H×W) ⊙ x (N×C×H×W)`, broadcasting the gate over channels.
    pub fn gate_mul(&mut self, gate: &Var, x: &Var) -> Result<Var, ShapeError> {
        let (gn, gc, gh, gw) = gate.value.dims4()?;
        let (n, c, h, w) = x.value.dims4()?;
        if gc != 1 || (gn, gh, gw) != (n, h, w) {
            return Err(ShapeError::new(format!(
                "gate_mul: gate {:?} does not broadcast over {:?}",
                gate.shape(),
                x.shape()
            )));
        }
        let hw = h * w;
        let mut out = (*x.value).clone();
        let gd = gate.value.data();
        for (plane, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let g = &gd[(plane / c) * hw..(plane / c + 1) * hw];
            for (o, gv) in chunk.iter_mut().zip(g) {
                *o *= gv;
            }
        }
        let tracked = gate.is_tracked() || x.is_tracked();
        let op = Op::GateMul {
            gate: gate.clone(),
            x: x.clone(),
        };
        Ok(self.push(op, out, tracked))
    }

    pub fn max_pool2d(
        &mut self,
        x: &Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, ShapeError> {
        let (out, argmax) = kernels::max_pool2d_forward(&x.value, kernel, stride, pad)?;
        Ok(match x.node {
            Some(n) => {
                let op = Op::MaxPool {
                    x: n,
                    in_shape: x.shape().to_vec(),
                    argmax,
                };
                self.push(op, out, true)
            }
            None => self.push(Op::Leaf, out, false),
        })
    }

    /// Bilinear ×2 upsampling (half-pixel centres, edge clamped).
    pub fn upsample2x(&mut self, x: &Var) -> Result<Var, ShapeError> {
        let out = kernels::upsample2x_forward(&x.value)?;
        Ok(match x.node {
            Some(n) => {
                let op = Op::Upsample {
                    x: n,
                    in_shape: x.shape().to_vec(),
                };
                self.push(op, out, true)
            }
            None => self.push(Op::Leaf, out, false),
        })
    }

    /// Channel-wise concatenation of NCHW tensors with equal N, H, W.
    pub fn concat(&mut self, parts: &[&Var]) -> Result<Var, ShapeError> {
        let first = parts
            .first()
            .ok_or_else(|| ShapeError::new("concat: no inputs"))?;
        let (n, _, h, w) = first.value.dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.value.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(ShapeError::new(format!(
                    "concat: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        {
            let od = out.data_mut();
            for b in 0..n {
                let mut offset = 0;
                for (p, &pc) in parts.iter().zip(&channels) {
                    let src = &p.value.data()[b * pc * hw..(b + 1) * pc * hw];
                    let dst_start = (b * total + offset) * hw;
                    od[dst_start..dst_start + pc * hw].copy_from_slice(src);
                    offset += pc;
                }
            }
        }
        let tracked = parts.iter().any(|p| p.is_tracked());
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.node).zip(channels).collect(),
            spatial: hw,
        };
        Ok(self.push(op, out, tracked))
    }

    /// Running-statistic updates recorded so far (training mode only).
    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }

    /// Reverse sweep from `out`, seeded with `d(objective)/d(out) = seed`.
    pub fn backward(mut self, out: &Var, seed: Tensor) -> Result<Gradients, ShapeError> {
        if seed.shape() != out.shape() {
            return Err(ShapeError::new(format!(
                "backward: seed shape {:?} does not match output {:?}",
                seed.shape(),
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.ops.len()).map(|_| None).collect();
        let mut params = Vec::new();
        let mut inputs = HashMap::new();
        if let Some(n) = out.node {
            grads[n] = Some(seed);
        }
        for i in (0..self.ops.len()).rev() {
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            let Some(gy) = grads[i].take() else {
                continue;
            };
            match op {
                Op::Leaf => match self.leaf_params.get(&i) {
                    Some(&pid) => params.push((pid, gy)),
                    None => {
                        inputs.insert(i, gy);
                    }
                },
                Op::Conv { x, w, b, stride, pad } => {
                    let cg = kernels::conv2d_backward(&x.value, &w.value, &gy, stride, pad, x.is_tracked())?;
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, x.node, dx);
                    }
                    accumulate(&mut grads, w.node, cg.dw);
                    accumulate(&mut grads, b, cg.db);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = gy.dims4()?;
                    let hw = h * w;
                    let count = (n * hw) as f64;
                    let gd = gy.data();
                    let xh = xhat.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            for j in r {
                                dgamma[ch] += gd[j] * xh[j];
                                dbeta[ch] += gd[j];
                            }
                        }
                    }
                    if x.is_some() {
                        let gam = gamma.value.data();
                        let mut dx = Tensor::zeros(gy.shape());
                        let dd = dx.data_mut();
                        for b in 0..n {
                            for ch in 0..c {
                                let scale = gam[ch] * inv_std[ch];
                                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                                if batch_stats {
                                    let mean_g = dbeta[ch] / count;
                                    let mean_gx = dgamma[ch] / count;
                                    for j in r {
                                        dd[j] = scale * (gd[j] - mean_g - xh[j] * mean_gx);
                                    }
                                } else {
                                    for j in r {
                                        dd[j] = scale * gd[j];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                    accumulate(&mut grads, gamma.node, Tensor::from_vec(&[c], dgamma)?);
                    accumulate(&mut grads, beta, Tensor::from_vec(&[c], dbeta)?);
                }
                Op::Relu { x, out } => {
                    let mut dx = gy;
                    for (d, o) in dx.data_mut().iter_mut().zip(out.data()) {
                        if *o <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, Some(x), dx);
                }
                Op::Sigmoid { x, out } => {
                    let mut dx = gy;
                    for (d, s) in dx.data_mut().iter_mut().zip(out.data()) {
                        *d *= s * (1.0 - s);
                    }
                    accumulate(&mut grads, Some(x), dx);
                }
                Op::Add { a, b } => {
                    match (a, b) {
                        (Some(_), Some(_)) => {
                            accumulate(&mut grads, a, gy.clone());
                            accumulate(&mut grads, b, gy);
                        }
                        _ => accumulate(&mut grads, a.or(b), gy),
                    }
                }
                Op::GateMul { gate, x } => {
                    let (n, c, h, w) = x.value.dims4()?;
                    let hw = h * w;
                    if gate.is_tracked() {
                        let mut dg = Tensor::zeros(gate.shape());
                        let dgd = dg.data_mut();
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                for j in 0..hw {
                                    dgd[b * hw + j] += gy.data()[base + j] * x.value.data()[base + j];
                                }
                            }
                        }
                        accumulate(&mut grads, gate.node, dg);
                    }
                    if x.is_tracked() {
                        let mut dx = gy;
                        let gd = gate.value.data();
                        for (plane, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                            let g = &gd[(plane / c) * hw..(plane / c + 1) * hw];
                            for (d, gv) in chunk.iter_mut().zip(g) {
                                *d *= gv;
                            }
                        }
                        accumulate(&mut grads, x.node, dx);
                    }
                }
                Op::MaxPool { x, in_shape, argmax } => {
                    let dx = kernels::max_pool2d_backward(&in_shape, &argmax, &gy);
                    accumulate(&mut grads, Some(x), dx);
                }
                Op::Upsample { x, in_shape } => {
                    let dx = kernels::upsample2x_backward(&in_shape, &gy);
                    accumulate(&mut grads, Some(x), dx);
                }
                Op::Concat { parts, spatial } => {
                    let n = gy.shape()[0];
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for (node, pc) in parts {
                        if node.is_some() {
                            let mut part = Tensor::zeros(&[n, pc, gy.shape()[2], gy.shape()[3]]);
                            for b in 0..n {
                                let src = (b * total + offset) * spatial;
                                part.data_mut()[b * pc * spatial..(b + 1) * pc * spatial]
                                    .copy_from_slice(&gy.data()[src..src + pc * spatial]);
                            }
                            accumulate(&mut grads, node, part);
                        }
                        offset += pc;
                    }
                }
            }
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients {
            params,
            inputs,
            bn_updates: self.bn_updates,
        })
    }
}
