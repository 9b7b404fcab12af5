//! Append-only autodiff tape.
//!
//! Ops push nodes that record their inputs by id, so reverse index order is
//! already a topological order for backward. Weights are referenced by their
//! [`ParamSet`] index rather than copied; backward reads the same values the
//! forward pass used because no update runs in between.

use super::kernels as k;
use super::kernels::NormStats;
use super::param::ParamSet;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Whether normalization layers use batch statistics (`Train`) or running
/// statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum OpKind<E: Element> {
    Leaf {
        wants_grad: bool,
    },
    Conv2d {
        x: NodeId,
        w: usize,
        b: usize,
        stride: usize,
    },
    TConv2d {
        x: NodeId,
        w: usize,
        b: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: usize,
        beta: usize,
        train: bool,
        stats: NormStats<E>,
    },
    InstanceNorm {
        x: NodeId,
        gamma: usize,
        beta: usize,
        stats: NormStats<E>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        c1: usize,
        c2: usize,
    },
    Upsample2x {
        x: NodeId,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: OpKind<E>,
    needs_grad: bool,
}

/// Gradients with respect to tape inputs that asked for them; parameter
/// gradients land in the [`ParamSet`] directly.
#[derive(Debug)]
pub struct InputGrads<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> InputGrads<E> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: OpKind<E>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, OpKind::Leaf { wants_grad: false }, false)
    }

    /// Input whose gradient is wanted from [`Tape::backward`].
    pub fn leaf_with_grad(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, OpKind::Leaf { wants_grad: true }, true)
    }

    pub fn conv2d(
        &mut self,
        params: &ParamSet<E>,
        x: NodeId,
        w: usize,
        b: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let y = k::conv2d_forward(
            self.value(x),
            &params.get(w).value,
            &params.get(b).value,
            stride,
        )?;
        let ng = self.needs(x) || params.get(w).trainable || params.get(b).trainable;
        Ok(self.push(y, OpKind::Conv2d { x, w, b, stride }, ng))
    }

    pub fn tconv2d(&mut self, params: &ParamSet<E>, x: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let y = k::tconv2d_forward(self.value(x), &params.get(w).value, &params.get(b).value)?;
        let ng = self.needs(x) || params.get(w).trainable || params.get(b).trainable;
        Ok(self.push(y, OpKind::TConv2d { x, w, b }, ng))
    }

    /// Batch normalization. `Train` mode uses batch statistics and folds them
    /// into `running` (when given) with `momentum`; `Eval` mode requires
    /// `running` and never mutates it.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        params: &ParamSet<E>,
        x: NodeId,
        gamma: usize,
        beta: usize,
        eps: f64,
        mode: Mode,
        running: Option<(&mut Tensor<E>, &mut Tensor<E>)>,
        momentum: f64,
    ) -> Result<NodeId> {
        let train = mode == Mode::Train;
        let (y, stats) = k::batchnorm_forward(
            self.value(x),
            &params.get(gamma).value,
            &params.get(beta).value,
            eps,
            train,
            running,
            momentum,
        )?;
        let ng = self.needs(x) || params.get(gamma).trainable || params.get(beta).trainable;
        Ok(self.push(
            y,
            OpKind::BatchNorm {
                x,
                gamma,
                beta,
                train,
                stats,
            },
            ng,
        ))
    }

    pub fn instancenorm(
        &mut self,
        params: &ParamSet<E>,
        x: NodeId,
        gamma: usize,
        beta: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let (y, stats) = k::instancenorm_forward(
            self.value(x),
            &params.get(gamma).value,
            &params.get(beta).value,
            eps,
        )?;
        let ng = self.needs(x) || params.get(gamma).trainable || params.get(beta).trainable;
        Ok(self.push(
            y,
            OpKind::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            },
            ng,
        ))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let y = k::leaky_relu_forward(self.value(x), slope);
        let ng = self.needs(x);
        self.push(y, OpKind::LeakyRelu { x, slope }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = k::relu_forward(self.value(x));
        let ng = self.needs(x);
        self.push(y, OpKind::Relu { x }, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = k::tanh_forward(self.value(x));
        let ng = self.needs(x);
        self.push(y, OpKind::Tanh { x }, ng)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = k::concat_channels_forward(self.value(a), self.value(b))?;
        let c1 = self.value(a).shape()[1];
        let c2 = self.value(b).shape()[1];
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, OpKind::Concat { a, b, c1, c2 }, ng))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let y = k::upsample2x_forward(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(y, OpKind::Upsample2x { x }, ng))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = k::mse_forward(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, OpKind::Mse { a, b }, ng))
    }

    /// Reverse pass from a scalar `loss` node. Parameter gradients accumulate
    /// into `params` (call [`ParamSet::zero_grads`] between steps); gradients
    /// for [`Tape::leaf_with_grad`] inputs come back in the result. Subgraphs
    /// that touch no trainable parameter and no grad-wanting leaf are skipped.
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet<E>) -> Result<InputGrads<E>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::input(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        if !self.needs(loss) {
            return Err(Error::input(
                "backward",
                "loss does not depend on any trainable parameter or grad-wanting input",
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), E::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                OpKind::Leaf { wants_grad } => {
                    if *wants_grad {
                        grads[i] = Some(g);
                    }
                }
                OpKind::Conv2d { x, w, b, stride } => {
                    let need_dx = self.needs(*x);
                    let need_dw = params.get(*w).trainable;
                    let need_db = params.get(*b).trainable;
                    let (dx, dw, db) = k::conv2d_backward(
                        self.value(*x),
                        &params.get(*w).value,
                        &g,
                        *stride,
                        need_dx,
                        need_dw,
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if let Some(dw) = dw {
                        params.get_mut(*w).grad.add_assign(&dw);
                    }
                    if need_db {
                        params.get_mut(*b).grad.add_assign(&db);
                    }
                }
                OpKind::TConv2d { x, w, b } => {
                    let need_dx = self.needs(*x);
                    let need_dw = params.get(*w).trainable;
                    let need_db = params.get(*b).trainable;
                    let (dx, dw, db) =
                        k::tconv2d_backward(self.value(*x), &params.get(*w).value, &g, need_dx, need_dw);
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if let Some(dw) = dw {
                        params.get_mut(*w).grad.add_assign(&dw);
                    }
                    if need_db {
                        params.get_mut(*b).grad.add_assign(&db);
                    }
                }
                OpKind::BatchNorm {
                    x,
                    gamma,
                    beta,
                    train,
                    stats,
                } => {
                    let (dx, dgamma, dbeta) =
                        k::batchnorm_backward(self.value(*x), &params.get(*gamma).value, stats, *train, &g);
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if params.get(*gamma).trainable {
                        params.get_mut(*gamma).grad.add_assign(&dgamma);
                    }
                    if params.get(*beta).trainable {
                        params.get_mut(*beta).grad.add_assign(&dbeta);
                    }
                }
                OpKind::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dgamma, dbeta) =
                        k::instancenorm_backward(self.value(*x), &params.get(*gamma).value, stats, &g);
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if params.get(*gamma).trainable {
                        params.get_mut(*gamma).grad.add_assign(&dgamma);
                    }
                    if params.get(*beta).trainable {
                        params.get_mut(*beta).grad.add_assign(&dbeta);
                    }
                }
                OpKind::LeakyRelu { x, slope } => {
                    accumulate(&mut grads[x.0], k::leaky_relu_backward(self.value(*x), *slope, &g));
                }
                OpKind::Relu { x } => {
                    accumulate(&mut grads[x.0], k::relu_backward(self.value(*x), &g));
                }
                OpKind::Tanh { x } => {
                    accumulate(&mut grads[x.0], k::tanh_backward(&node.value, &g));
                }
                OpKind::Concat { a, b, c1, c2 } => {
                    let (da, db) = k::concat_channels_backward(*c1, *c2, &g);
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                OpKind::Upsample2x { x } => {
                    accumulate(&mut grads[x.0], k::upsample2x_backward(&g));
                }
                OpKind::Mse { a, b } => {
                    let (da, db) = k::mse_backward(self.value(*a), self.value(*b), g.data()[0]);
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
            }
        }
        Ok(InputGrads { grads })
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
