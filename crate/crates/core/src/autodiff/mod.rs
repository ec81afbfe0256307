//! Fixed-graph reverse-mode differentiation.
//!
//! A [`Tape`] records a forward pass built from the primitives the capsule
//! pipeline uses and replays it backwards in exact reverse recording order.
//! Only those primitives exist; there is no general operator overloading.
//!
//! ```
//! use capsroute_core::autodiff::Tape;
//! use capsroute_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param("x", Tensor::vector(&[1.0, 2.0, 3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param("x").unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! [`finite_difference_check`] is the independent oracle every backward rule
//! is tested against.

mod gradcheck;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use gradcheck::{finite_difference_check, numeric_gradient, GradCheckReport};

use crate::capsnet::{
    batch_norm_backward, batch_norm_forward, margin_loss, margin_loss_grad, predict_raw,
    predict_raw_backward, softmax_cross_entropy, softmax_cross_entropy_grad, BatchNorm, BnCache,
    CapsError, MarginLossParams, RoutingAlgorithm,
};
use crate::math;
use crate::routing::{
    normalize_backward, squash_backward, squash_into, PredictionTensor, RoutingCotangent,
    RoutingError,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("shape mismatch in {0}")]
    Shape(&'static str),
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("function evaluated to a non-finite value at coordinate {0}")]
    NonFinite(usize),
    #[error("analytic gradient has {got} entries, expected {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Caps(#[from] CapsError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// The three outputs of a routing node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingVars {
    pub s_hat: Var,
    pub pose: Var,
    pub activation: Var,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    ReduceSum {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    MatMul(Var, Var),
    Reshape(Var),
    L2Normalize(Var),
    Squash(Var),
    CapsTransform {
        poses: Var,
        matrices: Var,
        batch: usize,
        n_in: usize,
        n_out: usize,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    Routing {
        predictions: Var,
        algorithm: RoutingAlgorithm,
    },
    MarginLoss {
        activations: Var,
        targets: Vec<bool>,
        params: MarginLossParams,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    outputs: Vec<usize>,
}

/// A recorded forward computation.
///
/// Nodes are stored in recording order, which is a topological order: every
/// node only reads values produced before it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Cotangents produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Cotangent of any recorded value; `None` when the loss does not depend
    /// on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.values.get(var.0).and_then(|v| v.as_ref())
    }

    /// Cotangent of a named parameter (zeros when the loss does not depend on it).
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn last_axis(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, outputs: Vec<Tensor>) -> Vec<Var> {
        let start = self.values.len();
        let ids: Vec<usize> = (start..start + outputs.len()).collect();
        self.values.extend(outputs);
        self.nodes.push(Node {
            op,
            outputs: ids.clone(),
        });
        ids.into_iter().map(Var).collect()
    }

    fn push1(&mut self, op: Op, out: Tensor) -> Var {
        self.push(op, vec![out])[0]
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push1(Op::Leaf, value)
    }

    /// A trainable input whose cotangent is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.params.insert(String::from(name), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push1(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).elementwise_mul(self.value(b))?;
        Ok(self.push1(Op::Mul(a, b), out))
    }

    pub fn reduce_sum(&mut self, input: Var, axis: usize) -> Result<Var, AutodiffError> {
        let out = self.value(input).reduce_sum(axis)?;
        Ok(self.push1(Op::ReduceSum { input, axis }, out))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let mut acc = 0.0;
        for x in self.value(input).data() {
            acc += x;
        }
        self.push1(Op::SumAll(input), Tensor::scalar(acc))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).matmul_small(self.value(b))?;
        Ok(self.push1(Op::MatMul(a, b), out))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let out = self.value(input).reshape(shape)?;
        Ok(self.push1(Op::Reshape(input), out))
    }

    /// Unit-normalizes every vector along the last axis.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let k = last_axis(x);
        let mut out = x.clone();
        for v in out.data_mut().chunks_mut(k) {
            let norm = math::norm(v);
            if norm == 0.0 {
                return Err(AutodiffError::ZeroNorm);
            }
            for e in v.iter_mut() {
                *e /= norm;
            }
        }
        Ok(self.push1(Op::L2Normalize(input), out))
    }

    /// Squashes every vector along the last axis.
    pub fn squash(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let k = last_axis(x);
        let mut out = x.clone();
        for (src, dst) in x.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
            squash_into(src, dst);
        }
        self.push1(Op::Squash(input), out)
    }

    /// Pose transform: `poses` is `[batch, n_in, k]`, `matrices` is
    /// `[n_in, n_out, k]` (each k-row a row-major √k×√k matrix); the output is
    /// `[batch, n_in, n_out, k]`.
    pub fn caps_transform(&mut self, poses: Var, matrices: Var) -> Result<Var, AutodiffError> {
        let (batch, n_in, k) = match *self.value(poses).shape() {
            [b, n, k] => (b, n, k),
            _ => return Err(AutodiffError::Shape("caps_transform poses")),
        };
        let n_out = match *self.value(matrices).shape() {
            [n, m, kk] if n == n_in && kk == k => m,
            _ => return Err(AutodiffError::Shape("caps_transform matrices")),
        };
        let out = predict_raw(
            self.value(poses).data(),
            batch,
            n_in,
            n_out,
            k,
            self.value(matrices).data(),
        )?;
        let out = Tensor::new(vec![batch, n_in, n_out, k], out)?;
        Ok(self.push1(
            Op::CapsTransform {
                poses,
                matrices,
                batch,
                n_in,
                n_out,
                k,
            },
            out,
        ))
    }

    /// Batch normalization of a `[rows, features]` matrix. Running statistics
    /// live in `state` and are updated in training mode; `gamma` and `beta`
    /// come from the tape.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNorm,
        training: bool,
    ) -> Result<Var, AutodiffError> {
        let (rows, features) = match *self.value(x).shape() {
            [r, f] => (r, f),
            _ => return Err(AutodiffError::Shape("batch_norm input must be rank 2")),
        };
        if self.value(gamma).len() != features
            || self.value(beta).len() != features
            || state.features() != features
        {
            return Err(AutodiffError::Shape("batch_norm parameters"));
        }
        state.gamma = self.value(gamma).data().to_vec();
        state.beta = self.value(beta).data().to_vec();
        let (y, cache) = batch_norm_forward(self.value(x).data(), rows, state, training)?;
        let out = Tensor::new(vec![rows, features], y)?;
        Ok(self.push1(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            out,
        ))
    }

    /// Routes a `[batch, n_in, n_out, k]` prediction tensor. Outputs are
    /// `s_hat`/`pose` of shape `[batch, n_out, k]` and `activation` of shape
    /// `[batch, n_out]`.
    pub fn routing(
        &mut self,
        predictions: Var,
        algorithm: RoutingAlgorithm,
    ) -> Result<RoutingVars, AutodiffError> {
        let (batch, n_in, n_out, k) = match *self.value(predictions).shape() {
            [b, n, m, k] => (b, n, m, k),
            _ => return Err(AutodiffError::Shape("routing input must be rank 4")),
        };
        let mut s_hat = Vec::with_capacity(batch * n_out * k);
        let mut pose = Vec::with_capacity(batch * n_out * k);
        let mut act = Vec::with_capacity(batch * n_out);
        let per = n_in * n_out * k;
        for chunk in self.value(predictions).data().chunks(per) {
            let u = PredictionTensor::new(n_in, n_out, k, chunk.to_vec())?;
            let r = algorithm.route(&u)?;
            s_hat.extend_from_slice(&r.s_hat);
            pose.extend_from_slice(&r.pose);
            act.extend_from_slice(&r.activation);
        }
        let outs = self.push(
            Op::Routing {
                predictions,
                algorithm,
            },
            vec![
                Tensor::new(vec![batch, n_out, k], s_hat)?,
                Tensor::new(vec![batch, n_out, k], pose)?,
                Tensor::new(vec![batch, n_out], act)?,
            ],
        );
        Ok(RoutingVars {
            s_hat: outs[0],
            pose: outs[1],
            activation: outs[2],
        })
    }

    /// Batch mean of the per-example margin loss over `[batch, classes]`
    /// activations.
    pub fn margin_loss(
        &mut self,
        activations: Var,
        targets: Vec<bool>,
        params: MarginLossParams,
    ) -> Result<Var, AutodiffError> {
        let a = self.value(activations);
        if a.len() != targets.len() || a.rank() != 2 {
            return Err(AutodiffError::Shape("margin_loss targets"));
        }
        let (batch, m) = (a.shape()[0], a.shape()[1]);
        let mut total = 0.0;
        for b in 0..batch {
            let rows = b * m..(b + 1) * m;
            total += margin_loss(&a.data()[rows.clone()], &targets[rows], &params);
        }
        let out = Tensor::scalar(total / batch as f64);
        Ok(self.push1(
            Op::MarginLoss {
                activations,
                targets,
                params,
            },
            out,
        ))
    }

    /// Batch mean of softmax cross entropy over `[batch, classes]` logits.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: Vec<usize>,
    ) -> Result<Var, AutodiffError> {
        let a = self.value(logits);
        if a.rank() != 2 || a.shape()[0] != labels.len() {
            return Err(AutodiffError::Shape("softmax_cross_entropy labels"));
        }
        let m = a.shape()[1];
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            total += softmax_cross_entropy(&a.data()[b * m..(b + 1) * m], label)?;
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push1(Op::SoftmaxCe { logits, labels }, out))
    }

    /// Cotangents of `loss` (which must hold a single element) with respect to
    /// every recorded value. The tape is left untouched, so repeated calls
    /// return identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0)?);

        for node in self.nodes.iter().rev() {
            if node.outputs.iter().all(|&o| grads[o].is_none()) {
                continue;
            }
            self.backward_node(node, &mut grads)?;
        }

        let mut params = BTreeMap::new();
        for (name, var) in &self.params {
            let g = match &grads[var.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(*var).shape().to_vec())?,
            };
            params.insert(name.clone(), g);
        }
        Ok(Gradients {
            values: grads,
            params,
        })
    }

    fn backward_node(
        &self,
        node: &Node,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        let out_grad = |idx: usize| -> Result<Tensor, AutodiffError> {
            let id = node.outputs[idx];
            match &grads[id] {
                Some(g) => Ok(g.clone()),
                None => Ok(Tensor::zeros(self.values[id].shape().to_vec())?),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = out_grad(0)?;
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g)?;
            }
            Op::Mul(a, b) => {
                let g = out_grad(0)?;
                let ga = g.elementwise_mul(self.value(*b))?;
                let gb = g.elementwise_mul(self.value(*a))?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::ReduceSum { input, axis } => {
                let len = self.value(*input).shape()[*axis];
                let g = out_grad(0)?.broadcast_axis(*axis, len)?;
                accumulate(grads, *input, g)?;
            }
            Op::SumAll(input) => {
                let g = out_grad(0)?.item().unwrap_or(0.0);
                let shape = self.value(*input).shape().to_vec();
                accumulate(grads, *input, Tensor::full(shape, g)?)?;
            }
            Op::MatMul(a, b) => {
                let g = out_grad(0)?;
                let ga = g.matmul_small(&self.value(*b).transpose()?)?;
                let gb = self.value(*a).transpose()?.matmul_small(&g)?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                accumulate(grads, *input, out_grad(0)?.reshape(shape)?)?;
            }
            Op::L2Normalize(input) => {
                let x = self.value(*input);
                let k = last_axis(x);
                let g = out_grad(0)?;
                let mut gx = x.clone();
                for ((xs, gs), out) in x
                    .data()
                    .chunks(k)
                    .zip(g.data().chunks(k))
                    .zip(gx.data_mut().chunks_mut(k))
                {
                    normalize_backward(xs, gs, out);
                }
                accumulate(grads, *input, gx)?;
            }
            Op::Squash(input) => {
                let x = self.value(*input);
                let k = last_axis(x);
                let g = out_grad(0)?;
                let mut data = Vec::with_capacity(x.len());
                for (xs, gs) in x.data().chunks(k).zip(g.data().chunks(k)) {
                    data.extend(squash_backward(xs, gs));
                }
                accumulate(grads, *input, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::CapsTransform {
                poses,
                matrices,
                batch,
                n_in,
                n_out,
                k,
            } => {
                let g = out_grad(0)?;
                let (gp, gm) = predict_raw_backward(
                    self.value(*poses).data(),
                    *batch,
                    *n_in,
                    *n_out,
                    *k,
                    self.value(*matrices).data(),
                    g.data(),
                )?;
                let gp = Tensor::new(self.value(*poses).shape().to_vec(), gp)?;
                let gm = Tensor::new(self.value(*matrices).shape().to_vec(), gm)?;
                accumulate(grads, *poses, gp)?;
                accumulate(grads, *matrices, gm)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let g = out_grad(0)?;
                let bg = batch_norm_backward(cache, g.data())?;
                accumulate(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), bg.x)?,
                )?;
                accumulate(
                    grads,
                    *gamma,
                    Tensor::new(self.value(*gamma).shape().to_vec(), bg.gamma)?,
                )?;
                accumulate(
                    grads,
                    *beta,
                    Tensor::new(self.value(*beta).shape().to_vec(), bg.beta)?,
                )?;
            }
            Op::Routing {
                predictions,
                algorithm,
            } => {
                let preds = self.value(*predictions);
                let (n_in, n_out, k) = (preds.shape()[1], preds.shape()[2], preds.shape()[3]);
                let (g_s, g_p, g_a) = (out_grad(0)?, out_grad(1)?, out_grad(2)?);
                let per = n_in * n_out * k;
                let mut data = Vec::with_capacity(preds.len());
                for (b, chunk) in preds.data().chunks(per).enumerate() {
                    let u = PredictionTensor::new(n_in, n_out, k, chunk.to_vec())?;
                    let mut cot = RoutingCotangent::zeros(n_out, k);
                    cot.s_hat
                        .copy_from_slice(&g_s.data()[b * n_out * k..(b + 1) * n_out * k]);
                    cot.pose
                        .copy_from_slice(&g_p.data()[b * n_out * k..(b + 1) * n_out * k]);
                    cot.activation
                        .copy_from_slice(&g_a.data()[b * n_out..(b + 1) * n_out]);
                    data.extend_from_slice(algorithm.backward(&u, &cot)?.values());
                }
                accumulate(
                    grads,
                    *predictions,
                    Tensor::new(preds.shape().to_vec(), data)?,
                )?;
            }
            Op::MarginLoss {
                activations,
                targets,
                params,
            } => {
                let scale = out_grad(0)?.item().unwrap_or(0.0);
                let a = self.value(*activations);
                let batch = a.shape()[0] as f64;
                let g: Vec<f64> = margin_loss_grad(a.data(), targets, params)
                    .into_iter()
                    .map(|x| x * scale / batch)
                    .collect();
                accumulate(grads, *activations, Tensor::new(a.shape().to_vec(), g)?)?;
            }
            Op::SoftmaxCe { logits, labels } => {
                let scale = out_grad(0)?.item().unwrap_or(0.0);
                let a = self.value(*logits);
                let m = a.shape()[1];
                let batch = labels.len() as f64;
                let mut g = Vec::with_capacity(a.len());
                for (b, &label) in labels.iter().enumerate() {
                    let row = softmax_cross_entropy_grad(&a.data()[b * m..(b + 1) * m], label)?;
                    g.extend(row.into_iter().map(|x| x * scale / batch));
                }
                accumulate(grads, *logits, Tensor::new(a.shape().to_vec(), g)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) -> Result<(), AutodiffError> {
    let slot = &mut grads[var.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}
