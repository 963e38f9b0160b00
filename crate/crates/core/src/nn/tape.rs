//! Reverse-mode tape over the kernels in [`super::ops`].
//!
//! A [`Tape`] borrows the parameter store immutably; running batch-norm
//! statistics observed in training mode are returned as [`BnUpdate`]s and
//! applied by the caller after the step.

use std::sync::Arc;

use super::ops::{self, Conv2dGeom, GatherPlan};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor4};
use crate::error::{CoralError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    Resize(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Gather {
        x: Var,
        plan: Arc<GatherPlan>,
    },
    Flatten(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    L2Norm {
        x: Var,
        group: usize,
        eps: T,
        norms: Vec<T>,
    },
    Vlad {
        x: Var,
        a: Var,
        c: Var,
    },
}

struct Node<T> {
    value: Option<Tensor4<T>>,
    op: Op<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<'s, T> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    training: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("node value dropped"),
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn input(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Result<Var> {
        let geom = Conv2dGeom { stride, pad };
        let y = ops::conv2d_forward(
            self.value(x),
            self.store.get(w),
            b.map(|id| self.store.get(id).data()),
            geom,
        )?;
        let w = self.param(w);
        let b = b.map(|id| self.param(id));
        Ok(self.push(y, Op::Conv { x, w, b, geom }))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let running = if self.training {
            None
        } else {
            Some((self.store.get(running_mean).data(), self.store.get(running_var).data()))
        };
        let f = ops::batch_norm_forward(
            self.value(x),
            self.store.get(gamma).data(),
            self.store.get(beta).data(),
            running,
        )?;
        if self.training {
            self.bn_updates.push(BnUpdate {
                running_mean,
                running_var,
                mean: f.batch_mean,
                var: f.batch_var,
            });
        }
        let g = self.param(gamma);
        let b = self.param(beta);
        let batch_stats = self.training;
        Ok(self.push(
            f.y,
            Op::BatchNorm {
                x,
                gamma: g,
                beta: b,
                xhat: f.xhat,
                inv_std: f.inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool_forward(self.value(x), k, Conv2dGeom { stride, pad })?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let y = ops::avg_pool_forward(self.value(x), k, stride)?;
        Ok(self.push(y, Op::AvgPool { x, k, stride }))
    }

    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = ops::resize_nearest_forward(self.value(x), h, w)?;
        Ok(self.push(y, Op::Resize(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(CoralError::Shape(format!("cannot add {:?} and {:?}", ta.dims(), tb.dims())));
        }
        let mut y = ta.clone();
        y.add_assign(tb);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    pub fn gather(&mut self, x: Var, plan: Arc<GatherPlan>) -> Result<Var> {
        let y = ops::gather_forward(self.value(x), &plan)?;
        Ok(self.push(y, Op::Gather { x, plan }))
    }

    /// `[B, C, H, W] -> [B, C*H*W, 1, 1]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = t.clone().reshape([t.batch(), t.sample_len(), 1, 1]).unwrap();
        self.push(y, Op::Flatten(x))
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let y = ops::linear_forward(self.value(x), self.store.get(w), b.map(|id| self.store.get(id).data()))?;
        let w = self.param(w);
        let b = b.map(|id| self.param(id));
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let y = ops::softmax_channels_forward(self.value(x));
        self.push(y, Op::Softmax(x))
    }

    pub fn l2_normalize(&mut self, x: Var, group: usize, eps: f64) -> Result<Var> {
        let eps = T::lit(eps);
        let (y, norms) = ops::l2_normalize_forward(self.value(x), group, eps)?;
        Ok(self.push(y, Op::L2Norm { x, group, eps, norms }))
    }

    pub fn vlad(&mut self, x: Var, a: Var, centers: ParamId) -> Result<Var> {
        let y = ops::vlad_forward(self.value(x), self.value(a), self.store.get(centers).data())?;
        let c = self.param(centers);
        Ok(self.push(y, Op::Vlad { x, a, c }))
    }

    /// Back-propagates `seed` (the gradient of the objective with respect
    /// to `root`) through the recorded graph.
    pub fn backward(&self, root: Var, seed: Tensor4<T>) -> Result<Gradients<T>> {
        if seed.dims() != self.value(root).dims() {
            return Err(CoralError::Shape(format!(
                "seed {:?} does not match root {:?}",
                seed.dims(),
                self.value(root).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut param_grads: Vec<Option<Tensor4<T>>> = (0..self.store.len()).map(|_| None).collect();
        let mut input_grads: Vec<(Var, Tensor4<T>)> = Vec::new();

        fn acc<T: Real>(grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => input_grads.push((Var(idx), dy)),
                Op::Param(id) => match &mut param_grads[id.0] {
                    Some(e) => e.add_assign(&dy),
                    slot => *slot = Some(dy),
                },
                Op::Conv { x, w, b, geom } => {
                    let g = ops::conv2d_backward(self.value(*x), self.value(*w), &dy, *geom);
                    acc(&mut grads, *x, g.dx);
                    acc(&mut grads, *w, g.dw);
                    if let Some(b) = b {
                        let dims = self.value(*b).dims();
                        acc(&mut grads, *b, Tensor4::from_vec(dims, g.db)?);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gm = self.value(*gamma);
                    let g = ops::batch_norm_backward(&dy, xhat, inv_std, gm.data(), *batch_stats);
                    let dims = gm.dims();
                    acc(&mut grads, *x, g.dx);
                    acc(&mut grads, *gamma, Tensor4::from_vec(dims, g.dgamma)?);
                    acc(&mut grads, *beta, Tensor4::from_vec(dims, g.dbeta)?);
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::max_pool_backward(self.value(*x).dims(), argmax, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::AvgPool { x, k, stride } => {
                    let dx = ops::avg_pool_backward(self.value(*x).dims(), *k, *stride, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Resize(x) => {
                    let dx = ops::resize_nearest_backward(self.value(*x).dims(), &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Concat(a, b) => {
                    let (da, db) = ops::split_channels(&dy, self.value(*a).channels());
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Gather { x, plan } => {
                    let dx = ops::gather_backward(self.value(*x).dims(), plan, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Flatten(x) => {
                    let dx = dy.reshape(self.value(*x).dims())?;
                    acc(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let dims = self.value(*b).dims();
                        acc(&mut grads, *b, Tensor4::from_vec(dims, db)?);
                    }
                }
                Op::Softmax(x) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let dx = ops::softmax_channels_backward(y, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::L2Norm { x, group, eps, norms } => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let dx = ops::l2_normalize_backward(self.value(*x), y, norms, *group, *eps, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Vlad { x, a, c } => {
                    let cd = self.value(*c);
                    let g = ops::vlad_backward(self.value(*x), self.value(*a), cd.data(), &dy);
                    let dims = cd.dims();
                    acc(&mut grads, *x, g.dx);
                    acc(&mut grads, *a, g.da);
                    acc(&mut grads, *c, Tensor4::from_vec(dims, g.dc)?);
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
            inputs: input_grads,
        })
    }
}

pub struct Gradients<T> {
    params: Vec<Option<Tensor4<T>>>,
    inputs: Vec<(Var, Tensor4<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor4<T>> {
        self.params[id.0].as_ref()
    }

    pub fn input(&self, v: Var) -> Option<&Tensor4<T>> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }

    /// Per-parameter gradients, zero-filled for parameters the graph did not touch.
    pub fn into_param_grads(self, store: &ParamStore<T>) -> Vec<Tensor4<T>> {
        self.params
            .into_iter()
            .enumerate()
            .map(|(k, g)| g.unwrap_or_else(|| Tensor4::zeros(store.get(ParamId(k)).dims())))
            .collect()
    }
}

/// Applies running-statistics updates recorded by a training-mode forward pass.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::lit(momentum);
    for u in updates {
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}
