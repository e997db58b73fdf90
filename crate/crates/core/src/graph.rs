//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] for one forward pass. Every op appends a
//! node holding its output; [`Graph::backward`] walks the tape in reverse.
//! With recording disabled (inference) nothing is retained and intermediate
//! values are freed as soon as the caller drops them.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Whether batch normalisation uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A value in the graph. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Float> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var<T>,
        w: Var<T>,
        b: Option<Var<T>>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        cache: BatchNormCache<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var<T>,
        slope: T,
    },
    Add(Var<T>, Var<T>),
    ScaleBy {
        x: Var<T>,
        k: Var<T>,
    },
    MulConst {
        x: Var<T>,
        c: T,
    },
    Concat(Vec<Var<T>>),
    ChannelPool {
        x: Var<T>,
        arg: Vec<u32>,
    },
    MaxPool {
        x: Var<T>,
        arg: Vec<usize>,
    },
    Resize {
        x: Var<T>,
    },
    Sigmoid {
        x: Var<T>,
    },
    /// Scalar function of several inputs with precomputed partial derivatives.
    Scalar {
        inputs: Vec<(Var<T>, Tensor<T>)>,
    },
}

struct Node<T> {
    op: Op<T>,
}

pub struct Graph<'s, T> {
    store: &'s ParamStore<T>,
    mode: Mode,
    record: bool,
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var<T>>>,
    buffer_updates: RefCell<Vec<(ParamId, ParamId, Vec<T>, Vec<T>)>>,
}

/// Batch-norm momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl<'s, T: Float> Graph<'s, T> {
    /// A recording graph for training or gradient checks.
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            record: true,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// A non-recording evaluation graph.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            record: false,
            ..Self::new(store, Mode::Eval)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<T> {
        let value = Arc::new(value);
        if !self.record {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Differentiable leaf (gradients are available through [`Gradients::wrt`]).
    pub fn input(&self, t: Tensor<T>) -> Var<T> {
        self.push(t, Op::Leaf)
    }

    /// Untracked constant.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Arc::new(t),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        if let Some(v) = self.params.borrow().get(&id) {
            return v.clone();
        }
        let value = self.store.get(id).clone();
        let var = if self.record {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { op: Op::Leaf });
            Var {
                id: Some(nodes.len() - 1),
                value,
            }
        } else {
            Var { id: None, value }
        };
        self.params.borrow_mut().insert(id, var.clone());
        var
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        geo: ConvGeometry,
    ) -> Result<Var<T>> {
        let y = ops::conv2d(x.value(), w.value(), b.map(|b| b.value()), geo)?;
        Ok(self.push(
            y,
            Op::Conv {
                x: x.clone(),
                w: w.clone(),
                b: b.cloned(),
                geo,
            },
        ))
    }

    /// Batch normalisation with running statistics held as store buffers.
    pub fn batch_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var<T>> {
        let c = x.shape()[1];
        if gamma.value().numel() != c {
            return Err(Error::Shape(format!(
                "batch norm over {} channels, input {:?}",
                gamma.value().numel(),
                x.shape()
            )));
        }
        let batch_stats = self.mode == Mode::Train;
        let rm = self.store.get(running_mean);
        let rv = self.store.get(running_var);
        let stats = (!batch_stats).then(|| (rm.data(), rv.data()));
        let (y, cache) = ops::batch_norm(
            x.value(),
            gamma.value().data(),
            beta.value().data(),
            stats,
            T::c(BN_EPS),
        );
        if batch_stats {
            self.buffer_updates.borrow_mut().push((
                running_mean,
                running_var,
                cache.batch_mean.clone(),
                cache.batch_var_unbiased.clone(),
            ));
        }
        Ok(self.push(
            y,
            Op::BatchNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                cache,
                batch_stats,
            },
        ))
    }

    pub fn leaky_relu(&self, x: &Var<T>, slope: f64) -> Var<T> {
        let s = T::c(slope);
        let y = x.value().map(|v| if v > T::zero() { v } else { v * s });
        self.push(y, Op::LeakyRelu { x: x.clone(), slope: s })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = a.value().zip_map(b.value(), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a.clone(), b.clone())))
    }

    /// Sums any number of equally shaped values.
    pub fn sum(&self, items: &[Var<T>]) -> Result<Var<T>> {
        let (first, rest) = items
            .split_first()
            .ok_or_else(|| Error::Invalid("sum of nothing".into()))?;
        rest.iter().try_fold(first.clone(), |acc, v| self.add(&acc, v))
    }

    /// Multiplies every element by a learned `[1, 1, 1, 1]` scalar.
    pub fn scale_by(&self, x: &Var<T>, k: &Var<T>) -> Result<Var<T>> {
        if k.value().numel() != 1 {
            return Err(Error::Shape(format!(
                "scale factor must be a scalar, got {:?}",
                k.shape()
            )));
        }
        let kv = k.value().data()[0];
        let y = x.value().map(|v| v * kv);
        Ok(self.push(
            y,
            Op::ScaleBy {
                x: x.clone(),
                k: k.clone(),
            },
        ))
    }

    pub fn mul_const(&self, x: &Var<T>, c: f64) -> Var<T> {
        let c = T::c(c);
        let y = x.value().map(|v| v * c);
        self.push(y, Op::MulConst { x: x.clone(), c })
    }

    /// Channel-axis concatenation.
    pub fn concat(&self, items: &[&Var<T>]) -> Result<Var<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let [n, _, h, w] = first.shape();
        let mut total = 0;
        for v in items {
            let [vn, vc, vh, vw] = v.shape();
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
            total += vc;
        }
        let mut data = Vec::with_capacity(n * total * h * w);
        for i in 0..n {
            for v in items {
                data.extend_from_slice(v.value().item(i));
            }
        }
        let y = Tensor::from_vec([n, total, h, w], data)?;
        Ok(self.push(y, Op::Concat(items.iter().map(|v| (*v).clone()).collect())))
    }

    pub fn channel_pool(&self, x: &Var<T>, m: usize) -> Result<Var<T>> {
        let (y, arg) = ops::channel_pool(x.value(), m)?;
        Ok(self.push(y, Op::ChannelPool { x: x.clone(), arg }))
    }

    pub fn max_pool(&self, x: &Var<T>, k: usize, geo: ConvGeometry) -> Var<T> {
        let (y, arg) = ops::max_pool2d(x.value(), k, geo);
        self.push(y, Op::MaxPool { x: x.clone(), arg })
    }

    pub fn resize(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let y = ops::resize_bilinear(x.value(), out_h, out_w)?;
        Ok(self.push(y, Op::Resize { x: x.clone() }))
    }

    pub fn upsample2x(&self, x: &Var<T>) -> Result<Var<T>> {
        let [_, _, h, w] = x.shape();
        self.resize(x, 2 * h, 2 * w)
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let y = x.value().map(ops::sigmoid);
        self.push(y, Op::Sigmoid { x: x.clone() })
    }

    /// Records a scalar `value` whose partial derivative with respect to each
    /// input is supplied (same shape as that input).
    pub fn scalar_fn(&self, value: T, inputs: Vec<(Var<T>, Tensor<T>)>) -> Result<Var<T>> {
        for (v, g) in &inputs {
            g.expect_shape(v.shape())?;
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs }))
    }

    /// Applies the running-statistics updates collected by training-mode batch
    /// norms. Updates are applied in call order, so a normalisation layer that
    /// ran several times in one pass is updated several times.
    pub fn commit_buffers(&self, store: &mut ParamStore<T>) {
        apply_buffer_updates(store, self.take_buffer_updates());
    }

    /// Pending running-statistics updates as `(mean id, var id, batch mean, batch var)`.
    pub fn take_buffer_updates(&self) -> BufferUpdates<T> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        let root_id = root.id.ok_or_else(|| {
            Error::Invalid("backward from an untracked value (recording disabled?)".into())
        })?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_id] = Some(Tensor::full(root.shape(), T::one()));
        let mut done: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        fn acc<T: Float>(grads: &mut [Option<Tensor<T>>], v: &Var<T>, g: Tensor<T>) {
            if let Some(id) = v.id {
                match &mut grads[id] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for id in (0..=root_id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &nodes[id].op {
                Op::Leaf => {
                    done[id] = Some(dy);
                }
                Op::Conv { x, w, b, geo } => {
                    let cg = ops::conv2d_backward(x.value(), w.value(), &dy, *geo, x.is_tracked())?;
                    if let Some(dx) = cg.dx {
                        acc(&mut grads, x, dx);
                    }
                    acc(&mut grads, w, cg.dweight);
                    if let Some(b) = b {
                        acc(&mut grads, b, cg.dbias);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                    batch_stats,
                } => {
                    let (dx, dg, db) =
                        ops::batch_norm_backward(&dy, gamma.value().data(), cache, *batch_stats);
                    acc(&mut grads, x, dx);
                    acc(&mut grads, gamma, Tensor::from_vec(gamma.shape(), dg)?);
                    acc(&mut grads, beta, Tensor::from_vec(beta.shape(), db)?);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = x
                        .value()
                        .zip_map(&dy, |v, g| if v > T::zero() { g } else { g * *slope })?;
                    acc(&mut grads, x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, dy.clone());
                    acc(&mut grads, b, dy);
                }
                Op::ScaleBy { x, k } => {
                    let kv = k.value().data()[0];
                    let dk: T = x
                        .value()
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    acc(&mut grads, k, Tensor::scalar(dk));
                    acc(&mut grads, x, dy.map(|g| g * kv));
                }
                Op::MulConst { x, c } => {
                    acc(&mut grads, x, dy.map(|g| g * *c));
                }
                Op::Concat(items) => {
                    let [n, total, h, w] = dy.shape();
                    let hw = h * w;
                    let mut offset = 0;
                    for v in items {
                        let vc = v.shape()[1];
                        if v.is_tracked() {
                            let mut data = Vec::with_capacity(n * vc * hw);
                            for i in 0..n {
                                let start = (i * total + offset) * hw;
                                data.extend_from_slice(&dy.data()[start..start + vc * hw]);
                            }
                            acc(&mut grads, v, Tensor::from_vec([n, vc, h, w], data)?);
                        }
                        offset += vc;
                    }
                }
                Op::ChannelPool { x, arg } => {
                    let dx = ops::channel_pool_backward(&dy, arg, x.shape()[1]);
                    acc(&mut grads, x, dx);
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = Tensor::zeros(x.shape());
                    for (o, &at) in arg.iter().enumerate() {
                        dx.data_mut()[at] += dy.data()[o];
                    }
                    acc(&mut grads, x, dx);
                }
                Op::Resize { x } => {
                    let [_, _, h, w] = x.shape();
                    acc(&mut grads, x, ops::resize_bilinear_backward(&dy, h, w));
                }
                Op::Sigmoid { x } => {
                    let y = self.recompute_sigmoid(x);
                    let dx = y.zip_map(&dy, |s, g| g * s * (T::one() - s))?;
                    acc(&mut grads, x, dx);
                }
                Op::Scalar { inputs } => {
                    let upstream = dy.data()[0];
                    for (v, g) in inputs {
                        acc(&mut grads, v, g.map(|p| p * upstream));
                    }
                }
            }
        }

        let params = self
            .params
            .borrow()
            .iter()
            .filter_map(|(pid, v)| v.id.map(|id| (*pid, id)))
            .collect();
        Ok(Gradients { grads: done, params })
    }

    fn recompute_sigmoid(&self, x: &Var<T>) -> Tensor<T> {
        x.value().map(ops::sigmoid)
    }
}

/// Folds `(mean id, var id, batch mean, batch var)` updates into the running statistics.
pub fn apply_buffer_updates<T: Float>(store: &mut ParamStore<T>, updates: BufferUpdates<T>) {
    let m = T::c(BN_MOMENTUM);
    for (mean_id, var_id, mean, var) in updates {
        for (r, b) in store.value_mut(mean_id).data_mut().iter_mut().zip(&mean) {
            *r = (T::one() - m) * *r + m * *b;
        }
        for (r, b) in store.value_mut(var_id).data_mut().iter_mut().zip(&var) {
            *r = (T::one() - m) * *r + m * *b;
        }
    }
}

pub type BufferUpdates<T> = Vec<(ParamId, ParamId, Vec<T>, Vec<T>)>;

/// Gradients of the root with respect to leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.grads[id].as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .get(&id)
            .and_then(|&node| self.grads[node].as_ref())
    }
}
