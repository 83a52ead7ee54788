//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every forward pass records its operations on a [`Tape`]; calling
//! [`Tape::backward`] walks the recorded nodes in reverse and accumulates
//! gradients. Model weights live in [`Param`]s, each with a process-unique
//! [`ParamId`], so gradients can be routed back to the weights that produced
//! them regardless of which module owns them.
//!
//! Shape mismatches inside an op are programming errors and panic; public
//! entry points in the rest of the crate validate user-facing shapes before
//! any op runs.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{matmul_into, numel, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A trainable (or frozen) weight tensor with a unique identity.
///
/// Cloning a `Param` deep-copies the value and allocates a fresh id, so a
/// copied branch never aliases the gradients of its source.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param::new(self.value.clone())
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    grad_enabled: bool,
    trainable: Option<HashSet<ParamId>>,
}

/// Records operations for one forward pass.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that tracks gradients for every param it sees.
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
                grad_enabled: true,
                trainable: None,
            }),
        }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn no_grad() -> Self {
        let t = Self::new();
        t.inner.borrow_mut().grad_enabled = false;
        t
    }

    /// A tape that only tracks gradients for the listed params.
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        let t = Self::new();
        t.inner.borrow_mut().trainable = Some(ids.into_iter().collect());
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        id
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(value, vec![], None, false);
        Var { tape: self, id }
    }

    /// A free input that receives gradients (used for gradient checks).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let rg = self.grad_enabled();
        let id = self.push_node(value, vec![], None, rg);
        Var { tape: self, id }
    }

    /// The tape variable for a weight; repeated calls return the same node.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if let Some(&id) = self.inner.borrow().params.get(&p.id) {
            return Var { tape: self, id };
        }
        let rg = {
            let inner = self.inner.borrow();
            inner.grad_enabled && inner.trainable.as_ref().is_none_or(|s| s.contains(&p.id))
        };
        let id = self.push_node(p.value.clone(), vec![], None, rg);
        self.inner.borrow_mut().params.insert(p.id, id);
        Var { tape: self, id }
    }

    fn op<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let (rg, ids) = {
            let inner = self.inner.borrow();
            let rg = inner.grad_enabled && parents.iter().any(|p| inner.nodes[p.id].requires_grad);
            (rg, parents.iter().map(|p| p.id).collect::<Vec<_>>())
        };
        let id = self.push_node(value, ids, Some(Box::new(backward)), rg);
        Var { tape: self, id }
    }

    /// Registers an operation with a hand-written backward pass.
    ///
    /// `backward` receives the gradient of the output and must return one
    /// entry per input, each either `None` or a tensor of that input's shape.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        self.op(value, inputs, move |g, _, _| backward(g))
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let inner = self.inner.borrow();
        let n = root.id + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if inner.nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::ones(inner.nodes[root.id].value.shape()));
        }
        for id in (0..n).rev() {
            let node = &inner.nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &*inner.nodes[p].value).collect();
            let pgrads = bw(&g, &parent_vals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !inner.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), inner.nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients {
            grads,
            params: inner.params.clone(),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.param_id(p.id)
    }

    pub fn param_id(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&i| self.grads.get(i)).and_then(|g| g.as_ref())
    }
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Padding behaviour for [`Var::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

/// A fixed sparse linear map from `n_in` rows to `n_out` rows.
///
/// Used for bilinear resampling and perspective crops: each output row is a
/// weighted sum of input rows, applied independently to every channel.
#[derive(Clone, Debug)]
pub struct SparseMap {
    pub n_in: usize,
    pub n_out: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        self,
        other: Var<'t>,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
        let mut out = vec![0.0; numel(&out_shape)];
        if a.shape() == b.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        }
        let value = Tensor::new(&out_shape, out);
        self.tape.op(value, &[self, other], move |g, p, _| {
            let (a, b) = (p[0], p[1]);
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            if a.shape() == b.shape() {
                for i in 0..gd.len() {
                    let (da, db) = df(ad[i], bd[i]);
                    ga[i] = gd[i] * da;
                    gb[i] = gd[i] * db;
                }
            } else {
                let sa = broadcast_strides(a.shape(), g.shape());
                let sb = broadcast_strides(b.shape(), g.shape());
                for_each_broadcast(g.shape(), &sa, &sb, |o, ia, ib| {
                    let (da, db) = df(ad[ia], bd[ib]);
                    ga[ia] += gd[o] * da;
                    gb[ib] += gd[o] * db;
                });
            }
            vec![Some(Tensor::new(a.shape(), ga)), Some(Tensor::new(b.shape(), gb))]
        })
    }

    /// Broadcasting addition (numpy rules).
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let value = x.map(f);
        self.tape.op(value, &[self], move |g, p, y| {
            let x = p[0];
            let gd: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::new(x.shape(), gd))]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, gelu_grad)
    }

    /// `max(x, lo)`; the gradient is zero where clamped.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let value = Tensor::scalar(x.sum());
        self.tape.op(value, &[self], |g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over the last axis: `[.., n] -> [..]`.
    pub fn sum_last(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.last().expect("sum_last on scalar");
        let out: Vec<f64> = x.data().chunks(n).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(&shape[..shape.len() - 1], out);
        self.tape.op(value, &[self], move |g, p, _| {
            let mut gx = Vec::with_capacity(p[0].numel());
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv, n));
            }
            vec![Some(Tensor::new(p[0].shape(), gx))]
        })
    }

    pub fn mean_last(self) -> Var<'t> {
        let n = *self.shape().last().expect("mean_last on scalar") as f64;
        self.sum_last().scale(1.0 / n)
    }

    /// Sums over the first axis: `[m, ..] -> [..]`.
    pub fn sum_first(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let m = shape[0];
        let inner = x.numel() / m.max(1);
        let mut out = vec![0.0; inner];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&x.data()[r * inner..(r + 1) * inner]) {
                *o += v;
            }
        }
        let value = Tensor::new(&shape[1..], out);
        self.tape.op(value, &[self], move |g, p, _| {
            let mut gx = Vec::with_capacity(p[0].numel());
            for _ in 0..m {
                gx.extend_from_slice(g.data());
            }
            vec![Some(Tensor::new(p[0].shape(), gx))]
        })
    }

    pub fn mean_first(self) -> Var<'t> {
        let m = self.shape()[0] as f64;
        self.sum_first().scale(1.0 / m)
    }

    // ---- row-wise normalisations -----------------------------------------

    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(x.shape(), out);
        self.tape.op(value, &[self], move |g, _, y| {
            let mut gx = vec![0.0; y.numel()];
            for ((gr, yr), out) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(y.shape(), gx))]
        })
    }

    /// Normalises each row of the last axis to zero mean and unit variance.
    pub fn layer_norm_last(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut out = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(x.numel() / n);
        for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - mean) * is;
            }
        }
        let value = Tensor::new(x.shape(), out);
        self.tape.op(value, &[self], move |g, _, y| {
            let mut gx = vec![0.0; y.numel()];
            for (r, ((gr, yr), o)) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                let mg = gr.iter().sum::<f64>() / n as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for ((ov, &gv), &yv) in o.iter_mut().zip(gr).zip(yr) {
                    *ov = inv_std[r] * (gv - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::new(y.shape(), gx))]
        })
    }

    /// `x / sqrt(sum(x^2) + eps)` along the last axis.
    pub fn normalize_last(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(x.numel() / n);
        for row in out.chunks_mut(n) {
            let r = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(r);
            for v in row.iter_mut() {
                *v /= r;
            }
        }
        let value = Tensor::new(x.shape(), out);
        self.tape.op(value, &[self], move |g, p, _| {
            let x = p[0];
            let mut gx = vec![0.0; x.numel()];
            for (r, ((gr, xr), o)) in g.data().chunks(n).zip(x.data().chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                let rn = norms[r];
                let gdotx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                for ((ov, &gv), &xv) in o.iter_mut().zip(gr).zip(xr) {
                    *ov = gv / rn - xv * gdotx / (rn * rn * rn);
                }
            }
            vec![Some(Tensor::new(x.shape(), gx))]
        })
    }

    // ---- linear algebra & shape ------------------------------------------

    /// `self[m,k] @ other[k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = self.value().matmul(&other.value());
        self.tape.op(value, &[self, other], |g, p, _| {
            let (a, b) = (p[0], p[1]);
            let (m, k) = a.dims2();
            let (_, n) = b.dims2();
            let bt = b.transpose2();
            let mut ga = vec![0.0; m * k];
            matmul_into(g.data(), bt.data(), &mut ga, m, n, k);
            let at = a.transpose2();
            let mut gb = vec![0.0; k * n];
            matmul_into(at.data(), g.data(), &mut gb, k, m, n);
            vec![Some(Tensor::new(&[m, k], ga)), Some(Tensor::new(&[k, n], gb))]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let value = self.value().transpose2();
        self.tape.op(value, &[self], |g, _, _| vec![Some(g.transpose2())])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = (*self.value()).clone().reshape(shape);
        self.tape.op(value, &[self], |g, p, _| vec![Some(g.clone().reshape(p[0].shape()))])
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = vals
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), base.len(), "concat rank mismatch");
                assert_eq!(&s[..axis], &base[..axis], "concat leading dims");
                assert_eq!(&s[axis + 1..], &base[axis + 1..], "concat trailing dims");
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in vals.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = Tensor::new(&shape, out);
        tape.op(value, parts, move |g, p, _| {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &sz) in grads.iter_mut().zip(&sizes) {
                    gv.extend_from_slice(&gd[off..off + sz * inner]);
                    off += sz * inner;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(gv, pv)| Some(Tensor::new(pv.shape(), gv)))
                .collect()
        })
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let value = Tensor::new(&oshape, out);
        self.tape.op(value, &[self], move |g, p, _| {
            let mut gx = vec![0.0; p[0].numel()];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(p[0].shape(), gx))]
        })
    }

    /// Selects rows along the first axis (with repetition); the backward
    /// pass scatter-adds.
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx.iter() {
            assert!(i < shape[0], "gather index {i} out of range {}", shape[0]);
            out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[0] = idx.len();
        let value = Tensor::new(&oshape, out);
        self.tape.op(value, &[self], move |g, p, _| {
            let mut gx = vec![0.0; p[0].numel()];
            for (r, &i) in idx.iter().enumerate() {
                for (a, b) in gx[i * inner..(i + 1) * inner].iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]) {
                    *a += b;
                }
            }
            vec![Some(Tensor::new(p[0].shape(), gx))]
        })
    }

    // ---- images (HWC layout) ---------------------------------------------

    /// 2D convolution of an `[H, W, C]` input with `[O, KH, KW, C]` weights.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize, mode: Padding) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let geo = ConvGeom::new(x.shape(), w.shape(), stride, pad, mode);
        let mut out = vec![0.0; geo.oh * geo.ow * geo.o];
        if let Some(b) = &bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[geo.o], "conv bias shape");
            for px in out.chunks_mut(geo.o) {
                px.copy_from_slice(bv.data());
            }
        }
        geo.for_each_tap(|obase, ibase, wbase| {
            let xin = &x.data()[ibase..ibase + geo.c];
            for o in 0..geo.o {
                let wrow = &w.data()[wbase + o * geo.wstride..wbase + o * geo.wstride + geo.c];
                out[obase + o] += dot(wrow, xin);
            }
        });
        let value = Tensor::new(&[geo.oh, geo.ow, geo.o], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.op(value, &parents, move |g, p, _| {
            let (x, w) = (p[0], p[1]);
            let mut gx = vec![0.0; x.numel()];
            let mut gw = vec![0.0; w.numel()];
            let gd = g.data();
            geo.for_each_tap(|obase, ibase, wbase| {
                let xin = &x.data()[ibase..ibase + geo.c];
                for o in 0..geo.o {
                    let go = gd[obase + o];
                    if go == 0.0 {
                        continue;
                    }
                    let woff = wbase + o * geo.wstride;
                    for ci in 0..geo.c {
                        gw[woff + ci] += go * xin[ci];
                        gx[ibase + ci] += go * w.data()[woff + ci];
                    }
                }
            });
            let mut res = vec![Some(Tensor::new(x.shape(), gx)), Some(Tensor::new(w.shape(), gw))];
            if has_bias {
                let mut gb = vec![0.0; geo.o];
                for px in gd.chunks(geo.o) {
                    for (b, v) in gb.iter_mut().zip(px) {
                        *b += v;
                    }
                }
                res.push(Some(Tensor::new(&[geo.o], gb)));
            }
            res
        })
    }

    /// 2x2 average pooling of an `[H, W, C]` input (H and W even).
    pub fn avg_pool2(self) -> Var<'t> {
        let x = self.value();
        let (h, w, c) = dims3(x.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let ib = ((2 * y + dy) * w + 2 * xx + dx) * c;
                    let ob = (y * ow + xx) * c;
                    for ci in 0..c {
                        out[ob + ci] += 0.25 * x.data()[ib + ci];
                    }
                }
            }
        }
        let value = Tensor::new(&[oh, ow, c], out);
        self.tape.op(value, &[self], move |g, p, _| {
            let mut gx = vec![0.0; p[0].numel()];
            for y in 0..oh {
                for xx in 0..ow {
                    let ob = (y * ow + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let ib = ((2 * y + dy) * w + 2 * xx + dx) * c;
                        for ci in 0..c {
                            gx[ib + ci] += 0.25 * g.data()[ob + ci];
                        }
                    }
                }
            }
            vec![Some(Tensor::new(p[0].shape(), gx))]
        })
    }

    /// Applies a [`SparseMap`] to the rows of a `[n_in, C]` input.
    pub fn resample(self, map: Rc<SparseMap>) -> Var<'t> {
        let x = self.value();
        let (n_in, c) = x.dims2();
        assert_eq!(n_in, map.n_in, "resample input rows");
        let mut out = vec![0.0; map.n_out * c];
        for (o, row) in map.rows.iter().enumerate() {
            for &(i, wt) in row {
                for ci in 0..c {
                    out[o * c + ci] += wt * x.data()[i * c + ci];
                }
            }
        }
        let value = Tensor::new(&[map.n_out, c], out);
        self.tape.op(value, &[self], move |g, p, _| {
            let mut gx = vec![0.0; p[0].numel()];
            for (o, row) in map.rows.iter().enumerate() {
                for &(i, wt) in row {
                    for ci in 0..c {
                        gx[i * c + ci] += wt * g.data()[o * c + ci];
                    }
                }
            }
            vec![Some(Tensor::new(p[0].shape(), gx))]
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    mode: Padding,
    wstride: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize, mode: Padding) -> Self {
        let (h, w, c) = dims3(xs);
        assert_eq!(ws.len(), 4, "conv weight must be [O, KH, KW, C]");
        let (o, kh, kw, wc) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wc, c, "conv channel mismatch");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { h, w, c, o, kh, kw, oh, ow, stride, pad, mode, wstride: kh * kw * c }
    }

    fn src(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            Some(i as usize)
        } else {
            match self.mode {
                Padding::Zero => None,
                Padding::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
            }
        }
    }

    /// Calls `f(out_base, in_base, weight_base)` for every (output pixel,
    /// kernel tap) pair that reads a real or replicated input pixel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let obase = (oy * self.ow + ox) * self.o;
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    let Some(sy) = self.src(iy, self.h) else { continue };
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let Some(sx) = self.src(ix, self.w) else { continue };
                        f(obase, (sy * self.w + sx) * self.c, (ky * self.kw + kx) * self.c);
                    }
                }
            }
        }
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected [H, W, C], got {s:?}");
    (s[0], s[1], s[2])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64, _y: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the rank of `out`, zero on broadcast dims.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + r - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out.len();
    let n = numel(out);
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..r).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Result of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-component relative error (see [`gradcheck`]).
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst component.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Checks the gradient of the scalar `f` with respect to each of `inputs`
/// using central differences with the given step.
///
/// The per-component error is `|a - n| / max(|a|, |n|, floor)` where `floor`
/// is `1e-3` times the largest numeric gradient magnitude, so components that
/// are negligible relative to the whole gradient are measured on that scale
/// rather than amplified by tiny denominators.
pub fn gradcheck(inputs: &[Tensor], step: f64, f: impl Fn(&Tape, &[Var<'_>]) -> ScalarOut) -> GradCheck {
    gradcheck_impl(inputs, step, |tape, vars| f(tape, vars).0)
}

/// Wrapper returned by [`gradcheck`] closures to name the scalar output.
pub struct ScalarOut(usize);

fn gradcheck_impl(inputs: &[Tensor], step: f64, f: impl Fn(&Tape, &[Var<'_>]) -> usize) -> GradCheck {
    let eval = |vals: &[Tensor], grad: bool| -> (f64, Vec<Tensor>) {
        let tape = if grad { Tape::new() } else { Tape::no_grad() };
        let vars: Vec<Var<'_>> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out_id = f(&tape, &vars);
        let out = Var { tape: &tape, id: out_id };
        let v = out.item();
        let grads = if grad {
            let g = tape.backward(out);
            vars.iter()
                .map(|v| g.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
                .collect()
        } else {
            vec![]
        };
        (v, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut ng = vec![0.0; inputs[k].numel()];
        for (e, ngv) in ng.iter_mut().enumerate() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + step;
            let (fp, _) = eval(&work, false);
            work[k].data_mut()[e] = orig - step;
            let (fm, _) = eval(&work, false);
            work[k].data_mut()[e] = orig;
            *ngv = (fp - fm) / (2.0 * step);
        }
        numeric.push(Tensor::new(inputs[k].shape(), ng));
    }
    let scale = numeric
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (e, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (k, e);
            }
        }
    }
    GradCheck { max_rel_error, worst, analytic, numeric }
}

impl<'t> Var<'t> {
    /// Marks this scalar as the output of a [`gradcheck`] closure.
    pub fn output(self) -> ScalarOut {
        ScalarOut(self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn broadcast_add_and_mul_gradients() {
        let a = rand_t(&[3, 4], 1);
        let b = rand_t(&[4], 2);
        let c = rand_t(&[3, 1], 3);
        let gc = gradcheck(&[a, b, c], 1e-5, |_, v| v[0].add(v[1]).mul(v[2]).square().sum().output());
        assert!(gc.max_rel_error < 1e-6, "{gc:?}");
    }

    #[test]
    fn matmul_softmax_layernorm_gradients() {
        let a = rand_t(&[3, 5], 4);
        let b = rand_t(&[5, 4], 5);
        let w = rand_t(&[3, 4], 6);
        let gc = gradcheck(&[a, b, w], 1e-5, |_, v| {
            v[0].matmul(v[1]).layer_norm_last(1e-5).softmax_last().mul(v[2]).sum().output()
        });
        assert!(gc.max_rel_error < 1e-6, "{gc:?}");
    }

    #[test]
    fn normalize_gelu_div_gradients() {
        let a = rand_t(&[2, 6], 7);
        let b = rand_t(&[2, 6], 8).map(|v| v + 2.0);
        let gc = gradcheck(&[a, b], 1e-5, |_, v| {
            v[0].gelu().normalize_last(1e-9).div(v[1]).sum_last().square().mean_first().output()
        });
        assert!(gc.max_rel_error < 1e-6, "{gc:?}");
    }

    #[test]
    fn concat_slice_gather_gradients() {
        let a = rand_t(&[4, 3], 9);
        let b = rand_t(&[4, 2], 10);
        let idx = Rc::new(vec![0, 3, 3, 1]);
        let gc = gradcheck(&[a, b], 1e-5, move |_, v| {
            let c = Var::concat(&[v[0], v[1]], 1);
            c.gather_rows(idx.clone()).slice(1, 1, 3).tanh().sum().output()
        });
        assert!(gc.max_rel_error < 1e-6, "{gc:?}");
    }

    #[test]
    fn conv_pool_resample_gradients() {
        let x = rand_t(&[6, 6, 2], 11);
        let w = rand_t(&[3, 3, 3, 2], 12);
        let b = rand_t(&[3], 13);
        let map = Rc::new(SparseMap {
            n_in: 9,
            n_out: 2,
            rows: vec![vec![(0, 0.25), (4, 0.75)], vec![(8, 1.0), (3, -0.5)]],
        });
        for mode in [Padding::Zero, Padding::Replicate] {
            let map = map.clone();
            let gc = gradcheck(&[x.clone(), w.clone(), b.clone()], 1e-5, move |_, v| {
                let y = v[0].conv2d(v[1], Some(v[2]), 1, 1, mode).tanh().avg_pool2();
                y.reshape(&[9, 3]).resample(map.clone()).square().sum().output()
            });
            assert!(gc.max_rel_error < 1e-6, "{mode:?}: {gc:?}");
        }
    }

    #[test]
    fn strided_conv_shape() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::ones(&[8, 8, 3]));
        let w = tape.constant(Tensor::ones(&[5, 4, 4, 3]));
        let y = x.conv2d(w, None, 4, 0, Padding::Zero);
        assert_eq!(y.shape(), vec![2, 2, 5]);
        assert!(y.value().data().iter().all(|&v| v == 48.0));
    }

    #[test]
    fn trainable_filter_blocks_gradients() {
        let p = Param::new(Tensor::ones(&[2]));
        let q = Param::new(Tensor::ones(&[2]));
        let tape = Tape::with_trainable([p.id()]);
        let loss = tape.param(&p).mul(tape.param(&q)).sum();
        let g = tape.backward(loss);
        assert!(g.param(&p).is_some());
        assert!(g.param(&q).is_none());
        let cloned = p.clone();
        assert_ne!(cloned.id(), p.id());
        assert_eq!(cloned.value(), p.value());
    }
}
