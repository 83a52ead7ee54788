//! Minimal neural-network layers on top of the autodiff tape.

use rand::Rng;

use crate::autograd::{Padding, Param, ParamId, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that owns named [`Param`]s.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        self.visit(&mut |_, p| ids.push(p.id()));
        ids
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.value().numel());
        n
    }

    fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        let mut c = Checkpoint::new(kind);
        self.visit(&mut |name, p| c.insert(name, p.value().clone()));
        c
    }

    /// Overwrites every param from `c`; missing or mis-shaped fields fail
    /// before anything is modified.
    fn load_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        let mut err = None;
        self.visit(&mut |name, p| {
            if err.is_none() {
                if let Err(e) = c.get_shaped(name, p.shape()) {
                    err = Some(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.visit_mut(&mut |name, p| {
            *p.value_mut() = c.get(name).expect("checked above").clone();
        });
        Ok(())
    }
}

/// Visits a child module under `prefix.`.
pub fn visit_child(prefix: &str, m: &dyn Module, f: &mut dyn FnMut(&str, &Param)) {
    m.visit(&mut |n, p| f(&format!("{prefix}.{n}"), p));
}

pub fn visit_child_mut(prefix: &str, m: &mut dyn Module, f: &mut dyn FnMut(&str, &mut Param)) {
    m.visit_mut(&mut |n, p| f(&format!("{prefix}.{n}"), p));
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(in)`, zero bias.
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: Param::new(Tensor::uniform(&[d_in, d_out], bound, rng)),
            b: Param::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Param::new(Tensor::zeros(&[d_in, d_out])),
            b: Param::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.matmul(tape.param(&self.w)).add(tape.param(&self.b))
    }

    /// Direct evaluation on a single vector, without a tape.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (din, dout) = (self.d_in(), self.d_out());
        assert_eq!(x.len(), din);
        let w = self.w.value().data();
        let mut y = self.b.value().data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += xi * w[i * dout + o];
            }
        }
        y
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Layer norm over the last axis with a learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm { gamma: Param::new(Tensor::ones(&[d])), beta: Param::new(Tensor::zeros(&[d])) }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.layer_norm_last(1e-5).mul(tape.param(&self.gamma)).add(tape.param(&self.beta))
    }
}

impl Module for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

/// 2D convolution over `[H, W, C]` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Conv2d {
    /// He-uniform init, zero bias.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, padding: Padding, rng: &mut impl Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv2d {
            w: Param::new(Tensor::uniform(&[c_out, k, k, c_in], bound, rng)),
            b: Param::new(Tensor::zeros(&[c_out])),
            stride,
            pad,
            padding,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.conv2d(tape.param(&self.w), Some(tape.param(&self.b)), self.stride, self.pad, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Checks that a tensor's trailing dim is `d`.
pub fn expect_last_dim(shape: &[usize], d: usize, what: &str) -> Result<()> {
    match shape.last() {
        Some(&x) if x == d => Ok(()),
        _ => Err(Error::Validation(format!("{what}: expected last dim {d}, got shape {shape:?}"))),
    }
}
