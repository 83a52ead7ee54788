use rand::Rng;

use super::{AggVars, AttentionKind, BackboneConfig};
use crate::autograd::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{visit_child, visit_child_mut, LayerNorm, Linear, Module};
use crate::tensor::Tensor;

/// Called with `(layer, tokens entering that layer)`; must return a tensor
/// of the same shape.
pub type Hook<'h, 't> = &'h mut dyn FnMut(usize, Var<'t>) -> Var<'t>;

const MASKED: f64 = -1e9;

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub kind: AttentionKind,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AttentionBlock {
    fn new(kind: AttentionKind, d: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        AttentionBlock {
            kind,
            heads,
            ln1: LayerNorm::new(d),
            qkv: Linear::new(d, 3 * d, rng),
            proj: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, mlp_ratio * d, rng),
            fc2: Linear::new(mlp_ratio * d, d, rng),
        }
    }

    /// `x: [tokens, d]`; `mask` is added to attention logits.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mask: Option<Var<'t>>) -> Var<'t> {
        let d = x.shape()[1];
        let dh = d / self.heads;
        let h = self.ln1.forward(tape, x);
        let qkv = self.qkv.forward(tape, h);
        let mut outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = qkv.slice(1, i * dh, dh);
            let k = qkv.slice(1, d + i * dh, dh);
            let v = qkv.slice(1, 2 * d + i * dh, dh);
            let mut s = q.matmul(k.transpose()).scale(1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                s = s.add(m);
            }
            outs.push(s.softmax_last().matmul(v));
        }
        let x = x.add(self.proj.forward(tape, Var::concat(&outs, 1)));
        let h = self.ln2.forward(tape, x);
        x.add(self.fc2.forward(tape, self.fc1.forward(tape, h).gelu()))
    }
}

impl Module for AttentionBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("ln1", &self.ln1, f);
        visit_child("qkv", &self.qkv, f);
        visit_child("proj", &self.proj, f);
        visit_child("ln2", &self.ln2, f);
        visit_child("fc1", &self.fc1, f);
        visit_child("fc2", &self.fc2, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("ln1", &mut self.ln1, f);
        visit_child_mut("qkv", &mut self.qkv, f);
        visit_child_mut("proj", &mut self.proj, f);
        visit_child_mut("ln2", &mut self.ln2, f);
        visit_child_mut("fc1", &mut self.fc1, f);
        visit_child_mut("fc2", &mut self.fc2, f);
    }
}

/// Transformer trunk with a learned per-patch positional embedding.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub pos: Param,
    pub blocks: Vec<AttentionBlock>,
}

impl Aggregator {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let pos = Param::new(Tensor::randn(&[cfg.patches_per_view(), cfg.d_f], 0.02, rng));
        let blocks = cfg
            .schedule
            .iter()
            .map(|&k| AttentionBlock::new(k, cfg.d_f, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        Aggregator { pos, blocks }
    }

    fn local_mask<'t>(tape: &'t Tape, views: usize, patches: usize) -> Var<'t> {
        let n = views * patches;
        tape.constant(Tensor::from_fn(&[n, n], |i| {
            let (r, c) = (i / n, i % n);
            if r / patches == c / patches {
                0.0
            } else {
                MASKED
            }
        }))
    }

    /// `tokens: [views * patches, d_f]`, view-major.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        cfg: &BackboneConfig,
        tokens: Var<'t>,
        views: usize,
        mut hook: Option<Hook<'_, 't>>,
    ) -> Result<AggVars<'t>> {
        let patches = cfg.patches_per_view();
        let d = cfg.d_f;
        let mut x = tokens
            .reshape(&[views, patches, d])
            .add(tape.param(&self.pos))
            .reshape(&[views * patches, d]);
        let mask = (views > 1).then(|| Self::local_mask(tape, views, patches));
        let keep = cfg.head_layers();
        let mut out = AggVars { layers: Vec::new(), tokens: Vec::new(), views, patches };
        for (l, block) in self.blocks.iter().enumerate() {
            if let Some(h) = hook.as_mut() {
                let before = x.shape();
                x = h(l, x);
                if x.shape() != before {
                    return Err(Error::Contract(format!(
                        "hook at layer {l} changed token shape {before:?} to {:?}",
                        x.shape()
                    )));
                }
            }
            let m = match block.kind {
                AttentionKind::Local => mask,
                AttentionKind::Global => None,
            };
            x = block.forward(tape, x, m);
            if keep.contains(&l) {
                out.layers.push(l);
                out.tokens.push(x);
            }
        }
        Ok(out)
    }
}

impl Module for Aggregator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(&format!("block{i}"), b, f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(&format!("block{i}"), b, f);
        }
    }
}
