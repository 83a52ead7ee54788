use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Param, Tape, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{expect_last_dim, visit_child, visit_child_mut, Linear, Module};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteLocation {
    /// Retained tokens on their way into the Gaussian head.
    Head,
    /// Tokens entering an aggregator layer.
    Aggregator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub location: SiteLocation,
    pub layer: usize,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            SiteLocation::Head => write!(f, "head_{}", self.layer),
            SiteLocation::Aggregator => write!(f, "agg_{}", self.layer),
        }
    }
}

/// Maps a style embedding into token space.
#[derive(Clone, Debug)]
pub enum Proj {
    /// Linear, gelu, linear.
    Mlp { l1: Linear, l2: Linear },
    /// Passes the embedding through unchanged; needs `d_s == d_f`.
    Identity { dim: usize },
}

impl Proj {
    pub fn d_in(&self) -> usize {
        match self {
            Proj::Mlp { l1, .. } => l1.d_in(),
            Proj::Identity { dim } => *dim,
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Var<'t> {
        match self {
            Proj::Mlp { l1, l2 } => l2.forward(tape, l1.forward(tape, z).gelu()),
            Proj::Identity { .. } => z,
        }
    }
}

/// Adds `zero_map(proj(z))` to every token at one site.
#[derive(Clone, Debug)]
pub struct StyleInjector {
    pub site: Site,
    pub proj: Proj,
    pub zero_map: Linear,
}

impl StyleInjector {
    pub fn new(site: Site, d_s: usize, d_f: usize, rng: &mut ChaCha8Rng) -> Self {
        StyleInjector {
            site,
            proj: Proj::Mlp { l1: Linear::new(d_s, d_f, rng), l2: Linear::new(d_f, d_f, rng) },
            zero_map: Linear::zeros(d_f, d_f),
        }
    }

    pub fn d_s(&self) -> usize {
        self.proj.d_in()
    }

    pub fn d_f(&self) -> usize {
        self.zero_map.d_out()
    }

    /// The `[d_f]` offset added at this site.
    pub fn offset<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        let s = z.shape();
        if s != [self.d_s()] {
            return Err(Error::Validation(format!("site {}: embedding shape {s:?}, expected [{}]", self.site, self.d_s())));
        }
        let h = self.proj.forward(tape, z.reshape(&[1, self.d_s()]));
        Ok(self.zero_map.forward(tape, h).reshape(&[self.d_f()]))
    }

    /// `tokens + offset(z)` for `tokens: [.., d_f]`.
    pub fn inject<'t>(&self, tape: &'t Tape, tokens: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        expect_last_dim(&tokens.shape(), self.d_f(), &format!("site {} tokens", self.site))?;
        Ok(tokens.add(self.offset(tape, z)?))
    }
}

impl Module for StyleInjector {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        if let Proj::Mlp { l1, l2 } = &self.proj {
            visit_child("proj.l1", l1, f);
            visit_child("proj.l2", l2, f);
        }
        visit_child("zero_map", &self.zero_map, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Proj::Mlp { l1, l2 } = &mut self.proj {
            visit_child_mut("proj.l1", l1, f);
            visit_child_mut("proj.l2", l2, f);
        }
        visit_child_mut("zero_map", &mut self.zero_map, f);
    }
}

/// Which layers receive injection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanLayers {
    /// Retained layers whose tokens are offset before the Gaussian head.
    pub head: Vec<usize>,
    /// Layers whose incoming tokens are offset inside the aggregator.
    /// Empty for the head-only variant.
    pub aggregator: Vec<usize>,
}

impl PlanLayers {
    /// Every head-facing layer, plus the input of layer 0 and every
    /// retained intermediate layer inside the aggregator.
    pub fn default_for(cfg: &BackboneConfig) -> Self {
        let mut aggregator = vec![0];
        aggregator.extend(cfg.retained.iter().copied().filter(|&l| l != 0));
        PlanLayers { head: cfg.head_layers(), aggregator }
    }

    /// The large-scale configuration (24 layers).
    pub fn full_scale() -> Self {
        PlanLayers { head: vec![4, 11, 17, 23], aggregator: vec![0, 4, 11, 17, 23] }
    }

    pub fn head_only(&self) -> Self {
        PlanLayers { head: self.head.clone(), aggregator: Vec::new() }
    }
}

/// One dedicated injector per site.
#[derive(Clone, Debug)]
pub struct InjectionPlan {
    pub layers: PlanLayers,
    pub head: Vec<StyleInjector>,
    pub aggregator: Vec<StyleInjector>,
}

fn check_sites(what: &str, layers: &[usize], allowed: impl Fn(usize) -> bool) -> Result<()> {
    for (i, &l) in layers.iter().enumerate() {
        if layers[..i].contains(&l) {
            return Err(Error::Validation(format!("duplicate {what} site {l}")));
        }
        if !allowed(l) {
            return Err(Error::Validation(format!("{what} site {l} is out of range")));
        }
    }
    Ok(())
}

pub fn make_plan(cfg: &BackboneConfig, d_s: usize, layers: &PlanLayers, seed: u64) -> Result<InjectionPlan> {
    let retained = cfg.head_layers();
    check_sites("head", &layers.head, |l| retained.contains(&l))?;
    check_sites("aggregator", &layers.aggregator, |l| l < cfg.layers)?;
    if d_s == 0 {
        return Err(Error::Validation("d_s must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut build = |location, ls: &[usize]| -> Vec<StyleInjector> {
        ls.iter().map(|&layer| StyleInjector::new(Site { location, layer }, d_s, cfg.d_f, &mut rng)).collect()
    };
    let head = build(SiteLocation::Head, &layers.head);
    let aggregator = build(SiteLocation::Aggregator, &layers.aggregator);
    Ok(InjectionPlan { layers: layers.clone(), head, aggregator })
}

impl InjectionPlan {
    pub fn injectors(&self) -> impl Iterator<Item = &StyleInjector> {
        self.head.iter().chain(&self.aggregator)
    }

    pub fn injectors_mut(&mut self) -> impl Iterator<Item = &mut StyleInjector> {
        self.head.iter_mut().chain(self.aggregator.iter_mut())
    }

    pub fn site(&self, site: Site) -> Option<&StyleInjector> {
        self.injectors().find(|i| i.site == site)
    }

    pub fn site_mut(&mut self, site: Site) -> Option<&mut StyleInjector> {
        self.injectors_mut().find(|i| i.site == site)
    }

    pub fn head_site(&self, layer: usize) -> Option<&StyleInjector> {
        self.head.iter().find(|i| i.site.layer == layer)
    }

    pub fn aggregator_site(&self, layer: usize) -> Option<&StyleInjector> {
        self.aggregator.iter().find(|i| i.site.layer == layer)
    }

    pub fn d_s(&self) -> Option<usize> {
        self.injectors().next().map(|i| i.d_s())
    }

    /// True when every zero map is still exactly zero.
    pub fn is_identity(&self) -> bool {
        self.injectors()
            .all(|i| i.zero_map.w.value().data().iter().chain(i.zero_map.b.value().data()).all(|&v| v == 0.0))
    }
}

/// Names parameters `style_injectors/<site>/<param>`.
impl Module for InjectionPlan {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for inj in self.injectors() {
            let site = inj.site.to_string();
            inj.visit(&mut |n, p| f(&format!("style_injectors/{site}/{n}"), p));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for inj in self.injectors_mut() {
            let site = inj.site.to_string();
            inj.visit_mut(&mut |n, p| f(&format!("style_injectors/{site}/{n}"), p));
        }
    }
}
