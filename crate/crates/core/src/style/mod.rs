//! Style signals, the shared unit-norm embedding space, and the
//! zero-initialized injectors that add a style offset to token tensors.

mod injector;
mod library;
mod toy;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use injector::{make_plan, InjectionPlan, PlanLayers, Proj, Site, SiteLocation, StyleInjector};
pub use library::{LibraryEntry, StyleLibrary};
pub use toy::{tokenize, ToyProvider};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Unit-norm tolerance for embeddings.
pub const NORM_TOL: f64 = 1e-5;

/// Antipodal pairs have no unique great-circle path.
pub const ANTIPODAL_COS: f64 = -1.0 + 1e-6;

pub const NEUTRAL_PROMPT: &str = "Photo";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Mixed,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StyleSignal {
    Text(String),
    Image(ImageTensor),
}

impl StyleSignal {
    pub fn modality(&self) -> Modality {
        match self {
            StyleSignal::Text(_) => Modality::Text,
            StyleSignal::Image(_) => Modality::Image,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding {
    pub vec: Vec<f64>,
    pub modality: Modality,
    pub provider: String,
}

impl StyleEmbedding {
    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn norm(&self) -> f64 {
        self.vec.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &StyleEmbedding) -> f64 {
        self.vec.iter().zip(&other.vec).map(|(a, b)| a * b).sum()
    }

    /// Angle to `other` in radians.
    pub fn angle(&self, other: &StyleEmbedding) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vec.is_empty() || !self.vec.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("style embedding must be a finite, non-empty vector".into()));
        }
        let n = self.norm();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Validation(format!("style embedding norm {n} is not 1")));
        }
        Ok(())
    }
}

/// An encoder into the shared style space.
///
/// Text goes through [`StyleProvider::embed_text`]; images go through
/// [`StyleProvider::embed_image_var`], which records on the tape so losses
/// can differentiate through it.
pub trait StyleProvider: Send + Sync {
    fn id(&self) -> &str;

    /// `d_s`
    fn dim(&self) -> usize;

    /// Unit-norm text embedding. Rejects text with no words.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    /// Unit-norm `[d_s]` embedding of an `[H, W, 3]` image.
    fn embed_image_var<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>>;

    /// Cached embedding of [`NEUTRAL_PROMPT`].
    fn neutral(&self) -> &StyleEmbedding;
}

pub fn embed(signal: &StyleSignal, provider: &dyn StyleProvider) -> Result<StyleEmbedding> {
    let vec = match signal {
        StyleSignal::Text(t) => provider.embed_text(t)?,
        StyleSignal::Image(im) => embed_image(provider, im)?,
    };
    Ok(StyleEmbedding { vec, modality: signal.modality(), provider: provider.id().to_string() })
}

pub fn embed_image(provider: &dyn StyleProvider, image: &ImageTensor) -> Result<Vec<f64>> {
    let tape = Tape::no_grad();
    let v = provider.embed_image_var(&tape, tape.constant(image.to_tensor()))?;
    Ok(v.value().data().to_vec())
}

pub fn neutral_embedding(provider: &dyn StyleProvider) -> &StyleEmbedding {
    provider.neutral()
}

/// Spherical interpolation from `a` (at 0) to `b` (at 1).
pub fn interpolate(a: &StyleEmbedding, b: &StyleEmbedding, alpha: f64) -> Result<StyleEmbedding> {
    if a.provider != b.provider || a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "cannot interpolate {}[{}] with {}[{}]",
            a.provider,
            a.dim(),
            b.provider,
            b.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if a.vec == b.vec {
        return Ok(a.clone());
    }
    let cos = a.dot(b);
    if cos < ANTIPODAL_COS {
        return Err(Error::Numerical(format!("antipodal embeddings (cos = {cos}) have no unique slerp path")));
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let theta = cos.clamp(-1.0, 1.0).acos();
    let (wa, wb) = if theta < 1e-9 {
        (1.0 - alpha, alpha)
    } else {
        let s = theta.sin();
        (((1.0 - alpha) * theta).sin() / s, (alpha * theta).sin() / s)
    };
    let mut vec: Vec<f64> = a.vec.iter().zip(&b.vec).map(|(x, y)| wa * x + wb * y).collect();
    let n = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
    vec.iter_mut().for_each(|v| *v /= n);
    Ok(StyleEmbedding { vec, modality: Modality::Mixed, provider: a.provider.clone() })
}
