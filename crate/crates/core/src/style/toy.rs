//! Deterministic stand-in encoders for the shared style space.
//!
//! Text: each lower-cased word is hashed to a seed, expanded to a random
//! vector and averaged; a frozen linear map takes the average to `d_s`.
//! Colour words and words for a plain photo are additionally grounded:
//! they contribute the image embedding of a flat image of that colour (gray
//! for a photo), and the hashed part is down-weighted, so text and image
//! directions are comparable in the directional loss.
//!
//! Image: bilinear resize to 32x32, two stride-2 3x3 tanh convolutions,
//! 2x2 average pooling and a linear map to `d_s`. Fully differentiable.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::{OnceLock, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{embed_image, Modality, StyleEmbedding, StyleProvider, NEUTRAL_PROMPT};
use crate::autograd::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::tensor::Tensor;
use crate::types::ImageTensor;
use crate::warp::resize_map;

const WORD_DIM: usize = 128;
const INPUT: usize = 32;

const GROUNDED: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.1, 0.1]),
    ("orange", [0.95, 0.5, 0.1]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.1, 0.2, 0.85]),
    ("purple", [0.5, 0.15, 0.65]),
    ("pink", [0.95, 0.55, 0.7]),
    ("brown", [0.45, 0.28, 0.12]),
    ("black", [0.03, 0.03, 0.03]),
    ("white", [0.97, 0.97, 0.97]),
    ("gray", [0.5, 0.5, 0.5]),
    ("grey", [0.5, 0.5, 0.5]),
    ("gold", [0.85, 0.68, 0.2]),
    ("teal", [0.1, 0.55, 0.55]),
    // Words for an unstylized picture sit on a neutral gray.
    ("photo", [0.3, 0.3, 0.3]),
    ("photograph", [0.3, 0.3, 0.3]),
    ("picture", [0.3, 0.3, 0.3]),
];

/// Weight of the hashed word vectors next to each grounded word.
const FREE_TEXT_WEIGHT: f64 = 0.25;

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| w.to_lowercase()).collect()
}

fn word_vector(word: &str) -> Vec<f64> {
    let digest = Sha256::digest(word.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[WORD_DIM], 1.0, &mut rng).into_data()
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12 && n.is_finite()) {
        return Err(Error::Numerical("embedding has zero norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

pub struct ToyProvider {
    id: String,
    d_s: usize,
    text_map: Linear,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
    neutral: OnceLock<StyleEmbedding>,
    cache: RwLock<HashMap<String, Vec<f64>>>,
}

impl std::fmt::Debug for ToyProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyProvider").field("id", &self.id).field("d_s", &self.d_s).finish()
    }
}

impl Default for ToyProvider {
    fn default() -> Self {
        Self::new(64, 0)
    }
}

impl ToyProvider {
    pub fn new(d_s: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5717_1e00);
        ToyProvider {
            id: format!("toy-d{d_s}-s{seed}"),
            d_s,
            text_map: Linear::new(WORD_DIM, d_s, &mut rng),
            conv1: Conv2d::new(3, 16, 3, 2, 1, Padding::Replicate, &mut rng),
            conv2: Conv2d::new(16, 32, 3, 2, 1, Padding::Replicate, &mut rng),
            head: Linear::new(32 * 4 * 4, d_s, &mut rng),
            neutral: OnceLock::new(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn colour_vector(&self, rgb: [f64; 3]) -> Result<Vec<f64>> {
        embed_image(self, &ImageTensor::constant(INPUT, INPUT, rgb))
    }

    fn compute_text(&self, words: &[String]) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; WORD_DIM];
        for w in words {
            for (m, x) in mean.iter_mut().zip(word_vector(w)) {
                *m += x / words.len() as f64;
            }
        }
        let mut v = normalized(self.text_map.apply(&mean))?;
        if words.iter().any(|w| GROUNDED.iter().any(|(name, _)| name == w)) {
            v.iter_mut().for_each(|x| *x *= FREE_TEXT_WEIGHT);
        }
        for w in words {
            if let Some((_, rgb)) = GROUNDED.iter().find(|(name, _)| name == w) {
                for (a, b) in v.iter_mut().zip(self.colour_vector(*rgb)?) {
                    *a += b;
                }
            }
        }
        normalized(v)
    }
}

impl StyleProvider for ToyProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.d_s
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::Validation("style text is empty".into()));
        }
        let key = words.join(" ");
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = self.compute_text(&words)?;
        self.cache.write().expect("cache lock").entry(key).or_insert_with(|| v.clone());
        Ok(v)
    }

    fn embed_image_var<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape("[H, W, 3]", s));
        }
        let (h, w) = (s[0], s[1]);
        let x = if (h, w) == (INPUT, INPUT) {
            image
        } else {
            image
                .reshape(&[h * w, 3])
                .resample(Rc::new(resize_map(w, h, INPUT, INPUT)))
                .reshape(&[INPUT, INPUT, 3])
        };
        let x = self.conv1.forward(tape, x.add_scalar(-0.5)).tanh();
        let x = self.conv2.forward(tape, x).tanh().avg_pool2();
        let y = self.head.forward(tape, x.reshape(&[1, 32 * 4 * 4]));
        Ok(y.normalize_last(1e-12).reshape(&[self.d_s]))
    }

    fn neutral(&self) -> &StyleEmbedding {
        self.neutral.get_or_init(|| StyleEmbedding {
            vec: self.embed_text(NEUTRAL_PROMPT).expect("neutral prompt is non-empty"),
            modality: Modality::Text,
            provider: self.id.clone(),
        })
    }
}
