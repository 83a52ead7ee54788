//! On-disk checkpoints: a `manifest.json` plus one little-endian `f32`
//! row-major blob per field, stored as `<field>.bin`.
//!
//! Field names may contain `/`, which maps to subdirectories (injector
//! weights live under `style_injectors/<site>/`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::tensor::{numel, Tensor};
use crate::types::{sh_coeff_count, GaussianPrimitive, GaussianScene};

pub const FORMAT: &str = "zerostyle-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FieldEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub fields: BTreeMap<String, FieldEntry>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

/// A named collection of tensors plus free-form metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Map<String, serde_json::Value>,
    tensors: BTreeMap<String, Tensor>,
}

fn check_name(name: &str) -> Result<()> {
    ensure!(
        !name.is_empty()
            && name
                .split('/')
                .all(|p| !p.is_empty() && p != "." && p != ".." && !p.contains('\\')),
        "invalid checkpoint field name {name:?}"
    );
    Ok(())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint { kind: kind.to_string(), ..Default::default() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("checkpoint field {name:?}")))
    }

    /// Like [`get`](Self::get), but also checks the shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::shape(shape, t.shape()));
        }
        Ok(t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every field of `other` in under `prefix/`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// The fields under `prefix/`, with the prefix stripped.
    pub fn sub(&self, prefix: &str, kind: &str) -> Checkpoint {
        let p = format!("{prefix}/");
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect();
        Checkpoint { kind: kind.to_string(), meta: Default::default(), tensors }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut fields = BTreeMap::new();
        for (name, t) in &self.tensors {
            check_name(name)?;
            let file = format!("{name}.bin");
            let path = dir.join(&file);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, encode_f32(t.data())).map_err(|e| Error::io(&path, e))?;
            fields.insert(
                name.clone(),
                FieldEntry { shape: t.shape().to_vec(), dtype: "f32".into(), file },
            );
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            fields,
            meta: self.meta.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        ensure!(m.format == FORMAT, "unknown checkpoint format {:?}", m.format);
        ensure!(m.version == VERSION, "unsupported checkpoint version {}", m.version);
        let mut tensors = BTreeMap::new();
        for (name, entry) in m.fields {
            check_name(&name)?;
            ensure!(entry.dtype == "f32", "field {name}: unsupported dtype {}", entry.dtype);
            ensure!(entry.file == format!("{name}.bin"), "field {name}: unexpected file {}", entry.file);
            let p = dir.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let want = numel(&entry.shape);
            if bytes.len() != want * 4 {
                return Err(Error::shape(want * 4, format!("{} bytes in {}", bytes.len(), p.display())));
            }
            tensors.insert(name, Tensor::new(&entry.shape, decode_f32(&bytes)));
        }
        Ok(Checkpoint { kind: m.kind, meta: m.meta, tensors })
    }

    /// SHA-256 over names, shapes and `f32` bytes, in name order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(encode_f32(t.data()));
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_f32(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Scene fields as a checkpoint with kind `scene`.
pub fn scene_to_checkpoint(s: &GaussianScene) -> Checkpoint {
    let n = s.len();
    let k = sh_coeff_count(s.sh_degree);
    let mut c = Checkpoint::new("scene");
    c.insert("mu", Tensor::new(&[n, 3], s.means()));
    c.insert("rot", Tensor::new(&[n, 4], s.rotations()));
    c.insert("scale", Tensor::new(&[n, 3], s.scales()));
    c.insert("opacity", Tensor::new(&[n], s.opacities()));
    c.insert("sh_coeffs", Tensor::new(&[n, k, 3], s.sh()));
    c.insert("source_view", Tensor::new(&[n], s.source_view.iter().map(|&v| v as f64).collect()));
    c.insert("confidence", Tensor::new(&[n], s.confidence.clone()));
    c.meta.insert("count".into(), n.into());
    c.meta.insert("sh_degree".into(), s.sh_degree.into());
    c
}

pub fn scene_from_checkpoint(c: &Checkpoint) -> Result<GaussianScene> {
    let deg = c
        .meta
        .get("sh_degree")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Validation("scene manifest lacks sh_degree".into()))? as usize;
    let n = c.meta.get("count").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let k = sh_coeff_count(deg);
    let mu = c.get_shaped("mu", &[n, 3])?.data();
    let rot = c.get_shaped("rot", &[n, 4])?.data();
    let scale = c.get_shaped("scale", &[n, 3])?.data();
    let op = c.get_shaped("opacity", &[n])?.data();
    let sh = c.get_shaped("sh_coeffs", &[n, k, 3])?.data();
    let sv = c.get_shaped("source_view", &[n])?.data();
    let conf = c.get_shaped("confidence", &[n])?.data();
    let mut s = GaussianScene::new(deg);
    for i in 0..n {
        let g = GaussianPrimitive {
            mu: [mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]],
            rot: [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]],
            scale: [scale[3 * i], scale[3 * i + 1], scale[3 * i + 2]],
            opacity: op[i],
            sh_coeffs: (0..k)
                .map(|j| {
                    let b = (i * k + j) * 3;
                    [sh[b], sh[b + 1], sh[b + 2]]
                })
                .collect(),
        };
        ensure!(sv[i] >= 0.0 && sv[i].fract() == 0.0, "source_view {} is not an index", sv[i]);
        s.push(g, sv[i] as usize, conf[i]);
    }
    Ok(s)
}

pub fn save_scene(s: &GaussianScene, dir: &Path) -> Result<()> {
    scene_to_checkpoint(s).save(dir)
}

pub fn load_scene(dir: &Path) -> Result<GaussianScene> {
    let c = Checkpoint::load(dir)?;
    ensure!(c.kind == "scene", "checkpoint at {} holds {:?}, not a scene", dir.display(), c.kind);
    scene_from_checkpoint(&c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_escaping_names() {
        let mut c = Checkpoint::new("x");
        c.insert("../evil", Tensor::zeros(&[1]));
        let dir = tempfile::tempdir().unwrap();
        assert!(c.save(dir.path()).is_err());
    }

    #[test]
    fn nested_fields_round_trip() {
        let mut c = Checkpoint::new("weights");
        c.insert("style_injectors/agg_0/proj.w1", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 0.5]));
        c.insert("head/bias", Tensor::new(&[3], vec![-1.0, 0.0, 0.25]));
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert!(dir.path().join("style_injectors/agg_0/proj.w1.bin").exists());
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.digest(), c.digest());
        assert_eq!(back.sub("style_injectors/agg_0", "inj").names().collect::<Vec<_>>(), ["proj.w1"]);
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let mut c = Checkpoint::new("weights");
        c.insert("a", Tensor::zeros(&[4]));
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        std::fs::write(dir.path().join("a.bin"), [0u8; 6]).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
