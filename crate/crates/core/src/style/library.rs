//! On-disk style library: `images/*.png` plus `captions.jsonl` records of
//! the form `{"image": "images/x.png", "caption": "..."}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::types::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Record {
    image: String,
    caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LibraryEntry {
    /// File stem of the image.
    pub id: String,
    /// Path as written in the captions file, relative to the library root.
    pub image: String,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct StyleLibrary {
    pub root: PathBuf,
    pub entries: Vec<LibraryEntry>,
}

impl StyleLibrary {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("captions.jsonl");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries: Vec<LibraryEntry> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line)
                .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), n + 1)))?;
            let id = Path::new(&r.image)
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Validation(format!("{}:{}: bad image path {:?}", path.display(), n + 1, r.image)))?
                .to_string();
            if entries.iter().any(|e| e.id == id) {
                return Err(Error::Validation(format!("duplicate style id {id:?}")));
            }
            if !root.join(&r.image).is_file() {
                return Err(Error::NotFound(format!("style image {}", root.join(&r.image).display())));
            }
            entries.push(LibraryEntry { id, image: r.image, caption: r.caption });
        }
        Ok(StyleLibrary { root, entries })
    }

    /// Writes `images/<id>.png` for each item and the captions file.
    pub fn write(root: impl AsRef<Path>, items: &[(String, ImageTensor, String)]) -> Result<Self> {
        let root = root.as_ref();
        let dir = root.join("images");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = root.join("captions.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for (id, im, caption) in items {
            let rel = format!("images/{id}.png");
            imageio::write_png(&root.join(&rel), im)?;
            let line = serde_json::to_string(&Record { image: rel, caption: caption.clone() })?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        drop(f);
        Self::load(root)
    }

    pub fn get(&self, id: &str) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn load_image(&self, id: &str) -> Result<ImageTensor> {
        let e = self.get(id).ok_or_else(|| Error::NotFound(format!("style {id:?}")))?;
        imageio::read_png(&self.root.join(&e.image))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
