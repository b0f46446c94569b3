//! Dataset files and prototype import.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GlyphPrototype, LatentPose, PoseRanges, PrototypeSet, SyntheticDataset, LETTERS, NUM_CLASSES};
use crate::error::{bail, Error, Result};
use crate::serialize::Container;
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.bin";
pub const INDEX_FILE: &str = "index.json";

#[derive(Serialize, Deserialize)]
struct PrototypeEntry {
    class_id: usize,
    font_id: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    seed: u64,
    classes: Vec<String>,
    labels: Vec<usize>,
    poses: Vec<LatentPose>,
    prototype_ids: Vec<usize>,
    prototypes: Vec<PrototypeEntry>,
    ranges: PoseRanges,
}

impl SyntheticDataset {
    /// Write `images.bin` (images and prototype bitmaps) and `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let index = Index {
            seed: self.seed,
            classes: LETTERS.iter().map(|c| c.to_string()).collect(),
            labels: self.labels.clone(),
            poses: self.poses.clone(),
            prototype_ids: self.prototype_ids.clone(),
            prototypes: self
                .prototypes
                .glyphs()
                .iter()
                .map(|g| PrototypeEntry { class_id: g.class_id, font_id: g.font_id })
                .collect(),
            ranges: self.ranges,
        };
        let ids: Vec<usize> = (0..self.prototypes.len()).collect();
        let mut c = Container::new(r#"{"kind":"dataset"}"#);
        c.push("images", self.images.clone());
        c.push("prototypes", self.prototypes.stack(&ids));
        c.save(&dir.join(IMAGES_FILE))?;
        fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
        let c = Container::load(&dir.join(IMAGES_FILE))?;
        let images = c.get("images").ok_or_else(|| Error::Format("missing images block".into()))?;
        let protos = c.get("prototypes").ok_or_else(|| Error::Format("missing prototypes block".into()))?;
        let n = index.labels.len();
        if images.ndim() != 4 || images.rows() != n || index.poses.len() != n || index.prototype_ids.len() != n {
            bail!(Format, "dataset index and images disagree on the example count");
        }
        if protos.ndim() != 4 || protos.rows() != index.prototypes.len() {
            bail!(Format, "prototype block does not match the index");
        }
        let [_, ch, h, w] = [protos.shape()[0], protos.shape()[1], protos.shape()[2], protos.shape()[3]];
        let glyphs = index
            .prototypes
            .iter()
            .enumerate()
            .map(|(i, e)| GlyphPrototype {
                class_id: e.class_id,
                font_id: e.font_id,
                bitmap: Tensor::from_parts(vec![ch, h, w], protos.row(i).to_vec()),
            })
            .collect();
        let prototypes = Arc::new(PrototypeSet::new(glyphs)?);
        if images.shape()[1..] != prototypes.image_shape() {
            bail!(Format, "image and prototype shapes differ");
        }
        if index.labels.iter().any(|&y| y >= NUM_CLASSES) || index.prototype_ids.iter().any(|&p| p >= prototypes.len()) {
            bail!(Format, "label or prototype id out of range");
        }
        Ok(SyntheticDataset {
            images: images.clone(),
            labels: index.labels,
            poses: index.poses,
            prototype_ids: index.prototype_ids,
            prototypes,
            ranges: index.ranges,
            seed: index.seed,
        })
    }
}

fn class_of_dir(name: &str) -> Option<usize> {
    if let Ok(d) = name.parse::<usize>() {
        return (d < NUM_CLASSES).then_some(d);
    }
    let mut chars = name.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => LETTERS.iter().position(|&l| l == c.to_ascii_uppercase()),
        _ => None,
    }
}

/// Read per-class directories (`A`..`J` or `0`..`9`) of 8-bit grayscale
/// images, mapping intensities linearly to `[0, 1]`. All images must share
/// one size; files are taken in name order and numbered as fonts.
pub fn import_prototypes(root: &Path) -> Result<PrototypeSet> {
    let mut dirs: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(class) = class_of_dir(&name) else {
            bail!(InvalidArgument, "directory {name:?} does not name a class (A-J or 0-9)");
        };
        dirs.push((class, entry.path()));
    }
    dirs.sort();
    let mut glyphs = Vec::new();
    for (class, dir) in dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.path())
            .collect();
        files.sort();
        for (font_id, path) in files.into_iter().enumerate() {
            let img = image::open(&path)?.into_luma8();
            let (w, h) = img.dimensions();
            let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            glyphs.push(GlyphPrototype {
                class_id: class,
                font_id,
                bitmap: Tensor::from_parts(vec![1, h as usize, w as usize], data),
            });
        }
    }
    PrototypeSet::new(glyphs)
}
