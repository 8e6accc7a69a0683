//! Reading the crop manifests written by the image preprocessor.
//!
//! A manifest lists, per source image, an optional background-masked copy
//! and any number of per-object crops. The engine queries the masked copy in
//! place of the original, and at test time replaces an image with its crops
//! when the class profile asks for object crops.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropRole {
    MaskedFull,
    ObjectCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMethod {
    Heuristic,
    ExternalModel,
    ProvidedMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropEntry {
    pub role: CropRole,
    /// `(x, y, w, h)` in source pixels.
    pub bounding_box: [u32; 4],
    pub output_path: PathBuf,
    pub method: CropMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropManifest {
    pub source_image: String,
    pub entries: Vec<CropEntry>,
}

impl CropManifest {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidManifest(format!(
                "crop manifest for `{}` has no entries",
                self.source_image
            )));
        }
        let masked = self.entries.iter().filter(|e| e.role == CropRole::MaskedFull).count();
        if masked > 1 {
            return Err(Error::InvalidManifest(format!(
                "crop manifest for `{}` has {masked} masked_full entries",
                self.source_image
            )));
        }
        Ok(())
    }

    pub fn masked_full(&self) -> Option<&CropEntry> {
        self.entries.iter().find(|e| e.role == CropRole::MaskedFull)
    }

    pub fn object_crops(&self) -> impl Iterator<Item = &CropEntry> {
        self.entries.iter().filter(|e| e.role == CropRole::ObjectCrop)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    One(CropManifest),
    Many(Vec<CropManifest>),
    Wrapped { manifests: Vec<CropManifest> },
}

/// Crop manifests keyed by source image id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CropIndex {
    by_source: BTreeMap<String, CropManifest>,
}

impl CropIndex {
    /// Parses a manifest document. Output paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidManifest(format!("crop manifest: {e}")))?;
        let manifests = match file {
            ManifestFile::One(m) => vec![m],
            ManifestFile::Many(v) | ManifestFile::Wrapped { manifests: v } => v,
        };
        let mut by_source = BTreeMap::new();
        for mut m in manifests {
            m.validate()?;
            for e in &mut m.entries {
                if e.output_path.is_relative() {
                    e.output_path = base.join(&e.output_path);
                }
            }
            if by_source.insert(m.source_image.clone(), m).is_some() {
                return Err(Error::InvalidManifest("duplicate source image in crop manifest".into()));
            }
        }
        Ok(CropIndex { by_source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at_path(path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn get(&self, image_id: &str) -> Option<&CropManifest> {
        self.by_source.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.by_source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_source.is_empty()
    }

    /// The file to query instead of the original image, if any.
    pub fn masked_path(&self, image_id: &str) -> Option<&Path> {
        self.get(image_id)
            .and_then(CropManifest::masked_full)
            .map(|e| e.output_path.as_path())
    }

    /// Object crops of an image, in manifest order.
    pub fn crop_paths(&self, image_id: &str) -> Vec<&Path> {
        self.get(image_id)
            .map(|m| m.object_crops().map(|e| e.output_path.as_path()).collect())
            .unwrap_or_default()
    }
}
