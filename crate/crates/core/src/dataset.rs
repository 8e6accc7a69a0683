//! Dataset ingestion and seeded few-shot sampling.
//!
//! Three directory layouts are understood, all rooted at `<root>/<category>/`:
//!
//! * `loco`: `train/good/`, `test/good/`, `test/logical_anomalies/`
//! * `sem`: `train/{good,normal}/`, `test/{good,normal}/`, and every other
//!   directory under `test/` (e.g. `bridge/`, `spot/`) as anomalies
//! * `flat`: `train/`, `normal/`, `anomaly/`
//!
//! Record ids are the image path relative to the category directory, using
//! `/` as separator, so they are stable across machines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Number of normal reference images conditioning question synthesis.
pub const REFERENCE_COUNT: usize = 3;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff", "webp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainNormal,
    TestNormal,
    TestAnomaly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Split {
    pub fn label(self) -> Label {
        match self {
            Split::TrainNormal | Split::TestNormal => Label::Normal,
            Split::TestAnomaly => Label::Anomaly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Loco,
    Sem,
    Flat,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loco" => Ok(Layout::Loco),
            "sem" => Ok(Layout::Sem),
            "flat" => Ok(Layout::Flat),
            other => Err(Error::Config(format!("unknown dataset layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subclass: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub category: String,
    pub layout: Layout,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    /// Checks the label/split agreement and id uniqueness invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if r.split.label() != r.label {
                return Err(Error::InvalidManifest(format!(
                    "record `{}` has split {:?} but label {:?}",
                    r.id, r.split, r.label
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate id `{}`", r.id)));
            }
        }
        Ok(())
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Distinct subclasses in lexicographic order; `[None]` when no record
    /// carries one.
    pub fn subclasses(&self) -> Vec<Option<String>> {
        let set: BTreeSet<&str> = self
            .records
            .iter()
            .filter_map(|r| r.subclass.as_deref())
            .collect();
        if set.is_empty() {
            vec![None]
        } else {
            set.into_iter().map(|s| Some(s.to_string())).collect()
        }
    }

    /// Manifest restricted to records of one subclass (`None` keeps all).
    pub fn for_subclass(&self, subclass: Option<&str>) -> DatasetManifest {
        let records = match subclass {
            None => self.records.clone(),
            Some(s) => self
                .records
                .iter()
                .filter(|r| r.subclass.as_deref() == Some(s))
                .cloned()
                .collect(),
        };
        DatasetManifest {
            category: self.category.clone(),
            layout: self.layout,
            records,
        }
    }

    /// Assigns subclasses from an id → subclass map. Unknown ids are an error.
    pub fn apply_subclasses(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for id in map.keys() {
            if self.get(id).is_none() {
                return Err(Error::InvalidManifest(format!(
                    "subclass map names unknown image `{id}`"
                )));
            }
        }
        for r in &mut self.records {
            if let Some(s) = map.get(&r.id) {
                r.subclass = Some(s.clone());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Reads a JSON object mapping image id to subclass name.
pub fn load_subclass_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).at_path(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn split_dirs(layout: Layout, base: &Path) -> Result<Vec<(PathBuf, Split)>> {
    let dirs = match layout {
        Layout::Loco => vec![
            (base.join("train/good"), Split::TrainNormal),
            (base.join("test/good"), Split::TestNormal),
            (base.join("test/logical_anomalies"), Split::TestAnomaly),
        ],
        Layout::Flat => vec![
            (base.join("train"), Split::TrainNormal),
            (base.join("normal"), Split::TestNormal),
            (base.join("anomaly"), Split::TestAnomaly),
        ],
        Layout::Sem => {
            let mut dirs = Vec::new();
            for name in ["good", "normal"] {
                dirs.push((base.join("train").join(name), Split::TrainNormal));
                dirs.push((base.join("test").join(name), Split::TestNormal));
            }
            let test = base.join("test");
            if test.is_dir() {
                let mut defect_dirs: Vec<PathBuf> = fs::read_dir(&test)
                    .at_path(&test)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_dir())
                    .filter(|p| {
                        !matches!(
                            p.file_name().and_then(|n| n.to_str()),
                            Some("good") | Some("normal")
                        )
                    })
                    .collect();
                defect_dirs.sort();
                dirs.extend(defect_dirs.into_iter().map(|d| (d, Split::TestAnomaly)));
            }
            dirs
        }
    };
    Ok(dirs)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn relative_id(base: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Scans `<root>/<category>` for the given layout.
pub fn load_layout(root: &Path, category: &str, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Layout {
            path: root.to_path_buf(),
            reason: "dataset root does not exist".into(),
        });
    }
    let base = root.join(category);
    if !base.is_dir() {
        return Err(Error::Layout {
            path: base,
            reason: format!("category directory `{category}` not found"),
        });
    }
    let dirs = split_dirs(layout, &base)?;
    let present: Vec<_> = dirs.into_iter().filter(|(d, _)| d.is_dir()).collect();
    if present.is_empty() {
        return Err(Error::Layout {
            path: base,
            reason: format!("no split directories for layout {layout:?}"),
        });
    }

    let mut records = Vec::new();
    for (dir, split) in present {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .at_path(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        for path in files {
            records.push(ImageRecord {
                id: relative_id(&base, &path),
                path,
                split,
                label: split.label(),
                subclass: None,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(base));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));

    let manifest = DatasetManifest {
        category: category.to_string(),
        layout,
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSelection {
    pub reference_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub seed: u64,
}

/// Draws three distinct train-normal references and up to `validation_cap`
/// further train-normal images for question filtering. The draw is a pure
/// function of the manifest's train-normal ids, the seed, and the cap.
pub fn sample_few_shot(
    manifest: &DatasetManifest,
    seed: u64,
    validation_cap: usize,
) -> Result<FewShotSelection> {
    let mut ids: Vec<&str> = manifest
        .records_in(Split::TrainNormal)
        .map(|r| r.id.as_str())
        .collect();
    if ids.len() < REFERENCE_COUNT {
        return Err(Error::InsufficientNormals {
            needed: REFERENCE_COUNT,
            found: ids.len(),
        });
    }
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let reference_ids = ids[..REFERENCE_COUNT]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let validation_ids = ids[REFERENCE_COUNT..]
        .iter()
        .take(validation_cap)
        .map(|s| s.to_string())
        .collect();
    Ok(FewShotSelection {
        reference_ids,
        validation_ids,
        seed,
    })
}
