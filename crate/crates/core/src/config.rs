use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Layout;
use crate::error::{Error, IoContext, Result};
use crate::filtering::{validate_threshold, FilterMode, DEFAULT_POOL_SIZE, DEFAULT_THRESHOLD};
use crate::session::QuerySettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub category: String,
    pub layout: Layout,
    /// JSON object mapping image id to subclass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subclass_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(BackendKind::Live),
            "mock" => Ok(BackendKind::Mock),
            other => Err(Error::Config(format!("unknown backend `{other}` (expected live or mock)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Fixture file for the mock backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    /// Live endpoint; falls back to the environment when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "yes")]
    pub want_logprobs: bool,
}

impl BackendConfig {
    pub fn settings(&self) -> QuerySettings {
        QuerySettings {
            model: self.model.clone(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            want_logprobs: self.want_logprobs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default)]
    pub mode: FilterMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            enabled: true,
            threshold: DEFAULT_THRESHOLD,
            pool_size: DEFAULT_POOL_SIZE,
            mode: FilterMode::Direct,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Run k uses `seed + k - 1`.
    #[default]
    PerRun,
    /// Every run uses `seed`.
    Fixed,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    1024
}
fn yes() -> bool {
    true
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_pool() -> usize {
    DEFAULT_POOL_SIZE
}
fn default_runs() -> usize {
    3
}
fn default_parallelism() -> usize {
    8
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
    /// Class profile file; the bundled profile for the category otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PathBuf>,
    /// Directory overriding the bundled prompt templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess_manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        validate_threshold(self.filter.threshold)?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.filter.enabled && self.filter.pool_size == 0 {
            return Err(Error::Config("filter pool size must be at least 1".into()));
        }
        if self.dataset.category.trim().is_empty() {
            return Err(Error::Config("dataset category is empty".into()));
        }
        if self.backend.model.trim().is_empty() {
            return Err(Error::Config("backend model is empty".into()));
        }
        if self.backend.kind == BackendKind::Mock && self.backend.fixtures.is_none() {
            return Err(Error::Config("the mock backend needs a fixtures file".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at_path(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.root);
        fix(&mut self.out_dir);
        for p in [
            &mut self.dataset.subclass_map,
            &mut self.backend.fixtures,
            &mut self.profile,
            &mut self.templates,
            &mut self.cache_dir,
            &mut self.preprocess_manifest,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Seed for run `k`, counting from 1.
    pub fn seed_for_run(&self, k: usize) -> u64 {
        match self.seed_policy {
            SeedPolicy::PerRun => self.seed.wrapping_add(k as u64 - 1),
            SeedPolicy::Fixed => self.seed,
        }
    }

    pub fn category_dir(&self) -> PathBuf {
        self.out_dir.join(&self.dataset.category)
    }

    pub fn run_dir(&self, k: usize) -> PathBuf {
        self.category_dir().join(format!("run-{k}"))
    }
}
