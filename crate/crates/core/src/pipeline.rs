//! Stage orchestration over a run configuration, with every artifact written
//! to disk.
//!
//! Output layout for category `c`:
//!
//! ```text
//! <out>/c/run-<k>/selection[.<sub>].json
//! <out>/c/run-<k>/descriptions[.<sub>].json
//! <out>/c/run-<k>/summary[.<sub>].json
//! <out>/c/run-<k>/candidates[.<sub>].json
//! <out>/c/run-<k>/question_set[.<sub>].json
//! <out>/c/run-<k>/filter[.<sub>].csv
//! <out>/c/run-<k>/verdicts.json
//! <out>/c/run-<k>/metrics.json
//! <out>/c/report.json
//! <out>/c/report.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::{
    CachedBackend, ImageData, MockBackend, OpenAiBackend, OpenAiConfig, ResponseCache, VisionBackend,
};
use crate::config::{BackendKind, RunConfig};
use crate::crops::CropIndex;
use crate::dataset::{
    load_layout, load_subclass_map, sample_few_shot, DatasetManifest, FewShotSelection, ImageRecord,
    Label, Split,
};
use crate::error::{Error, IoContext, Result, Stage};
use crate::exec::Executor;
use crate::filtering::run_filter;
use crate::inference::{combine_crops, infer_image, ImageVerdict};
use crate::metrics::{aggregate_runs, agreement_by_label, AgreementStats, EvalReport, RunMetrics, ScoredSample};
use crate::prompts::{ClassProfile, Templates};
use crate::session::{class_key, Session};
use crate::synthesis::{synthesize, Description, NormalSummary, QuestionSet};

/// One line of `verdicts.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subclass: Option<String>,
    #[serde(flatten)]
    pub result: ImageVerdict,
}

impl VerdictRecord {
    pub fn sample(&self) -> ScoredSample {
        let score = self.result.anomaly_score;
        ScoredSample {
            image_id: self.result.image_id.clone(),
            score: score.unwrap_or(f64::NAN),
            label: self.label,
            indeterminate: self.result.indeterminate || score.is_none(),
        }
    }
}

/// Builds the backend named by the config, behind the response cache when a
/// cache directory is set. Live credentials come from the environment only.
pub fn build_backend(config: &RunConfig) -> Result<Arc<dyn VisionBackend>> {
    let inner: Arc<dyn VisionBackend> = match config.backend.kind {
        BackendKind::Mock => {
            let path = config
                .backend
                .fixtures
                .as_deref()
                .ok_or_else(|| Error::Config("the mock backend needs a fixtures file".into()))?;
            Arc::new(MockBackend::from_file(path)?)
        }
        BackendKind::Live => {
            let mut live = match &config.backend.endpoint {
                Some(endpoint) => {
                    let mut c = OpenAiConfig::new(endpoint.clone());
                    c.api_key = std::env::var(crate::backend::API_KEY_ENV).ok().filter(|k| !k.is_empty());
                    c
                }
                None => OpenAiConfig::from_env()?,
            };
            if let Some(secs) = config.backend.timeout_secs {
                live.timeout = Duration::from_secs(secs);
            }
            if let Some(n) = config.backend.max_retries {
                live.retry.max_retries = n;
            }
            Arc::new(OpenAiBackend::new(live)?)
        }
    };
    match &config.cache_dir {
        Some(dir) => Ok(Arc::new(CachedBackend::new(inner, ResponseCache::open(dir)?))),
        None => Ok(inner),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).at_path(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).at_path(dir)?;
    tmp.write_all(bytes).at_path(path)?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at_path(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn suffix(subclass: Option<&str>) -> String {
    subclass.map(|s| format!(".{s}")).unwrap_or_default()
}

/// A model answer and an annotator answer for one (image, Main-Q) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub main_index: usize,
    /// `true` for Yes.
    pub answer: bool,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub session: Session,
    pub profile: ClassProfile,
    /// Dataset with masked copies substituted for their sources.
    pub manifest: DatasetManifest,
    pub crops: CropIndex,
}

impl Pipeline {
    pub fn new(config: RunConfig, backend: Arc<dyn VisionBackend>) -> Result<Self> {
        config.validate()?;
        let mut manifest = load_layout(&config.dataset.root, &config.dataset.category, config.dataset.layout)?;
        if let Some(path) = &config.dataset.subclass_map {
            manifest.apply_subclasses(&load_subclass_map(path)?)?;
        }
        let profile = match &config.profile {
            Some(path) => ClassProfile::load(path)?,
            None => ClassProfile::builtin(&config.dataset.category).ok_or_else(|| {
                Error::Config(format!(
                    "no bundled profile for `{}`; set `profile` in the config",
                    config.dataset.category
                ))
            })?,
        };
        let templates = match &config.templates {
            Some(dir) => Templates::load_dir(dir)?,
            None => Templates::builtin(),
        };
        let crops = match &config.preprocess_manifest {
            Some(path) => CropIndex::load(path)?,
            None => CropIndex::default(),
        };
        for r in &mut manifest.records {
            if let Some(masked) = crops.masked_path(&r.id) {
                r.path = masked.to_path_buf();
            }
        }
        let executor = Executor::new(config.parallelism)?;
        let session = Session::new(backend, config.backend.settings(), executor).with_templates(templates);
        Ok(Pipeline {
            config,
            session,
            profile,
            manifest,
            crops,
        })
    }

    pub fn subclasses(&self) -> Vec<Option<String>> {
        self.manifest.subclasses()
    }

    fn run_dir(&self, run: usize) -> PathBuf {
        self.config.run_dir(run)
    }

    fn load_images(&self, ids: &[String]) -> Result<Vec<(String, ImageData)>> {
        ids.iter()
            .map(|id| {
                let record = self
                    .manifest
                    .get(id)
                    .ok_or_else(|| Error::InvalidManifest(format!("unknown image `{id}`")))?;
                Ok((id.clone(), ImageData::load(&record.path)?))
            })
            .collect()
    }

    /// Few-shot draw, synthesis, augmentation, and (unless disabled)
    /// filtering, for every subclass of one run.
    pub fn synth(&self, run: usize) -> Result<Vec<QuestionSet>> {
        let seed = self.config.seed_for_run(run);
        let dir = self.run_dir(run);
        let cap = if self.config.filter.enabled {
            self.config.filter.pool_size
        } else {
            0
        };
        let mut sets = Vec::new();
        for sub in self.subclasses() {
            let sub = sub.as_deref();
            let sfx = suffix(sub);
            let part = self.manifest.for_subclass(sub);
            let selection = sample_few_shot(&part, seed, cap)?;
            write_json(&dir.join(format!("selection{sfx}.json")), &selection)?;
            let syn = synthesize(&self.session, &self.profile, sub, &selection, &part)?;
            write_json(&dir.join(format!("descriptions{sfx}.json")), &syn.descriptions)?;
            write_json(&dir.join(format!("summary{sfx}.json")), &syn.summary)?;
            write_json(&dir.join(format!("candidates{sfx}.json")), &syn.candidates)?;
            log::info!(
                "{} run {run}: {} candidate Main-Qs",
                class_key(&self.profile.class_name, sub),
                syn.candidates.m()
            );
            let set = if self.config.filter.enabled {
                self.filter_candidates(run, sub, &syn.candidates, &selection)?
            } else {
                self.write_question_set(run, sub, &syn.candidates)?;
                syn.candidates
            };
            sets.push(set);
        }
        Ok(sets)
    }

    fn filter_candidates(
        &self,
        run: usize,
        sub: Option<&str>,
        candidates: &QuestionSet,
        selection: &FewShotSelection,
    ) -> Result<QuestionSet> {
        if selection.validation_ids.is_empty() {
            return Err(Error::InsufficientNormals {
                needed: crate::dataset::REFERENCE_COUNT + 1,
                found: crate::dataset::REFERENCE_COUNT,
            }
            .at_stage(Stage::Filter));
        }
        let validation = self.load_images(&selection.validation_ids)?;
        let class = class_key(&candidates.class_name, sub);
        let set = run_filter(
            &self.session,
            &class,
            candidates,
            &validation,
            self.config.filter.mode,
            self.config.filter.threshold,
        )
        .map_err(|e| e.at_stage(Stage::Filter))?;
        if let Some(summary) = &set.filter {
            write_atomic(
                &self.run_dir(run).join(format!("filter{}.csv", suffix(sub))),
                summary.to_csv().as_bytes(),
            )?;
        }
        self.write_question_set(run, sub, &set)?;
        Ok(set)
    }

    fn write_question_set(&self, run: usize, sub: Option<&str>, set: &QuestionSet) -> Result<()> {
        set.validate()?;
        write_atomic(
            &self.run_dir(run).join(format!("question_set{}.json", suffix(sub))),
            set.to_json()?.as_bytes(),
        )
    }

    /// Re-applies filtering to the stored candidates of a run.
    pub fn filter(&self, run: usize) -> Result<Vec<QuestionSet>> {
        let dir = self.run_dir(run);
        let mut sets = Vec::new();
        for sub in self.subclasses() {
            let sub = sub.as_deref();
            let sfx = suffix(sub);
            let candidates = QuestionSet::from_json(
                &fs::read_to_string(dir.join(format!("candidates{sfx}.json")))
                    .at_path(dir.join(format!("candidates{sfx}.json")))?,
            )?;
            let set = if self.config.filter.enabled {
                let selection: FewShotSelection = read_json(&dir.join(format!("selection{sfx}.json")))?;
                self.filter_candidates(run, sub, &candidates, &selection)?
            } else {
                self.write_question_set(run, sub, &candidates)?;
                candidates
            };
            sets.push(set);
        }
        Ok(sets)
    }

    pub fn load_question_sets(&self, run: usize) -> Result<BTreeMap<Option<String>, QuestionSet>> {
        let dir = self.run_dir(run);
        let mut out = BTreeMap::new();
        for sub in self.subclasses() {
            let path = dir.join(format!("question_set{}.json", suffix(sub.as_deref())));
            let set = QuestionSet::from_json(&fs::read_to_string(&path).at_path(&path)?)?;
            out.insert(sub, set);
        }
        Ok(out)
    }

    fn test_records(&self) -> Vec<&ImageRecord> {
        let mut records: Vec<&ImageRecord> = self
            .manifest
            .records_in(Split::TestNormal)
            .chain(self.manifest.records_in(Split::TestAnomaly))
            .collect();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        records
    }

    fn infer_record(&self, set: &QuestionSet, record: &ImageRecord) -> Result<ImageVerdict> {
        let class = class_key(&set.class_name, record.subclass.as_deref());
        let crop_paths = if self.profile.preprocess.object_crops {
            self.crops.crop_paths(&record.id)
        } else {
            Vec::new()
        };
        if crop_paths.is_empty() {
            let image = ImageData::load(&record.path)?;
            return infer_image(&self.session, set, &class, &record.id, &image);
        }
        let crops = crop_paths
            .iter()
            .enumerate()
            .map(|(n, path)| {
                let id = format!("{}#crop{}", record.id, n + 1);
                let image = ImageData::load(path)?;
                infer_image(&self.session, set, &class, &id, &image)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(combine_crops(&record.id, crops))
    }

    /// Judges every test image with the run's question sets.
    pub fn infer(&self, run: usize) -> Result<Vec<VerdictRecord>> {
        let sets = self.load_question_sets(run)?;
        let records = self.test_records();
        if records.is_empty() {
            log::warn!("{}: the test split is empty", self.config.dataset.category);
        }
        let out = self
            .session
            .executor
            .try_map(&records, |record| {
                let set = sets.get(&record.subclass).ok_or_else(|| {
                    Error::InvalidManifest(format!(
                        "no question set for subclass {:?} of `{}`",
                        record.subclass, record.id
                    ))
                })?;
                let result = self
                    .infer_record(set, record)
                    .map_err(|e| e.for_image(record.id.clone()))?;
                Ok(VerdictRecord {
                    label: record.label,
                    subclass: record.subclass.clone(),
                    result,
                })
            })
            .map_err(|e| e.at_stage(Stage::Infer))?;
        let indeterminate = out.iter().filter(|r| r.result.indeterminate).count();
        if indeterminate > 0 {
            log::warn!("run {run}: {indeterminate} indeterminate images");
        }
        write_json(&self.run_dir(run).join("verdicts.json"), &out)?;
        Ok(out)
    }

    pub fn load_verdicts(&self, run: usize) -> Result<Vec<VerdictRecord>> {
        read_json(&self.run_dir(run).join("verdicts.json"))
    }

    /// Metrics per run and their mean over runs `1..=runs`.
    pub fn eval(&self) -> Result<EvalReport> {
        let category = &self.config.dataset.category;
        let mut runs = Vec::with_capacity(self.config.runs);
        for run in 1..=self.config.runs {
            let verdicts = self.load_verdicts(run)?;
            let samples: Vec<ScoredSample> = verdicts.iter().map(VerdictRecord::sample).collect();
            let degraded = verdicts.iter().any(|v| v.result.confidence_degraded);
            if degraded {
                log::warn!("{category} run {run}: scores derived from verdicts; AUROC is not comparable");
            }
            let m = RunMetrics::compute(category, run, &samples, degraded).map_err(|e| e.at_stage(Stage::Eval))?;
            write_json(&self.run_dir(run).join("metrics.json"), &m)?;
            runs.push(m);
        }
        let report = aggregate_runs(&runs)?;
        let dir = self.config.category_dir();
        write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
        write_atomic(&dir.join("report.csv"), EvalReport::to_csv(std::slice::from_ref(&report)).as_bytes())?;
        Ok(report)
    }

    /// Synthesis, inference and evaluation for every configured run.
    pub fn run_all(&self) -> Result<EvalReport> {
        for run in 1..=self.config.runs {
            self.synth(run)?;
            self.infer(run)?;
        }
        self.eval()
    }

    /// Agreement between the model's Main-Q answers of one run and
    /// annotator answers, split by image label.
    pub fn agreement(&self, run: usize, annotations: &[Annotation]) -> Result<AgreementStats> {
        let verdicts = self.load_verdicts(run)?;
        let by_id: BTreeMap<&str, &VerdictRecord> =
            verdicts.iter().map(|v| (v.result.image_id.as_str(), v)).collect();
        let mut rows = Vec::with_capacity(annotations.len());
        for a in annotations {
            let v = by_id.get(a.image_id.as_str()).ok_or_else(|| {
                Error::InvalidManifest(format!("annotation for unknown image `{}`", a.image_id))
            })?;
            let vote = v
                .result
                .votes
                .iter()
                .find(|m| m.main_index == a.main_index)
                .ok_or_else(|| {
                    Error::InvalidManifest(format!(
                        "image `{}` has no vote for Main-Q {}",
                        a.image_id, a.main_index
                    ))
                })?;
            rows.push((v.label, vote.vote == 0, a.answer));
        }
        let stats = agreement_by_label(&rows);
        write_json(&self.run_dir(run).join("agreement.json"), &stats)?;
        Ok(stats)
    }

    pub fn descriptions(&self, run: usize, sub: Option<&str>) -> Result<Vec<Description>> {
        read_json(&self.run_dir(run).join(format!("descriptions{}.json", suffix(sub))))
    }

    pub fn summary(&self, run: usize, sub: Option<&str>) -> Result<NormalSummary> {
        read_json(&self.run_dir(run).join(format!("summary{}.json", suffix(sub))))
    }
}

/// Collects `report.json` from every category under `out_dir` into one table.
pub fn collect_reports(out_dir: &Path) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    let entries = fs::read_dir(out_dir).at_path(out_dir)?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        reports.push(read_json(&d.join("report.json"))?);
    }
    Ok(reports)
}
