//! Question synthesis: describe three normal references, summarize them,
//! generate candidate Main-Qs, and paraphrase each into five Sub-Qs.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::ImageData;
use crate::dataset::{DatasetManifest, FewShotSelection};
use crate::error::{Error, Result, Stage};
use crate::filtering::FilterSummary;
use crate::prompts::{ClassProfile, PromptRole};
use crate::session::{class_key, Session};

pub const SUB_QUESTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub image_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalSummary {
    pub text: String,
    pub source_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainQuestion {
    pub index: usize,
    pub text: String,
    pub sub_questions: Vec<String>,
    pub filter_accuracy: Option<f64>,
    /// Set when augmentation failed twice and the Main-Q text filled the
    /// missing Sub-Q slots.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub reference_ids: Vec<String>,
    pub seed: u64,
    pub backend_id: String,
}

/// The per-class checklist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub class_name: String,
    pub subclass: Option<String>,
    pub provenance: Provenance,
    pub main_questions: Vec<MainQuestion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterSummary>,
}

impl QuestionSet {
    /// Indices run 1..=m without gaps and every Main-Q has five non-empty
    /// Sub-Qs.
    pub fn validate(&self) -> Result<()> {
        if self.main_questions.is_empty() {
            return Err(Error::EmptyQuestionSet);
        }
        for (pos, q) in self.main_questions.iter().enumerate() {
            if q.index != pos + 1 {
                return Err(Error::InvalidQuestionSet(format!(
                    "question at position {} has index {}",
                    pos + 1,
                    q.index
                )));
            }
            if q.sub_questions.len() != SUB_QUESTIONS {
                return Err(Error::InvalidQuestionSet(format!(
                    "Main-Q {} has {} sub-questions",
                    q.index,
                    q.sub_questions.len()
                )));
            }
            if q.text.trim().is_empty() || q.sub_questions.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::InvalidQuestionSet(format!("Main-Q {} has empty text", q.index)));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.main_questions.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let qs: QuestionSet = serde_json::from_str(text)?;
        qs.validate()?;
        Ok(qs)
    }
}

fn question_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?m)^[ \t]*(?:[-*][ \t]+)?(?:\*\*)?[ \t]*(?:\([ \t]*Q[ \t]*\d+[ \t]*\)|Q[ \t]*\d+|\d+\.)[ \t]*(?:\*\*)?[ \t]*:?[ \t]*(?:\*\*)?[ \t]*(.*?)[ \t]*$",
        )
        .expect("valid regex")
    })
}

fn variation_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?mi)^[ \t]*(?:[-*][ \t]+)?(?:\*\*)?[ \t]*Output[ \t]*(\d+)[ \t]*(?:\*\*)?[ \t]*:[ \t]*(?:\*\*)?[ \t]*(.*?)[ \t]*$",
        )
        .expect("valid regex")
    })
}

fn clean_question(s: &str) -> &str {
    s.trim().trim_end_matches("**").trim()
}

/// Extracts questions from lines starting with `(Qn)`, `Qn` or `n.` markers,
/// in order. Placeholder lines (`(Q1) : ...`) are skipped.
pub fn parse_question_list(text: &str) -> Vec<String> {
    question_line_re()
        .captures_iter(text)
        .filter_map(|c| {
            let q = clean_question(c.get(1).map_or("", |m| m.as_str()));
            let only_dots = q.chars().all(|ch| ch == '.' || ch == '…');
            (!only_dots).then(|| q.to_string())
        })
        .collect()
}

/// Case-folded, whitespace-collapsed form used to detect duplicate questions.
pub fn normalize_question(q: &str) -> String {
    q.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Drops later duplicates (by normalized text), keeping first occurrences.
pub fn dedup_questions(questions: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    questions
        .into_iter()
        .filter(|q| seen.insert(normalize_question(q)))
        .collect()
}

/// Parses `OutputN:` lines. Returns the texts in output order when exactly
/// outputs 1..=5 are present and non-empty, otherwise the usable texts found.
pub fn parse_variations(text: &str) -> std::result::Result<Vec<String>, Vec<String>> {
    let mut slots: Vec<Option<String>> = vec![None; SUB_QUESTIONS];
    let mut found = Vec::new();
    let mut clean = true;
    for c in variation_line_re().captures_iter(text) {
        let n: usize = c[1].parse().unwrap_or(0);
        let body = clean_question(c.get(2).map_or("", |m| m.as_str()));
        if body.is_empty() {
            clean = false;
            continue;
        }
        found.push(body.to_string());
        match slots.get_mut(n.wrapping_sub(1)) {
            Some(slot @ None) => *slot = Some(body.to_string()),
            _ => clean = false,
        }
    }
    if clean && slots.iter().all(Option::is_some) {
        Ok(slots.into_iter().flatten().collect())
    } else {
        Err(found)
    }
}

fn non_empty_reply(text: &str) -> Result<String> {
    let t = text.trim();
    if t.is_empty() {
        Err(Error::MalformedResponse("backend returned an empty reply".into()))
    } else {
        Ok(t.to_string())
    }
}

/// Describes each reference image; output order follows `reference_ids`.
pub fn describe_normals(
    session: &Session,
    profile: &ClassProfile,
    subclass: Option<&str>,
    selection: &FewShotSelection,
    manifest: &DatasetManifest,
) -> Result<Vec<Description>> {
    let prompt = session.templates.render_describe(profile, subclass)?;
    let class = class_key(&profile.class_name, subclass);
    session
        .executor
        .try_map(&selection.reference_ids, |id| {
            let describe = || -> Result<Description> {
                let record = manifest
                    .get(id)
                    .ok_or_else(|| Error::InvalidManifest(format!("unknown reference `{id}`")))?;
                let image = ImageData::load(&record.path)?;
                let reply = session.ask(
                    PromptRole::Describe,
                    &class,
                    Some((id, &image)),
                    "",
                    0,
                    prompt.clone(),
                )?;
                Ok(Description {
                    image_id: id.clone(),
                    text: non_empty_reply(&reply.content)?,
                })
            };
            describe().map_err(|e| e.for_image(id.clone()))
        })
        .map_err(|e| e.at_stage(Stage::Describe))
}

pub fn summarize(
    session: &Session,
    profile: &ClassProfile,
    subclass: Option<&str>,
    descriptions: &[Description],
) -> Result<NormalSummary> {
    let run = || -> Result<NormalSummary> {
        let texts: Vec<String> = descriptions.iter().map(|d| d.text.clone()).collect();
        let prompt = session.templates.render_summarize(&profile.class_name, &texts)?;
        let class = class_key(&profile.class_name, subclass);
        let reply = session.ask(PromptRole::Summarize, &class, None, "", 0, prompt)?;
        Ok(NormalSummary {
            text: non_empty_reply(&reply.content)?,
            source_ids: descriptions.iter().map(|d| d.image_id.clone()).collect(),
        })
    };
    run().map_err(|e| e.at_stage(Stage::Summarize))
}

pub fn generate_main_candidates(
    session: &Session,
    profile: &ClassProfile,
    subclass: Option<&str>,
    summary: &NormalSummary,
) -> Result<Vec<String>> {
    let run = || -> Result<Vec<String>> {
        let prompt = session.templates.render_generate(&summary.text, profile, subclass)?;
        let class = class_key(&profile.class_name, subclass);
        let reply = session.ask(PromptRole::GenerateMain, &class, None, "", 0, prompt)?;
        let candidates = dedup_questions(parse_question_list(&reply.content));
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        Ok(candidates)
    };
    run().map_err(|e| e.at_stage(Stage::Generate))
}

fn augment_attempt(
    session: &Session,
    class: &str,
    question: &str,
    attempt: u32,
) -> Result<std::result::Result<Vec<String>, Vec<String>>> {
    let prompt = session.templates.render_augment(question)?;
    let reply = session.ask(PromptRole::AugmentSub, class, None, question, attempt, prompt)?;
    Ok(parse_variations(&reply.content))
}

/// Asks for five paraphrases of `question`; any other count is an error.
pub fn augment_subquestions(session: &Session, class: &str, question: &str) -> Result<Vec<String>> {
    augment_attempt(session, class, question, 0)?.map_err(|found| Error::AugmentationCount(found.len()))
}

/// Augmentation with the recovery policy: one re-query, then pad the missing
/// slots with the Main-Q text. Returns the Sub-Qs and whether padding happened.
pub fn augment_with_fallback(
    session: &Session,
    class: &str,
    question: &str,
) -> Result<(Vec<String>, bool)> {
    let mut last = Vec::new();
    for attempt in 0..2 {
        match augment_attempt(session, class, question, attempt)? {
            Ok(subs) => return Ok((subs, false)),
            Err(found) => {
                log::warn!(
                    "augmentation of `{question}` gave {} usable variations (attempt {})",
                    found.len(),
                    attempt + 1
                );
                last = found;
            }
        }
    }
    last.truncate(SUB_QUESTIONS);
    while last.len() < SUB_QUESTIONS {
        last.push(question.to_string());
    }
    Ok((last, true))
}

/// Output of stages one to three plus augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub descriptions: Vec<Description>,
    pub summary: NormalSummary,
    /// Every de-duplicated candidate with its Sub-Qs; not yet filtered.
    pub candidates: QuestionSet,
}

pub fn synthesize(
    session: &Session,
    profile: &ClassProfile,
    subclass: Option<&str>,
    selection: &FewShotSelection,
    manifest: &DatasetManifest,
) -> Result<Synthesis> {
    let descriptions = describe_normals(session, profile, subclass, selection, manifest)?;
    let summary = summarize(session, profile, subclass, &descriptions)?;
    let texts = generate_main_candidates(session, profile, subclass, &summary)?;
    let class = class_key(&profile.class_name, subclass);
    let augmented = session
        .executor
        .try_map(&texts, |q| augment_with_fallback(session, &class, q))
        .map_err(|e| e.at_stage(Stage::Augment))?;
    let main_questions = texts
        .into_iter()
        .zip(augmented)
        .enumerate()
        .map(|(i, (text, (sub_questions, padded)))| MainQuestion {
            index: i + 1,
            text,
            sub_questions,
            filter_accuracy: None,
            padded,
        })
        .collect();
    let candidates = QuestionSet {
        class_name: profile.class_name.clone(),
        subclass: subclass.map(str::to_string),
        provenance: Provenance {
            reference_ids: selection.reference_ids.clone(),
            seed: selection.seed,
            backend_id: session.backend_id(),
        },
        main_questions,
        filter: None,
    };
    candidates.validate()?;
    Ok(Synthesis {
        descriptions,
        summary,
        candidates,
    })
}
