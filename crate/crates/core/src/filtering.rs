//! Drops candidate Main-Qs that a model answers wrongly on normal images.
//!
//! Every validation image is normal, so the right answer is always Yes. A
//! question is kept when its accuracy is at least the threshold; anything
//! strictly below is removed.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::ImageData;
use crate::error::{Error, Result, Stage};
use crate::inference::{ask_question, assess, Answer, SubAnswer};
use crate::session::Session;
use crate::synthesis::{MainQuestion, QuestionSet};

pub const DEFAULT_THRESHOLD: f64 = 0.80;
pub const DEFAULT_POOL_SIZE: usize = 50;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// One query per image with the Main-Q itself.
    #[default]
    Direct,
    /// The full Sub-Q vote per image.
    Voted,
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(FilterMode::Direct),
            "voted" => Ok(FilterMode::Voted),
            other => Err(Error::Config(format!(
                "unknown filter mode `{other}` (expected direct or voted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub question_text: String,
    pub asked: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub kept: bool,
}

impl FilterReport {
    pub fn new(question_text: impl Into<String>, asked: usize, correct: usize, threshold: f64) -> Result<Self> {
        if asked == 0 {
            let question_text = question_text.into();
            return Err(Error::NoSignal(question_text));
        }
        let accuracy = correct as f64 / asked as f64;
        Ok(FilterReport {
            question_text: question_text.into(),
            asked,
            correct,
            accuracy,
            kept: keeps(accuracy, threshold),
        })
    }

    /// Report with a given accuracy, for replaying recorded statistics.
    pub fn with_accuracy(question_text: impl Into<String>, accuracy: f64, threshold: f64) -> Self {
        FilterReport {
            question_text: question_text.into(),
            asked: 0,
            correct: 0,
            accuracy,
            kept: keeps(accuracy, threshold),
        }
    }
}

/// The keep rule. Only accuracies strictly below the threshold are dropped.
pub fn keeps(accuracy: f64, threshold: f64) -> bool {
    accuracy >= threshold
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "filter threshold must lie in (0, 1], got {threshold}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub threshold: f64,
    pub mode: FilterMode,
    pub validation_ids: Vec<String>,
    /// One report per candidate, in candidate order.
    pub reports: Vec<FilterReport>,
}

impl FilterSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate,question,asked,correct,accuracy,kept\n");
        for (k, r) in self.reports.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{}",
                k + 1,
                csv_field(&r.question_text),
                r.asked,
                r.correct,
                r.accuracy,
                r.kept
            );
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Asks one candidate about every validation image and counts Yes answers.
pub fn score_question_on_normals(
    session: &Session,
    class_key: &str,
    class_name: &str,
    question: &MainQuestion,
    validation: &[(String, ImageData)],
    mode: FilterMode,
    threshold: f64,
) -> Result<FilterReport> {
    if validation.is_empty() {
        return Err(Error::Config("the filter validation pool is empty".into()));
    }
    let outcomes: Vec<Option<bool>> = session.executor.try_map(validation, |(id, image)| {
        let outcome = match mode {
            FilterMode::Direct => {
                let (answer, _, _) = ask_question(session, class_key, class_name, id, image, &question.text)?;
                answer.bit().map(|b| b == 0)
            }
            FilterMode::Voted => voted_outcome(session, class_key, class_name, question, id, image)?,
        };
        Ok(outcome)
    }).map_err(|e| e.at_stage(Stage::Filter))?;
    let asked = outcomes.iter().flatten().count();
    let correct = outcomes.iter().flatten().filter(|&&ok| ok).count();
    if asked == 0 {
        return Err(Error::NoSignal(question.text.clone()).at_stage(Stage::Filter));
    }
    FilterReport::new(question.text.clone(), asked, correct, threshold)
}

fn voted_outcome(
    session: &Session,
    class_key: &str,
    class_name: &str,
    question: &MainQuestion,
    image_id: &str,
    image: &ImageData,
) -> Result<Option<bool>> {
    let mut answers = Vec::with_capacity(question.sub_questions.len());
    for (j, sub) in question.sub_questions.iter().enumerate() {
        let (parsed, reading, raw) = ask_question(session, class_key, class_name, image_id, image, sub)?;
        answers.push(SubAnswer {
            main_index: question.index,
            sub_index: j + 1,
            parsed,
            answer_logprob: reading.map(|r| r.value),
            logprob_degraded: reading.is_some_and(|r| r.degraded),
            raw_text: raw,
        });
    }
    if answers.iter().all(|a| a.parsed == Answer::Unparsed) {
        return Ok(None);
    }
    let verdict = assess(image_id, std::slice::from_ref(question), &answers)?;
    Ok(verdict.votes.first().map(|v| v.vote == 0))
}

/// Keeps the candidates whose report says so, re-indexed from 1 in their
/// original order.
pub fn filter_questions(candidates: &QuestionSet, reports: &[FilterReport]) -> Result<QuestionSet> {
    if reports.len() != candidates.main_questions.len() {
        return Err(Error::Alignment {
            left: candidates.main_questions.len(),
            right: reports.len(),
        });
    }
    let kept: Vec<MainQuestion> = candidates
        .main_questions
        .iter()
        .zip(reports)
        .filter(|(_, r)| r.kept)
        .enumerate()
        .map(|(k, (q, r))| MainQuestion {
            index: k + 1,
            filter_accuracy: Some(r.accuracy),
            ..q.clone()
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyQuestionSet);
    }
    Ok(QuestionSet {
        main_questions: kept,
        ..candidates.clone()
    })
}

/// Scores every candidate and applies the keep rule.
pub fn run_filter(
    session: &Session,
    class_key: &str,
    candidates: &QuestionSet,
    validation: &[(String, ImageData)],
    mode: FilterMode,
    threshold: f64,
) -> Result<QuestionSet> {
    validate_threshold(threshold)?;
    let reports = candidates
        .main_questions
        .iter()
        .map(|q| {
            score_question_on_normals(
                session,
                class_key,
                &candidates.class_name,
                q,
                validation,
                mode,
                threshold,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for (q, r) in candidates.main_questions.iter().zip(&reports) {
        log::info!(
            "filter: candidate {} accuracy {}/{} = {:.3} {}",
            q.index,
            r.correct,
            r.asked,
            r.accuracy,
            if r.kept { "kept" } else { "dropped" }
        );
    }
    let mut set = filter_questions(candidates, &reports)?;
    set.filter = Some(FilterSummary {
        threshold,
        mode,
        validation_ids: validation.iter().map(|(id, _)| id.clone()).collect(),
        reports,
    });
    Ok(set)
}
