//! Testing stage: ask every Sub-Q about an image, vote per Main-Q, decide,
//! score, and explain.
//!
//! A Sub-Q answer is Yes (0) or No (1). Main-Q `i` votes 0 exactly when its
//! No count is strictly below its Yes count; ties and No majorities vote 1.
//! The image is Normal when every Main-Q votes 0. For each Main-Q the score
//! component is `exp(s_i)`, where `s_i` is the highest answer log-probability
//! among Sub-Qs agreeing with the vote; the anomaly score is the median of
//! those components for an Anomaly verdict and one minus the median for a
//! Normal verdict.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatResponse, ImageData};
use crate::error::{Error, Result};
use crate::prompts::PromptRole;
use crate::session::Session;
use crate::synthesis::{MainQuestion, QuestionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Unparsed,
}

impl Answer {
    /// 0 for Yes, 1 for No.
    pub fn bit(self) -> Option<u8> {
        match self {
            Answer::Yes => Some(0),
            Answer::No => Some(1),
            Answer::Unparsed => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Anomaly,
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)-[ \t]*result[ \t]*:").expect("valid regex"))
}

/// Byte span of the decision word following the last `- Result:` marker.
fn decision_span(text: &str) -> Option<(usize, usize)> {
    let marker = marker_re().find_iter(text).last()?;
    let tail = &text[marker.end()..];
    let (offset, _) = tail.char_indices().find(|(_, c)| c.is_alphanumeric())?;
    let word_start = marker.end() + offset;
    let word_len: usize = text[word_start..]
        .chars()
        .take_while(|c| c.is_alphabetic())
        .map(char::len_utf8)
        .sum();
    (word_len > 0).then_some((word_start, word_start + word_len))
}

fn classify(word: &str) -> Answer {
    if word.eq_ignore_ascii_case("yes") {
        Answer::Yes
    } else if word.eq_ignore_ascii_case("no") {
        Answer::No
    } else {
        Answer::Unparsed
    }
}

/// Reads the verdict after the last `- Result:` marker.
pub fn parse_result(text: &str) -> Answer {
    match decision_span(text) {
        Some((s, e)) => classify(&text[s..e]),
        None => Answer::Unparsed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogprobReading {
    pub value: f64,
    /// The backend gave no token log-probabilities; `value` is 0.
    pub degraded: bool,
}

/// Sum of the log-probabilities of the tokens spelling the decision word.
/// A response without tokens reads as 0 and is flagged degraded.
pub fn answer_logprob(response: &ChatResponse, parsed: Answer) -> Result<LogprobReading> {
    if parsed == Answer::Unparsed {
        return Err(Error::LogprobMissing);
    }
    if response.tokens.is_empty() {
        return Ok(LogprobReading {
            value: 0.0,
            degraded: true,
        });
    }
    let mut joined = String::new();
    let mut spans = Vec::with_capacity(response.tokens.len());
    for t in &response.tokens {
        let start = joined.len();
        joined.push_str(&t.text);
        spans.push((start, joined.len()));
    }
    let (ws, we) = decision_span(&joined).ok_or(Error::LogprobMissing)?;
    if classify(&joined[ws..we]) != parsed {
        return Err(Error::LogprobMissing);
    }
    let value = response
        .tokens
        .iter()
        .zip(&spans)
        .filter(|(_, &(s, e))| s < we && e > ws)
        .map(|(t, _)| t.logprob)
        .sum();
    Ok(LogprobReading {
        value,
        degraded: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubAnswer {
    pub main_index: usize,
    pub sub_index: usize,
    pub parsed: Answer,
    /// Present exactly when `parsed` is Yes or No.
    pub answer_logprob: Option<f64>,
    #[serde(default)]
    pub logprob_degraded: bool,
    pub raw_text: String,
}

impl SubAnswer {
    pub fn new(main_index: usize, sub_index: usize, parsed: Answer, logprob: f64) -> Self {
        SubAnswer {
            main_index,
            sub_index,
            parsed,
            answer_logprob: (parsed != Answer::Unparsed).then_some(logprob),
            logprob_degraded: false,
            raw_text: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainVote {
    pub main_index: usize,
    /// 0 = satisfied (Yes), 1 = violated (No).
    pub vote: u8,
    pub yes_count: usize,
    pub no_count: usize,
    pub s_i: f64,
    /// Sub-Q indices whose answer matches the vote.
    pub contributing: Vec<usize>,
}

/// Majority vote over one Main-Q's Sub-Q answers. Unparsed answers take no
/// part; a tie votes 1.
pub fn vote_main(answers: &[SubAnswer]) -> Result<MainVote> {
    let main_index = answers
        .first()
        .map(|a| a.main_index)
        .ok_or(Error::VoteUndefined(0))?;
    if answers.iter().any(|a| a.main_index != main_index) {
        return Err(Error::InvalidQuestionSet(format!(
            "answers for several Main-Qs passed to the vote for Main-Q {main_index}"
        )));
    }
    let yes_count = answers.iter().filter(|a| a.parsed == Answer::Yes).count();
    let no_count = answers.iter().filter(|a| a.parsed == Answer::No).count();
    if yes_count + no_count == 0 {
        return Err(Error::VoteUndefined(main_index));
    }
    let (vote, winner) = if no_count < yes_count {
        (0, Answer::Yes)
    } else {
        (1, Answer::No)
    };
    let matching: Vec<&SubAnswer> = answers.iter().filter(|a| a.parsed == winner).collect();
    let s_i = matching
        .iter()
        .map(|a| a.answer_logprob.ok_or(Error::LogprobMissing))
        .try_fold(f64::NEG_INFINITY, |acc, lp| lp.map(|lp| acc.max(lp)))?;
    Ok(MainVote {
        main_index,
        vote,
        yes_count,
        no_count,
        s_i,
        contributing: matching.iter().map(|a| a.sub_index).collect(),
    })
}

/// Normal exactly when no Main-Q voted 1.
pub fn decide(votes: &[MainVote]) -> Verdict {
    if votes.iter().map(|v| v.vote as usize).sum::<usize>() == 0 {
        Verdict::Normal
    } else {
        Verdict::Anomaly
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// `exp(s_i)` for every vote.
pub fn score_components(votes: &[MainVote]) -> Result<Vec<f64>> {
    votes
        .iter()
        .map(|v| {
            if v.s_i.is_nan() || v.s_i > 0.0 {
                Err(Error::ScoreUndefined(format!(
                    "Main-Q {} has s_i = {}",
                    v.main_index, v.s_i
                )))
            } else {
                Ok(v.s_i.exp())
            }
        })
        .collect()
}

pub fn anomaly_score(votes: &[MainVote], verdict: Verdict) -> Result<f64> {
    let s = score_components(votes)?;
    let med = median(&s).ok_or_else(|| Error::ScoreUndefined("no votes".into()))?;
    Ok(match verdict {
        Verdict::Normal => 1.0 - med,
        Verdict::Anomaly => med,
    })
}

/// Everything concluded about one test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageVerdict {
    pub image_id: String,
    /// Absent when the image is indeterminate.
    pub verdict: Option<Verdict>,
    pub votes: Vec<MainVote>,
    pub score_components: Vec<f64>,
    pub anomaly_score: Option<f64>,
    /// Texts of violated Main-Qs, by index.
    pub rationale: Vec<String>,
    pub indeterminate: bool,
    pub confidence_degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub crops: Vec<ImageVerdict>,
}

impl ImageVerdict {
    fn indeterminate(image_id: &str, votes: Vec<MainVote>, degraded: bool) -> Self {
        ImageVerdict {
            image_id: image_id.to_string(),
            verdict: None,
            votes,
            score_components: Vec::new(),
            anomaly_score: None,
            rationale: Vec::new(),
            indeterminate: true,
            confidence_degraded: degraded,
            crops: Vec::new(),
        }
    }
}

/// Turns the Sub-Q answers of one image into a verdict. Answers may come in
/// any order; they are grouped by Main-Q index.
pub fn assess(image_id: &str, questions: &[MainQuestion], answers: &[SubAnswer]) -> Result<ImageVerdict> {
    let degraded = answers
        .iter()
        .any(|a| a.parsed != Answer::Unparsed && a.logprob_degraded);
    let mut votes = Vec::with_capacity(questions.len());
    let mut undefined = false;
    for q in questions {
        let group: Vec<SubAnswer> = answers
            .iter()
            .filter(|a| a.main_index == q.index)
            .cloned()
            .collect();
        match vote_main(&group) {
            Ok(v) => votes.push(v),
            Err(Error::VoteUndefined(i)) => {
                log::warn!("image `{image_id}`: Main-Q {i} has no parseable answers");
                undefined = true;
            }
            Err(e) => return Err(e),
        }
    }
    if undefined {
        return Ok(ImageVerdict::indeterminate(image_id, votes, degraded));
    }
    let verdict = decide(&votes);
    let components = score_components(&votes)?;
    let score = if degraded {
        match verdict {
            Verdict::Normal => 0.0,
            Verdict::Anomaly => 1.0,
        }
    } else {
        anomaly_score(&votes, verdict)?
    };
    let rationale = votes
        .iter()
        .filter(|v| v.vote == 1)
        .filter_map(|v| questions.iter().find(|q| q.index == v.main_index))
        .map(|q| q.text.clone())
        .collect();
    Ok(ImageVerdict {
        image_id: image_id.to_string(),
        verdict: Some(verdict),
        votes,
        score_components: components,
        anomaly_score: Some(score),
        rationale,
        indeterminate: false,
        confidence_degraded: degraded,
        crops: Vec::new(),
    })
}

/// Asks one question about an image with the test prompt, re-asking once if
/// the reply cannot be parsed.
pub fn ask_question(
    session: &Session,
    class_key: &str,
    class_name: &str,
    image_id: &str,
    image: &ImageData,
    question: &str,
) -> Result<(Answer, Option<LogprobReading>, String)> {
    let prompt = session.templates.render_test(question, class_name)?;
    let mut last = String::new();
    for attempt in 0..2 {
        let reply = session.ask(
            PromptRole::Test,
            class_key,
            Some((image_id, image)),
            question,
            attempt,
            prompt.clone(),
        )?;
        let parsed = parse_result(&reply.content);
        if parsed != Answer::Unparsed {
            let reading = match answer_logprob(&reply, parsed) {
                Ok(r) => r,
                Err(Error::LogprobMissing) => {
                    log::warn!("image `{image_id}`: decision tokens not found for `{question}`");
                    LogprobReading {
                        value: 0.0,
                        degraded: true,
                    }
                }
                Err(e) => return Err(e),
            };
            return Ok((parsed, Some(reading), reply.content));
        }
        last = reply.content;
    }
    Ok((Answer::Unparsed, None, last))
}

/// Runs every Sub-Q of the question set against one image.
pub fn infer_image(
    session: &Session,
    questions: &QuestionSet,
    class_key: &str,
    image_id: &str,
    image: &ImageData,
) -> Result<ImageVerdict> {
    let tasks: Vec<(usize, usize, &str)> = questions
        .main_questions
        .iter()
        .flat_map(|q| {
            q.sub_questions
                .iter()
                .enumerate()
                .map(move |(j, s)| (q.index, j + 1, s.as_str()))
        })
        .collect();
    let answers = session
        .executor
        .try_map(&tasks, |&(i, j, text)| {
            let (parsed, reading, raw) =
                ask_question(session, class_key, &questions.class_name, image_id, image, text)?;
            Ok(SubAnswer {
                main_index: i,
                sub_index: j,
                parsed,
                answer_logprob: reading.map(|r| r.value),
                logprob_degraded: reading.is_some_and(|r| r.degraded),
                raw_text: raw,
            })
        })
        .map_err(|e| e.for_image(image_id))?;
    assess(image_id, &questions.main_questions, &answers)
}

/// Combines per-crop verdicts: Anomaly if any crop is anomalous, otherwise
/// Normal when every crop is determinate. The score is the highest crop score.
pub fn combine_crops(image_id: &str, crops: Vec<ImageVerdict>) -> ImageVerdict {
    let degraded = crops.iter().any(|c| c.confidence_degraded);
    let any_anomaly = crops.iter().any(|c| c.verdict == Some(Verdict::Anomaly));
    let all_determinate = crops.iter().all(|c| !c.indeterminate);
    let verdict = if any_anomaly {
        Some(Verdict::Anomaly)
    } else if all_determinate && !crops.is_empty() {
        Some(Verdict::Normal)
    } else {
        None
    };
    let score = verdict.and_then(|v| {
        if degraded {
            Some(if v == Verdict::Anomaly { 1.0 } else { 0.0 })
        } else {
            crops
                .iter()
                .filter_map(|c| c.anomaly_score)
                .max_by(f64::total_cmp)
        }
    });
    let mut failed: Vec<(usize, String)> = Vec::new();
    for c in &crops {
        // rationale lists violated Main-Qs in vote order
        let violated = c.votes.iter().filter(|v| v.vote == 1);
        for (v, text) in violated.zip(&c.rationale) {
            if !failed.iter().any(|(i, _)| *i == v.main_index) {
                failed.push((v.main_index, text.clone()));
            }
        }
    }
    failed.sort_by_key(|(i, _)| *i);
    ImageVerdict {
        image_id: image_id.to_string(),
        verdict,
        votes: Vec::new(),
        score_components: Vec::new(),
        anomaly_score: score,
        rationale: failed.into_iter().map(|(_, t)| t).collect(),
        indeterminate: verdict.is_none(),
        confidence_degraded: degraded,
        crops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TokenLogprob;

    fn response(tokens: &[(&str, f64)]) -> ChatResponse {
        ChatResponse {
            content: tokens.iter().map(|(t, _)| *t).collect(),
            tokens: tokens
                .iter()
                .map(|(t, l)| TokenLogprob {
                    text: t.to_string(),
                    logprob: *l,
                })
                .collect(),
            backend_id: "t".into(),
            cached: false,
        }
    }

    fn answers(main_index: usize, pattern: &[Answer]) -> Vec<SubAnswer> {
        pattern
            .iter()
            .enumerate()
            .map(|(j, &a)| SubAnswer::new(main_index, j + 1, a, -0.1 * (j as f64 + 1.0)))
            .collect()
    }

    #[test]
    fn parse_result_cases() {
        assert_eq!(parse_result("...the compartment holds one pin.\n- Result: Yes"), Answer::Yes);
        assert_eq!(parse_result("...- Result: No"), Answer::No);
        assert_eq!(parse_result("I cannot tell."), Answer::Unparsed);
        assert_eq!(parse_result("- result: yes.\n"), Answer::Yes);
        assert_eq!(parse_result("- Result: **No**  "), Answer::No);
        assert_eq!(parse_result("- Result: Yes\nwait\n- Result: No"), Answer::No);
        assert_eq!(parse_result("- Result: Maybe"), Answer::Unparsed);
        assert_eq!(parse_result("- Result: Nope"), Answer::Unparsed);
        assert_eq!(parse_result("- Result:"), Answer::Unparsed);
    }

    #[test]
    fn logprob_single_and_split_tokens() {
        let r = response(&[("The box holds one pin.\n- Result: ", -0.4), ("Yes", -0.05)]);
        assert_eq!(answer_logprob(&r, Answer::Yes).unwrap().value, -0.05);

        let r = response(&[("…\n", -0.1), ("- Result:", -0.2), (" Y", -0.02), ("es", -0.03), ("\n", -0.5)]);
        let got = answer_logprob(&r, Answer::Yes).unwrap().value;
        // token walk: the word "Yes" spans exactly the " Y" and "es" tokens
        assert!((got - (-0.05)).abs() < 1e-15, "{got}");

        let r = ChatResponse {
            content: "- Result: No".into(),
            tokens: vec![],
            backend_id: "t".into(),
            cached: false,
        };
        let reading = answer_logprob(&r, Answer::No).unwrap();
        assert_eq!(reading.value, 0.0);
        assert!(reading.degraded);

        let r = response(&[("- Result: ", -0.1), ("Yes", -0.2)]);
        assert!(matches!(answer_logprob(&r, Answer::No), Err(Error::LogprobMissing)));
        let r = response(&[("no marker here", -0.1)]);
        assert!(matches!(answer_logprob(&r, Answer::Yes), Err(Error::LogprobMissing)));
    }

    #[test]
    fn vote_examples() {
        use Answer::*;
        assert_eq!(vote_main(&answers(1, &[Yes, Yes, Yes, Yes, No])).unwrap().vote, 0);
        assert_eq!(vote_main(&answers(1, &[No, No, No, Yes, Yes])).unwrap().vote, 1);
        let tie = vote_main(&answers(1, &[Yes, Yes, No, No, Unparsed])).unwrap();
        assert_eq!((tie.vote, tie.yes_count, tie.no_count), (1, 2, 2));
        assert!(matches!(
            vote_main(&answers(4, &[Unparsed; 5])),
            Err(Error::VoteUndefined(4))
        ));
    }

    #[test]
    fn s_i_is_max_over_matching_answers() {
        use Answer::*;
        let v = vote_main(&answers(1, &[No, Yes, Yes, No, Yes])).unwrap();
        // Yes answers at j = 2, 3, 5 carry -0.2, -0.3, -0.5
        assert_eq!(v.vote, 0);
        assert!((v.s_i - (-0.2)).abs() < 1e-12);
        assert_eq!(v.contributing, vec![2, 3, 5]);
    }

    #[test]
    fn score_examples() {
        let vote = |i, vote, s_i| MainVote {
            main_index: i,
            vote,
            yes_count: 0,
            no_count: 0,
            s_i,
            contributing: vec![],
        };
        let votes = vec![vote(1, 1, -0.05), vote(2, 0, -0.105), vote(3, 0, -0.223)];
        // exp(-0.105) = 0.900325 is the median of (0.951229, 0.900325, 0.800115)
        let a = anomaly_score(&votes, Verdict::Anomaly).unwrap();
        assert!((a - 0.900_325).abs() < 1e-6, "{a}");
        let n = anomaly_score(&votes, Verdict::Normal).unwrap();
        assert!((n - 0.099_675).abs() < 1e-6, "{n}");
        assert_eq!(anomaly_score(&[vote(1, 0, 0.0)], Verdict::Normal).unwrap(), 0.0);
        assert!(anomaly_score(&[vote(1, 0, 0.5)], Verdict::Normal).is_err());
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn assess_builds_rationale() {
        use Answer::*;
        let q = |i: usize, t: &str| MainQuestion {
            index: i,
            text: t.into(),
            sub_questions: vec![t.into(); 5],
            filter_accuracy: None,
            padded: false,
        };
        let qs = vec![q(1, "one?"), q(2, "two?")];
        let mut a = answers(1, &[Yes; 5]);
        a.extend(answers(2, &[No, No, No, No, Yes]));
        let v = assess("img", &qs, &a).unwrap();
        assert_eq!(v.verdict, Some(Verdict::Anomaly));
        assert_eq!(v.rationale, vec!["two?"]);

        let mut a = answers(1, &[Yes; 5]);
        a.extend(answers(2, &[Unparsed; 5]));
        let v = assess("img", &qs, &a).unwrap();
        assert!(v.indeterminate);
        assert!(v.verdict.is_none() && v.anomaly_score.is_none());
    }

    #[test]
    fn degraded_answers_score_from_verdict() {
        use Answer::*;
        let q = MainQuestion {
            index: 1,
            text: "q?".into(),
            sub_questions: vec!["q?".into(); 5],
            filter_accuracy: None,
            padded: false,
        };
        let mut a = answers(1, &[No, No, No, Yes, Yes]);
        for x in &mut a {
            x.answer_logprob = Some(0.0);
            x.logprob_degraded = true;
        }
        let v = assess("img", &[q], &a).unwrap();
        assert!(v.confidence_degraded);
        assert_eq!(v.anomaly_score, Some(1.0));
    }
}
