//! A self-contained mock scenario: a small flat-layout breakfast-box dataset,
//! a fixture file answering every request the pipeline makes, and a config
//! tying them together.
//!
//! Ten normal and ten anomalous test images. Each anomaly violates at least
//! one checklist question; answer log-probabilities are authored so that
//! anomalies score near 1 and normals near 0. The scenario also contains a
//! question that is wrong on normal images (removed by filtering, and whose
//! paraphrasing comes back one short), a duplicated candidate, a dissenting
//! Sub-Q, unparseable replies with and without a successful re-query, and a
//! tied vote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backend::{fixture_key, FixtureEntry, RequestTag, TokenLogprob};
use crate::config::{
    BackendConfig, BackendKind, DatasetConfig, FilterConfig, RunConfig, SeedPolicy,
};
use crate::dataset::Layout;
use crate::error::{IoContext, Result};
use crate::prompts::PromptRole;

pub const DEMO_CATEGORY: &str = "breakfast_box";
const CLASS: &str = "breakfast box";
const TRAIN: usize = 10;
const NORMAL: usize = 10;
const ANOMALY: usize = 10;

/// Checklist questions with their paraphrases.
pub const DEMO_QUESTIONS: [(&str, [&str; 5]); 5] = [
    (
        "Does the left compartment hold exactly two tangerines?",
        [
            "Are there precisely two tangerines in the left compartment?",
            "Can you count exactly two tangerines on the left side of the box?",
            "Is the number of tangerines in the left compartment exactly two?",
            "Does the left side of the box contain two tangerines, no more and no fewer?",
            "Are exactly two tangerines placed in the left part of the box?",
        ],
    ),
    (
        "Is a single nectarine present in the left compartment?",
        [
            "Is there one nectarine on the left side of the box?",
            "Does the left compartment contain exactly one nectarine?",
            "Can you see one nectarine in the left part of the box?",
            "Is exactly one nectarine placed on the left side?",
            "Does the left side of the box hold a single nectarine?",
        ],
    ),
    (
        "Is the upper right area filled with cereal?",
        [
            "Does cereal occupy the top of the right compartment?",
            "Is the upper part of the right side covered with cereal?",
            "Can you see cereal in the upper right section of the box?",
            "Is cereal present in the top right area of the box?",
            "Does the upper right region of the box contain cereal?",
        ],
    ),
    (
        "Does the lower right area hold banana chips mixed with almonds?",
        [
            "Is there a mix of banana chips and almonds in the bottom right section?",
            "Do banana chips and almonds appear together in the lower right area?",
            "Does the bottom of the right compartment contain banana chips and almonds?",
            "Can you see banana chips with almonds in the lower right part of the box?",
            "Are almonds and banana chips mixed in the lower right region?",
        ],
    ),
    (
        "Is all fruit on the left and all cereal and nuts on the right?",
        [
            "Is the fruit kept only on the left while cereal and nuts stay on the right?",
            "Are the fruits confined to the left side and the cereal with nuts to the right side?",
            "Does the left side hold only fruit and the right side only cereal and nuts?",
            "Is every fruit on the left and every cereal or nut item on the right?",
            "Are fruit and cereal separated, fruit on the left and cereal with nuts on the right?",
        ],
    ),
];

/// A candidate that is wrong on normal images; filtering removes it.
pub const BIASED_QUESTION: &str = "Is the lid of the breakfast box closed?";

fn key(role: PromptRole, image: &str, subject: &str, attempt: u32) -> String {
    fixture_key(&RequestTag {
        role: role.tag().to_string(),
        class: CLASS.to_string(),
        image_id: image.to_string(),
        subject: subject.to_string(),
        attempt,
    })
}

fn plain(content: String) -> FixtureEntry {
    FixtureEntry {
        tokens: vec![TokenLogprob {
            text: content.clone(),
            logprob: -0.4,
        }],
        content,
    }
}

/// A reply ending in `- Result: <word>` whose decision word carries `lp`.
/// With `split`, the word is spread over two tokens sharing `lp`.
fn answer(reason: &str, yes: bool, lp: f64, split: bool) -> FixtureEntry {
    let head = format!("{reason}\n- Result:");
    let word = if yes { " Yes" } else { " No" };
    let mut tokens = vec![TokenLogprob {
        text: head.clone(),
        logprob: -0.3,
    }];
    if split {
        let (a, b) = word.split_at(2);
        tokens.push(TokenLogprob {
            text: a.to_string(),
            logprob: lp * 0.4,
        });
        tokens.push(TokenLogprob {
            text: b.to_string(),
            logprob: lp * 0.6,
        });
    } else {
        tokens.push(TokenLogprob {
            text: word.to_string(),
            logprob: lp,
        });
    }
    FixtureEntry {
        content: format!("{head}{word}"),
        tokens,
    }
}

fn unparsed() -> FixtureEntry {
    plain("The picture is too dark to judge this reliably.".to_string())
}

pub fn train_id(k: usize) -> String {
    format!("train/{k:03}.png")
}

pub fn normal_id(k: usize) -> String {
    format!("normal/{k:03}.png")
}

pub fn anomaly_id(k: usize) -> String {
    format!("anomaly/{k:03}.png")
}

/// Main-Q indices (1-based) violated by anomaly `a`.
pub fn violated(a: usize) -> Vec<usize> {
    let mut v = vec![a % 5 + 1];
    if a >= 5 {
        v.push((a + 2) % 5 + 1);
    }
    v.sort_unstable();
    v
}

const DESCRIPTIONS: [&str; 3] = [
    "The box has two compartments. On the left are two tangerines and one nectarine. On the right, cereal fills the upper part and a mix of banana chips and almonds fills the lower part.",
    "A white tray with fruit on the left side: two orange tangerines beside a red-yellow nectarine. The right side holds oat cereal above dried banana chips mixed with almonds.",
    "Left compartment: two tangerines, one nectarine. Right compartment: cereal at the top, banana chips and almonds below. Nothing crosses between the two sides.",
];

const SUMMARY: &str = "A normal breakfast box holds two tangerines and one nectarine in its left compartment. The right compartment has cereal in its upper part and banana chips mixed with almonds in its lower part. Fruit never appears on the right and cereal or nuts never appear on the left.";

fn generation_reply() -> String {
    let mut out = String::from("Here are the questions:\n");
    for (i, (q, _)) in DEMO_QUESTIONS.iter().enumerate() {
        out.push_str(&format!("(Q{}) : {q}\n", i + 1));
    }
    out.push_str(&format!("(Q6) : {BIASED_QUESTION}\n"));
    // a repeat of Q1 differing only in case and spacing
    out.push_str("(Q7) : does the left compartment hold  exactly two tangerines?\n");
    out
}

fn variations(subs: &[&str]) -> String {
    subs.iter()
        .enumerate()
        .map(|(k, s)| format!("Output{}: {s}", k + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Every reply the demo pipeline asks for, keyed as the mock backend
/// expects.
pub fn demo_fixtures() -> BTreeMap<String, FixtureEntry> {
    let mut f = BTreeMap::new();

    for k in 0..TRAIN {
        let text = DESCRIPTIONS[k % DESCRIPTIONS.len()].to_string();
        f.insert(key(PromptRole::Describe, &train_id(k), "", 0), plain(text));
    }
    f.insert(key(PromptRole::Summarize, "-", "", 0), plain(SUMMARY.to_string()));
    f.insert(key(PromptRole::GenerateMain, "-", "", 0), plain(generation_reply()));

    for (q, subs) in DEMO_QUESTIONS.iter() {
        f.insert(key(PromptRole::AugmentSub, "-", q, 0), plain(variations(subs)));
    }
    let short = [
        "Is the breakfast box lid shut?",
        "Is the cover of the box closed?",
        "Has the lid been closed over the box?",
        "Is the box covered by its lid?",
    ];
    f.insert(key(PromptRole::AugmentSub, "-", BIASED_QUESTION, 0), plain(variations(&short)));

    // filtering: validation images are normal, answered with the Main-Q
    for (q, _) in DEMO_QUESTIONS.iter() {
        f.insert(
            key(PromptRole::Test, "*", q, 0),
            answer("The box looks as expected.", true, -0.02, false),
        );
    }
    f.insert(
        key(PromptRole::Test, "*", BIASED_QUESTION, 0),
        answer("The box is open and its contents are visible.", false, -0.05, false),
    );
    f.insert(
        key(PromptRole::Test, &train_id(4), DEMO_QUESTIONS[1].0, 0),
        answer("The nectarine is partly hidden behind a tangerine.", false, -0.7, false),
    );

    for n in 0..NORMAL {
        let id = normal_id(n);
        for (i, (_, subs)) in DEMO_QUESTIONS.iter().enumerate() {
            for (j, sub) in subs.iter().enumerate() {
                let lp = -(0.005 + 0.003 * ((n + i + j) % 7) as f64);
                let split = (n + j) % 4 == 0;
                let entry = answer("Everything matches the expected layout.", true, lp, split);
                f.insert(key(PromptRole::Test, &id, sub, 0), entry);
            }
        }
    }
    let sub = |i: usize, j: usize| DEMO_QUESTIONS[i - 1].1[j - 1];
    // one dissenting paraphrase; the Main-Q still passes 4 to 1
    f.insert(
        key(PromptRole::Test, &normal_id(3), sub(2, 4), 0),
        answer("The fruit on the left is hard to tell apart.", false, -0.9, false),
    );
    // unparseable, then answered on the re-query
    f.insert(key(PromptRole::Test, &normal_id(5), sub(4, 2), 0), unparsed());
    f.insert(
        key(PromptRole::Test, &normal_id(5), sub(4, 2), 1),
        answer("Banana chips and almonds fill the lower right.", true, -0.01, false),
    );
    // unparseable on both attempts; excluded from the vote
    f.insert(key(PromptRole::Test, &normal_id(7), sub(1, 5), 0), unparsed());

    for a in 0..ANOMALY {
        let id = anomaly_id(a);
        let bad = violated(a);
        for (i, (_, subs)) in DEMO_QUESTIONS.iter().enumerate() {
            for (j, s) in subs.iter().enumerate() {
                let entry = if bad.contains(&(i + 1)) {
                    if a % 3 == 0 && j == 4 {
                        answer("It might be fine.", true, -1.2, false)
                    } else {
                        let lp = -(0.02 + 0.01 * ((a + j) % 5) as f64);
                        answer("This part of the box does not match.", false, lp, j % 2 == 1)
                    }
                } else {
                    let lp = -(0.01 + 0.004 * ((a + i + j) % 6) as f64);
                    answer("This part of the box looks normal.", true, lp, false)
                };
                f.insert(key(PromptRole::Test, &id, s, 0), entry);
            }
        }
    }
    // a tied vote, two Yes against two No with one silent paraphrase
    let tied = violated(8)[0];
    for (j, s) in DEMO_QUESTIONS[tied - 1].1.iter().enumerate() {
        let entry = match j {
            0 | 1 => answer("Looks right at first glance.", true, -0.4, false),
            2 | 3 => answer("Something is missing here.", false, -0.03, false),
            _ => unparsed(),
        };
        f.insert(key(PromptRole::Test, &anomaly_id(8), s, 0), entry);
    }
    f
}

/// Image files of the demo dataset, relative to the category directory.
/// The bytes are placeholders; only their identity matters to the mock.
pub fn demo_images() -> Vec<(String, Vec<u8>)> {
    let ids = (0..TRAIN)
        .map(train_id)
        .chain((0..NORMAL).map(normal_id))
        .chain((0..ANOMALY).map(anomaly_id));
    ids.map(|id| {
        let bytes = format!("logicqa demo image {id}\n").into_bytes();
        (id, bytes)
    })
    .collect()
}

/// Config for the scenario with paths relative to the scenario directory.
pub fn demo_config() -> RunConfig {
    RunConfig {
        dataset: DatasetConfig {
            root: PathBuf::from("data"),
            category: DEMO_CATEGORY.to_string(),
            layout: Layout::Flat,
            subclass_map: None,
        },
        backend: BackendConfig {
            kind: BackendKind::Mock,
            fixtures: Some(PathBuf::from("fixtures.json")),
            endpoint: None,
            timeout_secs: None,
            max_retries: None,
            model: "demo-model".to_string(),
            temperature: 1.0,
            top_p: None,
            max_tokens: 1024,
            want_logprobs: true,
        },
        profile: None,
        templates: None,
        seed: 7,
        seed_policy: SeedPolicy::PerRun,
        parallelism: 8,
        filter: FilterConfig::default(),
        runs: 3,
        cache_dir: Some(PathBuf::from("cache")),
        out_dir: PathBuf::from("out"),
        preprocess_manifest: None,
    }
}

/// Writes dataset, fixtures and `config.json` under `dir`; returns the
/// config path.
pub fn write_demo(dir: &Path) -> Result<PathBuf> {
    let base = dir.join("data").join(DEMO_CATEGORY);
    for (id, bytes) in demo_images() {
        let path = base.join(&id);
        let parent = path.parent().expect("image ids have a directory");
        fs::create_dir_all(parent).at_path(parent)?;
        fs::write(&path, bytes).at_path(&path)?;
    }
    let fixtures = dir.join("fixtures.json");
    let text = serde_json::to_string_pretty(&demo_fixtures())? + "\n";
    fs::write(&fixtures, text).at_path(&fixtures)?;
    let config = dir.join("config.json");
    fs::write(&config, demo_config().to_json()?).at_path(&config)?;
    Ok(config)
}
