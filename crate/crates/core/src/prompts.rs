//! Prompt templates and per-class normality profiles.
//!
//! Templates are plain UTF-8 files with `{Placeholder}` markers. The five
//! built-in templates ship under `templates/` and are compiled in; a directory
//! holding files of the same names can replace them at run time.
//!
//! Substitution is a single left-to-right pass: inserted values are never
//! scanned for further placeholders.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

const DESCRIBE: &str = include_str!("../templates/describe.txt");
const SUMMARIZE: &str = include_str!("../templates/summarize.txt");
const GENERATE: &str = include_str!("../templates/generate.txt");
const AUGMENT: &str = include_str!("../templates/augment.txt");
const TEST: &str = include_str!("../templates/test.txt");

const BUILTIN_PROFILES: &[(&str, &str)] = &[
    ("breakfast_box", include_str!("../profiles/breakfast_box.json")),
    ("juice_bottle", include_str!("../profiles/juice_bottle.json")),
    ("pushpins", include_str!("../profiles/pushpins.json")),
    ("screw_bag", include_str!("../profiles/screw_bag.json")),
    ("sem_wafer", include_str!("../profiles/sem_wafer.json")),
    ("splicing_connectors", include_str!("../profiles/splicing_connectors.json")),
];

const TEST_QUESTION_PREFIX: &str = "Question : ";
const TEST_QUESTION_SUFFIX: &str = "\nAt first, describe ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Describe,
    Summarize,
    GenerateMain,
    AugmentSub,
    Test,
}

impl PromptRole {
    pub const ALL: [PromptRole; 5] = [
        PromptRole::Describe,
        PromptRole::Summarize,
        PromptRole::GenerateMain,
        PromptRole::AugmentSub,
        PromptRole::Test,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptRole::Describe => "describe.txt",
            PromptRole::Summarize => "summarize.txt",
            PromptRole::GenerateMain => "generate.txt",
            PromptRole::AugmentSub => "augment.txt",
            PromptRole::Test => "test.txt",
        }
    }

    /// Short name used in request tags and fixture keys.
    pub fn tag(self) -> &'static str {
        match self {
            PromptRole::Describe => "describe",
            PromptRole::Summarize => "summarize",
            PromptRole::GenerateMain => "generate",
            PromptRole::AugmentSub => "augment",
            PromptRole::Test => "test",
        }
    }

    fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptRole::Describe => &["Class", "Normal Definition"],
            PromptRole::Summarize => &[
                "Class",
                "Class Title",
                "Description 1",
                "Description 2",
                "Description 3",
            ],
            PromptRole::GenerateMain => &["Class", "Summary Description", "Normal Definition"],
            PromptRole::AugmentSub => &["Question"],
            PromptRole::Test => &["Question", "Class"],
        }
    }
}

/// Which preprocessing a class benefits from before querying.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessPolicy {
    #[serde(default)]
    pub background_mask: bool,
    #[serde(default)]
    pub object_crops: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_name: String,
    pub normality_definition: Vec<String>,
    /// Replacement normality lines keyed by subclass (cable colour, fruit).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subclass_variants: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation_prompt: Option<String>,
    #[serde(default)]
    pub preprocess: PreprocessPolicy,
}

impl ClassProfile {
    pub fn validate(&self) -> Result<()> {
        if self.class_name.trim().is_empty() {
            return Err(Error::Template("class name is empty".into()));
        }
        if self.normality_definition.iter().all(|l| l.trim().is_empty()) {
            return Err(Error::Template(format!(
                "normality definition for `{}` is empty",
                self.class_name
            )));
        }
        for (k, lines) in &self.subclass_variants {
            if lines.iter().all(|l| l.trim().is_empty()) {
                return Err(Error::Template(format!("subclass variant `{k}` is empty")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at_path(path)?;
        let p: ClassProfile = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }

    /// Looks up a bundled profile by key (`breakfast_box`) or class name
    /// (`breakfast box`).
    pub fn builtin(name: &str) -> Option<Self> {
        let key = name.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        BUILTIN_PROFILES
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, text)| serde_json::from_str(text).expect("bundled profile parses"))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_PROFILES.iter().map(|(k, _)| *k)
    }

    /// Normality lines for a subclass, falling back to the base definition
    /// when the subclass has no variant.
    pub fn normality_for(&self, subclass: Option<&str>) -> &[String] {
        subclass
            .and_then(|s| self.subclass_variants.get(s))
            .map(Vec::as_slice)
            .unwrap_or(&self.normality_definition)
    }
}

fn normality_block(lines: &[String]) -> String {
    lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            if l.starts_with("- ") {
                l.to_string()
            } else {
                format!("- {l}")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_placeholder_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == ' ')
}

/// Placeholder names appearing in a template body, in order.
fn placeholders_in(body: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                out.push(&after[..close]);
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

fn substitute(body: &str, bindings: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(body.len() + 256);
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                let name = &after[..close];
                let value = bindings
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Template(format!("unbound placeholder {{{name}}}")))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn non_empty<'a>(what: &str, s: &'a str) -> Result<&'a str> {
    if s.trim().is_empty() {
        Err(Error::Template(format!("{what} is empty")))
    } else {
        Ok(s)
    }
}

/// The five prompt templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    bodies: BTreeMap<PromptRole, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        let bodies = [
            (PromptRole::Describe, DESCRIBE),
            (PromptRole::Summarize, SUMMARIZE),
            (PromptRole::GenerateMain, GENERATE),
            (PromptRole::AugmentSub, AUGMENT),
            (PromptRole::Test, TEST),
        ]
        .into_iter()
        .map(|(r, b)| (r, strip_final_newline(b).to_string()))
        .collect();
        Templates { bodies }
    }

    /// Loads templates from a directory. Missing files keep the built-in
    /// wording; present files must only use their role's placeholders.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::builtin();
        for role in PromptRole::ALL {
            let path = dir.join(role.file_name());
            if path.is_file() {
                let body = fs::read_to_string(&path).at_path(&path)?;
                t = t.with_body(role, strip_final_newline(&body))?;
            }
        }
        Ok(t)
    }

    pub fn with_body(mut self, role: PromptRole, body: &str) -> Result<Self> {
        for name in placeholders_in(body) {
            if !role.placeholders().contains(&name) {
                return Err(Error::Template(format!(
                    "placeholder {{{name}}} is not available in the {} template",
                    role.tag()
                )));
            }
        }
        self.bodies.insert(role, body.to_string());
        Ok(self)
    }

    pub fn body(&self, role: PromptRole) -> &str {
        &self.bodies[&role]
    }

    pub fn render_describe(&self, profile: &ClassProfile, subclass: Option<&str>) -> Result<String> {
        profile.validate()?;
        let normality = normality_block(profile.normality_for(subclass));
        substitute(
            self.body(PromptRole::Describe),
            &[("Class", &profile.class_name), ("Normal Definition", &normality)],
        )
    }

    pub fn render_summarize(&self, class_name: &str, descriptions: &[String]) -> Result<String> {
        non_empty("class name", class_name)?;
        if descriptions.len() != 3 {
            return Err(Error::Arity {
                what: "descriptions",
                expected: 3,
                got: descriptions.len(),
            });
        }
        for d in descriptions {
            non_empty("description", d)?;
        }
        let title = title_case(class_name);
        substitute(
            self.body(PromptRole::Summarize),
            &[
                ("Class", class_name),
                ("Class Title", &title),
                ("Description 1", descriptions[0].trim()),
                ("Description 2", descriptions[1].trim()),
                ("Description 3", descriptions[2].trim()),
            ],
        )
    }

    pub fn render_generate(
        &self,
        summary: &str,
        profile: &ClassProfile,
        subclass: Option<&str>,
    ) -> Result<String> {
        profile.validate()?;
        let summary = non_empty("summary", summary)?.trim();
        let normality = normality_block(profile.normality_for(subclass));
        substitute(
            self.body(PromptRole::GenerateMain),
            &[
                ("Class", &profile.class_name),
                ("Summary Description", summary),
                ("Normal Definition", &normality),
            ],
        )
    }

    pub fn render_augment(&self, question: &str) -> Result<String> {
        let q = non_empty("question", question)?.trim();
        substitute(self.body(PromptRole::AugmentSub), &[("Question", q)])
    }

    pub fn render_test(&self, question: &str, class_name: &str) -> Result<String> {
        let q = non_empty("question", question)?.trim();
        let c = non_empty("class name", class_name)?;
        substitute(self.body(PromptRole::Test), &[("Question", q), ("Class", c)])
    }
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix("\r\n")
        .or_else(|| s.strip_suffix('\n'))
        .unwrap_or(s)
}

/// Recovers the question from a prompt rendered with the built-in test
/// template.
pub fn extract_test_question(rendered: &str) -> Option<&str> {
    let start = rendered.find(TEST_QUESTION_PREFIX)? + TEST_QUESTION_PREFIX.len();
    let len = rendered[start..].rfind(TEST_QUESTION_SUFFIX)?;
    Some(&rendered[start..start + len])
}
