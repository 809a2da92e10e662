//! Prompt templates and rendering.
//!
//! Templates are JSON lines. `pattern` uses the placeholders `{Premise}`,
//! `{Hypothesis}`, `{Sentence 1}`, `{Sentence 2}` and `{Context}` plus one
//! `[Label]` slot. Cause-effect templates carry an `effect_pattern` used
//! when the example's `question` is `effect`. A template with a `blank`
//! has no `[Label]` slot; the candidate replaces the blank inside the
//! context instead. `verbalizers: null` is the identity verbalizer: the
//! candidates are the example's own choices.
//!
//! ```text
//! {"name":"xnli-en","task":"xnli","language":"en","kind":"nli",
//!  "pattern":"{Premise}, right? [Label], {Hypothesis}","verbalizers":["Yes","No","Also"]}
//! ```

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::data::{Lexicon, TaskExample, TaskKind};

pub const LABEL_SLOT: &str = "[Label]";

/// The templates shipped with the crate.
pub const BUILTIN_TEMPLATES: &str = include_str!("../../data/templates.jsonl");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub name: String,
    pub task: String,
    pub language: String,
    pub kind: TaskKind,
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effect_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blank: Option<String>,
    /// Label words in class order; `None` is the identity verbalizer.
    pub verbalizers: Option<Vec<String>>,
}

/// Placeholder and the example fields it may read, in preference order.
const PLACEHOLDERS: [(&str, &[&str]); 5] = [
    ("{Premise}", &["premise"]),
    ("{Hypothesis}", &["hypothesis"]),
    ("{Sentence 1}", &["sentence1", "premise"]),
    ("{Sentence 2}", &["sentence2"]),
    ("{Context}", &["context"]),
];

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| EvalError::Template {
            name: self.name.clone(),
            message,
        };
        let patterns = std::iter::once(&self.pattern).chain(self.effect_pattern.as_ref());
        for p in patterns {
            let slots = p.matches(LABEL_SLOT).count();
            match (&self.blank, slots) {
                (Some(_), 0) => {}
                (Some(_), _) => return Err(bad("a blank template must not contain [Label]".into())),
                (None, 1) => {}
                (None, n) => return Err(bad(format!("pattern must contain [Label] once, found {n}"))),
            }
        }
        if self.kind == TaskKind::CauseEffect && self.effect_pattern.is_none() {
            return Err(bad("cause-effect templates need an effect_pattern".into()));
        }
        match (&self.verbalizers, self.kind.fixed_classes()) {
            (Some(v), Some(n)) if v.len() != n => Err(bad(format!(
                "{} verbalizers for a {}-class task",
                v.len(),
                n
            ))),
            (None, Some(_)) => Err(bad("fixed-class tasks need verbalizers".into())),
            (Some(_), None) => Err(bad("choice tasks use the identity verbalizer".into())),
            _ => Ok(()),
        }
    }

    /// Candidate strings for `[Label]`, in class order.
    pub fn candidates<'a>(&'a self, example: &'a TaskExample) -> &'a [String] {
        match &self.verbalizers {
            Some(v) => v,
            None => &example.choices,
        }
    }

    fn pattern_for(&self, example: &TaskExample) -> Result<&str> {
        if self.kind != TaskKind::CauseEffect {
            return Ok(&self.pattern);
        }
        match example.field("question") {
            Some("cause") => Ok(&self.pattern),
            Some("effect") => Ok(self.effect_pattern.as_deref().unwrap_or(&self.pattern)),
            Some(other) => Err(EvalError::Render(format!("question must be cause or effect, got {other:?}"))),
            None => Err(EvalError::MissingField("question".into())),
        }
    }

    fn fill(&self, pattern: &str, example: &TaskExample) -> Result<String> {
        let mut out = pattern.to_string();
        for (ph, fields) in PLACEHOLDERS {
            if !out.contains(ph) {
                continue;
            }
            let value = fields
                .iter()
                .find_map(|f| example.field(f))
                .ok_or_else(|| EvalError::MissingField(fields[0].to_string()))?;
            out = out.replace(ph, value);
        }
        Ok(out)
    }

    /// The rendered text split at the label slot: the part before the
    /// candidate, and the candidate with everything after it.
    pub fn render_parts(&self, example: &TaskExample, label: usize) -> Result<(String, String)> {
        let candidates = self.candidates(example);
        let candidate = candidates.get(label).ok_or_else(|| {
            EvalError::Render(format!(
                "label {label} out of range for {} candidates",
                candidates.len()
            ))
        })?;
        let filled = self.fill(self.pattern_for(example)?, example)?;
        let (slot, text) = match &self.blank {
            Some(blank) => (blank.as_str(), filled),
            None => (LABEL_SLOT, filled),
        };
        let at = text
            .find(slot)
            .ok_or_else(|| EvalError::Render(format!("rendered text has no `{slot}` to fill")))?;
        let prefix = text[..at].to_string();
        let rest = format!("{candidate}{}", &text[at + slot.len()..]);
        Ok((prefix, rest))
    }

    pub fn render(&self, example: &TaskExample, label: usize) -> Result<String> {
        let (prefix, rest) = self.render_parts(example, label)?;
        Ok(prefix + &rest)
    }
}

/// Parses line-delimited template records; blank lines are skipped.
pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: PromptTemplate = serde_json::from_str(line).map_err(|e| EvalError::Template {
            name: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn builtin_templates() -> Vec<PromptTemplate> {
    parse_templates(BUILTIN_TEMPLATES).expect("built-in templates are valid")
}

pub fn find_template<'a>(templates: &'a [PromptTemplate], name: &str) -> Option<&'a PromptTemplate> {
    templates.iter().find(|t| t.name == name)
}

/// Templates for the synthetic toy tasks in language A or B, built from
/// the lexicon's function words in the same shapes as the NLI, paraphrase
/// and cause-effect templates above.
pub fn synthetic_templates(lex: &Lexicon, lang_b: bool) -> Vec<PromptTemplate> {
    let w = |s: &str| lex.word(s, lang_b);
    let language = if lang_b { crate::data::LANG_B } else { crate::data::LANG_A }.to_string();
    let right = w(&lex.right);
    vec![
        PromptTemplate {
            name: format!("toy-nli-{language}"),
            task: "toy-nli".into(),
            language: language.clone(),
            kind: TaskKind::Nli,
            pattern: format!("{{Premise}}, {right}? [Label], {{Hypothesis}}"),
            effect_pattern: None,
            blank: None,
            verbalizers: Some(vec![w(&lex.yes), w(&lex.no), w(&lex.also)]),
        },
        PromptTemplate {
            name: format!("toy-paraphrase-{language}"),
            task: "toy-paraphrase".into(),
            language: language.clone(),
            kind: TaskKind::Paraphrase,
            pattern: format!("{{Sentence 1}}, {right}? [Label], {{Sentence 2}}"),
            effect_pattern: None,
            blank: None,
            verbalizers: Some(vec![w(&lex.yes), w(&lex.no)]),
        },
        PromptTemplate {
            name: format!("toy-cause-{language}"),
            task: "toy-cause".into(),
            language: language.clone(),
            kind: TaskKind::CauseEffect,
            pattern: format!("{{Sentence 1}} {} [Label]", w(&lex.because)),
            effect_pattern: Some(format!("{{Sentence 1}} {} [Label]", w(&lex.so))),
            blank: None,
            verbalizers: None,
        },
    ]
}
