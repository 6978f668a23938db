//! Rule-based PII detection.
//!
//! Entities come from three sources:
//!
//! 1. per-label gazetteers (case-sensitive, whole-word matches),
//! 2. case-insensitive regexes for e-mail addresses, phone numbers, URLs
//!    with credentials, and for the numeric labels (`CARDINAL`, `ORDINAL`,
//!    `DATE`) so that they can be recognised and then excluded,
//! 3. a capitalised-bigram rule tagging `First Last` as `PERSON` when the
//!    words appear in the first-name and last-name lists.
//!
//! Overlapping candidates are resolved longest-first *before* the label
//! policy is applied, so excluding a label can only remove spans.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use aho_corasick::AhoCorasick;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Entity labels: the OntoNotes 5 taxonomy plus pattern-based PII types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Person,
    Norp,
    Fac,
    Org,
    Gpe,
    Loc,
    Product,
    Event,
    WorkOfArt,
    Law,
    Language,
    Date,
    Time,
    Percent,
    Money,
    Quantity,
    Ordinal,
    Cardinal,
    Email,
    Phone,
    Url,
}

impl Label {
    pub const ALL: [Label; 21] = [
        Label::Person,
        Label::Norp,
        Label::Fac,
        Label::Org,
        Label::Gpe,
        Label::Loc,
        Label::Product,
        Label::Event,
        Label::WorkOfArt,
        Label::Law,
        Label::Language,
        Label::Date,
        Label::Time,
        Label::Percent,
        Label::Money,
        Label::Quantity,
        Label::Ordinal,
        Label::Cardinal,
        Label::Email,
        Label::Phone,
        Label::Url,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Person => "PERSON",
            Label::Norp => "NORP",
            Label::Fac => "FAC",
            Label::Org => "ORG",
            Label::Gpe => "GPE",
            Label::Loc => "LOC",
            Label::Product => "PRODUCT",
            Label::Event => "EVENT",
            Label::WorkOfArt => "WORK_OF_ART",
            Label::Law => "LAW",
            Label::Language => "LANGUAGE",
            Label::Date => "DATE",
            Label::Time => "TIME",
            Label::Percent => "PERCENT",
            Label::Money => "MONEY",
            Label::Quantity => "QUANTITY",
            Label::Ordinal => "ORDINAL",
            Label::Cardinal => "CARDINAL",
            Label::Email => "EMAIL",
            Label::Phone => "PHONE",
            Label::Url => "URL",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown entity label {s:?}")))
    }
}

/// Labels that are recognised but not counted as PII.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPolicy {
    pub excluded: BTreeSet<Label>,
}

impl Default for LabelPolicy {
    fn default() -> Self {
        Self {
            excluded: [Label::Cardinal, Label::Date, Label::Product, Label::Ordinal]
                .into_iter()
                .collect(),
        }
    }
}

impl LabelPolicy {
    pub fn none() -> Self {
        Self {
            excluded: BTreeSet::new(),
        }
    }

    pub fn excluding(labels: impl IntoIterator<Item = Label>) -> Self {
        Self {
            excluded: labels.into_iter().collect(),
        }
    }

    /// Parses a comma-separated label list such as `CARDINAL,DATE`.
    pub fn parse_list(list: &str) -> Result<Self> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Label::from_str)
            .collect::<Result<BTreeSet<_>>>()
            .map(|excluded| Self { excluded })
    }

    pub fn is_excluded(&self, label: Label) -> bool {
        self.excluded.contains(&label)
    }

    pub fn to_list(&self) -> String {
        self.excluded
            .iter()
            .map(|l| l.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// A detected entity. `start`/`end` are half-open character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiSpan {
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub surface: String,
    #[serde(skip)]
    pub byte_start: usize,
    #[serde(skip)]
    pub byte_end: usize,
}

/// Candidate source, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Source {
    Gazetteer,
    NameBigram,
    Pattern,
}

#[derive(Debug, Clone)]
struct Candidate {
    start: usize,
    end: usize,
    chars: usize,
    label: Label,
    source: Source,
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct PiiDetector {
    matcher: Option<AhoCorasick>,
    pattern_labels: Vec<Label>,
    first_names: HashSet<String>,
    last_names: HashSet<String>,
    patterns: Vec<(Label, Regex)>,
    word: Regex,
    policy: LabelPolicy,
}

const FIRST_NAME_FILE: &str = "FIRST_NAME";
const LAST_NAME_FILE: &str = "LAST_NAME";

const MONTH: &str = "jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?";

fn builtin_patterns() -> Vec<(Label, Regex)> {
    let date = format!(
        r"\b(?:(?:{MONTH})\.?\s+\d{{1,2}}(?:st|nd|rd|th)?(?:,?\s+\d{{4}})?|\d{{1,2}}(?:st|nd|rd|th)?\s+(?:of\s+)?(?:{MONTH})(?:,?\s+\d{{4}})?|\d{{4}}-\d{{2}}-\d{{2}}|\d{{1,2}}/\d{{1,2}}/\d{{2,4}})\b"
    );
    let specs: Vec<(Label, String)> = vec![
        (
            Label::Url,
            r"\b[a-z][a-z0-9+.-]*://[^\s/@:]+(?::[^\s/@]*)?@[a-z0-9.-]+(?::\d+)?(?:/[^\s]*)?".into(),
        ),
        (
            Label::Email,
            r"\b[a-z0-9._%+-]+@[a-z0-9-]+(?:\.[a-z0-9-]+)*\.[a-z]{2,}\b".into(),
        ),
        (
            Label::Phone,
            r"(?:\+\d{1,3}[\s.-]?)?(?:\(\d{3}\)\s?|\b\d{3}[\s.-]?)\d{3}[\s.-]?\d{4}\b".into(),
        ),
        (Label::Date, date),
        (
            Label::Ordinal,
            r"\b(?:\d+(?:st|nd|rd|th)|first|second|third|fourth|fifth|sixth|seventh|eighth|ninth|tenth)\b"
                .into(),
        ),
        (Label::Cardinal, r"\b\d+(?:[.,]\d+)*\b".into()),
    ];
    specs
        .into_iter()
        .map(|(label, pat)| {
            let re = RegexBuilder::new(&pat)
                .case_insensitive(true)
                .build()
                .expect("built-in PII pattern compiles");
            (label, re)
        })
        .collect()
}

#[derive(Debug, Default, Clone)]
pub struct DetectorBuilder {
    gazetteers: Vec<(Label, Vec<String>)>,
    first_names: HashSet<String>,
    last_names: HashSet<String>,
    policy: LabelPolicy,
}

impl DetectorBuilder {
    pub fn gazetteer<I, S>(mut self, label: Label, terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.gazetteers
            .push((label, terms.into_iter().map(Into::into).collect()));
        self
    }

    pub fn first_names<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.first_names.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn last_names<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.last_names.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn policy(mut self, policy: LabelPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn build(self) -> Result<PiiDetector> {
        let mut terms = Vec::new();
        let mut labels = Vec::new();
        for (label, list) in self.gazetteers {
            for term in list {
                let term = term.trim().to_string();
                if !term.is_empty() {
                    terms.push(term);
                    labels.push(label);
                }
            }
        }
        let matcher = if terms.is_empty() {
            None
        } else {
            Some(AhoCorasick::new(&terms).map_err(|e| Error::Config(e.to_string()))?)
        };
        Ok(PiiDetector {
            matcher,
            pattern_labels: labels,
            first_names: self.first_names,
            last_names: self.last_names,
            patterns: builtin_patterns(),
            word: Regex::new(r"[\p{L}][\p{L}'-]*").expect("word pattern compiles"),
            policy: self.policy,
        })
    }
}

fn read_terms(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(char::is_alphanumeric)
}

impl PiiDetector {
    pub fn builder() -> DetectorBuilder {
        DetectorBuilder::default()
    }

    /// A detector with no gazetteers (patterns only).
    pub fn patterns_only(policy: LabelPolicy) -> Self {
        Self::builder()
            .policy(policy)
            .build()
            .expect("pattern-only detector builds")
    }

    /// Loads `<LABEL>.txt` gazetteers plus optional `FIRST_NAME.txt` and
    /// `LAST_NAME.txt` from `dir`. Files are read in name order.
    pub fn from_dir(dir: impl AsRef<Path>, policy: LabelPolicy) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "gazetteer directory {} does not exist",
                dir.display()
            )));
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        paths.sort();

        let mut builder = Self::builder().policy(policy);
        for path in paths {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let terms = read_terms(&path)?;
            builder = match stem.as_str() {
                FIRST_NAME_FILE => builder.first_names(terms),
                LAST_NAME_FILE => builder.last_names(terms),
                other => {
                    let label = other.parse::<Label>().map_err(|_| {
                        Error::Config(format!(
                            "gazetteer file {} does not name a known label",
                            path.display()
                        ))
                    })?;
                    builder.gazetteer(label, terms)
                }
            };
        }
        builder.build()
    }

    pub fn policy(&self) -> &LabelPolicy {
        &self.policy
    }

    pub fn with_policy(&self, policy: LabelPolicy) -> Self {
        Self {
            policy,
            ..self.clone()
        }
    }

    /// PII spans under the detector's own policy.
    pub fn detect(&self, text: &str) -> Vec<PiiSpan> {
        self.detect_with(text, &self.policy)
    }

    /// PII spans under `policy`: non-overlapping, sorted by start.
    pub fn detect_with(&self, text: &str, policy: &LabelPolicy) -> Vec<PiiSpan> {
        self.entities(text)
            .into_iter()
            .filter(|s| !policy.is_excluded(s.label))
            .collect()
    }

    pub fn count(&self, text: &str) -> usize {
        self.detect(text).len()
    }

    pub fn count_with(&self, text: &str, policy: &LabelPolicy) -> usize {
        self.detect_with(text, policy).len()
    }

    /// All recognised entities, including excluded labels, after overlap
    /// resolution.
    pub fn entities(&self, text: &str) -> Vec<PiiSpan> {
        if text.is_empty() {
            return Vec::new();
        }
        let mut candidates = self.candidates(text);
        candidates.sort_by(|a, b| {
            b.chars
                .cmp(&a.chars)
                .then(a.start.cmp(&b.start))
                .then(a.source.cmp(&b.source))
                .then(a.label.cmp(&b.label))
        });
        let mut accepted: Vec<Candidate> = Vec::new();
        for c in candidates {
            if accepted.iter().all(|a| c.end <= a.start || c.start >= a.end) {
                accepted.push(c);
            }
        }
        accepted.sort_by_key(|c| c.start);

        let mut spans = Vec::with_capacity(accepted.len());
        let mut char_pos = 0;
        let mut byte_pos = 0;
        for c in accepted {
            char_pos += text[byte_pos..c.start].chars().count();
            let start = char_pos;
            let end = start + c.chars;
            char_pos = end;
            byte_pos = c.end;
            spans.push(PiiSpan {
                start,
                end,
                label: c.label,
                surface: text[c.start..c.end].to_string(),
                byte_start: c.start,
                byte_end: c.end,
            });
        }
        spans
    }

    fn candidates(&self, text: &str) -> Vec<Candidate> {
        let mut out = Vec::new();
        let mut push = |start: usize, end: usize, label: Label, source: Source| {
            out.push(Candidate {
                start,
                end,
                chars: text[start..end].chars().count(),
                label,
                source,
            });
        };

        if let Some(matcher) = &self.matcher {
            for m in matcher.find_overlapping_iter(text) {
                let before = text[..m.start()].chars().next_back();
                let after = text[m.end()..].chars().next();
                if !is_word_char(before) && !is_word_char(after) {
                    push(
                        m.start(),
                        m.end(),
                        self.pattern_labels[m.pattern().as_usize()],
                        Source::Gazetteer,
                    );
                }
            }
        }

        if !self.first_names.is_empty() && !self.last_names.is_empty() {
            let words: Vec<_> = self.word.find_iter(text).collect();
            for pair in words.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let gap = &text[a.end()..b.start()];
                let capitalised = |s: &str| s.chars().next().is_some_and(char::is_uppercase);
                if !gap.is_empty()
                    && gap.chars().all(|c| c == ' ')
                    && capitalised(a.as_str())
                    && capitalised(b.as_str())
                    && self.first_names.contains(a.as_str())
                    && self.last_names.contains(b.as_str())
                {
                    push(a.start(), b.end(), Label::Person, Source::NameBigram);
                }
            }
        }

        for (label, re) in &self.patterns {
            for m in re.find_iter(text) {
                push(m.start(), m.end(), *label, Source::Pattern);
            }
        }
        out
    }
}
