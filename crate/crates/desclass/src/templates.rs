//! Template description registry. Four variants: bare label indexes
//! ("one", "two", ...), per-class keywords, keyword + synonym expansions,
//! and encyclopedia-style definitions supplied from a file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::text::{LabelSpace, TokenSeq, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("registry is missing an entry for class '{0}'")]
    MissingClass(String),
    #[error("registry entry for class '{0}' is empty")]
    EmptyEntry(String),
    #[error("variant {0:?} requires a registry file")]
    FileRequired(TemplateVariant),
    #[error("class index {index} out of range for {n} classes")]
    OutOfRange { index: usize, n: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateVariant {
    LabelIndex,
    Keyword,
    KeywordExpansion,
    WikiFile,
}

/// Where a description came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Template,
    ExtractedSpan { start: usize, end: usize },
    Generated,
}

impl Provenance {
    pub fn label(&self) -> &'static str {
        match self {
            Provenance::Template => "template",
            Provenance::ExtractedSpan { .. } => "extracted_span",
            Provenance::Generated => "generated",
        }
    }
}

/// A class description ready for packing.
#[derive(Clone, Debug, PartialEq)]
pub struct Description {
    pub tokens: TokenSeq,
    pub provenance: Provenance,
}

/// One template per class, tokenized against the run vocabulary.
#[derive(Clone, Debug)]
pub struct TemplateRegistry {
    pub variant: TemplateVariant,
    entries: Vec<Description>,
    raw: Vec<String>,
}

/// Raw registry text before a vocabulary exists: the harness feeds these
/// strings into vocabulary building so template words are in-vocab.
#[derive(Clone, Debug)]
pub struct RawRegistry {
    pub variant: TemplateVariant,
    pub per_class: Vec<String>,
}

impl RawRegistry {
    /// Read per-class description strings. `LabelIndex` is synthesized;
    /// `Keyword`/`WikiFile` read a JSON map class name -> string;
    /// `KeywordExpansion` reads class name -> array of words and joins them.
    pub fn read(
        variant: TemplateVariant,
        path: Option<&Path>,
        label_space: &LabelSpace,
    ) -> Result<Self, TemplateError> {
        let per_class = match variant {
            TemplateVariant::LabelIndex => {
                (1..=label_space.n).map(number_word).collect::<Vec<_>>()
            }
            TemplateVariant::Keyword | TemplateVariant::WikiFile => {
                let path = path.ok_or(TemplateError::FileRequired(variant))?;
                let f = std::fs::File::open(path)?;
                let map: BTreeMap<String, String> =
                    serde_json::from_reader(std::io::BufReader::new(f))?;
                collect_per_class(&label_space.names, |name| map.get(name).cloned())?
            }
            TemplateVariant::KeywordExpansion => {
                let path = path.ok_or(TemplateError::FileRequired(variant))?;
                let f = std::fs::File::open(path)?;
                let map: BTreeMap<String, Vec<String>> =
                    serde_json::from_reader(std::io::BufReader::new(f))?;
                collect_per_class(&label_space.names, |name| {
                    map.get(name).map(|words| words.join(" "))
                })?
            }
        };
        for (name, entry) in label_space.names.iter().zip(&per_class) {
            if entry.trim().is_empty() {
                return Err(TemplateError::EmptyEntry(name.clone()));
            }
        }
        Ok(RawRegistry { variant, per_class })
    }

    pub fn build(&self, vocab: &Vocab, label_space: &LabelSpace) -> Result<TemplateRegistry, TemplateError> {
        let mut entries = Vec::with_capacity(self.per_class.len());
        for (name, text) in label_space.names.iter().zip(&self.per_class) {
            let tokens = vocab.tokenize(text);
            if tokens.is_empty() {
                return Err(TemplateError::EmptyEntry(name.clone()));
            }
            entries.push(Description { tokens, provenance: Provenance::Template });
        }
        Ok(TemplateRegistry { variant: self.variant, entries, raw: self.per_class.clone() })
    }
}

/// Read + tokenize in one step.
pub fn load_registry(
    variant: TemplateVariant,
    path: Option<&Path>,
    label_space: &LabelSpace,
    vocab: &Vocab,
) -> Result<TemplateRegistry, TemplateError> {
    RawRegistry::read(variant, path, label_space)?.build(vocab, label_space)
}

impl TemplateRegistry {
    pub fn n_classes(&self) -> usize {
        self.entries.len()
    }

    /// The class template, provenance `Template`. Stable across calls.
    pub fn get(&self, class: usize) -> Result<&Description, TemplateError> {
        self.entries
            .get(class)
            .ok_or(TemplateError::OutOfRange { index: class, n: self.entries.len() })
    }

    pub fn get_tokens(&self, class: usize) -> Result<&TokenSeq, TemplateError> {
        Ok(&self.get(class)?.tokens)
    }

    pub fn raw_text(&self, class: usize) -> &str {
        &self.raw[class]
    }

    pub fn all_tokens(&self) -> Vec<TokenSeq> {
        self.entries.iter().map(|d| d.tokens.clone()).collect()
    }
}

fn collect_per_class<G>(names: &[String], get: G) -> Result<Vec<String>, TemplateError>
where
    G: Fn(&str) -> Option<String>,
{
    names
        .iter()
        .map(|name| get(name).ok_or_else(|| TemplateError::MissingClass(name.clone())))
        .collect()
}

/// English number word for a 1-based class index.
fn number_word(n: usize) -> String {
    const ONES: [&str; 20] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
        "eighteen", "nineteen",
    ];
    const TENS: [&str; 10] = [
        "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
    ];
    match n {
        0..=19 => ONES[n].to_string(),
        20..=99 => {
            let t = TENS[n / 10];
            if n % 10 == 0 {
                t.to_string()
            } else {
                format!("{t} {}", ONES[n % 10])
            }
        }
        _ => n.to_string(),
    }
}
