//! Vocabulary, tokenization, datasets, and the ROUGE-L metric.

mod dataset;
mod rouge;
pub mod vocab;

pub use dataset::{load_dataset, load_label_space, save_dataset, Example, LabelSpace, TaskKind};
pub use rouge::{lcs_length, lcs_oracle_exhaustive, rouge_l};
pub use vocab::{build_vocab, prepend_dummies, TokenSeq, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("record {record}: unknown label '{label}'")]
    UnknownLabel { record: String, label: String },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("record {record}: single-label task but {count} labels given")]
    LabelCount { record: String, count: usize },
    #[error("ROUGE-L reference must be non-empty")]
    EmptyReference,
    #[error("token sequence already carries a dummy prefix")]
    DummyPrefixPresent,
    #[error("label space needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("duplicate class name '{0}'")]
    DuplicateClass(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
