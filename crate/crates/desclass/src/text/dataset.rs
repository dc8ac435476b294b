//! JSONL dataset ingestion. One record per line:
//! `{"id": "...", "text": "...", "labels": ["name", ...]}`
//! with label names validated against a label-space file
//! `{"n": N, "names": [...], "task_kind": "single_label" | "multi_label"}`.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use super::vocab::{TokenSeq, Vocab};
use super::TextError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

/// Class inventory for a task.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LabelSpace {
    pub n: usize,
    pub names: Vec<String>,
    pub task_kind: TaskKind,
}

impl LabelSpace {
    pub fn new(names: Vec<String>, task_kind: TaskKind) -> Result<Self, TextError> {
        if names.len() < 2 {
            return Err(TextError::TooFewClasses(names.len()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(TextError::DuplicateClass(n.clone()));
            }
        }
        Ok(LabelSpace { n: names.len(), names, task_kind })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

pub fn load_label_space(path: &Path) -> Result<LabelSpace, TextError> {
    let f = std::fs::File::open(path)?;
    let ls: LabelSpace = serde_json::from_reader(std::io::BufReader::new(f))?;
    if ls.n != ls.names.len() {
        return Err(TextError::Malformed {
            line: 0,
            msg: format!("label space says n={} but lists {} names", ls.n, ls.names.len()),
        });
    }
    LabelSpace::new(ls.names, ls.task_kind)
}

/// One classification instance. Labels are 0-based class indices; exactly
/// one for single-label tasks, one or more for multi-label tasks.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub tokens: TokenSeq,
    pub labels: BTreeSet<usize>,
}

impl Example {
    pub fn retokenize(&mut self, vocab: &Vocab) {
        self.tokens = vocab.tokenize(&self.text);
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    labels: Vec<String>,
}

/// Parse a JSONL dataset, validating labels against the label space and
/// preserving record order. Tokens are left empty until a vocabulary
/// exists; call [`Example::retokenize`] (the harness does).
pub fn load_dataset(path: &Path, label_space: &LabelSpace) -> Result<Vec<Example>, TextError> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| TextError::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(example_from_raw(raw, label_space)?);
    }
    Ok(out)
}

fn example_from_raw(raw: RawRecord, label_space: &LabelSpace) -> Result<Example, TextError> {
    let mut labels = BTreeSet::new();
    for name in &raw.labels {
        let idx = label_space
            .index_of(name)
            .ok_or_else(|| TextError::UnknownLabel { record: raw.id.clone(), label: name.clone() })?;
        labels.insert(idx);
    }
    match label_space.task_kind {
        TaskKind::SingleLabel if labels.len() != 1 => {
            return Err(TextError::LabelCount { record: raw.id, count: labels.len() })
        }
        TaskKind::MultiLabel if labels.is_empty() => {
            return Err(TextError::LabelCount { record: raw.id, count: 0 })
        }
        _ => {}
    }
    Ok(Example { id: raw.id, text: raw.text, tokens: Vec::new(), labels })
}

/// Serialize examples back to JSONL (inverse of [`load_dataset`]).
pub fn save_dataset(
    path: &Path,
    examples: &[Example],
    label_space: &LabelSpace,
) -> Result<(), TextError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for ex in examples {
        let raw = RawRecord {
            id: ex.id.clone(),
            text: ex.text.clone(),
            labels: ex.labels.iter().map(|&i| label_space.names[i].clone()).collect(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(kind: TaskKind) -> LabelSpace {
        LabelSpace::new(vec!["pos".into(), "neg".into(), "neu".into()], kind).unwrap()
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn single_record_parses() {
        let f = write_lines(&[r#"{"id":"1","text":"good","labels":["pos"]}"#]);
        let ex = load_dataset(f.path(), &space(TaskKind::SingleLabel)).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].id, "1");
        assert_eq!(ex[0].labels.iter().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn multi_label_keeps_both() {
        let f = write_lines(&[r#"{"id":"1","text":"x","labels":["pos","neg"]}"#]);
        let ex = load_dataset(f.path(), &space(TaskKind::MultiLabel)).unwrap();
        assert_eq!(ex[0].labels.len(), 2);
    }

    #[test]
    fn two_labels_under_single_label_fails() {
        let f = write_lines(&[r#"{"id":"1","text":"x","labels":["pos","neg"]}"#]);
        let err = load_dataset(f.path(), &space(TaskKind::SingleLabel)).unwrap_err();
        assert!(matches!(err, TextError::LabelCount { count: 2, .. }));
    }

    #[test]
    fn unknown_label_names_the_record() {
        let f = write_lines(&[r#"{"id":"r7","text":"x","labels":["mystery"]}"#]);
        let err = load_dataset(f.path(), &space(TaskKind::SingleLabel)).unwrap_err();
        match err {
            TextError::UnknownLabel { record, label } => {
                assert_eq!(record, "r7");
                assert_eq!(label, "mystery");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[
            r#"{"id":"1","text":"ok","labels":["pos"]}"#,
            r#"{"id":"2", broken"#,
        ]);
        let err = load_dataset(f.path(), &space(TaskKind::SingleLabel)).unwrap_err();
        assert!(matches!(err, TextError::Malformed { line: 2, .. }));
    }

    #[test]
    fn load_save_load_is_identity() {
        let ls = space(TaskKind::MultiLabel);
        let f = write_lines(&[
            r#"{"id":"1","text":"good stuff","labels":["pos"]}"#,
            r#"{"id":"2","text":"bad and neutral","labels":["neg","neu"]}"#,
        ]);
        let first = load_dataset(f.path(), &ls).unwrap();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        save_dataset(tmp.path(), &first, &ls).unwrap();
        let second = load_dataset(tmp.path(), &ls).unwrap();
        assert_eq!(first.len(), second.len());
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.text, b.text);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn label_space_rejects_duplicates_and_small_n() {
        assert!(matches!(
            LabelSpace::new(vec!["a".into()], TaskKind::SingleLabel),
            Err(TextError::TooFewClasses(1))
        ));
        assert!(matches!(
            LabelSpace::new(vec!["a".into(), "a".into()], TaskKind::SingleLabel),
            Err(TextError::DuplicateClass(_))
        ));
    }
}
