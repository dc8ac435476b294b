//! Token vocabulary with a fixed reserved prefix: control tokens, one
//! [CLSn] per class for the multiclass packing, and one [DUMn] per class
//! for the extractive policy's no-span fallback.

use std::collections::BTreeMap;

use super::TextError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
const FIXED_RESERVED: usize = 6;

/// Token ids into a [`Vocab`].
pub type TokenSeq = Vec<usize>;

/// Bijective token <-> id map. Ids `0..reserved_len()` are the reserved
/// prefix; class count is fixed at build time.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, usize>,
    n_classes: usize,
}

impl Vocab {
    /// Reserved-only vocabulary for `n_classes` classes.
    pub fn reserved(n_classes: usize) -> Self {
        assert!(n_classes >= 2, "need at least 2 classes, got {n_classes}");
        let mut id_to_token = vec![
            "[PAD]".to_string(),
            "[UNK]".to_string(),
            "[CLS]".to_string(),
            "[SEP]".to_string(),
            "[BOS]".to_string(),
            "[EOS]".to_string(),
        ];
        for n in 1..=n_classes {
            id_to_token.push(format!("[CLS{n}]"));
        }
        for n in 1..=n_classes {
            id_to_token.push(format!("[DUM{n}]"));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { id_to_token, token_to_id, n_classes }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn reserved_len(&self) -> usize {
        FIXED_RESERVED + 2 * self.n_classes
    }

    /// Id of [CLSn] for a 0-based class index.
    pub fn cls_n(&self, class: usize) -> usize {
        assert!(class < self.n_classes, "class {class} out of {}", self.n_classes);
        FIXED_RESERVED + class
    }

    /// Id of [DUMn] for a 0-based class index.
    pub fn dum_n(&self, class: usize) -> usize {
        assert!(class < self.n_classes, "class {class} out of {}", self.n_classes);
        FIXED_RESERVED + self.n_classes + class
    }

    pub fn is_dummy_id(&self, id: usize) -> bool {
        (FIXED_RESERVED + self.n_classes..FIXED_RESERVED + 2 * self.n_classes).contains(&id)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    fn push_token(&mut self, token: String) {
        let id = self.id_to_token.len();
        let prev = self.token_to_id.insert(token.clone(), id);
        assert!(prev.is_none(), "duplicate token '{token}'");
        self.id_to_token.push(token);
    }

    /// Lowercase, split on whitespace, and break punctuation into single
    /// tokens. Unknown words map to [UNK]; empty text maps to [].
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        split_words(text)
            .into_iter()
            .map(|w| self.id_of(&w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token_of(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TextError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TextError> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Lowercased word/punctuation split shared by tokenize and vocab building.
pub(crate) fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() || ch == '\'' {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Frequency-ordered vocabulary: tokens seen at least `min_freq` times,
/// most frequent first, ties broken lexicographically, truncated to
/// `max_size` corpus tokens after the reserved prefix. Deterministic for
/// any input order of an identical multiset.
pub fn build_vocab<'a, I>(
    texts: I,
    n_classes: usize,
    min_freq: usize,
    max_size: usize,
) -> Result<Vocab, TextError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut saw_any = false;
    for text in texts {
        saw_any = true;
        for w in split_words(text) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    if !saw_any {
        return Err(TextError::EmptyCorpus);
    }
    let mut entries: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(max_size);
    let mut vocab = Vocab::reserved(n_classes);
    for (token, _) in entries {
        vocab.push_token(token);
    }
    Ok(vocab)
}

/// `[DUM1..DUMN] ++ tokens`. The prose around the dummy mechanism says
/// "append", but every worked example leads the text with the dummies;
/// leading placement also keeps span windows free of dummy positions.
pub fn prepend_dummies(tokens: &TokenSeq, vocab: &Vocab) -> Result<TokenSeq, TextError> {
    if tokens.first().is_some_and(|&t| vocab.is_dummy_id(t)) {
        return Err(TextError::DummyPrefixPresent);
    }
    let n = vocab.n_classes();
    let mut out = Vec::with_capacity(n + tokens.len());
    for c in 0..n {
        out.push(vocab.dum_n(c));
    }
    out.extend_from_slice(tokens);
    Ok(out)
}
