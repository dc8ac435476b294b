//! Sequence packing for the two classifier formulations. Truncation always
//! sacrifices text before descriptions: the description is the task
//! definition, the text tail is merely evidence.

use crate::text::{TokenSeq, Vocab};
use crate::text::vocab::{CLS, SEP};

use super::{EncoderConfig, EncoderError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PackLayout {
    /// `[CLS] q_y [SEP] x`; `cls_position` is always 0.
    Binary { cls_position: usize },
    /// `[CLS1] q_1 ... [CLSN] q_N [SEP] x` with the [CLSn] indices recorded.
    Multiclass { cls_positions: Vec<usize> },
    /// `[CLS] x` for the description-free baseline.
    Plain { cls_position: usize },
}

#[derive(Clone, Debug)]
pub struct PackedInput {
    pub ids: TokenSeq,
    /// 0 for the description side (and specials), 1 for the text side.
    pub segments: Vec<usize>,
    pub layout: PackLayout,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[CLS] q_y [SEP] x`, text truncated from the right when over-length.
pub fn pack_binary(
    desc: &[usize],
    text: &[usize],
    cfg: &EncoderConfig,
) -> Result<PackedInput, EncoderError> {
    let overhead = 2; // [CLS], [SEP]
    if desc.len() + overhead > cfg.max_len {
        return Err(EncoderError::DescriptionTooLong {
            desc: desc.len(),
            max_len: cfg.max_len,
        });
    }
    let keep = (cfg.max_len - overhead - desc.len()).min(text.len());
    let mut ids = Vec::with_capacity(overhead + desc.len() + keep);
    ids.push(CLS);
    ids.extend_from_slice(desc);
    ids.push(SEP);
    let desc_side = ids.len();
    ids.extend_from_slice(&text[..keep]);
    let mut segments = vec![0; desc_side];
    segments.extend(std::iter::repeat(1).take(keep));
    Ok(PackedInput { ids, segments, layout: PackLayout::Binary { cls_position: 0 } })
}

/// `[CLS1] q_1 ... [CLSN] q_N [SEP] x`. Over-length input drops text tokens
/// first, then shortens descriptions proportionally (never below 1 token).
pub fn pack_multiclass(
    descs: &[TokenSeq],
    text: &[usize],
    vocab: &Vocab,
    cfg: &EncoderConfig,
) -> Result<PackedInput, EncoderError> {
    let n = descs.len();
    assert!(n >= 2, "multiclass packing needs >= 2 descriptions");
    let overhead = n + 1; // [CLSn] markers + [SEP]
    if overhead + n > cfg.max_len {
        return Err(EncoderError::DescriptionsDontFit { n, max_len: cfg.max_len });
    }
    let desc_total: usize = descs.iter().map(|d| d.len().max(1)).sum();
    let budget = cfg.max_len - overhead;
    let (desc_lens, text_keep) = if desc_total + text.len() <= budget {
        (descs.iter().map(|d| d.len().max(1)).collect::<Vec<_>>(), text.len())
    } else if desc_total <= budget {
        // text truncated from the right, descriptions intact
        (descs.iter().map(|d| d.len().max(1)).collect::<Vec<_>>(), budget - desc_total)
    } else {
        // no room for text at all; scale descriptions down proportionally
        let target = budget;
        let mut lens: Vec<usize> = descs
            .iter()
            .map(|d| {
                let scaled = (d.len() * target) / desc_total;
                scaled.clamp(1, d.len().max(1))
            })
            .collect();
        // trim any remaining overflow from the longest descriptions
        let mut total: usize = lens.iter().sum();
        while total > target {
            let (idx, _) = lens
                .iter()
                .enumerate()
                .max_by_key(|(i, &l)| (l, usize::MAX - i))
                .unwrap();
            if lens[idx] == 1 {
                return Err(EncoderError::DescriptionsDontFit { n, max_len: cfg.max_len });
            }
            lens[idx] -= 1;
            total -= 1;
        }
        (lens, 0)
    };

    let mut ids = Vec::new();
    let mut cls_positions = Vec::with_capacity(n);
    for (c, desc) in descs.iter().enumerate() {
        cls_positions.push(ids.len());
        ids.push(vocab.cls_n(c));
        let take = desc_lens[c].min(desc.len());
        ids.extend_from_slice(&desc[..take]);
        if desc.is_empty() {
            // a placeholder keeps every class at >= 1 description token
            ids.push(crate::text::vocab::UNK);
        }
    }
    ids.push(SEP);
    let desc_side = ids.len();
    ids.extend_from_slice(&text[..text_keep]);
    let mut segments = vec![0; desc_side];
    segments.extend(std::iter::repeat(1).take(text_keep));
    Ok(PackedInput { ids, segments, layout: PackLayout::Multiclass { cls_positions } })
}

/// `[CLS] x` for the description-free baseline head.
pub fn pack_plain(text: &[usize], cfg: &EncoderConfig) -> PackedInput {
    let keep = (cfg.max_len - 1).min(text.len());
    let mut ids = Vec::with_capacity(1 + keep);
    ids.push(CLS);
    ids.extend_from_slice(&text[..keep]);
    let mut segments = vec![0];
    segments.extend(std::iter::repeat(1).take(keep));
    PackedInput { ids, segments, layout: PackLayout::Plain { cls_position: 0 } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_vocab;

    fn cfg(max_len: usize) -> EncoderConfig {
        EncoderConfig { max_len, vocab_size: 64, ..Default::default() }
    }

    #[test]
    fn binary_layout_and_segments() {
        let v = build_vocab(["good movie"], 2, 1, 10).unwrap();
        let q = v.tokenize("good");
        let x = v.tokenize("movie");
        let p = pack_binary(&q, &x, &cfg(16)).unwrap();
        assert_eq!(p.ids, vec![CLS, q[0], SEP, x[0]]);
        assert_eq!(p.segments, vec![0, 0, 0, 1]);
        assert_eq!(p.layout, PackLayout::Binary { cls_position: 0 });
    }

    #[test]
    fn binary_empty_description_degenerates() {
        let v = build_vocab(["movie"], 2, 1, 10).unwrap();
        let x = v.tokenize("movie");
        let p = pack_binary(&[], &x, &cfg(16)).unwrap();
        assert_eq!(p.ids, vec![CLS, SEP, x[0]]);
    }

    #[test]
    fn binary_truncates_text_not_description() {
        let v = build_vocab(["a b c d e f g h q r"], 2, 1, 20).unwrap();
        let q = v.tokenize("q r");
        let x = v.tokenize("a b c d e f g h");
        let p = pack_binary(&q, &x, &cfg(8)).unwrap();
        // 8 = 2 specials + 2 desc + 4 text
        assert_eq!(p.len(), 8);
        assert_eq!(&p.ids[1..3], &q[..]);
        assert_eq!(&p.ids[4..], &x[..4]);
    }

    #[test]
    fn binary_rejects_oversized_description() {
        let v = build_vocab(["a b c d e"], 2, 1, 10).unwrap();
        let q = v.tokenize("a b c d e");
        let err = pack_binary(&q, &[], &cfg(4)).unwrap_err();
        assert!(matches!(err, EncoderError::DescriptionTooLong { .. }));
    }

    #[test]
    fn multiclass_layout_records_cls_positions() {
        let v = build_vocab(["a b t"], 2, 1, 10).unwrap();
        let d1 = v.tokenize("a");
        let d2 = v.tokenize("b");
        let x = v.tokenize("t");
        let p = pack_multiclass(&[d1.clone(), d2.clone()], &x, &v, &cfg(16)).unwrap();
        assert_eq!(
            p.ids,
            vec![v.cls_n(0), d1[0], v.cls_n(1), d2[0], SEP, x[0]]
        );
        assert_eq!(p.layout, PackLayout::Multiclass { cls_positions: vec![0, 2] });
        assert_eq!(p.segments, vec![0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn multiclass_truncates_only_text_when_descs_fit() {
        let v = build_vocab(["a b t u v w x y z"], 2, 1, 20).unwrap();
        let d1 = v.tokenize("a");
        let d2 = v.tokenize("b");
        let x = v.tokenize("t u v w x y z");
        let p = pack_multiclass(&[d1.clone(), d2.clone()], &x, &v, &cfg(9)).unwrap();
        // overhead 3 + descs 2 -> 4 text tokens
        assert_eq!(p.len(), 9);
        assert_eq!(&p.ids[..5], &[v.cls_n(0), d1[0], v.cls_n(1), d2[0], SEP]);
        assert_eq!(&p.ids[5..], &x[..4]);
    }

    #[test]
    fn multiclass_shortens_descriptions_proportionally() {
        let v = build_vocab(["a b c d e f g h"], 2, 1, 20).unwrap();
        let d1 = v.tokenize("a b c d e f");
        let d2 = v.tokenize("g h");
        let p = pack_multiclass(&[d1, d2], &[], &v, &cfg(7)).unwrap();
        // budget 4 after [CLS1][CLS2][SEP]: both descriptions survive with
        // at least one token
        assert_eq!(p.len(), 7);
        let n_markers = p.ids.iter().filter(|&&i| i == v.cls_n(0) || i == v.cls_n(1)).count();
        assert_eq!(n_markers, 2);
    }

    #[test]
    fn multiclass_rejects_impossible_fit() {
        let v = build_vocab(["a b"], 3, 1, 10).unwrap();
        let descs = vec![v.tokenize("a"), v.tokenize("b"), v.tokenize("a")];
        let err = pack_multiclass(&descs, &[], &v, &cfg(5)).unwrap_err();
        assert!(matches!(err, EncoderError::DescriptionsDontFit { n: 3, .. }));
    }

    #[test]
    fn plain_pack_prepends_cls_only() {
        let v = build_vocab(["t u"], 2, 1, 10).unwrap();
        let x = v.tokenize("t u");
        let p = pack_plain(&x, &cfg(16));
        assert_eq!(p.ids[0], CLS);
        assert_eq!(&p.ids[1..], &x[..]);
    }
}
