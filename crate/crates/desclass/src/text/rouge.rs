//! ROUGE-L in its F-measure form, used to pick supervision targets for the
//! extractive policy's ROUGE-L initialization.

use super::TextError;

/// Longest common subsequence length via the usual 1-D rolling DP.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let n = b.len();
    let mut dp = vec![0usize; n + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let tmp = dp[j + 1];
            if x == y {
                dp[j + 1] = prev + 1;
            } else {
                dp[j + 1] = dp[j + 1].max(dp[j]);
            }
            prev = tmp;
        }
    }
    dp[n]
}

/// F = 2PR / (P + R) with P = lcs/|candidate|, R = lcs/|reference|;
/// 0 when the LCS is empty. The reference must be non-empty.
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> Result<f64, TextError> {
    if reference.is_empty() {
        return Err(TextError::EmptyReference);
    }
    let lcs = lcs_length(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Exhaustive oracle: the longest subsequence of `a` that is also a
/// subsequence of `b`, found by enumerating all 2^|a| subsequences.
/// Test-side ground truth for [`lcs_length`]; quadratic-DP-free on purpose.
pub fn lcs_oracle_exhaustive(a: &[usize], b: &[usize]) -> usize {
    fn is_subsequence(needle: &[usize], hay: &[usize]) -> bool {
        let mut it = hay.iter();
        needle.iter().all(|n| it.any(|h| h == n))
    }
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<usize> = a
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, &v)| v)
            .collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_score_one() {
        let s = vec![1, 2, 3, 4];
        assert_eq!(rouge_l(&s, &s).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_sequences_score_zero() {
        assert_eq!(rouge_l(&[1, 2], &[3, 4, 5]).unwrap(), 0.0);
    }

    #[test]
    fn partial_overlap_hand_case() {
        // cand=[a,c], ref=[a,b,c]: lcs=2, P=1, R=2/3, F=0.8
        let f = rouge_l(&[10, 12], &[10, 11, 12]).unwrap();
        assert!((f - 0.8).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(matches!(rouge_l(&[1], &[]), Err(TextError::EmptyReference)));
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(rouge_l(&[], &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn dp_matches_exhaustive_oracle_on_short_strings() {
        // All pairs over a 3-symbol alphabet with both lengths <= 5.
        let mut seqs: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=5usize {
            let count = 3usize.pow(len as u32);
            for code in 0..count {
                let mut s = Vec::with_capacity(len);
                let mut c = code;
                for _ in 0..len {
                    s.push(c % 3);
                    c /= 3;
                }
                seqs.push(s);
            }
        }
        for a in &seqs {
            for b in &seqs {
                assert_eq!(
                    lcs_length(a, b),
                    lcs_oracle_exhaustive(a, b),
                    "a={a:?} b={b:?}"
                );
            }
        }
    }
}
