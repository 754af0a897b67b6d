//! ROUGE-1/2/L scoring over token sequences.
//!
//! Inputs are pre-tokenized (the corpus is already lowercased and
//! normalized), so there is no stemming, stopword removal, or any other
//! text munging here. An empty candidate or reference yields all-zero
//! scores. F1 uses beta = 1.

use std::collections::HashMap;

/// Precision/recall/F1 triple for one (candidate, reference) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScores {
    fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScores { precision, recall, f1 }
    }
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut map = HashMap::new();
    if n == 0 || tokens.len() < n {
        return map;
    }
    for window in tokens.windows(n) {
        *map.entry(window).or_insert(0) += 1;
    }
    map
}

/// ROUGE-N with clipped n-gram overlap counts (multiplicity-aware).
///
/// `precision = overlap / |candidate n-grams|`,
/// `recall = overlap / |reference n-grams|`.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> RougeScores {
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);

    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refr.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return RougeScores::default();
    }

    let mut overlap = 0usize;
    for (gram, &c) in &cand {
        if let Some(&r) = refr.get(gram) {
            overlap += c.min(r);
        }
    }

    RougeScores::from_pr(
        overlap as f64 / cand_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

/// Length of the longest common subsequence, two-row DP.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return 0;
    }
    let mut prev = vec![0usize; m + 1];
    let mut curr = vec![0usize; m + 1];
    for i in 1..=n {
        for j in 1..=m {
            if a[i - 1] == b[j - 1] {
                curr[j] = prev[j - 1] + 1;
            } else {
                curr[j] = prev[j].max(curr[j - 1]);
            }
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// Summary-level ROUGE-L: LCS over the whole token stream.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> RougeScores {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScores::default();
    }
    let l = lcs_len(candidate, reference) as f64;
    RougeScores::from_pr(l / candidate.len() as f64, l / reference.len() as f64)
}

/// ROUGE-1 F1, the flavor used by the decoding-time credit.
pub fn rouge_1_f1(candidate: &[String], reference: &[String]) -> f64 {
    rouge_n(candidate, reference, 1).f1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn identical_sequences_score_one() {
        let t = toks("a b c d");
        for n in 1..=2 {
            let s = rouge_n(&t, &t, n);
            assert_eq!(s.f1, 1.0);
        }
        assert_eq!(rouge_l(&t, &t).f1, 1.0);
    }

    #[test]
    fn disjoint_vocabularies_score_zero() {
        let a = toks("a b c");
        let b = toks("x y z");
        assert_eq!(rouge_n(&a, &b, 1).f1, 0.0);
        assert_eq!(rouge_n(&a, &b, 2).f1, 0.0);
        assert_eq!(rouge_l(&a, &b).f1, 0.0);
    }

    #[test]
    fn unigram_hand_case() {
        // candidate "the cat sat" vs reference "the cat": overlap 2,
        // P = 2/3, R = 1, F1 = 0.8.
        let s = rouge_n(&toks("the cat sat"), &toks("the cat"), 1);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 1.0).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn lcs_hand_case() {
        // "a b c d" vs "a c d b": LCS "a c d" of length 3, P = R = F1 = 0.75.
        let s = rouge_l(&toks("a b c d"), &toks("a c d b"));
        assert!((s.precision - 0.75).abs() < 1e-12);
        assert!((s.recall - 0.75).abs() < 1e-12);
        assert!((s.f1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_sides_are_zero() {
        let t = toks("a b");
        let e: Vec<String> = vec![];
        assert_eq!(rouge_n(&e, &t, 1), RougeScores::default());
        assert_eq!(rouge_n(&t, &e, 1), RougeScores::default());
        assert_eq!(rouge_l(&e, &t), RougeScores::default());
    }

    /// Brute-force LCS: enumerate all subsequences of the shorter side and
    /// check containment in the longer side.
    fn lcs_brute(a: &[String], b: &[String]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0usize;
        for mask in 0u32..(1 << short.len()) {
            let sub: Vec<&String> =
                (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
            if sub.len() <= best {
                continue;
            }
            let mut it = long.iter();
            if sub.iter().all(|s| it.any(|t| t == *s)) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn dp_lcs_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alphabet = ["a", "b", "c", "d"];
        for _ in 0..500 {
            let la = rng.random_range(0..=10);
            let lb = rng.random_range(0..=10);
            let a: Vec<String> =
                (0..la).map(|_| alphabet[rng.random_range(0..alphabet.len())].to_owned()).collect();
            let b: Vec<String> =
                (0..lb).map(|_| alphabet[rng.random_range(0..alphabet.len())].to_owned()).collect();
            assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b), "a={a:?} b={b:?}");
        }
    }

    #[test]
    fn f1_symmetry_for_rouge_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alphabet = ["a", "b", "c", "d", "e"];
        for _ in 0..200 {
            let la = rng.random_range(0..=8);
            let lb = rng.random_range(0..=8);
            let a: Vec<String> =
                (0..la).map(|_| alphabet[rng.random_range(0..alphabet.len())].to_owned()).collect();
            let b: Vec<String> =
                (0..lb).map(|_| alphabet[rng.random_range(0..alphabet.len())].to_owned()).collect();
            for n in 1..=2 {
                let ab = rouge_n(&a, &b, n);
                let ba = rouge_n(&b, &a, n);
                assert!((ab.f1 - ba.f1).abs() < 1e-12);
                assert!((ab.precision - ba.recall).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn appending_reference_token_never_decreases_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let alphabet = ["a", "b", "c"];
        for _ in 0..200 {
            let lc = rng.random_range(0..=6);
            let lr = rng.random_range(1..=6);
            let mut cand: Vec<String> =
                (0..lc).map(|_| alphabet[rng.random_range(0..alphabet.len())].to_owned()).collect();
            let refr: Vec<String> =
                (0..lr).map(|_| alphabet[rng.random_range(0..alphabet.len())].to_owned()).collect();
            let before = rouge_n(&cand, &refr, 1).recall;
            cand.push(refr[rng.random_range(0..refr.len())].clone());
            let after = rouge_n(&cand, &refr, 1).recall;
            assert!(after >= before - 1e-12);
        }
    }
}
