//! Extractive reference systems: LEAD, greedy Oracle, TextRank.

use std::collections::HashMap;

use crate::rouge::rouge_n;

/// Sentences selected from a body, in document order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractiveSummary {
    /// Strictly increasing indices into the body sentence list.
    pub sentence_indices: Vec<usize>,
    /// The selected sentences' tokens, concatenated in document order.
    pub text: Vec<String>,
}

fn summary_from_indices(body: &[Vec<String>], indices: Vec<usize>) -> ExtractiveSummary {
    let text = indices.iter().flat_map(|&i| body[i].iter().cloned()).collect();
    ExtractiveSummary { sentence_indices: indices, text }
}

/// First `min(ref_sentence_count, |body|)` sentences.
pub fn lead(body: &[Vec<String>], ref_sentence_count: usize) -> ExtractiveSummary {
    let n = ref_sentence_count.min(body.len());
    summary_from_indices(body, (0..n).collect())
}

/// Greedy oracle: repeatedly add the sentence with the largest gain in the
/// mean of ROUGE-1 and ROUGE-2 F1 against the reference; stop when no
/// sentence has positive gain or `max_sentences` are selected.
pub fn oracle_greedy(
    body: &[Vec<String>],
    reference: &[String],
    max_sentences: usize,
) -> ExtractiveSummary {
    let mut selected: Vec<usize> = Vec::new();
    let mut current = 0.0f64;

    let score_of = |indices: &[usize]| -> f64 {
        let cand: Vec<String> = indices.iter().flat_map(|&i| body[i].iter().cloned()).collect();
        (rouge_n(&cand, reference, 1).f1 + rouge_n(&cand, reference, 2).f1) / 2.0
    };

    while selected.len() < max_sentences {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..body.len() {
            if selected.contains(&i) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(i);
            trial.sort_unstable();
            let gain = score_of(&trial) - current;
            // Strict improvement; earlier sentence wins ties.
            if gain > best.map_or(0.0, |(_, g)| g) {
                best = Some((i, gain));
            }
        }
        match best {
            Some((i, gain)) if gain > 0.0 => {
                selected.push(i);
                selected.sort_unstable();
                current += gain;
            }
            _ => break,
        }
    }
    summary_from_indices(body, selected)
}

fn unigram_counts(sentence: &[String]) -> HashMap<&String, f64> {
    let mut m = HashMap::new();
    for t in sentence {
        *m.entry(t).or_insert(0.0) += 1.0;
    }
    m
}

/// Cosine similarity over unigram count vectors, with a zero-norm guard.
fn cosine(a: &HashMap<&String, f64>, b: &HashMap<&String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(t, &ca)| b.get(t).map(|&cb| ca * cb))
        .sum();
    let na: f64 = a.values().map(|c| c * c).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|c| c * c).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

const TEXTRANK_DAMPING: f64 = 0.85;
const TEXTRANK_TOL: f64 = 1e-6;
const TEXTRANK_MAX_ITERS: usize = 100;

/// Stationary TextRank scores, normalized to sum to `|body|`. Sentences
/// with no similarity edges distribute their rank mass uniformly.
pub fn textrank_scores(body: &[Vec<String>]) -> Vec<f64> {
    let n = body.len();
    if n == 0 {
        return Vec::new();
    }
    let counts: Vec<HashMap<&String, f64>> = body.iter().map(|s| unigram_counts(s)).collect();
    let mut sim = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let w = cosine(&counts[i], &counts[j]);
            sim[i][j] = w;
            sim[j][i] = w;
        }
    }
    let col_sum: Vec<f64> = (0..n).map(|j| (0..n).map(|i| sim[i][j]).sum()).collect();

    let mut rank = vec![1.0 / n as f64; n];
    for _ in 0..TEXTRANK_MAX_ITERS {
        let dangling: f64 =
            (0..n).filter(|&j| col_sum[j] == 0.0).map(|j| rank[j]).sum();
        let mut next = vec![0.0f64; n];
        for (i, ni) in next.iter_mut().enumerate() {
            let mut flow = 0.0;
            for j in 0..n {
                if col_sum[j] > 0.0 {
                    flow += sim[i][j] / col_sum[j] * rank[j];
                }
            }
            *ni = (1.0 - TEXTRANK_DAMPING) / n as f64
                + TEXTRANK_DAMPING * (flow + dangling / n as f64);
        }
        let delta = rank
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        rank = next;
        if delta < TEXTRANK_TOL {
            break;
        }
    }
    rank.iter().map(|r| r * n as f64).collect()
}

/// TextRank extraction: top `select_count` sentences by stationary score
/// (ties favor the earlier sentence), output in document order.
pub fn textrank(body: &[Vec<String>], select_count: usize) -> ExtractiveSummary {
    let scores = textrank_scores(body);
    let mut order: Vec<usize> = (0..body.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(select_count).collect();
    chosen.sort_unstable();
    summary_from_indices(body, chosen)
}

/// Truncate a body to at most `budget` tokens, keeping whole sentences.
pub fn truncate_body(body: &[Vec<String>], budget: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut used = 0usize;
    for s in body {
        if used + s.len() > budget {
            break;
        }
        used += s.len();
        out.push(s.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rouge::rouge_n as rn;

    fn sents(raw: &[&str]) -> Vec<Vec<String>> {
        raw.iter().map(|s| s.split_whitespace().map(str::to_owned).collect()).collect()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn lead_takes_first_sentences() {
        let body = sents(&["a b", "c d", "e f", "g h"]);
        let s = lead(&body, 3);
        assert_eq!(s.sentence_indices, vec![0, 1, 2]);
        assert_eq!(s.text, toks("a b c d e f"));
    }

    #[test]
    fn lead_truncates_and_handles_empty() {
        let body = sents(&["a b", "c d"]);
        assert_eq!(lead(&body, 5).sentence_indices, vec![0, 1]);
        assert_eq!(lead(&[], 3), ExtractiveSummary::default());
    }

    #[test]
    fn oracle_picks_exact_match_first() {
        let body = sents(&["x y z", "the exact reference sentence", "q r"]);
        let refr = toks("the exact reference sentence");
        let s = oracle_greedy(&body, &refr, 3);
        assert_eq!(s.sentence_indices[0], 1);
        assert_eq!(s.sentence_indices.len(), 1, "no further positive gain");
    }

    #[test]
    fn oracle_empty_when_disjoint() {
        let body = sents(&["a b", "c d"]);
        let refr = toks("x y z");
        assert!(oracle_greedy(&body, &refr, 2).sentence_indices.is_empty());
    }

    #[test]
    fn oracle_trace_matches_step_by_step_recomputation() {
        // Six-sentence toy document; re-evaluate every candidate at every
        // step with an independent loop and compare selections.
        let body = sents(&[
            "graph neural networks for text",
            "we propose a summarization model",
            "results show strong performance",
            "the model uses copy attention",
            "experiments on citation data",
            "we propose copy attention for graphs",
        ]);
        let refr = toks("we propose a copy attention summarization model for citation graphs");
        let got = oracle_greedy(&body, &refr, 4);

        let mut selected: Vec<usize> = Vec::new();
        loop {
            if selected.len() == 4 {
                break;
            }
            let score = |idx: &[usize]| {
                let cand: Vec<String> =
                    idx.iter().flat_map(|&i| body[i].iter().cloned()).collect();
                (rn(&cand, &refr, 1).f1 + rn(&cand, &refr, 2).f1) / 2.0
            };
            let cur = score(&selected);
            let mut best: Option<(usize, f64)> = None;
            for i in 0..body.len() {
                if selected.contains(&i) {
                    continue;
                }
                let mut t = selected.clone();
                t.push(i);
                t.sort_unstable();
                let g = score(&t) - cur;
                if g > best.map_or(0.0, |(_, bg)| bg) {
                    best = Some((i, g));
                }
            }
            match best {
                Some((i, g)) if g > 0.0 => {
                    selected.push(i);
                    selected.sort_unstable();
                }
                _ => break,
            }
        }
        assert_eq!(got.sentence_indices, selected);
    }

    #[test]
    fn oracle_output_in_document_order_on_random_docs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vocabulary = ["a", "b", "c", "d", "e", "f"];
        for _ in 0..40 {
            let ns = rng.random_range(1..=8);
            let body: Vec<Vec<String>> = (0..ns)
                .map(|_| {
                    (0..rng.random_range(1..=5))
                        .map(|_| vocabulary[rng.random_range(0..vocabulary.len())].to_owned())
                        .collect()
                })
                .collect();
            let refr: Vec<String> = (0..rng.random_range(1..=6))
                .map(|_| vocabulary[rng.random_range(0..vocabulary.len())].to_owned())
                .collect();
            let s = oracle_greedy(&body, &refr, 3);
            assert!(s.sentence_indices.windows(2).all(|w| w[0] < w[1]));
            assert!(s.sentence_indices.iter().all(|&i| i < body.len()));
        }
    }

    #[test]
    fn textrank_identical_sentences_win() {
        // Two identical sentences among otherwise-disjoint ones. Expected
        // scores come from an independent dense linear solve of the
        // stationary equations on the 4-sentence instance.
        let body = sents(&["p q r", "u v w", "p q r", "x y z"]);
        let scores = textrank_scores(&body);

        let expect = textrank_linear_solve_oracle(&body);
        for (g, e) in scores.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-4, "got {scores:?} want {expect:?}");
        }
        let s = textrank(&body, 2);
        assert_eq!(s.sentence_indices, vec![0, 2]);
    }

    /// Independent oracle: solve (I - d·P) r = ((1-d)/n) 1 directly by
    /// Gaussian elimination, where P is the column-normalized similarity
    /// matrix with dangling columns spread uniformly.
    fn textrank_linear_solve_oracle(body: &[Vec<String>]) -> Vec<f64> {
        let n = body.len();
        let counts: Vec<HashMap<&String, f64>> = body.iter().map(|s| unigram_counts(s)).collect();
        let mut p = vec![vec![0.0f64; n]; n];
        for j in 0..n {
            let col: Vec<f64> = (0..n)
                .map(|i| if i == j { 0.0 } else { cosine(&counts[i], &counts[j]) })
                .collect();
            let s: f64 = col.iter().sum();
            for i in 0..n {
                p[i][j] = if s > 0.0 { col[i] / s } else { 1.0 / n as f64 };
            }
        }
        // A = I - d P, b = (1-d)/n
        let d = TEXTRANK_DAMPING;
        let mut a = vec![vec![0.0f64; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = if i == j { 1.0 } else { 0.0 } - d * p[i][j];
            }
            a[i][n] = (1.0 - d) / n as f64;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            let pv = a[col][col];
            for j in col..=n {
                a[col][j] /= pv;
            }
            for i in 0..n {
                if i != col {
                    let f = a[i][col];
                    for j in col..=n {
                        a[i][j] -= f * a[col][j];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] * n as f64).collect()
    }

    #[test]
    fn textrank_single_sentence_selected() {
        let body = sents(&["only sentence"]);
        let s = textrank(&body, 1);
        assert_eq!(s.sentence_indices, vec![0]);
    }

    #[test]
    fn textrank_edgeless_graph_uniform_scores_tie_to_earliest() {
        let body = sents(&["a b", "c d", "e f", "g h"]);
        let scores = textrank_scores(&body);
        for w in scores.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9);
        }
        let s = textrank(&body, 2);
        assert_eq!(s.sentence_indices, vec![0, 1]);
    }

    #[test]
    fn textrank_scores_sum_to_sentence_count() {
        let body = sents(&[
            "a b c",
            "a b d",
            "x y",
            "x y z",
            "unrelated words here",
            "a c d",
        ]);
        let scores = textrank_scores(&body);
        let total: f64 = scores.iter().sum();
        assert!((total - body.len() as f64).abs() < 1e-4, "sum = {total}");
    }

    #[test]
    fn truncate_body_keeps_whole_sentences() {
        let body = sents(&["a b c", "d e f", "g h i"]);
        let t = truncate_body(&body, 7);
        assert_eq!(t.len(), 2);
        assert_eq!(truncate_body(&body, 2).len(), 0);
        assert_eq!(truncate_body(&body, 100).len(), 3);
    }
}
