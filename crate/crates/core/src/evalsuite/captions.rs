//! Corpus-level caption metrics: BLEU-1..4 with clipped n-gram precision and
//! brevity penalty, ROUGE-L F1 over the longest common subsequence, and
//! plain CIDEr (TF-IDF n-gram cosine over n = 1..4, scaled by 10, no length
//! penalty). Candidates and references are pre-tokenized word sequences.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionScores {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-k for k = 1..4.
fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> [f64; 4] {
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut eff_ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        // closest reference length (ties toward the shorter)
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        eff_ref_len += closest;
        for n in 1..=4 {
            let cc = ngram_counts(cand, n);
            let mut ref_max: HashMap<Ngram, usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = ref_max.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cc {
                total[n - 1] += c;
                clipped[n - 1] += (*c).min(ref_max.get(g).copied().unwrap_or(0));
            }
        }
    }
    let bp = if cand_len > eff_ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - eff_ref_len as f64 / cand_len as f64).exp()
    };
    let mut out = [0.0; 4];
    for k in 1..=4 {
        let mut log_sum = 0.0;
        let mut ok = true;
        for n in 1..=k {
            if clipped[n - 1] == 0 || total[n - 1] == 0 {
                ok = false;
                break;
            }
            log_sum += (clipped[n - 1] as f64 / total[n - 1] as f64).ln() / k as f64;
        }
        out[k - 1] = if ok { bp * log_sum.exp() } else { 0.0 };
    }
    out
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// Mean over candidates of the best (across references) LCS-based F1.
fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let mut best: f64 = 0.0;
        for r in refs {
            if cand.is_empty() || r.is_empty() {
                continue;
            }
            let l = lcs_len(cand, r) as f64;
            let p = l / cand.len() as f64;
            let rc = l / r.len() as f64;
            if p + rc > 0.0 {
                best = best.max(2.0 * p * rc / (p + rc));
            }
        }
        sum += best;
    }
    sum / candidates.len() as f64
}

/// TF-IDF vector of one sentence for n-grams of order `n`. TF is the count
/// normalized by the total n-gram count of the sentence; IDF is
/// ln(images / df) with df clamped to 1.
fn tfidf_vec(
    tokens: &[String],
    n: usize,
    df: &HashMap<Ngram, usize>,
    n_images: usize,
) -> HashMap<Ngram, f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    let mut out = HashMap::new();
    if total == 0 {
        return out;
    }
    for (g, c) in counts {
        let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
        let idf = (n_images as f64 / d).ln();
        out.insert(g, c as f64 / total as f64 * idf);
    }
    out
}

fn cosine(a: &HashMap<Ngram, f64>, b: &HashMap<Ngram, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, v)| b.get(g).map(|w| v * w))
        .sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Plain CIDEr: for each order, document frequency is the number of images
/// whose reference set mentions the n-gram; the per-image score is the mean
/// candidate-reference cosine; the final score averages orders and images
/// and scales by 10.
fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    let n_images = references.len();
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<Ngram, usize> = HashMap::new();
        for refs in references {
            let mut seen: HashMap<Ngram, bool> = HashMap::new();
            for r in refs {
                for g in ngram_counts(r, n).into_keys() {
                    seen.entry(g).or_insert(true);
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let mut order_sum = 0.0;
        for (cand, refs) in candidates.iter().zip(references) {
            let cv = tfidf_vec(cand, n, &df, n_images);
            let mut s = 0.0;
            for r in refs {
                let rv = tfidf_vec(r, n, &df, n_images);
                s += cosine(&cv, &rv);
            }
            order_sum += s / refs.len().max(1) as f64;
        }
        total += order_sum / candidates.len() as f64;
    }
    10.0 * total / 4.0
}

/// Compute all caption metrics for a corpus. Every image needs at least one
/// reference; empty candidates are scored (contributing zeros), not
/// rejected.
pub fn caption_metrics(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<CaptionScores> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Eval(format!(
            "need matching candidate/reference counts, got {}/{}",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Eval("every image needs at least one reference".into()));
    }
    Ok(CaptionScores {
        bleu: bleu(candidates, references),
        rouge_l: rouge_l(candidates, references),
        cider: cider(candidates, references),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn identity_scores_one() {
        let c = vec![toks("the heart is enlarged and abnormal today")];
        let r = vec![vec![toks("the heart is enlarged and abnormal today")]];
        let s = caption_metrics(&c, &r).unwrap();
        for k in 0..4 {
            assert!((s.bleu[k] - 1.0).abs() < 1e-12, "BLEU-{} = {}", k + 1, s.bleu[k]);
        }
        assert!((s.rouge_l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classic_clipping_case() {
        // modified unigram precision 2/7 for "the the the the the the the"
        // against "the cat is on the mat"
        let c = vec![toks("the the the the the the the")];
        let r = vec![vec![toks("the cat is on the mat")]];
        let s = caption_metrics(&c, &r).unwrap();
        assert!((s.bleu[0] - 2.0 / 7.0).abs() < 1e-12, "got {}", s.bleu[0]);
    }

    #[test]
    fn empty_candidate_contributes_zero() {
        let c = vec![toks(""), toks("a b c d e")];
        let r = vec![vec![toks("x y z w v")], vec![toks("a b c d e")]];
        let s = caption_metrics(&c, &r).unwrap();
        assert!(s.bleu[0] > 0.0);
        assert!(s.rouge_l > 0.0 && s.rouge_l <= 1.0);
    }

    #[test]
    fn rouge_partial_overlap() {
        // LCS("a b c d", "a x c d") = 3 -> P = R = 3/4 -> F1 = 3/4
        let c = vec![toks("a b c d")];
        let r = vec![vec![toks("a x c d")]];
        let s = caption_metrics(&c, &r).unwrap();
        assert!((s.rouge_l - 0.75).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies() {
        // candidate shorter than the reference: BP = exp(1 - 6/3)
        let c = vec![toks("a b c")];
        let r = vec![vec![toks("a b c d e f")]];
        let s = caption_metrics(&c, &r).unwrap();
        let expected = (1.0f64 - 2.0).exp(); // p1 = 1 for the 3 unigrams
        assert!((s.bleu[0] - expected).abs() < 1e-12, "got {}", s.bleu[0]);
    }

    #[test]
    fn metrics_invariant_under_corpus_reordering() {
        let c1 = vec![toks("a b c d e"), toks("f g h i j")];
        let r1 = vec![vec![toks("a b c x e")], vec![toks("f g h i j")]];
        let c2 = vec![c1[1].clone(), c1[0].clone()];
        let r2 = vec![r1[1].clone(), r1[0].clone()];
        let s1 = caption_metrics(&c1, &r1).unwrap();
        let s2 = caption_metrics(&c2, &r2).unwrap();
        assert!((s1.cider - s2.cider).abs() < 1e-12);
        assert_eq!(s1.bleu, s2.bleu);
        assert!((s1.rouge_l - s2.rouge_l).abs() < 1e-12);
    }

    #[test]
    fn ranges_hold() {
        let c = vec![toks("heart size is enlarged ."), toks("lungs are clear .")];
        let r = vec![
            vec![toks("the heart is enlarged .")],
            vec![toks("the lungs are clear .")],
        ];
        let s = caption_metrics(&c, &r).unwrap();
        for b in s.bleu {
            assert!((0.0..=1.0).contains(&b));
        }
        assert!((0.0..=1.0).contains(&s.rouge_l));
        assert!((0.0..=10.0).contains(&s.cider));
    }

    #[test]
    fn mismatched_counts_rejected() {
        assert!(caption_metrics(&[toks("a")], &[]).is_err());
    }
}
