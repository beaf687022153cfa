//! Caption evaluation metrics: corpus BLEU-1..4, ROUGE-L, CIDEr-D.
//!
//! Everything here is a pure function over token lists. N-gram tables use
//! `BTreeMap` so that float accumulation order is fixed and scores are
//! reproducible bit-for-bit across runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase, strip punctuation characters, split on whitespace. No stemming.
pub fn metric_tokenize(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Join an n-gram into a single map key. `\x1f` cannot appear in tokens
/// produced by the tokenizers in this crate.
fn ngram_key(tokens: &[String]) -> String {
    tokens.join("\x1f")
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(ngram_key(w)).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram precision, geometric mean over
/// orders 1..=k, and brevity penalty against the closest reference length.
/// Returns one score per order (BLEU-1 through BLEU-max_n).
pub fn bleu(
    candidates: &[Vec<String>],
    reference_sets: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if candidates.len() != reference_sets.len() || candidates.is_empty() {
        return Err(Error::CheckFailed(format!(
            "bleu: {} candidates vs {} reference sets",
            candidates.len(),
            reference_sets.len()
        )));
    }
    let mut matched = vec![0.0f64; max_n];
    let mut total = vec![0.0f64; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(reference_sets.iter()) {
        cand_len += cand.len();
        // Closest reference length; ties broken toward the shorter one.
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        ref_len += closest;

        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<String, f64> = BTreeMap::new();
            for r in refs {
                for (k, v) in ngram_counts(r, n) {
                    let e = max_ref.entry(k).or_insert(0.0);
                    if v > *e {
                        *e = v;
                    }
                }
            }
            for (k, v) in &cand_counts {
                let clip = max_ref.get(k).copied().unwrap_or(0.0);
                matched[n - 1] += v.min(clip);
                total[n - 1] += v;
            }
        }
    }

    let bp = if cand_len >= ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };

    let mut scores = Vec::with_capacity(max_n);
    for k in 1..=max_n {
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=k {
            if total[n - 1] == 0.0 || matched[n - 1] == 0.0 {
                zero = true;
                break;
            }
            log_sum += (matched[n - 1] / total[n - 1]).ln();
        }
        scores.push(if zero { 0.0 } else { bp * (log_sum / k as f64).exp() });
    }
    Ok(scores)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let tmp = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = tmp;
        }
    }
    dp[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure for one candidate: the maximum over its references.
pub fn rouge_l_sentence(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in references {
        if candidate.is_empty() || r.is_empty() {
            continue;
        }
        let lcs = lcs_len(candidate, r) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / candidate.len() as f64;
        let rec = lcs / r.len() as f64;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let f = (1.0 + b2) * p * rec / (rec + b2 * p);
        if f > best {
            best = f;
        }
    }
    best
}

/// Corpus ROUGE-L: mean of per-instance scores.
pub fn rouge_l(candidates: &[Vec<String>], reference_sets: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.len() != reference_sets.len() || candidates.is_empty() {
        return Err(Error::CheckFailed("rouge_l: length mismatch".into()));
    }
    let sum: f64 = candidates
        .iter()
        .zip(reference_sets.iter())
        .map(|(c, r)| rouge_l_sentence(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

pub const CIDER_MAX_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies for CIDEr-D's TF-IDF weighting. One document per
/// image: the union of that image's references.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdfStats {
    pub doc_count: usize,
    df: Vec<BTreeMap<String, f64>>,
}

impl IdfStats {
    /// log(D / df), with unseen n-grams getting the full log(D) weight.
    fn weight(&self, n: usize, key: &str) -> f64 {
        let df = self.df[n - 1].get(key).copied().unwrap_or(0.0).max(1.0);
        (self.doc_count as f64).ln() - df.ln()
    }
}

/// Count, for each n-gram order, in how many documents each n-gram occurs.
pub fn build_idf(reference_corpus: &[Vec<Vec<String>>]) -> Result<IdfStats> {
    if reference_corpus.is_empty() {
        return Err(Error::CheckFailed("build_idf: empty corpus".into()));
    }
    let mut df = vec![BTreeMap::new(); CIDER_MAX_N];
    for refs in reference_corpus {
        for n in 1..=CIDER_MAX_N {
            let mut seen: BTreeMap<String, ()> = BTreeMap::new();
            for r in refs {
                for (k, _) in ngram_counts(r, n) {
                    seen.insert(k, ());
                }
            }
            for (k, _) in seen {
                *df[n - 1].entry(k).or_insert(0.0) += 1.0;
            }
        }
    }
    Ok(IdfStats { doc_count: reference_corpus.len(), df })
}

fn tfidf_vec(tokens: &[String], n: usize, idf: &IdfStats) -> (BTreeMap<String, f64>, f64) {
    let counts = ngram_counts(tokens, n);
    let mut vec = BTreeMap::new();
    let mut norm_sq = 0.0;
    for (k, c) in counts {
        let w = c * idf.weight(n, &k);
        norm_sq += w * w;
        vec.insert(k, w);
    }
    (vec, norm_sq.sqrt())
}

/// CIDEr-D of one candidate against its reference set: clipped TF-IDF cosine
/// per n-gram order with a gaussian length penalty, averaged over references
/// and orders, scaled by 10.
pub fn cider_d_sentence(
    candidate: &[String],
    references: &[Vec<String>],
    idf: &IdfStats,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::CheckFailed("cider_d: empty reference set".into()));
    }
    let mut score_sum = 0.0;
    for n in 1..=CIDER_MAX_N {
        let (cand_vec, cand_norm) = tfidf_vec(candidate, n, idf);
        let mut per_ref_sum = 0.0;
        for r in references {
            let (ref_vec, ref_norm) = tfidf_vec(r, n, idf);
            if cand_norm == 0.0 || ref_norm == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (k, &cv) in &cand_vec {
                if let Some(&rv) = ref_vec.get(k) {
                    dot += cv.min(rv) * rv;
                }
            }
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            per_ref_sum += penalty * dot / (cand_norm * ref_norm);
        }
        score_sum += per_ref_sum / references.len() as f64;
    }
    Ok(10.0 * score_sum / CIDER_MAX_N as f64)
}

/// Per-instance scores and their mean.
pub fn cider_d(
    candidates: &[Vec<String>],
    reference_sets: &[Vec<Vec<String>>],
    idf: &IdfStats,
) -> Result<(Vec<f64>, f64)> {
    if candidates.len() != reference_sets.len() || candidates.is_empty() {
        return Err(Error::CheckFailed("cider_d: length mismatch".into()));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (c, r) in candidates.iter().zip(reference_sets.iter()) {
        scores.push(cider_d_sentence(c, r, idf)?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        assert_eq!(metric_tokenize("A man, eating."), toks("a man eating"));
        assert_eq!(metric_tokenize(""), Vec::<String>::new());
        assert_eq!(metric_tokenize("Cake on desk"), toks("cake on desk"));
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        let c = vec![toks("a cat on a mat")];
        let r = vec![vec![toks("a cat on a mat")]];
        let scores = bleu(&c, &r, 4).unwrap();
        for s in scores {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_no_overlap_is_zero() {
        let c = vec![toks("x y z")];
        let r = vec![vec![toks("a b c")]];
        let scores = bleu(&c, &r, 4).unwrap();
        assert_eq!(scores[0], 0.0);
    }

    #[test]
    fn bleu_clipping_and_brevity_hand_case() {
        // candidate [the, cat] vs reference [the, the, cat]:
        // clipped unigram precision 2/2, brevity penalty exp(1 - 3/2).
        let c = vec![toks("the cat")];
        let r = vec![vec![toks("the the cat")]];
        let scores = bleu(&c, &r, 1).unwrap();
        let expected = (1.0f64 - 3.0 / 2.0).exp();
        assert!((scores[0] - expected).abs() < 1e-12, "{}", scores[0]);
        assert!((scores[0] - 0.6065).abs() < 5e-5);
    }

    #[test]
    fn bleu_reference_containing_candidate_scores_one() {
        let c = vec![toks("a dog runs fast today")];
        let r = vec![vec![toks("something else entirely here now"), toks("a dog runs fast today")]];
        let scores = bleu(&c, &r, 4).unwrap();
        assert!((scores[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_identical_and_disjoint() {
        let s = toks("a b c d");
        assert!((rouge_l_sentence(&s, std::slice::from_ref(&s)) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l_sentence(&toks("a b"), &[toks("x y")]), 0.0);
    }

    #[test]
    fn rouge_hand_case() {
        // cand [a,b,c,d], ref [a,c,d]: LCS 3, P = 3/4, R = 1.
        let f = rouge_l_sentence(&toks("a b c d"), &[toks("a c d")]);
        let expected = (1.0 + 1.44) * 0.75 * 1.0 / (1.0 + 1.44 * 0.75);
        assert!((f - expected).abs() < 1e-12);
        assert!((f - 0.8798).abs() < 5e-5);
    }

    #[test]
    fn idf_document_frequencies_hand_count() {
        // Two documents; "a cat" appears in both, "dog" only in the second.
        let corpus = vec![
            vec![toks("a cat sits"), toks("a cat rests")],
            vec![toks("a dog runs"), toks("a cat naps")],
        ];
        let idf = build_idf(&corpus).unwrap();
        assert_eq!(idf.doc_count, 2);
        // Ubiquitous unigram: df = 2 of 2 documents, weight ln(1) = 0.
        assert!((idf.weight(1, "a") - 0.0).abs() < 1e-12);
        assert!((idf.weight(1, "cat") - 0.0).abs() < 1e-12);
        // Unique to one document: weight ln(2).
        assert!((idf.weight(1, "dog") - 2.0f64.ln()).abs() < 1e-12);
        assert!((idf.weight(2, &["a".to_string(), "dog".to_string()].join("\x1f")) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cider_identical_is_ten() {
        let corpus = vec![
            vec![toks("a red ball on a box")],
            vec![toks("a lamp left of a chair")],
        ];
        let idf = build_idf(&corpus).unwrap();
        let score = cider_d_sentence(&toks("a red ball on a box"), &corpus[0], &idf).unwrap();
        assert!((score - 10.0).abs() < 1e-6, "score = {score}");
    }

    #[test]
    fn cider_disjoint_is_zero() {
        let corpus = vec![vec![toks("a red ball")], vec![toks("a blue box")]];
        let idf = build_idf(&corpus).unwrap();
        let score = cider_d_sentence(&toks("something wholly unrelated"), &corpus[0], &idf).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn cider_length_penalty_shape() {
        assert!(((-36.0f64 / 72.0).exp() - 0.6065).abs() < 5e-5);
    }

    #[test]
    fn metrics_invariant_to_reference_order() {
        let c = vec![toks("a cat on a mat")];
        let r1 = vec![vec![toks("a cat sat"), toks("the cat on the mat")]];
        let r2 = vec![vec![toks("the cat on the mat"), toks("a cat sat")]];
        assert_eq!(bleu(&c, &r1, 4).unwrap(), bleu(&c, &r2, 4).unwrap());
        assert_eq!(rouge_l(&c, &r1).unwrap(), rouge_l(&c, &r2).unwrap());
        let idf = build_idf(&[r1[0].clone(), vec![toks("a dog in a house")]]).unwrap();
        let s1 = cider_d_sentence(&c[0], &r1[0], &idf).unwrap();
        let s2 = cider_d_sentence(&c[0], &r2[0], &idf).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn cider_replacing_matching_ngram_does_not_increase() {
        let corpus = vec![
            vec![toks("a red ball on a box")],
            vec![toks("a lamp left of a chair")],
        ];
        let idf = build_idf(&corpus).unwrap();
        let matching = cider_d_sentence(&toks("a red ball on a box"), &corpus[0], &idf).unwrap();
        let mangled = cider_d_sentence(&toks("a red frog on a box"), &corpus[0], &idf).unwrap();
        assert!(mangled <= matching);
    }
}
