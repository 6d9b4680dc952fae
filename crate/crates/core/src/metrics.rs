//! Corpus-level BLEU-1..4, METEOR (exact unigram matching) and ROUGE-L.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts of every n-gram of order `n`.
fn ngrams<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_aligned<A, B>(candidates: &[A], references: &[B]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Clipped matches and candidate n-gram totals per order `1..=n`.
fn corpus_counts<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(0usize, 0usize); n];
    for (c, r) in candidates.iter().zip(references) {
        for (order, slot) in out.iter_mut().enumerate() {
            let cand = ngrams(c, order + 1);
            let refs = ngrams(r, order + 1);
            for (gram, &count) in &cand {
                slot.0 += count.min(refs.get(gram).copied().unwrap_or(0));
                slot.1 += count;
            }
        }
    }
    out
}

/// Corpus BLEU with uniform weights over orders `1..=n`, no smoothing.
pub fn bleu_n<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    check_aligned(candidates, references)?;
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order {n} outside 1..=4")));
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for (matched, total) in corpus_counts(candidates, references, n) {
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn non_empty<T>(candidate: &[T], reference: &[T]) -> Result<()> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Empty("metric needs non-empty sequences".into()));
    }
    Ok(())
}

/// LCS-based F1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    non_empty(candidate, reference)?;
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Exact-match unigram alignment as `(candidate, reference)` index pairs
/// sorted by candidate position. Repeatedly takes the longest run of
/// consecutive unmatched equal tokens, preferring the earliest candidate
/// position and then the earliest reference position.
pub fn align<T: Eq>(candidate: &[T], reference: &[T]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; candidate.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    loop {
        let mut best = (0usize, 0usize, 0usize);
        for i in 0..candidate.len() {
            for j in 0..reference.len() {
                let mut len = 0;
                while i + len < candidate.len()
                    && j + len < reference.len()
                    && !used_c[i + len]
                    && !used_r[j + len]
                    && candidate[i + len] == reference[j + len]
                {
                    len += 1;
                }
                if len > best.2 {
                    best = (i, j, len);
                }
            }
        }
        let (i, j, len) = best;
        if len == 0 {
            break;
        }
        for t in 0..len {
            used_c[i + t] = true;
            used_r[j + t] = true;
            pairs.push((i + t, j + t));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of contiguous, order-preserving runs in a sorted alignment.
pub fn chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

pub fn meteor<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    non_empty(candidate, reference)?;
    let pairs = align(candidate, reference);
    let m = pairs.len();
    if m == 0 {
        return Ok(0.0);
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks(&pairs) as f64 / m as f64;
    let penalty = 0.5 * frag * frag * frag;
    Ok(f_mean * (1.0 - penalty))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cases: Vec<CaseMetrics>,
}

impl MetricsReport {
    /// The six corpus metrics in table order.
    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub const METRIC_NAMES: [&str; 6] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L"];

/// Per-case scores are zero for an empty candidate.
fn sentence_scores<T: Hash + Eq + Clone>(case: String, c: &[T], r: &[T]) -> Result<CaseMetrics> {
    let cs = [c.to_vec()];
    let rs = [r.to_vec()];
    let (meteor, rouge_l) = if c.is_empty() {
        (0.0, 0.0)
    } else {
        (meteor(c, r)?, rouge_l(c, r)?)
    };
    Ok(CaseMetrics {
        case,
        bleu1: bleu_n(&cs, &rs, 1)?,
        bleu2: bleu_n(&cs, &rs, 2)?,
        bleu3: bleu_n(&cs, &rs, 3)?,
        bleu4: bleu_n(&cs, &rs, 4)?,
        meteor,
        rouge_l,
    })
}

/// All six metrics; cases are labelled by position.
pub fn evaluate_corpus<T: Hash + Eq + Clone>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<MetricsReport> {
    let ids: Vec<String> = (0..candidates.len()).map(|i| i.to_string()).collect();
    evaluate_cases(&ids, candidates, references)
}

pub fn evaluate_cases<T: Hash + Eq + Clone>(
    ids: &[String],
    candidates: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<MetricsReport> {
    check_aligned(candidates, references)?;
    if ids.len() != candidates.len() {
        return Err(Error::Shape(format!("{} ids for {} cases", ids.len(), candidates.len())));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Empty("empty reference".into()));
    }
    let cases = ids
        .iter()
        .zip(candidates.iter().zip(references))
        .map(|(id, (c, r))| sentence_scores(id.clone(), c, r))
        .collect::<Result<Vec<_>>>()?;
    let n = cases.len() as f64;
    Ok(MetricsReport {
        bleu1: bleu_n(candidates, references, 1)?,
        bleu2: bleu_n(candidates, references, 2)?,
        bleu3: bleu_n(candidates, references, 3)?,
        bleu4: bleu_n(candidates, references, 4)?,
        meteor: cases.iter().map(|c| c.meteor).sum::<f64>() / n,
        rouge_l: cases.iter().map(|c| c.rouge_l).sum::<f64>() / n,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let c = vec![toks("the cat")];
        let r = vec![toks("the cat sat on")];
        assert!((bleu_n(&c, &r, 1).unwrap() - (-1f64).exp()).abs() < 1e-12);
        let same = vec![toks("a b c d e")];
        for n in 1..=4 {
            assert_eq!(bleu_n(&same, &same, n).unwrap(), 1.0);
        }
        assert!(bleu_n::<&str>(&[], &[], 1).is_err());
        assert_eq!(bleu_n(&[toks("x y")], &[toks("x z")], 2).unwrap(), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l(&toks("a b c d"), &toks("a c d")).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a b"), &toks("a b")).unwrap(), 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        assert!(rouge_l::<&str>(&[], &toks("a")).is_err());
    }

    #[test]
    fn meteor_examples() {
        let s = toks("a b c d");
        assert!((meteor(&s, &s).unwrap() - 0.9921875).abs() < 1e-15);
        assert_eq!(meteor(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        assert!((meteor(&toks("a b"), &toks("b a")).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn alignment_prefers_long_runs() {
        let pairs = align(&toks("a b c a b"), &toks("x a b c"));
        assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(chunks(&pairs), 1);
    }

    #[test]
    fn corpus_report_of_identical_corpus() {
        let refs = vec![toks("a b c d"), toks("e f g h i")];
        let rep = evaluate_corpus(&refs, &refs).unwrap();
        assert_eq!(&rep.values()[..4], &[1.0; 4]);
        assert_eq!(rep.rouge_l, 1.0);
        let expected = (1.0 - 0.5 / 64.0 + 1.0 - 0.5 / 125.0) / 2.0;
        assert!((rep.meteor - expected).abs() < 1e-15);
    }

    #[test]
    fn single_case_corpus_is_sentence_level() {
        let c = vec![toks("a b c e f")];
        let r = vec![toks("a b c d e f")];
        let rep = evaluate_corpus(&c, &r).unwrap();
        assert_eq!(rep.bleu2, rep.cases[0].bleu2);
        assert_eq!(rep.meteor, rep.cases[0].meteor);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let rep = evaluate_corpus(&[vec![], toks("a b")], &[toks("a"), toks("a b")]).unwrap();
        assert_eq!(rep.cases[0].meteor, 0.0);
        assert_eq!(rep.cases[0].rouge_l, 0.0);
        assert_eq!(rep.cases[0].bleu1, 0.0);
        assert!(evaluate_corpus(&[toks("a")], &[vec![]]).is_err());
        assert!(evaluate_corpus(&[toks("a")], &[toks("a"), toks("b")]).is_err());
    }

    fn corpus() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<u8>>)> {
        (1usize..5).prop_flat_map(|n| {
            (
                proptest::collection::vec(proptest::collection::vec(0u8..6, 1..12), n),
                proptest::collection::vec(proptest::collection::vec(0u8..6, 1..12), n),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_relabel_invariant((c, r) in corpus()) {
            let rep = evaluate_corpus(&c, &r).unwrap();
            for v in rep.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let relabel = |xs: &Vec<Vec<u8>>| -> Vec<Vec<u8>> {
                xs.iter().map(|s| s.iter().map(|t| (t * 7 + 3) % 11).collect()).collect()
            };
            let rep2 = evaluate_corpus(&relabel(&c), &relabel(&r)).unwrap();
            prop_assert_eq!(rep.values(), rep2.values());
        }

        #[test]
        fn bleu_is_monotone_in_order((c, r) in corpus()) {
            let b: Vec<f64> = (1..=4).map(|n| bleu_n(&c, &r, n).unwrap()).collect();
            for w in b.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }

        #[test]
        fn rouge_is_symmetric(
            a in proptest::collection::vec(0u8..5, 1..10),
            b in proptest::collection::vec(0u8..5, 1..10),
        ) {
            let ab = rouge_l(&a, &b).unwrap();
            let ba = rouge_l(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
        }

        #[test]
        fn self_scores_reach_their_maximum(a in proptest::collection::vec(0u8..5, 1..10)) {
            prop_assert_eq!(rouge_l(&a, &a).unwrap(), 1.0);
            let m = meteor(&a, &a).unwrap();
            let expected = 1.0 - 0.5 * (1.0 / a.len() as f64).powi(3);
            prop_assert!((m - expected).abs() < 1e-15);
        }
    }
}
