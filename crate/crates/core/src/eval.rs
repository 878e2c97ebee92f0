//! Sentence BLEU, distinct-unigram ratio, pooled distinct 4-grams, exact match.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::Tokenizer;
use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence-level BLEU-4 with uniform weights. Unigram precision is
/// unsmoothed, higher orders use add-one smoothing, and a brevity penalty
/// `exp(1 − r/h)` applies when the hypothesis is shorter than the reference.
pub fn bleu<T: Eq + Hash>(hypothesis: &[T], reference: &[T]) -> f64 {
    if hypothesis.is_empty() {
        log::warn!("empty hypothesis scores BLEU 0");
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let total: usize = hyp.values().sum();
        let matched: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let (h, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if h < r { (1.0 - r / h).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

/// Unique tokens over total tokens of one sequence.
pub fn dist1<T: Eq + Hash>(tokens: &[T]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("dist1 of an empty sequence".into()));
    }
    let unique: HashSet<&T> = tokens.iter().collect();
    Ok(unique.len() as f64 / tokens.len() as f64)
}

/// Distinct 4-grams pooled across candidates over total 4-grams. Candidates
/// shorter than four tokens are skipped.
pub fn div4<T: Eq + Hash>(candidates: &[Vec<T>]) -> Result<f64> {
    let mut unique: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for (k, c) in candidates.iter().enumerate() {
        if c.len() < 4 {
            log::warn!("candidate {k} has {} tokens, skipped for Div.4", c.len());
            continue;
        }
        for w in c.windows(4) {
            unique.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no candidate has four or more tokens".into()));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Corpus metrics. `div4` is `None` when no hypothesis has four tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub dist1: f64,
    pub div4: Option<f64>,
    pub exact_match: f64,
    pub count: usize,
    pub config_digest: Option<String>,
}

/// Mean sentence BLEU, mean per-sentence dist-1 over non-empty hypotheses,
/// Div.4 pooled over all hypotheses, and exact-match rate.
pub fn evaluate(hypotheses: &[String], references: &[String], tokenizer: Tokenizer) -> Result<MetricReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let hyps: Vec<Vec<String>> = hypotheses.iter().map(|h| tokenizer.tokenize(h)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenizer.tokenize(r)).collect();
    let count = hyps.len();
    let bleu_mean = hyps.iter().zip(&refs).map(|(h, r)| bleu(h, r)).sum::<f64>() / count as f64;
    let d1: Vec<f64> = hyps.iter().filter_map(|h| dist1(h).ok()).collect();
    let dist1_mean = if d1.is_empty() { 0.0 } else { d1.iter().sum::<f64>() / d1.len() as f64 };
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count() as f64 / count as f64;
    Ok(MetricReport {
        bleu: bleu_mean,
        dist1: dist1_mean,
        div4: div4(&hyps).ok(),
        exact_match: exact,
        count,
        config_digest: None,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    /// Straightforward reference BLEU written independently of [`bleu`].
    fn oracle_bleu(h: &[&str], r: &[&str]) -> f64 {
        if h.is_empty() {
            return 0.0;
        }
        let mut logp = 0.0;
        for n in 1..=4usize {
            let hg: Vec<&[&str]> = if h.len() >= n { h.windows(n).collect() } else { vec![] };
            let rg: Vec<&[&str]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
            let mut used = vec![false; rg.len()];
            let mut m = 0;
            for g in &hg {
                if let Some(k) = (0..rg.len()).find(|&k| !used[k] && rg[k] == *g) {
                    used[k] = true;
                    m += 1;
                }
            }
            let p = if n == 1 {
                m as f64 / hg.len() as f64
            } else {
                (m as f64 + 1.0) / (hg.len() as f64 + 1.0)
            };
            if p == 0.0 {
                return 0.0;
            }
            logp += p.ln() / 4.0;
        }
        let bp = if h.len() < r.len() {
            (1.0 - r.len() as f64 / h.len() as f64).exp()
        } else {
            1.0
        };
        bp * logp.exp()
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&toks("a b c d e"), &toks("a b c d e")), 1.0);
        assert_eq!(bleu(&toks("x y z"), &toks("a b c")), 0.0);
        let h = toks("the cat sat");
        let r = toks("the cat sat down");
        let v = bleu(&h, &r);
        assert!((v - oracle_bleu(&h, &r)).abs() < 1e-9);
        assert!((v - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert_eq!(bleu::<&str>(&[], &r), 0.0);
    }

    #[test]
    fn distinct_examples() {
        assert_eq!(dist1(&toks("a a a a")).unwrap(), 0.25);
        assert_eq!(dist1(&toks("a b c")).unwrap(), 1.0);
        assert_eq!(dist1(&toks("a b a b")).unwrap(), 0.5);
        assert!(dist1::<&str>(&[]).is_err());
        let same = vec![toks("a b c d e"), toks("a b c d e")];
        assert_eq!(div4(&same).unwrap(), 0.5);
        assert_eq!(div4(&[toks("a b c d e f")]).unwrap(), 1.0);
        assert!(div4(&[toks("a b")]).is_err());
    }

    #[test]
    fn div4_matches_brute_force() {
        let set = vec![toks("a b c d e a b c d"), toks("b c d e f"), toks("x y"), toks("c d e f g h")];
        let mut all: Vec<Vec<&str>> = Vec::new();
        for c in &set {
            if c.len() >= 4 {
                for i in 0..=c.len() - 4 {
                    all.push(c[i..i + 4].to_vec());
                }
            }
        }
        let mut uniq = all.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(div4(&set).unwrap(), uniq.len() as f64 / all.len() as f64);
    }

    #[test]
    fn report_counts_exact_matches() {
        let h = vec!["a b".to_string(), "c d".to_string()];
        let r = vec!["a b".to_string(), "c e".to_string()];
        let rep = evaluate(&h, &r, Tokenizer::Whitespace).unwrap();
        assert_eq!(rep.exact_match, 0.5);
        assert_eq!(rep.count, 2);
        assert!(evaluate(&h, &r[..1], Tokenizer::Whitespace).is_err());
        let same = evaluate(&h, &h, Tokenizer::Whitespace).unwrap();
        assert_eq!((same.bleu, same.exact_match), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn bleu_matches_oracle(h in proptest::collection::vec(0u8..5, 0..9), r in proptest::collection::vec(0u8..5, 1..9)) {
            let hs: Vec<String> = h.iter().map(|x| x.to_string()).collect();
            let rs: Vec<String> = r.iter().map(|x| x.to_string()).collect();
            let hv: Vec<&str> = hs.iter().map(String::as_str).collect();
            let rv: Vec<&str> = rs.iter().map(String::as_str).collect();
            let v = bleu(&hv, &rv);
            prop_assert!((v - oracle_bleu(&hv, &rv)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&v));
            if !hv.is_empty() {
                prop_assert!((bleu(&hv, &hv) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn diversity_is_relabeling_invariant(
            seqs in proptest::collection::vec(proptest::collection::vec(0u8..6, 4..10), 1..4),
            shift in 1u8..6,
        ) {
            let relabel: Vec<Vec<u8>> = seqs.iter().map(|s| s.iter().map(|&x| (x + shift) % 6 + 10).collect()).collect();
            prop_assert_eq!(div4(&seqs).unwrap(), div4(&relabel).unwrap());
            for (a, b) in seqs.iter().zip(&relabel) {
                prop_assert_eq!(dist1(a).unwrap(), dist1(b).unwrap());
            }
        }
    }
}
