//! Sentence-level quality and diversity metrics over whitespace tokens.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

/// Highest n-gram order in BLEU.
pub const MAX_ORDER: usize = 4;
/// Added to numerator and denominator of an order with zero matches.
pub const SMOOTHING: f64 = 0.1;

pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Smoothed sentence BLEU-4 of `hyp` against `refs`.
///
/// Orders the hypothesis is too short to have are skipped; orders with no clipped match use
/// `(0 + 0.1)/(total + 0.1)`. The brevity penalty uses the reference length closest to the
/// hypothesis (shorter on ties). An empty hypothesis, or no references, scores 0.
pub fn bleu<T: Eq + Hash, R: AsRef<[T]>>(hyp: &[T], refs: &[R]) -> f64 {
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=MAX_ORDER.min(hyp.len()) {
        let counts = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total = (hyp.len() + 1 - n) as f64;
        let matches: usize = counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matches == 0 {
            SMOOTHING / (total + SMOOTHING)
        } else {
            matches as f64 / total
        };
        log_sum += p.ln();
        orders += 1;
    }
    let c = hyp.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(hyp.len()), len))
        .unwrap() as f64;
    let bp = (1.0 - r / c).min(0.0).exp();
    bp * (log_sum / orders as f64).exp()
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1. Empty inputs score 0.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Distinct unigrams over total unigrams; 0 for an empty sentence.
pub fn dist1<T: Eq + Hash>(sentence: &[T]) -> f64 {
    if sentence.is_empty() {
        return 0.0;
    }
    sentence.iter().collect::<HashSet<_>>().len() as f64 / sentence.len() as f64
}

/// Mean BLEU of each candidate against all the others. A single candidate scores 0.
pub fn self_bleu<T: Eq + Hash, C: AsRef<[T]>>(candidates: &[C]) -> f64 {
    if candidates.len() < 2 {
        return 0.0;
    }
    let total: f64 = (0..candidates.len())
        .map(|i| {
            let others: Vec<&[T]> = candidates
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, c)| c.as_ref())
                .collect();
            bleu(candidates[i].as_ref(), &others)
        })
        .sum();
    total / candidates.len() as f64
}

/// Distinct 4-grams over all 4-grams of the set; 1 when the set has none.
pub fn div4<T: Eq + Hash, C: AsRef<[T]>>(candidates: &[C]) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for c in candidates {
        let c = c.as_ref();
        if c.len() >= 4 {
            for g in c.windows(4) {
                seen.insert(g);
                total += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        seen.len() as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub rouge_l: f64,
    pub dist1: f64,
    pub self_bleu: f64,
    pub div4: f64,
    pub avg_len: f64,
    pub examples: usize,
}

/// Per-example scores behind an [`EvalReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleScores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub dist1: f64,
    pub self_bleu: f64,
    pub div4: f64,
    pub len: usize,
}

/// One evaluated source: the chosen output, its references, and the candidate set it came from.
pub struct EvalItem<'a> {
    pub hyp: &'a str,
    pub refs: Vec<&'a str>,
    pub candidates: Vec<&'a str>,
}

pub fn score_example(item: &EvalItem<'_>) -> ExampleScores {
    let hyp = tokens(item.hyp);
    let refs: Vec<Vec<&str>> = item.refs.iter().map(|r| tokens(r)).collect();
    let cands: Vec<Vec<&str>> = item.candidates.iter().map(|c| tokens(c)).collect();
    let rouge = refs.iter().map(|r| rouge_l(&hyp, r)).fold(0.0, f64::max);
    ExampleScores {
        bleu: bleu(&hyp, &refs),
        rouge_l: rouge,
        dist1: dist1(&hyp),
        self_bleu: self_bleu(&cands),
        div4: div4(&cands),
        len: hyp.len(),
    }
}

/// Averages [`score_example`] over `items`. ROUGE-L takes the best reference.
pub fn evaluate(items: &[EvalItem<'_>]) -> (EvalReport, Vec<ExampleScores>) {
    let scores: Vec<ExampleScores> = items.iter().map(score_example).collect();
    let n = scores.len().max(1) as f64;
    let mean = |f: fn(&ExampleScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let report = EvalReport {
        bleu: mean(|s| s.bleu),
        rouge_l: mean(|s| s.rouge_l),
        dist1: mean(|s| s.dist1),
        self_bleu: mean(|s| s.self_bleu),
        div4: mean(|s| s.div4),
        avg_len: mean(|s| s.len as f64),
        examples: scores.len(),
    };
    (report, scores)
}
