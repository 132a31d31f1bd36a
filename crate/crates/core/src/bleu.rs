//! Corpus-level BLEU with clipped n-gram precision, closest-reference-length
//! brevity penalty, uniform weights and no smoothing.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use log::warn;

use crate::error::{Error, Result};

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus totals `(clipped matches, candidate n-grams)` for order `n`.
/// Each candidate n-gram count is clipped at its largest count in any one
/// of that candidate's references.
pub fn modified_precision<T: Hash + Eq>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    n: usize,
) -> (usize, usize) {
    let mut clipped = 0;
    let mut total = 0;
    for (cand, refs) in candidates.iter().zip(references) {
        let counts = ngram_counts(cand, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (gram, c) in ngram_counts(r, n) {
                let slot = max_ref.entry(gram).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        for (gram, c) in counts {
            clipped += c.min(max_ref.get(gram).copied().unwrap_or(0));
            total += c;
        }
    }
    (clipped, total)
}

/// Reference length closest to `candidate_len`, preferring the shorter on ties.
pub fn closest_ref_len<T>(candidate_len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(candidate_len), r))
        .unwrap_or(0)
}

/// `1` if `c > r`, else `exp(1 - r/c)`; `0` (with a warning) when `c == 0`.
pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        warn!("empty candidate corpus; brevity penalty set to 0");
        return 0.0;
    }
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// `B-1 .. B-4`, scaled to [0, 100].
    pub bleu: [f64; 4],
    /// Modified precisions `p1 .. p4`.
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "B-1 {:.2} B-2 {:.2} B-3 {:.2} B-4 {:.2} BP {:.4} c {} r {}",
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.brevity_penalty,
            self.candidate_len,
            self.reference_len
        )
    }
}

/// Describes the scoring convention; printed ahead of reports.
pub const BLEU_HEADER: &str = "# corpus-level BLEU, closest-reference brevity penalty, uniform weights, no smoothing";

pub fn corpus_bleu<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::Data("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("candidate {i} has no references")));
    }

    let mut matches = [0; 4];
    let mut totals = [0; 4];
    let mut precisions = [0.0; 4];
    for n in 1..=4 {
        let (m, t) = modified_precision(candidates, references, n);
        matches[n - 1] = m;
        totals[n - 1] = t;
        precisions[n - 1] = if t == 0 { 0.0 } else { m as f64 / t as f64 };
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| closest_ref_len(cand.len(), refs))
        .sum();
    let bp = brevity_penalty(c, r);

    let mut bleu = [0.0; 4];
    let mut log_sum = 0.0f64;
    for n in 1..=4 {
        let p = precisions[n - 1];
        if p == 0.0 || !log_sum.is_finite() {
            log_sum = f64::NEG_INFINITY;
            bleu[n - 1] = 0.0;
            continue;
        }
        log_sum += p.ln();
        bleu[n - 1] = 100.0 * bp * (log_sum / n as f64).exp();
    }
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty: bp,
        candidate_len: c,
        reference_len: r,
    })
}
