//! Corpus-level BLEU and term-usage-rate scoring.
//!
//! BLEU is the standard corpus BLEU-4: clipped modified n-gram precisions
//! aggregated over the corpus, a brevity penalty of `exp(1 - ref/hyp)` when
//! the hypothesis side is shorter, and the geometric mean of the four
//! precisions. On desk-scale corpora a zero precision is lifted to `1e-9` so
//! the score stays finite; the unsmoothed score is reported alongside.
//!
//! Term% counts a constraint as generated iff its target token sequence
//! occurs contiguously in the hypothesis; several identical constraints in
//! one sentence require disjoint occurrences, consumed left to right.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::corpus::Token;

/// Smoothing floor applied to zero n-gram precisions.
pub const PRECISION_EPSILON: f64 = 1e-9;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("hypothesis/reference count mismatch: {hypotheses} vs {references}")]
    LengthMismatch {
        hypotheses: usize,
        references: usize,
    },
    #[error("hypothesis/constraint alignment mismatch: {hypotheses} vs {constraints}")]
    ConstraintMismatch {
        hypotheses: usize,
        constraints: usize,
    },
    #[error("cannot score an empty hypothesis set")]
    EmptyCorpus,
}

/// Corpus BLEU with its components.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// Smoothed score in [0, 100].
    pub bleu: f64,
    /// Score without the epsilon smoothing; 0 when any precision is 0.
    pub bleu_unsmoothed: f64,
    /// Smoothed modified n-gram precisions for n = 1..=4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_length: usize,
    pub ref_length: usize,
}

/// Constraint generation counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TermUsage {
    pub generated: usize,
    pub total: usize,
    /// `100 * generated / total`, or 0 when there are no constraints.
    pub term_pct: f64,
}

/// Combined evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    pub bleu_unsmoothed: f64,
    pub ngram_precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_length: usize,
    pub ref_length: usize,
    pub term_pct: f64,
    pub constraints_generated: usize,
    pub constraints_total: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bleu: {:.6}", self.bleu)?;
        writeln!(f, "bleu_unsmoothed: {:.6}", self.bleu_unsmoothed)?;
        writeln!(
            f,
            "ngram_precisions: {:.9} {:.9} {:.9} {:.9}",
            self.ngram_precisions[0],
            self.ngram_precisions[1],
            self.ngram_precisions[2],
            self.ngram_precisions[3]
        )?;
        writeln!(f, "brevity_penalty: {:.9}", self.brevity_penalty)?;
        writeln!(f, "hyp_length: {}", self.hyp_length)?;
        writeln!(f, "ref_length: {}", self.ref_length)?;
        writeln!(f, "term_pct: {:.6}", self.term_pct)?;
        writeln!(f, "constraints_generated: {}", self.constraints_generated)?;
        write!(f, "constraints_total: {}", self.constraints_total)
    }
}

fn ngram_key(tokens: &[Token]) -> String {
    let mut key = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            key.push(' ');
        }
        key.push_str(t.as_str());
    }
    key
}

/// Corpus-level BLEU-4 of `hypotheses` against aligned single `references`.
pub fn bleu(hypotheses: &[Vec<Token>], references: &[Vec<Token>]) -> Result<BleuScore, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut hyp_length = 0usize;
    let mut ref_length = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_length += hyp.len();
        ref_length += reference.len();
        for n in 1..=4usize {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<String, u64> = HashMap::new();
            if reference.len() >= n {
                for gram in reference.windows(n) {
                    *ref_counts.entry(ngram_key(gram)).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<String, u64> = HashMap::new();
            for gram in hyp.windows(n) {
                *hyp_counts.entry(ngram_key(gram)).or_insert(0) += 1;
            }
            total[n - 1] += (hyp.len() - n + 1) as u64;
            for (gram, count) in hyp_counts {
                let clip = ref_counts.get(&gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }

    let mut raw = [0.0f64; 4];
    let mut smoothed = [0.0f64; 4];
    for n in 0..4 {
        // an order with no hypothesis n-grams at all is vacuously perfect,
        // which keeps bleu(h, h) == 100 for corpora of short sentences
        raw[n] = if total[n] == 0 {
            1.0
        } else {
            matched[n] as f64 / total[n] as f64
        };
        smoothed[n] = if raw[n] == 0.0 { PRECISION_EPSILON } else { raw[n] };
    }
    let brevity_penalty = if hyp_length == 0 {
        0.0
    } else if hyp_length < ref_length {
        (1.0 - ref_length as f64 / hyp_length as f64).exp()
    } else {
        1.0
    };
    let geo = |p: &[f64; 4]| -> f64 {
        if p.iter().any(|&x| x == 0.0) {
            0.0
        } else {
            (p.iter().map(|&x| x.ln()).sum::<f64>() / 4.0).exp()
        }
    };
    Ok(BleuScore {
        bleu: brevity_penalty * geo(&smoothed) * 100.0,
        bleu_unsmoothed: brevity_penalty * geo(&raw) * 100.0,
        precisions: smoothed,
        brevity_penalty,
        hyp_length,
        ref_length,
    })
}

/// Counts greedy left-to-right disjoint occurrences of `pattern` in `seq`.
fn disjoint_occurrences(seq: &[Token], pattern: &[Token]) -> usize {
    if pattern.is_empty() || pattern.len() > seq.len() {
        return 0;
    }
    let mut count = 0;
    let mut i = 0;
    while i + pattern.len() <= seq.len() {
        if seq[i..i + pattern.len()] == pattern[..] {
            count += 1;
            i += pattern.len();
        } else {
            i += 1;
        }
    }
    count
}

/// Scores constraint generation: per sentence, each expected constraint is
/// counted as generated iff its target tokens occur in the hypothesis, with
/// identical constraints requiring disjoint occurrences.
pub fn term_usage(
    hypotheses: &[Vec<Token>],
    expected_constraints: &[Vec<Vec<Token>>],
) -> Result<TermUsage, EvalError> {
    if hypotheses.len() != expected_constraints.len() {
        return Err(EvalError::ConstraintMismatch {
            hypotheses: hypotheses.len(),
            constraints: expected_constraints.len(),
        });
    }
    let mut generated = 0usize;
    let mut total = 0usize;
    for (hyp, constraints) in hypotheses.iter().zip(expected_constraints) {
        let mut groups: HashMap<&[Token], usize> = HashMap::new();
        for constraint in constraints {
            *groups.entry(constraint.as_slice()).or_insert(0) += 1;
        }
        total += constraints.len();
        for (pattern, multiplicity) in groups {
            generated += multiplicity.min(disjoint_occurrences(hyp, pattern));
        }
    }
    let term_pct = if total == 0 {
        0.0
    } else {
        100.0 * generated as f64 / total as f64
    };
    Ok(TermUsage {
        generated,
        total,
        term_pct,
    })
}

/// Combines [`bleu`] and [`term_usage`] into one report.
pub fn evaluate(
    hypotheses: &[Vec<Token>],
    references: &[Vec<Token>],
    expected_constraints: &[Vec<Vec<Token>>],
) -> Result<EvalReport, EvalError> {
    let b = bleu(hypotheses, references)?;
    let t = term_usage(hypotheses, expected_constraints)?;
    Ok(EvalReport {
        bleu: b.bleu,
        bleu_unsmoothed: b.bleu_unsmoothed,
        ngram_precisions: b.precisions,
        brevity_penalty: b.brevity_penalty,
        hyp_length: b.hyp_length,
        ref_length: b.ref_length,
        term_pct: t.term_pct,
        constraints_generated: t.generated,
        constraints_total: t.total,
    })
}
