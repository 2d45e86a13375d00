//! Bilingual terminology handling and constraint-aware corpus augmentation.
//!
//! A matched term is rewritten inline in the source sentence as
//! `<S> source-term <C> target-term </C>`; with masking enabled each
//! source-term token is replaced by `MASK`. The target sentence is left
//! untouched, but every target token covered by a match is flagged in a
//! per-token constraint mask that later drives the weighted training loss.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{tokenize, CorpusError, ParallelCorpus, ParallelPair, Token};
use crate::reserved::{self, MASK_TOKEN, TAG_CONSTRAINT, TAG_CONSTRAINT_CLOSE, TAG_TERM_OPEN};

#[derive(Error, Debug)]
pub enum TerminologyError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("line {line} of {path}: expected 2 tab-separated columns, found {found}")]
    ColumnCount {
        path: PathBuf,
        line: usize,
        found: usize,
    },
    #[error("line {line} of {path}: empty {side} column")]
    EmptyColumn {
        path: PathBuf,
        line: usize,
        side: &'static str,
    },
    #[error("line {line} of {path}: reserved token {token:?} in terminology entry")]
    ReservedToken {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("annotation rate {0} is outside [0, 1]")]
    InvalidRate(f64),
    #[error("match {index} (source span {start}..{end}) violates constraint-match invariants: {reason}")]
    InvalidMatch {
        index: usize,
        start: usize,
        end: usize,
        reason: &'static str,
    },
}

/// One bilingual dictionary entry; both sides are non-empty token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TermEntry {
    pub source_tokens: Vec<Token>,
    pub target_tokens: Vec<Token>,
    pub entry_id: usize,
}

/// A term dictionary with a lookup index keyed by first source token.
#[derive(Clone, Debug, Default)]
pub struct Terminology {
    entries: Vec<TermEntry>,
    index: HashMap<String, Vec<usize>>,
}

impl Terminology {
    /// Builds a terminology from entries, indexing them by first source token.
    pub fn new(entries: Vec<TermEntry>) -> Self {
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (pos, entry) in entries.iter().enumerate() {
            index
                .entry(entry.source_tokens[0].as_str().to_string())
                .or_default()
                .push(pos);
        }
        Terminology { entries, index }
    }

    pub fn entries(&self) -> &[TermEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, entry_id: usize) -> Option<&TermEntry> {
        self.entries.iter().find(|e| e.entry_id == entry_id)
    }

    /// Entries whose source side starts with `first_token`, in file order.
    pub fn lookup(&self, first_token: &str) -> impl Iterator<Item = &TermEntry> {
        self.index
            .get(first_token)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .map(|&pos| &self.entries[pos])
    }
}

/// Loads a UTF-8 TSV terminology file: `source term<TAB>target term`,
/// one entry per line, `entry_id` equal to the 0-based line number.
pub fn load_terminology(path: impl AsRef<Path>) -> Result<Terminology, TerminologyError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| CorpusError::Encoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    let mut entries = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let columns: Vec<&str> = line.split('\t').collect();
        if columns.len() != 2 {
            return Err(TerminologyError::ColumnCount {
                path: path.to_path_buf(),
                line: line_no,
                found: columns.len(),
            });
        }
        let source_tokens = tokenize(columns[0]);
        let target_tokens = tokenize(columns[1]);
        for (side, tokens) in [("source", &source_tokens), ("target", &target_tokens)] {
            if tokens.is_empty() {
                return Err(TerminologyError::EmptyColumn {
                    path: path.to_path_buf(),
                    line: line_no,
                    side,
                });
            }
            if let Some(t) = tokens.iter().find(|t| reserved::is_reserved(t.as_str())) {
                return Err(TerminologyError::ReservedToken {
                    path: path.to_path_buf(),
                    line: line_no,
                    token: t.as_str().to_string(),
                });
            }
        }
        entries.push(TermEntry {
            source_tokens,
            target_tokens,
            entry_id: line_no,
        });
    }
    Ok(Terminology::new(entries))
}

/// Returns `terms` minus every entry whose (source, target) token pair also
/// appears in `other`. Entry ids are preserved.
pub fn exclude_overlap(terms: &Terminology, other: &Terminology) -> Terminology {
    let kept = terms
        .entries
        .iter()
        .filter(|e| {
            !other
                .entries
                .iter()
                .any(|o| o.source_tokens == e.source_tokens && o.target_tokens == e.target_tokens)
        })
        .cloned()
        .collect();
    Terminology::new(kept)
}

/// A matched constraint: half-open token spans into the source and target
/// sentences, each exactly equal to the entry's respective side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintMatch {
    pub entry_id: usize,
    pub source_span: (usize, usize),
    pub target_span: (usize, usize),
}

/// Finds constraint matches in a sentence pair.
///
/// Source spans are selected greedily left to right, preferring the longest
/// matching entry at each position (ties broken by smallest `entry_id`). A
/// candidate is kept only if its target side still has an unconsumed
/// occurrence in the target sentence; each accepted match consumes the
/// leftmost such occurrence.
pub fn match_terms(pair: &ParallelPair, terms: &Terminology) -> Vec<ConstraintMatch> {
    let mut matches = Vec::new();
    let mut target_used = vec![false; pair.target.len()];
    let mut pos = 0;
    while pos < pair.source.len() {
        let mut best: Option<(&TermEntry, usize)> = None;
        for entry in terms.lookup(pair.source[pos].as_str()) {
            let len = entry.source_tokens.len();
            if pos + len > pair.source.len()
                || pair.source[pos..pos + len] != entry.source_tokens[..]
            {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, _)) => {
                    len > b.source_tokens.len()
                        || (len == b.source_tokens.len() && entry.entry_id < b.entry_id)
                }
            };
            if !better {
                continue;
            }
            if let Some(start) = find_free_occurrence(&pair.target, &entry.target_tokens, &target_used)
            {
                best = Some((entry, start));
            }
        }
        if let Some((entry, target_start)) = best {
            let src_len = entry.source_tokens.len();
            let tgt_len = entry.target_tokens.len();
            for flag in &mut target_used[target_start..target_start + tgt_len] {
                *flag = true;
            }
            matches.push(ConstraintMatch {
                entry_id: entry.entry_id,
                source_span: (pos, pos + src_len),
                target_span: (target_start, target_start + tgt_len),
            });
            pos += src_len;
        } else {
            pos += 1;
        }
    }
    matches
}

/// Leftmost occurrence of `needle` in `haystack` whose positions are all
/// unconsumed, if any.
fn find_free_occurrence(haystack: &[Token], needle: &[Token], used: &[bool]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&start| {
        haystack[start..start + needle.len()] == needle[..]
            && used[start..start + needle.len()].iter().all(|&u| !u)
    })
}

/// A sentence pair together with its matches and augmented source.
///
/// `augmented_source` interleaves the original tokens with tag regions; the
/// number of `<S>` tokens equals the number of matches. The target sentence
/// is unchanged; `target_constraint_mask[t]` is true iff target token `t`
/// lies inside some match's target span.
#[derive(Clone, Debug)]
pub struct AnnotatedPair {
    pub original: ParallelPair,
    pub matches: Vec<ConstraintMatch>,
    pub augmented_source: Vec<Token>,
    pub target_constraint_mask: Vec<bool>,
}

impl AnnotatedPair {
    /// Pass-through annotation: no matches, source unchanged, all-false mask.
    pub fn unannotated(pair: ParallelPair) -> Self {
        let augmented_source = pair.source.clone();
        let target_constraint_mask = vec![false; pair.target.len()];
        AnnotatedPair {
            original: pair,
            matches: Vec::new(),
            augmented_source,
            target_constraint_mask,
        }
    }

    /// Target terms of the matches, in match order; this is what the sidecar
    /// constraint file records for later Term% scoring.
    pub fn expected_constraints(&self, terms: &Terminology) -> Vec<Vec<Token>> {
        self.matches
            .iter()
            .filter_map(|m| terms.entry(m.entry_id))
            .map(|e| e.target_tokens.clone())
            .collect()
    }

    /// Reverses the augmentation: strips tags and constraint-target tokens and
    /// restores any masked run from its entry's source tokens. Returns the
    /// recovered source sentence.
    pub fn recover_source(&self, terms: &Terminology) -> Vec<Token> {
        let mut out = Vec::new();
        let mut i = 0;
        let mut match_no = 0;
        let toks = &self.augmented_source;
        while i < toks.len() {
            if toks[i].as_str() == TAG_TERM_OPEN {
                let inner_start = i + 1;
                let mut j = inner_start;
                while toks[j].as_str() != TAG_CONSTRAINT {
                    j += 1;
                }
                let inner = &toks[inner_start..j];
                if inner.iter().all(|t| t.as_str() == MASK_TOKEN) && !inner.is_empty() {
                    let entry_id = self.matches[match_no].entry_id;
                    let entry = terms
                        .entry(entry_id)
                        .expect("match refers to an entry of this terminology");
                    out.extend(entry.source_tokens.iter().cloned());
                } else {
                    out.extend(inner.iter().cloned());
                }
                while toks[j].as_str() != TAG_CONSTRAINT_CLOSE {
                    j += 1;
                }
                i = j + 1;
                match_no += 1;
            } else {
                out.push(toks[i].clone());
                i += 1;
            }
        }
        out
    }
}

/// Scan-checks the tag grammar: every `<S>` is followed by exactly one `<C>`
/// and then one `</C>`, with no nesting, and tag counts are equal.
pub fn tag_grammar_ok(tokens: &[Token]) -> bool {
    #[derive(PartialEq)]
    enum State {
        Outside,
        AfterOpen,
        InConstraint,
    }
    let mut state = State::Outside;
    let mut opens = 0usize;
    let mut closes = 0usize;
    for token in tokens {
        match (token.as_str(), &state) {
            (TAG_TERM_OPEN, State::Outside) => {
                opens += 1;
                state = State::AfterOpen;
            }
            (TAG_CONSTRAINT, State::AfterOpen) => state = State::InConstraint,
            (TAG_CONSTRAINT_CLOSE, State::InConstraint) => {
                closes += 1;
                state = State::Outside;
            }
            (TAG_TERM_OPEN | TAG_CONSTRAINT | TAG_CONSTRAINT_CLOSE, _) => return false,
            _ => {}
        }
    }
    state == State::Outside && opens == closes
}

fn validate_matches(
    pair: &ParallelPair,
    matches: &[ConstraintMatch],
    terms: &Terminology,
) -> Result<(), TerminologyError> {
    let mut prev_end = 0usize;
    let mut sorted: Vec<&ConstraintMatch> = matches.iter().collect();
    sorted.sort_by_key(|m| m.source_span.0);
    for (index, m) in sorted.iter().enumerate() {
        let (start, end) = m.source_span;
        let invalid = |reason| TerminologyError::InvalidMatch {
            index,
            start,
            end,
            reason,
        };
        if start >= end || end > pair.source.len() {
            return Err(invalid("source span out of range"));
        }
        if start < prev_end {
            return Err(invalid("source spans overlap"));
        }
        prev_end = end;
        let entry = terms
            .entry(m.entry_id)
            .ok_or_else(|| invalid("unknown entry id"))?;
        if pair.source[start..end] != entry.source_tokens[..] {
            return Err(invalid("source span does not equal entry source"));
        }
        let (ts, te) = m.target_span;
        if ts >= te || te > pair.target.len() {
            return Err(invalid("target span out of range"));
        }
        if pair.target[ts..te] != entry.target_tokens[..] {
            return Err(invalid("target span does not equal entry target"));
        }
    }
    Ok(())
}

/// Rewrites each matched source span as `<S> span <C> target-term </C>`,
/// replacing the span by one `MASK` per token when `mask` is true. The
/// matches must satisfy the constraint-match invariants against `pair`.
pub fn apply_tada(
    pair: &ParallelPair,
    matches: &[ConstraintMatch],
    terms: &Terminology,
    mask: bool,
) -> Result<AnnotatedPair, TerminologyError> {
    validate_matches(pair, matches, terms)?;
    let mut matches = matches.to_vec();
    matches.sort_by_key(|m| m.source_span.0);

    let mut augmented = Vec::with_capacity(pair.source.len() + 4 * matches.len());
    let mut pos = 0;
    for m in &matches {
        let (start, end) = m.source_span;
        augmented.extend(pair.source[pos..start].iter().cloned());
        augmented.push(Token::unchecked(TAG_TERM_OPEN));
        if mask {
            augmented.extend((start..end).map(|_| Token::unchecked(MASK_TOKEN)));
        } else {
            augmented.extend(pair.source[start..end].iter().cloned());
        }
        augmented.push(Token::unchecked(TAG_CONSTRAINT));
        let entry = terms.entry(m.entry_id).expect("validated above");
        augmented.extend(entry.target_tokens.iter().cloned());
        augmented.push(Token::unchecked(TAG_CONSTRAINT_CLOSE));
        pos = end;
    }
    augmented.extend(pair.source[pos..].iter().cloned());

    let mut target_constraint_mask = vec![false; pair.target.len()];
    for m in &matches {
        for flag in &mut target_constraint_mask[m.target_span.0..m.target_span.1] {
            *flag = true;
        }
    }
    Ok(AnnotatedPair {
        original: pair.clone(),
        matches,
        augmented_source: augmented,
        target_constraint_mask,
    })
}

/// Annotates `floor(rate * corpus_len)` pairs, drawn uniformly without
/// replacement from the matchable pairs with a generator seeded by `seed`
/// (all matchable pairs when fewer are available). Every other pair passes
/// through unannotated. Output order equals input order.
pub fn annotate_corpus(
    corpus: &ParallelCorpus,
    terms: &Terminology,
    rate: f64,
    mask: bool,
    seed: u64,
) -> Result<Vec<AnnotatedPair>, TerminologyError> {
    if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
        return Err(TerminologyError::InvalidRate(rate));
    }
    let matched: Vec<(usize, Vec<ConstraintMatch>)> = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| (i, match_terms(pair, terms)))
        .filter(|(_, m)| !m.is_empty())
        .collect();

    let want = (rate * corpus.len() as f64).floor() as usize;
    let mut selected: Vec<usize> = (0..matched.len()).collect();
    if want < matched.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        selected.shuffle(&mut rng);
        selected.truncate(want);
    }

    let mut chosen: Vec<Option<&Vec<ConstraintMatch>>> = vec![None; corpus.len()];
    for &k in &selected {
        let (pair_index, ref m) = matched[k];
        chosen[pair_index] = Some(m);
    }

    corpus
        .pairs
        .iter()
        .zip(chosen)
        .map(|(pair, matches)| match matches {
            Some(m) => apply_tada(pair, m, terms, mask),
            None => Ok(AnnotatedPair::unannotated(pair.clone())),
        })
        .collect()
}
