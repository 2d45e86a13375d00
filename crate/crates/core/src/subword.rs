//! Joint byte-pair encoding: learn merge operations over a token multiset,
//! segment tokens into subword units, and reverse the segmentation.
//!
//! Non-final units of a segmented token carry the reserved `@@` continuation
//! suffix, so joining is a pure text transform. Protected tokens (the inline
//! tags and `MASK`) are never segmented and never counted in the merge
//! statistics.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{self, CorpusError, Token};
use crate::reserved::{BPE_CONTINUATION, PROTECTED_TOKENS};

const MERGES_HEADER: &str = "terminmt-bpe v1";

#[derive(Error, Debug)]
pub enum BpeError {
    #[error("cannot learn merges from an empty corpus")]
    EmptyCorpus,
    #[error("num_merges must be >= 1")]
    ZeroMerges,
    #[error("dangling continuation marker at end of unit sequence (after {0:?})")]
    DanglingContinuation(String),
    #[error("joined unit produced invalid token: {0}")]
    InvalidJoin(#[source] CorpusError),
    #[error("{path}: {reason} (line {line})")]
    MalformedMergesFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] CorpusError),
}

/// An ordered list of merge rules plus the set of protected tokens.
#[derive(Clone, Debug)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    protected: BTreeSet<String>,
}

impl BpeModel {
    fn from_merges(merges: Vec<(String, String)>, protected: BTreeSet<String>) -> Self {
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, pair)| (pair, i))
            .collect();
        BpeModel {
            merges,
            ranks,
            protected,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn protected(&self) -> &BTreeSet<String> {
        &self.protected
    }

    /// Segments each token into subword units; protected tokens pass through
    /// as single units. Non-final units carry the continuation suffix.
    pub fn apply(&self, tokens: &[Token]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        for token in tokens {
            out.extend(self.segment(token.as_str()));
        }
        out
    }

    /// Segments one token's text.
    pub fn segment(&self, text: &str) -> Vec<String> {
        if self.protected.contains(text) {
            return vec![text.to_string()];
        }
        let mut symbols: Vec<String> = text.chars().map(|c| c.to_string()).collect();
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len().saturating_sub(1) {
                if let Some(&rank) = self
                    .ranks
                    .get(&(symbols[i].clone(), symbols[i + 1].clone()))
                {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let pair = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
                    merged.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        let last = symbols.len().saturating_sub(1);
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if i < last {
                    format!("{s}{BPE_CONTINUATION}")
                } else {
                    s
                }
            })
            .collect()
    }

    /// Writes the merge rules: a version header line, then one
    /// space-separated pair per line in priority order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BpeError> {
        let mut text = String::from(MERGES_HEADER);
        text.push('\n');
        for (a, b) in &self.merges {
            text.push_str(a);
            text.push(' ');
            text.push_str(b);
            text.push('\n');
        }
        corpus::write_atomic(path.as_ref(), text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BpeError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let text = String::from_utf8(bytes).map_err(|e| CorpusError::Encoding {
            path: path.to_path_buf(),
            offset: e.utf8_error().valid_up_to(),
        })?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == MERGES_HEADER => {}
            other => {
                return Err(BpeError::MalformedMergesFile {
                    path: path.to_path_buf(),
                    line: 0,
                    reason: format!(
                        "expected header {MERGES_HEADER:?}, found {:?}",
                        other.map(|(_, l)| l).unwrap_or("")
                    ),
                })
            }
        }
        let mut merges = Vec::new();
        for (line_no, line) in lines {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()));
                }
                _ => {
                    return Err(BpeError::MalformedMergesFile {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: "expected exactly two space-separated symbols".into(),
                    })
                }
            }
        }
        Ok(Self::from_merges(merges, default_protected()))
    }
}

fn default_protected() -> BTreeSet<String> {
    PROTECTED_TOKENS.iter().map(|s| s.to_string()).collect()
}

/// Learns up to `num_merges` merge operations from a token multiset by
/// repeatedly merging the most frequent adjacent symbol pair; equal counts
/// are broken toward the lexicographically smaller pair. Learning stops
/// early once no pair occurs at least twice.
pub fn learn_bpe<'a, I>(tokens: I, num_merges: usize) -> Result<BpeModel, BpeError>
where
    I: IntoIterator<Item = &'a Token>,
{
    learn_bpe_with_protected(tokens, num_merges, default_protected())
}

/// [`learn_bpe`] with additional protected tokens beyond the built-in tags.
pub fn learn_bpe_with_protected<'a, I>(
    tokens: I,
    num_merges: usize,
    protected: BTreeSet<String>,
) -> Result<BpeModel, BpeError>
where
    I: IntoIterator<Item = &'a Token>,
{
    if num_merges == 0 {
        return Err(BpeError::ZeroMerges);
    }
    // word-type counts; protected tokens are excluded from the statistics
    let mut type_counts: HashMap<&str, u64> = HashMap::new();
    for token in tokens {
        if !protected.contains(token.as_str()) {
            *type_counts.entry(token.as_str()).or_insert(0) += 1;
        }
    }
    if type_counts.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, u64)> = type_counts
        .into_iter()
        .map(|(text, count)| (text.chars().map(|c| c.to_string()).collect(), count))
        .collect();
    // deterministic iteration order for the recount below
    words.sort();

    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, count) in &words {
            for window in symbols.windows(2) {
                *pair_counts
                    .entry((window[0].as_str(), window[1].as_str()))
                    .or_insert(0) += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&(_, count)| count >= 2)
            .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let Some(((left, right), _)) = best else { break };
        let pair = (left.to_string(), right.to_string());
        for (symbols, _) in &mut words {
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
                    merged.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = merged;
        }
        merges.push(pair);
    }
    Ok(BpeModel::from_merges(merges, protected))
}

/// Exact inverse of [`BpeModel::apply`]: strips continuation markers and
/// glues marked units to their successor. A marker on the final unit of the
/// sequence is an error.
pub fn join_bpe<S: AsRef<str>>(units: &[S]) -> Result<Vec<Token>, BpeError> {
    let mut tokens = Vec::new();
    let mut pending = String::new();
    for unit in units {
        let unit = unit.as_ref();
        if let Some(stem) = unit.strip_suffix(BPE_CONTINUATION) {
            pending.push_str(stem);
        } else {
            pending.push_str(unit);
            tokens.push(Token::new(std::mem::take(&mut pending)).map_err(BpeError::InvalidJoin)?);
        }
    }
    if !pending.is_empty() {
        return Err(BpeError::DanglingContinuation(pending));
    }
    Ok(tokens)
}

/// Lenient join for model output: a dangling trailing marker is kept as a
/// plain token instead of failing, and empty fragments are dropped. Decoding
/// may legitimately produce malformed unit sequences.
pub fn join_bpe_lossy<S: AsRef<str>>(units: &[S]) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut pending = String::new();
    for unit in units {
        let unit = unit.as_ref();
        if let Some(stem) = unit.strip_suffix(BPE_CONTINUATION) {
            pending.push_str(stem);
        } else {
            pending.push_str(unit);
            if !pending.is_empty() {
                tokens.push(Token::unchecked(std::mem::take(&mut pending)));
            }
        }
    }
    if !pending.is_empty() {
        tokens.push(Token::unchecked(pending));
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn learn_from(text: &str, merges: usize) -> BpeModel {
        let tokens = tokenize(text);
        learn_bpe(tokens.iter(), merges).unwrap()
    }

    #[test]
    fn single_pair_corpus_learns_that_pair() {
        let tokens: Vec<Token> = (0..5).map(|_| Token::new("aa").unwrap()).collect();
        let model = learn_bpe(tokens.iter(), 1).unwrap();
        assert_eq!(model.merges(), [("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn learning_stops_when_no_pair_repeats() {
        let tokens = vec![Token::new("ab").unwrap()];
        let model = learn_bpe(tokens.iter(), 10).unwrap();
        assert!(model.merges().is_empty(), "single occurrence is never merged");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let tokens: Vec<Token> = Vec::new();
        assert!(matches!(learn_bpe(tokens.iter(), 5), Err(BpeError::EmptyCorpus)));
        assert!(matches!(
            learn_bpe(tokenize("<S> MASK").iter(), 5),
            Err(BpeError::EmptyCorpus)
        ));
    }

    #[test]
    fn protected_tokens_pass_through_unsplit() {
        let model = learn_from("lower lower lowest", 3);
        let units = model.apply(&tokenize("<S> MASK <C> </C>"));
        assert_eq!(units, ["<S>", "MASK", "<C>", "</C>"]);
    }

    #[test]
    fn apply_and_join_round_trip() {
        let model = learn_from("low low low low low lowest lowest newer newer wider", 6);
        for text in ["low", "lowest", "newer", "unseen", "zzz"] {
            let tokens = tokenize(text);
            let units = model.apply(&tokens);
            assert_eq!(join_bpe(&units).unwrap(), tokens, "word {text:?}");
        }
    }

    #[test]
    fn unseen_characters_fall_back_to_single_symbols() {
        let model = learn_from("aa aa aa", 1);
        let units = model.segment("xyz");
        assert_eq!(units, ["x@@", "y@@", "z"]);
    }

    #[test]
    fn join_rejects_trailing_marker() {
        assert!(matches!(
            join_bpe(&["ab@@"]),
            Err(BpeError::DanglingContinuation(_))
        ));
        assert!(join_bpe(&[] as &[&str]).unwrap().is_empty());
    }

    #[test]
    fn join_lossy_tolerates_trailing_marker() {
        let tokens = join_bpe_lossy(&["ab@@", "c", "de@@"]);
        let texts: Vec<&str> = tokens.iter().map(Token::as_str).collect();
        assert_eq!(texts, ["abc", "de"]);
    }

    #[test]
    fn merge_list_is_prefix_stable() {
        let corpus = "low low low lowest lowest newer newer new wide wider widest";
        let small = learn_from(corpus, 3);
        let large = learn_from(corpus, 8);
        assert_eq!(small.merges(), &large.merges()[..small.merges().len()]);
    }

    #[test]
    fn merges_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        let model = learn_from("low low low low lowest lowest", 4);
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("terminmt-bpe v1\n"), "version header first");
        let loaded = BpeModel::load(&path).unwrap();
        assert_eq!(loaded.merges(), model.merges());
    }

    #[test]
    fn merges_file_bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        std::fs::write(&path, "not-a-header\na b\n").unwrap();
        assert!(matches!(
            BpeModel::load(&path),
            Err(BpeError::MalformedMergesFile { .. })
        ));
    }

    #[test]
    fn segmentation_is_deterministic() {
        let model = learn_from("banana banana bandana", 5);
        let once = model.segment("bananaband");
        let twice = model.segment("bananaband");
        assert_eq!(once, twice);
    }
}
