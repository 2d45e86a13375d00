//! Tokenization and parallel-corpus input/output.
//!
//! The tokenizer is a deliberately small deterministic rule tokenizer: lines
//! are split on whitespace and a fixed set of punctuation characters is
//! detached into standalone tokens. Hyphenated and apostrophe-internal words
//! stay whole. [`detokenize`] is its inverse up to whitespace normalization:
//! `tokenize(detokenize(t)) == t` for every `t` produced by [`tokenize`].

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::reserved;

/// Punctuation detached into standalone tokens.
const SPLIT_PUNCT: [char; 11] = ['.', ',', ';', ':', '!', '?', '(', ')', '"', '«', '»'];
/// Punctuation that attaches to the preceding token when detokenizing.
const ATTACH_LEFT: [char; 9] = ['.', ',', ';', ':', '!', '?', ')', '»', '"'];
/// Punctuation that attaches to the following token when detokenizing.
const ATTACH_RIGHT: [char; 2] = ['(', '«'];

#[derive(Error, Debug)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8 (byte offset {offset})")]
    Encoding { path: PathBuf, offset: usize },
    #[error(
        "line count mismatch: {source_path} has {source_lines} lines \
         but {target_path} has {target_lines}"
    )]
    LineCountMismatch {
        source_path: PathBuf,
        source_lines: usize,
        target_path: PathBuf,
        target_lines: usize,
    },
    #[error("empty line {line} in {path} (parallel corpora may not contain empty sentences)")]
    EmptyLine { path: PathBuf, line: usize },
    #[error("reserved token {token:?} on line {line} of {path}")]
    ReservedToken {
        token: String,
        line: usize,
        path: PathBuf,
    },
    #[error("invalid token {0:?}: tokens must be non-empty and whitespace-free")]
    InvalidToken(String),
}

/// A single surface token: non-empty, with no internal whitespace.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Result<Self, CorpusError> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(CorpusError::InvalidToken(text));
        }
        Ok(Token(text))
    }

    /// Constructs a token from text already known to be non-empty and
    /// whitespace-free (e.g. a slice of an existing token).
    pub(crate) fn unchecked(text: impl Into<String>) -> Self {
        let text = text.into();
        debug_assert!(!text.is_empty() && !text.chars().any(char::is_whitespace));
        Token(text)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// One aligned sentence pair. `id` is the 0-based line number in the corpus
/// files and is unique within a [`ParallelCorpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
    pub id: usize,
}

/// An ordered parallel corpus; pair order equals file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<ParallelPair>,
    pub source_lang: String,
    pub target_lang: String,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Splits one line into tokens. Whitespace separates tokens and each
/// character from the detachable punctuation set becomes its own token.
/// Deterministic; empty input yields an empty sequence.
pub fn tokenize(raw_line: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    for chunk in raw_line.split_whitespace() {
        let mut run = String::new();
        for ch in chunk.chars() {
            if SPLIT_PUNCT.contains(&ch) {
                if !run.is_empty() {
                    tokens.push(Token::unchecked(std::mem::take(&mut run)));
                }
                tokens.push(Token::unchecked(ch.to_string()));
            } else {
                run.push(ch);
            }
        }
        if !run.is_empty() {
            tokens.push(Token::unchecked(run));
        }
    }
    tokens
}

fn is_single(token: &Token, set: &[char]) -> bool {
    let mut chars = token.as_str().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => set.contains(&c),
        _ => false,
    }
}

/// Joins tokens back into a line, attaching punctuation to its neighbour
/// (no space before `.,;:!?)»"`, none after `(«`). Inverse of [`tokenize`]
/// up to whitespace normalization.
pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for (i, token) in tokens.iter().enumerate() {
        let no_space = i == 0 || glue_next || is_single(token, &ATTACH_LEFT);
        if !no_space {
            out.push(' ');
        }
        out.push_str(token.as_str());
        glue_next = is_single(token, &ATTACH_RIGHT);
    }
    out
}

fn read_utf8(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|e| CorpusError::Encoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

fn tokenize_file(
    path: &Path,
    allow_reserved: bool,
    allow_empty: bool,
) -> Result<Vec<Vec<Token>>, CorpusError> {
    let text = read_utf8(path)?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = tokenize(line);
        if tokens.is_empty() && !allow_empty {
            return Err(CorpusError::EmptyLine {
                path: path.to_path_buf(),
                line: i,
            });
        }
        if !allow_reserved {
            if let Some(t) = tokens.iter().find(|t| reserved::is_reserved(t.as_str())) {
                return Err(CorpusError::ReservedToken {
                    token: t.as_str().to_string(),
                    line: i,
                    path: path.to_path_buf(),
                });
            }
        }
        lines.push(tokens);
    }
    Ok(lines)
}

fn load_parallel_with(
    source_path: &Path,
    target_path: &Path,
    allow_reserved: bool,
) -> Result<ParallelCorpus, CorpusError> {
    let source_lines = tokenize_file(source_path, allow_reserved, false)?;
    let target_lines = tokenize_file(target_path, allow_reserved, false)?;
    if source_lines.len() != target_lines.len() {
        return Err(CorpusError::LineCountMismatch {
            source_path: source_path.to_path_buf(),
            source_lines: source_lines.len(),
            target_path: target_path.to_path_buf(),
            target_lines: target_lines.len(),
        });
    }
    let pairs = source_lines
        .into_iter()
        .zip(target_lines)
        .enumerate()
        .map(|(id, (source, target))| ParallelPair { source, target, id })
        .collect();
    Ok(ParallelCorpus {
        pairs,
        source_lang: String::new(),
        target_lang: String::new(),
    })
}

/// Loads a tokenized parallel corpus from a source file and a target file
/// with equal line counts. Reserved tokens and empty lines are load errors.
pub fn load_parallel(
    source_path: impl AsRef<Path>,
    target_path: impl AsRef<Path>,
) -> Result<ParallelCorpus, CorpusError> {
    load_parallel_with(source_path.as_ref(), target_path.as_ref(), false)
}

/// Like [`load_parallel`] but permits the reserved tag tokens, for reading
/// corpora that have already been augmented.
pub fn load_parallel_tagged(
    source_path: impl AsRef<Path>,
    target_path: impl AsRef<Path>,
) -> Result<ParallelCorpus, CorpusError> {
    load_parallel_with(source_path.as_ref(), target_path.as_ref(), true)
}

/// Reads one file as token lines, permitting reserved tokens and empty lines.
/// Used for hypothesis/reference files and already-segmented corpora.
pub fn read_token_lines(path: impl AsRef<Path>) -> Result<Vec<Vec<Token>>, CorpusError> {
    tokenize_file(path.as_ref(), true, true)
}

/// Writes lines of space-joined items to `path` atomically: the content goes
/// to a temporary sibling file which is then renamed over the target, so a
/// failure never leaves a partial file behind.
pub fn write_joined_lines<S: AsRef<str>>(
    path: impl AsRef<Path>,
    lines: &[Vec<S>],
) -> Result<(), CorpusError> {
    let mut text = String::new();
    for line in lines {
        let mut first = true;
        for item in line {
            if !first {
                text.push(' ');
            }
            text.push_str(item.as_ref());
            first = false;
        }
        text.push('\n');
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Atomically replaces `path` with `bytes` (write to temp sibling + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut file = fs::File::create(&tmp).map_err(io_err)?;
        file.write_all(bytes).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(Token::as_str).collect()
    }

    #[test]
    fn tokenize_splits_on_whitespace_and_detaches_punctuation() {
        let tokens = tokenize(
            "His critics state that this will just increase the budgetary deficit.",
        );
        let t = texts(&tokens);
        assert_eq!(
            &t[t.len() - 3..],
            &["budgetary", "deficit", "."],
            "sentence-final period becomes its own token"
        );
    }

    #[test]
    fn tokenize_empty_input() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t ").is_empty());
    }

    #[test]
    fn tokenize_internal_punctuation() {
        assert_eq!(texts(&tokenize("a,b")), ["a", ",", "b"]);
        assert_eq!(texts(&tokenize("(a).")), ["(", "a", ")", "."]);
        assert_eq!(texts(&tokenize("\"quoted\"")), ["\"", "quoted", "\""]);
        assert_eq!(texts(&tokenize("«guillemets»")), ["«", "guillemets", "»"]);
    }

    #[test]
    fn tokenize_keeps_hyphens_and_apostrophes_whole() {
        assert_eq!(texts(&tokenize("well-known")), ["well-known"]);
        assert_eq!(texts(&tokenize("l'état d'esprit")), ["l'état", "d'esprit"]);
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        assert_eq!(detokenize(&tokenize("a,b")), "a, b");
        assert_eq!(detokenize(&tokenize("Haushaltsdefizit.")), "Haushaltsdefizit.");
        assert_eq!(detokenize(&tokenize("(a b)")), "(a b)");
        assert_eq!(detokenize(&[]), "");
    }

    #[test]
    fn round_trip_examples() {
        for line in [
            "His critics state that this will just increase the budgetary deficit.",
            "a,b",
            "Ein Problem ist es, Wohnungen zu finden.",
            "multi «quoted» (and ; odd) ! cases ?",
        ] {
            let tokens = tokenize(line);
            assert_eq!(tokenize(&detokenize(&tokens)), tokens, "line: {line}");
        }
    }

    #[test]
    fn token_rejects_empty_and_whitespace() {
        assert!(Token::new("").is_err());
        assert!(Token::new("a b").is_err());
        assert!(Token::new("a\tb").is_err());
        assert!(Token::new("ok").is_ok());
    }

    #[test]
    fn load_parallel_builds_pairs_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.src");
        let tgt = dir.path().join("c.tgt");
        fs::write(&src, "one two\nthree\nfour five six\n").unwrap();
        fs::write(&tgt, "eins zwei\ndrei\nvier fünf sechs\n").unwrap();
        let corpus = load_parallel(&src, &tgt).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.pairs[1].id, 1);
        assert_eq!(texts(&corpus.pairs[1].source), ["three"]);
        assert_eq!(texts(&corpus.pairs[2].target), ["vier", "fünf", "sechs"]);
    }

    #[test]
    fn load_parallel_line_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.src");
        let tgt = dir.path().join("c.tgt");
        fs::write(&src, "a\nb\nc\n").unwrap();
        fs::write(&tgt, "a\nb\nc\nd\n").unwrap();
        let err = load_parallel(&src, &tgt).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "names both counts: {msg}");
    }

    #[test]
    fn load_parallel_empty_files_give_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.src");
        let tgt = dir.path().join("c.tgt");
        fs::write(&src, "").unwrap();
        fs::write(&tgt, "").unwrap();
        assert!(load_parallel(&src, &tgt).unwrap().is_empty());
    }

    #[test]
    fn load_parallel_rejects_empty_line_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.src");
        let tgt = dir.path().join("c.tgt");
        fs::write(&src, "a\n\nc\n").unwrap();
        fs::write(&tgt, "a\nb\nc\n").unwrap();
        let err = load_parallel(&src, &tgt).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyLine { line: 1, .. }), "{err}");
    }

    #[test]
    fn load_parallel_rejects_invalid_utf8() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.src");
        let tgt = dir.path().join("c.tgt");
        fs::write(&src, [0x61, 0xff, 0xfe, 0x0a]).unwrap();
        fs::write(&tgt, "a\n").unwrap();
        assert!(matches!(
            load_parallel(&src, &tgt).unwrap_err(),
            CorpusError::Encoding { .. }
        ));
    }

    #[test]
    fn load_parallel_rejects_reserved_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.src");
        let tgt = dir.path().join("c.tgt");
        fs::write(&src, "a <S> b\n").unwrap();
        fs::write(&tgt, "a b\n").unwrap();
        let err = load_parallel(&src, &tgt).unwrap_err();
        assert!(matches!(err, CorpusError::ReservedToken { .. }), "{err}");
        // but the tagged loader accepts them
        assert!(load_parallel_tagged(&src, &tgt).is_ok());
    }

    #[test]
    fn write_joined_lines_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        let lines = vec![vec!["a", "b"], vec!["c"]];
        write_joined_lines(&path, &lines).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a b\nc\n");
        let back = read_token_lines(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].len(), 2);
    }
}
