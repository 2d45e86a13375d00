//! Deterministic synthetic bilingual corpus and terminology generation.
//!
//! The synthetic language is a token-level bijection: regular source word
//! `s<i>` translates to `t<i>`, and each dictionary entry `k` owns a partner
//! pair `p<k> -> c<k>` so that every constraint-target word also occurs as an
//! ordinary vocabulary item. A dictionary entry maps a regular source word
//! `s<i_k>` to the constraint word `c<k>`; in sentences designated as
//! term-grounded, that source word is translated as `c<k>` instead of its
//! bijective partner, which is exactly the situation an inline constraint
//! annotation resolves. Train and test dictionaries are disjoint, and test
//! entries are never term-grounded in the training data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{ParallelCorpus, ParallelPair, Token};
use crate::terminology::{TermEntry, Terminology};

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("dictionary of {dict} entries exceeds source vocabulary of {vocab} words")]
    DictTooLarge { dict: usize, vocab: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Regular source vocabulary size (bijective words, dictionary sources).
    pub source_vocab: usize,
    /// Regular target vocabulary size; must equal `source_vocab`.
    pub target_vocab: usize,
    /// Inclusive sentence length range.
    pub sentence_len: (usize, usize),
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub train_dict: usize,
    pub test_dict: usize,
    /// Fraction of training sentences that carry a term-grounded translation.
    pub substitution_rate: f64,
    /// Swap adjacent target pairs with probability 0.2 (non-monotone noise).
    pub swap_adjacent: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            source_vocab: 80,
            target_vocab: 80,
            sentence_len: (4, 9),
            train_size: 5000,
            valid_size: 300,
            test_size: 200,
            train_dict: 50,
            test_dict: 10,
            substitution_rate: 0.25,
            swap_adjacent: false,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.source_vocab == 0 || self.target_vocab == 0 {
            return Err(SynthError::InvalidSpec("vocabulary sizes must be positive".into()));
        }
        if self.source_vocab != self.target_vocab {
            return Err(SynthError::InvalidSpec(format!(
                "bijective language needs equal vocabulary sizes, got {} and {}",
                self.source_vocab, self.target_vocab
            )));
        }
        if self.sentence_len.0 == 0 || self.sentence_len.0 > self.sentence_len.1 {
            return Err(SynthError::InvalidSpec(format!(
                "invalid sentence length range {:?}",
                self.sentence_len
            )));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(SynthError::InvalidSpec(
                "train and test corpora must be non-empty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.substitution_rate) {
            return Err(SynthError::InvalidSpec(format!(
                "substitution rate {} outside [0, 1]",
                self.substitution_rate
            )));
        }
        let dict = self.train_dict + self.test_dict;
        if dict > self.source_vocab {
            return Err(SynthError::DictTooLarge {
                dict,
                vocab: self.source_vocab,
            });
        }
        if dict > 0 && self.source_vocab + dict < 3 {
            return Err(SynthError::InvalidSpec(
                "term grounding needs at least 3 distinct source words".into(),
            ));
        }
        Ok(())
    }
}

/// Everything one experiment needs.
pub struct SynthData {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
    pub train_terms: Terminology,
    pub test_terms: Terminology,
}

/// Internal word table. Source indices `0..s` are regular words, indices
/// `s..s+d` are the partner words of dictionary entries.
struct Language {
    source_vocab: usize,
    dict_count: usize,
}

impl Language {
    fn source_word(&self, index: usize) -> Token {
        if index < self.source_vocab {
            Token::new(format!("s{index:03}")).unwrap()
        } else {
            Token::new(format!("p{:03}", index - self.source_vocab)).unwrap()
        }
    }

    fn target_word(&self, source_index: usize) -> Token {
        if source_index < self.source_vocab {
            Token::new(format!("t{source_index:03}")).unwrap()
        } else {
            Token::new(format!("c{:03}", source_index - self.source_vocab)).unwrap()
        }
    }

    fn constraint_word(&self, entry: usize) -> Token {
        Token::new(format!("c{entry:03}")).unwrap()
    }

    fn total_source_words(&self) -> usize {
        self.source_vocab + self.dict_count
    }
}

/// A sentence together with its optional term grounding.
struct SentencePlan {
    words: Vec<usize>,
    /// `(position, dictionary entry index)` whose translation is overridden.
    grounding: Option<(usize, usize)>,
}

fn plan_sentence(
    lang: &Language,
    spec: &SynthSpec,
    grounded_entry: Option<(usize, usize)>, // (entry index, entry's source word index)
    rng: &mut ChaCha8Rng,
) -> SentencePlan {
    let len = rng.gen_range(spec.sentence_len.0..=spec.sentence_len.1);
    let mut words: Vec<usize> = (0..len)
        .map(|_| rng.gen_range(0..lang.total_source_words()))
        .collect();
    let grounding = grounded_entry.map(|(entry, source_index)| {
        let position = rng.gen_range(0..len);
        let partner_index = lang.source_vocab + entry;
        for (q, word) in words.iter_mut().enumerate() {
            if q != position {
                // keep the grounded word and its partner unique in the sentence
                while *word == source_index || *word == partner_index {
                    *word = rng.gen_range(0..lang.total_source_words());
                }
            }
        }
        words[position] = source_index;
        (position, entry)
    });
    SentencePlan { words, grounding }
}

fn realize(lang: &Language, plan: &SentencePlan, spec: &SynthSpec, rng: &mut ChaCha8Rng, id: usize) -> ParallelPair {
    let source: Vec<Token> = plan.words.iter().map(|&w| lang.source_word(w)).collect();
    let mut target: Vec<Token> = plan
        .words
        .iter()
        .enumerate()
        .map(|(pos, &w)| match plan.grounding {
            Some((p, entry)) if p == pos => lang.constraint_word(entry),
            _ => lang.target_word(w),
        })
        .collect();
    if spec.swap_adjacent {
        let mut i = 0;
        while i + 1 < target.len() {
            if rng.gen_bool(0.2) {
                target.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
    }
    ParallelPair { source, target, id }
}

/// Generates the train/valid/test corpora and the two disjoint
/// terminologies; fully deterministic for a fixed spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lang = Language {
        source_vocab: spec.source_vocab,
        dict_count: spec.train_dict + spec.test_dict,
    };

    // dictionary sources: a seeded draw of distinct regular words
    let mut source_indices: Vec<usize> = (0..spec.source_vocab).collect();
    source_indices.shuffle(&mut rng);
    source_indices.truncate(lang.dict_count);

    let entry = |k: usize| TermEntry {
        source_tokens: vec![lang.source_word(source_indices[k])],
        target_tokens: vec![lang.constraint_word(k)],
        entry_id: if k < spec.train_dict { k } else { k - spec.train_dict },
    };
    let train_terms = Terminology::new((0..spec.train_dict).map(entry).collect());
    let test_terms =
        Terminology::new((spec.train_dict..lang.dict_count).map(entry).collect());

    let make_corpus = |size: usize,
                           rng: &mut ChaCha8Rng,
                           mut pick_entry: Box<dyn FnMut(&mut ChaCha8Rng) -> Option<usize>>|
     -> ParallelCorpus {
        let pairs = (0..size)
            .map(|id| {
                let grounded = pick_entry(rng).map(|k| (k, source_indices[k]));
                let plan = plan_sentence(&lang, spec, grounded, rng);
                realize(&lang, &plan, spec, rng, id)
            })
            .collect();
        ParallelCorpus {
            pairs,
            source_lang: "syn-src".into(),
            target_lang: "syn-tgt".into(),
        }
    };

    let train_dict = spec.train_dict;
    let substitution_rate = spec.substitution_rate;
    let train = make_corpus(
        spec.train_size,
        &mut rng,
        Box::new(move |rng| {
            (train_dict > 0 && rng.gen_bool(substitution_rate))
                .then(|| rng.gen_range(0..train_dict))
        }),
    );
    let valid = make_corpus(spec.valid_size, &mut rng, Box::new(|_| None));
    let test_dict = spec.test_dict;
    let test = make_corpus(
        spec.test_size,
        &mut rng,
        Box::new(move |rng| {
            (test_dict > 0).then(|| train_dict + rng.gen_range(0..test_dict))
        }),
    );

    Ok(SynthData {
        train,
        valid,
        test,
        train_terms,
        test_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terminology::{exclude_overlap, match_terms};

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            train_size: 50,
            valid_size: 10,
            test_size: 10,
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train.pairs, b.train.pairs);
        assert_eq!(a.test.pairs, b.test.pairs);
        assert_eq!(a.train_terms.entries(), b.train_terms.entries());
    }

    #[test]
    fn zero_dictionary_gives_plain_bijective_corpus() {
        let spec = SynthSpec {
            train_dict: 0,
            test_dict: 0,
            train_size: 30,
            valid_size: 5,
            test_size: 5,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        assert!(data.train_terms.is_empty());
        for pair in &data.train.pairs {
            for (s, t) in pair.source.iter().zip(&pair.target) {
                // s### -> t###, p-words cannot occur with an empty dictionary
                assert_eq!(t.as_str(), format!("t{}", &s.as_str()[1..]));
            }
        }
    }

    #[test]
    fn dictionaries_are_disjoint_by_construction() {
        let data = generate(&SynthSpec {
            train_size: 20,
            valid_size: 5,
            test_size: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(data.train_terms.len(), 50);
        assert_eq!(data.test_terms.len(), 10);
        let filtered = exclude_overlap(&data.train_terms, &data.test_terms);
        assert_eq!(filtered.len(), data.train_terms.len());
    }

    #[test]
    fn test_sentences_each_carry_a_test_term_match() {
        let data = generate(&SynthSpec {
            train_size: 20,
            valid_size: 5,
            test_size: 40,
            ..SynthSpec::default()
        })
        .unwrap();
        for pair in &data.test.pairs {
            let matches = match_terms(pair, &data.test_terms);
            assert!(!matches.is_empty(), "test pair {} has no test-term match", pair.id);
        }
    }

    #[test]
    fn test_terms_never_grounded_in_training() {
        let data = generate(&SynthSpec {
            train_size: 300,
            valid_size: 5,
            test_size: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        // a test entry would be "grounded" if its source word co-occurred
        // with its constraint word at the bijective position; the generator
        // only ever grounds train entries
        for pair in &data.train.pairs {
            for (pos, s) in pair.source.iter().enumerate() {
                for e in data.test_terms.entries() {
                    if s == &e.source_tokens[0] {
                        assert_ne!(
                            pair.target[pos], e.target_tokens[0],
                            "test term grounded in training pair {}",
                            pair.id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn substitution_rate_one_makes_every_pair_matchable() {
        let spec = SynthSpec {
            substitution_rate: 1.0,
            train_size: 100,
            valid_size: 5,
            test_size: 5,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        for pair in &data.train.pairs {
            assert!(!match_terms(pair, &data.train_terms).is_empty());
        }
    }

    #[test]
    fn oversized_dictionary_is_rejected() {
        let spec = SynthSpec {
            source_vocab: 30,
            target_vocab: 30,
            train_dict: 25,
            test_dict: 10,
            ..SynthSpec::default()
        };
        assert!(matches!(
            generate(&spec),
            Err(SynthError::DictTooLarge { dict: 35, vocab: 30 })
        ));
    }

    #[test]
    fn swap_noise_keeps_tokens_permuted_only() {
        let spec = SynthSpec {
            swap_adjacent: true,
            train_size: 30,
            valid_size: 5,
            test_size: 5,
            train_dict: 0,
            test_dict: 0,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        for pair in &data.train.pairs {
            let mut expected: Vec<&str> = pair
                .source
                .iter()
                .map(|s| s.as_str())
                .collect();
            // multiset equality after the swap noise
            let mut translated: Vec<String> = expected
                .iter_mut()
                .map(|s| format!("t{}", &s[1..]))
                .collect();
            translated.sort();
            let mut actual: Vec<String> =
                pair.target.iter().map(|t| t.as_str().to_string()).collect();
            actual.sort();
            assert_eq!(translated, actual);
        }
    }
}
