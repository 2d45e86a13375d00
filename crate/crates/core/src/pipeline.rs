//! End-to-end experiment assembly: annotate, segment, train, translate and
//! evaluate one system, plus the annotation-rate ablation grid.
//!
//! Both the command-line `ablation` recipe and the integration suites run
//! through these functions, so results are comparable by construction.

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{CorpusError, ParallelCorpus, Token};
use crate::eval::{self, EvalError, EvalReport};
use crate::nmt::{
    beam_search, train, DecodeSpecials, ModelConfig, NmtError, Seq2SeqModel, TrainConfig,
    TrainExample, TrainLog, ValidationSet, Vocabulary,
};
use crate::subword::{join_bpe_lossy, learn_bpe, BpeError, BpeModel};
use crate::synth::{SynthData, SynthError};
use crate::terminology::{
    annotate_corpus, exclude_overlap, match_terms, AnnotatedPair, TerminologyError,
};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Terminology(#[from] TerminologyError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Nmt(#[from] NmtError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Learns a joint source+target BPE over a raw parallel corpus.
pub fn learn_joint_bpe(corpus: &ParallelCorpus, num_merges: usize) -> Result<BpeModel, BpeError> {
    let tokens = corpus
        .pairs
        .iter()
        .flat_map(|p| p.source.iter().chain(p.target.iter()));
    learn_bpe(tokens, num_merges)
}

/// Segments annotated pairs into training examples, expanding each target
/// token's constraint flag onto all of its subword units.
pub fn segment_examples(annotated: &[AnnotatedPair], bpe: &BpeModel) -> Vec<TrainExample> {
    annotated
        .iter()
        .map(|pair| {
            let source_units = bpe.apply(&pair.augmented_source);
            let mut target_units = Vec::new();
            let mut target_constraints = Vec::new();
            for (token, &flagged) in pair
                .original
                .target
                .iter()
                .zip(&pair.target_constraint_mask)
            {
                for unit in bpe.segment(token.as_str()) {
                    target_units.push(unit);
                    target_constraints.push(flagged);
                }
            }
            TrainExample {
                source_units,
                target_units,
                target_constraints,
            }
        })
        .collect()
}

/// Vocabulary over every unit occurring in the examples, sources first.
pub fn build_vocabulary(examples: &[TrainExample]) -> Vocabulary {
    let units = examples
        .iter()
        .flat_map(|ex| ex.source_units.iter().chain(ex.target_units.iter()));
    Vocabulary::from_units(units)
}

fn validation_set(valid: &ParallelCorpus, bpe: &BpeModel) -> ValidationSet {
    ValidationSet {
        sources: valid.pairs.iter().map(|p| bpe.apply(&p.source)).collect(),
        target_units: valid.pairs.iter().map(|p| bpe.apply(&p.target)).collect(),
        references: valid.pairs.iter().map(|p| p.target.clone()).collect(),
    }
}

/// A trained system bundled with everything needed to translate raw tokens.
pub struct TranslationSystem {
    pub model: Seq2SeqModel<f32>,
    pub vocab: Vocabulary,
    pub beam_size: usize,
}

impl TranslationSystem {
    /// Segment-encode-decode-join for one sentence of (possibly tagged)
    /// source tokens.
    pub fn translate(&self, source: &[Token], bpe: &BpeModel) -> Result<Vec<Token>, NmtError> {
        let units = bpe.apply(source);
        let ids = self.vocab.encode(&units);
        let max_len = (ids.len() * 2 + 8).min(self.model.config().max_positions - 1);
        let out = beam_search(
            &self.model,
            &ids,
            self.beam_size,
            max_len,
            &DecodeSpecials::default(),
        )?;
        let mut out_units = self.vocab.decode(&out);
        // the terminal EOS is dropped by decode(); nothing else to strip
        out_units.retain(|u| !u.is_empty());
        Ok(join_bpe_lossy(&out_units))
    }
}

/// One experimental condition on a fixed synthetic dataset.
#[derive(Clone, Debug)]
pub struct CellConfig {
    /// Fraction of training sentences annotated with constraints.
    pub rate: f64,
    /// Mask the source side of each annotated term.
    pub mask: bool,
    /// Annotate the test inputs (false for the unconstrained baseline).
    pub annotate_test: bool,
    /// Loss-weight schedule; `[(1.0, 1.0)]` is plain cross-entropy.
    pub alpha_schedule: Vec<(f64, f64)>,
    /// Master seed for annotation sampling, model init and batch order.
    pub seed: u64,
}

/// Hyper-parameters shared by all cells of an experiment.
#[derive(Clone, Debug)]
pub struct PipelineParams {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam_size: usize,
}

/// Result of one trained and evaluated cell.
pub struct CellOutcome {
    pub report: EvalReport,
    pub log: TrainLog,
    pub system: TranslationSystem,
}

/// Trains one system under `cell` and scores it on the synthetic test set.
pub fn run_cell(
    data: &SynthData,
    bpe: &BpeModel,
    params: &PipelineParams,
    cell: &CellConfig,
) -> Result<CellOutcome, PipelineError> {
    let train_terms = exclude_overlap(&data.train_terms, &data.test_terms);
    let annotated = annotate_corpus(&data.train, &train_terms, cell.rate, cell.mask, cell.seed)?;
    let examples = segment_examples(&annotated, bpe);
    let vocab = build_vocabulary(&examples);
    let valid = validation_set(&data.valid, bpe);

    let mut train_cfg = params.train.clone();
    train_cfg.seed = cell.seed;
    train_cfg.alpha_schedule = cell.alpha_schedule.clone();
    let mut model = Seq2SeqModel::<f32>::new(
        params.model.clone(),
        vocab.len(),
        cell.seed.wrapping_add(0x5EED_0001),
    )?;
    let log = train(&mut model, &vocab, &examples, Some(&valid), &train_cfg)?;

    let system = TranslationSystem {
        model,
        vocab,
        beam_size: params.beam_size,
    };
    let report = evaluate_on_test(&system, data, bpe, cell.annotate_test, cell.mask)?;
    Ok(CellOutcome {
        report,
        log,
        system,
    })
}

/// Translates the test set (annotated or raw) and scores BLEU and Term%
/// against the test references and test-term constraints.
pub fn evaluate_on_test(
    system: &TranslationSystem,
    data: &SynthData,
    bpe: &BpeModel,
    annotate_test: bool,
    mask: bool,
) -> Result<EvalReport, PipelineError> {
    let annotated_test = annotate_corpus(&data.test, &data.test_terms, 1.0, mask, 0)?;
    let mut hypotheses = Vec::with_capacity(data.test.len());
    for pair in &annotated_test {
        let source = if annotate_test {
            &pair.augmented_source
        } else {
            &pair.original.source
        };
        hypotheses.push(system.translate(source, bpe)?);
    }
    let references: Vec<Vec<Token>> = data.test.pairs.iter().map(|p| p.target.clone()).collect();
    let constraints: Vec<Vec<Vec<Token>>> = data
        .test
        .pairs
        .iter()
        .map(|p| {
            match_terms(p, &data.test_terms)
                .iter()
                .filter_map(|m| data.test_terms.entry(m.entry_id))
                .map(|e| e.target_tokens.clone())
                .collect()
        })
        .collect();
    Ok(eval::evaluate(&hypotheses, &references, &constraints)?)
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub rate: f64,
    pub masked: bool,
    pub seed: u64,
    pub term_pct: f64,
    pub bleu: f64,
}

/// Runs `rates x {plain, masked} x seeds` cells (training each with plain
/// cross-entropy) in parallel and returns them in deterministic grid order.
pub fn run_ablation(
    data: &SynthData,
    bpe: &BpeModel,
    params: &PipelineParams,
    rates: &[f64],
    seeds: &[u64],
) -> Vec<(AblationCell, Result<(), PipelineError>)> {
    let mut grid = Vec::new();
    for &rate in rates {
        for masked in [false, true] {
            for &seed in seeds {
                grid.push((rate, masked, seed));
            }
        }
    }
    grid.par_iter()
        .map(|&(rate, masked, seed)| {
            let cell = CellConfig {
                rate,
                mask: masked,
                annotate_test: true,
                alpha_schedule: vec![(1.0, 1.0)],
                seed,
            };
            let mut result = AblationCell {
                rate,
                masked,
                seed,
                term_pct: f64::NAN,
                bleu: f64::NAN,
            };
            match run_cell(data, bpe, params, &cell) {
                Ok(outcome) => {
                    result.term_pct = outcome.report.term_pct;
                    result.bleu = outcome.report.bleu;
                    (result, Ok(()))
                }
                Err(e) => (result, Err(e)),
            }
        })
        .collect()
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
