//! Beam-search and greedy decoding.

use ndarray::Array2;

use super::model::Seq2SeqModel;
use super::vocab::Vocabulary;
use super::{NmtError, Real};

/// Control ids the decoder needs; `forbidden` ids are never generated.
#[derive(Clone, Debug)]
pub struct DecodeSpecials {
    pub bos: u32,
    pub eos: u32,
    pub forbidden: Vec<u32>,
}

impl Default for DecodeSpecials {
    fn default() -> Self {
        DecodeSpecials {
            bos: Vocabulary::BOS,
            eos: Vocabulary::EOS,
            forbidden: vec![Vocabulary::PAD],
        }
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    /// Generated ids (no BOS); a finished hypothesis ends with EOS.
    ids: Vec<u32>,
    log_prob: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        if self.ids.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.log_prob / self.ids.len() as f64
        }
    }
}

/// Candidate ordering: higher normalized score first, ties broken by
/// lexicographically smaller token ids.
fn better(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.normalized()
        .partial_cmp(&a.normalized())
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

fn log_softmax_row<F: Real>(logits: &Array2<F>, row: usize) -> Vec<f64> {
    let row = logits.row(row);
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
    let sum: f64 = row.iter().map(|&v| (v.to_f64() - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|&v| v.to_f64() - lse).collect()
}

/// Beam search over completed hypotheses, ranked by length-normalized
/// cumulative log-probability.
///
/// `max_len` bounds the number of generated non-EOS tokens; a hypothesis
/// still alive at that bound is completed by appending EOS (with its
/// log-probability). The returned ids include the terminal EOS. All finished
/// hypotheses are retained until the beam completes; ties are broken toward
/// smaller token ids, so decoding is fully deterministic.
pub fn beam_search<F: Real>(
    model: &Seq2SeqModel<F>,
    source_ids: &[u32],
    beam_size: usize,
    max_len: usize,
    specials: &DecodeSpecials,
) -> Result<Vec<u32>, NmtError> {
    if beam_size == 0 || max_len == 0 {
        return Err(NmtError::InvalidConfig(
            "beam_size and max_len must be >= 1".into(),
        ));
    }
    let (memory, src_len) = model.encode(source_ids)?;

    let mut live = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _step in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut prefix = Vec::with_capacity(hyp.ids.len() + 1);
            prefix.push(specials.bos);
            prefix.extend_from_slice(&hyp.ids);
            let logits = model.decoder_logits(&memory, src_len, &prefix)?;
            let log_probs = log_softmax_row(&logits, prefix.len() - 1);
            for (id, &lp) in log_probs.iter().enumerate() {
                let id = id as u32;
                if id == specials.bos || specials.forbidden.contains(&id) {
                    continue;
                }
                let mut ids = hyp.ids.clone();
                ids.push(id);
                candidates.push(Hypothesis {
                    ids,
                    log_prob: hyp.log_prob + lp,
                });
            }
        }
        candidates.sort_by(better);
        live = Vec::with_capacity(beam_size);
        for cand in candidates {
            if cand.ids.last() == Some(&specials.eos) {
                finished.push(cand);
            } else if live.len() < beam_size {
                live.push(cand);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    // force-complete survivors that never emitted EOS
    for hyp in live {
        let mut prefix = Vec::with_capacity(hyp.ids.len() + 1);
        prefix.push(specials.bos);
        prefix.extend_from_slice(&hyp.ids);
        let logits = model.decoder_logits(&memory, src_len, &prefix)?;
        let log_probs = log_softmax_row(&logits, prefix.len() - 1);
        let mut ids = hyp.ids;
        ids.push(specials.eos);
        finished.push(Hypothesis {
            ids,
            log_prob: hyp.log_prob + log_probs[specials.eos as usize],
        });
    }

    finished.sort_by(better);
    Ok(finished.into_iter().next().map(|h| h.ids).unwrap_or_default())
}

/// Greedy decoding of a batch of sentences, one step across all unfinished
/// sentences at a time. Equivalent to `beam_search` with beam size 1; used
/// for fast validation scoring. Returned ids exclude BOS and EOS.
pub fn greedy_decode_batch<F: Real>(
    model: &Seq2SeqModel<F>,
    sources: &[Vec<u32>],
    max_len: usize,
    specials: &DecodeSpecials,
) -> Result<Vec<Vec<u32>>, NmtError> {
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); sources.len()];
    let mut done: Vec<bool> = vec![false; sources.len()];
    let mut memories = Vec::with_capacity(sources.len());
    for src in sources {
        memories.push(model.encode(src)?);
    }
    for _step in 0..max_len {
        let mut all_done = true;
        for (i, (memory, src_len)) in memories.iter().enumerate() {
            if done[i] {
                continue;
            }
            all_done = false;
            let mut prefix = Vec::with_capacity(outputs[i].len() + 1);
            prefix.push(specials.bos);
            prefix.extend_from_slice(&outputs[i]);
            let logits = model.decoder_logits(memory, *src_len, &prefix)?;
            let log_probs = log_softmax_row(&logits, prefix.len() - 1);
            let mut best = (f64::NEG_INFINITY, 0u32);
            for (id, &lp) in log_probs.iter().enumerate() {
                let id = id as u32;
                if id == specials.bos || specials.forbidden.contains(&id) {
                    continue;
                }
                if lp > best.0 {
                    best = (lp, id);
                }
            }
            if best.1 == specials.eos {
                done[i] = true;
            } else {
                outputs[i].push(best.1);
            }
        }
        if all_done {
            break;
        }
    }
    Ok(outputs)
}
