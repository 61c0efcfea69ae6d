use std::cmp::Ordering;

use super::{decode_step, encode, encoder_input, KVCache, ModelParams, TokenId, TokenSeq, EOS};
use crate::diff::ops::log_softmax_row;
use crate::{Error, Result};

/// Beam-search settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            length_penalty: 1.0,
            max_len: 32,
        }
    }
}

impl BeamConfig {
    /// Default settings with `max_len` derived from the source length and
    /// capped by the model's position budget.
    pub fn for_source(src_len: usize, max_positions: usize) -> Self {
        BeamConfig {
            max_len: (src_len + 10).min(max_positions.saturating_sub(1)).max(1),
            ..Default::default()
        }
    }
}

/// A decoded sequence with its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the language tag and without EOS.
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities, EOS included when finished.
    pub log_prob: f64,
    /// `log_prob / len^length_penalty` where `len` counts EOS.
    pub score: f64,
    /// True when no hypothesis emitted EOS within `max_len`.
    pub truncated: bool,
}

impl Hypothesis {
    pub fn into_seq(self, language_tag: TokenId) -> TokenSeq {
        TokenSeq::new(language_tag, self.tokens)
    }
}

/// Source of next-token log-probabilities for the beam.
pub trait StepDecoder {
    type State: Clone;

    fn initial(&self) -> Result<Self::State>;

    /// Consumes the last entry of `inputs` (the decoder inputs so far, tag
    /// first) and returns log-probabilities over the vocabulary together
    /// with the successor state.
    fn step(&self, state: &Self::State, inputs: &[TokenId]) -> Result<(Vec<f64>, Self::State)>;
}

/// Plain incremental decoding with a [`KVCache`].
pub struct CachedDecoder<'a> {
    params: &'a ModelParams,
    src: Vec<TokenId>,
}

impl<'a> CachedDecoder<'a> {
    pub fn new(params: &'a ModelParams, src: &[TokenId]) -> Self {
        CachedDecoder {
            params,
            src: encoder_input(src),
        }
    }
}

impl StepDecoder for CachedDecoder<'_> {
    type State = KVCache;

    fn initial(&self) -> Result<KVCache> {
        let enc = encode(self.params, &self.src)?;
        KVCache::new(self.params, &enc)
    }

    fn step(&self, state: &KVCache, inputs: &[TokenId]) -> Result<(Vec<f64>, KVCache)> {
        let y_prev = *inputs.last().expect("non-empty decoder inputs");
        let out = decode_step(self.params, y_prev, state)?;
        Ok((log_softmax_row(out.logits.data()), out.cache))
    }
}

struct Live<S> {
    inputs: Vec<TokenId>,
    log_prob: f64,
    state: S,
}

struct Finished<S> {
    tokens: Vec<TokenId>,
    log_prob: f64,
    score: f64,
    state: S,
}

fn normalized(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len as f64).powf(penalty)
}

/// True when no live prefix, normalised at its most favourable admissible
/// length, outscores the best finished hypothesis.
fn cannot_improve<S, T>(finished: &[Finished<S>], live: &[Live<T>], cfg: &BeamConfig) -> bool {
    let Some(best) = finished.iter().map(|f| f.score).max_by(f64::total_cmp) else {
        return false;
    };
    live.iter().all(|h| {
        let next = h.inputs.len();
        let bound = normalized(h.log_prob, next, cfg.length_penalty).max(normalized(
            h.log_prob,
            cfg.max_len,
            cfg.length_penalty,
        ));
        bound <= best
    })
}

/// Higher score first, then lexicographically smaller tokens, then shorter.
fn better<S>(a: &Finished<S>, b: &Finished<S>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

/// Beam search over any [`StepDecoder`].
///
/// Each step ranks all `(hypothesis, token)` extensions by cumulative
/// log-probability (ties: lower token id, then lower parent rank) and looks
/// at the top `2k`. An EOS extension ranked within the first `k` is
/// finalised (at step `max_len`, every EOS extension is); the first `k`
/// non-EOS extensions form the next beam. Search stops once at least `k`
/// hypotheses are finalised and no live prefix can beat the best of them, or
/// after `max_len` tokens, and returns the finalised hypothesis with the best
/// length-normalised score.
///
/// With `k = 1` the live path is the greedy path, so the greedy output is a
/// prefix of the result and never scores higher.
pub fn beam_search_with<D: StepDecoder>(
    decoder: &D,
    language_tag: TokenId,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    beam_search_state(decoder, language_tag, cfg).map(|(h, _)| h)
}

/// [`beam_search_with`] that also returns the decoder state of the chosen
/// hypothesis after its last step.
pub fn beam_search_state<D: StepDecoder>(
    decoder: &D,
    language_tag: TokenId,
    cfg: &BeamConfig,
) -> Result<(Hypothesis, D::State)> {
    if cfg.beam_size == 0 {
        return Err(Error::Contract("beam_size must be at least 1".into()));
    }
    let k = cfg.beam_size;
    let mut live = vec![Live {
        inputs: vec![language_tag],
        log_prob: 0.0,
        state: decoder.initial()?,
    }];
    let mut finished: Vec<Finished<D::State>> = Vec::new();
    for step in 1..=cfg.max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, TokenId, usize)> = Vec::new();
        for (rank, h) in live.iter().enumerate() {
            let (lp, next) = decoder.step(&h.state, &h.inputs)?;
            for (tok, &l) in lp.iter().enumerate() {
                cands.push((h.log_prob + l, tok, rank));
            }
            expanded.push(next);
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        let mut next_live = Vec::with_capacity(k);
        let last = step == cfg.max_len;
        let window = if last { cands.len() } else { 2 * k };
        for (i, &(lp, tok, rank)) in cands.iter().take(window).enumerate() {
            if tok == EOS {
                if i < k || last {
                    let tokens = live[rank].inputs[1..].to_vec();
                    finished.push(Finished {
                        score: normalized(lp, tokens.len() + 1, cfg.length_penalty),
                        tokens,
                        log_prob: lp,
                        state: expanded[rank].clone(),
                    });
                }
            } else if next_live.len() < k && !last {
                let mut inputs = live[rank].inputs.clone();
                inputs.push(tok);
                next_live.push(Live {
                    inputs,
                    log_prob: lp,
                    state: expanded[rank].clone(),
                });
            }
        }
        if next_live.is_empty() || (finished.len() >= k && cannot_improve(&finished, &next_live, cfg)) {
            break;
        }
        live = next_live;
    }
    if let Some(best) = finished.into_iter().min_by(better) {
        let hyp = Hypothesis {
            tokens: best.tokens,
            log_prob: best.log_prob,
            score: best.score,
            truncated: false,
        };
        return Ok((hyp, best.state));
    }
    let best = live
        .into_iter()
        .max_by(|a, b| a.log_prob.total_cmp(&b.log_prob))
        .expect("beam never empty");
    let tokens = best.inputs[1..].to_vec();
    let hyp = Hypothesis {
        score: normalized(best.log_prob, tokens.len().max(1), cfg.length_penalty),
        tokens,
        log_prob: best.log_prob,
        truncated: true,
    };
    Ok((hyp, best.state))
}

/// Baseline beam search of `src` into the language of `language_tag`.
pub fn beam_search(
    params: &ModelParams,
    src: &[TokenId],
    language_tag: TokenId,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    beam_search_with(&CachedDecoder::new(params, src), language_tag, cfg)
}

/// Argmax decoding (ties to the lowest id), stopping at EOS or `max_len`.
pub fn greedy_decode<D: StepDecoder>(
    decoder: &D,
    language_tag: TokenId,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    let mut state = decoder.initial()?;
    let mut inputs = vec![language_tag];
    let mut log_prob = 0.0;
    for step in 1..=max_len {
        let (lp, next) = decoder.step(&state, &inputs)?;
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        if best == EOS {
            log_prob += lp[best];
            let tokens = inputs[1..].to_vec();
            return Ok(Hypothesis {
                score: normalized(log_prob, tokens.len() + 1, length_penalty),
                tokens,
                log_prob,
                truncated: false,
            });
        }
        if step == max_len {
            break;
        }
        log_prob += lp[best];
        inputs.push(best);
        state = next;
    }
    let tokens = inputs[1..].to_vec();
    Ok(Hypothesis {
        score: normalized(log_prob, tokens.len().max(1), length_penalty),
        tokens,
        log_prob,
        truncated: true,
    })
}
