//! Step-synchronous beam search with shallow LM fusion, a per-token length
//! reward and a thresholded attention-coverage term.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::config::ConfigError;
use crate::lm::{LmRunner, LmState};
use crate::model::{Decoder, DecoderState, EncoderOutput, Model, ModelError};
use crate::text::{BOS_ID, EOS_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub lm_weight: f64,
    pub length_reward: f64,
    pub coverage_weight: f64,
    pub coverage_threshold: f64,
    pub beam_width: usize,
    pub max_output_factor: f64,
}

crate::kv_config!(FusionWeights { lm_weight, length_reward, coverage_weight, coverage_threshold, beam_width, max_output_factor });

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { lm_weight: 0.3, length_reward: 0.0, coverage_weight: 0.0, coverage_threshold: 0.5, beam_width: 60, max_output_factor: 1.5 }
    }
}

impl FusionWeights {
    /// Plain model score: no LM, length or coverage terms.
    pub fn greedy() -> Self {
        FusionWeights { lm_weight: 0.0, length_reward: 0.0, coverage_weight: 0.0, beam_width: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.beam_width == 0 {
            return Err(ConfigError::invalid("beam_width", "must be ≥ 1"));
        }
        if !(self.max_output_factor > 0.0) {
            return Err(ConfigError::invalid("max_output_factor", "must be positive"));
        }
        if !(self.lm_weight >= 0.0) {
            return Err(ConfigError::invalid("lm_weight", "must be ≥ 0"));
        }
        Ok(())
    }

    /// Output length cap (tokens including EOS) for `frames` encoder frames.
    pub fn max_len(&self, frames: usize) -> usize {
        ((self.max_output_factor * frames as f64).floor() as usize).max(1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model and LM vocabularies differ ({0} vs {1})")]
    VocabMismatch(usize, usize),
}

/// Output of one decoder step: next-token log-probabilities, the attention
/// used to produce them, and the state after consuming the input token.
pub struct StepOutput<S> {
    pub log_probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub state: S,
}

/// Autoregressive scorer driven by beam search.
pub trait StepModel {
    type State: Clone;
    fn initial(&self) -> Self::State;
    fn step(&self, state: &Self::State, token: usize) -> Result<StepOutput<Self::State>, SearchError>;
    fn frames(&self) -> usize;
    fn vocab(&self) -> usize;
}

/// Language model consulted by shallow fusion.
pub trait LanguageModel {
    type State: Clone;
    fn initial(&self) -> Self::State;
    fn step(&self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State), SearchError>;
}

/// The attention decoder over one encoded utterance.
pub struct AsrScorer<'a> {
    pub decoder: &'a Decoder,
    pub enc: EncoderOutput,
}

impl StepModel for AsrScorer<'_> {
    type State = DecoderState;
    fn initial(&self) -> DecoderState {
        self.decoder.start_state(&self.enc)
    }
    fn step(&self, state: &DecoderState, token: usize) -> Result<StepOutput<DecoderState>, SearchError> {
        let (log_probs, state) = self.decoder.step(state, token, &self.enc)?;
        Ok(StepOutput { log_probs, attention: state.attn.clone(), state })
    }
    fn frames(&self) -> usize {
        self.enc.frames()
    }
    fn vocab(&self) -> usize {
        self.decoder.config.vocab_size
    }
}

impl LanguageModel for LmRunner {
    type State = LmState;
    fn initial(&self) -> LmState {
        self.initial_state()
    }
    fn step(&self, state: &LmState, token: usize) -> Result<(Vec<f64>, LmState), SearchError> {
        Ok(LmRunner::step(self, state, token)?)
    }
}

/// A partial or finished hypothesis. `tokens` excludes BOS and EOS; `len`
/// counts every emitted token including EOS.
#[derive(Clone, Debug)]
pub struct Hypothesis<S, L> {
    pub tokens: Vec<usize>,
    pub model_logp: f64,
    pub lm_logp: f64,
    pub len: usize,
    pub attention_mass: Vec<f64>,
    pub decoder_state: S,
    pub lm_state: Option<L>,
    pub finished: bool,
}

impl<S, L> Hypothesis<S, L> {
    /// Number of frames whose accumulated attention reaches `threshold`.
    pub fn coverage(&self, threshold: f64) -> usize {
        self.attention_mass.iter().filter(|&&m| m >= threshold).count()
    }
}

/// `log P_model + λ·log P_lm + β·len + γ·coverage`.
pub fn fusion_score<S, L>(h: &Hypothesis<S, L>, w: &FusionWeights) -> f64 {
    h.model_logp + w.lm_weight * h.lm_logp + w.length_reward * h.len as f64 + w.coverage_weight * h.coverage(w.coverage_threshold) as f64
}

struct Node<S, L> {
    hyp: Hypothesis<S, L>,
    score: f64,
    next_lp: Vec<f64>,
    next_attn: Vec<f64>,
    next_lm: Option<Vec<f64>>,
}

/// Ranked search output; `finished` is false when the best hypothesis only
/// ended because the length cap forced EOS.
#[derive(Clone, Debug)]
pub struct SearchResult<S, L> {
    pub nbest: Vec<(Hypothesis<S, L>, f64)>,
    pub finished: bool,
}

impl<S, L> SearchResult<S, L> {
    pub fn best(&self) -> &Hypothesis<S, L> {
        &self.nbest[0].0
    }
    pub fn best_score(&self) -> f64 {
        self.nbest[0].1
    }
}

fn rank<S, L>(a: &(Hypothesis<S, L>, f64), b: &(Hypothesis<S, L>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.tokens.cmp(&b.0.tokens)).then_with(|| a.0.finished.cmp(&b.0.finished))
}

/// Beam search. Every live hypothesis is expanded over the vocabulary
/// (except BOS); the best `beam_width` expansions survive, those ending in
/// EOS move to the finished pool. The last position under the length cap
/// admits only EOS; hypotheses closed there are flagged unfinished. Search
/// stops when no live hypothesis can still beat the best finished score
/// (model and LM log-probabilities never increase; length and coverage gains
/// are bounded by the remaining length and uncovered frames).
pub fn beam_search<M: StepModel, L: LanguageModel>(
    model: &M,
    lm: Option<&L>,
    w: &FusionWeights,
    carried_lm_state: Option<L::State>,
) -> Result<SearchResult<M::State, L::State>, SearchError> {
    w.validate()?;
    let frames = model.frames();
    let max_len = w.max_len(frames);
    let v = model.vocab();
    let lm_weight = if lm.is_some() { w.lm_weight } else { 0.0 };
    let wl = FusionWeights { lm_weight, ..w.clone() };

    let root = model.step(&model.initial(), BOS_ID)?;
    let (next_lm, lm_state) = match lm {
        Some(l) => {
            let (lp, st) = l.step(&carried_lm_state.unwrap_or_else(|| l.initial()), BOS_ID)?;
            if lp.len() != v {
                return Err(SearchError::VocabMismatch(v, lp.len()));
            }
            (Some(lp), Some(st))
        }
        None => (None, None),
    };
    let hyp = Hypothesis {
        tokens: Vec::new(),
        model_logp: 0.0,
        lm_logp: 0.0,
        len: 0,
        attention_mass: vec![0.0; frames],
        decoder_state: root.state,
        lm_state,
        finished: false,
    };
    let mut live = vec![Node { score: fusion_score(&hyp, &wl), hyp, next_lp: root.log_probs, next_attn: root.attention, next_lm }];
    let mut finished: Vec<(Hypothesis<M::State, L::State>, f64)> = Vec::new();
    let beta = wl.length_reward.max(0.0);
    let gamma = wl.coverage_weight.max(0.0);

    while !live.is_empty() {
        // (parent, token, score, model_logp, lm_logp, mass)
        let mut cands: Vec<(usize, usize, f64, Hypothesis<(), ()>)> = Vec::new();
        for (pi, node) in live.iter().enumerate() {
            for tok in 0..v {
                // the last position only admits EOS: a prefix at the cap can never finish
                if tok == BOS_ID || (tok != EOS_ID && node.hyp.len + 1 >= max_len) {
                    continue;
                }
                let mut mass = node.hyp.attention_mass.clone();
                for (m, a) in mass.iter_mut().zip(&node.next_attn) {
                    *m += a;
                }
                let mut tokens = node.hyp.tokens.clone();
                if tok != EOS_ID {
                    tokens.push(tok);
                }
                let h = Hypothesis {
                    tokens,
                    model_logp: node.hyp.model_logp + node.next_lp[tok],
                    lm_logp: node.hyp.lm_logp + node.next_lm.as_ref().map_or(0.0, |l| l[tok]),
                    len: node.hyp.len + 1,
                    attention_mass: mass,
                    decoder_state: (),
                    lm_state: None,
                    finished: tok == EOS_ID && node.hyp.len + 1 < max_len,
                };
                cands.push((pi, tok, fusion_score(&h, &wl), h));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.3.tokens.cmp(&b.3.tokens)).then_with(|| a.3.finished.cmp(&b.3.finished)));
        cands.truncate(w.beam_width);
        let mut next_live = Vec::new();
        for (pi, tok, score, h) in cands {
            let parent = &live[pi];
            let full = Hypothesis {
                tokens: h.tokens,
                model_logp: h.model_logp,
                lm_logp: h.lm_logp,
                len: h.len,
                attention_mass: h.attention_mass,
                decoder_state: parent.hyp.decoder_state.clone(),
                lm_state: parent.hyp.lm_state.clone(),
                finished: h.finished,
            };
            if tok == EOS_ID {
                finished.push((full, score));
            } else {
                let out = model.step(&full.decoder_state, tok)?;
                let (next_lm, lm_state) = match (lm, &full.lm_state) {
                    (Some(l), Some(st)) => {
                        let (lp, st) = l.step(st, tok)?;
                        (Some(lp), Some(st))
                    }
                    _ => (None, None),
                };
                next_live.push(Node {
                    hyp: Hypothesis { decoder_state: out.state, lm_state, ..full },
                    score,
                    next_lp: out.log_probs,
                    next_attn: out.attention,
                    next_lm,
                });
            }
        }
        live = next_live;
        if let Some(best_done) = finished.iter().map(|f| f.1).max_by(f64::total_cmp) {
            let bound = live
                .iter()
                .map(|n| n.score + beta * (max_len - n.hyp.len) as f64 + gamma * (frames - n.hyp.coverage(w.coverage_threshold)) as f64)
                .max_by(f64::total_cmp);
            if bound.is_none_or(|b| b <= best_done) {
                break;
            }
        }
    }
    finished.sort_by(rank);
    let complete = finished[0].0.finished;
    Ok(SearchResult { nbest: finished, finished: complete })
}

/// LM state after consuming the single-best hypothesis and EOS; the initial
/// state when there is no LM state to carry.
pub fn carry_lm_state<S, L: LanguageModel>(lm: &L, result: &SearchResult<S, L::State>) -> Result<L::State, SearchError> {
    let best = result.best();
    match &best.lm_state {
        Some(st) => Ok(lm.step(st, EOS_ID)?.1),
        None => Ok(lm.initial()),
    }
}

/// Arg-max decoding: feeds back the most likely token until EOS; the last
/// position under the length cap is reserved for EOS, as in beam search.
pub fn greedy_decode(model: &Model, features: &Tensor, max_output_factor: f64) -> Result<Vec<usize>, ModelError> {
    let dec = model.decoder()?;
    let enc = dec.prepare(model.encode(features)?);
    let max_len = ((max_output_factor * enc.frames() as f64).floor() as usize).max(1);
    let mut state = dec.start_state(&enc);
    let mut prev = BOS_ID;
    let mut out = Vec::new();
    for _ in 1..max_len {
        let (lp, next) = dec.step(&state, prev, &enc)?;
        let mut best = usize::MAX;
        for (i, &l) in lp.iter().enumerate() {
            if i != BOS_ID && (best == usize::MAX || l > lp[best]) {
                best = i;
            }
        }
        if best == EOS_ID {
            break;
        }
        out.push(best);
        state = next;
        prev = best;
    }
    Ok(out)
}

/// How the external LM takes part in decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmMode {
    None,
    Reset,
    CrossUtterance,
}

impl std::fmt::Display for LmMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LmMode::None => "none",
            LmMode::Reset => "reset",
            LmMode::CrossUtterance => "cross",
        })
    }
}

impl std::str::FromStr for LmMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(LmMode::None),
            "reset" => Ok(LmMode::Reset),
            "cross" => Ok(LmMode::CrossUtterance),
            _ => Err(format!("expected none, reset or cross, got `{}`", s)),
        }
    }
}

/// Decoded utterance: ranked hypotheses with score components.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub finished: bool,
    pub nbest: Vec<NBestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub model_logp: f64,
    pub lm_logp: f64,
    pub len: usize,
    pub coverage: usize,
}

/// Decodes groups of utterances (features already prepared). Groups run in
/// parallel; within a group cross-utterance mode carries the LM state of the
/// previous single-best hypothesis. Results keep input order.
pub fn decode_groups(
    model: &Model,
    lm: Option<&LmRunner>,
    groups: &[Vec<Tensor>],
    w: &FusionWeights,
    mode: LmMode,
    nbest: usize,
) -> Result<Vec<Vec<Decoded>>, SearchError> {
    let decoder = model.decoder()?;
    let lm = if mode == LmMode::None { None } else { lm };
    groups
        .par_iter()
        .map(|group| {
            let mut carried: Option<LmState> = None;
            let mut out = Vec::with_capacity(group.len());
            for feats in group {
                let scorer = AsrScorer { decoder: &decoder, enc: decoder.prepare(model.encode(feats)?) };
                let res = beam_search(&scorer, lm, w, if mode == LmMode::CrossUtterance { carried.take() } else { None })?;
                if let (Some(l), LmMode::CrossUtterance) = (lm, mode) {
                    carried = Some(carry_lm_state(l, &res)?);
                }
                let wl = FusionWeights { lm_weight: if lm.is_some() { w.lm_weight } else { 0.0 }, ..w.clone() };
                out.push(Decoded {
                    finished: res.finished,
                    nbest: res
                        .nbest
                        .iter()
                        .take(nbest.max(1))
                        .map(|(h, s)| NBestEntry {
                            tokens: h.tokens.clone(),
                            score: *s,
                            model_logp: h.model_logp,
                            lm_logp: h.lm_logp,
                            len: h.len,
                            coverage: h.coverage(wl.coverage_threshold),
                        })
                        .collect(),
                });
            }
            Ok(out)
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "beam,wer_nolm,wer_lm,wer_lm_xutt";

/// One row of a beam-size sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub beam: usize,
    pub wer_nolm: f64,
    pub wer_lm: f64,
    pub wer_lm_xutt: f64,
}

impl std::fmt::Display for SweepRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{:.6},{:.6},{:.6}", self.beam, self.wer_nolm, self.wer_lm, self.wer_lm_xutt)
    }
}

/// WER for every beam width without LM, with LM, and with cross-utterance
/// LM state. `score` maps the best token sequences (in group order) to a WER.
pub fn sweep_beam(
    model: &Model,
    lm: &LmRunner,
    groups: &[Vec<Tensor>],
    beams: &[usize],
    w: &FusionWeights,
    score: impl Fn(&[Vec<Decoded>]) -> f64,
) -> Result<Vec<SweepRow>, SearchError> {
    let mut rows = Vec::new();
    for &beam in beams {
        let wb = FusionWeights { beam_width: beam, ..w.clone() };
        let mut wers = [0.0; 3];
        for (i, mode) in [LmMode::None, LmMode::Reset, LmMode::CrossUtterance].into_iter().enumerate() {
            wers[i] = score(&decode_groups(model, Some(lm), groups, &wb, mode, 1)?);
        }
        rows.push(SweepRow { beam, wer_nolm: wers[0], wer_lm: wers[1], wer_lm_xutt: wers[2] });
    }
    Ok(rows)
}
