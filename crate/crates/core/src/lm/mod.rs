//! External LSTM language model over subword tokens, with state carried
//! across the utterances of a conversation group.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{read_checkpoint, write_checkpoint, DType, Graph, ParamStore, Tensor, Var};
use crate::config::{ConfigError, KvConfig};
use crate::layers::{dropout, lstm_cell, lstm_step_graph, matvec, LstmParams, LstmState, LstmVars, Mode, RegularizerMasks, Zoneout};
use crate::model::{init_params, Init, ModelError, ParamSpec};
use crate::text::{BOS_ID, EOS_ID};
use crate::trainer::{clip_global_norm, derive_rng, nesterov_step, OptimizerState, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub lm_vocab: usize,
    pub lm_layers: usize,
    pub lm_width: usize,
    pub lm_embed: usize,
    /// Output projection width; 0 means no projection.
    pub lm_projection: usize,
    pub lm_dropout: f64,
    pub lm_dropconnect: f64,
    /// Label smoothing used during the first half of training.
    pub lm_label_smoothing: f64,
    pub cross_utterance: bool,
    pub max_group_seconds: f64,
}

crate::kv_config!(LmConfig {
    lm_vocab,
    lm_layers,
    lm_width,
    lm_embed,
    lm_projection,
    lm_dropout,
    lm_dropconnect,
    lm_label_smoothing,
    cross_utterance,
    max_group_seconds,
});

impl LmConfig {
    /// Two 2048-unit layers, 512-dim embedding, 128-dim output projection.
    pub fn full() -> Self {
        LmConfig {
            lm_vocab: 603,
            lm_layers: 2,
            lm_width: 2048,
            lm_embed: 512,
            lm_projection: 128,
            lm_dropout: 0.2,
            lm_dropconnect: 0.2,
            lm_label_smoothing: 0.15,
            cross_utterance: true,
            max_group_seconds: 40.0,
        }
    }

    /// The larger-capacity variant: 3072 units, no projection.
    pub fn large() -> Self {
        LmConfig { lm_width: 3072, lm_projection: 0, ..Self::full() }
    }

    pub fn toy(vocab: usize) -> Self {
        LmConfig { lm_vocab: vocab, lm_width: 64, lm_embed: 16, lm_projection: 0, lm_dropout: 0.0, lm_dropconnect: 0.0, ..Self::full() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [("lm_vocab", self.lm_vocab), ("lm_layers", self.lm_layers), ("lm_width", self.lm_width), ("lm_embed", self.lm_embed)] {
            if v == 0 {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        if self.lm_vocab <= EOS_ID {
            return Err(ConfigError::invalid("lm_vocab", "must include BOS and EOS"));
        }
        for (field, p) in [("lm_dropout", self.lm_dropout), ("lm_dropconnect", self.lm_dropconnect), ("lm_label_smoothing", self.lm_label_smoothing)] {
            if !(0.0..1.0).contains(&p) {
                return Err(ConfigError::invalid(field, "must be in [0, 1)"));
            }
        }
        if !(self.max_group_seconds > 0.0) {
            return Err(ConfigError::invalid("max_group_seconds", "must be positive"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        crate::config::render_kv(&self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::full();
        crate::config::apply_all(&mut [&mut c], &crate::config::parse_kv(text)?)?;
        Ok(c)
    }

    fn output_input(&self) -> usize {
        if self.lm_projection > 0 { self.lm_projection } else { self.lm_width }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let spec = |name: String, shape: [usize; 2], init| ParamSpec { name, shape, init };
        let (v, h, e) = (self.lm_vocab, self.lm_width, self.lm_embed);
        let mut out = vec![spec("lm.embed".into(), [v, e], Init::Uniform { fan_in: e })];
        for l in 0..self.lm_layers {
            let d = if l == 0 { e } else { h };
            out.push(spec(format!("lm.{}.W", l), [4 * h, d], Init::Uniform { fan_in: d }));
            out.push(spec(format!("lm.{}.R", l), [4 * h, h], Init::Uniform { fan_in: h }));
            out.push(spec(format!("lm.{}.b", l), [1, 4 * h], Init::LstmBias { hidden: h }));
        }
        if self.lm_projection > 0 {
            out.push(spec("lm.proj.W".into(), [self.lm_projection, h], Init::Uniform { fan_in: h }));
        }
        let o = self.output_input();
        out.push(spec("lm.out.W".into(), [v, o], Init::Uniform { fan_in: o }));
        out.push(spec("lm.out.b".into(), [1, v], Init::Zeros));
        out
    }

    /// Closed form: `V·E + Σ_l 4H(d_l + H + 1) + [P·H] + V·(O + 1)` with
    /// `O = P` when projected and `H` otherwise.
    pub fn num_params(&self) -> usize {
        let (v, h, e) = (self.lm_vocab, self.lm_width, self.lm_embed);
        let lstm: usize = (0..self.lm_layers).map(|l| 4 * h * (if l == 0 { e } else { h } + h + 1)).sum();
        v * e + lstm + self.lm_projection * h + v * (self.output_input() + 1)
    }
}

/// Per-layer recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lm {
    pub config: LmConfig,
    pub params: ParamStore,
}

impl Lm {
    pub fn build(config: LmConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config.param_specs(), seed);
        Ok(Lm { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn initial_state(&self) -> LmState {
        let h = self.config.lm_width;
        LmState { h: vec![vec![0.0; h]; self.config.lm_layers], c: vec![vec![0.0; h]; self.config.lm_layers] }
    }

    /// Plain-vector evaluation view of the parameters.
    pub fn runner(&self) -> Result<LmRunner, ModelError> {
        let get = |k: &str| self.params.get(k).cloned().ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", k)));
        let layers = (0..self.config.lm_layers)
            .map(|l| crate::model::lstm_from(&self.params, &format!("lm.{}", l)))
            .collect::<Result<_, _>>()?;
        Ok(LmRunner {
            config: self.config.clone(),
            embed: get("lm.embed")?,
            layers,
            proj: if self.config.lm_projection > 0 { Some(get("lm.proj.W")?) } else { None },
            out_w: get("lm.out.W")?,
            out_b: get("lm.out.b")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tensors: Vec<(String, Tensor)> = self.params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &self.config.to_text(), &tensors, DType::F64).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck = read_checkpoint(&mut BufReader::new(File::open(path)?)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut lm = Lm::build(LmConfig::from_text(&ck.meta)?, 0)?;
        let mut tensors: std::collections::HashMap<String, Tensor> = ck.tensors.into_iter().collect();
        for (name, t) in lm.params.iter_mut() {
            let v = tensors.remove(name).ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", name)))?;
            if v.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!("{} has shape {:?}, expected {:?}", name, v.shape(), t.shape())));
            }
            *t = v;
        }
        Ok(lm)
    }
}

/// Evaluation-mode language model on plain vectors.
#[derive(Clone, Debug)]
pub struct LmRunner {
    pub config: LmConfig,
    embed: Tensor,
    layers: Vec<LstmParams>,
    proj: Option<Tensor>,
    out_w: Tensor,
    out_b: Tensor,
}

impl LmRunner {
    pub fn initial_state(&self) -> LmState {
        let h = self.config.lm_width;
        LmState { h: vec![vec![0.0; h]; self.config.lm_layers], c: vec![vec![0.0; h]; self.config.lm_layers] }
    }

    /// Consumes `token`; returns log-probabilities of the next token.
    pub fn step(&self, state: &LmState, token: usize) -> Result<(Vec<f64>, LmState), ModelError> {
        let v = self.config.lm_vocab;
        if token >= v {
            return Err(ModelError::TokenOutOfRange { token, vocab: v });
        }
        let h = self.config.lm_width;
        let zeros = vec![0.0; h];
        let mut x = self.embed.row_slice(token).to_vec();
        let mut next = LmState { h: Vec::with_capacity(self.layers.len()), c: Vec::with_capacity(self.layers.len()) };
        for (l, p) in self.layers.iter().enumerate() {
            let (hn, cn) = lstm_cell(p, &p.r, &x, &state.h[l], &state.c[l], &zeros, &zeros);
            x = hn.clone();
            next.h.push(hn);
            next.c.push(cn);
        }
        if let Some(p) = &self.proj {
            x = matvec(p, &x);
        }
        let mut logits = matvec(&self.out_w, &x);
        for (z, b) in logits.iter_mut().zip(self.out_b.data()) {
            *z += b;
        }
        let lse = crate::autodiff::logsumexp(&logits);
        Ok((logits.iter().map(|z| z - lse).collect(), next))
    }

    /// Feeds BOS, the tokens and EOS; returns the summed log-probability of
    /// `tokens + EOS` and the state after consuming EOS.
    pub fn score_sentence(&self, state: &LmState, tokens: &[usize]) -> Result<(f64, LmState), ModelError> {
        let (mut lp, mut st) = self.step(state, BOS_ID)?;
        let mut total = 0.0;
        for &t in tokens.iter().chain(std::iter::once(&EOS_ID)) {
            if t >= lp.len() {
                return Err(ModelError::TokenOutOfRange { token: t, vocab: lp.len() });
            }
            total += lp[t];
            let (next_lp, next_st) = self.step(&st, t)?;
            lp = next_lp;
            st = next_st;
        }
        Ok((total, st))
    }
}

/// Timing of one segment for grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub recording_id: String,
    pub channel: String,
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }
}

/// Greedy grouping of consecutive same-recording, same-channel segments whose
/// summed duration stays within `max_seconds`; a longer single segment forms
/// its own group. Segments are ordered by recording, channel and start time
/// (stable); groups hold indices into `segments`.
pub fn group_utterances(segments: &[Segment], max_seconds: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&segments[a], &segments[b]);
        (&x.recording_id, &x.channel).cmp(&(&y.recording_id, &y.channel)).then(x.start.total_cmp(&y.start))
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut acc = 0.0;
    for i in order {
        let s = &segments[i];
        let joins = groups.last().is_some_and(|g| {
            let last = &segments[*g.last().unwrap()];
            last.recording_id == s.recording_id && last.channel == s.channel && acc + s.duration() <= max_seconds
        });
        if joins {
            groups.last_mut().unwrap().push(i);
            acc += s.duration();
        } else {
            groups.push(vec![i]);
            acc = s.duration();
        }
    }
    groups
}

/// One LM utterance: subword tokens and the number of words of its text.
#[derive(Clone, Debug, PartialEq)]
pub struct LmUtterance {
    pub tokens: Vec<usize>,
    pub words: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerplexityReport {
    pub nll: f64,
    pub tokens: usize,
    pub words: usize,
}

impl PerplexityReport {
    pub fn ppl(&self) -> f64 {
        (self.nll / self.words as f64).exp()
    }
}

/// Word-level perplexity: total NLL of every token (including one EOS per
/// utterance) divided by words plus one per utterance. With
/// `cross_utterance` the state flows through each group; otherwise every
/// utterance starts from the zero state.
pub fn perplexity(lm: &Lm, groups: &[Vec<LmUtterance>], cross_utterance: bool) -> Result<PerplexityReport, ModelError> {
    let runner = lm.runner()?;
    let per_group: Vec<Result<PerplexityReport, ModelError>> = {
        use rayon::prelude::*;
        groups
            .par_iter()
            .map(|g| {
                let mut rep = PerplexityReport { nll: 0.0, tokens: 0, words: 0 };
                let mut st = runner.initial_state();
                for u in g {
                    if !cross_utterance {
                        st = runner.initial_state();
                    }
                    let (lp, next) = runner.score_sentence(&st, &u.tokens)?;
                    rep.nll -= lp;
                    rep.tokens += u.tokens.len() + 1;
                    rep.words += u.words + 1;
                    st = next;
                }
                Ok(rep)
            })
            .collect()
    };
    let mut total = PerplexityReport { nll: 0.0, tokens: 0, words: 0 };
    for r in per_group {
        let r = r?;
        total.nll += r.nll;
        total.tokens += r.tokens;
        total.words += r.words;
    }
    if total.words == 0 {
        return Err(ModelError::Empty("perplexity corpus"));
    }
    Ok(total)
}

/// Builds the mean label-smoothed loss over a batch of groups. Each utterance
/// is fed as BOS + tokens predicting tokens + EOS; between utterances of a
/// group the state consumes EOS and is carried over.
pub fn lm_loss_graph<R: Rng + ?Sized>(
    cfg: &LmConfig,
    params: &ParamStore,
    groups: &[&[LmUtterance]],
    label_smoothing: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Graph, Var, usize), ModelError> {
    let v = cfg.lm_vocab;
    let mut g = Graph::new();
    let dc = if mode == Mode::Train { cfg.lm_dropconnect } else { 0.0 };
    let mut layers = Vec::new();
    for l in 0..cfg.lm_layers {
        let masks = RegularizerMasks::draw(cfg.lm_width, dc, rng)?;
        layers.push(LstmVars::bind(&mut g, params, &format!("lm.{}", l), &masks)?);
    }
    let embed = g.param_from(params, "lm.embed")?;
    let proj = if cfg.lm_projection > 0 { Some(g.param_from(params, "lm.proj.W")?) } else { None };
    let ow = g.param_from(params, "lm.out.W")?;
    let ob = g.param_from(params, "lm.out.b")?;

    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for group in groups {
        let mut states: Vec<LstmState> = (0..cfg.lm_layers).map(|_| LstmState::zeros(&mut g, cfg.lm_width)).collect();
        for (ui, u) in group.iter().enumerate() {
            if let Some(&t) = u.tokens.iter().find(|&&t| t >= v) {
                return Err(ModelError::TokenOutOfRange { token: t, vocab: v });
            }
            let mut inputs = vec![BOS_ID];
            inputs.extend(&u.tokens);
            let mut targets: Vec<Option<usize>> = u.tokens.iter().map(|&t| Some(t)).collect();
            targets.push(Some(EOS_ID));
            if ui + 1 < group.len() {
                // consume EOS so the next utterance starts from the carried state
                inputs.push(EOS_ID);
                targets.push(None);
            }
            for (&inp, target) in inputs.iter().zip(targets) {
                let mut onehot = vec![0.0; v];
                onehot[inp] = 1.0;
                let oh = g.constant(Tensor::row(onehot));
                let mut x = g.matmul(oh, embed)?;
                x = dropout(&mut g, x, cfg.lm_dropout, mode, rng)?;
                for (l, lv) in layers.iter().enumerate() {
                    states[l] = lstm_step_graph(&mut g, lv, x, states[l], Zoneout::default(), mode, rng)?;
                    x = dropout(&mut g, states[l].h, cfg.lm_dropout, mode, rng)?;
                }
                let Some(target) = target else { continue };
                if let Some(p) = proj {
                    x = g.matmul_t(x, p)?;
                }
                let logits = g.matmul_t(x, ow)?;
                let logits = g.add_row(logits, ob)?;
                rows.push(g.log_softmax_rows(logits)?);
                let mut w = vec![label_smoothing / v as f64; v];
                w[target] += 1.0 - label_smoothing;
                weights.extend(w);
            }
        }
    }
    if rows.is_empty() {
        return Err(ModelError::Empty("lm batch"));
    }
    let n = rows.len();
    let lps = g.concat_rows(&rows)?;
    let w = g.constant(Tensor::matrix(n, v, weights));
    let prod = g.mul(lps, w)?;
    let total = g.sum(prod)?;
    let loss = g.scale(total, -1.0 / n as f64)?;
    Ok((g, loss, n))
}

/// Optimizer settings for language-model training.
#[derive(Clone, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub lm_epochs: usize,
    pub lm_lr: f64,
    pub lm_momentum: f64,
    pub lm_weight_decay: f64,
    pub lm_batch: usize,
    pub lm_clip_norm: f64,
    /// Per-epoch learning-rate decay applied in the second half of training.
    pub lm_anneal_rate: f64,
    pub lm_seed: u64,
}

crate::kv_config!(LmTrainConfig { lm_epochs, lm_lr, lm_momentum, lm_weight_decay, lm_batch, lm_clip_norm, lm_anneal_rate, lm_seed });

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            lm_epochs: 20,
            lm_lr: 0.5,
            lm_momentum: 0.9,
            lm_weight_decay: 0.0,
            lm_batch: 8,
            lm_clip_norm: 1.0,
            lm_anneal_rate: 0.8,
            lm_seed: 1,
        }
    }
}

/// Per-epoch training and held-out perplexity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub label_smoothing: f64,
    pub train_loss: f64,
    pub heldout_ppl: f64,
}

/// Trains on `groups` (already split per utterance when cross-utterance
/// training is off). Group order is shuffled per epoch.
pub fn train_lm(
    mut lm: Lm,
    groups: &[Vec<LmUtterance>],
    heldout: &[Vec<LmUtterance>],
    cfg: &LmTrainConfig,
    mut on_epoch: impl FnMut(&LmEpochLog),
) -> Result<(Lm, Vec<LmEpochLog>), TrainError> {
    if groups.is_empty() || cfg.lm_epochs == 0 || cfg.lm_batch == 0 {
        return Err(TrainError::NoData);
    }
    let mut opt = OptimizerState::new(&lm.params, cfg.lm_momentum, cfg.lm_weight_decay);
    let half = cfg.lm_epochs.div_ceil(2);
    let mut log = Vec::new();
    for epoch in 1..=cfg.lm_epochs {
        let eps = if epoch <= half { lm.config.lm_label_smoothing } else { 0.0 };
        let lr = cfg.lm_lr * cfg.lm_anneal_rate.powi(epoch.saturating_sub(half) as i32);
        let mut order: Vec<usize> = (0..groups.len()).collect();
        let mut rng = derive_rng(cfg.lm_seed, &[epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (mut loss_sum, mut n_sum) = (0.0, 0usize);
        for chunk in order.chunks(cfg.lm_batch) {
            let batch: Vec<&[LmUtterance]> = chunk.iter().map(|&i| groups[i].as_slice()).collect();
            let (g, loss, n) = lm_loss_graph(&lm.config, &lm.params, &batch, eps, Mode::Train, &mut rng)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite { what: format!("lm loss at epoch {}", epoch) });
            }
            let grads_all = g.backward_scalar(loss).map_err(ModelError::from)?;
            let mut grads = ParamStore::new();
            for (name, _) in lm.params.iter() {
                if let Some(t) = grads_all.wrt(name) {
                    grads.insert(name, t);
                }
            }
            clip_global_norm(&mut grads, cfg.lm_clip_norm);
            nesterov_step(&mut lm.params, &grads, &mut opt, lr)?;
            loss_sum += value * n as f64;
            n_sum += n;
        }
        let heldout_ppl = if heldout.is_empty() { f64::NAN } else { perplexity(&lm, heldout, lm.config.cross_utterance)?.ppl() };
        let entry = LmEpochLog { epoch, lr, label_smoothing: eps, train_loss: loss_sum / n_sum as f64, heldout_ppl };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((lm, log))
}
