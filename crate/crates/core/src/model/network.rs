use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{lstm_from, Model, ModelConfig, ModelError};
use crate::attention::{attend, initial_alignment, AttentionParams, AttentionVars};
use crate::autodiff::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::layers::{dropout, encoder_block, linear, lstm_cell, lstm_step_graph, matvec, pyramidal_reduce, BatchNormState, LstmParams, LstmState, LstmVars, Mode, RegularizerMasks, Zoneout};
use crate::text::BOS_ID;

/// Runs the encoder on a batch of T×D inputs inside `g`. Batch-norm
/// statistics are pooled over every frame in the batch.
pub fn encode_batch<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParamStore,
    bn: &mut [BatchNormState],
    xs: &[Var],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Var>, ModelError> {
    let mut cur = xs.to_vec();
    for i in 0..cfg.enc_layers {
        if i < cfg.pyramid_layers {
            for x in cur.iter_mut() {
                *x = pyramidal_reduce(g, *x, cfg.pyramid_mode)?;
            }
        }
        cur = encoder_block(g, params, &format!("enc.{}", i), &cfg.block(i), &mut bn[i], &cur, mode, rng)?;
    }
    let w = g.param_from(params, "enc.out.W")?;
    let b = g.param_from(params, "enc.out.b")?;
    cur.into_iter().map(|x| Ok(linear(g, x, w, b)?)).collect()
}

pub(super) fn encode_eval(model: &Model, features: &Tensor) -> Result<Tensor, ModelError> {
    if features.cols() != model.config.feature_dim {
        return Err(ModelError::FeatureDim { got: features.cols(), expected: model.config.feature_dim });
    }
    let mut g = Graph::new();
    let x = g.input("features", features.clone())?;
    let mut bn = model.bn.clone();
    // evaluation draws nothing, the generator is only there to satisfy the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = encode_batch(&mut g, &model.config, &model.params, &mut bn, &[x], Mode::Eval, &mut rng)?;
    Ok(g.value(out[0]).clone())
}

/// Encoder frames prepared for repeated attention.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub enc: Tensor,
    pub venc: Tensor,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.enc.rows()
    }
}

/// Recurrent decoder state between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub lm_h: Vec<f64>,
    pub lm_c: Vec<f64>,
    pub fusion_h: Vec<f64>,
    pub fusion_c: Vec<f64>,
    pub attn: Vec<f64>,
    /// Previous bottleneck output, used as the attention query.
    pub query: Vec<f64>,
}

/// Evaluation-mode decoder over plain vectors.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: ModelConfig,
    embed: Tensor,
    lm: LstmParams,
    att: AttentionParams,
    fusion: LstmParams,
    bottleneck_w: Tensor,
    bottleneck_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl Decoder {
    pub fn new(config: &ModelConfig, params: &ParamStore) -> Result<Self, ModelError> {
        let get = |k: &str| params.get(k).cloned().ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", k)));
        Ok(Decoder {
            config: config.clone(),
            embed: get("dec.embed")?,
            lm: lstm_from(params, "dec.lm")?,
            att: AttentionParams::from_store(params, "dec.att")?,
            fusion: lstm_from(params, "dec.fusion")?,
            bottleneck_w: get("dec.bottleneck.W")?,
            bottleneck_b: get("dec.bottleneck.b")?,
            out_w: get("dec.out.W")?,
            out_b: get("dec.out.b")?,
        })
    }

    pub fn prepare(&self, enc: Tensor) -> EncoderOutput {
        let venc = self.att.project_frames(&enc);
        let mask = vec![true; enc.rows()];
        EncoderOutput { enc, venc, mask }
    }

    /// Zero recurrent states, uniform alignment, zero query.
    pub fn start_state(&self, enc: &EncoderOutput) -> DecoderState {
        let c = &self.config;
        DecoderState {
            lm_h: vec![0.0; c.lm_lstm],
            lm_c: vec![0.0; c.lm_lstm],
            fusion_h: vec![0.0; c.fusion_lstm],
            fusion_c: vec![0.0; c.fusion_lstm],
            attn: initial_alignment(&enc.mask),
            query: vec![0.0; c.bottleneck],
        }
    }

    /// Consumes `token` and returns log-probabilities of the next token.
    pub fn step(&self, state: &DecoderState, token: usize, enc: &EncoderOutput) -> Result<(Vec<f64>, DecoderState), ModelError> {
        let c = &self.config;
        if token >= c.vocab_size {
            return Err(ModelError::TokenOutOfRange { token, vocab: c.vocab_size });
        }
        let e = self.embed.row_slice(token);
        let (lm_h, lm_c) = lstm_cell(&self.lm, &self.lm.r, e, &state.lm_h, &state.lm_c, &vec![0.0; c.lm_lstm], &vec![0.0; c.lm_lstm]);
        let (ctx, attn) = self.att.attend(&state.query, &enc.enc, &enc.venc, &state.attn, &enc.mask)?;
        let (fusion_h, fusion_c) = lstm_cell(
            &self.fusion,
            &self.fusion.r,
            &ctx,
            &state.fusion_h,
            &state.fusion_c,
            &vec![c.zoneout_cell; c.fusion_lstm],
            &vec![c.zoneout_hidden; c.fusion_lstm],
        );
        let joined: Vec<f64> = lm_h.iter().chain(&fusion_h).copied().collect();
        let mut s = matvec(&self.bottleneck_w, &joined);
        for (x, b) in s.iter_mut().zip(self.bottleneck_b.data()) {
            *x += b;
        }
        let mut logits = matvec(&self.out_w, &s);
        for (x, b) in logits.iter_mut().zip(self.out_b.data()) {
            *x += b;
        }
        let lse = crate::autodiff::logsumexp(&logits);
        let lp = logits.iter().map(|v| v - lse).collect();
        Ok((lp, DecoderState { lm_h, lm_c, fusion_h, fusion_c, attn, query: s }))
    }
}

/// One training utterance: features and its token ids without BOS/EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub label_smoothing: f64,
    /// Probability that the previous ground-truth token is fed back.
    pub teacher_forcing: f64,
    pub mode: Mode,
}

impl LossOptions {
    pub fn eval() -> Self {
        LossOptions { label_smoothing: 0.0, teacher_forcing: 1.0, mode: Mode::Eval }
    }
}

fn sample_token<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Builds the batch loss graph: mean label-smoothed negative log-likelihood
/// over every target token (tokens followed by EOS). Returns the graph, the
/// scalar loss node and the number of scored tokens.
pub fn loss_graph<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ParamStore,
    bn: &mut [BatchNormState],
    batch: &[Example],
    opts: LossOptions,
    rng: &mut R,
) -> Result<(Graph, Var, usize), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Empty("batch"));
    }
    let v = cfg.vocab_size;
    for ex in batch {
        if ex.features.cols() != cfg.feature_dim {
            return Err(ModelError::FeatureDim { got: ex.features.cols(), expected: cfg.feature_dim });
        }
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= v) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: v });
        }
    }
    let train = opts.mode == Mode::Train;
    let mut g = Graph::new();
    let xs: Vec<Var> = batch.iter().enumerate().map(|(i, ex)| g.input(&format!("x{}", i), ex.features.clone())).collect::<Result<_, _>>()?;
    let encs = encode_batch(&mut g, cfg, params, bn, &xs, opts.mode, rng)?;

    let wd = if train { cfg.dec_weight_dropout } else { 0.0 };
    let lm_masks = RegularizerMasks::draw(cfg.lm_lstm, wd, rng)?;
    let fu_masks = RegularizerMasks::draw(cfg.fusion_lstm, wd, rng)?;
    let lm = LstmVars::bind(&mut g, params, "dec.lm", &lm_masks)?;
    let fusion = LstmVars::bind(&mut g, params, "dec.fusion", &fu_masks)?;
    let embed = g.param_from(params, "dec.embed")?;
    let bw = g.param_from(params, "dec.bottleneck.W")?;
    let bb = g.param_from(params, "dec.bottleneck.b")?;
    let ow = g.param_from(params, "dec.out.W")?;
    let ob = g.param_from(params, "dec.out.b")?;
    let zoneout = Zoneout { cell: cfg.zoneout_cell, hidden: cfg.zoneout_hidden };
    let eps = opts.label_smoothing;

    let mut all_lp = Vec::new();
    let mut weights = Vec::new();
    for (ex, &enc) in batch.iter().zip(&encs) {
        let att = AttentionVars::bind(&mut g, params, "dec.att", enc)?;
        let t_enc = g.shape(enc)[0];
        let mask = vec![true; t_enc];
        let mut lm_st = LstmState::zeros(&mut g, cfg.lm_lstm);
        let mut fu_st = LstmState::zeros(&mut g, cfg.fusion_lstm);
        let mut query = g.constant(Tensor::zeros(&[1, cfg.bottleneck]));
        let mut prev_attn = g.constant(Tensor::row(initial_alignment(&mask)));
        let targets: Vec<usize> = ex.tokens.iter().copied().chain(std::iter::once(crate::text::EOS_ID)).collect();
        let mut prev_lp: Option<Vec<f64>> = None;
        for (i, &target) in targets.iter().enumerate() {
            let input = match (i, &prev_lp) {
                (0, _) => BOS_ID,
                (_, Some(lp)) if train && opts.teacher_forcing < 1.0 && rng.random::<f64>() >= opts.teacher_forcing => sample_token(lp, rng),
                _ => targets[i - 1],
            };
            let mut onehot = vec![0.0; v];
            onehot[input] = 1.0;
            let oh = g.constant(Tensor::row(onehot));
            let e = g.matmul(oh, embed)?;
            let e = dropout(&mut g, e, cfg.embed_dropout, opts.mode, rng)?;
            lm_st = lstm_step_graph(&mut g, &lm, e, lm_st, Zoneout::default(), opts.mode, rng)?;
            let lm_out = dropout(&mut g, lm_st.h, cfg.output_dropout, opts.mode, rng)?;
            let (ctx, attn) = attend(&mut g, &att, query, prev_attn, &mask)?;
            fu_st = lstm_step_graph(&mut g, &fusion, ctx, fu_st, zoneout, opts.mode, rng)?;
            let joined = g.concat_cols(&[lm_out, fu_st.h])?;
            let s = linear(&mut g, joined, bw, bb)?;
            let logits = linear(&mut g, s, ow, ob)?;
            let lp = g.log_softmax_rows(logits)?;
            prev_lp = Some(g.value(lp).data().to_vec());
            let mut w = vec![eps / v as f64; v];
            w[target] += 1.0 - eps;
            weights.extend(w);
            all_lp.push(lp);
            query = s;
            prev_attn = attn;
        }
    }
    let n = all_lp.len();
    let lps = g.concat_rows(&all_lp)?;
    let w = g.constant(Tensor::matrix(n, v, weights));
    let prod = g.mul(lps, w)?;
    let total = g.sum(prod)?;
    let loss = g.scale(total, -1.0 / n as f64)?;
    Ok((g, loss, n))
}

#[derive(Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub tokens: usize,
    pub grads: Gradients,
}

/// Loss and parameter gradients for one batch.
pub fn sequence_loss<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ParamStore,
    bn: &mut [BatchNormState],
    batch: &[Example],
    opts: LossOptions,
    rng: &mut R,
) -> Result<LossOutput, ModelError> {
    let (g, loss, tokens) = loss_graph(cfg, params, bn, batch, opts, rng)?;
    let grads = g.backward_scalar(loss)?;
    Ok(LossOutput { loss: g.value(loss).item(), tokens, grads })
}
