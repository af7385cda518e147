//! Label-smoothed loss, Nesterov optimizer, weight noise, the staged epoch
//! schedule, length-curriculum batching and the training loop.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::ConfigError;
use crate::eval::token_error_rate;
use crate::features::{
    add_deltas, apply_cmvn, maybe_inject_noise, spec_augment, tempo_perturb, AugmentPolicy, FeatureError, FeatureSequence,
    SpeakerStats,
};
use crate::layers::Mode;
use crate::model::{sequence_loss, Example, LossOptions, Model, ModelConfig, ModelError, ParamSpec};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("gradient for unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("no training data")]
    NoData,
    #[error("speaker `{0}` has no CMVN statistics")]
    MissingSpeaker(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `−(1−ε)·log p(target) − (ε/V)·Σ_v log p(v)` for one normalized distribution.
pub fn label_smoothed_loss(log_probs: &[f64], target: usize, eps: f64) -> f64 {
    let v = log_probs.len() as f64;
    -(1.0 - eps) * log_probs[target] - eps / v * log_probs.iter().sum::<f64>()
}

/// Velocities and hyperparameters of the Nesterov optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamStore,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = ParamStore::new();
        for (name, t) in params.iter() {
            velocity.insert(name, Tensor::zeros(t.shape()));
        }
        OptimizerState { velocity, momentum, weight_decay }
    }
}

/// One Nesterov update: `g ← g + λθ` (biases and batch-norm parameters are
/// not decayed), `v ← µv − lr·g`, `θ ← θ + µv − lr·g`. Parameters without a
/// gradient entry are treated as having zero gradient.
pub fn nesterov_step(params: &mut ParamStore, grads: &ParamStore, opt: &mut OptimizerState, lr: f64) -> Result<(), TrainError> {
    for (name, g) in grads.iter() {
        if !params.contains(name) {
            return Err(TrainError::UnknownParam(name.to_string()));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite { what: format!("gradient of {}", name) });
        }
    }
    let (mu, lambda) = (opt.momentum, opt.weight_decay);
    for (name, theta) in params.iter_mut() {
        let decay = if ParamSpec::is_bias_like(name) { 0.0 } else { lambda };
        let v = opt.velocity.get_mut(name).ok_or_else(|| TrainError::UnknownParam(name.to_string()))?;
        let g = grads.get(name);
        for (i, (th, vi)) in theta.data_mut().iter_mut().zip(v.data_mut().iter_mut()).enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]) + decay * *th;
            *vi = mu * *vi - lr * gi;
            *th += mu * *vi - lr * gi;
        }
    }
    Ok(())
}

/// Scales every gradient so the global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, t)| t.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Working copy of `params` with zero-mean Gaussian noise of the given
/// variance added to every value.
pub fn apply_weight_noise<R: Rng + ?Sized>(params: &ParamStore, variance: f64, rng: &mut R) -> ParamStore {
    let mut out = params.clone();
    if variance <= 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive std");
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    out
}

/// Training hyperparameters and one switch per regularization ingredient.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weight_noise_variance: f64,
    pub label_smoothing: f64,
    pub teacher_forcing: f64,
    pub batch_start: usize,
    pub batch_end: usize,
    pub anneal_rate: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Checkpoint period in epochs; 0 keeps only the final model.
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Greedy held-out decoding stops after this many tokens per encoder frame.
    pub heldout_output_factor: f64,
    pub use_specaugment: bool,
    pub use_speed_tempo: bool,
    pub use_dropout: bool,
    pub use_label_smoothing: bool,
    pub use_seqnoise: bool,
    pub use_weight_noise: bool,
    pub use_weight_decay: bool,
    pub use_dropconnect: bool,
    pub use_bn_freeze: bool,
    pub use_scheduled_sampling: bool,
    pub use_zoneout: bool,
    pub use_random_batches: bool,
    pub use_deltas: bool,
}

crate::kv_config!(TrainConfig {
    epochs,
    base_lr,
    momentum,
    weight_decay,
    weight_noise_variance,
    label_smoothing,
    teacher_forcing,
    batch_start,
    batch_end,
    anneal_rate,
    clip_norm,
    checkpoint_every,
    seed,
    heldout_output_factor,
    use_specaugment,
    use_speed_tempo,
    use_dropout,
    use_label_smoothing,
    use_seqnoise,
    use_weight_noise,
    use_weight_decay,
    use_dropconnect,
    use_bn_freeze,
    use_scheduled_sampling,
    use_zoneout,
    use_random_batches,
    use_deltas,
});

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 4e-6,
            weight_noise_variance: 0.015,
            label_smoothing: 0.35,
            teacher_forcing: 0.8,
            batch_start: 8,
            batch_end: 32,
            anneal_rate: 0.9,
            clip_norm: 0.0,
            checkpoint_every: 0,
            seed: 1,
            heldout_output_factor: 1.5,
            use_specaugment: true,
            use_speed_tempo: true,
            use_dropout: true,
            use_label_smoothing: true,
            use_seqnoise: true,
            use_weight_noise: true,
            use_weight_decay: true,
            use_dropconnect: true,
            use_bn_freeze: true,
            use_scheduled_sampling: true,
            use_zoneout: true,
            use_random_batches: true,
            use_deltas: true,
        }
    }
}

/// Ingredient names accepted by [`TrainConfig::disable`], with the key each one flips.
pub const INGREDIENTS: &[(&str, &str)] = &[
    ("specaugment", "use_specaugment"),
    ("speed_tempo", "use_speed_tempo"),
    ("dropout", "use_dropout"),
    ("label_smoothing", "use_label_smoothing"),
    ("seqnoise", "use_seqnoise"),
    ("weight_noise", "use_weight_noise"),
    ("weight_decay", "use_weight_decay"),
    ("dropconnect", "use_dropconnect"),
    ("bn_freeze", "use_bn_freeze"),
    ("scheduled_sampling", "use_scheduled_sampling"),
    ("zoneout", "use_zoneout"),
    ("random_batches", "use_random_batches"),
    ("deltas", "use_deltas"),
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError::invalid("epochs", "must be ≥ 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(ConfigError::invalid("base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ConfigError::invalid("momentum", "must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(ConfigError::invalid("weight_decay", "must be ≥ 0"));
        }
        if self.weight_noise_variance < 0.0 {
            return Err(ConfigError::invalid("weight_noise_variance", "must be ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ConfigError::invalid("label_smoothing", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(ConfigError::invalid("teacher_forcing", "must be in [0, 1]"));
        }
        if self.batch_start == 0 || self.batch_end < self.batch_start {
            return Err(ConfigError::invalid("batch_start", "need 1 ≤ batch_start ≤ batch_end"));
        }
        if !(self.anneal_rate > 0.0 && self.anneal_rate <= 1.0) {
            return Err(ConfigError::invalid("anneal_rate", "must be in (0, 1]"));
        }
        if self.clip_norm < 0.0 {
            return Err(ConfigError::invalid("clip_norm", "must be ≥ 0"));
        }
        if self.heldout_output_factor <= 0.0 {
            return Err(ConfigError::invalid("heldout_output_factor", "must be positive"));
        }
        Ok(())
    }

    /// Turns one ingredient off by name.
    pub fn disable(&mut self, ingredient: &str) -> Result<(), ConfigError> {
        let key = INGREDIENTS
            .iter()
            .find(|(n, _)| *n == ingredient)
            .map(|(_, k)| *k)
            .ok_or_else(|| ConfigError::UnknownKey(ingredient.to_string()))?;
        crate::config::KvConfig::set(self, key, "false")?;
        Ok(())
    }

    /// Model configuration with disabled regularizers zeroed.
    pub fn effective_model(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if !self.use_dropout {
            m.enc_dropout = 0.0;
            m.embed_dropout = 0.0;
            m.output_dropout = 0.0;
        }
        if !self.use_dropconnect {
            m.enc_dropconnect = 0.0;
            m.dec_weight_dropout = 0.0;
        }
        if !self.use_zoneout {
            m.zoneout_cell = 0.0;
            m.zoneout_hidden = 0.0;
        }
        m
    }

    /// Augmentation policy with disabled ingredients switched off.
    pub fn effective_augment(&self, policy: &AugmentPolicy) -> AugmentPolicy {
        let mut p = policy.clone();
        if !self.use_specaugment {
            p.n_freq_masks = 0;
            p.n_time_masks = 0;
        }
        if !self.use_speed_tempo {
            p.speed_tempo_prob = 0.0;
        }
        if !self.use_seqnoise {
            p.seqnoise_prob = 0.0;
        }
        p.delta_blocks = if self.use_deltas { 3 } else { 1 };
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Curriculum {
    Sorted,
    Bucketed,
}

impl fmt::Display for Curriculum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Curriculum::Sorted => "sorted",
            Curriculum::Bucketed => "bucketed",
        })
    }
}

/// Settings in force during one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub curriculum: Curriculum,
    pub weight_noise_on: bool,
    pub bn_frozen: bool,
    pub label_smoothing: f64,
    pub teacher_forcing: f64,
}

impl fmt::Display for ScheduleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.batch_size,
            self.curriculum,
            self.weight_noise_on,
            self.bn_frozen,
            self.label_smoothing,
            self.teacher_forcing
        )
    }
}

/// Phase boundaries of a 250-epoch budget: warmup end, curriculum end,
/// weight noise start, BN freeze start, annealing start.
pub const REFERENCE_BUDGET: usize = 250;
pub const REFERENCE_BREAKPOINTS: [usize; 5] = [3, 35, 70, 110, 180];

/// Breakpoints scaled to `total` epochs (rounded; warmup at least one epoch).
pub fn breakpoints(total: usize) -> [usize; 5] {
    let mut out = REFERENCE_BREAKPOINTS.map(|b| (b as f64 * total as f64 / REFERENCE_BUDGET as f64).round() as usize);
    out[0] = out[0].max(1);
    out
}

/// Schedule of epoch `epoch` (1-based) out of `total`.
pub fn schedule_at(epoch: usize, total: usize, cfg: &TrainConfig) -> ScheduleState {
    let [warmup, curriculum_end, noise_start, freeze_start, anneal_start] = breakpoints(total);
    let e = epoch.max(1);
    let (lr, batch_size) = if e <= warmup {
        let frac = (e - 1) as f64 / warmup as f64;
        let span = (cfg.batch_end - cfg.batch_start) as f64;
        (cfg.base_lr * e as f64 / warmup as f64, cfg.batch_start + (span * frac).round() as usize)
    } else if e > anneal_start {
        (cfg.base_lr * cfg.anneal_rate.powi((e - anneal_start) as i32), cfg.batch_end)
    } else {
        (cfg.base_lr, cfg.batch_end)
    };
    let curriculum = if e > curriculum_end && cfg.use_random_batches { Curriculum::Bucketed } else { Curriculum::Sorted };
    let label_smoothing = if cfg.use_label_smoothing && e <= anneal_start { cfg.label_smoothing } else { 0.0 };
    ScheduleState {
        epoch: e,
        lr,
        batch_size: batch_size.max(1),
        curriculum,
        weight_noise_on: cfg.use_weight_noise && e > noise_start,
        bn_frozen: cfg.use_bn_freeze && e > freeze_start,
        label_smoothing,
        teacher_forcing: if cfg.use_scheduled_sampling { cfg.teacher_forcing } else { 1.0 },
    }
}

/// Independent generator for a `(seed, tags...)` stream.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &t in tags {
        let mix: u64 = rng.random();
        rng = ChaCha8Rng::seed_from_u64(mix ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    rng
}

/// Groups utterance indices into batches. Both modes sort by length (stable)
/// and cut consecutive groups of `batch_size`; bucketed mode shuffles the
/// group order with a generator derived from `seed` and the epoch.
pub fn make_batches(lengths: &[usize], schedule: &ScheduleState, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(schedule.batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if schedule.curriculum == Curriculum::Bucketed {
        let mut rng = derive_rng(seed, &[0xBA7C, schedule.epoch as u64]);
        for i in (1..batches.len()).rev() {
            let j = rng.random_range(0..=i);
            batches.swap(i, j);
        }
    }
    batches
}

/// One utterance with static features and target tokens (no BOS/EOS).
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub tokens: Vec<usize>,
}

/// CMVN with the speaker's statistics, then optional Δ/ΔΔ stacking.
pub fn prepare_features(
    seq: &FeatureSequence,
    stats: &BTreeMap<String, SpeakerStats>,
    deltas: bool,
) -> Result<FeatureSequence, TrainError> {
    let st = stats.get(&seq.speaker_id).ok_or_else(|| TrainError::MissingSpeaker(seq.speaker_id.clone()))?;
    let normed = apply_cmvn(seq, st);
    Ok(if deltas { add_deltas(&normed) } else { normed })
}

/// Training-time input pipeline: tempo perturbation, sequence noise, CMVN,
/// deltas, SpecAugment. With every probability at zero the result equals
/// [`prepare_features`].
pub fn augment_features<R: Rng>(
    seq: &FeatureSequence,
    noise_pool: &[FeatureSequence],
    stats: &BTreeMap<String, SpeakerStats>,
    policy: &AugmentPolicy,
    deltas: bool,
    rng: &mut R,
) -> Result<FeatureSequence, TrainError> {
    let factor = policy.draw_tempo(rng);
    let perturbed = tempo_perturb(seq, factor)?;
    let (noisy, _) = maybe_inject_noise(&perturbed, noise_pool, policy, rng)?;
    let prepared = prepare_features(&noisy, stats, deltas)?;
    Ok(spec_augment(&prepared, policy, rng))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub schedule: ScheduleState,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub token_error_rate: f64,
}

pub const LOG_HEADER: &str =
    "epoch,lr,batch_size,curriculum,weight_noise,bn_frozen,label_smoothing,teacher_forcing,train_loss,heldout_loss,token_error_rate";

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.6},{:.6},{:.6}", self.schedule, self.train_loss, self.heldout_loss, self.token_error_rate)
    }
}

/// Training and held-out utterances plus their CMVN statistics.
pub struct TrainData {
    pub train: Vec<Utterance>,
    pub train_stats: BTreeMap<String, SpeakerStats>,
    pub heldout: Vec<Utterance>,
    pub heldout_stats: BTreeMap<String, SpeakerStats>,
}

impl TrainData {
    pub fn new(train: Vec<Utterance>, heldout: Vec<Utterance>) -> Result<Self, TrainError> {
        let stats = |u: &[Utterance]| {
            let seqs: Vec<FeatureSequence> = u.iter().map(|x| x.features.clone()).collect();
            crate::features::speaker_stats(&seqs)
        };
        Ok(TrainData { train_stats: stats(&train)?, heldout_stats: if heldout.is_empty() { BTreeMap::new() } else { stats(&heldout)? }, train, heldout })
    }
}

/// Held-out loss (evaluation mode, teacher forced) and greedy token error rate.
pub fn evaluate(model: &Model, heldout: &[Example], max_output_factor: f64) -> Result<(f64, f64), TrainError> {
    if heldout.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let results: Vec<Result<(f64, usize, Vec<usize>), TrainError>> = heldout
        .par_iter()
        .map(|ex| {
            let mut bn = model.bn.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = sequence_loss(&model.config, &model.params, &mut bn, std::slice::from_ref(ex), LossOptions::eval(), &mut rng)?;
            let hyp = crate::search::greedy_decode(model, &ex.features, max_output_factor)?;
            Ok((out.loss * out.tokens as f64, out.tokens, hyp))
        })
        .collect();
    let (mut nll, mut n, mut pairs) = (0.0, 0, Vec::new());
    for (r, ex) in results.into_iter().zip(heldout) {
        let (l, t, hyp) = r?;
        nll += l;
        n += t;
        pairs.push((ex.tokens.clone(), hyp));
    }
    Ok((nll / n as f64, token_error_rate(&pairs)))
}

/// Final model and per-epoch log of a training run.
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

fn heldout_examples(data: &TrainData, deltas: bool) -> Result<Vec<Example>, TrainError> {
    data.heldout
        .iter()
        .map(|u| Ok(Example { features: prepare_features(&u.features, &data.heldout_stats, deltas)?.frames, tokens: u.tokens.clone() }))
        .collect()
}

/// Trains `model` for `cfg.epochs` epochs. `on_epoch` sees every log line and
/// the model after that epoch (for logging and checkpoints).
pub fn train(
    mut model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    policy.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::NoData);
    }
    model.config = cfg.effective_model(&model.config);
    let policy = cfg.effective_augment(policy);
    let decay = if cfg.use_weight_decay { cfg.weight_decay } else { 0.0 };
    let mut opt = OptimizerState::new(&model.params, cfg.momentum, decay);
    let pool: Vec<FeatureSequence> = data.train.iter().map(|u| u.features.clone()).collect();
    let lengths: Vec<usize> = data.train.iter().map(|u| u.features.num_frames()).collect();
    let heldout = heldout_examples(data, cfg.use_deltas)?;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let sched = schedule_at(epoch, cfg.epochs, cfg);
        model.set_bn_frozen(sched.bn_frozen);
        let batches = make_batches(&lengths, &sched, cfg.seed);
        let (mut loss_sum, mut token_sum) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let examples: Vec<Example> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = derive_rng(cfg.seed, &[1, epoch as u64, i as u64]);
                    let u = &data.train[i];
                    let f = augment_features(&u.features, &pool, &data.train_stats, &policy, cfg.use_deltas, &mut rng)?;
                    Ok(Example { features: f.frames, tokens: u.tokens.clone() })
                })
                .collect::<Result<_, TrainError>>()?;
            let mut rng = derive_rng(cfg.seed, &[2, epoch as u64, bi as u64]);
            let noisy;
            let work = if sched.weight_noise_on {
                noisy = apply_weight_noise(&model.params, cfg.weight_noise_variance, &mut rng);
                &noisy
            } else {
                &model.params
            };
            let opts = LossOptions { label_smoothing: sched.label_smoothing, teacher_forcing: sched.teacher_forcing, mode: Mode::Train };
            let out = sequence_loss(&model.config, work, &mut model.bn, &examples, opts, &mut rng)?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFinite { what: format!("loss at epoch {} batch {}", epoch, bi) });
            }
            let mut grads = ParamStore::new();
            for (name, _) in model.params.iter() {
                if let Some(g) = out.grads.wrt(name) {
                    grads.insert(name, g);
                }
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            nesterov_step(&mut model.params, &grads, &mut opt, sched.lr)?;
            loss_sum += out.loss * out.tokens as f64;
            token_sum += out.tokens;
        }
        let (heldout_loss, ter) = evaluate(&model, &heldout, cfg.heldout_output_factor)?;
        let entry = EpochLog { schedule: sched, train_loss: loss_sum / token_sum as f64, heldout_loss, token_error_rate: ter };
        log::info!("{}", entry);
        on_epoch(&entry, &model)?;
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
