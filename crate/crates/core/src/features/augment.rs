use rand::Rng;

use super::{FeatureError, FeatureSequence};
use crate::autodiff::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub speed_tempo_prob: f64,
    pub tempo_factors: Vec<f64>,
    pub seqnoise_prob: f64,
    pub seqnoise_weight: f64,
    pub seqnoise_max_utts: usize,
    /// Maximum frequency-mask width `F`.
    pub freq_mask_param: usize,
    pub n_freq_masks: usize,
    /// Maximum time-mask width before the ratio cap.
    pub time_mask_param: usize,
    pub n_time_masks: usize,
    /// Time masks never exceed `⌈p·T⌉` frames.
    pub time_mask_ratio_cap: f64,
    /// Number of stacked `[static, Δ, ΔΔ]` blocks the frequency masks are replicated over.
    pub delta_blocks: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            speed_tempo_prob: 5.0 / 6.0,
            tempo_factors: vec![0.9, 1.0, 1.1],
            seqnoise_prob: 0.4,
            seqnoise_weight: 0.3,
            seqnoise_max_utts: 4,
            freq_mask_param: 15,
            n_freq_masks: 2,
            time_mask_param: 70,
            n_time_masks: 2,
            time_mask_ratio_cap: 0.3,
            delta_blocks: 3,
        }
    }
}

impl AugmentPolicy {
    /// Every probability, weight and mask parameter off.
    pub fn disabled() -> Self {
        AugmentPolicy {
            speed_tempo_prob: 0.0,
            seqnoise_prob: 0.0,
            n_freq_masks: 0,
            n_time_masks: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        for (name, p) in [("speed_tempo_prob", self.speed_tempo_prob), ("seqnoise_prob", self.seqnoise_prob), ("time_mask_ratio_cap", self.time_mask_ratio_cap)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FeatureError::InvalidParam(format!("{} = {} not in [0, 1]", name, p)));
            }
        }
        if self.seqnoise_weight < 0.0 {
            return Err(FeatureError::InvalidParam("seqnoise_weight must be ≥ 0".into()));
        }
        if self.tempo_factors.iter().any(|&f| f <= 0.0) {
            return Err(FeatureError::InvalidParam("tempo factors must be positive".into()));
        }
        if self.delta_blocks == 0 {
            return Err(FeatureError::InvalidParam("delta_blocks must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Picks a tempo factor: with probability `speed_tempo_prob` one of
    /// `tempo_factors` uniformly, otherwise 1.
    pub fn draw_tempo<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.tempo_factors.is_empty() || rng.random::<f64>() >= self.speed_tempo_prob {
            return 1.0;
        }
        self.tempo_factors[rng.random_range(0..self.tempo_factors.len())]
    }
}

/// Resamples the time axis by linear interpolation to `round(T / factor)` frames.
pub fn tempo_perturb(seq: &FeatureSequence, factor: f64) -> Result<FeatureSequence, FeatureError> {
    if factor <= 0.0 || !factor.is_finite() {
        return Err(FeatureError::InvalidParam(format!("tempo factor {}", factor)));
    }
    if factor == 1.0 {
        return Ok(seq.clone());
    }
    let (t, d) = (seq.num_frames(), seq.dim());
    let out_t = ((t as f64 / factor).round() as usize).max(1);
    let mut data = Vec::with_capacity(out_t * d);
    for j in 0..out_t {
        let src = (j as f64 * factor).min((t - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = src - lo as f64;
        let (a, b) = (seq.frames.row_slice(lo), seq.frames.row_slice(hi));
        data.extend(a.iter().zip(b).map(|(&x, &y)| if frac == 0.0 { x } else { x + frac * (y - x) }));
    }
    let mut out = seq.with_frames(Tensor::matrix(out_t, d, data));
    out.end_time = out.start_time + (seq.end_time - seq.start_time) / factor;
    Ok(out)
}

/// Crops (random offset) or tiles `noise` to exactly `len` frames.
fn align_noise<R: Rng>(noise: &Tensor, len: usize, rng: &mut R) -> Vec<f64> {
    let (t, d) = (noise.rows(), noise.cols());
    let offset = if t > len { rng.random_range(0..=t - len) } else { 0 };
    let mut out = Vec::with_capacity(len * d);
    for i in 0..len {
        out.extend_from_slice(noise.row_slice((offset + i) % t));
    }
    out
}

/// `target + weight · mean(k noise sequences)`, `k ~ U{1..max_utts}`.
pub fn sequence_noise_inject<R: Rng>(
    target: &FeatureSequence,
    noise_pool: &[FeatureSequence],
    weight: f64,
    max_utts: usize,
    rng: &mut R,
) -> Result<FeatureSequence, FeatureError> {
    if weight < 0.0 {
        return Err(FeatureError::InvalidParam(format!("noise weight {}", weight)));
    }
    if weight == 0.0 {
        return Ok(target.clone());
    }
    if noise_pool.is_empty() {
        return Err(FeatureError::EmptyNoisePool);
    }
    let (t, d) = (target.num_frames(), target.dim());
    let k = rng.random_range(1..=max_utts.max(1));
    let mut mix = vec![0.0; t * d];
    for _ in 0..k {
        let noise = &noise_pool[rng.random_range(0..noise_pool.len())];
        if noise.dim() != d {
            return Err(FeatureError::InvalidParam(format!("noise dim {} vs target {}", noise.dim(), d)));
        }
        for (m, v) in mix.iter_mut().zip(align_noise(&noise.frames, t, rng)) {
            *m += v;
        }
    }
    let scale = weight / k as f64;
    let data = target.frames.data().iter().zip(&mix).map(|(&x, &n)| x + scale * n).collect();
    Ok(target.with_frames(Tensor::matrix(t, d, data)))
}

/// Applies sequence noise with probability `policy.seqnoise_prob`; returns whether it fired.
pub fn maybe_inject_noise<R: Rng>(
    target: &FeatureSequence,
    noise_pool: &[FeatureSequence],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(FeatureSequence, bool), FeatureError> {
    if policy.seqnoise_prob > 0.0 && noise_pool.is_empty() {
        return Err(FeatureError::EmptyNoisePool);
    }
    if rng.random::<f64>() < policy.seqnoise_prob {
        let out = sequence_noise_inject(target, noise_pool, policy.seqnoise_weight, policy.seqnoise_max_utts, rng)?;
        Ok((out, true))
    } else {
        Ok((target.clone(), false))
    }
}

/// Mask spans actually drawn by [`spec_augment_with_masks`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppliedMasks {
    /// `(start, width)` on the base (pre-delta) frequency axis.
    pub freq: Vec<(usize, usize)>,
    /// `(start, width)` in frames.
    pub time: Vec<(usize, usize)>,
}

impl AppliedMasks {
    /// Whether cell `(t, j)` of a `blocks`-stacked feature matrix is masked.
    pub fn covers(&self, t: usize, j: usize, base_dim: usize) -> bool {
        let jb = j % base_dim;
        self.time.iter().any(|&(s, w)| t >= s && t < s + w) || self.freq.iter().any(|&(s, w)| jb >= s && jb < s + w)
    }
}

pub fn spec_augment<R: Rng>(seq: &FeatureSequence, policy: &AugmentPolicy, rng: &mut R) -> FeatureSequence {
    spec_augment_with_masks(seq, policy, rng).0
}

/// SpecAugment without time warping; masked cells take the utterance's
/// per-dimension mean.
pub fn spec_augment_with_masks<R: Rng>(
    seq: &FeatureSequence,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (FeatureSequence, AppliedMasks) {
    let (t, d) = (seq.num_frames(), seq.dim());
    let blocks = if d % policy.delta_blocks == 0 { policy.delta_blocks } else { 1 };
    let base = d / blocks;
    let mut masks = AppliedMasks::default();
    for _ in 0..policy.n_freq_masks {
        let f = rng.random_range(0..=policy.freq_mask_param).min(base);
        let f0 = rng.random_range(0..=base - f);
        if f > 0 {
            masks.freq.push((f0, f));
        }
    }
    let cap = ((policy.time_mask_ratio_cap * t as f64).ceil() as usize).min(t);
    for _ in 0..policy.n_time_masks {
        let w = rng.random_range(0..=policy.time_mask_param).min(cap);
        let t0 = rng.random_range(0..=t - w);
        if w > 0 {
            masks.time.push((t0, w));
        }
    }
    if masks.freq.is_empty() && masks.time.is_empty() {
        return (seq.clone(), masks);
    }
    let mut mean = vec![0.0; d];
    for ti in 0..t {
        for (m, &v) in mean.iter_mut().zip(seq.frames.row_slice(ti)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut frames = seq.frames.clone();
    for ti in 0..t {
        for j in 0..d {
            if masks.covers(ti, j, base) {
                frames.set(ti, j, mean[j]);
            }
        }
    }
    (seq.with_frames(frames), masks)
}

impl crate::config::KvConfig for AugmentPolicy {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, crate::config::ConfigError> {
        use crate::config::parse_value;
        match key {
            "speed_tempo_prob" => self.speed_tempo_prob = parse_value(key, value)?,
            "tempo_factors" => {
                self.tempo_factors = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_, _>>()?
            }
            "seqnoise_prob" => self.seqnoise_prob = parse_value(key, value)?,
            "seqnoise_weight" => self.seqnoise_weight = parse_value(key, value)?,
            "seqnoise_max_utts" => self.seqnoise_max_utts = parse_value(key, value)?,
            "freq_mask_param" => self.freq_mask_param = parse_value(key, value)?,
            "n_freq_masks" => self.n_freq_masks = parse_value(key, value)?,
            "time_mask_param" => self.time_mask_param = parse_value(key, value)?,
            "n_time_masks" => self.n_time_masks = parse_value(key, value)?,
            "time_mask_ratio_cap" => self.time_mask_ratio_cap = parse_value(key, value)?,
            "delta_blocks" => self.delta_blocks = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let factors: Vec<String> = self.tempo_factors.iter().map(f64::to_string).collect();
        vec![
            ("speed_tempo_prob".into(), self.speed_tempo_prob.to_string()),
            ("tempo_factors".into(), factors.join(",")),
            ("seqnoise_prob".into(), self.seqnoise_prob.to_string()),
            ("seqnoise_weight".into(), self.seqnoise_weight.to_string()),
            ("seqnoise_max_utts".into(), self.seqnoise_max_utts.to_string()),
            ("freq_mask_param".into(), self.freq_mask_param.to_string()),
            ("n_freq_masks".into(), self.n_freq_masks.to_string()),
            ("time_mask_param".into(), self.time_mask_param.to_string()),
            ("n_time_masks".into(), self.n_time_masks.to_string()),
            ("time_mask_ratio_cap".into(), self.time_mask_ratio_cap.to_string()),
            ("delta_blocks".into(), self.delta_blocks.to_string()),
        ]
    }
}
