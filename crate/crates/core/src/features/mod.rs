//! Acoustic front end: log-Mel filterbanks, speaker-level CMVN, regression
//! deltas, and the input-level augmentations (tempo perturbation, sequence
//! noise injection, SpecAugment).

mod augment;
mod io;
mod mel;

pub use augment::{
    maybe_inject_noise, sequence_noise_inject, spec_augment, spec_augment_with_masks, tempo_perturb, AppliedMasks,
    AugmentPolicy,
};
pub use io::{read_feature_corpus, read_manifest, read_wav, write_feature_corpus, write_manifest, ManifestEntry};
pub use mel::{log_mel, mel_filterbank, mel_to_hz, hz_to_mel, MelConfig, LOG_FLOOR};

use std::collections::BTreeMap;

use crate::autodiff::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("signal of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("empty noise pool")]
    EmptyNoisePool,
    #[error("speaker {0} has fewer than 2 frames")]
    TooFewFrames(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Time-major feature matrix plus utterance metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `T × D`.
    pub frames: Tensor,
    pub frame_shift: f64,
    pub utterance_id: String,
    pub speaker_id: String,
    pub recording_id: String,
    pub start_time: f64,
    pub end_time: f64,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Self {
        let t = frames.rows() as f64;
        FeatureSequence {
            frames,
            frame_shift: 0.01,
            utterance_id: String::new(),
            speaker_id: String::new(),
            recording_id: String::new(),
            start_time: 0.0,
            end_time: t * 0.01,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn with_frames(&self, frames: Tensor) -> Self {
        FeatureSequence { frames, ..self.clone() }
    }
}

/// Per-speaker, per-dimension mean and standard deviation.
///
/// A standard deviation of `None` marks a constant dimension, which is
/// centered only.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerStats {
    pub mean: Vec<f64>,
    pub std: Vec<Option<f64>>,
}

const VAR_GUARD: f64 = 1e-12;

/// Pooled statistics for every speaker in `corpus`.
pub fn speaker_stats(corpus: &[FeatureSequence]) -> Result<BTreeMap<String, SpeakerStats>, FeatureError> {
    let mut acc: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for seq in corpus {
        let d = seq.dim();
        let e = acc.entry(seq.speaker_id.clone()).or_insert_with(|| (0, vec![0.0; d], vec![0.0; d]));
        for t in 0..seq.num_frames() {
            for (j, &v) in seq.frames.row_slice(t).iter().enumerate() {
                e.1[j] += v;
            }
        }
        e.0 += seq.num_frames();
    }
    // second pass for numerically stable variance
    for seq in corpus {
        let e = acc.get_mut(&seq.speaker_id).unwrap();
        let n = e.0 as f64;
        for t in 0..seq.num_frames() {
            for (j, &v) in seq.frames.row_slice(t).iter().enumerate() {
                let m = e.1[j] / n;
                e.2[j] += (v - m) * (v - m);
            }
        }
    }
    let mut out = BTreeMap::new();
    for (spk, (n, sum, sq)) in acc {
        if n < 2 {
            return Err(FeatureError::TooFewFrames(spk));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let var = s / n as f64;
                if var <= VAR_GUARD {
                    log::warn!("speaker {} dimension {} has zero variance; centering only", spk, j);
                    None
                } else {
                    Some(var.sqrt())
                }
            })
            .collect();
        out.insert(spk, SpeakerStats { mean, std });
    }
    Ok(out)
}

/// Applies precomputed speaker statistics to one sequence.
pub fn apply_cmvn(seq: &FeatureSequence, stats: &SpeakerStats) -> FeatureSequence {
    let mut frames = seq.frames.clone();
    for t in 0..frames.rows() {
        for (j, v) in frames.row_slice_mut(t).iter_mut().enumerate() {
            *v -= stats.mean[j];
            if let Some(s) = stats.std[j] {
                *v /= s;
            }
        }
    }
    seq.with_frames(frames)
}

/// Speaker-level mean and variance normalization.
pub fn speaker_cmvn(corpus: &[FeatureSequence]) -> Result<Vec<FeatureSequence>, FeatureError> {
    let stats = speaker_stats(corpus)?;
    Ok(corpus.iter().map(|s| apply_cmvn(s, &stats[&s.speaker_id])).collect())
}

/// Regression deltas over a ±`window` frame span with edge replication.
pub fn deltas(frames: &Tensor, window: usize) -> Tensor {
    let (t, d) = (frames.rows(), frames.cols());
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |i: isize| i.clamp(0, t as isize - 1) as usize;
    let mut out = vec![0.0; t * d];
    for ti in 0..t {
        for n in 1..=window {
            let plus = frames.row_slice(clamp(ti as isize + n as isize));
            let minus = frames.row_slice(clamp(ti as isize - n as isize));
            for j in 0..d {
                out[ti * d + j] += n as f64 * (plus[j] - minus[j]);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= denom);
    Tensor::matrix(t, d, out)
}

/// Stacks `[static, Δ, ΔΔ]`, turning `D` columns into `3D`.
pub fn add_deltas(seq: &FeatureSequence) -> FeatureSequence {
    let d1 = deltas(&seq.frames, 2);
    let d2 = deltas(&d1, 2);
    let (t, d) = (seq.num_frames(), seq.dim());
    let mut data = Vec::with_capacity(t * 3 * d);
    for ti in 0..t {
        data.extend_from_slice(seq.frames.row_slice(ti));
        data.extend_from_slice(d1.row_slice(ti));
        data.extend_from_slice(d2.row_slice(ti));
    }
    seq.with_frames(Tensor::matrix(t, 3 * d, data))
}
