use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureError, FeatureSequence, Waveform};
use crate::autodiff::Tensor;

/// Energy floor inside the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    /// Window length in seconds.
    pub win: f64,
    /// Frame shift in seconds.
    pub hop: f64,
    pub low_hz: f64,
    /// `None` means Nyquist.
    pub high_hz: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig { n_mels: 80, win: 0.025, hop: 0.010, low_hz: 0.0, high_hz: None }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the `n_fft/2 + 1` power-spectrum bins.
///
/// Returns the `n_mels × bins` weight matrix and each filter's center in Hz.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64, low_hz: f64, high_hz: f64) -> (Tensor, Vec<f64>) {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
    let mut w = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * sample_rate / n_fft as f64;
            let v = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            w[m * bins + b] = v;
        }
    }
    (Tensor::matrix(n_mels, bins, w), edges[1..=n_mels].to_vec())
}

/// Log mel-filterbank energies with a Hamming window.
///
/// Frame count is `floor((N − win·sr) / (hop·sr)) + 1`.
pub fn log_mel(wave: &Waveform, cfg: &MelConfig) -> Result<FeatureSequence, FeatureError> {
    if wave.sample_rate == 0 {
        return Err(FeatureError::InvalidParam("sample_rate must be positive".into()));
    }
    if cfg.n_mels == 0 || cfg.win <= 0.0 || cfg.hop <= 0.0 {
        return Err(FeatureError::InvalidParam(format!("{:?}", cfg)));
    }
    let sr = wave.sample_rate as f64;
    let win = (cfg.win * sr).round() as usize;
    let hop = (cfg.hop * sr).round() as usize;
    let n = wave.samples.len();
    if n < win || win == 0 {
        return Err(FeatureError::TooShort { samples: n, window: win });
    }
    let frames = (n - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let (fb, _) = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.low_hz, cfg.high_hz.unwrap_or(sr / 2.0));
    let bins = n_fft / 2 + 1;
    let window: Vec<f64> =
        (0..win).map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1).max(1) as f64).cos()).collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bins];
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for f in 0..frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win { Complex::new(wave.samples[start + i] * window[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row_slice(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    let mut seq = FeatureSequence::new(Tensor::matrix(frames, cfg.n_mels, out));
    seq.frame_shift = cfg.hop;
    seq.end_time = n as f64 / sr;
    Ok(seq)
}
