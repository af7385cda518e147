//! Synthetic corpora: bigram word sequences rendered as noisy per-word
//! prototype frames under per-speaker affine distortions.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::config::ConfigError;
use crate::features::{write_feature_corpus, FeatureError, FeatureSequence};
use crate::lm::Segment;
use crate::text::{TextError, TranscriptCorpus, Utterance};
use crate::trainer::derive_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub synth_words: usize,
    pub synth_min_words: usize,
    pub synth_max_words: usize,
    pub synth_min_frames: usize,
    pub synth_max_frames: usize,
    pub synth_dim: usize,
    pub synth_sigma: f64,
    pub synth_train: usize,
    pub synth_dev: usize,
    pub synth_test: usize,
    /// Text-only utterances for language-model training.
    pub synth_lm: usize,
    /// Text-only held-out utterances drawn like the LM split.
    pub synth_lm_dev: usize,
    pub synth_speakers: usize,
    pub synth_utts_per_recording: usize,
    /// Probability that an utterance repeats the previous one of its recording.
    pub synth_repeat_prob: f64,
    /// Repeat probability used for the text-only LM split.
    pub synth_lm_repeat_prob: f64,
    pub synth_seed: u64,
}

crate::kv_config!(SynthConfig {
    synth_words,
    synth_min_words,
    synth_max_words,
    synth_min_frames,
    synth_max_frames,
    synth_dim,
    synth_sigma,
    synth_train,
    synth_dev,
    synth_test,
    synth_lm,
    synth_lm_dev,
    synth_speakers,
    synth_utts_per_recording,
    synth_repeat_prob,
    synth_lm_repeat_prob,
    synth_seed,
});

impl Default for SynthConfig {
    /// The CI-scale corpus.
    fn default() -> Self {
        SynthConfig {
            synth_words: 20,
            synth_min_words: 2,
            synth_max_words: 6,
            synth_min_frames: 6,
            synth_max_frames: 10,
            synth_dim: 8,
            synth_sigma: 0.1,
            synth_train: 500,
            synth_dev: 50,
            synth_test: 50,
            synth_lm: 2000,
            synth_lm_dev: 200,
            synth_speakers: 10,
            synth_utts_per_recording: 10,
            synth_repeat_prob: 0.0,
            synth_lm_repeat_prob: 0.5,
            synth_seed: 7,
        }
    }
}

/// Frame shift of synthetic features in seconds.
pub const FRAME_SHIFT: f64 = 0.01;
/// Silence between consecutive utterances of a recording in seconds.
const GAP: f64 = 0.5;

impl SynthConfig {
    /// The larger desk-scale corpus.
    pub fn desk() -> Self {
        SynthConfig { synth_train: 5000, synth_dev: 200, synth_test: 200, synth_lm: 20000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.synth_words < 2 {
            return Err(ConfigError::invalid("synth_words", "need at least 2 words"));
        }
        if self.synth_min_words == 0 || self.synth_max_words < self.synth_min_words {
            return Err(ConfigError::invalid("synth_min_words", "need 1 ≤ min ≤ max words"));
        }
        if self.synth_min_frames == 0 || self.synth_max_frames < self.synth_min_frames {
            return Err(ConfigError::invalid("synth_min_frames", "need 1 ≤ min ≤ max frames"));
        }
        if self.synth_dim == 0 {
            return Err(ConfigError::invalid("synth_dim", "must be positive"));
        }
        if !(self.synth_sigma >= 0.0) {
            return Err(ConfigError::invalid("synth_sigma", "must be ≥ 0"));
        }
        if self.synth_speakers == 0 || self.synth_utts_per_recording == 0 {
            return Err(ConfigError::invalid("synth_speakers", "speakers and utterances per recording must be positive"));
        }
        for (f, p) in [("synth_repeat_prob", self.synth_repeat_prob), ("synth_lm_repeat_prob", self.synth_lm_repeat_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::invalid(f, "must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

/// Per-dimension `x ↦ scale·x + offset` with positive scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Affine {
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Affine {
            scale: (0..dim).map(|_| rng.random_range(0.5..1.5)).collect(),
            offset: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        }
    }

    pub fn apply(&self, frames: &Tensor) -> Tensor {
        let mut out = frames.clone();
        for t in 0..out.rows() {
            for (j, v) in out.row_slice_mut(t).iter_mut().enumerate() {
                *v = self.scale[j] * *v + self.offset[j];
            }
        }
        out
    }
}

/// Fixed generative model: lexicon, bigram, prototypes, speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct Synth {
    pub config: SynthConfig,
    pub words: Vec<String>,
    pub start: Vec<f64>,
    pub bigram: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
    pub speakers: Vec<Affine>,
}

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R) -> String {
    const C: &[u8] = b"bdgkmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = rng.random_range(1..=3);
    (0..syllables).flat_map(|_| [C[rng.random_range(0..C.len())] as char, V[rng.random_range(0..V.len())] as char]).collect()
}

fn skewed_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.5).unwrap();
    let raw: Vec<f64> = (0..n).map(|_| f64::exp(normal.sample(rng))).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

fn sample<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// A generated utterance before writing.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: usize,
    pub recording: String,
    pub start: f64,
    pub words: Vec<usize>,
    pub frames: Option<Tensor>,
}

impl Synth {
    pub fn new(config: SynthConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = derive_rng(config.synth_seed, &[0]);
        let mut words: Vec<String> = Vec::new();
        while words.len() < config.synth_words {
            let w = pseudo_word(&mut rng);
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let n = config.synth_words;
        let start = skewed_distribution(n, &mut rng);
        let bigram = (0..n).map(|_| skewed_distribution(n, &mut rng)).collect();
        let min_dist = (10.0 * config.synth_sigma).max(1.0);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let mut prototypes: Vec<Vec<f64>> = Vec::new();
        let mut tries = 0;
        while prototypes.len() < n {
            let p: Vec<f64> = (0..config.synth_dim).map(|_| normal.sample(&mut rng)).collect();
            tries += 1;
            let far = prototypes.iter().all(|q| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist);
            if far || tries > 100_000 {
                prototypes.push(p);
            }
        }
        let speakers = (0..config.synth_speakers).map(|_| Affine::random(config.synth_dim, &mut rng)).collect();
        Ok(Synth { config, words, start, bigram, prototypes, speakers })
    }

    /// Samples a word sequence from the bigram.
    pub fn sample_words<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let c = &self.config;
        let n = rng.random_range(c.synth_min_words..=c.synth_max_words);
        let mut out = vec![sample(&self.start, rng)];
        while out.len() < n {
            out.push(sample(&self.bigram[*out.last().unwrap()], rng));
        }
        out
    }

    /// Undistorted frames: each word's prototype repeated for a random
    /// duration plus Gaussian noise.
    pub fn render_clean<R: Rng + ?Sized>(&self, words: &[usize], rng: &mut R) -> Tensor {
        let c = &self.config;
        let normal = Normal::new(0.0, c.synth_sigma.max(0.0)).unwrap();
        let mut data = Vec::new();
        let mut t = 0;
        for &w in words {
            let k = rng.random_range(c.synth_min_frames..=c.synth_max_frames);
            for _ in 0..k {
                data.extend(self.prototypes[w].iter().map(|&p| if c.synth_sigma > 0.0 { p + normal.sample(rng) } else { p }));
            }
            t += k;
        }
        Tensor::matrix(t, c.synth_dim, data)
    }

    pub fn text(&self, words: &[usize]) -> String {
        words.iter().map(|&w| self.words[w].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Generates `n` utterances of a split in recordings of
    /// `synth_utts_per_recording`; `acoustic` adds frames.
    pub fn split(&self, name: &str, n: usize, repeat_prob: f64, acoustic: bool) -> Vec<SynthUtterance> {
        let c = &self.config;
        let per = c.synth_utts_per_recording;
        let n_rec = n.div_ceil(per);
        let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        (0..n_rec)
            .into_par_iter()
            .flat_map_iter(|r| {
                let mut rng = derive_rng(c.synth_seed, &[tag, r as u64]);
                let speaker = (r + tag as usize) % c.synth_speakers;
                let recording = format!("{}-r{:04}", name, r);
                let count = per.min(n - r * per);
                let mut prev: Option<Vec<usize>> = None;
                let mut clock = 0.0;
                let mut out = Vec::with_capacity(count);
                for u in 0..count {
                    let words = match &prev {
                        Some(p) if rng.random::<f64>() < repeat_prob => p.clone(),
                        _ => self.sample_words(&mut rng),
                    };
                    let frames = acoustic.then(|| self.speakers[speaker].apply(&self.render_clean(&words, &mut rng)));
                    let dur = frames.as_ref().map_or(words.len() as f64 * 0.5, |f| f.rows() as f64 * FRAME_SHIFT);
                    out.push(SynthUtterance { id: format!("{}-u{:03}", recording, u), speaker, recording: recording.clone(), start: clock, words: words.clone(), frames });
                    clock += dur + GAP;
                    prev = Some(words);
                }
                out
            })
            .collect()
    }
}

/// Duration of a synthetic utterance in seconds.
fn duration(u: &SynthUtterance) -> f64 {
    u.frames.as_ref().map_or(u.words.len() as f64 * 0.5, |f| f.rows() as f64 * FRAME_SHIFT)
}

/// Paths written by [`generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPaths {
    pub dir: PathBuf,
    /// Split name → (feature manifest or None for text-only, transcripts, segments).
    pub splits: BTreeMap<String, (Option<PathBuf>, PathBuf, PathBuf)>,
}

/// Writes `train`, `dev`, `test` (features, transcripts, segments) and the
/// text-only `lm` and `lm-dev` splits under `dir`.
pub fn generate(config: &SynthConfig, dir: &Path) -> Result<CorpusPaths, DataError> {
    let synth = Synth::new(config.clone())?;
    fs::create_dir_all(dir)?;
    let mut splits = BTreeMap::new();
    let plan = [
        ("train", config.synth_train, config.synth_repeat_prob, true),
        ("dev", config.synth_dev, config.synth_repeat_prob, true),
        ("test", config.synth_test, config.synth_repeat_prob, true),
        ("lm", config.synth_lm, config.synth_lm_repeat_prob, false),
        ("lm-dev", config.synth_lm_dev, config.synth_lm_repeat_prob, false),
    ];
    for (name, n, q, acoustic) in plan {
        if n == 0 && !acoustic {
            continue;
        }
        let utts = synth.split(name, n, q, acoustic);
        let transcripts = TranscriptCorpus {
            utterances: utts.iter().map(|u| Utterance { id: u.id.clone(), speaker: format!("spk{:02}", u.speaker), text: synth.text(&u.words) }).collect(),
        };
        let tpath = dir.join(format!("{}.txt", name));
        transcripts.write(&tpath)?;
        let spath = dir.join(format!("{}.segments", name));
        let segs: Vec<(String, Segment)> = utts
            .iter()
            .map(|u| (u.id.clone(), Segment { recording_id: u.recording.clone(), channel: "A".into(), start: u.start, end: u.start + duration(u) }))
            .collect();
        write_segments(&spath, &segs)?;
        let manifest = if acoustic {
            let seqs: Vec<FeatureSequence> = utts
                .iter()
                .map(|u| {
                    let mut s = FeatureSequence::new(u.frames.clone().unwrap());
                    s.frame_shift = FRAME_SHIFT;
                    s.utterance_id = u.id.clone();
                    s.speaker_id = format!("spk{:02}", u.speaker);
                    s.recording_id = u.recording.clone();
                    s.start_time = u.start;
                    s.end_time = u.start + duration(u);
                    s
                })
                .collect();
            Some(write_feature_corpus(dir, name, &seqs)?)
        } else {
            None
        };
        splits.insert(name.to_string(), (manifest, tpath, spath));
    }
    Ok(CorpusPaths { dir: dir.to_path_buf(), splits })
}

/// `id \t recording \t channel \t start \t end` lines.
pub fn write_segments(path: &Path, segs: &[(String, Segment)]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (id, s) in segs {
        writeln!(f, "{}\t{}\t{}\t{}\t{}", id, s.recording_id, s.channel, s.start, s.end)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_segments(path: &Path) -> Result<Vec<(String, Segment)>, DataError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(DataError::Format(format!("bad segment line `{}`", l)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| DataError::Format(format!("{}: {}", s, e)));
            Ok((f[0].to_string(), Segment { recording_id: f[1].into(), channel: f[2].into(), start: num(f[3])?, end: num(f[4])? }))
        })
        .collect()
}

/// Plug-in conditional entropy (bits) of an utterance's first word given the
/// previous utterance's first word, over consecutive pairs in each recording.
pub fn utterance_bigram_entropy(utts: &[SynthUtterance]) -> f64 {
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut marg: BTreeMap<usize, usize> = BTreeMap::new();
    let mut n = 0usize;
    for pair in utts.windows(2) {
        if pair[0].recording != pair[1].recording {
            continue;
        }
        let (a, b) = (pair[0].words[0], pair[1].words[0]);
        *joint.entry((a, b)).or_default() += 1;
        *marg.entry(a).or_default() += 1;
        n += 1;
    }
    joint.iter().map(|(&(a, _), &c)| -(c as f64 / n as f64) * (c as f64 / marg[&a] as f64).log2()).sum()
}
