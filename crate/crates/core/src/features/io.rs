use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{FeatureError, FeatureSequence, Waveform};
use crate::autodiff::{read_checkpoint, write_checkpoint, DType};

/// One line of a feature manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub recording_id: String,
    pub start: f64,
    pub end: f64,
    /// Tensor archive holding the utterance, relative to the manifest.
    pub path: String,
}

/// Tab-separated: `id speaker recording start end path`.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(w, "{}\t{}\t{}\t{}\t{}\t{}", e.utterance_id, e.speaker_id, e.recording_id, e.start, e.end, e.path)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, FeatureError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(FeatureError::Format(format!("{}:{}: expected 6 fields, got {}", path.display(), lineno + 1, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| FeatureError::Format(format!("{}:{}: {}", path.display(), lineno + 1, e)));
        out.push(ManifestEntry {
            utterance_id: f[0].to_string(),
            speaker_id: f[1].to_string(),
            recording_id: f[2].to_string(),
            start: num(f[3])?,
            end: num(f[4])?,
            path: f[5].to_string(),
        });
    }
    Ok(out)
}

/// Writes `corpus` into one tensor archive `<dir>/<name>.s2st` and a
/// manifest `<dir>/<name>.manifest`; returns the manifest path.
pub fn write_feature_corpus(dir: &Path, name: &str, corpus: &[FeatureSequence]) -> Result<PathBuf, FeatureError> {
    std::fs::create_dir_all(dir)?;
    let archive = format!("{}.s2st", name);
    let tensors: Vec<(String, _)> = corpus.iter().map(|s| (s.utterance_id.clone(), s.frames.clone())).collect();
    let frame_shift = corpus.first().map_or(0.01, |s| s.frame_shift);
    let mut w = BufWriter::new(File::create(dir.join(&archive))?);
    write_checkpoint(&mut w, &format!("frame_shift={}", frame_shift), &tensors, DType::F64)?;
    w.flush()?;
    let entries: Vec<ManifestEntry> = corpus
        .iter()
        .map(|s| ManifestEntry {
            utterance_id: s.utterance_id.clone(),
            speaker_id: s.speaker_id.clone(),
            recording_id: s.recording_id.clone(),
            start: s.start_time,
            end: s.end_time,
            path: archive.clone(),
        })
        .collect();
    let manifest = dir.join(format!("{}.manifest", name));
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads every utterance listed in a manifest, in manifest order.
pub fn read_feature_corpus(manifest: &Path) -> Result<Vec<FeatureSequence>, FeatureError> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut archives: HashMap<String, (f64, HashMap<String, crate::autodiff::Tensor>)> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if !archives.contains_key(&e.path) {
            let mut r = BufReader::new(File::open(base.join(&e.path))?);
            let ck = read_checkpoint(&mut r)?;
            let shift = ck
                .meta
                .strip_prefix("frame_shift=")
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0.01);
            archives.insert(e.path.clone(), (shift, ck.tensors.into_iter().collect()));
        }
        let (shift, tensors) = &archives[&e.path];
        let frames = tensors
            .get(&e.utterance_id)
            .ok_or_else(|| FeatureError::Format(format!("utterance {} missing from {}", e.utterance_id, e.path)))?
            .clone();
        out.push(FeatureSequence {
            frames,
            frame_shift: *shift,
            utterance_id: e.utterance_id,
            speaker_id: e.speaker_id,
            recording_id: e.recording_id,
            start_time: e.start,
            end_time: e.end,
        });
    }
    Ok(out)
}

/// Reads a mono PCM WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform, FeatureError> {
    let mut r = hound::WavReader::open(path).map_err(|e| FeatureError::Format(e.to_string()))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(FeatureError::Format(format!("{} has {} channels, expected mono", path.display(), spec.channels)));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>()
        }
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<Result<_, _>>(),
    }
    .map_err(|e| FeatureError::Format(e.to_string()))?;
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}
