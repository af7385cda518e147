//! Transcript preparation and character-level byte-pair encoding.

mod bpe;

pub use bpe::{BpeModel, TrainOutcome, Vocab, BOS, BOS_ID, EOS, EOS_ID, UNK, UNK_ID, WORD_END};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
    #[error("duplicate utterance id {0}")]
    DuplicateId(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary {target} is smaller than the {base} base symbols")]
    TargetTooSmall { target: usize, base: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub text: String,
}

impl Utterance {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TranscriptCorpus {
    pub utterances: Vec<Utterance>,
}

impl TranscriptCorpus {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self, TextError> {
        let mut seen = std::collections::HashSet::new();
        for u in &utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(TextError::DuplicateId(u.id.clone()));
            }
        }
        Ok(TranscriptCorpus { utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// `id<TAB>speaker<TAB>text` per line.
    pub fn read(path: &Path) -> Result<Self, TextError> {
        let r = BufReader::new(File::open(path)?);
        let mut utts = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(spk)) = (parts.next(), parts.next()) else {
                return Err(TextError::Format(format!("{}:{}: expected id<TAB>speaker<TAB>text", path.display(), i + 1)));
            };
            let text = parts.next().unwrap_or("").split_whitespace().collect::<Vec<_>>().join(" ");
            utts.push(Utterance { id: id.to_string(), speaker: spk.to_string(), text });
        }
        Self::new(utts)
    }

    pub fn write(&self, path: &Path) -> Result<(), TextError> {
        let mut w = BufWriter::new(File::create(path)?);
        for u in &self.utterances {
            writeln!(w, "{}\t{}\t{}", u.id, u.speaker, u.text)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which transcript filters to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterOptions {
    pub drop_fragments: bool,
    pub drop_noise: bool,
    /// Keep at most this many utterances with identical (post-filter) text.
    pub dedup_max: Option<usize>,
}

impl Default for FilterOptions {
    /// Fragment and noise filters on, duplicate filter off.
    fn default() -> Self {
        FilterOptions { drop_fragments: true, drop_noise: true, dedup_max: None }
    }
}

pub fn is_fragment(word: &str) -> bool {
    word.len() > 1 && (word.ends_with('-') || word.starts_with('-'))
}

pub fn is_noise(word: &str) -> bool {
    word.len() > 2 && word.starts_with('[') && word.ends_with(']')
}

pub fn filter_transcripts(corpus: &TranscriptCorpus, opts: FilterOptions) -> TranscriptCorpus {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for u in &corpus.utterances {
        let words: Vec<&str> = u
            .words()
            .filter(|w| !(opts.drop_fragments && is_fragment(w)))
            .filter(|w| !(opts.drop_noise && is_noise(w)))
            .collect();
        if words.is_empty() {
            continue;
        }
        let text = words.join(" ");
        if let Some(max) = opts.dedup_max {
            let c = counts.entry(text.clone()).or_insert(0);
            if *c >= max {
                continue;
            }
            *c += 1;
        }
        out.push(Utterance { id: u.id.clone(), speaker: u.speaker.clone(), text });
    }
    TranscriptCorpus { utterances: out }
}
