use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{TextError, TranscriptCorpus};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// End-of-word marker appended to every word before merging. It sorts after
/// ASCII, so word-internal pairs win lexicographic ties.
pub const WORD_END: &str = "\u{2581}";

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// Bidirectional token ↔ id map. Ids 0..3 are BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Vocab { tokens: Vec::new(), ids: HashMap::new() };
        for s in [BOS, EOS, UNK] {
            v.push(s);
        }
        v
    }

    fn push(&mut self, tok: &str) -> bool {
        if self.ids.contains_key(tok) {
            return false;
        }
        self.ids.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
        true
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.ids.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
    pub vocab: Vocab,
    /// Number of base symbols (characters plus the word-end marker).
    pub base_symbols: usize,
}

/// Result of training; `reached_target` is false when the corpus ran out of
/// mergeable pairs first.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: BpeModel,
    pub target: usize,
    pub reached_target: bool,
}

fn split_word(word: &str) -> Vec<String> {
    word.chars().map(|c| c.to_string()).chain(std::iter::once(WORD_END.to_string())).collect()
}

impl BpeModel {
    /// Greedy most-frequent-pair merging until the vocabulary (specials
    /// included) reaches `target_vocab_size` or no pair occurs at least
    /// `min_pair_frequency` times. Ties go to the lexicographically smallest pair.
    pub fn train(corpus: &TranscriptCorpus, target_vocab_size: usize, min_pair_frequency: usize) -> Result<TrainOutcome, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for u in &corpus.utterances {
            for w in u.words() {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let mut alphabet: Vec<String> = word_counts.keys().flat_map(|w| w.chars().map(|c| c.to_string())).collect();
        alphabet.push(WORD_END.to_string());
        alphabet.sort();
        alphabet.dedup();

        let mut vocab = Vocab::with_specials();
        for s in &alphabet {
            vocab.push(s);
        }
        if target_vocab_size < vocab.len() {
            return Err(TextError::TargetTooSmall { target: target_vocab_size, base: vocab.len() });
        }
        let base_symbols = alphabet.len();

        let mut words: Vec<(Vec<String>, usize)> = word_counts.iter().map(|(w, &c)| (split_word(w), c)).collect();
        let mut merges = Vec::new();
        while vocab.len() < target_vocab_size {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, c) in &words {
                for p in syms.windows(2) {
                    *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, c)| c >= min_pair_frequency.max(1))
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            let merged = format!("{}{}", l, r);
            for (syms, _) in words.iter_mut() {
                *syms = merge_pair(syms, &l, &r, &merged);
            }
            vocab.push(&merged);
            merges.push((l, r));
        }
        let reached_target = vocab.len() >= target_vocab_size;
        if !reached_target {
            log::warn!("BPE training exhausted the corpus at {} of {} units", vocab.len(), target_vocab_size);
        }
        Ok(TrainOutcome { model: BpeModel { merges, vocab, base_symbols }, target: target_vocab_size, reached_target })
    }

    /// Copy limited to the first `n` merges.
    pub fn truncated(&self, n: usize) -> BpeModel {
        let mut vocab = Vocab::with_specials();
        for t in &self.vocab.tokens[3..3 + self.base_symbols] {
            vocab.push(t);
        }
        let merges: Vec<_> = self.merges.iter().take(n).cloned().collect();
        for (l, r) in &merges {
            vocab.push(&format!("{}{}", l, r));
        }
        BpeModel { merges, vocab, base_symbols: self.base_symbols }
    }

    fn segment_word(&self, word: &str, ranks: &HashMap<(&str, &str), usize>) -> Vec<String> {
        let mut syms = split_word(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| ranks.get(&(p[0].as_str(), p[1].as_str())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let merged = format!("{}{}", l, r);
            syms = merge_pair(&syms, l, r, &merged);
        }
        syms
    }

    /// Token ids without sentence framing; unknown symbols map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ranks: HashMap<(&str, &str), usize> =
            self.merges.iter().enumerate().map(|(i, (l, r))| ((l.as_str(), r.as_str()), i)).collect();
        text.split_whitespace()
            .flat_map(|w| self.segment_word(w, &ranks))
            .map(|s| self.vocab.id(&s).unwrap_or(UNK_ID))
            .collect()
    }

    /// `[BOS, tokens…, EOS]`.
    pub fn encode_sentence(&self, text: &str) -> Vec<usize> {
        let mut out = vec![BOS_ID];
        out.extend(self.encode(text));
        out.push(EOS_ID);
        out
    }

    /// Inverse of [`encode`](Self::encode); BOS/EOS are dropped and UNK is rendered as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                BOS_ID | EOS_ID => {}
                UNK_ID => s.push_str(UNK),
                _ => s.push_str(self.vocab.token(id).unwrap_or(UNK)),
            }
        }
        s.replace(WORD_END, " ").trim_end().to_string()
    }

    /// Text format: header, one merge per line, then the vocabulary listing.
    pub fn to_text(&self) -> String {
        let mut s = format!("#s2s-bpe v1\nbase {}\nmerges {}\n", self.base_symbols, self.merges.len());
        for (l, r) in &self.merges {
            s.push_str(&format!("{} {}\n", l, r));
        }
        s.push_str(&format!("vocab {}\n", self.vocab.len()));
        for (i, t) in self.vocab.tokens.iter().enumerate() {
            s.push_str(&format!("{} {}\n", i, t));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let bad = |m: &str| TextError::Format(format!("bpe model: {}", m));
        let mut lines = text.lines();
        if lines.next() != Some("#s2s-bpe v1") {
            return Err(bad("missing header"));
        }
        let count = |line: Option<&str>, key: &str| -> Result<usize, TextError> {
            line.and_then(|l| l.strip_prefix(key))
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| bad(&format!("expected `{} <n>`", key)))
        };
        let base_symbols = count(lines.next(), "base ")?;
        let n_merges = count(lines.next(), "merges ")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(line))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let n_vocab = count(lines.next(), "vocab ")?;
        let mut vocab = Vocab { tokens: Vec::new(), ids: HashMap::new() };
        for i in 0..n_vocab {
            let line = lines.next().ok_or_else(|| bad("truncated vocab"))?;
            let (id, tok) = line.split_once(' ').ok_or_else(|| bad(line))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(bad(&format!("vocab id {} out of order", id)));
            }
            if !vocab.push(tok) {
                return Err(bad(&format!("duplicate token {}", tok)));
            }
        }
        if vocab.token(BOS_ID) != Some(BOS) || vocab.token(EOS_ID) != Some(EOS) || vocab.token(UNK_ID) != Some(UNK) {
            return Err(bad("special tokens must occupy ids 0..3"));
        }
        Ok(BpeModel { merges, vocab, base_symbols })
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn merge_pair(syms: &[String], l: &str, r: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}
