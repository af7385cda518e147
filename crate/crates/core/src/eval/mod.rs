//! Levenshtein alignment and word error rate reports.

use std::io::{self, Write};

use crate::text::WORD_END;

/// Substitution, deletion and insertion counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.sub + self.del + self.ins
    }

    fn add(&mut self, other: EditCounts) {
        self.sub += other.sub;
        self.del += other.del;
        self.ins += other.ins;
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`. Among equally
/// cheap alignments the backtrace prefers substitution (or match), then
/// insertion, then deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + mismatch == here {
                counts.sub += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            counts.ins += 1;
            j -= 1;
        } else {
            counts.del += 1;
            i -= 1;
        }
    }
    counts
}

/// Lowercases, turns the subword boundary marker into a space and splits on
/// whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.replace(WORD_END, " ").to_lowercase().split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub ref_words: usize,
    pub counts: EditCounts,
}

impl UtteranceScore {
    pub fn wer(&self) -> f64 {
        ratio(self.counts.total(), self.ref_words)
    }
}

fn ratio(errors: usize, n: usize) -> f64 {
    if n == 0 {
        if errors == 0 { 0.0 } else { f64::INFINITY }
    } else {
        errors as f64 / n as f64
    }
}

/// Per-utterance and corpus error counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport {
    pub utterances: Vec<UtteranceScore>,
    pub totals: EditCounts,
    pub ref_words: usize,
}

impl ScoreReport {
    pub fn push(&mut self, id: &str, reference: &str, hyp: &str) {
        let (r, h) = (normalize_words(reference), normalize_words(hyp));
        self.push_words(id, &r, &h);
    }

    pub fn push_words<T: PartialEq>(&mut self, id: &str, reference: &[T], hyp: &[T]) {
        let counts = edit_distance(reference, hyp);
        self.totals.add(counts);
        self.ref_words += reference.len();
        self.utterances.push(UtteranceScore { id: id.to_string(), ref_words: reference.len(), counts });
    }

    pub fn wer(&self) -> f64 {
        ratio(self.totals.total(), self.ref_words)
    }

    pub fn errors(&self) -> usize {
        self.totals.total()
    }

    pub fn summary(&self) -> String {
        format!(
            "utterances {}  words {}  sub {}  del {}  ins {}  errors {}  WER {:.2}%\n",
            self.utterances.len(),
            self.ref_words,
            self.totals.sub,
            self.totals.del,
            self.totals.ins,
            self.errors(),
            100.0 * self.wer()
        )
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "utterance_id,ref_words,sub,del,ins,wer")?;
        for u in &self.utterances {
            writeln!(w, "{},{},{},{},{},{:.6}", u.id, u.ref_words, u.counts.sub, u.counts.del, u.counts.ins, u.wer())?;
        }
        Ok(())
    }
}

/// Token error rate of hypothesis token sequences against references.
pub fn token_error_rate(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let (errors, n) = pairs.iter().fold((0, 0), |(e, n), (r, h)| (e + edit_distance(r, h).total(), n + r.len()));
    ratio(errors, n)
}
