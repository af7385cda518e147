//! End-to-end commands over a run directory. The command-line tool is a thin
//! wrapper around these functions.

mod config;

pub use config::{RunConfig, RunDir, RunSettings, BUNDLED};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::config::ConfigError;
use crate::datagen::{generate, read_segments, CorpusPaths, DataError};
use crate::eval::{token_error_rate, ScoreReport};
use crate::features::{log_mel, read_feature_corpus, read_wav, speaker_stats, write_feature_corpus, FeatureError, FeatureSequence, MelConfig};
use crate::lm::{group_utterances, perplexity, train_lm, Lm, LmUtterance, Segment};
use crate::model::{Model, ModelError};
use crate::search::{decode_groups, greedy_decode, sweep_beam, Decoded, LmMode, SearchError, SWEEP_HEADER};
use crate::text::{BpeModel, TextError, TranscriptCorpus};
use crate::trainer::{prepare_features, train, TrainData, TrainError, Utterance, INGREDIENTS, LOG_HEADER};

/// Failure of a command, classified for the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    /// 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numeric(_) => 4,
            PipelineError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}
impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}
impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        PipelineError::Data(e.to_string())
    }
}
impl From<TextError> for PipelineError {
    fn from(e: TextError) -> Self {
        PipelineError::Data(e.to_string())
    }
}
impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(c) => c.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}
impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(c) => c.into(),
            ModelError::Io(_) | ModelError::Checkpoint(_) | ModelError::FeatureDim { .. } | ModelError::TokenOutOfRange { .. } | ModelError::Empty(_) => {
                PipelineError::Data(e.to_string())
            }
            other => PipelineError::Other(other.to_string()),
        }
    }
}
impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            TrainError::Config(c) => c.into(),
            TrainError::Model(m) => m.into(),
            TrainError::UnknownParam(_) => PipelineError::Other(e.to_string()),
            other => PipelineError::Data(other.to_string()),
        }
    }
}
impl From<SearchError> for PipelineError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Config(c) => c.into(),
            SearchError::Model(m) => m.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn missing(path: &Path, what: &str) -> PipelineError {
    PipelineError::Data(format!("{} not found: {}", what, path.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path, what))
    }
}

/// A run directory with its resolved configuration.
pub struct Run {
    pub dir: RunDir,
    pub config: RunConfig,
}

impl Run {
    pub fn open(root: &Path, config: RunConfig) -> Result<Self> {
        Ok(Run { dir: RunDir::create(root)?, config })
    }

    fn path_value(&mut self, key: &str) -> &mut String {
        let r = &mut self.config.run;
        match key {
            "data_dir" => &mut r.data_dir,
            "bpe_path" => &mut r.bpe_path,
            "model_path" => &mut r.model_path,
            "lm_path" => &mut r.lm_path,
            _ => unreachable!("not a path key: {}", key),
        }
    }

    /// Value of a path key; empty values mean the default location in this run.
    pub fn path(&self, key: &str) -> PathBuf {
        let (v, default) = match key {
            "data_dir" => (&self.config.run.data_dir, self.dir.data()),
            "bpe_path" => (&self.config.run.bpe_path, self.dir.checkpoints().join("bpe.txt")),
            "model_path" => (&self.config.run.model_path, self.dir.checkpoints().join("model.ckpt")),
            "lm_path" => (&self.config.run.lm_path, self.dir.checkpoints().join("lm.ckpt")),
            _ => unreachable!("not a path key: {}", key),
        };
        if v.is_empty() {
            default
        } else {
            PathBuf::from(v)
        }
    }

    /// Records the inputs of a command as absolute paths so its resolved
    /// config can be rerun from any directory.
    pub fn pin(&mut self, keys: &[&str]) {
        for k in keys {
            let p = self.path(k);
            *self.path_value(k) = std::path::absolute(&p).unwrap_or(p).display().to_string();
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path("data_dir")
    }

    /// Writes the fully resolved configuration of `command` under `configs/`.
    pub fn write_config(&self, command: &str) -> Result<PathBuf> {
        let path = self.dir.configs().join(format!("{}.conf", command));
        fs::write(&path, self.config.to_text())?;
        Ok(path)
    }

    fn split_paths(&self, split: &str) -> (PathBuf, PathBuf, PathBuf) {
        let d = self.data_dir();
        (d.join(format!("{}.manifest", split)), d.join(format!("{}.txt", split)), d.join(format!("{}.segments", split)))
    }

    pub fn load_bpe(&self) -> Result<BpeModel> {
        let p = self.path("bpe_path");
        require(&p, "BPE model")?;
        Ok(BpeModel::load(&p)?)
    }

    pub fn load_model(&self) -> Result<Model> {
        let p = self.path("model_path");
        require(&p, "model checkpoint")?;
        Ok(Model::load(&p)?)
    }

    pub fn load_lm(&self) -> Result<Lm> {
        let p = self.path("lm_path");
        require(&p, "LM checkpoint")?;
        Ok(Lm::load(&p)?)
    }

    /// Transcripts of `split` and their segment times.
    fn transcripts(&self, split: &str) -> Result<(TranscriptCorpus, BTreeMap<String, Segment>)> {
        let (_, t, s) = self.split_paths(split);
        require(&t, "transcripts")?;
        let corpus = TranscriptCorpus::read(&t)?;
        let segs = if s.exists() { read_segments(&s)?.into_iter().collect() } else { BTreeMap::new() };
        Ok((corpus, segs))
    }

    /// Features of `split` paired with their transcripts by utterance id.
    pub fn load_split(&self, split: &str, bpe: &BpeModel) -> Result<Vec<LabeledUtterance>> {
        let (m, _, _) = self.split_paths(split);
        require(&m, "feature manifest")?;
        let feats = read_feature_corpus(&m)?;
        let (corpus, _) = self.transcripts(split)?;
        feats
            .into_iter()
            .map(|f| {
                let u = corpus.get(&f.utterance_id).ok_or_else(|| PipelineError::Data(format!("no transcript for {}", f.utterance_id)))?;
                Ok(LabeledUtterance { text: u.text.clone(), utt: Utterance { tokens: bpe.encode(&u.text), features: f } })
            })
            .collect()
    }
}

/// A training or test utterance with its reference text.
#[derive(Clone, Debug)]
pub struct LabeledUtterance {
    pub text: String,
    pub utt: Utterance,
}

/// `gen-data`: writes the synthetic corpus into the data directory.
pub fn gen_data(run: &Run) -> Result<CorpusPaths> {
    run.write_config("gen-data")?;
    Ok(generate(&run.config.synth, &run.data_dir())?)
}

/// `prep`: log-mel features for a list of `utterance_id speaker_id wav_path`
/// lines, written as split `name` of the data directory.
pub fn prep(run: &Run, wav_list: &Path, name: &str) -> Result<PathBuf> {
    run.write_config("prep")?;
    require(wav_list, "wav list")?;
    let text = fs::read_to_string(wav_list)?;
    let base = wav_list.parent().unwrap_or(Path::new("."));
    let mut seqs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(PipelineError::Data(format!("{} line {}: expected `utterance_id speaker_id wav_path`", wav_list.display(), i + 1)));
        }
        let path = base.join(f[2]);
        require(&path, "wav file")?;
        let mut seq = log_mel(&read_wav(&path)?, &MelConfig::default())?;
        seq.utterance_id = f[0].to_string();
        seq.speaker_id = f[1].to_string();
        seq.recording_id = f[0].to_string();
        seqs.push(seq);
    }
    Ok(write_feature_corpus(&run.data_dir(), name, &seqs)?)
}

/// `train-bpe`: subword model from the training transcripts.
pub fn train_bpe(run: &mut Run) -> Result<BpeModel> {
    run.pin(&["data_dir"]);
    run.write_config("train-bpe")?;
    let (corpus, _) = run.transcripts("train")?;
    let out = BpeModel::train(&corpus, run.config.run.bpe_vocab, run.config.run.bpe_min_pair_frequency)?;
    let p = run.path("bpe_path");
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir)?;
    }
    out.model.save(&p)?;
    Ok(out.model)
}

/// Summary of a `train` run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: Model,
    pub log: Vec<crate::trainer::EpochLog>,
}

/// `train`: trains the acoustic model on `train` with `dev` held out. The
/// feature dimension and vocabulary size are taken from the data and
/// recorded in the resolved config.
pub fn train_model(run: &mut Run) -> Result<TrainSummary> {
    run.pin(&["data_dir", "bpe_path"]);
    let bpe = run.load_bpe()?;
    let tr: Vec<Utterance> = run.load_split("train", &bpe)?.into_iter().map(|u| u.utt).collect();
    let dev: Vec<Utterance> = match run.load_split("dev", &bpe) {
        Ok(d) => d.into_iter().map(|u| u.utt).collect(),
        Err(PipelineError::Data(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    let dim = tr.first().map(|u| u.features.dim()).ok_or_else(|| PipelineError::Data("empty training split".into()))?;
    run.config.model.feature_dim = if run.config.train.use_deltas { 3 * dim } else { dim };
    run.config.model.vocab_size = bpe.vocab.len();
    run.config.validate()?;
    run.write_config("train")?;
    let data = TrainData::new(tr, dev)?;
    let model = Model::build(run.config.model.clone(), run.config.run.model_seed)?;
    let log_path = run.dir.logs().join("train.csv");
    let mut log_file = fs::File::create(&log_path)?;
    writeln!(log_file, "{}", LOG_HEADER)?;
    let ckpt_dir = run.dir.checkpoints();
    let every = run.config.train.checkpoint_every;
    let outcome = train(model, &data, &run.config.train, &run.config.augment, |entry, model| {
        writeln!(log_file, "{}", entry)?;
        log_file.flush()?;
        let e = entry.schedule.epoch;
        if every > 0 && e % every == 0 {
            model.save(&ckpt_dir.join(format!("epoch-{:03}.ckpt", e)))?;
        }
        Ok(())
    })?;
    let p = run.path("model_path");
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir)?;
    }
    outcome.model.save(&p)?;
    Ok(TrainSummary { model: outcome.model, log: outcome.log })
}

fn lm_groups(corpus: &TranscriptCorpus, segs: &BTreeMap<String, Segment>, bpe: &BpeModel, max_seconds: f64, cross: bool) -> Vec<Vec<LmUtterance>> {
    let utts: Vec<LmUtterance> =
        corpus.utterances.iter().map(|u| LmUtterance { tokens: bpe.encode(&u.text), words: u.text.split_whitespace().count() }).collect();
    if !cross || segs.len() != corpus.len() {
        return utts.into_iter().map(|u| vec![u]).collect();
    }
    let ordered: Vec<Segment> = corpus.utterances.iter().map(|u| segs[&u.id].clone()).collect();
    group_utterances(&ordered, max_seconds).into_iter().map(|g| g.into_iter().map(|i| utts[i].clone()).collect()).collect()
}

/// Held-out perplexities of a trained LM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmSummary {
    pub reset_ppl: f64,
    pub cross_ppl: f64,
}

/// `train-lm`: trains the subword LM on the text-only `lm` split (falling
/// back to `train` transcripts) and reports `dev` perplexity with and
/// without carried state.
pub fn train_lm_cmd(run: &mut Run) -> Result<LmSummary> {
    run.pin(&["data_dir", "bpe_path"]);
    let bpe = run.load_bpe()?;
    run.config.lm.lm_vocab = bpe.vocab.len();
    run.config.validate()?;
    run.write_config("train-lm")?;
    let split = if run.split_paths("lm").1.exists() { "lm" } else { "train" };
    let (corpus, segs) = run.transcripts(split)?;
    let cfg = &run.config.lm;
    let groups = lm_groups(&corpus, &segs, &bpe, cfg.max_group_seconds, cfg.cross_utterance);
    let dev = if run.split_paths("lm-dev").1.exists() { "lm-dev" } else { "dev" };
    let (dev_corpus, dev_segs) = run.transcripts(dev)?;
    let heldout = lm_groups(&dev_corpus, &dev_segs, &bpe, cfg.max_group_seconds, true);
    let lm = Lm::build(cfg.clone(), run.config.lm_train.lm_seed)?;
    let mut log_file = fs::File::create(run.dir.logs().join("lm.csv"))?;
    writeln!(log_file, "epoch,lr,label_smoothing,train_loss,heldout_ppl")?;
    let (lm, _) = train_lm(lm, &groups, &heldout, &run.config.lm_train, |e| {
        let _ = writeln!(log_file, "{},{},{},{:.6},{:.6}", e.epoch, e.lr, e.label_smoothing, e.train_loss, e.heldout_ppl);
    })?;
    let p = run.path("lm_path");
    lm.save(&p)?;
    let summary = LmSummary { reset_ppl: perplexity(&lm, &heldout, false)?.ppl(), cross_ppl: perplexity(&lm, &heldout, true)?.ppl() };
    fs::write(run.dir.reports().join("lm.txt"), format!("dev_ppl_reset {:.6}\ndev_ppl_cross {:.6}\n", summary.reset_ppl, summary.cross_ppl))?;
    Ok(summary)
}

/// How `decode` searches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

/// Decoding result of one split.
#[derive(Clone, Debug)]
pub struct DecodeSummary {
    pub ids: Vec<String>,
    pub hyps: Vec<Vec<usize>>,
    pub token_error_rate: f64,
    pub score: ScoreReport,
}

/// Utterances of `split` in decoding groups of consecutive utterances of a
/// recording, features prepared with the split's own speaker statistics.
/// Deltas are appended when the model expects three times the stored dimension.
fn decode_inputs(run: &Run, split: &str, bpe: &BpeModel, model_dim: usize) -> Result<(Vec<Vec<usize>>, Vec<LabeledUtterance>, Vec<Vec<Tensor>>)> {
    let utts = run.load_split(split, bpe)?;
    let seqs: Vec<FeatureSequence> = utts.iter().map(|u| u.utt.features.clone()).collect();
    let deltas = seqs.first().is_some_and(|s| model_dim == 3 * s.dim());
    let stats = speaker_stats(&seqs)?;
    let segments: Vec<Segment> = seqs
        .iter()
        .map(|s| Segment { recording_id: s.recording_id.clone(), channel: String::new(), start: s.start_time, end: s.end_time })
        .collect();
    let groups = group_utterances(&segments, run.config.lm.max_group_seconds);
    let feats: Vec<Vec<Tensor>> = groups
        .iter()
        .map(|g| g.iter().map(|&i| Ok(prepare_features(&seqs[i], &stats, deltas)?.frames)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok((groups, utts, feats))
}

fn decode_split(run: &Run, model: &Model, lm: Option<&Lm>, split: &str, mode: DecodeMode, lm_mode: LmMode, w: &crate::search::FusionWeights) -> Result<(DecodeSummary, Vec<(String, Decoded)>)> {
    let bpe = run.load_bpe()?;
    if bpe.vocab.len() != model.config.vocab_size {
        return Err(PipelineError::Data(format!("BPE has {} units, model expects {}", bpe.vocab.len(), model.config.vocab_size)));
    }
    let (groups, utts, feats) = decode_inputs(run, split, &bpe, model.config.feature_dim)?;
    let mut decoded: Vec<Option<Decoded>> = vec![None; utts.len()];
    match mode {
        DecodeMode::Greedy => {
            use rayon::prelude::*;
            let flat: Vec<(usize, &Tensor)> = groups.iter().zip(&feats).flat_map(|(g, f)| g.iter().copied().zip(f)).collect();
            let hyps: Vec<std::result::Result<(usize, Vec<usize>), ModelError>> =
                flat.par_iter().map(|&(i, f)| Ok((i, greedy_decode(model, f, w.max_output_factor)?))).collect();
            for h in hyps {
                let (i, tokens) = h?;
                let len = tokens.len();
                decoded[i] = Some(Decoded {
                    finished: true,
                    nbest: vec![crate::search::NBestEntry { tokens, score: f64::NAN, model_logp: f64::NAN, lm_logp: 0.0, len, coverage: 0 }],
                });
            }
        }
        DecodeMode::Beam => {
            let runner = lm.map(|l| l.runner()).transpose()?;
            let out = decode_groups(model, runner.as_ref(), &feats, w, if runner.is_some() { lm_mode } else { LmMode::None }, run.config.run.nbest)?;
            for (g, res) in groups.iter().zip(out) {
                for (&i, d) in g.iter().zip(res) {
                    decoded[i] = Some(d);
                }
            }
        }
    }
    let decoded: Vec<Decoded> = decoded.into_iter().map(|d| d.expect("every utterance decoded")).collect();
    let hyps: Vec<Vec<usize>> = decoded.iter().map(|d| d.nbest.first().map(|e| e.tokens.clone()).unwrap_or_default()).collect();
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = utts.iter().zip(&hyps).map(|(u, h)| (u.utt.tokens.clone(), h.clone())).collect();
    let mut score = ScoreReport::default();
    for (u, h) in utts.iter().zip(&hyps) {
        score.push(&u.utt.features.utterance_id, &u.text, &bpe.decode(h));
    }
    let ids: Vec<String> = utts.iter().map(|u| u.utt.features.utterance_id.clone()).collect();
    let nbest = ids.iter().cloned().zip(decoded).collect();
    Ok((DecodeSummary { token_error_rate: token_error_rate(&pairs), ids, hyps, score }, nbest))
}

/// Options of the `decode` command.
#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub use_lm: bool,
}

/// `decode`: writes `reports/hyp-<split>.txt` (`id<TAB>text`),
/// `reports/nbest-<split>.txt` for beam search and a summary with token
/// and word error rates against the split's transcripts.
pub fn decode(run: &mut Run, opts: &DecodeOptions) -> Result<DecodeSummary> {
    run.pin(&["data_dir", "bpe_path", "model_path", "lm_path"]);
    run.write_config("decode")?;
    let model = run.load_model()?;
    let use_lm = opts.use_lm && run.config.run.lm_mode != LmMode::None && opts.mode == DecodeMode::Beam;
    let lm = if use_lm { Some(run.load_lm()?) } else { None };
    let split = run.config.run.decode_split.clone();
    let (summary, nbest) = decode_split(run, &model, lm.as_ref(), &split, opts.mode, run.config.run.lm_mode, &run.config.fusion)?;
    let bpe = run.load_bpe()?;
    let mut hyp = String::new();
    for (id, h) in summary.ids.iter().zip(&summary.hyps) {
        writeln!(hyp, "{}\t{}", id, bpe.decode(h)).unwrap();
    }
    fs::write(run.dir.reports().join(format!("hyp-{}.txt", split)), hyp)?;
    if opts.mode == DecodeMode::Beam {
        let mut nb = String::from("utterance_id\trank\tscore\tmodel_logp\tlm_logp\tlen\tcoverage\ttext\n");
        for (id, d) in &nbest {
            for (r, e) in d.nbest.iter().enumerate() {
                writeln!(nb, "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}", id, r + 1, e.score, e.model_logp, e.lm_logp, e.len, e.coverage, bpe.decode(&e.tokens)).unwrap();
            }
        }
        fs::write(run.dir.reports().join(format!("nbest-{}.txt", split)), nb)?;
    }
    fs::write(
        run.dir.reports().join(format!("decode-{}.summary", split)),
        format!("token_error_rate {:.6}\n{}", summary.token_error_rate, summary.score.summary()),
    )?;
    Ok(summary)
}

/// `score`: WER of a `id<TAB>text` hypothesis file against the transcripts
/// of `split`. Writes a text summary and a per-utterance CSV.
pub fn score(run: &mut Run, split: &str, hyp_path: &Path) -> Result<ScoreReport> {
    run.pin(&["data_dir"]);
    run.write_config("score")?;
    require(hyp_path, "hypothesis file")?;
    let (corpus, _) = run.transcripts(split)?;
    let text = fs::read_to_string(hyp_path)?;
    let mut hyps: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (id, h) = line.split_once('\t').unwrap_or((line, ""));
        hyps.insert(id, h);
    }
    let mut report = ScoreReport::default();
    for u in &corpus.utterances {
        report.push(&u.id, &u.text, hyps.get(u.id.as_str()).copied().unwrap_or(""));
    }
    fs::write(run.dir.reports().join(format!("score-{}.txt", split)), report.summary())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(run.dir.reports().join(format!("score-{}.csv", split)), csv)?;
    Ok(report)
}

/// `sweep-beam`: WER over the configured beam widths without LM, with LM and
/// with cross-utterance LM state. Writes `reports/sweep.csv`.
pub fn sweep(run: &mut Run) -> Result<Vec<crate::search::SweepRow>> {
    run.pin(&["data_dir", "bpe_path", "model_path", "lm_path"]);
    run.write_config("sweep-beam")?;
    let model = run.load_model()?;
    let lm = run.load_lm()?;
    let bpe = run.load_bpe()?;
    let split = run.config.run.decode_split.clone();
    let (groups, utts, feats) = decode_inputs(run, &split, &bpe, model.config.feature_dim)?;
    let rows = sweep_beam(&model, &lm.runner()?, &feats, &run.config.beams()?, &run.config.fusion, |res| {
        let mut report = ScoreReport::default();
        for (g, r) in groups.iter().zip(res) {
            for (&i, d) in g.iter().zip(r) {
                let h = d.nbest.first().map(|e| bpe.decode(&e.tokens)).unwrap_or_default();
                report.push(&utts[i].utt.features.utterance_id, &utts[i].text, &h);
            }
        }
        report.wer()
    })?;
    let mut csv = format!("{}\n", SWEEP_HEADER);
    for r in &rows {
        writeln!(csv, "{}", r).unwrap();
    }
    fs::write(run.dir.reports().join("sweep.csv"), csv)?;
    Ok(rows)
}

/// `count-params`: parameter counts of the acoustic model and the LM.
pub fn count_params(cfg: &RunConfig) -> String {
    let c = cfg.model.param_counts();
    let m = |n: usize| n as f64 / 1e6;
    format!(
        "encoder {} ({:.2}M)\ndecoder {} ({:.2}M)\ntotal {} ({:.2}M)\nlm {} ({:.2}M)\n",
        c.encoder,
        m(c.encoder),
        c.decoder,
        m(c.decoder),
        c.total,
        m(c.total),
        cfg.lm.num_params(),
        m(cfg.lm.num_params())
    )
}

pub const ABLATION_HEADER: &str = "ingredient,token_error,wer,errors";

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ingredient: String,
    pub token_error: f64,
    pub wer: f64,
    pub errors: usize,
}

impl std::fmt::Display for AblationRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{:.6},{:.6},{}", self.ingredient, self.token_error, self.wer, self.errors)
    }
}

/// Trains and decodes the baseline plus one run per discarded ingredient,
/// each in `<run>/ablate/<name>`, and writes `reports/ablation.csv`.
/// Decoding follows the `decode` defaults of the config.
pub fn ablate(run: &mut Run, ingredients: &[String]) -> Result<Vec<AblationRow>> {
    run.pin(&["data_dir", "bpe_path", "lm_path"]);
    run.config.run.model_path.clear();
    run.write_config("ablate")?;
    for name in ingredients {
        if !INGREDIENTS.iter().any(|(n, _)| n == name) {
            return Err(PipelineError::Config(format!("unknown ingredient `{}`", name)));
        }
    }
    let mut rows = Vec::new();
    let names = std::iter::once("baseline".to_string()).chain(ingredients.iter().cloned());
    for name in names {
        let mut cfg = run.config.clone();
        if name != "baseline" {
            cfg.train.disable(&name)?;
        }
        let mut sub = Run::open(&run.dir.root.join("ablate").join(&name), cfg)?;
        log::info!("ablation run `{}`", name);
        train_model(&mut sub)?;
        let s = decode(&mut sub, &DecodeOptions { mode: DecodeMode::Beam, use_lm: true })?;
        rows.push(AblationRow { ingredient: name, token_error: s.token_error_rate, wer: s.score.wer(), errors: s.score.errors() });
    }
    let mut csv = format!("{}\n", ABLATION_HEADER);
    for r in &rows {
        writeln!(csv, "{}", r).unwrap();
    }
    fs::write(run.dir.reports().join("ablation.csv"), csv)?;
    Ok(rows)
}
