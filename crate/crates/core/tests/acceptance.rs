//! End-to-end acceptance checks. A single test runs every criterion in order
//! (later ones reuse the run directory of the toy training run), prints one
//! PASS/FAIL line each and fails if any criterion failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seq2seq_asr::attention::{attend, AttentionDims, AttentionVars};
use seq2seq_asr::autodiff::{check_gradient, random_projection, Graph, ParamStore, Tensor};
use seq2seq_asr::eval::{edit_distance, ScoreReport};
use seq2seq_asr::features::{spec_augment_with_masks, AugmentPolicy, FeatureSequence};
use seq2seq_asr::layers::*;
use seq2seq_asr::model::{loss_graph, Example, LossOptions, Model, ModelConfig};
use seq2seq_asr::pipeline::RunConfig;
use seq2seq_asr::search::*;
use seq2seq_asr::text::{BOS_ID, EOS_ID};
use seq2seq_asr::trainer::{apply_weight_noise, derive_rng};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(value: usize, target: f64, tol: f64) -> bool {
    ((value as f64 - target) / target).abs() <= tol
}

fn work_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

/// Runs the CLI and returns its stdout.
fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_s2s-asr")).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`s2s-asr {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read(p: &Path) -> Result<String, String> {
    fs::read_to_string(p).map_err(|e| format!("{}: {}", p.display(), e))
}

fn summary_ter(p: &Path) -> Result<f64, String> {
    let text = read(p)?;
    text.lines()
        .find_map(|l| l.strip_prefix("token_error_rate "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no token_error_rate in {}", p.display()))
}

fn criterion_1() -> Outcome {
    let full = RunConfig::bundled("full").map_err(|e| e.to_string())?;
    let small = RunConfig::bundled("small").map_err(|e| e.to_string())?;
    let large = RunConfig::bundled("lm-large").map_err(|e| e.to_string())?;
    let p = full.model.param_counts();
    let s = small.model.param_counts();
    let (lm, lm_large) = (full.lm.num_params(), large.lm.num_params());
    ensure(within(p.total, 280.1e6, 0.02), format!("total {}", p.total))?;
    ensure(within(p.decoder, 5.4e6, 0.05), format!("decoder {}", p.decoder))?;
    ensure(within(s.total, 28.5e6, 0.02), format!("small {}", s.total))?;
    ensure(within(lm, 57e6, 0.02), format!("lm {}", lm))?;
    ensure(within(lm_large, 122e6, 0.02), format!("lm-large {}", lm_large))?;
    Ok(format!("total {:.2}M, decoder {:.2}M, small {:.2}M, LMs {:.2}M / {:.2}M", p.total as f64 / 1e6, p.decoder as f64 / 1e6, s.total as f64 / 1e6, lm as f64 / 1e6, lm_large as f64 / 1e6))
}

fn random_tensor(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn leaves<'a>(g: &Graph, store: &'a ParamStore, inputs: &[&'a str]) -> Vec<(&'a str, Tensor)> {
    let mut point: Vec<(&str, Tensor)> = store.iter().map(|(k, v)| (k, v.clone())).collect();
    for &n in inputs {
        point.push((n, g.value(g.leaf_var(n).unwrap()).clone()));
    }
    point
}

fn criterion_2() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    // LSTM step with fixed DropConnect mask and zoneout draws
    let mut store = ParamStore::new();
    LstmParams::init(3, 4, &mut r).insert_into(&mut store, "l");
    let masks = RegularizerMasks::draw(4, 0.3, &mut r).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let v = LstmVars::bind(&mut g, &store, "l", &masks).map_err(|e| e.to_string())?;
    let x = g.input("x", random_tensor(1, 3, &mut r)).unwrap();
    let h = g.input("h", random_tensor(1, 4, &mut r)).unwrap();
    let c = g.input("c", random_tensor(1, 4, &mut r)).unwrap();
    let st = lstm_step_graph(&mut g, &v, x, LstmState { h, c }, Zoneout { cell: 0.5, hidden: 0.5 }, Mode::Train, &mut r).map_err(|e| e.to_string())?;
    let both = g.concat_cols(&[st.h, st.c]).unwrap();
    let out = random_projection(&mut g, both, &mut r).unwrap();
    let point = leaves(&g, &store, &["x", "h", "c"]);
    worst.push(("lstm step", check_gradient(&mut g, out, &point, 1e-5).map_err(|e| e.to_string())?.max_rel_error));

    // encoder block over a batch of two sequences
    let cfg = EncoderBlockConfig { input_dim: 4, hidden: 3, reduce: 3, residual: true, dropout: 0.3, dropconnect: 0.3, dropout_after_reduction: false };
    let mut store = ParamStore::new();
    cfg.init_params(&mut store, "blk", &mut r);
    let mut g = Graph::new();
    let xa = g.input("xa", random_tensor(4, 4, &mut r)).unwrap();
    let xb = g.input("xb", random_tensor(3, 4, &mut r)).unwrap();
    let mut bn = BatchNormState::new(3);
    let ys = encoder_block(&mut g, &store, "blk", &cfg, &mut bn, &[xa, xb], Mode::Train, &mut r).map_err(|e| e.to_string())?;
    let y = g.concat_rows(&ys).unwrap();
    let out = random_projection(&mut g, y, &mut r).unwrap();
    let point = leaves(&g, &store, &["xa", "xb"]);
    worst.push(("encoder block", check_gradient(&mut g, out, &point, 1e-5).map_err(|e| e.to_string())?.max_rel_error));

    // location-aware attention with a padded frame
    let dims = AttentionDims { query: 3, enc: 4, hidden: 5, kernels: 2, width: 5 };
    let mut store = ParamStore::new();
    dims.init_params(&mut store, "att", &mut r);
    let mut g = Graph::new();
    let e = g.input("enc", random_tensor(6, 4, &mut r)).unwrap();
    let av = AttentionVars::bind(&mut g, &store, "att", e).unwrap();
    let q = g.input("q", random_tensor(1, 3, &mut r)).unwrap();
    let prev: Vec<f64> = (0..6).map(|_| r.random_range(0.1..1.0)).collect();
    let z: f64 = prev.iter().sum();
    let p = g.input("prev", Tensor::row(prev.iter().map(|v| v / z).collect())).unwrap();
    let (ctx, attn) = attend(&mut g, &av, q, p, &[true, true, true, true, true, false]).map_err(|e| e.to_string())?;
    let both = g.concat_cols(&[ctx, attn]).unwrap();
    let out = random_projection(&mut g, both, &mut r).unwrap();
    let point = leaves(&g, &store, &["enc", "q", "prev"]);
    worst.push(("attention", check_gradient(&mut g, out, &point, 1e-5).map_err(|e| e.to_string())?.max_rel_error));

    // label-smoothed sequence loss with every regularizer active
    let mcfg = ModelConfig { enc_hidden: 3, enc_reduce: 3, enc_out: 3, embed_dim: 2, lm_lstm: 3, fusion_lstm: 3, bottleneck: 2, att_hidden: 3, att_kernels: 2, ..ModelConfig::toy(4, 5) };
    let mut m = Model::build(mcfg, 7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (_, t) in m.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let batch: Vec<Example> = (0..2)
        .map(|i| Example { features: random_tensor(5 + 3 * i, 4, &mut rng), tokens: (0..2 + i).map(|_| rng.random_range(3..5)).collect() })
        .collect();
    let mut bn = m.bn.clone();
    let opts = LossOptions { label_smoothing: 0.35, teacher_forcing: 0.8, mode: Mode::Train };
    let (mut g, loss, _) = loss_graph(&m.config, &m.params, &mut bn, &batch, opts, &mut rng).map_err(|e| e.to_string())?;
    let point: Vec<(&str, Tensor)> = m.params.iter().map(|(k, v)| (k, v.clone())).collect();
    worst.push(("sequence loss", check_gradient(&mut g, loss, &point, 1e-5).map_err(|e| e.to_string())?.max_rel_error));

    let detail = worst.iter().map(|(n, e)| format!("{} {:.1e}", n, e)).collect::<Vec<_>>().join(", ");
    ensure(worst.iter().all(|(_, e)| *e < 1e-4), format!("max relative error above 1e-4: {}", detail))?;
    Ok(detail)
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - z).collect()
}

fn prefix_scores(seed: u64, prefix: &[usize], n: usize) -> Vec<f64> {
    let tags: Vec<u64> = prefix.iter().map(|&t| t as u64 + 1).collect();
    let mut rng = derive_rng(seed, &tags);
    (0..n).map(|_| 4.0 * rng.random::<f64>()).collect()
}

/// Toy decoder whose outputs are pseudo-random functions of the prefix.
struct Toy(u64);

impl StepModel for Toy {
    type State = Vec<usize>;
    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }
    fn step(&self, state: &Vec<usize>, token: usize) -> Result<StepOutput<Vec<usize>>, SearchError> {
        let mut s = state.clone();
        s.push(token);
        let attention = log_softmax(&prefix_scores(self.0 ^ 0xA77, &s, 3)).iter().map(|v| v.exp()).collect();
        Ok(StepOutput { log_probs: log_softmax(&prefix_scores(self.0, &s, 4)), attention, state: s })
    }
    fn frames(&self) -> usize {
        3
    }
    fn vocab(&self) -> usize {
        4
    }
}

impl LanguageModel for Toy {
    type State = Vec<usize>;
    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }
    fn step(&self, state: &Vec<usize>, token: usize) -> Result<(Vec<f64>, Vec<usize>), SearchError> {
        let mut s = state.clone();
        s.push(token);
        Ok((log_softmax(&prefix_scores(self.0, &s, 4)), s))
    }
}

fn exhaustive(m: &Toy, lm: &Toy, w: &FusionWeights) -> (Vec<usize>, f64) {
    let max_len = w.max_len(3);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![Vec::new()];
    while let Some(seq) = stack.pop() {
        if seq.len() + 1 < max_len {
            for t in 2..4 {
                let mut s = seq.clone();
                s.push(t);
                stack.push(s);
            }
        }
        let (mut ms, mut ls, mut prev) = (StepModel::initial(m), LanguageModel::initial(lm), BOS_ID);
        let (mut mlp, mut llp, mut mass) = (0.0, 0.0, vec![0.0; 3]);
        for &t in seq.iter().chain(std::iter::once(&EOS_ID)) {
            let out = StepModel::step(m, &ms, prev).unwrap();
            let (lp, next) = LanguageModel::step(lm, &ls, prev).unwrap();
            mlp += out.log_probs[t];
            llp += lp[t];
            mass.iter_mut().zip(&out.attention).for_each(|(x, a)| *x += a);
            ms = out.state;
            ls = next;
            prev = t;
        }
        let h: Hypothesis<(), ()> =
            Hypothesis { tokens: seq.clone(), model_logp: mlp, lm_logp: llp, len: seq.len() + 1, attention_mass: mass, decoder_state: (), lm_state: None, finished: true };
        let s = fusion_score(&h, w);
        if best.as_ref().is_none_or(|b| s > b.1 || (s == b.1 && seq < b.0)) {
            best = Some((seq, s));
        }
    }
    best.unwrap()
}

fn criterion_3() -> Outcome {
    let weights = |b: usize| FusionWeights { lm_weight: 0.4, length_reward: 0.3, coverage_weight: 0.2, coverage_threshold: 0.5, beam_width: b, max_output_factor: 1.5 };
    ensure(weights(1).max_len(3) == 4, "toy maximum length is not 4")?;
    for u in 0..50u64 {
        let (m, lm) = (Toy(1000 + u), Toy(5000 + u));
        let res = beam_search(&m, Some(&lm), &weights(256), None).map_err(|e| e.to_string())?;
        let (seq, score) = exhaustive(&m, &lm, &weights(256));
        ensure(res.best().tokens == seq && res.best_score() == score, format!("utterance {}: beam {:?} {} vs exhaustive {:?} {}", u, res.best().tokens, res.best_score(), seq, score))?;
        let mut last = f64::NEG_INFINITY;
        for b in [1, 2, 4, 8] {
            let s = beam_search(&m, Some(&lm), &weights(b), None).map_err(|e| e.to_string())?.best_score();
            ensure(s >= last, format!("utterance {}: best score drops at beam {}", u, b))?;
            last = s;
        }
    }
    Ok("50 utterances exact at B=256, monotone over B=1,2,4,8".into())
}

fn criterion_4(run: &str) -> Outcome {
    let start = Instant::now();
    let base = ["--preset", "toy", "--run-dir", run];
    for cmd in ["gen-data", "train-bpe", "train"] {
        cli(&[&base[..], &[cmd]].concat())?;
    }
    cli(&[&base[..], &["decode", "--no-lm"]].concat())?;
    let elapsed = start.elapsed();
    let ter = summary_ter(&Path::new(run).join("reports/decode-test.summary"))?;
    let detail = format!("test token error {:.2}% in {:.0} s", 100.0 * ter, elapsed.as_secs_f64());
    ensure(ter <= 0.05, format!("{} (limit 5%)", detail))?;
    ensure(elapsed < Duration::from_secs(600), format!("{} (limit 600 s)", detail))?;
    Ok(detail)
}

fn three_se(mean: f64, expected: f64, var: f64, n: usize, what: &str) -> Result<(), String> {
    let se = (var / n as f64).sqrt();
    ensure((mean - expected).abs() <= 3.0 * se, format!("{}: {:.5} vs {:.5} (3 SE = {:.5})", what, mean, expected, 3.0 * se))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;

    let rate = 0.3;
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, n], 1.0));
    let y = dropout(&mut g, x, rate, Mode::Train, &mut rng).map_err(|e| e.to_string())?;
    let vals = g.value(y).data().to_vec();
    let dropped = vals.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
    three_se(dropped, rate, rate * (1.0 - rate), n, "dropout rate")?;
    three_se(vals.iter().sum::<f64>() / n as f64, 1.0, rate / (1.0 - rate), n, "dropout mean")?;

    let masks = RegularizerMasks::draw(60, 0.2, &mut rng).map_err(|e| e.to_string())?;
    let m = masks.dropconnect.unwrap();
    let cut = m.data().iter().filter(|&&v| v == 0.0).count() as f64 / m.len() as f64;
    ensure(m.len() >= 10_000, "too few DropConnect draws")?;
    three_se(cut, 0.2, 0.2 * 0.8, m.len(), "DropConnect rate")?;

    let (h, steps) = (100, 200);
    let p = LstmParams::init(5, h, &mut rng);
    let z = Zoneout { cell: 0.15, hidden: 0.05 };
    let (mut kept_c, mut kept_h) = (0usize, 0usize);
    for _ in 0..steps {
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cp: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ht, ct) = lstm_step(&p, &RegularizerMasks::none(), &x, &hp, &cp, z, Mode::Train, &mut rng).map_err(|e| e.to_string())?;
        kept_c += ct.iter().zip(&cp).filter(|(a, b)| a == b).count();
        kept_h += ht.iter().zip(&hp).filter(|(a, b)| a == b).count();
    }
    let draws = h * steps;
    three_se(kept_c as f64 / draws as f64, z.cell, z.cell * (1.0 - z.cell), draws, "zoneout cell")?;
    three_se(kept_h as f64 / draws as f64, z.hidden, z.hidden * (1.0 - z.hidden), draws, "zoneout hidden")?;

    let var = 0.015;
    let mut store = ParamStore::new();
    store.insert("w", Tensor::full(&[100, 1000], 0.5));
    let noisy = apply_weight_noise(&store, var, &mut rng);
    let d: Vec<f64> = noisy.get("w").unwrap().data().iter().map(|v| v - 0.5).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sample_var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (d.len() - 1) as f64;
    three_se(mean, 0.0, var, d.len(), "weight noise mean")?;
    three_se(sample_var, var, 2.0 * var * var, d.len() - 1, "weight noise variance")?;

    let policy = AugmentPolicy::default();
    let mut masks_seen = 0;
    for _ in 0..10_000 {
        let t = rng.random_range(1..300);
        let seq = FeatureSequence::new(Tensor::zeros(&[t, 6]));
        let (_, m) = spec_augment_with_masks(&seq, &policy, &mut rng);
        let cap = (0.3 * t as f64).ceil() as usize;
        ensure(m.time.iter().all(|&(_, w)| w <= cap), format!("time mask wider than ceil(0.3 T) at T = {}", t))?;
        masks_seen += m.time.len();
    }
    Ok(format!("all rates within 3 SE; {} time masks within ceil(0.3 T)", masks_seen))
}

fn criterion_6(run: &str) -> Outcome {
    cli(&["--preset", "toy", "--run-dir", run, "train-lm"])?;
    let text = read(&Path::new(run).join("reports/lm.txt"))?;
    let get = |k: &str| text.lines().find_map(|l| l.strip_prefix(k)).and_then(|v| v.trim().parse::<f64>().ok()).ok_or(format!("missing {}", k));
    let (reset, cross) = (get("dev_ppl_reset")?, get("dev_ppl_cross")?);
    let margin = (reset - cross) / reset;
    let detail = format!("held-out perplexity reset {:.3}, cross-utterance {:.3} ({:.1}% lower)", reset, cross, 100.0 * margin);
    ensure(margin > 0.05, detail.clone())?;
    Ok(detail)
}

fn criterion_7(run: &str) -> Outcome {
    let out = cli(&["--preset", "toy", "--run-dir", run, "ablate", "--off", "specaugment", "--off", "speed_tempo"])?;
    let root = Path::new(run);
    let csv = read(&root.join("reports/ablation.csv"))?;
    let rows: Vec<&str> = csv.lines().collect();
    ensure(rows.len() == 4 && rows[0] == "ingredient,token_error,wer,errors", format!("unexpected table:\n{}", csv))?;
    ensure(out.contains(rows[1]), "printed table differs from the CSV")?;
    let load = |name: &str| RunConfig::from_file(&root.join("ablate").join(name).join("configs/train.conf")).map_err(|e| e.to_string());
    let base = load("baseline")?;
    for (name, key) in [("specaugment", "use_specaugment"), ("speed_tempo", "use_speed_tempo")] {
        let diff = base.diff(&load(name)?);
        ensure(diff == vec![key.to_string()], format!("{}: resolved configs differ in {:?}", name, diff))?;
    }
    let b = root.join("ablate/baseline/reports");
    let r = root.join("reports");
    ensure(read(&b.join("decode-test.summary"))? == read(&r.join("decode-test.summary"))?, "baseline decode summary differs from the toy run")?;
    ensure(read(&b.join("hyp-test.txt"))? == read(&r.join("hyp-test.txt"))?, "baseline hypotheses differ from the toy run")?;
    ensure(fs::read(root.join("ablate/baseline/checkpoints/model.ckpt")).ok() == fs::read(root.join("checkpoints/model.ckpt")).ok(), "baseline checkpoint differs")?;
    Ok(format!("{} rows; one-key config diffs; baseline token error {:.6} identical", rows.len() - 1, summary_ter(&b.join("decode-test.summary"))?))
}

fn oracle(r: &[u8], h: &[u8]) -> usize {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            d[i][j] = (d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1])).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[r.len()][h.len()]
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..1000 {
        let r: Vec<u8> = (0..rng.random_range(0..15)).map(|_| rng.random_range(0..5)).collect();
        let h: Vec<u8> = (0..rng.random_range(0..15)).map(|_| rng.random_range(0..5)).collect();
        ensure(edit_distance(&r, &h).total() == oracle(&r, &h), format!("pair {} disagrees", k))?;
    }
    let mut rep = ScoreReport::default();
    rep.push("u", "a b c", "a x c d");
    ensure(rep.wer() == 2.0 / 3.0, format!("hand case WER {}", rep.wer()))?;
    Ok("1000 pairs match, hand case WER exactly 2/3".into())
}

fn criterion_9(dir: &Path) -> Outcome {
    let a = dir.join("det-a");
    let b = dir.join("det-b");
    let (a_s, b_s) = (a.to_str().unwrap(), b.to_str().unwrap());
    let small = ["--preset", "toy", "--set", "synth_train=200", "--set", "synth_dev=20", "--set", "synth_test=40", "--set", "epochs=3", "--set", "lm_epochs=2", "--set", "sweep_beams=1,2"];
    fn with<'a>(small: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
        [small, extra].concat()
    }
    for cmd in ["gen-data", "train-bpe", "train-lm"] {
        cli(&with(&small, &["--run-dir", a_s, cmd]))?;
    }
    cli(&with(&small, &["--run-dir", a_s, "--workers", "1", "train"]))?;
    cli(&with(&small, &["--run-dir", a_s, "--workers", "1", "decode"]))?;
    cli(&with(&small, &["--run-dir", a_s, "--workers", "1", "sweep-beam"]))?;
    let conf = |c: &str| a.join("configs").join(format!("{}.conf", c)).to_str().unwrap().to_string();
    for c in ["train", "decode", "sweep-beam"] {
        cli(&["--config", &conf(c), "--run-dir", b_s, "--workers", "4", c])?;
    }
    let same = |rel: &str| -> Result<(), String> {
        let (x, y) = (fs::read(a.join(rel)).map_err(|e| format!("{}: {}", rel, e))?, fs::read(b.join(rel)).map_err(|e| format!("{}: {}", rel, e))?);
        ensure(x == y, format!("{} differs between 1 and 4 workers", rel))
    };
    for rel in ["checkpoints/model.ckpt", "logs/train.csv", "reports/hyp-test.txt", "reports/nbest-test.txt", "reports/decode-test.summary", "reports/sweep.csv"] {
        same(rel)?;
    }
    Ok("train, decode and sweep-beam outputs identical with 1 and 4 workers".into())
}

#[test]
fn acceptance() {
    let dir = work_dir();
    let run = dir.join("toy");
    let run = run.to_str().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("parameter counts", Box::new(criterion_1)),
        ("gradient integrity", Box::new(criterion_2)),
        ("search oracle", Box::new(criterion_3)),
        ("toy convergence", Box::new(move || criterion_4(run))),
        ("regularizer statistics", Box::new(criterion_5)),
        ("cross-utterance LM", Box::new(move || criterion_6(run))),
        ("ablation harness", Box::new(move || criterion_7(run))),
        ("scoring exactness", Box::new(criterion_8)),
        ("determinism", Box::new({
            let dir = dir.clone();
            move || criterion_9(&dir)
        })),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {} ({}): PASS [{:.0} s] {}", i + 1, name, secs, d),
            Err(e) => {
                println!("criterion {} ({}): FAIL [{:.0} s] {}", i + 1, name, secs, e);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {:?}", failed);
}
