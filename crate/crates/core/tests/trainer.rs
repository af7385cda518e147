use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seq2seq_asr::autodiff::{ParamStore, Tensor};
use seq2seq_asr::features::{AugmentPolicy, FeatureSequence};
use seq2seq_asr::trainer::*;

fn store(pairs: &[(&str, Vec<f64>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (k, v) in pairs {
        s.insert(*k, Tensor::row(v.clone()));
    }
    s
}

fn value(s: &ParamStore, k: &str) -> Vec<f64> {
    s.get(k).unwrap().data().to_vec()
}

#[test]
fn label_smoothing_examples() {
    let lp: Vec<f64> = [0.7f64, 0.2, 0.1].iter().map(|p| p.ln()).collect();
    assert_eq!(label_smoothed_loss(&lp, 0, 0.0), -(0.7f64.ln()));
    let expected = -0.65 * 0.7f64.ln() - (0.35 / 3.0) * (0.7f64.ln() + 0.2f64.ln() + 0.1f64.ln());
    assert!((label_smoothed_loss(&lp, 0, 0.35) - expected).abs() < 1e-12);
    assert!((expected - 0.72985).abs() < 1e-5);
    let uniform = vec![(1.0f64 / 7.0).ln(); 7];
    for eps in [0.0, 0.1, 0.35, 0.9] {
        assert!((label_smoothed_loss(&uniform, 3, eps) - 7f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn label_smoothing_minimum_by_grid_search() {
    let eps = 0.35;
    let (mut best, mut arg) = (f64::INFINITY, (0.0, 0.0));
    let n = 400;
    for i in 1..n {
        for j in 1..(n - i) {
            let p = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
            let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
            let l = label_smoothed_loss(&lp, 0, eps);
            if l < best {
                best = l;
                arg = (p[0], p[1]);
            }
        }
    }
    let target = 1.0 - eps + eps / 3.0;
    assert!((arg.0 - target).abs() <= 1.0 / n as f64, "{:?}", arg);
    assert!((arg.1 - eps / 3.0).abs() <= 1.0 / n as f64);
}

#[test]
fn vanilla_sgd_and_pure_decay() {
    let mut p = store(&[("w", vec![1.0, -2.0])]);
    let g = store(&[("w", vec![0.5, 1.0])]);
    let mut opt = OptimizerState::new(&p, 0.0, 0.0);
    nesterov_step(&mut p, &g, &mut opt, 0.1).unwrap();
    assert_eq!(value(&p, "w"), vec![1.0 - 0.05, -2.0 - 0.1]);

    let mut p = store(&[("w", vec![1.0, -2.0]), ("l.b", vec![3.0])]);
    let zero = store(&[("w", vec![0.0, 0.0]), ("l.b", vec![0.0])]);
    let mut opt = OptimizerState::new(&p, 0.0, 0.01);
    nesterov_step(&mut p, &zero, &mut opt, 0.1).unwrap();
    assert_eq!(value(&p, "w"), vec![1.0 * (1.0 - 0.1 * 0.01), -2.0 * (1.0 - 0.1 * 0.01)]);
    assert_eq!(value(&p, "l.b"), vec![3.0], "biases are not decayed");
}

#[test]
fn nesterov_two_steps_match_hand_iteration_and_buffer_form() {
    let mut p = store(&[("w", vec![0.0])]);
    let g = store(&[("w", vec![1.0])]);
    let mut opt = OptimizerState::new(&p, 0.9, 0.0);
    nesterov_step(&mut p, &g, &mut opt, 0.1).unwrap();
    nesterov_step(&mut p, &g, &mut opt, 0.1).unwrap();
    // step 1: v = -0.1, θ = -0.09 - 0.1 = -0.19; step 2: v = -0.19, θ = -0.19 - 0.171 - 0.1
    assert!((value(&p, "w")[0] - -0.461).abs() < 1e-12);

    // buffer form: b ← µb + g; θ ← θ − lr(g + µb)
    let (mut b, mut theta) = (0.0f64, 0.0f64);
    for _ in 0..2 {
        b = 0.9 * b + 1.0;
        theta -= 0.1 * (1.0 + 0.9 * b);
    }
    assert!((value(&p, "w")[0] - theta).abs() < 1e-12);
}

#[test]
fn nesterov_on_quadratic_matches_trajectory() {
    // f(θ) = ½·a·θ², gradient a·θ
    let a = 2.0;
    let mut p = store(&[("w", vec![1.5])]);
    let mut opt = OptimizerState::new(&p, 0.9, 0.0);
    let (mut th, mut v) = (1.5f64, 0.0f64);
    for _ in 0..20 {
        let g = store(&[("w", vec![a * value(&p, "w")[0]])]);
        nesterov_step(&mut p, &g, &mut opt, 0.05).unwrap();
        let gh = a * th;
        v = 0.9 * v - 0.05 * gh;
        th += 0.9 * v - 0.05 * gh;
        assert_eq!(value(&p, "w")[0], th);
    }
}

#[test]
fn non_finite_gradient_names_parameter() {
    let mut p = store(&[("enc.0.W", vec![1.0])]);
    let g = store(&[("enc.0.W", vec![f64::NAN])]);
    let mut opt = OptimizerState::new(&p, 0.9, 0.0);
    match nesterov_step(&mut p, &g, &mut opt, 0.1) {
        Err(TrainError::NonFinite { what }) => assert!(what.contains("enc.0.W")),
        other => panic!("expected NonFinite, got {:?}", other),
    }
    assert_eq!(value(&p, "enc.0.W"), vec![1.0]);
}

#[test]
fn decay_contracts_norm() {
    let init = store(&[("w", vec![1.0, -0.5, 2.0])]);
    let zero = store(&[("w", vec![0.0; 3])]);
    let norm = |s: &ParamStore| value(s, "w").iter().map(|x| x * x).sum::<f64>().sqrt();
    let run = |lambda: f64| {
        let mut p = init.clone();
        let mut opt = OptimizerState::new(&p, 0.9, lambda);
        for _ in 0..100 {
            nesterov_step(&mut p, &zero, &mut opt, 0.03).unwrap();
        }
        norm(&p)
    };
    assert!(run(4e-6) < run(0.0));
    assert_eq!(run(0.0), norm(&init));
}

#[test]
fn weight_noise_moments() {
    let n = 1_000_000;
    let clean = store(&[("w", vec![0.0; n])]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noisy = apply_weight_noise(&clean, 0.015, &mut rng);
    assert_eq!(value(&clean, "w"), vec![0.0; n], "clean copy untouched");
    let x = value(&noisy, "w");
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se_mean = (0.015f64 / n as f64).sqrt();
    // variance of the sample variance of a Gaussian: 2σ⁴/(n−1)
    let se_var = (2.0 * 0.015f64.powi(2) / (n - 1) as f64).sqrt();
    assert!(mean.abs() < 3.0 * se_mean, "mean {}", mean);
    assert!((var - 0.015).abs() < 3.0 * se_var, "var {}", var);
    assert_eq!(apply_weight_noise(&clean, 0.0, &mut rng), clean);
}

#[test]
fn schedule_examples_at_reference_budget() {
    let cfg = TrainConfig::default();
    let s1 = schedule_at(1, 250, &cfg);
    assert_eq!(s1.batch_size, 8);
    assert_eq!(s1.curriculum, Curriculum::Sorted);
    assert!((s1.lr - 0.01).abs() < 1e-15);
    assert_eq!(schedule_at(3, 250, &cfg).lr, 0.03);
    assert!(!schedule_at(70, 250, &cfg).weight_noise_on);
    assert!(schedule_at(75, 250, &cfg).weight_noise_on);
    assert!(!schedule_at(110, 250, &cfg).bn_frozen);
    assert!(schedule_at(111, 250, &cfg).bn_frozen);
    let s200 = schedule_at(200, 250, &cfg);
    assert!((s200.lr - 0.03 * 0.9f64.powi(20)).abs() < 1e-15);
    assert_eq!(s200.label_smoothing, 0.0);
    assert_eq!(s200.batch_size, 32);
    assert_eq!(s200.teacher_forcing, 0.8);
    assert_eq!(schedule_at(36, 250, &cfg).curriculum, Curriculum::Bucketed);
    assert_eq!(breakpoints(25), [1, 4, 7, 11, 18]);
}

#[test]
fn toggles_switch_schedule_features_off() {
    let mut cfg = TrainConfig::default();
    for name in ["weight_noise", "bn_freeze", "label_smoothing", "scheduled_sampling", "random_batches"] {
        cfg.disable(name).unwrap();
    }
    let s = schedule_at(120, 250, &cfg);
    assert!(!s.weight_noise_on && !s.bn_frozen);
    assert_eq!((s.label_smoothing, s.teacher_forcing, s.curriculum), (0.0, 1.0, Curriculum::Sorted));
    assert!(cfg.disable("no_such_thing").is_err());
}

#[test]
fn schedule_trace_matches_golden_file() {
    let cfg = TrainConfig::default();
    let trace: String = (1..=250).map(|e| format!("{}\n", schedule_at(e, 250, &cfg))).collect();
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/schedule_250.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &trace).unwrap();
    }
    assert_eq!(trace, std::fs::read_to_string(&path).unwrap());
}

fn sched(batch: usize, curriculum: Curriculum, epoch: usize) -> ScheduleState {
    ScheduleState { epoch, lr: 0.03, batch_size: batch, curriculum, weight_noise_on: false, bn_frozen: false, label_smoothing: 0.0, teacher_forcing: 1.0 }
}

proptest! {
    #[test]
    fn batches_partition_and_order(lengths in prop::collection::vec(1usize..100, 1..60), batch in 1usize..9, seed in 0u64..100) {
        for mode in [Curriculum::Sorted, Curriculum::Bucketed] {
            let b = make_batches(&lengths, &sched(batch, mode, 3), seed);
            let mut all: Vec<usize> = b.concat();
            all.sort();
            prop_assert_eq!(all, (0..lengths.len()).collect::<Vec<_>>());
            prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= batch));
            prop_assert_eq!(&b, &make_batches(&lengths, &sched(batch, mode, 3), seed));
            for x in &b {
                prop_assert!(x.windows(2).all(|w| lengths[w[0]] <= lengths[w[1]]));
            }
            if mode == Curriculum::Sorted {
                let flat: Vec<usize> = b.concat().iter().map(|&i| lengths[i]).collect();
                prop_assert!(flat.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}

fn toy_sequence(t: usize, d: usize, speaker: &str, offset: f64) -> FeatureSequence {
    let data: Vec<f64> = (0..t * d).map(|i| ((i * 37 % 11) as f64) * 0.3 + offset).collect();
    let mut s = FeatureSequence::new(Tensor::matrix(t, d, data));
    s.speaker_id = speaker.into();
    s
}

#[test]
fn disabled_augmentation_equals_plain_preparation() {
    let seqs = vec![toy_sequence(30, 4, "a", 0.0), toy_sequence(25, 4, "a", 1.0), toy_sequence(40, 4, "b", -2.0)];
    let stats: BTreeMap<_, _> = seq2seq_asr::features::speaker_stats(&seqs).unwrap();
    let mut cfg = TrainConfig::default();
    for name in ["specaugment", "speed_tempo", "seqnoise"] {
        cfg.disable(name).unwrap();
    }
    let policy = cfg.effective_augment(&AugmentPolicy::default());
    for s in &seqs {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = augment_features(s, &seqs, &stats, &policy, true, &mut rng).unwrap();
        let b = prepare_features(s, &stats, true).unwrap();
        assert_eq!(a.frames, b.frames);
    }
}

#[test]
fn effective_config_zeroes_disabled_regularizers() {
    let mut cfg = TrainConfig::default();
    cfg.disable("dropout").unwrap();
    cfg.disable("zoneout").unwrap();
    let m = cfg.effective_model(&seq2seq_asr::model::ModelConfig::full());
    assert_eq!((m.enc_dropout, m.embed_dropout, m.output_dropout), (0.0, 0.0, 0.0));
    assert_eq!((m.zoneout_cell, m.zoneout_hidden), (0.0, 0.0));
    assert_eq!(m.enc_dropconnect, 0.3);
}
