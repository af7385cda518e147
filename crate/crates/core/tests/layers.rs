use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seq2seq_asr::autodiff::{check_gradient, random_projection, Graph, ParamStore, Tensor};
use seq2seq_asr::layers::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    init_uniform(&mut t, 1, r);
    t
}

#[test]
fn zero_weights_halve_the_cell() {
    let p = LstmParams::zeros(3, 2);
    let c = [0.8, -2.0];
    let (h, c_t) = lstm_step(&p, &RegularizerMasks::none(), &[1.0, 2.0, 3.0], &[0.3, 0.1], &c, Zoneout::default(), Mode::Eval, &mut rng(0)).unwrap();
    for j in 0..2 {
        assert!((c_t[j] - 0.5 * c[j]).abs() < 1e-15);
        assert!((h[j] - 0.5 * (0.5 * c[j]).tanh()).abs() < 1e-15);
    }
}

#[test]
fn full_zoneout_keeps_previous_state() {
    let mut r = rng(1);
    let p = LstmParams::init(3, 4, &mut r);
    let (hp, cp) = (vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.0, 1.0, 2.0]);
    let z = Zoneout { cell: 1.0, hidden: 1.0 };
    let (h, c) = lstm_step(&p, &RegularizerMasks::none(), &[1.0, -1.0, 0.5], &hp, &cp, z, Mode::Train, &mut r).unwrap();
    assert_eq!((h, c), (hp, cp));
}

#[test]
fn rates_outside_unit_interval_are_rejected() {
    let p = LstmParams::zeros(1, 1);
    let z = Zoneout { cell: 1.2, hidden: 0.0 };
    assert!(matches!(
        lstm_step(&p, &RegularizerMasks::none(), &[0.0], &[0.0], &[0.0], z, Mode::Train, &mut rng(0)),
        Err(LayerError::Rate { .. })
    ));
    assert!(RegularizerMasks::draw(2, -0.1, &mut rng(0)).is_err());
}

#[test]
fn dropconnect_masks() {
    let mut r = rng(2);
    let p = LstmParams::init(3, 4, &mut r);
    let x = [0.5, -0.2, 0.9];
    let (hp, cp) = (vec![0.3, -0.3, 0.1, 0.7], vec![0.2, 0.4, -0.6, 0.0]);
    // all-zero mask equals a cell with R = 0
    let zero = RegularizerMasks { dropconnect: Some(Tensor::zeros(&[16, 4])), dropconnect_rate: 0.3 };
    let a = lstm_step(&p, &zero, &x, &hp, &cp, Zoneout::default(), Mode::Train, &mut r).unwrap();
    let no_r = LstmParams { r: Tensor::zeros(&[16, 4]), ..p.clone() };
    let b = lstm_step(&no_r, &RegularizerMasks::none(), &x, &hp, &cp, Zoneout::default(), Mode::Train, &mut r).unwrap();
    assert_eq!(a, b);
    // keep probability 1 is bit-identical to the plain cell
    let keep_all = RegularizerMasks::draw(4, 0.0, &mut r).unwrap();
    let ones = RegularizerMasks { dropconnect: Some(Tensor::full(&[16, 4], 1.0)), dropconnect_rate: 0.0 };
    let plain = lstm_step(&p, &RegularizerMasks::none(), &x, &hp, &cp, Zoneout::default(), Mode::Train, &mut r).unwrap();
    assert_eq!(lstm_step(&p, &keep_all, &x, &hp, &cp, Zoneout::default(), Mode::Train, &mut r).unwrap(), plain);
    assert_eq!(lstm_step(&p, &ones, &x, &hp, &cp, Zoneout::default(), Mode::Train, &mut r).unwrap(), plain);
}

#[test]
fn dropconnect_mask_is_fixed_across_steps() {
    let mut r = rng(3);
    let masks = RegularizerMasks::draw(5, 0.3, &mut r).unwrap();
    let m = masks.dropconnect.as_ref().unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let mut store = ParamStore::new();
    LstmParams::init(2, 5, &mut r).insert_into(&mut store, "l");
    let mut g = Graph::new();
    let v = LstmVars::bind(&mut g, &store, "l", &masks).unwrap();
    let x = g.input("x", random_tensor(6, 2, &mut r)).unwrap();
    lstm_sequence(&mut g, &v, x, false, Zoneout::default(), Mode::Train, &mut r).unwrap();
    let expected = masks.effective_r(store.get("l.R").unwrap());
    assert_eq!(g.value(v.r), &expected);
}

#[test]
fn graph_step_matches_plain_step() {
    let mut r = rng(4);
    let p = LstmParams::init(3, 4, &mut r);
    let mut store = ParamStore::new();
    p.clone().insert_into(&mut store, "l");
    let masks = RegularizerMasks::draw(4, 0.3, &mut r).unwrap();
    let z = Zoneout { cell: 0.15, hidden: 0.05 };
    let x = [0.2, -0.4, 0.6];
    let (hp, cp) = ([0.1, 0.0, -0.2, 0.3], [0.5, -0.5, 0.25, 0.0]);

    let mut g = Graph::new();
    let v = LstmVars::bind(&mut g, &store, "l", &masks).unwrap();
    let xv = g.input("x", Tensor::row(x.to_vec())).unwrap();
    let h0 = g.input("h", Tensor::row(hp.to_vec())).unwrap();
    let c0 = g.input("c", Tensor::row(cp.to_vec())).unwrap();
    let st = lstm_step_graph(&mut g, &v, xv, LstmState { h: h0, c: c0 }, z, Mode::Eval, &mut r).unwrap();
    let (h, c) = lstm_step(&p, &masks, &x, &hp, &cp, z, Mode::Eval, &mut r).unwrap();
    assert!(g.value(st.h).data().iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-14));
    assert!(g.value(st.c).data().iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-14));

    // identical seeds give identical training draws on both paths
    let mut g2 = Graph::new();
    let v = LstmVars::bind(&mut g2, &store, "l", &masks).unwrap();
    let xv = g2.input("x", Tensor::row(x.to_vec())).unwrap();
    let h0 = g2.input("h", Tensor::row(hp.to_vec())).unwrap();
    let c0 = g2.input("c", Tensor::row(cp.to_vec())).unwrap();
    let st = lstm_step_graph(&mut g2, &v, xv, LstmState { h: h0, c: c0 }, z, Mode::Train, &mut rng(9)).unwrap();
    let (h, c) = lstm_step(&p, &masks, &x, &hp, &cp, z, Mode::Train, &mut rng(9)).unwrap();
    assert!(g2.value(st.h).data().iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-14));
    assert!(g2.value(st.c).data().iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-14));
}

fn bilstm(store: &ParamStore, seq: Tensor) -> Tensor {
    let mut g = Graph::new();
    let f = LstmVars::bind(&mut g, store, "f", &RegularizerMasks::none()).unwrap();
    let b = LstmVars::bind(&mut g, store, "b", &RegularizerMasks::none()).unwrap();
    let x = g.input("x", seq).unwrap();
    let y = bidirectional_lstm(&mut g, &f, &b, x, Mode::Eval, &mut rng(0)).unwrap();
    g.value(y).clone()
}

#[test]
fn bidirectional_shapes_and_symmetry() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let p = LstmParams::init(2, 3, &mut r);
    p.clone().insert_into(&mut store, "f");
    p.insert_into(&mut store, "b");
    // tied parameters, palindromic input: halves are time mirrors
    let pal = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0], vec![2.0, 0.3], vec![0.5, -1.0], vec![1.0, 0.0]]);
    let y = bilstm(&store, pal);
    assert_eq!(y.shape(), &[5, 6]);
    for t in 0..5 {
        let fwd = &y.row_slice(t)[..3];
        let bwd = &y.row_slice(4 - t)[3..];
        assert!(fwd.iter().zip(bwd).all(|(a, b)| (a - b).abs() < 1e-14));
    }
    // single frame: both directions see the same input from zero state
    let one = bilstm(&store, Tensor::row(vec![0.4, -0.7]));
    assert_eq!(&one.data()[..3], &one.data()[3..]);
}

#[test]
fn reversing_input_swaps_halves() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    LstmParams::init(2, 3, &mut r).insert_into(&mut store, "f");
    LstmParams::init(2, 3, &mut r).insert_into(&mut store, "b");
    let seq = random_tensor(4, 2, &mut r);
    let rev = Tensor::from_rows(&(0..4).rev().map(|t| seq.row_slice(t).to_vec()).collect::<Vec<_>>());
    let mut swapped = ParamStore::new();
    for (k, v) in store.iter() {
        let k = if let Some(s) = k.strip_prefix("f.") { format!("b.{}", s) } else { format!("f.{}", &k[2..]) };
        swapped.insert(k, v.clone());
    }
    let y = bilstm(&store, seq);
    let y_rev = bilstm(&swapped, rev);
    for t in 0..4 {
        let a = y.row_slice(t);
        let b = y_rev.row_slice(3 - t);
        assert!(a[..3].iter().zip(&b[3..]).chain(a[3..].iter().zip(&b[..3])).all(|(x, y)| (x - y).abs() < 1e-14));
    }
}

#[test]
fn batch_norm_modes() {
    let mut r = rng(7);
    let x = Tensor::new(vec![6, 2], (0..12).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect());
    let mut g = Graph::new();
    let xv = g.input("x", x.clone()).unwrap();
    let gamma = g.param("g", &Tensor::full(&[1, 2], 1.0)).unwrap();
    let beta = g.param("b", &Tensor::zeros(&[1, 2])).unwrap();

    let mut frozen = BatchNormState::new(2);
    frozen.frozen = true;
    let y = batch_norm(&mut g, xv, gamma, beta, &mut frozen, Mode::Train).unwrap();
    assert!(g.value(y).max_abs_diff(&x) < 1e-5 * 4.0);

    let mut st = BatchNormState::new(2);
    let y = batch_norm(&mut g, xv, gamma, beta, &mut st, Mode::Train).unwrap();
    let yv = g.value(y);
    for j in 0..2 {
        let col: Vec<f64> = (0..6).map(|t| yv.get(t, j)).collect();
        let m = col.iter().sum::<f64>() / 6.0;
        let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4);
    }
    assert_ne!(st.running_mean, vec![0.0, 0.0]);

    st.frozen = true;
    let snapshot = st.clone();
    for _ in 0..100 {
        let mut g = Graph::new();
        let xv = g.input("x", random_tensor(6, 2, &mut r)).unwrap();
        let gamma = g.param("g", &Tensor::full(&[1, 2], 1.0)).unwrap();
        let beta = g.param("b", &Tensor::zeros(&[1, 2])).unwrap();
        batch_norm(&mut g, xv, gamma, beta, &mut st, Mode::Train).unwrap();
    }
    assert_eq!(st, snapshot);
}

fn toy_block(residual: bool) -> EncoderBlockConfig {
    EncoderBlockConfig { input_dim: 8, hidden: 6, reduce: 5, residual, dropout: 0.3, dropconnect: 0.3, dropout_after_reduction: false }
}

#[test]
fn encoder_block_shape_and_param_count() {
    let mut r = rng(8);
    let cfg = toy_block(true);
    let mut store = ParamStore::new();
    cfg.init_params(&mut store, "blk", &mut r);
    assert_eq!(store.num_values(), cfg.num_params());
    let mut g = Graph::new();
    let x = g.input("x", random_tensor(7, 8, &mut r)).unwrap();
    let mut bn = BatchNormState::new(5);
    let y = encoder_block(&mut g, &store, "blk", &cfg, &mut bn, &[x], Mode::Train, &mut r).unwrap();
    assert_eq!(g.shape(y[0]), &[7, 5]);
}

#[test]
fn zero_lstm_path_leaves_normalized_bypass() {
    let mut r = rng(9);
    let cfg = toy_block(true);
    let mut store = ParamStore::new();
    cfg.init_params(&mut store, "blk", &mut r);
    store.get_mut("blk.reduce.W").unwrap().data_mut().fill(0.0);
    let input = random_tensor(5, 8, &mut r);
    let mut g = Graph::new();
    let x = g.input("x", input.clone()).unwrap();
    let mut bn = BatchNormState::new(5);
    let y = encoder_block(&mut g, &store, "blk", &cfg, &mut bn, &[x], Mode::Eval, &mut r).unwrap()[0];
    // eval BN with fresh stats is y = z / sqrt(1 + eps)
    let bw = g.param_from(&store, "blk.bypass.W").unwrap();
    let z = g.matmul_t(x, bw).unwrap();
    let expected = g.value(z).map(|v| v / (1.0f64 + 1e-5).sqrt());
    assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn encoder_block_gradient_with_regularizers() {
    let mut r = rng(10);
    let cfg = EncoderBlockConfig { input_dim: 4, hidden: 3, reduce: 3, ..toy_block(true) };
    let mut store = ParamStore::new();
    cfg.init_params(&mut store, "blk", &mut r);
    let mut g = Graph::new();
    let xa = g.input("xa", random_tensor(4, 4, &mut r)).unwrap();
    let xb = g.input("xb", random_tensor(3, 4, &mut r)).unwrap();
    let mut bn = BatchNormState::new(3);
    let ys = encoder_block(&mut g, &store, "blk", &cfg, &mut bn, &[xa, xb], Mode::Train, &mut r).unwrap();
    let y = g.concat_rows(&ys).unwrap();
    let out = random_projection(&mut g, y, &mut r).unwrap();
    let mut point: Vec<(&str, Tensor)> = store.iter().map(|(k, v)| (k, v.clone())).collect();
    point.push(("xa", g.value(xa).clone()));
    point.push(("xb", g.value(xb).clone()));
    let rep = check_gradient(&mut g, out, &point, 1e-5).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
}

#[test]
fn lstm_step_gradient_with_fixed_masks() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    LstmParams::init(3, 4, &mut r).insert_into(&mut store, "l");
    let masks = RegularizerMasks::draw(4, 0.3, &mut r).unwrap();
    let mut g = Graph::new();
    let v = LstmVars::bind(&mut g, &store, "l", &masks).unwrap();
    let x = g.input("x", random_tensor(1, 3, &mut r)).unwrap();
    let h = g.input("h", random_tensor(1, 4, &mut r)).unwrap();
    let c = g.input("c", random_tensor(1, 4, &mut r)).unwrap();
    let st = lstm_step_graph(&mut g, &v, x, LstmState { h, c }, Zoneout { cell: 0.5, hidden: 0.5 }, Mode::Train, &mut r).unwrap();
    let both = g.concat_cols(&[st.h, st.c]).unwrap();
    let out = random_projection(&mut g, both, &mut r).unwrap();
    let mut point: Vec<(&str, Tensor)> = store.iter().map(|(k, v)| (k, v.clone())).collect();
    for n in ["x", "h", "c"] {
        let var = g.leaf_var(n).unwrap();
        point.push((n, g.value(var).clone()));
    }
    let rep = check_gradient(&mut g, out, &point, 1e-5).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
}
