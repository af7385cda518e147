//! Recurrent and normalization layers plus the residual encoder block.

mod lstm;

pub use lstm::{
    bidirectional_lstm, lstm_sequence, lstm_step, lstm_step_graph, LstmParams, LstmState, LstmVars, RegularizerMasks, Zoneout,
};
pub(crate) use lstm::lstm_cell;

use rand::Rng;

use crate::autodiff::{Graph, GraphError, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum LayerError {
    #[error("{name} rate {value} outside [0, 1]")]
    Rate { name: &'static str, value: f64 },
    #[error("shape: {0}")]
    Shape(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Training draws stochastic regularizers; evaluation uses their expectations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn check_rate(name: &'static str, value: f64) -> Result<(), LayerError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(LayerError::Rate { name, value })
    }
}

/// `n` independent indicators that are 1 with probability `p`.
pub fn bernoulli_keep<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect()
}

/// `w · x` for a row-major out×in matrix.
pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let k = w.cols();
    debug_assert_eq!(k, x.len());
    w.data().chunks_exact(k).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn init_uniform<R: Rng + ?Sized>(t: &mut Tensor, fan_in: usize, rng: &mut R) {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.random_range(-a..a);
    }
}

/// `x Wᵀ + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, GraphError> {
    let y = g.matmul_t(x, w)?;
    g.add_row(y, b)
}

/// Inverted dropout: kept units are scaled by 1/(1−rate) so evaluation is the identity.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var, LayerError> {
    check_rate("dropout", rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let s = if rate < 1.0 { 1.0 / (1.0 - rate) } else { 0.0 };
    let mask: Vec<f64> = bernoulli_keep(n, 1.0 - rate, rng).into_iter().map(|v| v * s).collect();
    let m = g.constant(Tensor::new(shape, mask));
    Ok(g.mul(x, m)?)
}

/// How adjacent frames are merged when halving the frame rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidMode {
    /// `(a‖b)`: output dimension doubles.
    Concat,
    /// `(a+b)/2`: dimension preserved, no extra weights downstream.
    Mean,
}

impl PyramidMode {
    pub fn output_dim(self, d: usize) -> usize {
        match self {
            PyramidMode::Concat => 2 * d,
            PyramidMode::Mean => d,
        }
    }
}

impl std::fmt::Display for PyramidMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PyramidMode::Concat => "concat",
            PyramidMode::Mean => "mean",
        })
    }
}

impl std::str::FromStr for PyramidMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "concat" => Ok(PyramidMode::Concat),
            "mean" => Ok(PyramidMode::Mean),
            _ => Err(format!("expected `concat` or `mean`, got `{}`", s)),
        }
    }
}

/// Frames after one halving: odd lengths repeat the last frame.
pub fn halved_len(t: usize) -> usize {
    t.div_ceil(2)
}

fn selection(t: usize, odd: bool, weight: f64) -> Tensor {
    let out = halved_len(t);
    let mut s = Tensor::zeros(&[out, t]);
    for i in 0..out {
        let j = if odd { (2 * i + 1).min(t - 1) } else { 2 * i };
        s.set(i, j, s.get(i, j) + weight);
    }
    s
}

/// Halves the frame rate of a T×D sequence.
pub fn pyramidal_reduce(g: &mut Graph, x: Var, mode: PyramidMode) -> Result<Var, GraphError> {
    let t = g.shape(x)[0];
    match mode {
        PyramidMode::Concat => {
            let se = g.constant(selection(t, false, 1.0));
            let so = g.constant(selection(t, true, 1.0));
            let a = g.matmul(se, x)?;
            let b = g.matmul(so, x)?;
            g.concat_cols(&[a, b])
        }
        PyramidMode::Mean => {
            let mut s = selection(t, false, 0.5);
            let so = selection(t, true, 0.5);
            s.axpy(1.0, &so);
            let s = g.constant(s);
            g.matmul(s, x)
        }
    }
}

/// Per-channel running statistics. `momentum` is the weight of the new batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub frozen: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState { running_mean: vec![0.0; channels], running_var: vec![1.0; channels], momentum: 0.1, eps: 1e-5, frozen: false }
    }
}

/// Batch normalization over the rows of `x` (frames pooled across the batch).
///
/// Training with unfrozen statistics normalizes with the batch moments and
/// updates the running estimates. Otherwise the fixed affine map from the
/// running statistics is applied.
pub fn batch_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState, mode: Mode) -> Result<Var, GraphError> {
    let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
    if state.running_mean.len() != c {
        return Err(GraphError::Shape { node: x.index(), op: "batch_norm", detail: format!("{} channels, state has {}", c, state.running_mean.len()) });
    }
    let normed = if mode == Mode::Train && !state.frozen {
        let s = g.sum_rows(x)?;
        let mean = g.scale(s, 1.0 / n as f64)?;
        let neg = g.scale(mean, -1.0)?;
        let centered = g.add_row(x, neg)?;
        let sq = g.mul(centered, centered)?;
        let ss = g.sum_rows(sq)?;
        let var = g.scale(ss, 1.0 / n as f64)?;
        let ve = g.add_scalar(var, state.eps)?;
        let inv = g.powf(ve, -0.5)?;
        let m = state.momentum;
        let (bm, bv) = (g.value(mean).data().to_vec(), g.value(var).data().to_vec());
        for j in 0..c {
            state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * bm[j];
            state.running_var[j] = (1.0 - m) * state.running_var[j] + m * bv[j];
        }
        g.mul_row(centered, inv)?
    } else {
        let shift = g.constant(Tensor::row(state.running_mean.iter().map(|v| -v).collect()));
        let scale = g.constant(Tensor::row(state.running_var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect()));
        let centered = g.add_row(x, shift)?;
        g.mul_row(centered, scale)?
    };
    let y = g.mul_row(normed, gamma)?;
    g.add_row(y, beta)
}

/// Shape and regularization of one encoder block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderBlockConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub reduce: usize,
    pub residual: bool,
    pub dropout: f64,
    pub dropconnect: f64,
    /// Apply the output dropout after the linear reduction instead of before it.
    pub dropout_after_reduction: bool,
}

impl EncoderBlockConfig {
    pub fn num_params(&self) -> usize {
        let lstm = 2 * LstmParams::num_params(self.input_dim, self.hidden);
        let reduce = self.reduce * 2 * self.hidden;
        let bypass = if self.residual { self.reduce * self.input_dim } else { 0 };
        lstm + reduce + bypass + 2 * self.reduce
    }

    /// Adds `<prefix>.{fwd,bwd,reduce,bypass,bn}` parameters. The reduction and
    /// bypass have no bias since batch norm's beta absorbs it.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        LstmParams::init(self.input_dim, self.hidden, rng).insert_into(store, &format!("{}.fwd", prefix));
        LstmParams::init(self.input_dim, self.hidden, rng).insert_into(store, &format!("{}.bwd", prefix));
        let mut w = Tensor::zeros(&[self.reduce, 2 * self.hidden]);
        init_uniform(&mut w, 2 * self.hidden, rng);
        store.insert(format!("{}.reduce.W", prefix), w);
        if self.residual {
            let mut w = Tensor::zeros(&[self.reduce, self.input_dim]);
            init_uniform(&mut w, self.input_dim, rng);
            store.insert(format!("{}.bypass.W", prefix), w);
        }
        store.insert(format!("{}.bn.gamma", prefix), Tensor::full(&[1, self.reduce], 1.0));
        store.insert(format!("{}.bn.beta", prefix), Tensor::zeros(&[1, self.reduce]));
    }
}

/// Encoder block over a batch of sequences: BiLSTM → dropout → linear
/// reduction, plus a linear bypass of the block input, then batch norm with
/// statistics pooled over every frame of the batch. The DropConnect mask is
/// drawn once for the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn encoder_block<R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderBlockConfig,
    bn: &mut BatchNormState,
    xs: &[Var],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Var>, LayerError> {
    let dc = if mode == Mode::Train { cfg.dropconnect } else { 0.0 };
    let mf = RegularizerMasks::draw(cfg.hidden, dc, rng)?;
    let mb = RegularizerMasks::draw(cfg.hidden, dc, rng)?;
    let fwd = LstmVars::bind(g, store, &format!("{}.fwd", prefix), &mf)?;
    let bwd = LstmVars::bind(g, store, &format!("{}.bwd", prefix), &mb)?;
    let rw = g.param_from(store, &format!("{}.reduce.W", prefix))?;
    let bypass = if cfg.residual { Some(g.param_from(store, &format!("{}.bypass.W", prefix))?) } else { None };
    let mut zs = Vec::with_capacity(xs.len());
    for &x in xs {
        let y = bidirectional_lstm(g, &fwd, &bwd, x, mode, rng)?;
        let y = if cfg.dropout_after_reduction { y } else { dropout(g, y, cfg.dropout, mode, rng)? };
        let mut z = g.matmul_t(y, rw)?;
        if cfg.dropout_after_reduction {
            z = dropout(g, z, cfg.dropout, mode, rng)?;
        }
        if let Some(bw) = bypass {
            let r = g.matmul_t(x, bw)?;
            z = g.add(z, r)?;
        }
        zs.push(z);
    }
    let gamma = g.param_from(store, &format!("{}.bn.gamma", prefix))?;
    let beta = g.param_from(store, &format!("{}.bn.beta", prefix))?;
    let all = g.concat_rows(&zs)?;
    let normed = batch_norm(g, all, gamma, beta, bn, mode)?;
    let mut out = Vec::with_capacity(zs.len());
    let mut start = 0;
    for z in zs {
        let t = g.shape(z)[0];
        out.push(if xs.len() == 1 { normed } else { g.slice_rows(normed, start, t)? });
        start += t;
    }
    Ok(out)
}
