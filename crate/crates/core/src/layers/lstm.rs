use rand::Rng;

use super::{bernoulli_keep, check_rate, matvec, LayerError, Mode};
use crate::autodiff::{sigmoid, Graph, GraphError, ParamStore, Tensor, Var};

/// LSTM weights with gate order (i, f, g, o). `w` is 4H×D, `r` is 4H×H and
/// `b` is 1×4H.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w: Tensor,
    pub r: Tensor,
    pub b: Tensor,
}

impl LstmParams {
    pub fn new(w: Tensor, r: Tensor, b: Tensor) -> Result<Self, LayerError> {
        let h = r.cols();
        if r.rows() != 4 * h || w.rows() != 4 * h || b.len() != 4 * h {
            return Err(LayerError::Shape(format!(
                "lstm shapes W {:?}, R {:?}, b {:?} are inconsistent",
                w.shape(),
                r.shape(),
                b.shape()
            )));
        }
        Ok(LstmParams { w, r, b })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w: Tensor::zeros(&[4 * hidden, input]),
            r: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[1, 4 * hidden]),
        }
    }

    /// Uniform ±1/sqrt(fan_in) weights, zero bias except +1 on the forget gate.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        super::init_uniform(&mut p.w, input, rng);
        super::init_uniform(&mut p.r, hidden, rng);
        for v in &mut p.b.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn hidden(&self) -> usize {
        self.r.cols()
    }

    pub fn num_params(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }

    pub fn insert_into(self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{}.W", prefix), self.w);
        store.insert(format!("{}.R", prefix), self.r);
        store.insert(format!("{}.b", prefix), self.b);
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self, LayerError> {
        let get = |k: &str| {
            store.get(&format!("{}.{}", prefix, k)).cloned().ok_or_else(|| LayerError::MissingParam(format!("{}.{}", prefix, k)))
        };
        Self::new(get("W")?, get("R")?, get("b")?)
    }
}

/// Zoneout probabilities for the cell and hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Zoneout {
    pub cell: f64,
    pub hidden: f64,
}

impl Zoneout {
    pub fn validate(&self) -> Result<(), LayerError> {
        check_rate("zoneout cell", self.cell)?;
        check_rate("zoneout hidden", self.hidden)
    }
}

/// Masks that stay fixed for a whole batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerMasks {
    /// Binary keep-mask over R (4H×H).
    pub dropconnect: Option<Tensor>,
    pub dropconnect_rate: f64,
}

impl RegularizerMasks {
    pub fn none() -> Self {
        RegularizerMasks { dropconnect: None, dropconnect_rate: 0.0 }
    }

    pub fn draw<R: Rng + ?Sized>(hidden: usize, dropconnect: f64, rng: &mut R) -> Result<Self, LayerError> {
        check_rate("dropconnect", dropconnect)?;
        if dropconnect == 0.0 {
            return Ok(Self::none());
        }
        let mask = bernoulli_keep(4 * hidden * hidden, 1.0 - dropconnect, rng);
        Ok(RegularizerMasks { dropconnect: Some(Tensor::matrix(4 * hidden, hidden, mask)), dropconnect_rate: dropconnect })
    }

    /// Mask scaled by the inverse keep probability, or `None` when inactive.
    pub fn scaled_dropconnect(&self) -> Option<Tensor> {
        let keep = 1.0 - self.dropconnect_rate;
        let s = if keep > 0.0 { 1.0 / keep } else { 1.0 };
        self.dropconnect.as_ref().map(|m| m.map(|v| v * s))
    }

    /// The recurrent matrix actually used by the cell.
    pub fn effective_r(&self, r: &Tensor) -> Tensor {
        match self.scaled_dropconnect() {
            Some(m) => Tensor::new(r.shape().to_vec(), r.data().iter().zip(m.data()).map(|(a, b)| a * b).collect()),
            None => r.clone(),
        }
    }
}

/// Draws per-unit zoneout keep-previous indicators, or returns the expectation
/// weights at inference.
fn zoneout_weights<R: Rng + ?Sized>(n: usize, rate: f64, mode: Mode, rng: &mut R) -> Vec<f64> {
    match mode {
        Mode::Train if rate > 0.0 => bernoulli_keep(n, rate, rng),
        Mode::Train => vec![0.0; n],
        Mode::Eval => vec![rate; n],
    }
}

/// One LSTM step on plain vectors. In training each unit keeps its previous
/// cell (hidden) value with probability `zoneout.cell` (`zoneout.hidden`); in
/// evaluation the state is the expectation `z·prev + (1−z)·new`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_step<R: Rng + ?Sized>(
    p: &LstmParams,
    masks: &RegularizerMasks,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    zoneout: Zoneout,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>), LayerError> {
    zoneout.validate()?;
    check_rate("dropconnect", masks.dropconnect_rate)?;
    let h = p.hidden();
    if x.len() != p.input_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(LayerError::Shape(format!("lstm step: x {}, h {}, c {} for D={}, H={}", x.len(), h_prev.len(), c_prev.len(), p.input_dim(), h)));
    }
    let r = masks.effective_r(&p.r);
    let dc = zoneout_weights(h, zoneout.cell, mode, rng);
    let dh = zoneout_weights(h, zoneout.hidden, mode, rng);
    Ok(lstm_cell(p, &r, x, h_prev, c_prev, &dc, &dh))
}

/// Deterministic cell update given the effective recurrent matrix and zoneout weights.
pub(crate) fn lstm_cell(p: &LstmParams, r: &Tensor, x: &[f64], h_prev: &[f64], c_prev: &[f64], dc: &[f64], dh: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = p.hidden();
    let mut z = matvec(&p.w, x);
    for (zi, ri) in z.iter_mut().zip(matvec(r, h_prev)) {
        *zi += ri;
    }
    for (zi, bi) in z.iter_mut().zip(p.b.data()) {
        *zi += bi;
    }
    let mut h_t = vec![0.0; h];
    let mut c_t = vec![0.0; h];
    for j in 0..h {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[h + j]);
        let g = z[2 * h + j].tanh();
        let o = sigmoid(z[3 * h + j]);
        let c_new = f * c_prev[j] + i * g;
        let h_new = o * c_new.tanh();
        c_t[j] = dc[j] * c_prev[j] + (1.0 - dc[j]) * c_new;
        h_t[j] = dh[j] * h_prev[j] + (1.0 - dh[j]) * h_new;
    }
    (h_t, c_t)
}

/// Graph-side handles for one LSTM. `r` is already masked by DropConnect.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: Var,
    pub r: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmVars {
    /// Registers `<prefix>.{W,R,b}` as parameters and applies the DropConnect
    /// mask (held as a constant) to R.
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str, masks: &RegularizerMasks) -> Result<Self, GraphError> {
        let w = g.param_from(store, &format!("{}.W", prefix))?;
        let r0 = g.param_from(store, &format!("{}.R", prefix))?;
        let b = g.param_from(store, &format!("{}.b", prefix))?;
        let hidden = g.shape(r0)[1];
        let r = match masks.scaled_dropconnect() {
            Some(m) => {
                let m = g.constant(m);
                g.mul(r0, m)?
            }
            None => r0,
        };
        Ok(LstmVars { w, r, b, hidden })
    }
}

/// One graph step. `xw` is the precomputed 1×4H input projection (bias included).
fn graph_step(g: &mut Graph, v: &LstmVars, xw: Var, h_prev: Var, c_prev: Var, dc: Vec<f64>, dh: Vec<f64>) -> Result<(Var, Var), GraphError> {
    let h = v.hidden;
    let hr = g.matmul_t(h_prev, v.r)?;
    let z = g.add(xw, hr)?;
    let zi = g.slice_cols(z, 0, h)?;
    let zf = g.slice_cols(z, h, h)?;
    let zg = g.slice_cols(z, 2 * h, h)?;
    let zo = g.slice_cols(z, 3 * h, h)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let gg = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let fc = g.mul(f, c_prev)?;
    let ig = g.mul(i, gg)?;
    let c_new = g.add(fc, ig)?;
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(o, tc)?;
    let c_t = zone(g, c_prev, c_new, dc)?;
    let h_t = zone(g, h_prev, h_new, dh)?;
    Ok((h_t, c_t))
}

fn zone(g: &mut Graph, prev: Var, new: Var, d: Vec<f64>) -> Result<Var, GraphError> {
    if d.iter().all(|&x| x == 0.0) {
        return Ok(new);
    }
    let keep_new: Vec<f64> = d.iter().map(|x| 1.0 - x).collect();
    let d = g.constant(Tensor::row(d));
    let k = g.constant(Tensor::row(keep_new));
    let a = g.mul(prev, d)?;
    let b = g.mul(new, k)?;
    g.add(a, b)
}

/// Running state of a recurrent layer inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        let z = g.constant(Tensor::zeros(&[1, hidden]));
        LstmState { h: z, c: z }
    }
}

/// One graph step from a 1×D input row.
pub fn lstm_step_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    v: &LstmVars,
    x: Var,
    state: LstmState,
    zoneout: Zoneout,
    mode: Mode,
    rng: &mut R,
) -> Result<LstmState, GraphError> {
    let xw = g.matmul_t(x, v.w)?;
    let xw = g.add_row(xw, v.b)?;
    let dc = zoneout_weights(v.hidden, zoneout.cell, mode, rng);
    let dh = zoneout_weights(v.hidden, zoneout.hidden, mode, rng);
    let (h, c) = graph_step(g, v, xw, state.h, state.c, dc, dh)?;
    Ok(LstmState { h, c })
}

/// Runs the LSTM over a T×D sequence from zero state; returns T×H outputs in
/// time order. With `reverse` the recurrence runs from the last frame.
pub fn lstm_sequence<R: Rng + ?Sized>(
    g: &mut Graph,
    v: &LstmVars,
    x: Var,
    reverse: bool,
    zoneout: Zoneout,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, GraphError> {
    let t_len = g.shape(x)[0];
    let xw_all = g.matmul_t(x, v.w)?;
    let xw_all = g.add_row(xw_all, v.b)?;
    let mut st = LstmState::zeros(g, v.hidden);
    let mut outs = vec![st.h; t_len];
    for k in 0..t_len {
        let t = if reverse { t_len - 1 - k } else { k };
        let xw = g.slice_rows(xw_all, t, 1)?;
        let dc = zoneout_weights(v.hidden, zoneout.cell, mode, rng);
        let dh = zoneout_weights(v.hidden, zoneout.hidden, mode, rng);
        let (h, c) = graph_step(g, v, xw, st.h, st.c, dc, dh)?;
        st = LstmState { h, c };
        outs[t] = h;
    }
    g.concat_rows(&outs)
}

/// Forward and backward passes concatenated per frame (T×2H).
pub fn bidirectional_lstm<R: Rng + ?Sized>(
    g: &mut Graph,
    fwd: &LstmVars,
    bwd: &LstmVars,
    x: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, GraphError> {
    let f = lstm_sequence(g, fwd, x, false, Zoneout::default(), mode, rng)?;
    let b = lstm_sequence(g, bwd, x, true, Zoneout::default(), mode, rng)?;
    g.concat_cols(&[f, b])
}
