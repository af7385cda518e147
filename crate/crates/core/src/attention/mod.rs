//! Single-headed additive attention with location features from the previous
//! alignment. Encoder frames serve directly as keys and values.

use std::io::Write;

use rand::Rng;

use crate::autodiff::{softmax_in_place, Graph, GraphError, ParamStore, Tensor, Var};
use crate::layers::{init_uniform, matvec};

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("every encoder frame is masked")]
    AllMasked,
    #[error("shape: {0}")]
    Shape(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Dimensions of an attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub query: usize,
    pub enc: usize,
    pub hidden: usize,
    pub kernels: usize,
    /// Kernel width, odd.
    pub width: usize,
}

impl AttentionDims {
    pub fn num_params(&self) -> usize {
        let a = self.hidden;
        a * (self.query + self.enc + self.kernels + 2) + self.kernels * self.width
    }

    /// `<prefix>.{W,V,U,b,w,F}`: query, frame and location projections, bias,
    /// scoring vector and location kernels.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let a = self.hidden;
        let mut mat = |rows: usize, cols: usize, fan_in: usize| {
            let mut t = Tensor::zeros(&[rows, cols]);
            init_uniform(&mut t, fan_in, rng);
            t
        };
        let (w, v, u) = (mat(a, self.query, self.query), mat(a, self.enc, self.enc), mat(a, self.kernels, self.kernels));
        let score = mat(1, a, a);
        let f = mat(self.kernels, self.width, self.width);
        store.insert(format!("{}.W", prefix), w);
        store.insert(format!("{}.V", prefix), v);
        store.insert(format!("{}.U", prefix), u);
        store.insert(format!("{}.b", prefix), Tensor::zeros(&[1, a]));
        store.insert(format!("{}.w", prefix), score);
        store.insert(format!("{}.F", prefix), f);
    }
}

/// Owned copy of the attention weights for plain (non-graph) evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w: Tensor,
    pub v: Tensor,
    pub u: Tensor,
    pub b: Tensor,
    pub score: Tensor,
    pub kernels: Tensor,
}

impl AttentionParams {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self, AttentionError> {
        let get = |k: &str| {
            let name = format!("{}.{}", prefix, k);
            store.get(&name).cloned().ok_or(AttentionError::MissingParam(name))
        };
        let p = AttentionParams { w: get("W")?, v: get("V")?, u: get("U")?, b: get("b")?, score: get("w")?, kernels: get("F")? };
        if p.kernels.cols() % 2 == 0 {
            return Err(AttentionError::Shape(format!("kernel width {} must be odd", p.kernels.cols())));
        }
        Ok(p)
    }

    /// `V·h_t` for every frame (T×A); computed once per utterance.
    pub fn project_frames(&self, enc: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..enc.rows()).map(|t| matvec(&self.v, enc.row_slice(t))).collect();
        Tensor::from_rows(&rows)
    }

    /// Returns `(context, attn)`. `venc` is [`project_frames`](Self::project_frames) of `enc`.
    pub fn attend(&self, query: &[f64], enc: &Tensor, venc: &Tensor, prev: &[f64], mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>), AttentionError> {
        let t_len = enc.rows();
        if prev.len() != t_len || mask.len() != t_len || query.len() != self.w.cols() {
            return Err(AttentionError::Shape(format!("query {}, prev {}, mask {}, frames {}", query.len(), prev.len(), mask.len(), t_len)));
        }
        if !mask.iter().any(|&m| m) {
            return Err(AttentionError::AllMasked);
        }
        let (k_n, width) = (self.kernels.rows(), self.kernels.cols());
        let pad = width / 2;
        let a = self.w.rows();
        let mut wq = matvec(&self.w, query);
        for (x, b) in wq.iter_mut().zip(self.b.data()) {
            *x += b;
        }
        let mut scores = vec![0.0; t_len];
        let mut loc = vec![0.0; k_n];
        for t in 0..t_len {
            for (o, l) in loc.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..width {
                    let src = t + k;
                    if src < pad || src - pad >= t_len {
                        continue;
                    }
                    acc += self.kernels.get(o, k) * prev[src - pad];
                }
                *l = acc;
            }
            let ul = matvec(&self.u, &loc);
            let vr = venc.row_slice(t);
            scores[t] = (0..a).map(|j| self.score.data()[j] * (wq[j] + vr[j] + ul[j]).tanh()).sum();
        }
        softmax_in_place(&mut scores, Some(mask));
        let mut ctx = vec![0.0; enc.cols()];
        for (t, &p) in scores.iter().enumerate() {
            for (c, e) in ctx.iter_mut().zip(enc.row_slice(t)) {
                *c += p * e;
            }
        }
        Ok((ctx, scores))
    }
}

/// Uniform weights over the valid frames.
pub fn initial_alignment(mask: &[bool]) -> Vec<f64> {
    let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
    mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect()
}

/// Graph handles for one attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub score: Var,
    pub kernels: Var,
    pub width: usize,
    /// Projected frames `enc · Vᵀ` (T×A).
    pub venc: Var,
    pub enc: Var,
}

impl AttentionVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str, enc: Var) -> Result<Self, AttentionError> {
        let p = |g: &mut Graph, k: &str| g.param_from(store, &format!("{}.{}", prefix, k));
        let (w, v, u, b, score, kernels) = (p(g, "W")?, p(g, "V")?, p(g, "U")?, p(g, "b")?, p(g, "w")?, p(g, "F")?);
        let width = g.shape(kernels)[1];
        let venc = g.matmul_t(enc, v)?;
        Ok(AttentionVars { w, u, b, score, kernels, width, venc, enc })
    }
}

/// Graph version of [`AttentionParams::attend`]: `query` is 1×Q and `prev`
/// is 1×T; returns `(context 1×E, attn 1×T)`.
pub fn attend(g: &mut Graph, v: &AttentionVars, query: Var, prev: Var, mask: &[bool]) -> Result<(Var, Var), AttentionError> {
    if !mask.iter().any(|&m| m) {
        return Err(AttentionError::AllMasked);
    }
    let prev_col = g.transpose(prev)?;
    let loc = g.conv1d_time(prev_col, v.kernels, v.width)?;
    let ul = g.matmul_t(loc, v.u)?;
    let wq = g.matmul_t(query, v.w)?;
    let wq = g.add(wq, v.b)?;
    let s = g.add(v.venc, ul)?;
    let s = g.add_row(s, wq)?;
    let s = g.tanh(s)?;
    let e = g.matmul_t(v.score, s)?;
    let attn = g.masked_softmax_rows(e, mask.to_vec())?;
    let ctx = g.matmul(attn, v.enc)?;
    Ok((ctx, attn))
}

/// Writes a step × frame alignment matrix as CSV.
pub fn write_attention_csv<W: Write>(mut w: W, rows: &[Vec<f64>]) -> Result<(), AttentionError> {
    let frames = rows.first().map_or(0, |r| r.len());
    let header: Vec<String> = std::iter::once("step".to_string()).chain((0..frames).map(|t| format!("frame_{}", t))).collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r.iter().map(|v| format!("{:.6}", v)).collect();
        writeln!(w, "{},{}", i, cells.join(","))?;
    }
    Ok(())
}
