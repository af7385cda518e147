//! Encoder-decoder assembly: configuration, parameter layout, checkpoints.

mod network;

pub use network::{encode_batch, loss_graph, sequence_loss, Decoder, DecoderState, EncoderOutput, Example, LossOptions, LossOutput};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionDims, AttentionError};
use crate::autodiff::{read_checkpoint, write_checkpoint, DType, GraphError, ParamStore, Tensor};
use crate::config::{apply_all, parse_kv, render_kv, ConfigError, KvConfig};
use crate::layers::{halved_len, init_uniform, BatchNormState, EncoderBlockConfig, LayerError, LstmParams, PyramidMode};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("feature dimension {got}, model expects {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub enc_layers: usize,
    /// LSTM units per direction.
    pub enc_hidden: usize,
    pub enc_reduce: usize,
    /// Number of leading blocks whose input frame rate is halved.
    pub pyramid_layers: usize,
    pub pyramid_mode: PyramidMode,
    pub enc_out: usize,
    pub enc_dropout: f64,
    pub enc_dropconnect: f64,
    pub enc_residual: bool,
    pub dropout_after_reduction: bool,
    pub embed_dim: usize,
    pub lm_lstm: usize,
    pub fusion_lstm: usize,
    pub bottleneck: usize,
    pub att_hidden: usize,
    pub att_kernels: usize,
    pub att_width: usize,
    pub dec_weight_dropout: f64,
    pub embed_dropout: f64,
    pub output_dropout: f64,
    pub zoneout_cell: f64,
    pub zoneout_hidden: f64,
    pub vocab_size: usize,
    pub bn_momentum: f64,
}

crate::kv_config!(ModelConfig {
    feature_dim,
    enc_layers,
    enc_hidden,
    enc_reduce,
    pyramid_layers,
    pyramid_mode,
    enc_out,
    enc_dropout,
    enc_dropconnect,
    enc_residual,
    dropout_after_reduction,
    embed_dim,
    lm_lstm,
    fusion_lstm,
    bottleneck,
    att_hidden,
    att_kernels,
    att_width,
    dec_weight_dropout,
    embed_dropout,
    output_dropout,
    zoneout_cell,
    zoneout_hidden,
    vocab_size,
    bn_momentum,
});

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-size 300-hour configuration: 80 log-mels with deltas, 600 BPE units.
    pub fn full() -> Self {
        ModelConfig {
            feature_dim: 240,
            enc_layers: 8,
            enc_hidden: 1536,
            enc_reduce: 1024,
            pyramid_layers: 2,
            pyramid_mode: PyramidMode::Mean,
            enc_out: 256,
            enc_dropout: 0.3,
            enc_dropconnect: 0.3,
            enc_residual: true,
            dropout_after_reduction: false,
            embed_dim: 256,
            lm_lstm: 512,
            fusion_lstm: 768,
            bottleneck: 256,
            att_hidden: 256,
            att_kernels: 256,
            att_width: 5,
            dec_weight_dropout: 0.15,
            embed_dropout: 0.05,
            output_dropout: 0.15,
            zoneout_cell: 0.15,
            zoneout_hidden: 0.05,
            vocab_size: 603,
            bn_momentum: 0.1,
        }
    }

    /// Reduced variant: 6 encoder layers of 512 units, 384-dim reduction, 512-unit decoder.
    pub fn small() -> Self {
        ModelConfig { enc_layers: 6, enc_hidden: 512, enc_reduce: 384, fusion_lstm: 512, ..Self::full() }
    }

    /// Desk-scale model for synthetic data.
    pub fn toy(feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feature_dim,
            enc_layers: 2,
            enc_hidden: 32,
            enc_reduce: 32,
            enc_out: 32,
            embed_dim: 16,
            lm_lstm: 32,
            fusion_lstm: 32,
            bottleneck: 32,
            att_hidden: 32,
            att_kernels: 4,
            vocab_size,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("enc_layers", self.enc_layers),
            ("enc_hidden", self.enc_hidden),
            ("enc_reduce", self.enc_reduce),
            ("enc_out", self.enc_out),
            ("embed_dim", self.embed_dim),
            ("lm_lstm", self.lm_lstm),
            ("fusion_lstm", self.fusion_lstm),
            ("bottleneck", self.bottleneck),
            ("att_hidden", self.att_hidden),
            ("att_kernels", self.att_kernels),
            ("att_width", self.att_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ConfigError::invalid(name, "must be positive"));
            }
        }
        if self.pyramid_layers > self.enc_layers {
            return Err(ConfigError::invalid("pyramid_layers", format!("{} exceeds enc_layers {}", self.pyramid_layers, self.enc_layers)));
        }
        if self.att_width % 2 == 0 {
            return Err(ConfigError::invalid("att_width", "must be odd"));
        }
        if self.vocab_size <= 3 {
            return Err(ConfigError::invalid("vocab_size", "must exceed the 3 special tokens"));
        }
        let rates = [
            ("enc_dropout", self.enc_dropout),
            ("enc_dropconnect", self.enc_dropconnect),
            ("dec_weight_dropout", self.dec_weight_dropout),
            ("embed_dropout", self.embed_dropout),
            ("output_dropout", self.output_dropout),
            ("zoneout_cell", self.zoneout_cell),
            ("zoneout_hidden", self.zoneout_hidden),
            ("bn_momentum", self.bn_momentum),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::invalid(name, format!("{} outside [0, 1]", v)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        render_kv(&self.entries())
    }

    /// Starts from the full-size configuration and applies every key in `text`.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::full();
        apply_all(&mut [&mut c], &parse_kv(text)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn block(&self, i: usize) -> EncoderBlockConfig {
        let mut d = self.feature_dim;
        for j in 0..=i {
            if j > 0 {
                d = self.enc_reduce;
            }
            if j < self.pyramid_layers {
                d = self.pyramid_mode.output_dim(d);
            }
        }
        EncoderBlockConfig {
            input_dim: d,
            hidden: self.enc_hidden,
            reduce: self.enc_reduce,
            residual: self.enc_residual,
            dropout: self.enc_dropout,
            dropconnect: self.enc_dropconnect,
            dropout_after_reduction: self.dropout_after_reduction,
        }
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims { query: self.bottleneck, enc: self.enc_out, hidden: self.att_hidden, kernels: self.att_kernels, width: self.att_width }
    }

    /// Encoder output length for `t` input frames.
    pub fn encoded_len(&self, t: usize) -> Result<usize, ModelError> {
        if t == 0 {
            return Err(ModelError::Empty("zero input frames"));
        }
        Ok((0..self.pyramid_layers).fold(t, |t, _| halved_len(t)))
    }

    /// Every parameter tensor with its initialization rule, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: [usize; 2], init: Init| specs.push(ParamSpec { name, shape, init });
        let lstm = |push: &mut dyn FnMut(String, [usize; 2], Init), prefix: &str, d: usize, h: usize| {
            push(format!("{}.W", prefix), [4 * h, d], Init::Uniform { fan_in: d });
            push(format!("{}.R", prefix), [4 * h, h], Init::Uniform { fan_in: h });
            push(format!("{}.b", prefix), [1, 4 * h], Init::LstmBias { hidden: h });
        };
        for i in 0..self.enc_layers {
            let b = self.block(i);
            let p = format!("enc.{}", i);
            lstm(&mut push, &format!("{}.fwd", p), b.input_dim, b.hidden);
            lstm(&mut push, &format!("{}.bwd", p), b.input_dim, b.hidden);
            push(format!("{}.reduce.W", p), [b.reduce, 2 * b.hidden], Init::Uniform { fan_in: 2 * b.hidden });
            if b.residual {
                push(format!("{}.bypass.W", p), [b.reduce, b.input_dim], Init::Uniform { fan_in: b.input_dim });
            }
            push(format!("{}.bn.gamma", p), [1, b.reduce], Init::Ones);
            push(format!("{}.bn.beta", p), [1, b.reduce], Init::Zeros);
        }
        push("enc.out.W".into(), [self.enc_out, self.enc_reduce], Init::Uniform { fan_in: self.enc_reduce });
        push("enc.out.b".into(), [1, self.enc_out], Init::Zeros);

        let v = self.vocab_size;
        push("dec.embed".into(), [v, self.embed_dim], Init::Uniform { fan_in: self.embed_dim });
        lstm(&mut push, "dec.lm", self.embed_dim, self.lm_lstm);
        let a = self.attention_dims();
        push("dec.att.W".into(), [a.hidden, a.query], Init::Uniform { fan_in: a.query });
        push("dec.att.V".into(), [a.hidden, a.enc], Init::Uniform { fan_in: a.enc });
        push("dec.att.U".into(), [a.hidden, a.kernels], Init::Uniform { fan_in: a.kernels });
        push("dec.att.b".into(), [1, a.hidden], Init::Zeros);
        push("dec.att.w".into(), [1, a.hidden], Init::Uniform { fan_in: a.hidden });
        push("dec.att.F".into(), [a.kernels, a.width], Init::Uniform { fan_in: a.width });
        lstm(&mut push, "dec.fusion", self.enc_out, self.fusion_lstm);
        let bin = self.lm_lstm + self.fusion_lstm;
        push("dec.bottleneck.W".into(), [self.bottleneck, bin], Init::Uniform { fan_in: bin });
        push("dec.bottleneck.b".into(), [1, self.bottleneck], Init::Zeros);
        push("dec.out.W".into(), [v, self.bottleneck], Init::Uniform { fan_in: self.bottleneck });
        push("dec.out.b".into(), [1, v], Init::Zeros);
        specs
    }

    /// Closed-form parameter counts.
    ///
    /// LSTM(d, h) = 4h(d + h + 1). Encoder block i with input d_i:
    /// 2·LSTM(d_i, H) + R·2H + R·d_i (bypass) + 2R (BN), then R·E + E for the
    /// output layer. Decoder: V·e (embedding) + LSTM(e, L) + A(q + E + K + 2)
    /// + 5K (attention) + LSTM(E, F) + B(L + F + 1) + V(B + 1).
    pub fn param_counts(&self) -> ParamCounts {
        let lstm = |d: usize, h: usize| 4 * h * (d + h + 1);
        let mut encoder = 0;
        for i in 0..self.enc_layers {
            encoder += self.block(i).num_params();
        }
        encoder += self.enc_out * (self.enc_reduce + 1);
        let v = self.vocab_size;
        let decoder = v * self.embed_dim
            + lstm(self.embed_dim, self.lm_lstm)
            + self.attention_dims().num_params()
            + lstm(self.enc_out, self.fusion_lstm)
            + self.bottleneck * (self.lm_lstm + self.fusion_lstm + 1)
            + v * (self.bottleneck + 1);
        ParamCounts { encoder, decoder, total: encoder + decoder }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// U(−1/√fan_in, 1/√fan_in).
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    /// Zero except +1 on the forget-gate slice.
    LstmBias { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Biases and batch-norm parameters (excluded from weight decay).
    pub fn is_bias_like(name: &str) -> bool {
        name.ends_with(".b") || name.contains(".bn.")
    }
}

/// Allocates and initializes every parameter in `specs`.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in specs {
        let mut t = Tensor::zeros(&s.shape);
        match s.init {
            Init::Uniform { fan_in } => init_uniform(&mut t, fan_in, &mut rng),
            Init::Zeros => {}
            Init::Ones => t.data_mut().fill(1.0),
            Init::LstmBias { hidden } => t.data_mut()[hidden..2 * hidden].fill(1.0),
        }
        store.insert(s.name.clone(), t);
    }
    store
}

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bn: Vec<BatchNormState>,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config.param_specs(), seed);
        let bn = (0..config.enc_layers)
            .map(|_| BatchNormState { momentum: config.bn_momentum, ..BatchNormState::new(config.enc_reduce) })
            .collect();
        Ok(Model { config, params, bn })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        for b in &mut self.bn {
            b.frozen = frozen;
        }
    }

    /// Encoder output in evaluation mode.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        network::encode_eval(self, features)
    }

    pub fn decoder(&self) -> Result<Decoder, ModelError> {
        Decoder::new(&self.config, &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut tensors: Vec<(String, Tensor)> = self.params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        for (i, b) in self.bn.iter().enumerate() {
            tensors.push((format!("bnstat.{}.mean", i), Tensor::row(b.running_mean.clone())));
            tensors.push((format!("bnstat.{}.var", i), Tensor::row(b.running_var.clone())));
            tensors.push((format!("bnstat.{}.frozen", i), Tensor::scalar(if b.frozen { 1.0 } else { 0.0 })));
        }
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &self.config.to_text(), &tensors, DType::F64).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck = read_checkpoint(&mut BufReader::new(File::open(path)?)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let config = ModelConfig::from_text(&ck.meta)?;
        let mut model = Model::build(config, 0)?;
        let mut tensors: std::collections::HashMap<String, Tensor> = ck.tensors.into_iter().collect();
        for (name, t) in model.params.iter_mut() {
            let v = tensors.remove(name).ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", name)))?;
            if v.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!("{} has shape {:?}, expected {:?}", name, v.shape(), t.shape())));
            }
            *t = v;
        }
        for (i, b) in model.bn.iter_mut().enumerate() {
            let mut take = |k: &str| tensors.remove(&format!("bnstat.{}.{}", i, k)).ok_or_else(|| ModelError::Checkpoint(format!("missing bnstat.{}.{}", i, k)));
            b.running_mean = take("mean")?.into_data();
            b.running_var = take("var")?.into_data();
            b.frozen = take("frozen")?.item() != 0.0;
        }
        Ok(model)
    }
}

/// LSTM weights gathered from a store.
pub(crate) fn lstm_from(store: &ParamStore, prefix: &str) -> Result<LstmParams, ModelError> {
    Ok(LstmParams::from_store(store, prefix)?)
}
