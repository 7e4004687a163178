//! Decoder-only transformer with per-layer widths.
//!
//! Each decoder layer is pre-norm: `x += attn(norm(x)) · Wo`, then
//! `x += (silu(norm(x)·Wgate) ⊙ norm(x)·Wup) · Wdown`. Rotary embeddings are
//! applied to q and k, so attention heads carry no positional parameters and
//! can be removed independently. The hidden size never changes; only the
//! head count and MLP channel count of each layer do.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub head_dim: usize,
    /// Attention heads per layer.
    pub head_count: Vec<usize>,
    /// Gated-MLP channels per layer.
    pub mlp_channels: Vec<usize>,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// A config with identical layers, `hidden / heads` as head size.
    pub fn uniform(
        vocab_size: usize,
        hidden: usize,
        n_layers: usize,
        heads: usize,
        mlp_channels: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return config_err("heads", format!("{heads} does not divide hidden size {hidden}"));
        }
        let cfg = Self {
            vocab_size,
            hidden,
            head_dim: hidden / heads,
            head_count: vec![heads; n_layers],
            mlp_channels: vec![mlp_channels; n_layers],
            max_seq_len,
            norm_eps: 1e-6,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_layers(&self) -> usize {
        self.head_count.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_count.len() < 2 {
            return config_err("layers", format!("need at least 2 decoder layers, got {}", self.head_count.len()));
        }
        if self.mlp_channels.len() != self.head_count.len() {
            return config_err("mlp_channels", "one entry per layer required");
        }
        if self.vocab_size == 0 || self.hidden == 0 || self.max_seq_len == 0 {
            return config_err("hidden", "vocab, hidden and max_seq_len must be positive");
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return config_err("head_dim", format!("{} must be positive and even (rotary pairs)", self.head_dim));
        }
        if let Some(i) = self.head_count.iter().position(|&h| h == 0) {
            return config_err("heads", format!("layer {i} has no attention heads"));
        }
        if let Some(i) = self.mlp_channels.iter().position(|&c| c == 0) {
            return config_err("mlp_channels", format!("layer {i} has no MLP channels"));
        }
        if !(self.norm_eps >= 0.0) {
            return config_err("norm_eps", "must be non-negative");
        }
        Ok(())
    }

    pub fn attention_width(&self, layer: usize) -> usize {
        self.head_count[layer] * self.head_dim
    }
}

/// Parameters of one transformer layer (hidden size H).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T: Real> {
    pub attn_norm: Tensor<T>,
    /// `[H, heads·head_dim]`
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `[heads·head_dim, H]`
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    /// `[H, channels]`
    pub w_up: Tensor<T>,
    pub w_gate: Tensor<T>,
    /// `[channels, H]`
    pub w_down: Tensor<T>,
}

impl<T: Real> DecoderLayer<T> {
    pub const TENSOR_NAMES: [&'static str; 9] =
        ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_gate", "w_down"];

    pub fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_up,
            &self.w_gate,
            &self.w_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_gate,
            &mut self.w_down,
        ]
    }

    /// Checks the coupled-structure widths against `heads·head_dim` and `channels`.
    pub fn validate(&self, hidden: usize, head_dim: usize, heads: usize, channels: usize) -> Result<()> {
        let a = heads * head_dim;
        let expect: [(&str, &Tensor<T>, &[usize]); 9] = [
            ("attn_norm", &self.attn_norm, &[hidden]),
            ("wq", &self.wq, &[hidden, a]),
            ("wk", &self.wk, &[hidden, a]),
            ("wv", &self.wv, &[hidden, a]),
            ("wo", &self.wo, &[a, hidden]),
            ("mlp_norm", &self.mlp_norm, &[hidden]),
            ("w_up", &self.w_up, &[hidden, channels]),
            ("w_gate", &self.w_gate, &[hidden, channels]),
            ("w_down", &self.w_down, &[channels, hidden]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return shape_err("decoder layer", format!("{name} is {:?}, expected {shape:?}", t.shape()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    /// `[V, H]`
    pub embedding: Tensor<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub final_norm: Tensor<T>,
    /// `[H, V]`
    pub lm_head: Tensor<T>,
}

/// A batch of equal-length token sequences, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return shape_err("token batch", format!("{} ids for [{batch}, {seq}]", ids.len()));
        }
        Ok(Self { batch, seq, ids })
    }

    /// Stacks equal-length sequences.
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Result<Self> {
        let seq = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != seq) {
            return shape_err("token batch", "rows have different lengths");
        }
        let ids = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), seq, ids)
    }
}

/// Residual-stream values entering and leaving one decoder layer, `[B, L, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations<T: Real> {
    pub input: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCapture<T: Real> {
    pub layers: Vec<LayerActivations<T>>,
}

/// Result of recording a forward pass on a tape.
#[derive(Debug)]
pub struct TapeForward<T: Real> {
    /// `[B·L, V]`
    pub logits: Var,
    /// One var per tensor, in [`Model::tensors`] order.
    pub params: Vec<Var>,
    pub capture: Option<ActivationCapture<T>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub per_layer: Vec<usize>,
    pub embedding: usize,
    pub final_norm: usize,
    pub lm_head: usize,
}

impl ParamCount {
    /// Parameters outside the decoder layers plus the per-layer norm gains.
    pub fn fixed(&self, hidden: usize) -> usize {
        self.embedding + self.final_norm + self.lm_head + 2 * hidden * self.per_layer.len()
    }
}

/// Closed-form size of one decoder layer.
pub fn layer_param_count(hidden: usize, head_dim: usize, heads: usize, channels: usize) -> usize {
    let a = heads * head_dim;
    hidden * a * 3 + a * hidden + 2 * hidden * channels + channels * hidden + 2 * hidden
}

impl<T: Real> Model<T> {
    /// Deterministic init: weights ~ N(0, 1/fan_in), norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(i) = config
            .head_count
            .iter()
            .position(|&h| h * config.head_dim != config.hidden)
        {
            return config_err(
                "heads",
                format!("layer {i}: heads·head_dim must equal hidden at construction"),
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize| -> Tensor<T> {
            let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
            let data = (0..rows * cols).map(|_| T::of(dist.sample(&mut rng))).collect();
            Tensor::new(vec![rows, cols], data).expect("init shape")
        };
        let (v, h) = (config.vocab_size, config.hidden);
        // embedding rows are looked up, not multiplied: scale by row width
        let embedding = {
            let t = normal(h, v);
            Tensor::new(vec![v, h], t.into_data()).expect("init shape")
        };
        let mut layers = Vec::with_capacity(config.n_layers());
        for i in 0..config.n_layers() {
            let a = config.attention_width(i);
            let c = config.mlp_channels[i];
            layers.push(DecoderLayer {
                attn_norm: Tensor::full(&[h], T::one()),
                wq: normal(h, a),
                wk: normal(h, a),
                wv: normal(h, a),
                wo: normal(a, h),
                mlp_norm: Tensor::full(&[h], T::one()),
                w_up: normal(h, c),
                w_gate: normal(h, c),
                w_down: normal(c, h),
            });
        }
        let lm_head = normal(h, v);
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm: Tensor::full(&[h], T::one()),
            lm_head,
        })
    }

    /// Same shapes, all zeros (used for optimizer moments).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
            t.grad = None;
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| DecoderLayer {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_gate: l.w_gate.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// All tensors in canonical order with stable names.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in DecoderLayer::<T>::TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in DecoderLayer::<T>::TENSOR_NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    /// Revalidates config and every tensor shape.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.n_layers() {
            return shape_err("model", format!("{} layers vs config {}", self.layers.len(), c.n_layers()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(c.hidden, c.head_dim, c.head_count[i], c.mlp_channels[i])?;
        }
        let (v, h) = (c.vocab_size, c.hidden);
        if self.embedding.shape() != [v, h] || self.lm_head.shape() != [h, v] || self.final_norm.shape() != [h] {
            return shape_err("model", "embedding / head / final norm shapes disagree with config");
        }
        Ok(())
    }

    pub fn param_count(&self) -> ParamCount {
        let c = &self.config;
        let per_layer: Vec<usize> = (0..c.n_layers())
            .map(|i| layer_param_count(c.hidden, c.head_dim, c.head_count[i], c.mlp_channels[i]))
            .collect();
        let embedding = c.vocab_size * c.hidden;
        let lm_head = c.hidden * c.vocab_size;
        let final_norm = c.hidden;
        ParamCount {
            total: per_layer.iter().sum::<usize>() + embedding + lm_head + final_norm,
            per_layer,
            embedding,
            final_norm,
            lm_head,
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Adds the tape's leaf gradients into the matching tensors' accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, params: &[Var]) {
        for ((_, t), &var) in self.tensors_mut().into_iter().zip(params) {
            if let Some(g) = tape.grad(var) {
                t.accumulate_grad(g);
            }
        }
    }

    /// Records a forward pass. Parameters become tracked leaves when
    /// `track_grads` is set, detached constants otherwise.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        tokens: &TokenBatch,
        capture: bool,
        track_grads: bool,
    ) -> Result<TapeForward<T>> {
        let c = &self.config;
        if tokens.seq > c.max_seq_len {
            return shape_err("forward", format!("sequence length {} exceeds max {}", tokens.seq, c.max_seq_len));
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: c.vocab_size });
        }
        let params: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), track_grads))
            .collect();
        let (b, l, h) = (tokens.batch, tokens.seq, c.hidden);
        let mut x = tape.embedding(params[0], &tokens.ids)?;
        let mut captured = capture.then(Vec::new);
        for i in 0..c.n_layers() {
            let p = &params[1 + 9 * i..1 + 9 * (i + 1)];
            let input = x;
            let hn = tape.rmsnorm(x, p[0], c.norm_eps)?;
            let q = tape.matmul(hn, p[1])?;
            let k = tape.matmul(hn, p[2])?;
            let v = tape.matmul(hn, p[3])?;
            let q = tape.rope(q, l, c.head_dim)?;
            let k = tape.rope(k, l, c.head_dim)?;
            let att = tape.causal_attention(q, k, v, b, l, c.head_count[i], c.head_dim)?;
            let att = tape.matmul(att, p[4])?;
            x = tape.add(x, att)?;
            let hn = tape.rmsnorm(x, p[5], c.norm_eps)?;
            let up = tape.matmul(hn, p[6])?;
            let gate = tape.matmul(hn, p[7])?;
            let gate = tape.silu(gate)?;
            let act = tape.mul(gate, up)?;
            let down = tape.matmul(act, p[8])?;
            x = tape.add(x, down)?;
            if let Some(cap) = captured.as_mut() {
                cap.push(LayerActivations {
                    input: tape.value(input).reshape(&[b, l, h])?,
                    output: tape.value(x).reshape(&[b, l, h])?,
                });
            }
        }
        let n = params.len();
        let xn = tape.rmsnorm(x, params[n - 2], c.norm_eps)?;
        let logits = tape.matmul(xn, params[n - 1])?;
        Ok(TapeForward {
            logits,
            params,
            capture: captured.map(|layers| ActivationCapture { layers }),
        })
    }

    /// Inference forward: logits `[B, L, V]` and optionally the per-layer capture.
    pub fn forward(&self, tokens: &TokenBatch, capture: bool) -> Result<(Tensor<T>, Option<ActivationCapture<T>>)> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, tokens, capture, false)?;
        let logits = tape
            .value(out.logits)
            .reshape(&[tokens.batch, tokens.seq, self.config.vocab_size])?;
        Ok((logits, out.capture))
    }

    /// Mean next-token loss of `inputs` predicting `targets` (same layout).
    pub fn loss(&self, inputs: &TokenBatch, targets: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, inputs, false, false)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        Ok(tape.value(loss).data()[0].f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::uniform(17, 8, 2, 2, 16, 16).unwrap()
    }

    fn batch() -> TokenBatch {
        TokenBatch::new(2, 5, vec![1, 2, 3, 4, 5, 16, 0, 3, 9, 9]).unwrap()
    }

    #[test]
    fn param_count_closed_form() {
        let m = Model::<f64>::init(tiny(), 1).unwrap();
        let pc = m.param_count();
        // attention 4·8·8 = 256, MLP 3·8·16 = 384, gains 16
        assert_eq!(pc.per_layer, vec![656, 656]);
        assert_eq!(pc.total, 656 * 2 + 17 * 8 * 2 + 8);
        let counted: usize = m.tensors().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(counted, pc.total);
        assert_eq!(pc.per_layer.iter().sum::<usize>() + pc.embedding + pc.lm_head + pc.final_norm, pc.total);
    }

    #[test]
    fn degenerate_configs_rejected() {
        assert!(ModelConfig::uniform(17, 8, 0, 2, 16, 16).is_err());
        assert!(ModelConfig::uniform(17, 8, 1, 2, 16, 16).is_err());
        assert!(ModelConfig::uniform(17, 8, 2, 3, 16, 16).is_err());
        let mut c = tiny();
        c.mlp_channels[1] = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::<f64>::init(tiny(), 3).unwrap();
        let b = Model::<f64>::init(tiny(), 3).unwrap();
        let c = Model::<f64>::init(tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_scale_matches_fan_in() {
        let cfg = ModelConfig::uniform(260, 64, 2, 4, 128, 16).unwrap();
        let m = Model::<f64>::init(cfg, 11).unwrap();
        for t in [&m.layers[0].wq, &m.layers[1].w_up] {
            let n = t.numel() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let std = (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let want = 1.0 / 64f64.sqrt();
            assert!((std - want).abs() < 0.2 * want, "std {std} vs {want}");
        }
        let std_down = {
            let t = &m.layers[0].w_down;
            (t.data().iter().map(|x| x * x).sum::<f64>() / t.numel() as f64).sqrt()
        };
        assert!((std_down - 1.0 / 128f64.sqrt()).abs() < 0.2 / 128f64.sqrt());
    }

    #[test]
    fn logits_shape_and_determinism() {
        let m = Model::<f64>::init(tiny(), 5).unwrap();
        let (a, cap) = m.forward(&batch(), true).unwrap();
        assert_eq!(a.shape(), &[2, 5, 17]);
        assert!(a.is_finite());
        let cap = cap.unwrap();
        assert_eq!(cap.layers.len(), 2);
        for la in &cap.layers {
            assert_eq!(la.input.shape(), &[2, 5, 8]);
            assert_eq!(la.output.shape(), la.input.shape());
        }
        let (b, none) = m.forward(&batch(), false).unwrap();
        assert!(none.is_none());
        assert_eq!(a, b);
        assert_eq!(cap.layers[1].input, cap.layers[0].output);
    }

    #[test]
    fn residual_only_layers_pass_through() {
        let mut m = Model::<f64>::init(tiny(), 6).unwrap();
        for layer in &mut m.layers {
            for t in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w_up, &mut layer.w_gate, &mut layer.w_down] {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let (_, cap) = m.forward(&batch(), true).unwrap();
        for la in cap.unwrap().layers {
            assert_eq!(la.input, la.output);
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let m = Model::<f64>::init(tiny(), 7).unwrap();
        let a = TokenBatch::new(1, 6, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let b = TokenBatch::new(1, 6, vec![1, 2, 3, 9, 0, 11]).unwrap();
        let (la, _) = m.forward(&a, false).unwrap();
        let (lb, _) = m.forward(&b, false).unwrap();
        assert_eq!(&la.data()[..3 * 17], &lb.data()[..3 * 17]);
        assert_ne!(&la.data()[3 * 17..4 * 17], &lb.data()[3 * 17..4 * 17]);
    }

    #[test]
    fn forward_rejects_bad_tokens_and_lengths() {
        let m = Model::<f64>::init(tiny(), 8).unwrap();
        let bad = TokenBatch::new(1, 2, vec![1, 17]).unwrap();
        assert!(matches!(m.forward(&bad, false), Err(Error::TokenOutOfRange { .. })));
        let long = TokenBatch::new(1, 17, vec![0; 17]).unwrap();
        assert!(m.forward(&long, false).is_err());
    }
}
