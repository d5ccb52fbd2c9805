//! Stacked post-norm encoder layers: masked multi-head attention, residual,
//! layer norm, per-token ReLU feed-forward, residual, layer norm.

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_forward, AttentionRecord, LayerAttention};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{seeded_uniform_init, Matrix, Rng};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shared query/key projections; one per tie group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkPair<P> {
    pub w_q: P,
    pub w_k: P,
}

/// Per-layer weights. `P` is `Matrix<T>` for values and gradients, or a tape
/// variable when building a differentiable graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<P> {
    /// One `d_v × d_l` value projection per head; never tied.
    pub w_v: Vec<P>,
    /// `(d_l·H) × d_v`.
    pub w_o: P,
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub ffn_w1: P,
    pub ffn_b1: P,
    pub ffn_w2: P,
    pub ffn_b2: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
}

impl<P> LayerParams<P> {
    fn tensors(&self) -> Vec<&P> {
        let mut out: Vec<&P> = self.w_v.iter().collect();
        out.extend([
            &self.w_o,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = self.w_v.iter_mut().collect();
        out.extend([
            &mut self.w_o,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]);
        out
    }

    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LayerParams<Q> {
        LayerParams {
            w_v: self.w_v.iter().map(&mut *f).collect(),
            w_o: f(&self.w_o),
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<P> {
    /// Indexed by tie group.
    pub qk_pool: Vec<QkPair<P>>,
    pub layers: Vec<LayerParams<P>>,
}

impl<P> EncoderParams<P> {
    /// Every tensor in a fixed traversal order (pool first, then layers).
    pub fn tensors(&self) -> Vec<&P> {
        let mut out: Vec<&P> = self.qk_pool.iter().flat_map(|p| [&p.w_q, &p.w_k]).collect();
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out
    }

    /// Same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = self.qk_pool.iter_mut().flat_map(|p| [&mut p.w_q, &mut p.w_k]).collect();
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            qk_pool: self.qk_pool.iter().map(|p| QkPair { w_q: f(&p.w_q), w_k: f(&p.w_k) }).collect(),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl<T: Scalar> EncoderParams<Matrix<T>> {
    /// Glorot-uniform weights, unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d_v, d_l, d_ff) = (cfg.d_v, cfg.d_l, cfg.d_ff);
        let proj = glorot(d_v, d_l);
        let qk_pool = (0..cfg.tie_groups.len())
            .map(|_| QkPair { w_q: seeded_uniform_init(d_v, d_l, proj, rng), w_k: seeded_uniform_init(d_v, d_l, proj, rng) })
            .collect();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                w_v: (0..cfg.heads).map(|_| seeded_uniform_init(d_v, d_l, proj, rng)).collect(),
                w_o: seeded_uniform_init(d_l * cfg.heads, d_v, glorot(d_l * cfg.heads, d_v), rng),
                ln1_gain: Matrix::filled(1, d_v, T::one()),
                ln1_bias: Matrix::zeros(1, d_v),
                ffn_w1: seeded_uniform_init(d_v, d_ff, glorot(d_v, d_ff), rng),
                ffn_b1: Matrix::zeros(1, d_ff),
                ffn_w2: seeded_uniform_init(d_ff, d_v, glorot(d_ff, d_v), rng),
                ffn_b2: Matrix::zeros(1, d_v),
                ln2_gain: Matrix::filled(1, d_v, T::one()),
                ln2_bias: Matrix::zeros(1, d_v),
            })
            .collect();
        EncoderParams { qk_pool, layers }
    }

    /// Verifies every tensor's shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (d_v, d_l, d_ff, h) = (cfg.d_v, cfg.d_l, cfg.d_ff, cfg.heads);
        let bad = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Error::Checkpoint(format!("{what}: shape {got:?}, config expects {want:?}"))
        };
        if self.qk_pool.len() != cfg.tie_groups.len() {
            return Err(Error::Checkpoint(format!(
                "{} W_q/W_k pool entries, config has {} tie groups",
                self.qk_pool.len(),
                cfg.tie_groups.len()
            )));
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Checkpoint(format!("{} layers, config has {}", self.layers.len(), cfg.n_layers)));
        }
        for (g, p) in self.qk_pool.iter().enumerate() {
            for (name, m) in [("w_q", &p.w_q), ("w_k", &p.w_k)] {
                if m.shape() != (d_v, d_l) {
                    return Err(bad(&format!("pool {g} {name}"), m.shape(), (d_v, d_l)));
                }
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.w_v.len() != h {
                return Err(Error::Checkpoint(format!("layer {l}: {} value maps, config has {h} heads", layer.w_v.len())));
            }
            let mut want: Vec<(usize, usize)> = vec![(d_v, d_l); h];
            want.extend([(d_l * h, d_v), (1, d_v), (1, d_v), (d_v, d_ff), (1, d_ff), (d_ff, d_v), (1, d_v), (1, d_v), (1, d_v)]);
            for (i, (m, w)) in layer.tensors().into_iter().zip(want).enumerate() {
                if m.shape() != w {
                    return Err(bad(&format!("layer {l} tensor {i}"), m.shape(), w));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }
}

/// Sinusoidal position table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn position_encoding<T: Scalar>(len: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(len, d, |p, c| {
        let pair = (c / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * pair / d as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Per-token two-layer ReLU network.
pub fn feed_forward<T: Scalar>(x: &Matrix<T>, p: &LayerParams<Matrix<T>>) -> Result<Matrix<T>> {
    x.matmul(&p.ffn_w1)?.add_row(&p.ffn_b1)?.relu().matmul(&p.ffn_w2)?.add_row(&p.ffn_b2)
}

#[derive(Clone, Debug)]
pub struct LayerOutput<T> {
    /// Multi-head attention output `Y`, before the residual.
    pub attention: Matrix<T>,
    pub output: Matrix<T>,
    pub records: Vec<AttentionRecord<T>>,
}

/// `X' = LN₂(Z + FFN(Z))` with `Z = LN₁(X + MHA(X))`.
pub fn encoder_layer_forward<T: Scalar>(
    x: &Matrix<T>,
    attention: &LayerAttention<'_, T>,
    p: &LayerParams<Matrix<T>>,
) -> Result<LayerOutput<T>> {
    let eps = T::of(LAYER_NORM_EPS);
    let (y, records) = multi_head_forward(x, attention)?;
    let z = x.add(&y)?.layer_norm_rows(p.ln1_gain.data(), p.ln1_bias.data(), eps)?;
    let output = z.add(&feed_forward(&z, p)?)?.layer_norm_rows(p.ln2_gain.data(), p.ln2_bias.data(), eps)?;
    Ok(LayerOutput { attention: y, output, records })
}

#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// Embedded input plus position encoding (input of layer 0).
    pub input: Matrix<T>,
    pub attention_outputs: Vec<Matrix<T>>,
    pub layer_outputs: Vec<Matrix<T>>,
    pub records: Vec<AttentionRecord<T>>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn layer_input(&self, layer: usize) -> &Matrix<T> {
        if layer == 0 {
            &self.input
        } else {
            &self.layer_outputs[layer - 1]
        }
    }

    pub fn output(&self) -> &Matrix<T> {
        self.layer_outputs.last().unwrap_or(&self.input)
    }
}

/// A configured encoder with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Scalar> {
    pub config: ModelConfig,
    pub params: EncoderParams<Matrix<T>>,
    head_pools: Vec<Vec<usize>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: ModelConfig, params: EncoderParams<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        let head_pools = config.head_pools();
        Ok(Encoder { config, params, head_pools })
    }

    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, rng);
        Self::new(config, params)
    }

    pub fn head_pools(&self) -> &[Vec<usize>] {
        &self.head_pools
    }

    pub fn layer_attention(&self, layer: usize) -> LayerAttention<'_, T> {
        let lp = &self.params.layers[layer];
        LayerAttention {
            layer,
            pool: &self.params.qk_pool,
            head_pool: &self.head_pools[layer],
            w_v: &lp.w_v,
            w_o: &lp.w_o,
            masks: &self.config.masks[layer],
            d_l: self.config.d_l,
            mode: self.config.mask_mode,
        }
    }

    pub fn layer_forward(&self, layer: usize, x: &Matrix<T>) -> Result<LayerOutput<T>> {
        encoder_layer_forward(x, &self.layer_attention(layer), &self.params.layers[layer])
    }

    /// Adds the position table to `embedded` and runs every layer.
    pub fn encode(&self, embedded: &Matrix<T>) -> Result<EncoderOutput<T>> {
        if embedded.cols() != self.config.d_v {
            return Err(Error::shape("encode", embedded.shape(), (embedded.rows(), self.config.d_v)));
        }
        let input = embedded.add(&position_encoding(embedded.rows(), self.config.d_v))?;
        let mut out = EncoderOutput {
            input,
            attention_outputs: Vec::with_capacity(self.config.n_layers),
            layer_outputs: Vec::with_capacity(self.config.n_layers),
            records: Vec::new(),
        };
        for l in 0..self.config.n_layers {
            let layer = self.layer_forward(l, out.layer_input(l))?;
            out.attention_outputs.push(layer.attention);
            out.layer_outputs.push(layer.output);
            out.records.extend(layer.records);
        }
        Ok(out)
    }
}
