//! The encoder rebuilt on a [`Tape`], for gradients.
//!
//! Every node is evaluated with the same primitives as the plain forward
//! pass in [`crate::encoder`], so values on the tape are bit-identical to it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::config::{MaskMode, ModelConfig};
use crate::encoder::{position_encoding, EncoderParams, LayerParams, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::mask::{make_mask, Mask, MaskKind};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Puts every parameter on the tape, as leaves or as constants.
pub fn push_params<T: Scalar>(tape: &mut Tape<T>, params: &EncoderParams<Matrix<T>>, trainable: bool) -> EncoderParams<Var> {
    params.map(&mut |m: &Matrix<T>| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) })
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    /// Multi-head attention output, before the residual.
    pub attention: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// Embedded input plus position encoding.
    pub input: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    pub fn output(&self) -> Var {
        self.layers.last().map_or(self.input, |l| l.output)
    }
}

/// Model structure needed to lay a layer out on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphShape<'a> {
    pub config: &'a ModelConfig,
    pub head_pools: &'a [Vec<usize>],
}

struct MaskCache<T> {
    size: usize,
    masks: HashMap<MaskKind, (Arc<Mask>, Arc<Matrix<T>>)>,
}

impl<T: Scalar> MaskCache<T> {
    fn get(&mut self, kind: MaskKind) -> Result<(Arc<Mask>, Arc<Matrix<T>>)> {
        if let Some(hit) = self.masks.get(&kind) {
            return Ok(hit.clone());
        }
        let mask = make_mask(kind, self.size)?;
        let dense = Arc::new(mask.to_matrix());
        let entry = (Arc::new(mask), dense);
        self.masks.insert(kind, entry.clone());
        Ok(entry)
    }
}

/// `Y = Concat(heads) W_o` for layer `layer` on input `x`.
pub fn attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    shape: GraphShape<'_>,
    layer: usize,
    params: &EncoderParams<Var>,
    x: Var,
) -> Result<Var> {
    let cfg = shape.config;
    let lp = &params.layers[layer];
    let pools = &shape.head_pools[layer];
    let t = tape.value(x).rows();
    if tape.value(x).cols() != cfg.d_v {
        return Err(Error::shape("attention input", tape.value(x).shape(), (t, cfg.d_v)));
    }
    let inv_sqrt = T::one() / T::of(cfg.d_l as f64).sqrt();
    let mut masks = MaskCache { size: t, masks: HashMap::new() };
    let mut scores: HashMap<usize, Var> = HashMap::new();
    let mut alphas: HashMap<usize, Var> = HashMap::new();
    let mut contexts = Vec::with_capacity(cfg.heads);
    for (h, &pool) in pools.iter().enumerate().take(cfg.heads) {
        let s = match scores.get(&pool) {
            Some(&s) => s,
            None => {
                let qk = &params.qk_pool[pool];
                let q = tape.matmul(x, qk.w_q)?;
                let k = tape.matmul(x, qk.w_k)?;
                let kt = tape.transpose(k)?;
                let raw = tape.matmul(q, kt)?;
                let s = tape.scale(raw, inv_sqrt)?;
                scores.insert(pool, s);
                s
            }
        };
        let mut alpha = |tape: &mut Tape<T>| -> Result<Var> {
            if let Some(&a) = alphas.get(&pool) {
                return Ok(a);
            }
            let a = tape.softmax_rows(s)?;
            alphas.insert(pool, a);
            Ok(a)
        };
        let coeffs = match cfg.masks[layer][h] {
            None => alpha(tape)?,
            Some(kind) => {
                let (mask, dense) = masks.get(kind)?;
                match cfg.mask_mode {
                    MaskMode::PostSoftmax => {
                        let a = alpha(tape)?;
                        tape.mul_const(a, dense)?
                    }
                    MaskMode::Renormalized => tape.masked_softmax_rows(s, mask)?,
                }
            }
        };
        let v = tape.matmul(x, lp.w_v[h])?;
        contexts.push(tape.matmul(coeffs, v)?);
    }
    let cat = tape.concat_cols(&contexts)?;
    tape.matmul(cat, lp.w_o)
}

fn feed_forward_on_tape<T: Scalar>(tape: &mut Tape<T>, lp: &LayerParams<Var>, z: Var) -> Result<Var> {
    let h = tape.matmul(z, lp.ffn_w1)?;
    let h = tape.add_row(h, lp.ffn_b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, lp.ffn_w2)?;
    tape.add_row(o, lp.ffn_b2)
}

pub fn layer_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    shape: GraphShape<'_>,
    layer: usize,
    params: &EncoderParams<Var>,
    x: Var,
) -> Result<LayerVars> {
    let eps = T::of(LAYER_NORM_EPS);
    let lp = &params.layers[layer];
    let attention = attention_on_tape(tape, shape, layer, params, x)?;
    let r1 = tape.add(x, attention)?;
    let z = tape.layer_norm_rows(r1, lp.ln1_gain, lp.ln1_bias, eps)?;
    let f = feed_forward_on_tape(tape, lp, z)?;
    let r2 = tape.add(z, f)?;
    let output = tape.layer_norm_rows(r2, lp.ln2_gain, lp.ln2_bias, eps)?;
    Ok(LayerVars { attention, output })
}

/// Adds the position table to `embedded` and stacks every layer.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    shape: GraphShape<'_>,
    params: &EncoderParams<Var>,
    embedded: Var,
) -> Result<EncoderVars> {
    let (t, d) = tape.value(embedded).shape();
    if d != shape.config.d_v {
        return Err(Error::shape("encode", (t, d), (t, shape.config.d_v)));
    }
    let pe = tape.constant(position_encoding(t, d));
    let input = tape.add(embedded, pe)?;
    let mut layers = Vec::with_capacity(shape.config.n_layers);
    let mut x = input;
    for l in 0..shape.config.n_layers {
        let lv = layer_on_tape(tape, shape, l, params, x)?;
        x = lv.output;
        layers.push(lv);
    }
    Ok(EncoderVars { input, layers })
}
