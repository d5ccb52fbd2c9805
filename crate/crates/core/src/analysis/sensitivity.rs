//! Token-to-token sensitivity of a layer's attention output, and its
//! local / syntactic / unrelated averages.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{attention_on_tape, push_params, GraphShape};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::sets::TokenSets;

/// Which output the Jacobian is taken of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// The multi-head attention output `Y`.
    #[default]
    PreResidual,
    /// `X + Y`.
    PostResidual,
}

/// `β[i, j] = ‖∂Y[i] / ∂X[j]‖_F` for layer `layer` at input `x` (that
/// layer's own input), using one reverse sweep per output coordinate.
pub fn layer_sensitivity<T: Scalar>(encoder: &Encoder<T>, x: &Matrix<T>, layer: usize, measure: Measure) -> Result<Matrix<f64>> {
    let cfg = &encoder.config;
    if layer >= cfg.n_layers {
        return Err(Error::Contract(format!("layer {layer} out of range for {} layers", cfg.n_layers)));
    }
    let mut tape = Tape::new();
    let params = push_params(&mut tape, &encoder.params, false);
    let xv = tape.leaf(x.clone());
    let shape = GraphShape { config: cfg, head_pools: encoder.head_pools() };
    let y = attention_on_tape(&mut tape, shape, layer, &params, xv)?;
    let out = match measure {
        Measure::PreResidual => y,
        Measure::PostResidual => tape.add(xv, y)?,
    };
    let (t, d) = tape.value(out).shape();
    let mut sq = Matrix::<f64>::zeros(t, t);
    for i in 0..t {
        for c in 0..d {
            let mut seed = Matrix::zeros(t, d);
            seed.set(i, c, T::one());
            let grads = tape.backward_from(out, seed)?;
            let Some(g) = grads.wrt(xv) else { continue };
            for j in 0..t {
                let block: f64 = g.row(j).iter().map(|v| v.as_f64() * v.as_f64()).sum();
                sq.set(i, j, sq.get(i, j) + block);
            }
        }
    }
    Ok(sq.map(f64::sqrt))
}

/// Sensitivity of layer `layer` for an embedded (pre-position-encoding) input.
pub fn sensitivity_matrix<T: Scalar>(encoder: &Encoder<T>, embedded: &Matrix<T>, layer: usize, measure: Measure) -> Result<Matrix<f64>> {
    if layer >= encoder.config.n_layers {
        return Err(Error::Contract(format!("layer {layer} out of range for {} layers", encoder.config.n_layers)));
    }
    let trace = encoder.encode(embedded)?;
    layer_sensitivity(encoder, trace.layer_input(layer), layer, measure)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gammas {
    pub local: Option<f64>,
    pub syntactic: Option<f64>,
    pub unrelated: Option<f64>,
}

/// Mean over positions of the mean `β[i, j]` over each set; positions whose
/// set is empty are left out, and a kind with no nonempty set is `None`.
pub fn gamma_scores(beta: &Matrix<f64>, sets: &[TokenSets]) -> Result<Gammas> {
    if beta.rows() != beta.cols() || sets.len() != beta.rows() {
        return Err(Error::shape("gamma_scores", beta.shape(), (sets.len(), sets.len())));
    }
    let average = |pick: &dyn Fn(&TokenSets) -> &std::collections::BTreeSet<usize>| {
        let per: Vec<f64> = sets
            .iter()
            .filter(|s| !pick(s).is_empty())
            .map(|s| pick(s).iter().map(|&j| beta.get(s.i, j)).sum::<f64>() / pick(s).len() as f64)
            .collect();
        (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
    };
    Ok(Gammas {
        local: average(&|s| &s.local),
        syntactic: average(&|s| &s.syntactic),
        unrelated: average(&|s| &s.unrelated),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub layer: usize,
    pub beta: Matrix<f64>,
    pub gamma: Gammas,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::sets::all_token_sets;
    use crate::config::{MaskMode, ModelConfig};
    use crate::mask::MaskKind;
    use crate::tensor::{seeded_uniform_init, Rng};

    fn enc(cfg: ModelConfig, seed: u64) -> Encoder<f64> {
        Encoder::init(cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn band1_layer_is_blind_beyond_one() {
        let cfg = ModelConfig::standard(1, 2, 6, 3, 6).with_uniform_mask(MaskKind::Band(1)).with_mask_mode(MaskMode::Renormalized);
        let e = enc(cfg, 1);
        let x = seeded_uniform_init(6, 6, 1.0, &mut Rng::new(2));
        let beta = layer_sensitivity(&e, &x, 0, Measure::PreResidual).unwrap();
        for i in 0..6usize {
            for j in 0..6usize {
                if i.abs_diff(j) > 1 {
                    assert_eq!(beta.get(i, j), 0.0);
                } else {
                    assert!(beta.get(i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_value_maps_give_zero_beta() {
        let mut e = enc(ModelConfig::standard(1, 2, 6, 3, 6), 3);
        for w in &mut e.params.layers[0].w_v {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = seeded_uniform_init(4, 6, 1.0, &mut Rng::new(4));
        let beta = layer_sensitivity(&e, &x, 0, Measure::PreResidual).unwrap();
        assert!(beta.data().iter().all(|&b| b == 0.0));
        // the residual path adds the identity block
        let post = layer_sensitivity(&e, &x, 0, Measure::PostResidual).unwrap();
        assert!((post.get(2, 2) - 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matches_finite_differences() {
        let e = enc(ModelConfig::standard(2, 2, 4, 3, 5), 5);
        let x = seeded_uniform_init(5, 4, 1.0, &mut Rng::new(6));
        let beta = sensitivity_matrix(&e, &x, 1, Measure::PreResidual).unwrap();
        let xl = e.encode(&x).unwrap().layer_input(1).clone();
        let h = 1e-5;
        for i in 0..5 {
            for j in 0..5 {
                let mut sq = 0.0;
                for c in 0..4 {
                    let mut plus = xl.clone();
                    plus.set(j, c, plus.get(j, c) + h);
                    let mut minus = xl.clone();
                    minus.set(j, c, minus.get(j, c) - h);
                    let yp = e.layer_forward(1, &plus).unwrap().attention;
                    let ym = e.layer_forward(1, &minus).unwrap().attention;
                    for o in 0..4 {
                        let d = (yp.get(i, o) - ym.get(i, o)) / (2.0 * h);
                        sq += d * d;
                    }
                }
                let fd = sq.sqrt();
                let rel = (fd - beta.get(i, j)).abs() / fd.max(1e-8);
                assert!(rel <= 1e-5, "({i},{j}) {fd} vs {}", beta.get(i, j));
            }
        }
    }

    #[test]
    fn gamma_examples() {
        let sets = all_token_sets(3, &[], 2);
        let g = gamma_scores(&Matrix::filled(3, 3, 1.0), &sets).unwrap();
        assert_eq!((g.local, g.syntactic, g.unrelated), (Some(1.0), None, None));

        let sets5 = all_token_sets(5, &[(0, 4)], 1);
        let g = gamma_scores(&Matrix::filled(5, 5, 1.0), &sets5).unwrap();
        assert_eq!((g.local, g.syntactic, g.unrelated), (Some(1.0), Some(1.0), Some(1.0)));

        let g = gamma_scores(&Matrix::identity(3), &sets).unwrap();
        assert!((g.local.unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let sets_far = all_token_sets(3, &[], 0);
        let g = gamma_scores(&Matrix::identity(3), &sets_far).unwrap();
        assert_eq!((g.local, g.unrelated), (Some(1.0), Some(0.0)));
    }

    #[test]
    fn gamma_matches_double_loop() {
        let mut rng = Rng::new(9);
        for t in [3usize, 6, 9] {
            let beta = seeded_uniform_init::<f64>(t, t, 1.0, &mut rng).map(f64::abs);
            let edges = vec![(0, t - 1), (1, t - 1)];
            let sets = all_token_sets(t, &edges, 2);
            let g = gamma_scores(&beta, &sets).unwrap();
            let (mut num, mut cnt) = (0.0, 0);
            for i in 0..t {
                let (mut s, mut n) = (0.0, 0);
                for j in 0..t {
                    let near = i.abs_diff(j) <= 2;
                    let linked = edges.iter().any(|&(a, b)| (a == i && b == j) || (a == j && b == i));
                    if !near && !linked {
                        s += beta.get(i, j);
                        n += 1;
                    }
                }
                if n > 0 {
                    num += s / n as f64;
                    cnt += 1;
                }
            }
            match g.unrelated {
                Some(u) => assert!((u - num / cnt as f64).abs() < 1e-12),
                None => assert_eq!(cnt, 0),
            }
        }
    }
}
