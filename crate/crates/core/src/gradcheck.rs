//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::task::Example;
use crate::tensor::Rng;
use crate::train::Tagger;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled across all leaves (all of them if there are fewer).
    pub coords: usize,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, coords: 200, floor: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d loss / d leaves` recorded on `tape` against central differences.
pub fn grad_check_tape<T: Scalar>(tape: &mut Tape<T>, loss: Var, leaves: &[Var], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.step <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let grads = tape.backward(loss)?;
    let sizes: Vec<usize> = leaves.iter().map(|&v| tape.value(v).data().len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = Rng::new(cfg.seed);
    let mut picks: Vec<usize> = sample(&mut rng, total, cfg.coords.min(total)).into_vec();
    picks.sort_unstable();

    let h = T::of(cfg.step);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, max_abs_err: 0.0 };
    let eval = |tape: &mut Tape<T>, leaf: Var, idx: usize, value: T| -> Result<f64> {
        let mut m = tape.value(leaf).clone();
        m.data_mut()[idx] = value;
        tape.set_leaf(leaf, m)?;
        tape.recompute()?;
        Ok(tape.value(loss).get(0, 0).as_f64())
    };
    for flat in picks {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let leaf = leaves[which];
        let orig = tape.value(leaf).data()[idx];
        let plus = eval(tape, leaf, idx, orig + h)?;
        let minus = eval(tape, leaf, idx, orig - h)?;
        eval(tape, leaf, idx, orig)?;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let analytic = grads.wrt(leaf).map_or(0.0, |g| g.data()[idx].as_f64());
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
        report.max_rel_err = report.max_rel_err.max(relative_error(analytic, numeric, cfg.floor));
    }
    Ok(report)
}

/// Full-model check of the batch loss w.r.t. every tagger tensor.
pub fn grad_check<T: Scalar>(tagger: &Tagger<T>, batch: &[&Example], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars = tagger.push(&mut tape);
    let loss = tagger.batch_loss_on_tape(&mut tape, &vars, batch)?;
    grad_check_tape(&mut tape, loss, &vars.all(), cfg)
}
