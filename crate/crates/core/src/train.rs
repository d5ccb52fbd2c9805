//! Token-tagging model (embedding, encoder, linear read-out) and its
//! training loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::encoder::{Encoder, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{encode_on_tape, push_params, EncoderVars, GraphShape};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::ordered_map;
use crate::scalar::Scalar;
use crate::task::{Dataset, Example};
use crate::tensor::{seeded_uniform_init, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Tagger<T: Scalar> {
    pub encoder: Encoder<T>,
    /// `vocab × d_v`.
    pub embed: Matrix<T>,
    /// `d_v × classes`.
    pub out_w: Matrix<T>,
    /// `1 × classes`.
    pub out_b: Matrix<T>,
}

/// The tagger's tensors laid out on a tape.
#[derive(Clone, Debug)]
pub struct TaggerVars {
    pub embed: Var,
    pub encoder: EncoderParams<Var>,
    pub out_w: Var,
    pub out_b: Var,
}

impl TaggerVars {
    /// Same order as [`Tagger::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        out.extend(self.encoder.tensors().into_iter().copied());
        out.extend([self.out_w, self.out_b]);
        out
    }
}

impl<T: Scalar> Tagger<T> {
    pub fn init(config: ModelConfig, vocab: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if vocab == 0 || classes == 0 {
            return Err(Error::Config("tagger needs a nonempty vocabulary and label set".into()));
        }
        let d_v = config.d_v;
        let encoder = Encoder::init(config, rng)?;
        let embed = seeded_uniform_init(vocab, d_v, 1.0, rng);
        let out_w = seeded_uniform_init(d_v, classes, (6.0 / (d_v + classes) as f64).sqrt(), rng);
        Ok(Tagger { encoder, embed, out_w, out_b: Matrix::zeros(1, classes) })
    }

    pub fn from_parts(encoder: Encoder<T>, embed: Matrix<T>, out_w: Matrix<T>, out_b: Matrix<T>) -> Result<Self> {
        let d_v = encoder.config.d_v;
        if embed.cols() != d_v || embed.rows() == 0 {
            return Err(Error::Checkpoint(format!("embedding shape {:?} does not match d_v = {d_v}", embed.shape())));
        }
        if out_w.rows() != d_v || out_b.shape() != (1, out_w.cols()) {
            return Err(Error::Checkpoint(format!(
                "read-out shapes {:?} / {:?} do not match d_v = {d_v}",
                out_w.shape(),
                out_b.shape()
            )));
        }
        Ok(Tagger { encoder, embed, out_w, out_b })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn classes(&self) -> usize {
        self.out_w.cols()
    }

    /// Embedding, encoder tensors (in [`EncoderParams::tensors`] order), read-out.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.embed];
        out.extend(self.encoder.params.tensors());
        out.extend([&self.out_w, &self.out_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.embed];
        out.extend(self.encoder.params.tensors_mut());
        out.extend([&mut self.out_w, &mut self.out_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab()) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", self.vocab())));
        }
        Ok(())
    }

    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Matrix<T>> {
        self.check_tokens(tokens)?;
        self.embed.gather_rows(tokens)
    }

    /// Encoder trace and `T × classes` logits.
    pub fn forward(&self, tokens: &[usize]) -> Result<(EncoderOutput<T>, Matrix<T>)> {
        let out = self.encoder.encode(&self.embed_tokens(tokens)?)?;
        let logits = out.output().matmul(&self.out_w)?.add_row(&self.out_b)?;
        Ok((out, logits))
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let (_, logits) = self.forward(tokens)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }

    /// Correct-prediction counts per position, summed over `examples`.
    pub fn position_hits(&self, examples: &[Example]) -> Result<Vec<(usize, usize)>> {
        let per: Vec<Result<Vec<bool>>> = ordered_map(examples, |ex| {
            let pred = self.predict(&ex.tokens)?;
            Ok(pred.iter().zip(&ex.labels).map(|(p, l)| p == l).collect())
        });
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for row in per {
            let row = row?;
            if hits.len() < row.len() {
                hits.resize(row.len(), (0, 0));
            }
            for (slot, ok) in hits.iter_mut().zip(row) {
                slot.0 += ok as usize;
                slot.1 += 1;
            }
        }
        Ok(hits)
    }

    /// Token-level accuracy over `examples`.
    pub fn accuracy(&self, examples: &[Example]) -> Result<f64> {
        let hits = self.position_hits(examples)?;
        let (ok, total) = hits.iter().fold((0, 0), |(a, b), &(h, n)| (a + h, b + n));
        Ok(if total == 0 { 0.0 } else { ok as f64 / total as f64 })
    }

    /// Lays the tagger's tensors out on `tape` as differentiable leaves.
    pub fn push(&self, tape: &mut Tape<T>) -> TaggerVars {
        TaggerVars {
            embed: tape.leaf(self.embed.clone()),
            encoder: push_params(tape, &self.encoder.params, true),
            out_w: tape.leaf(self.out_w.clone()),
            out_b: tape.leaf(self.out_b.clone()),
        }
    }

    /// Builds `tokens → logits` on the tape.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &TaggerVars, tokens: &[usize]) -> Result<(EncoderVars, Var)> {
        self.check_tokens(tokens)?;
        let x = tape.gather_rows(vars.embed, tokens)?;
        let shape = GraphShape { config: &self.encoder.config, head_pools: self.encoder.head_pools() };
        let enc = encode_on_tape(tape, shape, &vars.encoder, x)?;
        let h = tape.matmul(enc.output(), vars.out_w)?;
        let logits = tape.add_row(h, vars.out_b)?;
        Ok((enc, logits))
    }

    /// Mean over `batch` of each example's mean token cross-entropy.
    pub fn batch_loss_on_tape(&self, tape: &mut Tape<T>, vars: &TaggerVars, batch: &[&Example]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut total: Option<Var> = None;
        for ex in batch {
            let (_, logits) = self.forward_on_tape(tape, vars, &ex.tokens)?;
            let labels: Vec<Option<usize>> = ex.labels.iter().map(|&l| Some(l)).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        tape.scale(total.expect("nonempty batch"), T::one() / T::of(batch.len() as f64))
    }

    /// Loss value and gradients in [`Tagger::tensors`] order.
    pub fn loss_and_grads(&self, batch: &[&Example]) -> Result<(T, Vec<Matrix<T>>)> {
        let mut tape = Tape::new();
        let vars = self.push(&mut tape);
        let loss = self.batch_loss_on_tape(&mut tape, &vars, batch)?;
        let grads = tape.backward(loss)?;
        let all = vars.all().into_iter().map(|v| grads.wrt_or_zeros(v, &tape)).collect();
        Ok((tape.value(loss).get(0, 0), all))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 16, adam: AdamConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
}

/// Adam on token cross-entropy for `cfg.epochs` epochs. `on_epoch` sees each
/// epoch's metrics as they are produced.
pub fn train<T: Scalar>(
    tagger: &mut Tagger<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Task("training set is empty".into()));
    }
    let shapes: Vec<(usize, usize)> = tagger.tensors().iter().map(|m| m.shape()).collect();
    let mut adam = Adam::new(cfg.adam, &shapes);
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, grads) = tagger.loss_and_grads(&batch)?;
            let loss = loss.as_f64();
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss });
            }
            adam.step(&mut tagger.tensors_mut(), &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            train_acc: tagger.accuracy(&data.train)?,
            test_acc: tagger.accuracy(&data.test)?,
            loss: loss_sum / batches as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train {:.4} test {:.4}",
            metrics.loss,
            metrics.train_acc,
            metrics.test_acc
        );
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(history)
}
