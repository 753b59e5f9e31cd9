//! Language-model training: AdamW with warmup + cosine decay, token-pooled
//! cross entropy, deterministic shuffling and gradient accumulation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{eval::mean_token_ce, forward_tokens, register, Parameters, SessionMode};
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Sequences per gradient-accumulation chunk. Fixed (not core-count derived)
/// so gradient summation order is machine-independent.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.03,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = ((total_steps as f64) * self.warmup_fraction).round() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup.max(1) as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (total_steps.saturating_sub(warmup)).max(1) as f64;
                let progress = (step - warmup) as f64 / span;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam keyed by tensor name.
pub struct AdamW<E> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    state: BTreeMap<String, (Vec<E>, Vec<E>)>,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update. `updates` pairs each named parameter tensor with its
    /// gradient; lr 0 leaves parameters untouched.
    pub fn step(&mut self, lr: f64, weight_decay: f64, updates: &mut [(String, &mut Tensor<E>, Tensor<E>)]) {
        self.t += 1;
        let b1 = E::from_f64_lossy(self.beta1);
        let b2 = E::from_f64_lossy(self.beta2);
        let one = E::one();
        let eps = E::from_f64_lossy(self.eps);
        let lr_e = E::from_f64_lossy(lr);
        let wd = E::from_f64_lossy(lr * weight_decay);
        let bias1 = E::from_f64_lossy(1.0 - self.beta1.powi(self.t as i32));
        let bias2 = E::from_f64_lossy(1.0 - self.beta2.powi(self.t as i32));

        for (name, param, grad) in updates.iter_mut() {
            let n = param.numel();
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![E::zero(); n], vec![E::zero(); n]));
            let pd = param.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                pd[i] = pd[i] - lr_e * mhat / (vhat.sqrt() + eps) - wd * pd[i];
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean token CE before/after training, on a fixed evaluation sample of
    /// the training corpus (at most 256 sequences).
    pub initial_ce: f64,
    pub final_ce: f64,
    pub epoch_loss: Vec<f64>,
}

/// Next-token training on a token corpus. Mutates `params` in place.
pub fn train_lm(
    params: &mut Parameters<f32>,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Contract("train_lm: empty corpus".into()));
    }
    if params.frozen {
        return Err(Error::Contract("train_lm: parameters are frozen".into()));
    }
    for seq in corpus {
        if seq.len() < 2 {
            return Err(Error::Contract("train_lm: sequence shorter than 2 tokens".into()));
        }
        if seq.len() > params.config.context_length {
            return Err(Error::Contract(format!(
                "train_lm: sequence length {} exceeds context {}",
                seq.len(),
                params.config.context_length
            )));
        }
    }

    let eval_sample = eval_subsample(corpus, cfg.seed);
    let initial_ce = mean_token_ce(params, None, &eval_sample)?;

    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut optim = AdamW::<f32>::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch_ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&[u32]> = batch_ids.iter().map(|&i| corpus[i].as_slice()).collect();
            let lr_t = cfg.lr_at(step, total_steps);
            let loss = lm_grad_step(params, &batch, &mut optim, lr_t, cfg.weight_decay)
                .map_err(|e| match e {
                    Error::Numeric(d) => Error::Training { epoch, detail: d },
                    other => other,
                })?;
            loss_sum += loss;
            loss_count += 1;
            step += 1;
        }
        epoch_loss.push(loss_sum / loss_count.max(1) as f64);
    }

    let final_ce = mean_token_ce(params, None, &eval_sample)?;
    Ok(TrainReport {
        initial_ce,
        final_ce,
        epoch_loss,
    })
}

fn eval_subsample(corpus: &[Vec<u32>], seed: u64) -> Vec<Vec<u32>> {
    const MAX: usize = 256;
    if corpus.len() <= MAX {
        return corpus.to_vec();
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval-sample"));
    idx.shuffle(&mut rng);
    idx.truncate(MAX);
    idx.sort_unstable();
    idx.into_iter().map(|i| corpus[i].clone()).collect()
}

/// One optimizer step over a batch: token-pooled CE, gradients accumulated
/// over fixed-size chunks (chunks run in parallel, reduction order is fixed).
fn lm_grad_step(
    params: &mut Parameters<f32>,
    batch: &[&[u32]],
    optim: &mut AdamW<f32>,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    let total_targets: usize = batch.iter().map(|s| s.len() - 1).sum();
    let chunks: Vec<&[&[u32]]> = batch.chunks(GRAD_CHUNK).collect();
    let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = chunks
        .par_iter()
        .map(|chunk| lm_chunk_grads(params, chunk, total_targets))
        .collect();

    let mut loss = 0.0;
    let mut grads: Option<Vec<(String, Tensor<f32>)>> = None;
    let names: Vec<String> = {
        let mut tape = Tape::<f32>::new();
        let vars = register(&mut tape, params, None, SessionMode::TrainBase)?;
        vars.trainables.into_iter().map(|(n, _)| n).collect()
    };
    for res in results {
        let (chunk_loss, chunk_grads) = res?;
        loss += chunk_loss;
        match &mut grads {
            None => {
                grads = Some(names.iter().cloned().zip(chunk_grads).collect());
            }
            Some(acc) => {
                for ((_, total), add) in acc.iter_mut().zip(chunk_grads) {
                    for (o, &g) in total.data_mut().iter_mut().zip(add.data()) {
                        *o += g;
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {loss}")));
    }

    let grads = grads.expect("non-empty batch");
    let mut named: BTreeMap<String, Tensor<f32>> = grads.into_iter().collect();
    let mut updates: Vec<(String, &mut Tensor<f32>, Tensor<f32>)> = Vec::new();
    for (name, tensor) in params.tensors_mut() {
        if let Some(grad) = named.remove(&name) {
            updates.push((name, tensor, grad));
        }
    }
    optim.step(lr, weight_decay, &mut updates);
    Ok(loss)
}

fn lm_chunk_grads(
    params: &Parameters<f32>,
    chunk: &[&[u32]],
    total_targets: usize,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let vars = register(&mut tape, params, None, SessionMode::TrainBase)?;
    let inv_total = 1.0 / total_targets as f32;
    let mut loss_var = None;
    for seq in chunk {
        let inputs = &seq[..seq.len() - 1];
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let logits = forward_tokens(&mut tape, &vars, inputs)?;
        let ce = tape.cross_entropy_rows(logits, &targets)?;
        let part = tape.weighted_sum(ce, vec![inv_total; targets.len()])?;
        loss_var = Some(match loss_var {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    let loss_var = loss_var.expect("non-empty chunk");
    let loss = tape.value(loss_var).item() as f64;
    tape.backward(loss_var)?;
    let mut grads = Vec::with_capacity(vars.trainables.len());
    for (name, var) in &vars.trainables {
        let g = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape().to_vec()));
        g.assert_finite(name)?;
        grads.push(g);
    }
    Ok((loss, grads))
}
