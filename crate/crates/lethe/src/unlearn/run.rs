//! The unlearning loop: adapter-only optimization over frozen base weights,
//! per-epoch privacy/utility snapshots, early stopping with rollback.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stream_sums;
use crate::autodiff::{Tape, Tensor};
use crate::corpus::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::metrics::{PrivacyReport, UtilityKind};
use crate::model::{
    forward_tokens, register, AdamW, LoraAdapter, LoraConfig, Parameters, SessionMode,
};
use crate::rng::derive_seed;
use crate::TokenSequence;

const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnlearnMode {
    /// Contrastive loss on inversion-synthesized pseudo samples.
    Pseudo,
    /// Contrastive loss on ground-truth samples (upper bound).
    Oracle,
    /// Full-sequence gradient ascent baseline.
    Ga,
}

impl UnlearnMode {
    pub fn name(&self) -> &'static str {
        match self {
            UnlearnMode::Pseudo => "pseudo",
            UnlearnMode::Oracle => "oracle",
            UnlearnMode::Ga => "ga",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pseudo" => Ok(UnlearnMode::Pseudo),
            "oracle" => Ok(UnlearnMode::Oracle),
            "ga" => Ok(UnlearnMode::Ga),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    /// Stop (and roll back one epoch) when utility degrades past this ratio
    /// against the pre-unlearning baseline (PPL ratio, or inverse accuracy
    /// ratio).
    pub utility_ratio_limit: f64,
    /// Stop successfully once E-Hit falls below this target.
    pub e_hit_target: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            utility_ratio_limit: 1.15,
            e_hit_target: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub mode: UnlearnMode,
    /// Context-preservation weight α.
    pub alpha: f64,
    /// Privacy-erasure weight β.
    pub beta: f64,
    /// Denominator guard ε.
    pub epsilon: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lora: LoraConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub weight_decay: f64,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            mode: UnlearnMode::Pseudo,
            alpha: 1.0,
            beta: 1.0,
            epsilon: 1e-8,
            lr: 1e-4,
            epochs: 10,
            batch_size: 16,
            lora: LoraConfig::default(),
            beta1: 0.9,
            beta2: 0.99,
            eps_adam: 1e-8,
            weight_decay: 0.0,
            early_stop: EarlyStopConfig::default(),
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("α and β must be ≥ 0".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("ε must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        self.lora.validate()
    }
}

/// Per-epoch record: mean stream losses over batches plus the evaluation
/// snapshot taken after the epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub l_priv: f64,
    pub l_gen: f64,
    pub objective: f64,
    pub report: PrivacyReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochBudget,
    PrivacyTarget,
    /// Utility budget exceeded; the run rolled back to the previous epoch's
    /// adapter.
    UtilityBudget,
    /// Numeric failure; the run rolled back to the last finite adapter.
    NumericAbort,
}

/// Outcome of one unlearning run. Base weights are untouched by contract:
/// `checksum_pre == checksum_post` always holds on return.
#[derive(Debug)]
pub struct UnlearnRun {
    pub mode: UnlearnMode,
    pub baseline: PrivacyReport,
    pub trace: Vec<EpochSnapshot>,
    pub adapter: LoraAdapter<f32>,
    pub stop: StopReason,
    pub checksum_pre: String,
    pub checksum_post: String,
    pub skipped_batches: usize,
}

/// Per-epoch evaluation callback (privacy + utility snapshot for the
/// current adapter).
pub type EvalHook<'a> = dyn Fn(&LoraAdapter<f32>) -> Result<PrivacyReport> + Sync + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    StopPrivacyTarget,
    StopUtilityBudget,
    Abort,
}

/// Pure early-stop rule over the trace so far.
pub fn early_stop_check(
    baseline: &PrivacyReport,
    trace: &[EpochSnapshot],
    cfg: &EarlyStopConfig,
) -> StopDecision {
    let Some(last) = trace.last() else {
        return StopDecision::Continue;
    };
    if let Some(u) = last.report.utility {
        if !u.value.is_finite() {
            return StopDecision::Abort;
        }
        if let Some(base) = baseline.utility {
            let ratio = match u.kind {
                UtilityKind::Ppl => u.value / base.value,
                UtilityKind::Accuracy => {
                    if u.value <= 0.0 {
                        f64::INFINITY
                    } else {
                        base.value / u.value
                    }
                }
            };
            if ratio > cfg.utility_ratio_limit {
                return StopDecision::StopUtilityBudget;
            }
        }
    }
    if let Some(e) = last.report.e_hit {
        if !e.is_finite() {
            return StopDecision::Abort;
        }
        if e < cfg.e_hit_target {
            return StopDecision::StopPrivacyTarget;
        }
    }
    StopDecision::Continue
}

/// Run selective unlearning (or the GA baseline) in the adapter subspace.
pub fn unlearn(
    params: &Parameters<f32>,
    data: &[TokenSequence],
    cfg: &UnlearnConfig,
    eval_hook: &EvalHook,
) -> Result<UnlearnRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("unlearn: empty data".into()));
    }
    for (i, seq) in data.iter().enumerate() {
        if seq.tokens.len() != seq.mask.len() {
            return Err(Error::Contract(format!("sample {i}: mask/tokens length mismatch")));
        }
        if seq.tokens.len() < 2 {
            return Err(Error::Contract(format!("sample {i}: too short")));
        }
        if cfg.mode != UnlearnMode::Ga && !seq.has_context_token() {
            return Err(Error::Contract(format!(
                "sample {i}: all tokens masked sensitive (no context stream)"
            )));
        }
    }

    let checksum_pre = params.checksum();
    let mut lora_cfg = cfg.lora.clone();
    lora_cfg.seed = derive_seed(cfg.seed, "lora-init");
    let mut adapter = LoraAdapter::init(&params.config, lora_cfg)?;
    let baseline = eval_hook(&adapter)?;

    let mut optim = AdamW::<f32>::new(cfg.beta1, cfg.beta2, cfg.eps_adam);
    let mut trace: Vec<EpochSnapshot> = Vec::new();
    let mut last_good = adapter.clone();
    let mut stop = StopReason::EpochBudget;
    let mut skipped_batches = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenSequence> = ids.iter().map(|&i| &data[i]).collect();
            match batch_step(params, &mut adapter, &batch, cfg, &mut optim) {
                Ok(Some((j, lp, lg))) => {
                    sums.0 += j;
                    sums.1 += lp;
                    sums.2 += lg;
                    batches += 1;
                }
                Ok(None) => skipped_batches += 1,
                Err(Error::Numeric(_)) => {
                    adapter = last_good.clone();
                    stop = StopReason::NumericAbort;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let report = eval_hook(&adapter)?;
        trace.push(EpochSnapshot {
            epoch,
            l_priv: sums.1 / batches.max(1) as f64,
            l_gen: sums.2 / batches.max(1) as f64,
            objective: sums.0 / batches.max(1) as f64,
            report,
        });
        match early_stop_check(&baseline, &trace, &cfg.early_stop) {
            StopDecision::Continue => {
                last_good = adapter.clone();
            }
            StopDecision::StopPrivacyTarget => {
                stop = StopReason::PrivacyTarget;
                break;
            }
            StopDecision::StopUtilityBudget => {
                adapter = last_good.clone();
                stop = StopReason::UtilityBudget;
                break;
            }
            StopDecision::Abort => {
                adapter = last_good.clone();
                stop = StopReason::NumericAbort;
                break;
            }
        }
    }

    let checksum_post = params.checksum();
    if checksum_pre != checksum_post {
        return Err(Error::Numeric("base parameters changed during unlearning".into()));
    }
    Ok(UnlearnRun {
        mode: cfg.mode,
        baseline,
        trace,
        adapter,
        stop,
        checksum_pre,
        checksum_post,
        skipped_batches,
    })
}

/// One pooled-batch optimizer step. Returns None for a skipped batch (no
/// context tokens anywhere — nothing to anchor).
fn batch_step(
    params: &Parameters<f32>,
    adapter: &mut LoraAdapter<f32>,
    batch: &[&TokenSequence],
    cfg: &UnlearnConfig,
    optim: &mut AdamW<f32>,
) -> Result<Option<(f64, f64, f64)>> {
    // Batch-level stream denominators (per-target masks drop position 0).
    let mut priv_count = 0usize;
    let mut gen_count = 0usize;
    for seq in batch {
        for &m in &seq.mask[1..] {
            if m == 1 {
                priv_count += 1;
            } else {
                gen_count += 1;
            }
        }
    }
    let total_targets = priv_count + gen_count;
    if cfg.mode != UnlearnMode::Ga && gen_count == 0 {
        return Ok(None);
    }

    let chunks: Vec<&[&TokenSequence]> = batch.chunks(GRAD_CHUNK).collect();
    let results: Vec<Result<ChunkOut>> = chunks
        .par_iter()
        .map(|chunk| chunk_grads(params, adapter, chunk, cfg, priv_count, gen_count, total_targets))
        .collect();

    let mut j = 0.0;
    let mut priv_sum = 0.0;
    let mut gen_sum = 0.0;
    let mut grads: Option<Vec<(String, Tensor<f32>)>> = None;
    for res in results {
        let out = res?;
        j += out.objective;
        priv_sum += out.priv_sum;
        gen_sum += out.gen_sum;
        match &mut grads {
            None => grads = Some(out.grads),
            Some(acc) => {
                for ((_, total), (_, add)) in acc.iter_mut().zip(out.grads) {
                    for (o, &g) in total.data_mut().iter_mut().zip(add.data()) {
                        *o += g;
                    }
                }
            }
        }
    }
    if !j.is_finite() {
        return Err(Error::Numeric(format!("unlearning objective is {j}")));
    }

    let mut named: std::collections::BTreeMap<String, Tensor<f32>> =
        grads.expect("non-empty batch").into_iter().collect();
    let mut updates: Vec<(String, &mut Tensor<f32>, Tensor<f32>)> = Vec::new();
    for (name, tensor) in adapter.tensors_mut() {
        if let Some(grad) = named.remove(&name) {
            grad.assert_finite(&name)?;
            updates.push((name, tensor, grad));
        }
    }
    optim.step(cfg.lr, cfg.weight_decay, &mut updates);

    let l_priv = priv_sum / (priv_count as f64 + cfg.epsilon);
    let l_gen = gen_sum / (gen_count as f64 + cfg.epsilon);
    Ok(Some((j, l_priv, l_gen)))
}

struct ChunkOut {
    objective: f64,
    priv_sum: f64,
    gen_sum: f64,
    grads: Vec<(String, Tensor<f32>)>,
}

fn chunk_grads(
    params: &Parameters<f32>,
    adapter: &LoraAdapter<f32>,
    chunk: &[&TokenSequence],
    cfg: &UnlearnConfig,
    priv_count: usize,
    gen_count: usize,
    total_targets: usize,
) -> Result<ChunkOut> {
    let mut tape = Tape::<f32>::new();
    let vars = register(&mut tape, params, Some(adapter), SessionMode::TrainAdapter)?;

    let mut loss_var = None;
    let mut priv_sum_v = 0.0f64;
    let mut gen_sum_v = 0.0f64;
    for seq in chunk {
        let inputs = &seq.tokens[..seq.tokens.len() - 1];
        let targets: Vec<usize> = seq.tokens[1..].iter().map(|&t| t as usize).collect();
        let mask = &seq.mask[1..];
        let logits = forward_tokens(&mut tape, &vars, inputs)?;
        let ce = tape.cross_entropy_rows(logits, &targets)?;

        let part = match cfg.mode {
            UnlearnMode::Ga => {
                let n = targets.len();
                let s = tape.weighted_sum(ce, vec![1.0f32; n])?;
                gen_sum_v += tape.value(s).item() as f64;
                tape.scale(s, -1.0 / total_targets as f32)
            }
            _ => {
                let (priv_sum, gen_sum, _, _) = stream_sums(&mut tape, ce, mask)?;
                priv_sum_v += tape.value(priv_sum).item() as f64;
                gen_sum_v += tape.value(gen_sum).item() as f64;
                let a = tape.scale(
                    gen_sum,
                    (cfg.alpha / (gen_count as f64 + cfg.epsilon)) as f32,
                );
                let b = tape.scale(
                    priv_sum,
                    (-cfg.beta / (priv_count as f64 + cfg.epsilon)) as f32,
                );
                tape.add(a, b)?
            }
        };
        loss_var = Some(match loss_var {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    let loss_var = loss_var.expect("non-empty chunk");
    let objective = tape.value(loss_var).item() as f64;
    if !objective.is_finite() {
        return Err(Error::Numeric("chunk objective non-finite".into()));
    }
    tape.backward(loss_var)?;

    let mut grads = Vec::with_capacity(vars.trainables.len());
    for (name, var) in &vars.trainables {
        let g = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape().to_vec()));
        grads.push((name.clone(), g));
    }
    Ok(ChunkOut {
        objective,
        priv_sum: priv_sum_v,
        gen_sum: gen_sum_v,
        grads,
    })
}

/// Flat per-epoch trace row (structured-text run log).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub l_priv: f64,
    pub l_gen: f64,
    pub objective: f64,
    pub utility: Option<f64>,
    pub err: f64,
    pub frs: f64,
    pub s_exp: f64,
    pub e_hit: Option<f64>,
}

impl From<&EpochSnapshot> for TraceRow {
    fn from(s: &EpochSnapshot) -> Self {
        TraceRow {
            epoch: s.epoch,
            l_priv: s.l_priv,
            l_gen: s.l_gen,
            objective: s.objective,
            utility: s.report.utility.map(|u| u.value),
            err: s.report.err,
            frs: s.report.frs,
            s_exp: s.report.s_exp,
            e_hit: s.report.e_hit,
        }
    }
}

pub fn write_trace(path: &Path, trace: &[EpochSnapshot]) -> Result<()> {
    let rows: Vec<TraceRow> = trace.iter().map(TraceRow::from).collect();
    write_jsonl(path, &rows)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    read_jsonl(path)
}
