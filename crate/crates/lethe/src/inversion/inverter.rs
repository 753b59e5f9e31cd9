//! The inverter: a small decoder-only transformer conditioned on a soft
//! embedding of the target model's final-position distribution. The soft
//! embedding is a probability-weighted sum of the decoder's own word
//! embeddings (weights routed through a vocabulary alignment map), passed
//! through a learnable linear projection and prepended as a virtual token.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{precompute_logits, LogitRecord};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    embed_tokens, forward_embedded, register, AdamW, ModelConfig, ModelVars, Parameters,
    SessionMode,
};
use crate::rng::derive_seed;
use crate::tokenizer;

/// Maps each target-vocabulary token to one or more inverter-vocabulary
/// tokens with weights summing to 1. With the shared byte tokenizer the map
/// is the identity; the abstraction stays for mismatched vocabularies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    per_target: Vec<Vec<(usize, f32)>>,
}

impl AlignmentMap {
    pub fn identity(vocab: usize) -> Self {
        AlignmentMap {
            per_target: (0..vocab).map(|v| vec![(v, 1.0)]).collect(),
        }
    }

    pub fn new(per_target: Vec<Vec<(usize, f32)>>) -> Self {
        AlignmentMap { per_target }
    }

    /// Totality: every target token maps to at least one inverter token
    /// within bounds.
    pub fn validate(&self, target_vocab: usize, inverter_vocab: usize) -> Result<()> {
        if self.per_target.len() != target_vocab {
            return Err(Error::Config(format!(
                "alignment covers {} of {target_vocab} target tokens",
                self.per_target.len()
            )));
        }
        for (v, routes) in self.per_target.iter().enumerate() {
            if routes.is_empty() {
                return Err(Error::Config(format!("target token {v} has no alignment")));
            }
            for &(j, w) in routes {
                if j >= inverter_vocab {
                    return Err(Error::Config(format!("alignment target {j} out of vocab")));
                }
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::Config("alignment weight must be ≥ 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Push a probability vector over the target vocab through the map.
    pub fn route(&self, probs: &[f32], inverter_vocab: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; inverter_vocab];
        for (v, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for &(j, w) in &self.per_target[v] {
                out[j] += p * w;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverterConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Reconstruction cap in text tokens.
    pub max_len: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for InverterConfig {
    fn default() -> Self {
        InverterConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            context_length: 128,
            epochs: 30,
            batch_size: 16,
            lr: 5e-4,
            max_len: 64,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl InverterConfig {
    fn decoder_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context_length: self.context_length,
            seed: derive_seed(self.seed, "inverter-decoder"),
        }
    }
}

/// Trained inverter state.
#[derive(Clone, Debug)]
pub struct Inverter {
    pub decoder: Parameters<f32>,
    /// d×d projection applied to the soft embedding before decoding.
    pub proj: Tensor<f32>,
    pub alignment: AlignmentMap,
    pub config: InverterConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InverterReport {
    pub epoch_ce: Vec<f64>,
    pub holdout_ce: Option<f64>,
    /// ln V — the analytic ceiling a trained inverter must beat.
    pub uniform_ceiling: f64,
}

/// The conditioning vector for one distribution: routed probability weights
/// blend the decoder's word embeddings, then the projection is applied.
/// Linear in exp(log_probs) end to end.
pub fn soft_embed(
    log_probs: &[f32],
    alignment: &AlignmentMap,
    embeddings: &Tensor<f32>,
    proj: &Tensor<f32>,
) -> Result<Vec<f32>> {
    let inv_vocab = embeddings.rows();
    let d = embeddings.cols();
    if proj.rows() != d || proj.cols() != d {
        return Err(Error::Shape("projection must be d×d".into()));
    }
    let probs: Vec<f32> = log_probs.iter().map(|&lp| lp.exp()).collect();
    let routed = alignment.route(&probs, inv_vocab);
    let mut soft = vec![0.0f32; d];
    for (v, &w) in routed.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &e) in soft.iter_mut().zip(embeddings.row(v)) {
            *o += w * e;
        }
    }
    let mut out = vec![0.0f32; d];
    crate::autodiff::mm_nn(&soft, proj.data(), &mut out, 1, d, d);
    Ok(out)
}

/// Build the taped input embeddings [virtual token; BOS; text tokens].
fn build_embeds(
    tape: &mut Tape<f32>,
    vars: &ModelVars,
    proj_var: Var,
    routed: &[f32],
    text_tokens: &[u32],
) -> Result<Var> {
    let soft = tape.weighted_row_sum(vars.tok_emb_var(), routed.to_vec())?;
    let cond = tape.matmul(soft, proj_var)?;
    let pos0 = tape.gather_rows(vars.pos_emb_var(), vec![0])?;
    let cond_row = tape.add(cond, pos0)?;
    let mut seq = Vec::with_capacity(text_tokens.len() + 1);
    seq.push(tokenizer::BOS);
    seq.extend_from_slice(text_tokens);
    let tok_rows = embed_tokens(tape, vars, &seq, 1)?;
    tape.concat_rows(&[cond_row, tok_rows])
}

/// Teacher-forced training of the inverter on (text, log-probs) pairs.
pub fn train_inverter(
    records: &[LogitRecord],
    cfg: &InverterConfig,
    target_vocab: usize,
) -> Result<(Inverter, InverterReport)> {
    let distinct: std::collections::BTreeSet<&str> =
        records.iter().map(|r| r.text.as_str()).collect();
    if distinct.len() < 2 {
        return Err(Error::Contract("train_inverter: need ≥ 2 distinct records".into()));
    }
    let decoder_cfg = cfg.decoder_config(target_vocab);
    decoder_cfg.validate()?;
    let alignment = AlignmentMap::identity(target_vocab);
    alignment.validate(target_vocab, target_vocab)?;
    for r in records {
        r.validate(target_vocab)?;
        // cond + BOS + text + EOS must fit the decoder context.
        if r.text.len() + 3 > cfg.context_length {
            return Err(Error::Contract(format!(
                "record text too long for inverter context: {} bytes",
                r.text.len()
            )));
        }
    }

    let decoder: Parameters<f32> = crate::model::init_model(&decoder_cfg)?;
    let mut proj = Tensor::zeros(vec![cfg.d_model, cfg.d_model]);
    for i in 0..cfg.d_model {
        proj.data_mut()[i * cfg.d_model + i] = 1.0;
    }
    let mut inverter = Inverter {
        decoder,
        proj,
        alignment,
        config: cfg.clone(),
    };

    // Cache routed weights per record.
    let routed: Vec<Vec<f32>> = records
        .iter()
        .map(|r| {
            let probs: Vec<f32> = r.log_probs.iter().map(|&lp| lp.exp()).collect();
            inverter.alignment.route(&probs, target_vocab)
        })
        .collect();

    // Holdout split.
    let mut ids: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "holdout"));
    ids.shuffle(&mut rng);
    let n_holdout = ((records.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let (holdout_ids, train_ids) = ids.split_at(n_holdout);

    let mut optim = AdamW::<f32>::new(0.9, 0.99, 1e-8);
    let mut epoch_ce = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train_ids.to_vec();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let loss = inverter_step(&mut inverter, records, &routed, batch, cfg.lr, &mut optim)
                .map_err(|e| match e {
                    Error::Numeric(d) => Error::Training { epoch, detail: d },
                    other => other,
                })?;
            sum += loss;
            batches += 1;
        }
        epoch_ce.push(sum / batches.max(1) as f64);
    }

    let holdout_ce = if holdout_ids.is_empty() {
        None
    } else {
        Some(inverter_ce(&inverter, records, &routed, holdout_ids)?)
    };
    let report = InverterReport {
        epoch_ce,
        holdout_ce,
        uniform_ceiling: (target_vocab as f64).ln(),
    };
    Ok((inverter, report))
}

/// Mean teacher-forced CE over a record subset.
pub fn inverter_ce(
    inverter: &Inverter,
    records: &[LogitRecord],
    routed: &[Vec<f32>],
    ids: &[usize],
) -> Result<f64> {
    let per: Vec<Result<(f64, usize)>> = ids
        .par_iter()
        .map(|&i| {
            let r = &records[i];
            let mut tape = Tape::new();
            let vars = register(&mut tape, &inverter.decoder, None, SessionMode::Inference)?;
            let proj_var = tape.leaf(inverter.proj.clone(), false);
            let text_tokens: Vec<u32> = r.text.bytes().map(|b| b as u32).collect();
            let emb = build_embeds(&mut tape, &vars, proj_var, &routed[i], &text_tokens)?;
            let logits = forward_embedded(&mut tape, &vars, emb)?;
            let (targets, weights) = teacher_targets(&text_tokens, 1.0);
            let ce = tape.cross_entropy_rows(logits, &targets)?;
            let loss = tape.weighted_sum(ce, weights)?;
            Ok((tape.value(loss).item() as f64, text_tokens.len() + 1))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in per {
        let (s, c) = r?;
        total += s;
        count += c;
    }
    Ok(total / count.max(1) as f64)
}

/// Targets for rows [cond, BOS, b0..b_{m-1}]: row 0 is excluded (weight 0),
/// rows 1..=m predict [b0..b_{m-1}, EOS].
fn teacher_targets(text_tokens: &[u32], weight: f32) -> (Vec<usize>, Vec<f32>) {
    let m = text_tokens.len();
    let mut targets = Vec::with_capacity(m + 2);
    targets.push(tokenizer::BOS as usize); // dummy for the cond row
    for &t in text_tokens {
        targets.push(t as usize);
    }
    targets.push(tokenizer::EOS as usize);
    let mut weights = vec![weight; m + 2];
    weights[0] = 0.0;
    (targets, weights)
}

fn inverter_step(
    inverter: &mut Inverter,
    records: &[LogitRecord],
    routed: &[Vec<f32>],
    batch: &[usize],
    lr: f64,
    optim: &mut AdamW<f32>,
) -> Result<f64> {
    let total_targets: usize = batch.iter().map(|&i| records[i].text.len() + 1).sum();
    let chunks: Vec<&[usize]> = batch.chunks(8).collect();
    let results: Vec<Result<(f64, Vec<(String, Tensor<f32>)>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = register(&mut tape, &inverter.decoder, None, SessionMode::TrainBase)?;
            let proj_var = tape.leaf(inverter.proj.clone(), true);
            let mut loss_var = None;
            for &i in chunk.iter() {
                let r = &records[i];
                let text_tokens: Vec<u32> = r.text.bytes().map(|b| b as u32).collect();
                let emb = build_embeds(&mut tape, &vars, proj_var, &routed[i], &text_tokens)?;
                let logits = forward_embedded(&mut tape, &vars, emb)?;
                let (targets, mut weights) = teacher_targets(&text_tokens, 1.0);
                for w in &mut weights {
                    *w /= total_targets as f32;
                }
                let ce = tape.cross_entropy_rows(logits, &targets)?;
                let part = tape.weighted_sum(ce, weights)?;
                loss_var = Some(match loss_var {
                    None => part,
                    Some(acc) => tape.add(acc, part)?,
                });
            }
            let loss_var = loss_var.expect("non-empty chunk");
            let loss = tape.value(loss_var).item() as f64;
            tape.backward(loss_var)?;
            let mut grads = Vec::with_capacity(vars.trainables.len() + 1);
            for (name, var) in &vars.trainables {
                let g = tape
                    .grad(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape().to_vec()));
                grads.push((name.clone(), g));
            }
            let pg = tape
                .grad(proj_var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inverter.proj.shape().to_vec()));
            grads.push(("proj".to_string(), pg));
            Ok((loss, grads))
        })
        .collect();

    let mut loss = 0.0;
    let mut acc: Option<Vec<(String, Tensor<f32>)>> = None;
    for r in results {
        let (l, grads) = r?;
        loss += l;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for ((_, t), (_, g)) in a.iter_mut().zip(grads) {
                    for (o, &v) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("inverter loss is {loss}")));
    }
    let mut named: BTreeMap<String, Tensor<f32>> = acc.expect("non-empty batch").into_iter().collect();
    let mut updates: Vec<(String, &mut Tensor<f32>, Tensor<f32>)> = Vec::new();
    for (name, tensor) in inverter.decoder.tensors_mut() {
        if let Some(g) = named.remove(&name) {
            g.assert_finite(&name)?;
            updates.push((name, tensor, g));
        }
    }
    if let Some(g) = named.remove("proj") {
        g.assert_finite("proj")?;
        updates.push(("proj".to_string(), &mut inverter.proj, g));
    }
    optim.step(lr, 0.0, &mut updates);
    Ok(loss)
}

const INVERTER_MAGIC: &[u8; 8] = b"LETHEIV1";

/// Persist the inverter (config + alignment as JSON headers, tensors as raw
/// little-endian bytes; bit-exact round trip).
pub fn save_inverter(path: &std::path::Path, inverter: &Inverter) -> Result<()> {
    use crate::model::checkpoint as ck;
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(INVERTER_MAGIC)?;
    ck::write_str(&mut w, &serde_json::to_string(&inverter.config)?)?;
    ck::write_str(&mut w, &serde_json::to_string(&inverter.decoder.config)?)?;
    ck::write_str(&mut w, &serde_json::to_string(&inverter.alignment)?)?;
    let tensors = inverter.decoder.tensors();
    ck::write_u32(&mut w, tensors.len() as u32)?;
    for (name, t) in tensors {
        ck::write_str(&mut w, &name)?;
        ck::write_tensor(&mut w, t)?;
    }
    ck::write_tensor(&mut w, &inverter.proj)?;
    w.flush()?;
    Ok(())
}

pub fn load_inverter(path: &std::path::Path) -> Result<Inverter> {
    use crate::model::checkpoint as ck;
    use std::io::Read;
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != INVERTER_MAGIC {
        return Err(Error::Artifact(format!(
            "{}: not an inverter artifact",
            path.display()
        )));
    }
    let config: InverterConfig = serde_json::from_str(&ck::read_str(&mut r)?)?;
    let decoder_cfg: ModelConfig = serde_json::from_str(&ck::read_str(&mut r)?)?;
    let alignment: AlignmentMap = serde_json::from_str(&ck::read_str(&mut r)?)?;
    let mut decoder: Parameters<f32> = crate::model::init_model(&decoder_cfg)?;
    let n = ck::read_u32(&mut r)? as usize;
    {
        let mut by_name: BTreeMap<String, &mut Tensor<f32>> =
            decoder.tensors_mut().into_iter().collect();
        for _ in 0..n {
            let name = ck::read_str(&mut r)?;
            let t = ck::read_tensor(&mut r)?;
            let slot = by_name
                .get_mut(&name)
                .ok_or_else(|| Error::Artifact(format!("unknown inverter tensor '{name}'")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Artifact(format!("inverter tensor '{name}' shape mismatch")));
            }
            **slot = t;
        }
    }
    let proj = ck::read_tensor(&mut r)?;
    Ok(Inverter {
        decoder,
        proj,
        alignment,
        config,
    })
}

/// Greedy reconstruction from one log-probability vector.
pub fn invert(inverter: &Inverter, log_probs: &[f32], max_len: usize) -> Result<String> {
    let vocab = inverter.decoder.config.vocab_size;
    let probs: Vec<f32> = log_probs.iter().map(|&lp| lp.exp()).collect();
    if probs.len() != vocab {
        return Err(Error::Shape(format!(
            "log_probs length {} vs vocab {vocab}",
            probs.len()
        )));
    }
    let routed = inverter.alignment.route(&probs, vocab);
    let mut text_tokens: Vec<u32> = Vec::new();
    let cap = max_len.min(inverter.decoder.config.context_length.saturating_sub(3));
    loop {
        let mut tape = Tape::new();
        let vars = register(&mut tape, &inverter.decoder, None, SessionMode::Inference)?;
        let proj_var = tape.leaf(inverter.proj.clone(), false);
        let emb = build_embeds(&mut tape, &vars, proj_var, &routed, &text_tokens)?;
        let logits = forward_embedded(&mut tape, &vars, emb)?;
        let n = tape.value(logits).rows();
        let last = tape.value(logits).row(n - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        if best as u32 == tokenizer::EOS || best >= 256 {
            break;
        }
        text_tokens.push(best as u32);
        if text_tokens.len() >= cap {
            break;
        }
    }
    Ok(tokenizer::decode(&text_tokens))
}

/// Stage-2 synthesis: query the target with entity-swapped candidates,
/// decode each final-position distribution back to text.
pub fn synthesize_pseudo(
    target: &Parameters<f32>,
    inverter: &Inverter,
    candidates: &[String],
) -> Result<Vec<String>> {
    let records = precompute_logits(target, candidates)?;
    let out: Vec<Result<String>> = records
        .par_iter()
        .map(|r| invert(inverter, &r.log_probs, inverter.config.max_len))
        .collect();
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn one_hot(v: usize, vocab: usize) -> Vec<f32> {
        // log of a (numerically) one-hot distribution
        let mut lp = vec![-60.0f32; vocab];
        lp[v] = 0.0;
        lp
    }

    #[test]
    fn soft_embed_one_hot_selects_projected_row() {
        let vocab = 8;
        let d = 4;
        let mut emb = Tensor::zeros(vec![vocab, d]);
        for i in 0..vocab * d {
            emb.data_mut()[i] = (i as f32 * 0.1).sin();
        }
        let mut proj = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            proj.data_mut()[i * d + i] = 2.0; // 2·identity
        }
        let align = AlignmentMap::identity(vocab);
        let out = soft_embed(&one_hot(3, vocab), &align, &emb, &proj).unwrap();
        for (o, &e) in out.iter().zip(emb.row(3)) {
            assert!((o - 2.0 * e).abs() < 1e-4);
        }
    }

    #[test]
    fn soft_embed_uniform_is_projected_mean() {
        let vocab = 6;
        let d = 3;
        let mut emb = Tensor::zeros(vec![vocab, d]);
        for i in 0..vocab * d {
            emb.data_mut()[i] = i as f32;
        }
        let mut proj = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            proj.data_mut()[i * d + i] = 1.0;
        }
        let lp = vec![-(vocab as f32).ln(); vocab];
        let out = soft_embed(&lp, &AlignmentMap::identity(vocab), &emb, &proj).unwrap();
        for j in 0..d {
            let mean: f32 = (0..vocab).map(|v| emb.row(v)[j]).sum::<f32>() / vocab as f32;
            assert!((out[j] - mean).abs() < 1e-4);
        }
    }

    #[test]
    fn soft_embed_is_linear_in_probabilities() {
        let vocab = 5;
        let d = 3;
        let mut emb = Tensor::zeros(vec![vocab, d]);
        for i in 0..vocab * d {
            emb.data_mut()[i] = (i as f32 * 0.37).cos();
        }
        let mut proj = Tensor::zeros(vec![d, d]);
        for i in 0..d * d {
            proj.data_mut()[i] = (i as f32 * 0.21).sin();
        }
        let align = AlignmentMap::identity(vocab);
        // mix of two one-hots equals the convex mix of their embeddings
        let a = one_hot(1, vocab);
        let b = one_hot(4, vocab);
        let mixed: Vec<f32> = (0..vocab)
            .map(|v| (0.3 * (a[v].exp()) + 0.7 * (b[v].exp())).ln())
            .collect();
        let ea = soft_embed(&a, &align, &emb, &proj).unwrap();
        let eb = soft_embed(&b, &align, &emb, &proj).unwrap();
        let em = soft_embed(&mixed, &align, &emb, &proj).unwrap();
        for j in 0..d {
            assert!((em[j] - (0.3 * ea[j] + 0.7 * eb[j])).abs() < 1e-4);
        }
    }

    #[test]
    fn overfit_single_pair_reconstructs_exactly() {
        let target = init_model::<f32>(&ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            seed: 40,
            ..ModelConfig::default()
        })
        .unwrap();
        let texts = vec!["copy me out".to_string(), "other text".to_string()];
        let records = precompute_logits(&target, &texts).unwrap();
        // Repeat the pair so the tiny decoder memorizes it fast.
        let mut training: Vec<LogitRecord> = Vec::new();
        for _ in 0..30 {
            training.extend(records.iter().cloned());
        }
        let cfg = InverterConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            epochs: 30,
            batch_size: 8,
            lr: 3e-3,
            max_len: 32,
            holdout_fraction: 0.0,
            seed: 3,
        };
        let (inverter, report) =
            train_inverter(&training, &cfg, target.config.vocab_size).unwrap();
        assert!(report.epoch_ce.last().unwrap() < &0.1, "{:?}", report.epoch_ce);
        let decoded = invert(&inverter, &records[0].log_probs, 32).unwrap();
        assert_eq!(decoded, "copy me out");
        // Determinism: same distribution, same reconstruction.
        let again = invert(&inverter, &records[0].log_probs, 32).unwrap();
        assert_eq!(decoded, again);
    }

    #[test]
    fn degenerate_eos_distribution_yields_empty_text() {
        let target_cfg = ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            seed: 41,
            ..ModelConfig::default()
        };
        let target = init_model::<f32>(&target_cfg).unwrap();
        let texts = vec!["aa".to_string(), "bb".to_string()];
        let records = precompute_logits(&target, &texts).unwrap();
        let cfg = InverterConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            max_len: 16,
            holdout_fraction: 0.0,
            seed: 4,
        };
        let (inverter, _) = train_inverter(&records, &cfg, target_cfg.vocab_size).unwrap();
        let eos_dist = {
            let mut lp = vec![-60.0f32; target_cfg.vocab_size];
            lp[tokenizer::EOS as usize] = 0.0;
            lp
        };
        let out = invert(&inverter, &eos_dist, 16).unwrap();
        assert!(out.chars().count() <= 16, "short, no crash: '{out}'");
    }

    #[test]
    fn zero_epochs_leaves_decoder_at_init() {
        let target = init_model::<f32>(&ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            seed: 42,
            ..ModelConfig::default()
        })
        .unwrap();
        let records = precompute_logits(&target, &["one".to_string(), "two".to_string()]).unwrap();
        let cfg = InverterConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            epochs: 0,
            holdout_fraction: 0.0,
            seed: 5,
            ..InverterConfig::default()
        };
        let (inverter, _) = train_inverter(&records, &cfg, target.config.vocab_size).unwrap();
        let fresh: Parameters<f32> =
            init_model(&cfg.decoder_config(target.config.vocab_size)).unwrap();
        assert_eq!(inverter.decoder.checksum(), fresh.checksum());
    }

    #[test]
    fn synthesize_preserves_count_and_determinism() {
        let target = init_model::<f32>(&ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            seed: 43,
            ..ModelConfig::default()
        })
        .unwrap();
        let records =
            precompute_logits(&target, &["alpha".to_string(), "beta".to_string()]).unwrap();
        let cfg = InverterConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            max_len: 16,
            holdout_fraction: 0.0,
            seed: 6,
        };
        let (inverter, _) = train_inverter(&records, &cfg, target.config.vocab_size).unwrap();
        let candidates = vec!["gamma".to_string(), "delta".to_string(), "epsilon".to_string()];
        let a = synthesize_pseudo(&target, &inverter, &candidates).unwrap();
        let b = synthesize_pseudo(&target, &inverter, &candidates).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert!(synthesize_pseudo(&target, &inverter, &[]).unwrap().is_empty());
    }

    #[test]
    fn single_distinct_record_is_rejected() {
        let cfg = InverterConfig::default();
        let r = LogitRecord {
            text: "same".into(),
            log_probs: vec![-(259.0f32).ln(); 259],
        };
        assert!(train_inverter(&[r.clone(), r], &cfg, 259).is_err());
    }
}
