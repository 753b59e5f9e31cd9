//! A small decoder-only autoregressive transformer with optional LoRA
//! adapters. Pre-norm blocks, learned positional embeddings, no linear
//! biases, GELU MLP. Sized to train on a CPU in minutes while still
//! memorizing replicated strings.

pub(crate) mod checkpoint;
mod decode;
mod eval;
mod lora;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decode::{generate, DecodeConfig, DecodeMode};
pub use eval::{label_accuracy, mean_token_ce, perplexity};
pub use lora::{FactorPair, LoraAdapter, LoraConfig, TargetSelector, TargetSite};
pub use train::{train_lm, AdamW, Schedule, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer;

/// Architecture and initialization parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            context_length: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_length < 2 {
            return Err(Error::Config("context_length must be ≥ 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// One transformer block's weights. Linear weights are stored (in × out).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<E> {
    pub attn_q: Tensor<E>,
    pub attn_k: Tensor<E>,
    pub attn_v: Tensor<E>,
    pub attn_o: Tensor<E>,
    pub mlp_up: Tensor<E>,
    pub mlp_down: Tensor<E>,
    pub ln1_gain: Tensor<E>,
    pub ln1_bias: Tensor<E>,
    pub ln2_gain: Tensor<E>,
    pub ln2_bias: Tensor<E>,
}

/// Full model state. `frozen` marks the base weights immutable — training
/// refuses to run and unlearning verifies the checksum is stable.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<E> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<E>,
    pub pos_emb: Tensor<E>,
    pub layers: Vec<LayerParams<E>>,
    pub ln_f_gain: Tensor<E>,
    pub ln_f_bias: Tensor<E>,
    pub head: Tensor<E>,
    pub frozen: bool,
}

/// Deterministic initialization from the config seed.
pub fn init_model<E: Scalar>(config: &ModelConfig) -> Result<Parameters<E>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let v = config.vocab_size;
    let m = config.mlp_dim();
    let std = 0.02;

    let tok_emb = Tensor::randn(vec![v, d], std, &mut rng);
    let pos_emb = Tensor::randn(vec![config.context_length, d], std, &mut rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            attn_q: Tensor::randn(vec![d, d], std, &mut rng),
            attn_k: Tensor::randn(vec![d, d], std, &mut rng),
            attn_v: Tensor::randn(vec![d, d], std, &mut rng),
            // Zero-init output projections so each block starts as identity.
            attn_o: Tensor::zeros(vec![d, d]),
            mlp_up: Tensor::randn(vec![d, m], std, &mut rng),
            mlp_down: Tensor::zeros(vec![m, d]),
            ln1_gain: Tensor::filled(vec![d], E::one()),
            ln1_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::filled(vec![d], E::one()),
            ln2_bias: Tensor::zeros(vec![d]),
        });
    }
    let ln_f_gain = Tensor::filled(vec![d], E::one());
    let ln_f_bias = Tensor::zeros(vec![d]);
    let head = Tensor::randn(vec![d, v], std, &mut rng);

    Ok(Parameters {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        ln_f_gain,
        ln_f_bias,
        head,
        frozen: false,
    })
}

impl<E: Scalar> Parameters<E> {
    /// Named base tensors in a fixed order (optimizer state, checkpoints,
    /// and checksums all rely on this order).
    pub fn tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_q"), &l.attn_q));
            out.push((format!("layer{i}.attn_k"), &l.attn_k));
            out.push((format!("layer{i}.attn_v"), &l.attn_v));
            out.push((format!("layer{i}.attn_o"), &l.attn_o));
            out.push((format!("layer{i}.mlp_up"), &l.mlp_up));
            out.push((format!("layer{i}.mlp_down"), &l.mlp_down));
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
        }
        out.push(("ln_f_gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &self.ln_f_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn_q"), &mut l.attn_q));
            out.push((format!("layer{i}.attn_k"), &mut l.attn_k));
            out.push((format!("layer{i}.attn_v"), &mut l.attn_v));
            out.push((format!("layer{i}.attn_o"), &mut l.attn_o));
            out.push((format!("layer{i}.mlp_up"), &mut l.mlp_up));
            out.push((format!("layer{i}.mlp_down"), &mut l.mlp_down));
            out.push((format!("layer{i}.ln1_gain"), &mut l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &mut l.ln1_bias));
            out.push((format!("layer{i}.ln2_gain"), &mut l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &mut l.ln2_bias));
        }
        out.push(("ln_f_gain".to_string(), &mut self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &mut self.ln_f_bias));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over all base weights (exact element bytes). Constant across
    /// an unlearning run — only adapters may change.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.tensors() {
            hasher.update(name.as_bytes());
            for &v in t.data() {
                hasher.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Parameters<f32> {
    pub fn to_f64(&self) -> Parameters<f64> {
        Parameters {
            config: self.config.clone(),
            tok_emb: self.tok_emb.to_f64(),
            pos_emb: self.pos_emb.to_f64(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_q: l.attn_q.to_f64(),
                    attn_k: l.attn_k.to_f64(),
                    attn_v: l.attn_v.to_f64(),
                    attn_o: l.attn_o.to_f64(),
                    mlp_up: l.mlp_up.to_f64(),
                    mlp_down: l.mlp_down.to_f64(),
                    ln1_gain: l.ln1_gain.to_f64(),
                    ln1_bias: l.ln1_bias.to_f64(),
                    ln2_gain: l.ln2_gain.to_f64(),
                    ln2_bias: l.ln2_bias.to_f64(),
                })
                .collect(),
            ln_f_gain: self.ln_f_gain.to_f64(),
            ln_f_bias: self.ln_f_bias.to_f64(),
            head: self.head.to_f64(),
            frozen: self.frozen,
        }
    }
}

/// How leaves are registered on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionMode {
    /// No gradients anywhere (decoding, evaluation).
    Inference,
    /// Base weights trainable, adapter absent or constant.
    TrainBase,
    /// Base weights constant, adapter factors trainable.
    TrainAdapter,
}

/// Tape handles for one registered model (and optional adapter). Reused for
/// every forward on the same tape, so a whole batch shares one set of
/// effective-weight nodes.
pub struct ModelVars {
    pub config: ModelConfig,
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    ln_f: (Var, Var),
    head: Var,
    /// Trainable leaves in registration order, named for the optimizer.
    pub trainables: Vec<(String, Var)>,
}

impl ModelVars {
    /// Token-embedding table leaf (the inverter blends its rows).
    pub fn tok_emb_var(&self) -> Var {
        self.tok_emb
    }

    /// Positional-embedding table leaf.
    pub fn pos_emb_var(&self) -> Var {
        self.pos_emb
    }
}

struct LayerVars {
    attn_q: Var,
    attn_k: Var,
    attn_v: Var,
    attn_o: Var,
    mlp_up: Var,
    mlp_down: Var,
    ln1: (Var, Var),
    ln2: (Var, Var),
}

/// Register model weights (and LoRA deltas) as tape leaves and build the
/// effective weights W + (α/r)·down·up for adapted sites.
pub fn register<E: Scalar>(
    tape: &mut Tape<E>,
    params: &Parameters<E>,
    adapter: Option<&LoraAdapter<E>>,
    mode: SessionMode,
) -> Result<ModelVars> {
    if mode == SessionMode::TrainBase && params.frozen {
        return Err(Error::Contract("base parameters are frozen".into()));
    }
    let train_base = mode == SessionMode::TrainBase;
    let train_adapter = mode == SessionMode::TrainAdapter;
    let mut trainables = Vec::new();

    let mut leaf = |tape: &mut Tape<E>, name: String, t: &Tensor<E>, trainable: bool| {
        let v = tape.leaf(t.clone(), trainable);
        if trainable {
            trainables.push((name, v));
        }
        v
    };

    let tok_emb = leaf(tape, "tok_emb".into(), &params.tok_emb, train_base);
    let pos_emb = leaf(tape, "pos_emb".into(), &params.pos_emb, train_base);

    let scale = adapter.map(|a| a.scaling()).unwrap_or(0.0);
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, l) in params.layers.iter().enumerate() {
        let mut site_var = |tape: &mut Tape<E>,
                            site: TargetSite,
                            base: &Tensor<E>|
         -> Result<Var> {
            let base_var = leaf(
                tape,
                format!("layer{i}.{}", site.name()),
                base,
                train_base,
            );
            let Some(pair) = adapter.and_then(|a| a.pair(i, site)) else {
                return Ok(base_var);
            };
            let down = leaf(
                tape,
                format!("layer{i}.{}.down", site.name()),
                &pair.down,
                train_adapter,
            );
            let up = leaf(
                tape,
                format!("layer{i}.{}.up", site.name()),
                &pair.up,
                train_adapter,
            );
            let delta = tape.matmul(down, up)?;
            let scaled = tape.scale(delta, E::from_f64_lossy(scale));
            tape.add(base_var, scaled)
        };

        let attn_q = site_var(tape, TargetSite::AttnQ, &l.attn_q)?;
        let attn_k = site_var(tape, TargetSite::AttnK, &l.attn_k)?;
        let attn_v = site_var(tape, TargetSite::AttnV, &l.attn_v)?;
        let attn_o = site_var(tape, TargetSite::AttnO, &l.attn_o)?;
        let mlp_up = site_var(tape, TargetSite::MlpUp, &l.mlp_up)?;
        let mlp_down = site_var(tape, TargetSite::MlpDown, &l.mlp_down)?;
        let ln1 = (
            leaf(tape, format!("layer{i}.ln1_gain"), &l.ln1_gain, train_base),
            leaf(tape, format!("layer{i}.ln1_bias"), &l.ln1_bias, train_base),
        );
        let ln2 = (
            leaf(tape, format!("layer{i}.ln2_gain"), &l.ln2_gain, train_base),
            leaf(tape, format!("layer{i}.ln2_bias"), &l.ln2_bias, train_base),
        );
        layers.push(LayerVars {
            attn_q,
            attn_k,
            attn_v,
            attn_o,
            mlp_up,
            mlp_down,
            ln1,
            ln2,
        });
    }
    let ln_f = (
        leaf(tape, "ln_f_gain".into(), &params.ln_f_gain, train_base),
        leaf(tape, "ln_f_bias".into(), &params.ln_f_bias, train_base),
    );
    let head = leaf(tape, "head".into(), &params.head, train_base);

    Ok(ModelVars {
        config: params.config.clone(),
        tok_emb,
        pos_emb,
        layers,
        ln_f,
        head,
        trainables,
    })
}

/// Token embedding + positional embedding rows for a token slice, starting
/// at position `pos_offset`.
pub fn embed_tokens<E: Scalar>(
    tape: &mut Tape<E>,
    vars: &ModelVars,
    tokens: &[u32],
    pos_offset: usize,
) -> Result<Var> {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= vars.config.vocab_size) {
        return Err(Error::Index(format!("token id {bad} out of vocab")));
    }
    let tok = tape.gather_rows(vars.tok_emb, ids)?;
    let pos: Vec<usize> = (pos_offset..pos_offset + tokens.len()).collect();
    let pos = tape.gather_rows(vars.pos_emb, pos)?;
    tape.add(tok, pos)
}

/// Causal forward pass over precomputed input embeddings (n×d) → logits (n×V).
pub fn forward_embedded<E: Scalar>(
    tape: &mut Tape<E>,
    vars: &ModelVars,
    emb: Var,
) -> Result<Var> {
    let n = tape.value(emb).rows();
    if n > vars.config.context_length {
        return Err(Error::Contract(format!(
            "input length {n} exceeds context_length {}",
            vars.config.context_length
        )));
    }
    let dh = vars.config.head_dim();
    let inv_sqrt = E::from_f64_lossy(1.0 / (dh as f64).sqrt());

    let mut h = emb;
    for l in &vars.layers {
        let a = tape.layer_norm(h, l.ln1.0, l.ln1.1)?;
        let q = tape.matmul(a, l.attn_q)?;
        let k = tape.matmul(a, l.attn_k)?;
        let v = tape.matmul(a, l.attn_v)?;
        let mut heads = Vec::with_capacity(vars.config.n_heads);
        for hd in 0..vars.config.n_heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qi = tape.slice_cols(q, s, e)?;
            let ki = tape.slice_cols(k, s, e)?;
            let vi = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qi, ki)?;
            let scaled = tape.scale(scores, inv_sqrt);
            let masked = tape.causal_mask(scaled)?;
            let attn = tape.softmax_rows(masked)?;
            heads.push(tape.matmul(attn, vi)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let proj = tape.matmul(merged, l.attn_o)?;
        h = tape.add(h, proj)?;

        let a2 = tape.layer_norm(h, l.ln2.0, l.ln2.1)?;
        let up = tape.matmul(a2, l.mlp_up)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, l.mlp_down)?;
        h = tape.add(h, down)?;
    }
    let f = tape.layer_norm(h, vars.ln_f.0, vars.ln_f.1)?;
    tape.matmul(f, vars.head)
}

/// Causal forward over token ids → logits (n×V). Position t sees tokens ≤ t.
pub fn forward_tokens<E: Scalar>(
    tape: &mut Tape<E>,
    vars: &ModelVars,
    tokens: &[u32],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Contract("forward on empty token sequence".into()));
    }
    if tokens.len() > vars.config.context_length {
        return Err(Error::Contract(format!(
            "input length {} exceeds context_length {}",
            tokens.len(),
            vars.config.context_length
        )));
    }
    let emb = embed_tokens(tape, vars, tokens, 0)?;
    forward_embedded(tape, vars, emb)
}

/// One-shot logits without keeping the tape around.
pub fn forward<E: Scalar>(
    params: &Parameters<E>,
    adapter: Option<&LoraAdapter<E>>,
    tokens: &[u32],
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, params, adapter, SessionMode::Inference)?;
    let logits = forward_tokens(&mut tape, &vars, tokens)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            context_length: 32,
            seed,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_config(9);
        let a: Parameters<f32> = init_model(&cfg).unwrap();
        let b: Parameters<f32> = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 3,
            ..tiny_config(0)
        };
        assert!(matches!(
            init_model::<f32>(&cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fresh_model_ce_near_uniform() {
        let cfg = tiny_config(3);
        let params: Parameters<f32> = init_model(&cfg).unwrap();
        // Random byte data; a fresh model should be near the uniform ceiling.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let seqs: Vec<Vec<u32>> = (0..12)
            .map(|_| {
                let mut s: Vec<u32> = (0..24).map(|_| rng.gen_range(0..256u32)).collect();
                s.insert(0, tokenizer::BOS);
                s.push(tokenizer::EOS);
                s
            })
            .collect();
        let ce = mean_token_ce(&params, None, &seqs).unwrap();
        let uniform = (cfg.vocab_size as f64).ln();
        assert!(
            (ce - uniform).abs() / uniform < 0.10,
            "ce {ce} vs ln V {uniform}"
        );
    }

    #[test]
    fn forward_is_causal() {
        let cfg = tiny_config(5);
        let params: Parameters<f32> = init_model(&cfg).unwrap();
        let a = vec![tokenizer::BOS, 10, 20, 30, 40, 50];
        let mut b = a.clone();
        b[4] = 99;
        b[5] = 100;
        let la = forward(&params, None, &a).unwrap();
        let lb = forward(&params, None, &b).unwrap();
        // Positions 0..=3 must be bit-identical; later positions may differ.
        for r in 0..4 {
            assert_eq!(la.row(r), lb.row(r), "position {r} saw the future");
        }
    }

    #[test]
    fn forward_rejects_overlong_input() {
        let cfg = tiny_config(5);
        let params: Parameters<f32> = init_model(&cfg).unwrap();
        let toks = vec![1u32; cfg.context_length + 1];
        assert!(forward(&params, None, &toks).is_err());
    }

    #[test]
    fn forward_produces_finite_logits() {
        let cfg = tiny_config(6);
        let params: Parameters<f32> = init_model(&cfg).unwrap();
        let logits = forward(&params, None, &tokenizer::encode("hello world")).unwrap();
        assert!(logits.all_finite());
    }
}
