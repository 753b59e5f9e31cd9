//! Decoding: greedy or temperature/top-k sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_tokens, register, LoraAdapter, Parameters, SessionMode};
use crate::autodiff::{Scalar, Tape};
use crate::error::{Error, Result};
use crate::rng::derive_seed_indexed;
use crate::tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    /// Temperature-scaled sampling from the top-k truncated distribution.
    Nucleus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_k: usize,
    /// Number of continuations per prefix (K).
    pub continuations: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            top_k: 50,
            continuations: 5,
            max_new_tokens: 48,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.continuations == 0 || self.max_new_tokens == 0 {
            return Err(Error::Config("decode: K and max_new_tokens must be ≥ 1".into()));
        }
        if self.mode == DecodeMode::Nucleus && (self.temperature <= 0.0 || self.top_k == 0) {
            return Err(Error::Config("decode: nucleus needs τ > 0 and top_k ≥ 1".into()));
        }
        Ok(())
    }
}

/// Generate K continuations of a non-empty prefix. Greedy decoding is fully
/// deterministic and returns K identical sequences; nucleus sampling draws
/// each continuation from its own seeded stream. Continuations stop at EOS
/// or `max_new_tokens`, whichever comes first, and contain only new tokens.
pub fn generate<E: Scalar>(
    params: &Parameters<E>,
    adapter: Option<&LoraAdapter<E>>,
    prefix: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<u32>>> {
    if prefix.is_empty() {
        return Err(Error::Contract("generate: empty prefix".into()));
    }
    cfg.validate()?;
    match cfg.mode {
        DecodeMode::Greedy => {
            let one = rollout(params, adapter, prefix, cfg, None)?;
            Ok(vec![one; cfg.continuations])
        }
        DecodeMode::Nucleus => (0..cfg.continuations)
            .map(|j| {
                let seed = derive_seed_indexed(cfg.seed, "continuation", j as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rollout(params, adapter, prefix, cfg, Some(&mut rng))
            })
            .collect(),
    }
}

fn rollout<E: Scalar>(
    params: &Parameters<E>,
    adapter: Option<&LoraAdapter<E>>,
    prefix: &[u32],
    cfg: &DecodeConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<u32>> {
    let mut tokens = prefix.to_vec();
    let mut new_tokens = Vec::with_capacity(cfg.max_new_tokens);
    for _ in 0..cfg.max_new_tokens {
        if tokens.len() >= params.config.context_length {
            break;
        }
        let mut tape = Tape::new();
        let vars = register(&mut tape, params, adapter, SessionMode::Inference)?;
        let logits = forward_tokens(&mut tape, &vars, &tokens)?;
        let last = tape.value(logits).row(tokens.len() - 1).to_vec();
        let next = match rng.as_deref_mut() {
            None => argmax(&last),
            Some(r) => sample_top_k(&last, cfg.temperature, cfg.top_k, r)?,
        };
        tokens.push(next as u32);
        new_tokens.push(next as u32);
        if next as u32 == tokenizer::EOS {
            break;
        }
    }
    Ok(new_tokens)
}

fn argmax<E: Scalar>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sample from softmax(logits/τ) restricted to the k largest logits.
fn sample_top_k<E: Scalar>(
    row: &[E],
    temperature: f64,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable order on ties keeps sampling deterministic across runs.
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(top_k.min(row.len()));
    let scaled: Vec<f64> = idx
        .iter()
        .map(|&i| row[i].to_f64_lossy() / temperature)
        .collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Numeric("sample_top_k: degenerate weights".into()));
    }
    let mut dart = rng.gen::<f64>() * total;
    for (&i, &w) in idx.iter().zip(&weights) {
        dart -= w;
        if dart <= 0.0 {
            return Ok(i);
        }
    }
    Ok(*idx.last().expect("top_k ≥ 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn setup() -> Parameters<f32> {
        let cfg = ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 48,
            seed: 12,
            ..ModelConfig::default()
        };
        init_model(&cfg).unwrap()
    }

    #[test]
    fn greedy_returns_identical_continuations() {
        let params = setup();
        let cfg = DecodeConfig {
            continuations: 3,
            max_new_tokens: 8,
            ..DecodeConfig::default()
        };
        let outs = generate(&params, None, &tokenizer::encode_prefix("abc"), &cfg).unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn tiny_temperature_converges_to_greedy() {
        let params = setup();
        let greedy = generate(
            &params,
            None,
            &tokenizer::encode_prefix("xy"),
            &DecodeConfig {
                continuations: 1,
                max_new_tokens: 6,
                ..DecodeConfig::default()
            },
        )
        .unwrap();
        let cold = generate(
            &params,
            None,
            &tokenizer::encode_prefix("xy"),
            &DecodeConfig {
                mode: DecodeMode::Nucleus,
                temperature: 1e-6,
                top_k: 50,
                continuations: 1,
                max_new_tokens: 6,
                seed: 77,
            },
        )
        .unwrap();
        assert_eq!(greedy[0], cold[0]);
    }

    #[test]
    fn nucleus_is_seed_reproducible() {
        let params = setup();
        let cfg = DecodeConfig {
            mode: DecodeMode::Nucleus,
            temperature: 1.2,
            top_k: 20,
            continuations: 2,
            max_new_tokens: 10,
            seed: 5,
        };
        let a = generate(&params, None, &tokenizer::encode_prefix("q"), &cfg).unwrap();
        let b = generate(&params, None, &tokenizer::encode_prefix("q"), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_prefix_is_rejected() {
        let params = setup();
        assert!(generate(&params, None, &[], &DecodeConfig::default()).is_err());
    }
}
