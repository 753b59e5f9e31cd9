//! Utility heads: perplexity for generative evaluation, label accuracy for
//! next-token classification.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{forward, LoraAdapter, Parameters};
use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Mean token-level cross entropy over all next-token positions.
pub fn mean_token_ce<E: Scalar>(
    params: &Parameters<E>,
    adapter: Option<&LoraAdapter<E>>,
    eval_set: &[Vec<u32>],
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Contract("mean_token_ce: empty eval set".into()));
    }
    let per_seq: Vec<Result<(f64, usize)>> = eval_set
        .par_iter()
        .map(|seq| {
            if seq.len() < 2 {
                return Ok((0.0, 0));
            }
            let logits = forward(params, adapter, &seq[..seq.len() - 1])?;
            let v = logits.cols();
            let mut sum = 0.0;
            for (r, &target) in seq[1..].iter().enumerate() {
                let row = logits.row(r);
                let target = target as usize;
                if target >= v {
                    return Err(Error::Index(format!("target {target} ≥ vocab {v}")));
                }
                let max = row
                    .iter()
                    .map(|x| x.to_f64_lossy())
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse: f64 = max
                    + row
                        .iter()
                        .map(|x| (x.to_f64_lossy() - max).exp())
                        .sum::<f64>()
                        .ln();
                sum += lse - row[target].to_f64_lossy();
            }
            Ok((sum, seq.len() - 1))
        })
        .collect();

    let mut total = 0.0;
    let mut count = 0usize;
    for r in per_seq {
        let (s, c) = r?;
        total += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::Contract("mean_token_ce: no scorable positions".into()));
    }
    let ce = total / count as f64;
    if !ce.is_finite() {
        return Err(Error::Numeric("mean_token_ce: non-finite".into()));
    }
    Ok(ce)
}

/// exp of the mean token-level cross entropy.
pub fn perplexity<E: Scalar>(
    params: &Parameters<E>,
    adapter: Option<&LoraAdapter<E>>,
    eval_set: &[Vec<u32>],
) -> Result<f64> {
    Ok(mean_token_ce(params, adapter, eval_set)?.exp())
}

/// Fraction of examples whose predicted label token (argmax over the label
/// tokens' next-token logits at the final position) equals the gold label.
pub fn label_accuracy<E: Scalar>(
    params: &Parameters<E>,
    adapter: Option<&LoraAdapter<E>>,
    eval_set: &[(Vec<u32>, String)],
    label_token_map: &BTreeMap<String, u32>,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Contract("label_accuracy: empty eval set".into()));
    }
    if label_token_map.is_empty() {
        return Err(Error::Config("label_accuracy: empty label map".into()));
    }
    let mut label_tokens: Vec<u32> = label_token_map.values().copied().collect();
    label_tokens.sort_unstable();
    label_tokens.dedup();
    if label_tokens.len() != label_token_map.len() {
        return Err(Error::Config("label_accuracy: labels must map to distinct tokens".into()));
    }

    let hits: Vec<Result<bool>> = eval_set
        .par_iter()
        .map(|(seq, label)| {
            let gold = *label_token_map
                .get(label)
                .ok_or_else(|| Error::Config(format!("label '{label}' not in map")))?;
            if seq.is_empty() {
                return Err(Error::Contract("label_accuracy: empty sequence".into()));
            }
            let logits = forward(params, adapter, seq)?;
            let last = logits.row(seq.len() - 1);
            let mut best = label_tokens[0];
            for &t in &label_tokens {
                if last[t as usize] > last[best as usize] {
                    best = t;
                }
            }
            Ok(best == gold)
        })
        .collect();

    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tokenizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Parameters<f32> {
        init_model(&ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn perplexity_matches_definition() {
        // PPL = exp(mean CE) by construction; check against a hand loop.
        let params = tiny(2);
        let set = vec![tokenizer::encode("abc"), tokenizer::encode("defg")];
        let ce = mean_token_ce(&params, None, &set).unwrap();
        let ppl = perplexity(&params, None, &set).unwrap();
        assert!((ppl - ce.exp()).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_ppl_near_vocab_size() {
        // A model with an all-zero head emits exactly uniform logits.
        let mut params = tiny(3);
        for v in params.head.data_mut() {
            *v = 0.0;
        }
        let set = vec![tokenizer::encode("hello world")];
        let ppl = perplexity(&params, None, &set).unwrap();
        let v = params.config.vocab_size as f64;
        assert!((ppl - v).abs() < 1e-3, "ppl {ppl} vs V {v}");
    }

    #[test]
    fn label_accuracy_random_model_is_coin_flip() {
        let params = tiny(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut map = BTreeMap::new();
        map.insert("yes".to_string(), b'y' as u32);
        map.insert("no".to_string(), b'n' as u32);
        let set: Vec<(Vec<u32>, String)> = (0..1000)
            .map(|_| {
                let len = rng.gen_range(4..20);
                let toks: Vec<u32> = std::iter::once(tokenizer::BOS)
                    .chain((0..len).map(|_| rng.gen_range(32..127u32)))
                    .collect();
                let label = if rng.gen::<bool>() { "yes" } else { "no" };
                (toks, label.to_string())
            })
            .collect();
        let acc = label_accuracy(&params, None, &set, &map).unwrap();
        assert!(
            (acc - 0.5).abs() <= 0.05,
            "random-model accuracy {acc} should be 0.5 ± 0.05"
        );
    }

    #[test]
    fn label_accuracy_contract_errors() {
        let params = tiny(6);
        let map: BTreeMap<String, u32> = [("a".to_string(), 65u32)].into_iter().collect();
        assert!(label_accuracy(&params, None, &[], &map).is_err());
        let set = vec![(tokenizer::encode("x"), "missing".to_string())];
        assert!(matches!(
            label_accuracy(&params, None, &set, &map),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_label_tokens_rejected() {
        let params = tiny(7);
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), 65u32);
        map.insert("b".to_string(), 65u32);
        let set = vec![(tokenizer::encode("x"), "a".to_string())];
        assert!(matches!(
            label_accuracy(&params, None, &set, &map),
            Err(Error::Config(_))
        ));
    }
}
