//! Model inversion: reconstruct input text from the target model's
//! final-position log-probability vector, then synthesize and annotate
//! surrogate PII for unlearning.

mod annotate;
mod inverter;
mod quality;

pub use annotate::{
    annotate, builtin_spans, spans_to_token_mask, token_mask_to_spans, Annotation, AnnotatorKind,
    AnnotatorSpec, Exemplar, SpanAnno,
};
pub use inverter::{
    invert, inverter_ce, load_inverter, save_inverter, soft_embed, synthesize_pseudo,
    train_inverter, AlignmentMap, Inverter, InverterConfig, InverterReport,
};
pub use quality::{corpus_bleu, inversion_quality, QualityReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{forward_tokens, register, Parameters, SessionMode};
use crate::tokenizer;
use crate::TokenSequence;

/// A (source text, final-position log-probability vector) pair — the
/// inverter's training unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub text: String,
    pub log_probs: Vec<f32>,
}

impl LogitRecord {
    /// A valid record is a log-distribution: logsumexp ≈ 0.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.log_probs.len() != vocab_size {
            return Err(Error::Shape(format!(
                "log_probs length {} vs vocab {vocab_size}",
                self.log_probs.len()
            )));
        }
        let lse = log_sum_exp_f32(&self.log_probs);
        if lse.abs() > 1e-4 {
            return Err(Error::Numeric(format!(
                "log_probs not normalized: logsumexp = {lse}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp_f32(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
    max + sum.ln()
}

/// Query the target model with each text and keep the log-softmax of the
/// final-position logits.
pub fn precompute_logits(
    params: &Parameters<f32>,
    texts: &[String],
) -> Result<Vec<LogitRecord>> {
    let records: Vec<Result<LogitRecord>> = texts
        .par_iter()
        .map(|text| {
            let tokens = tokenizer::encode_prefix(text);
            if tokens.len() > params.config.context_length {
                return Err(Error::Contract(format!(
                    "text of {} tokens exceeds context {}",
                    tokens.len(),
                    params.config.context_length
                )));
            }
            let mut tape = Tape::new();
            let vars = register(&mut tape, params, None, SessionMode::Inference)?;
            let logits = forward_tokens(&mut tape, &vars, &tokens)?;
            let last = tape.value(logits).row(tokens.len() - 1);
            let lse = {
                let max = last.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                max + last.iter().map(|&z| (z - max).exp()).sum::<f32>().ln()
            };
            let log_probs: Vec<f32> = last.iter().map(|&z| z - lse).collect();
            Ok(LogitRecord {
                text: text.clone(),
                log_probs,
            })
        })
        .collect();
    records.into_iter().collect()
}

/// Inversion-decoded text with its token-aligned privacy mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoSample {
    pub text: String,
    /// One mask entry per token of `encode(text)`; BOS/EOS are 0.
    pub mask: Vec<u8>,
    pub candidate_id: usize,
    pub annotator_id: String,
}

impl PseudoSample {
    pub fn validate(&self) -> Result<()> {
        let tokens = tokenizer::encode(&self.text);
        if self.mask.len() != tokens.len() {
            return Err(Error::Contract(format!(
                "mask length {} vs token length {}",
                self.mask.len(),
                tokens.len()
            )));
        }
        let has_context = tokens
            .iter()
            .zip(&self.mask)
            .any(|(&t, &m)| t < 256 && m == 0);
        if !has_context {
            return Err(Error::Contract(
                "all-sensitive pseudo sample (no context token)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_token_sequence(&self) -> TokenSequence {
        TokenSequence {
            tokens: tokenizer::encode(&self.text),
            mask: self.mask.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn tiny() -> Parameters<f32> {
        init_model(&ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            context_length: 64,
            seed: 17,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn records_are_normalized_log_distributions() {
        let params = tiny();
        let texts: Vec<String> = vec!["alpha beta".into(), "gamma".into(), "alpha beta".into()];
        let records = precompute_logits(&params, &texts).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            r.validate(params.config.vocab_size).unwrap();
            assert!(log_sum_exp_f32(&r.log_probs).abs() < 1e-5);
        }
        // Identical texts → identical distributions.
        assert_eq!(records[0].log_probs, records[2].log_probs);
    }

    #[test]
    fn overlong_text_is_rejected() {
        let params = tiny();
        let texts = vec!["x".repeat(200)];
        assert!(precompute_logits(&params, &texts).is_err());
    }

    #[test]
    fn pseudo_sample_invariants() {
        let good = PseudoSample {
            text: "ip 10.0.0.1 ok".into(),
            mask: {
                let t = tokenizer::encode("ip 10.0.0.1 ok");
                let mut m = vec![0u8; t.len()];
                for i in 4..12 {
                    m[i] = 1;
                }
                m
            },
            candidate_id: 0,
            annotator_id: "builtin".into(),
        };
        good.validate().unwrap();

        let bad_len = PseudoSample {
            text: "abc".into(),
            mask: vec![0, 1],
            candidate_id: 0,
            annotator_id: "builtin".into(),
        };
        assert!(bad_len.validate().is_err());

        let all_masked = PseudoSample {
            text: "ab".into(),
            mask: vec![0, 1, 1, 0],
            candidate_id: 0,
            annotator_id: "builtin".into(),
        };
        assert!(all_masked.validate().is_err());
    }
}
