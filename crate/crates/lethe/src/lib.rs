//! lethe — a self-contained laboratory for inducing, measuring, and
//! selectively removing PII memorization in small byte-level language models.
//!
//! The crate covers the full loop on a single CPU:
//!
//! 1. **corpus** — synthesize PII samples from templates and disjoint entity
//!    pools, inject them into a background corpus with controlled replication,
//!    and derive prefix/suffix evaluation sets.
//! 2. **model** — a small decoder-only transformer (own autodiff, no external
//!    ML runtime) with LoRA adapters, greedy/top-k decoding, training, and
//!    perplexity/accuracy heads.
//! 3. **inversion** — train an inverter that reconstructs input text from the
//!    model's final-position log-probabilities, then synthesize and annotate
//!    surrogate ("pseudo") PII without touching the injected data.
//! 4. **unlearn** — masked contrastive unlearning in the LoRA subspace
//!    (gradient ascent on entity tokens, descent on context tokens), plus a
//!    full-sequence gradient-ascent baseline and an oracle mode.
//! 5. **metrics** — exact/fractional reconstruction and entity-exposure rates
//!    with utility tracking, assembled into privacy reports.
//! 6. **pipeline** — staged orchestration with manifests, config hashing, and
//!    deterministic seeding, exposed through the `lethe` CLI.
//!
//! Start with the runnable examples (`cargo run --release --example ...`);
//! each one demonstrates a single capability end to end.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod unlearn;

pub use error::{Error, Result};

/// A tokenized training record: token ids plus a per-token privacy mask
/// (1 = sensitive entity token, 0 = context token). Mask and tokens always
/// have equal length; BOS/EOS carry mask 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    /// Unmasked sequence (every token is context).
    pub fn plain(tokens: Vec<u32>) -> Self {
        let mask = vec![0; tokens.len()];
        TokenSequence { tokens, mask }
    }

    /// Build from text plus sensitive byte spans.
    pub fn from_text_and_spans(text: &str, spans: &[(usize, usize)]) -> Self {
        let tokens = tokenizer::encode(text);
        let mut mask = vec![0u8; tokens.len()];
        for (pos, m) in mask.iter_mut().enumerate() {
            if let Some(byte) = tokenizer::token_byte_index(pos) {
                if byte < text.len() && spans.iter().any(|&(s, e)| byte >= s && byte < e) {
                    *m = 1;
                }
            }
        }
        // BOS/EOS stay 0 by construction (token_byte_index of EOS points past
        // the text and the range check above excludes it).
        let text_len = text.len();
        for (pos, m) in mask.iter_mut().enumerate() {
            if tokenizer::token_byte_index(pos).map_or(true, |b| b >= text_len) {
                *m = 0;
            }
        }
        TokenSequence { tokens, mask }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True if at least one text token is unmasked (required for the context
    /// stream of the contrastive loss).
    pub fn has_context_token(&self) -> bool {
        self.tokens
            .iter()
            .zip(&self.mask)
            .any(|(&t, &m)| t < 256 && m == 0)
    }

    /// True if at least one token is masked sensitive.
    pub fn has_masked_token(&self) -> bool {
        self.mask.iter().any(|&m| m == 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_alignment_matches_spans() {
        let text = "ip 10.0.0.1 end";
        let seq = TokenSequence::from_text_and_spans(text, &[(3, 11)]);
        assert_eq!(seq.tokens.len(), seq.mask.len());
        // Token at position b+1 covers byte b.
        for b in 0..text.len() {
            let expect = (3..11).contains(&b) as u8;
            assert_eq!(seq.mask[b + 1], expect, "byte {b}");
        }
        assert_eq!(seq.mask[0], 0, "BOS is context");
        assert_eq!(*seq.mask.last().unwrap(), 0, "EOS is context");
        assert!(seq.has_context_token());
        assert!(seq.has_masked_token());
    }
}
