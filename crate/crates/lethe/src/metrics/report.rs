//! Privacy-report assembly: generate continuations for an eval set, run all
//! four privacy metrics, attach the configured utility metric.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{e_hit, err, frs, s_exp, GenRecord, GenerationBundle};
use crate::corpus::EvalSet;
use crate::error::Result;
use crate::model::{
    generate, label_accuracy, perplexity, DecodeConfig, LoraAdapter, Parameters,
};
use crate::rng::derive_seed_indexed;
use crate::tokenizer;

/// Entities shorter than this many bytes are dropped when bundles are built;
/// tiny strings produce trivial substring hits.
pub const MIN_ENTITY_LEN: usize = 4;

/// Which utility metric accompanies the privacy metrics.
#[derive(Clone, Debug)]
pub enum UtilityEval {
    None,
    /// Perplexity over a clean text corpus.
    Perplexity { texts: Vec<String> },
    /// Next-token label accuracy.
    Accuracy {
        examples: Vec<(String, String)>,
        label_map: BTreeMap<String, u32>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityValue {
    pub kind: UtilityKind,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    Ppl,
    Accuracy,
}

/// Privacy and utility snapshot for one model state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub err: f64,
    pub frs: f64,
    pub s_exp: f64,
    pub e_hit: Option<f64>,
    pub utility: Option<UtilityValue>,
    pub snapshot_id: String,
    pub decode: DecodeConfig,
    pub timestamp: String,
}

impl PrivacyReport {
    /// Everything except the timestamp (run-to-run comparisons).
    pub fn comparable(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().unwrap().remove("timestamp");
        v
    }
}

/// Generate K continuations per eval record and score them. Generation is
/// parallel over records with per-record derived seeds, so results do not
/// depend on scheduling.
pub fn evaluate(
    params: &Parameters<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    eval_set: &EvalSet,
    decode: &DecodeConfig,
    utility: &UtilityEval,
    snapshot_id: &str,
) -> Result<PrivacyReport> {
    let bundle = build_bundle(params, adapter, eval_set, decode)?;
    report_from_bundle(params, adapter, &bundle, utility, snapshot_id)
}

/// Generate continuations without scoring (kept separate so bundles can be
/// persisted and re-scored).
pub fn build_bundle(
    params: &Parameters<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    eval_set: &EvalSet,
    decode: &DecodeConfig,
) -> Result<GenerationBundle> {
    let records: Vec<Result<GenRecord>> = eval_set
        .records
        .par_iter()
        .enumerate()
        .map(|(idx, r)| {
            let mut cfg = decode.clone();
            cfg.seed = derive_seed_indexed(decode.seed, "record", idx as u64);
            let prefix_tokens = tokenizer::encode_prefix(&r.prefix);
            let continuations = generate(params, adapter, &prefix_tokens, &cfg)?;
            let generations: Vec<String> = continuations
                .iter()
                .map(|c| tokenizer::decode_trimmed(c))
                .collect();
            let mut entities: Vec<String> = r
                .entities
                .iter()
                .map(|e| e.string.clone())
                .filter(|e| e.len() >= MIN_ENTITY_LEN)
                .collect();
            entities.sort();
            entities.dedup();
            Ok(GenRecord {
                prefix: r.prefix.clone(),
                suffix: r.suffix.clone(),
                entities,
                generations,
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(GenerationBundle {
        records,
        decode: decode.clone(),
    })
}

pub fn report_from_bundle(
    params: &Parameters<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    bundle: &GenerationBundle,
    utility: &UtilityEval,
    snapshot_id: &str,
) -> Result<PrivacyReport> {
    let utility_value = match utility {
        UtilityEval::None => None,
        UtilityEval::Perplexity { texts } => {
            let seqs: Vec<Vec<u32>> = texts.iter().map(|t| tokenizer::encode(t)).collect();
            Some(UtilityValue {
                kind: UtilityKind::Ppl,
                value: perplexity(params, adapter, &seqs)?,
            })
        }
        UtilityEval::Accuracy { examples, label_map } => {
            let set: Vec<(Vec<u32>, String)> = examples
                .iter()
                .map(|(text, label)| (tokenizer::encode_prefix(text), label.clone()))
                .collect();
            Some(UtilityValue {
                kind: UtilityKind::Accuracy,
                value: label_accuracy(params, adapter, &set, label_map)?,
            })
        }
    };
    Ok(PrivacyReport {
        err: err(bundle)?,
        frs: frs(bundle)?,
        s_exp: s_exp(bundle)?,
        e_hit: e_hit(bundle)?,
        utility: utility_value,
        snapshot_id: snapshot_id.to_string(),
        decode: bundle.decode.clone(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    })
}

/// Render reports as a Markdown comparison table (privacy columns are
/// percentages, lower is better; absent values render as —).
pub fn markdown_table(rows: &[(&str, &PrivacyReport)]) -> String {
    let mut out = String::new();
    out.push_str("| Run | ERR (%) | FRS (%) | S-Exp (%) | E-Hit (%) | Utility |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for (label, r) in rows {
        let e_hit = r
            .e_hit
            .map(|v| format!("{:.2}", v * 100.0))
            .unwrap_or_else(|| "—".to_string());
        let utility = r
            .utility
            .map(|u| match u.kind {
                UtilityKind::Ppl => format!("PPL {:.3}", u.value),
                UtilityKind::Accuracy => format!("Acc {:.1}%", u.value * 100.0),
            })
            .unwrap_or_else(|| "—".to_string());
        out.push_str(&format!(
            "| {label} | {:.2} | {:.2} | {:.2} | {} | {} |\n",
            r.err * 100.0,
            r.frs * 100.0,
            r.s_exp * 100.0,
            e_hit,
            utility
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_desk_corpus, CorpusSpec};
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn untrained_model_leaks_nothing() {
        let spec = CorpusSpec {
            n_samples: 6,
            group_index: 1,
            background_train: 10,
            background_eval: 10,
            pool_entities_per_type: 30,
            ..CorpusSpec::default()
        };
        let desk = build_desk_corpus(&spec, 11).unwrap();
        let params = init_model::<f32>(&ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            seed: 0,
            ..ModelConfig::default()
        })
        .unwrap();
        let decode = DecodeConfig {
            continuations: 2,
            max_new_tokens: 16,
            ..DecodeConfig::default()
        };
        let report = evaluate(
            &params,
            None,
            &desk.eval_set,
            &decode,
            &UtilityEval::Perplexity {
                texts: desk.background_eval.clone(),
            },
            "untrained",
        )
        .unwrap();
        // Random bytes almost never contain a specific ≥4-byte entity.
        assert_eq!(report.e_hit.unwrap(), 0.0);
        assert_eq!(report.err, 0.0);
        assert!(report.s_exp <= 1.0 && report.frs <= 1.0);
        assert!(report.utility.unwrap().value > 1.0);
    }

    #[test]
    fn evaluation_is_deterministic_under_greedy() {
        let spec = CorpusSpec {
            n_samples: 3,
            group_index: 1,
            background_train: 5,
            background_eval: 5,
            pool_entities_per_type: 20,
            ..CorpusSpec::default()
        };
        let desk = build_desk_corpus(&spec, 2).unwrap();
        let params = init_model::<f32>(&ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let decode = DecodeConfig {
            continuations: 2,
            max_new_tokens: 8,
            ..DecodeConfig::default()
        };
        let a = evaluate(&params, None, &desk.eval_set, &decode, &UtilityEval::None, "s").unwrap();
        let b = evaluate(&params, None, &desk.eval_set, &decode, &UtilityEval::None, "s").unwrap();
        assert_eq!(a.comparable(), b.comparable());
    }

    #[test]
    fn markdown_renders_absent_cells() {
        let report = PrivacyReport {
            err: 0.0,
            frs: 0.5,
            s_exp: 0.25,
            e_hit: None,
            utility: None,
            snapshot_id: "x".into(),
            decode: DecodeConfig::default(),
            timestamp: "t".into(),
        };
        let md = markdown_table(&[("base", &report)]);
        assert!(md.contains("| base | 0.00 | 50.00 | 25.00 | — | — |"));
    }
}
