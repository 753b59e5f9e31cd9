//! Controlled-replication injection and the prefix/suffix evaluation split.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::template::{EntitySpan, PiiSample};
use crate::error::{Error, Result};

/// Samples assigned to exposure group i; each is replicated exactly 10·i
/// times in the training stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub index: usize,
    pub samples: Vec<PiiSample>,
}

impl GroupSpec {
    pub fn replication(&self) -> usize {
        10 * self.index
    }
}

/// Background corpus plus injected PII groups and the materialized,
/// deterministically shuffled training stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedCorpus {
    pub background: Vec<String>,
    pub groups: Vec<GroupSpec>,
    pub shuffle_seed: u64,
    /// Full training sequence list (background + replicated samples).
    pub sequences: Vec<String>,
}

/// Mix replicated PII samples into a background corpus. Group indices must
/// be ≥ 1; a sample text may belong to only one group.
pub fn inject(background: &[String], groups: &[GroupSpec], shuffle_seed: u64) -> Result<InjectedCorpus> {
    let mut seen = BTreeSet::new();
    for g in groups {
        if g.index == 0 {
            return Err(Error::Contract("group index must be ≥ 1".into()));
        }
        for s in &g.samples {
            if !seen.insert(s.text.clone()) {
                return Err(Error::Disjointness(format!(
                    "sample appears in more than one group: '{}'",
                    s.text
                )));
            }
        }
    }
    let mut sequences: Vec<String> = background.to_vec();
    for g in groups {
        let reps = g.replication();
        for s in &g.samples {
            for _ in 0..reps {
                sequences.push(s.text.clone());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    sequences.shuffle(&mut rng);
    Ok(InjectedCorpus {
        background: background.to_vec(),
        groups: groups.to_vec(),
        shuffle_seed,
        sequences,
    })
}

impl InjectedCorpus {
    /// Unique injected samples with their group index, in group order.
    pub fn unique_samples(&self) -> Vec<(&PiiSample, usize)> {
        let mut out = Vec::new();
        for g in &self.groups {
            for s in &g.samples {
                out.push((s, g.index));
            }
        }
        out
    }

    /// Occurrences of a text in the training stream.
    pub fn count_occurrences(&self, text: &str) -> usize {
        self.sequences.iter().filter(|s| s.as_str() == text).count()
    }
}

/// One extraction-evaluation record. `prefix + suffix` reconstructs the
/// sample text byte-exactly; `entities` keeps only entities fully contained
/// in the suffix (spans are offsets into the original text).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prefix: String,
    pub suffix: String,
    pub entities: Vec<EntitySpan>,
    pub group: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSet {
    pub records: Vec<EvalRecord>,
    /// Samples skipped because they were too short to split.
    pub skipped: usize,
}

/// Split each unique injected sample at the token boundary nearest to
/// `prefix_fraction` (byte boundary — the tokenizer is byte-level).
pub fn build_eval_set(corpus: &InjectedCorpus, prefix_fraction: f64) -> Result<EvalSet> {
    if !(prefix_fraction > 0.0 && prefix_fraction < 1.0) {
        return Err(Error::Config(format!(
            "prefix_fraction must be in (0, 1), got {prefix_fraction}"
        )));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut seen = BTreeSet::new();
    for (sample, group) in corpus.unique_samples() {
        if !seen.insert(sample.text.clone()) {
            continue; // duplicates collapse
        }
        let len = sample.text.len();
        if len < 2 {
            skipped += 1;
            continue;
        }
        let cut = ((len as f64 * prefix_fraction).round() as usize).clamp(1, len - 1);
        let prefix = sample.text[..cut].to_string();
        let suffix = sample.text[cut..].to_string();
        let entities: Vec<EntitySpan> = sample
            .entities
            .iter()
            .filter(|e| e.start >= cut && e.end <= len)
            .cloned()
            .collect();
        records.push(EvalRecord {
            prefix,
            suffix,
            entities,
            group,
        });
    }
    Ok(EvalSet { records, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::template::SlotType;

    fn sample(text: &str, spans: &[(usize, usize)]) -> PiiSample {
        PiiSample {
            text: text.to_string(),
            entities: spans
                .iter()
                .map(|&(start, end)| EntitySpan {
                    ty: SlotType::Ip,
                    start,
                    end,
                    string: text[start..end].to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn replication_counts_are_exact() {
        let bg = vec!["background line".to_string()];
        let groups = vec![
            GroupSpec {
                index: 3,
                samples: (0..5).map(|i| sample(&format!("pii {i}"), &[])).collect(),
            },
            GroupSpec {
                index: 1,
                samples: vec![sample("solo", &[])],
            },
        ];
        let corpus = inject(&bg, &groups, 9).unwrap();
        for i in 0..5 {
            assert_eq!(corpus.count_occurrences(&format!("pii {i}")), 30);
        }
        assert_eq!(corpus.count_occurrences("solo"), 10);
        assert_eq!(corpus.sequences.len(), 1 + 5 * 30 + 10);
    }

    #[test]
    fn empty_sample_list_is_background_only() {
        let bg = vec!["a".to_string(), "b".to_string()];
        let corpus = inject(&bg, &[], 0).unwrap();
        let mut seqs = corpus.sequences.clone();
        seqs.sort();
        assert_eq!(seqs, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn duplicate_sample_across_groups_is_rejected() {
        let groups = vec![
            GroupSpec {
                index: 1,
                samples: vec![sample("same", &[])],
            },
            GroupSpec {
                index: 2,
                samples: vec![sample("same", &[])],
            },
        ];
        assert!(matches!(
            inject(&[], &groups, 0),
            Err(Error::Disjointness(_))
        ));
    }

    #[test]
    fn injection_is_shuffle_seed_deterministic() {
        let bg: Vec<String> = (0..10).map(|i| format!("bg {i}")).collect();
        let groups = vec![GroupSpec {
            index: 2,
            samples: vec![sample("pii one", &[]), sample("pii two", &[])],
        }];
        assert_eq!(inject(&bg, &groups, 5).unwrap(), inject(&bg, &groups, 5).unwrap());
        assert_ne!(
            inject(&bg, &groups, 5).unwrap().sequences,
            inject(&bg, &groups, 6).unwrap().sequences
        );
    }

    #[test]
    fn eval_split_reconstructs_and_filters_entities() {
        // 10-byte text, entity at [0,3) (prefix) and [6,9) (suffix).
        let s = sample("abcdefghij", &[(0, 3), (6, 9)]);
        let corpus = inject(
            &[],
            &[GroupSpec {
                index: 1,
                samples: vec![s],
            }],
            0,
        )
        .unwrap();
        let eval = build_eval_set(&corpus, 0.5).unwrap();
        assert_eq!(eval.records.len(), 1);
        let r = &eval.records[0];
        assert_eq!(r.prefix.len(), 5);
        assert_eq!(format!("{}{}", r.prefix, r.suffix), "abcdefghij");
        assert_eq!(r.entities.len(), 1);
        assert_eq!(r.entities[0].string, "ghi");
    }

    #[test]
    fn straddling_entity_is_excluded() {
        let s = sample("abcdefghij", &[(3, 7)]);
        let corpus = inject(
            &[],
            &[GroupSpec {
                index: 1,
                samples: vec![s],
            }],
            0,
        )
        .unwrap();
        let eval = build_eval_set(&corpus, 0.5).unwrap();
        assert!(eval.records[0].entities.is_empty());
    }

    #[test]
    fn duplicates_collapse_and_short_samples_skip() {
        let corpus = inject(
            &[],
            &[GroupSpec {
                index: 1,
                samples: vec![sample("x", &[]), sample("long enough", &[])],
            }],
            0,
        )
        .unwrap();
        let eval = build_eval_set(&corpus, 0.5).unwrap();
        assert_eq!(eval.records.len(), 1);
        assert_eq!(eval.skipped, 1);
    }

    #[test]
    fn bad_prefix_fraction_rejected() {
        let corpus = inject(&[], &[], 0).unwrap();
        assert!(build_eval_set(&corpus, 0.0).is_err());
        assert!(build_eval_set(&corpus, 1.0).is_err());
    }
}
