//! Synthetic PII corpus construction: templates with typed entity slots,
//! disjoint entity pools, replication-controlled injection, entity swapping,
//! and prefix/suffix evaluation sets.

mod inject;
mod io;
mod swap;
mod synth;
mod template;

pub use inject::{build_eval_set, inject, EvalRecord, EvalSet, GroupSpec, InjectedCorpus};
pub use io::{read_jsonl, write_jsonl, CorpusRecord};
pub use swap::entity_swap;
pub use synth::{
    background_sentences, build_desk_corpus, default_templates, generate_pool_split, CorpusSpec,
    DeskCorpus,
};
pub use template::{render, EntityPool, EntitySpan, PiiSample, SlotType, Template};
