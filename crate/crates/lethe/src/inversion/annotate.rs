//! Pseudo-PII annotation. The builtin matcher marks substrings that either
//! occur in a known entity pool or match a slot-type pattern; the external
//! path POSTs the text with few-shot span exemplars to an annotation service
//! and falls back to the builtin matcher after exhausted retries. Every
//! external exchange is appended to an audit log.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::EntityPool;
use crate::error::{Error, Result};
use crate::tokenizer;

/// Character-span annotation with a free-form type tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnno {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub ty: String,
}

/// Few-shot exemplar sent to the external annotator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub text: String,
    pub spans: Vec<SpanAnno>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    BuiltinSpanMatcher,
    ExternalLlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSpec {
    pub kind: AnnotatorKind,
    /// Required for the external annotator.
    pub endpoint: Option<String>,
    pub exemplars: Vec<Exemplar>,
    pub timeout_ms: u64,
    pub max_retries: usize,
    /// JSONL audit file for external requests/responses.
    pub audit_log: Option<PathBuf>,
}

impl Default for AnnotatorSpec {
    fn default() -> Self {
        AnnotatorSpec {
            kind: AnnotatorKind::BuiltinSpanMatcher,
            endpoint: None,
            exemplars: default_exemplars(),
            timeout_ms: 3000,
            max_retries: 2,
            audit_log: None,
        }
    }
}

/// Position-annotated exemplars for the few-shot request body.
pub fn default_exemplars() -> Vec<Exemplar> {
    vec![
        Exemplar {
            text: "Reach me at kira7@boxpost.io after 2021-05-04.".into(),
            spans: vec![
                SpanAnno { start: 12, end: 28, ty: "EMAIL".into() },
                SpanAnno { start: 35, end: 45, ty: "DATE".into() },
            ],
        },
        Exemplar {
            text: "Host 192.168.4.20 answers to milo44.".into(),
            spans: vec![
                SpanAnno { start: 5, end: 17, ty: "IP".into() },
                SpanAnno { start: 29, end: 35, ty: "USERNAME".into() },
            ],
        },
    ]
}

/// Outcome of annotating one text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    /// Token-aligned privacy mask over `encode(text)` (BOS/EOS are 0).
    pub mask: Vec<u8>,
    /// Normalized byte spans the mask was derived from.
    pub spans: Vec<(usize, usize)>,
    pub used_fallback: bool,
    pub annotator_id: String,
}

fn entity_patterns() -> &'static [(Regex, &'static str)] {
    static PATTERNS: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        vec![
            (Regex::new(r"\b(?:\d{1,3}\.){3}\d{1,3}\b").unwrap(), "IP"),
            (
                Regex::new(r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)+\b").unwrap(),
                "EMAIL",
            ),
            (Regex::new(r"\b\d{3}-\d{3}-\d{4}\b").unwrap(), "PHONE"),
            (Regex::new(r"\b\d{4}-\d{2}-\d{2}\b").unwrap(), "DATE"),
            (Regex::new(r"\b[a-z]+\d{2,}\b").unwrap(), "USERNAME"),
        ]
    })
}

/// Merge overlapping or touching spans into maximal runs.
fn normalize_spans(mut spans: Vec<(usize, usize)>, text_len: usize) -> Vec<(usize, usize)> {
    spans.retain(|&(s, e)| s < e && e <= text_len);
    spans.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some((_, oe)) if s <= *oe => *oe = (*oe).max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Builtin matcher: pool membership (exact substring) plus slot-type regexes.
pub fn builtin_spans(text: &str, known_pools: &[&EntityPool]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for pool in known_pools {
        for entries in pool.entries.values() {
            for entity in entries {
                if entity.is_empty() {
                    continue;
                }
                for (at, _) in text.match_indices(entity.as_str()) {
                    spans.push((at, at + entity.len()));
                }
            }
        }
    }
    for (re, _) in entity_patterns() {
        for m in re.find_iter(text) {
            spans.push((m.start(), m.end()));
        }
    }
    normalize_spans(spans, text.len())
}

/// Byte spans → token mask over `encode(text)`. A token is marked when its
/// byte overlaps any span.
pub fn spans_to_token_mask(text: &str, spans: &[(usize, usize)]) -> Vec<u8> {
    let tokens = tokenizer::encode(text);
    let mut mask = vec![0u8; tokens.len()];
    for (pos, m) in mask.iter_mut().enumerate() {
        if let Some(byte) = tokenizer::token_byte_index(pos) {
            if byte < text.len() && spans.iter().any(|&(s, e)| byte >= s && byte < e) {
                *m = 1;
            }
        }
    }
    mask
}

/// Token mask → byte spans (inverse of `spans_to_token_mask` on normalized
/// spans).
pub fn token_mask_to_spans(text: &str, mask: &[u8]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for (pos, &m) in mask.iter().enumerate() {
        let byte = match tokenizer::token_byte_index(pos) {
            Some(b) if b < text.len() => b,
            _ => continue,
        };
        if m == 1 {
            run = match run {
                None => Some((byte, byte + 1)),
                Some((s, e)) if byte == e => Some((s, byte + 1)),
                Some(done) => {
                    spans.push(done);
                    Some((byte, byte + 1))
                }
            };
        } else if let Some(done) = run.take() {
            spans.push(done);
        }
    }
    if let Some(done) = run {
        spans.push(done);
    }
    spans
}

#[derive(Serialize)]
struct AnnotateRequest<'a> {
    text: &'a str,
    exemplars: &'a [Exemplar],
}

#[derive(Deserialize)]
struct AnnotateResponse {
    spans: Vec<SpanAnno>,
}

#[derive(Serialize)]
struct AuditEntry<'a> {
    timestamp: String,
    endpoint: &'a str,
    attempt: usize,
    text: &'a str,
    outcome: String,
}

fn append_audit(spec: &AnnotatorSpec, endpoint: &str, attempt: usize, text: &str, outcome: String) {
    let Some(path) = &spec.audit_log else {
        return;
    };
    let entry = AuditEntry {
        timestamp: chrono::Utc::now().to_rfc3339(),
        endpoint,
        attempt,
        text,
        outcome,
    };
    if let Some(dir) = path.parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        if let Ok(line) = serde_json::to_string(&entry) {
            let _ = writeln!(f, "{line}");
        }
    }
}

fn external_spans(text: &str, spec: &AnnotatorSpec, endpoint: &str) -> Result<Vec<(usize, usize)>> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(spec.timeout_ms))
        .build();
    let body = serde_json::to_value(AnnotateRequest {
        text,
        exemplars: &spec.exemplars,
    })?;
    let mut last_err = String::new();
    for attempt in 0..=spec.max_retries {
        match agent.post(endpoint).send_json(body.clone()) {
            Ok(resp) => match resp.into_json::<AnnotateResponse>() {
                Ok(parsed) => {
                    let spans: Vec<(usize, usize)> =
                        parsed.spans.iter().map(|s| (s.start, s.end)).collect();
                    if spans.iter().any(|&(s, e)| s >= e || e > text.len()) {
                        last_err = "spans out of bounds".to_string();
                        append_audit(spec, endpoint, attempt, text, format!("invalid: {last_err}"));
                        continue;
                    }
                    append_audit(spec, endpoint, attempt, text, format!("ok: {} spans", spans.len()));
                    return Ok(normalize_spans(spans, text.len()));
                }
                Err(e) => {
                    last_err = format!("parse failure: {e}");
                    append_audit(spec, endpoint, attempt, text, last_err.clone());
                }
            },
            Err(e) => {
                last_err = format!("transport failure: {e}");
                append_audit(spec, endpoint, attempt, text, last_err.clone());
            }
        }
    }
    Err(Error::Serde(last_err))
}

/// Annotate one text with a per-token privacy mask. External failures fall
/// back to the builtin matcher after `max_retries` and are recorded both in
/// the returned annotation and the audit log.
pub fn annotate(text: &str, spec: &AnnotatorSpec, known_pools: &[&EntityPool]) -> Result<Annotation> {
    if text.is_empty() {
        return Err(Error::Contract("annotate: empty text".into()));
    }
    let (spans, used_fallback, annotator_id) = match spec.kind {
        AnnotatorKind::BuiltinSpanMatcher => {
            (builtin_spans(text, known_pools), false, "builtin".to_string())
        }
        AnnotatorKind::ExternalLlm => {
            let endpoint = spec
                .endpoint
                .as_deref()
                .ok_or_else(|| Error::Config("external annotator needs an endpoint".into()))?;
            match external_spans(text, spec, endpoint) {
                Ok(spans) => (spans, false, format!("external:{endpoint}")),
                Err(_) => {
                    append_audit(spec, endpoint, spec.max_retries + 1, text, "fallback: builtin".into());
                    (builtin_spans(text, known_pools), true, "builtin-fallback".to_string())
                }
            }
        }
    };
    let mask = spans_to_token_mask(text, &spans);
    Ok(Annotation {
        mask,
        spans,
        used_fallback,
        annotator_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotType;

    #[test]
    fn plain_text_gets_all_zero_mask() {
        let a = annotate("nothing sensitive here", &AnnotatorSpec::default(), &[]).unwrap();
        assert!(a.mask.iter().all(|&m| m == 0));
        assert!(a.spans.is_empty());
    }

    #[test]
    fn pool_entry_is_marked_exactly() {
        let mut pool = EntityPool::new("p");
        pool.entries.insert(SlotType::Ip, vec!["10.0.0.1".to_string()]);
        let text = "addr 10.0.0.1 end";
        let a = annotate(text, &AnnotatorSpec::default(), &[&pool]).unwrap();
        assert_eq!(a.spans, vec![(5, 13)]);
        // Exhaustive check: token t covers byte t−1.
        for b in 0..text.len() {
            let expect = (5..13).contains(&b) as u8;
            assert_eq!(a.mask[b + 1], expect, "byte {b}");
        }
        assert_eq!(a.mask[0], 0);
        assert_eq!(*a.mask.last().unwrap(), 0);
    }

    #[test]
    fn regexes_cover_all_slot_types() {
        let text = "u mara52 ip 10.2.3.4 at 2024-03-17 call 555-123-4567 mail a9@b.io";
        let spans = builtin_spans(text, &[]);
        for needle in ["mara52", "10.2.3.4", "2024-03-17", "555-123-4567", "a9@b.io"] {
            let at = text.find(needle).unwrap();
            assert!(
                spans.iter().any(|&(s, e)| s <= at && at + needle.len() <= e),
                "'{needle}' not covered by {spans:?}"
            );
        }
    }

    #[test]
    fn disjoint_entities_produce_disjoint_runs() {
        let text = "a 10.0.0.1 b 10.0.0.2 c";
        let a = annotate(text, &AnnotatorSpec::default(), &[]).unwrap();
        assert_eq!(a.spans.len(), 2);
        let recovered = token_mask_to_spans(text, &a.mask);
        assert_eq!(recovered, a.spans);
    }

    #[test]
    fn mask_span_roundtrip_on_normalized_spans() {
        let text = "0123456789abcdef";
        let spans = normalize_spans(vec![(2, 5), (4, 8), (12, 14)], text.len());
        let mask = spans_to_token_mask(text, &spans);
        assert_eq!(token_mask_to_spans(text, &mask), spans);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(annotate("", &AnnotatorSpec::default(), &[]).is_err());
    }

    #[test]
    fn external_without_endpoint_is_config_error() {
        let spec = AnnotatorSpec {
            kind: AnnotatorKind::ExternalLlm,
            ..AnnotatorSpec::default()
        };
        assert!(matches!(
            annotate("text", &spec, &[]),
            Err(Error::Config(_))
        ));
    }
}
