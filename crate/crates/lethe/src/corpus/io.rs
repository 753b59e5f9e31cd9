//! Line-delimited JSON artifacts. Byte offsets in entity spans are
//! authoritative; text is stored verbatim.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::template::EntitySpan;
use crate::error::Result;

/// One corpus line: sample or background sentence. Background lines carry an
/// empty entity list, group 0, and replication 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    pub entities: Vec<EntitySpan>,
    pub group: usize,
    pub replication: usize,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::template::SlotType;
    use tempfile::tempdir;

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let records = vec![
            CorpusRecord {
                text: "Case mara52: source 10.0.0.1.".into(),
                entities: vec![EntitySpan {
                    ty: SlotType::Ip,
                    start: 20,
                    end: 28,
                    string: "10.0.0.1".into(),
                }],
                group: 10,
                replication: 100,
            },
            CorpusRecord {
                text: "The garden kept the spare keys.".into(),
                entities: vec![],
                group: 0,
                replication: 1,
            },
        ];
        write_jsonl(&path, &records).unwrap();
        let back: Vec<CorpusRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }
}
