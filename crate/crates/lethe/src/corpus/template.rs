//! Templates with typed slots and the entity pools that fill them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entity categories a slot can hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotType {
    Ip,
    Email,
    Username,
    Phone,
    Date,
}

impl SlotType {
    pub fn name(&self) -> &'static str {
        match self {
            SlotType::Ip => "IP",
            SlotType::Email => "EMAIL",
            SlotType::Username => "USERNAME",
            SlotType::Phone => "PHONE",
            SlotType::Date => "DATE",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "IP" => SlotType::Ip,
            "EMAIL" => SlotType::Email,
            "USERNAME" => SlotType::Username,
            "PHONE" => SlotType::Phone,
            "DATE" => SlotType::Date,
            _ => return None,
        })
    }

    pub fn all() -> &'static [SlotType] {
        &[
            SlotType::Ip,
            SlotType::Email,
            SlotType::Username,
            SlotType::Phone,
            SlotType::Date,
        ]
    }
}

/// A slot's position within the template text (the `{TYPE}` placeholder span).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub ty: SlotType,
    pub start: usize,
    pub end: usize,
}

/// Template text with non-overlapping typed slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub text: String,
    pub slots: Vec<Slot>,
}

impl Template {
    /// Parse `{IP}` / `{EMAIL}` / `{USERNAME}` / `{PHONE}` / `{DATE}`
    /// placeholders out of a pattern string.
    pub fn parse(pattern: &str) -> Result<Template> {
        let mut slots = Vec::new();
        let bytes = pattern.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'{' {
                let close = pattern[i..]
                    .find('}')
                    .map(|o| i + o)
                    .ok_or_else(|| Error::Config(format!("unclosed '{{' at byte {i}")))?;
                let name = &pattern[i + 1..close];
                let ty = SlotType::from_name(name)
                    .ok_or_else(|| Error::Config(format!("unknown slot type '{name}'")))?;
                slots.push(Slot {
                    ty,
                    start: i,
                    end: close + 1,
                });
                i = close + 1;
            } else {
                i += 1;
            }
        }
        Ok(Template {
            text: pattern.to_string(),
            slots,
        })
    }

    pub fn slot_types(&self) -> Vec<SlotType> {
        let mut tys: Vec<SlotType> = self.slots.iter().map(|s| s.ty).collect();
        tys.sort_unstable();
        tys.dedup();
        tys
    }
}

/// A filled entity occurrence: its slot type, byte span, and string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    #[serde(rename = "type")]
    pub ty: SlotType,
    pub start: usize,
    pub end: usize,
    pub string: String,
}

/// A rendered PII sample: text plus ground-truth entity spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiSample {
    pub text: String,
    pub entities: Vec<EntitySpan>,
}

/// A named set of entity strings per slot type. Pools declared disjoint
/// share no string for any slot type — `verify_disjoint` checks, not trusts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPool {
    pub id: String,
    pub entries: BTreeMap<SlotType, Vec<String>>,
    /// Pool this one must stay disjoint from, if any.
    pub disjoint_partner: Option<String>,
}

impl EntityPool {
    pub fn new(id: &str) -> Self {
        EntityPool {
            id: id.to_string(),
            entries: BTreeMap::new(),
            disjoint_partner: None,
        }
    }

    pub fn entries_for(&self, ty: SlotType) -> &[String] {
        self.entries.get(&ty).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, s: &str) -> bool {
        self.entries.values().any(|v| v.iter().any(|e| e == s))
    }

    /// Error if the two pools share any entity string for any slot type.
    pub fn verify_disjoint(&self, other: &EntityPool) -> Result<()> {
        for (ty, entries) in &self.entries {
            let other_entries = other.entries_for(*ty);
            for e in entries {
                if other_entries.iter().any(|o| o == e) {
                    return Err(Error::Disjointness(format!(
                        "pools '{}' and '{}' share {} entity '{}'",
                        self.id,
                        other.id,
                        ty.name(),
                        e
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fill every slot with a pool entity (seeded choice) and return the sample
/// with post-substitution byte spans.
pub fn render(template: &Template, pool: &EntityPool, seed: u64) -> Result<PiiSample> {
    for ty in template.slot_types() {
        if pool.entries_for(ty).is_empty() {
            return Err(Error::Coverage(format!(
                "pool '{}' has no {} entities",
                pool.id,
                ty.name()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(template.text.len());
    let mut entities = Vec::with_capacity(template.slots.len());
    let mut cursor = 0;
    for slot in &template.slots {
        text.push_str(&template.text[cursor..slot.start]);
        let choice = pool
            .entries_for(slot.ty)
            .choose(&mut rng)
            .expect("coverage checked above")
            .clone();
        let start = text.len();
        text.push_str(&choice);
        entities.push(EntitySpan {
            ty: slot.ty,
            start,
            end: text.len(),
            string: choice,
        });
        cursor = slot.end;
    }
    text.push_str(&template.text[cursor..]);
    Ok(PiiSample { text, entities })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_slot_template_passes_through() {
        let t = Template::parse("no slots at all.").unwrap();
        let pool = EntityPool::new("p");
        let s = render(&t, &pool, 0).unwrap();
        assert_eq!(s.text, "no slots at all.");
        assert!(s.entities.is_empty());
    }

    #[test]
    fn singleton_pool_is_forced() {
        let t = Template::parse("addr {IP} end").unwrap();
        let mut pool = EntityPool::new("p");
        pool.entries.insert(SlotType::Ip, vec!["10.0.0.1".to_string()]);
        let s = render(&t, &pool, 7).unwrap();
        assert_eq!(s.text, "addr 10.0.0.1 end");
        assert_eq!(s.entities.len(), 1);
        let e = &s.entities[0];
        assert_eq!(&s.text[e.start..e.end], "10.0.0.1");
    }

    #[test]
    fn render_is_seed_deterministic() {
        let t = Template::parse("u {USERNAME} ip {IP}").unwrap();
        let mut pool = EntityPool::new("p");
        pool.entries.insert(
            SlotType::Ip,
            (0..20).map(|i| format!("10.0.0.{i}")).collect(),
        );
        pool.entries.insert(
            SlotType::Username,
            (0..20).map(|i| format!("user{i}")).collect(),
        );
        assert_eq!(render(&t, &pool, 3).unwrap(), render(&t, &pool, 3).unwrap());
        assert_ne!(render(&t, &pool, 3).unwrap(), render(&t, &pool, 4).unwrap());
    }

    #[test]
    fn missing_slot_type_is_a_coverage_error() {
        let t = Template::parse("mail {EMAIL}").unwrap();
        let pool = EntityPool::new("p");
        assert!(matches!(render(&t, &pool, 0), Err(Error::Coverage(_))));
    }

    #[test]
    fn disjointness_is_verified_not_assumed() {
        let mut a = EntityPool::new("a");
        let mut b = EntityPool::new("b");
        a.entries.insert(SlotType::Ip, vec!["10.0.0.1".into(), "10.0.0.2".into()]);
        b.entries.insert(SlotType::Ip, vec!["10.0.0.3".into()]);
        assert!(a.verify_disjoint(&b).is_ok());
        b.entries.get_mut(&SlotType::Ip).unwrap().push("10.0.0.2".into());
        assert!(matches!(a.verify_disjoint(&b), Err(Error::Disjointness(_))));
    }
}
