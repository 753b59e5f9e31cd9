//! Entity swapping: rebuild a sample's text with every ground-truth entity
//! replaced by a same-type entry from a public pool. The result must contain
//! no injected entity string, so swapped candidates can safely be used as
//! model queries.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::template::{EntityPool, PiiSample};
use crate::error::{Error, Result};

pub fn entity_swap(sample: &PiiSample, public_pool: &EntityPool, seed: u64) -> Result<String> {
    // Disjointness check: none of the sample's entities may live in the
    // public pool.
    for e in &sample.entities {
        if public_pool.contains(&e.string) {
            return Err(Error::Disjointness(format!(
                "public pool '{}' contains injected entity '{}'",
                public_pool.id, e.string
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spans = sample.entities.clone();
    spans.sort_by_key(|e| e.start);

    let mut out = String::with_capacity(sample.text.len());
    let mut cursor = 0;
    for e in &spans {
        if e.start < cursor || e.end > sample.text.len() {
            return Err(Error::Contract(format!(
                "entity span [{}, {}) overlaps or exceeds text",
                e.start, e.end
            )));
        }
        out.push_str(&sample.text[cursor..e.start]);
        let replacement = public_pool
            .entries_for(e.ty)
            .choose(&mut rng)
            .ok_or_else(|| {
                Error::Coverage(format!(
                    "public pool '{}' has no {} entities",
                    public_pool.id,
                    e.ty.name()
                ))
            })?;
        out.push_str(replacement);
        cursor = e.end;
    }
    out.push_str(&sample.text[cursor..]);

    // Postcondition: no original entity string survives anywhere.
    for e in &sample.entities {
        if out.contains(&e.string) {
            return Err(Error::Contract(format!(
                "swap left original entity '{}' in candidate",
                e.string
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::template::{render, SlotType, Template};

    fn pools() -> (EntityPool, EntityPool) {
        let mut private = EntityPool::new("private");
        private
            .entries
            .insert(SlotType::Ip, vec!["10.1.1.1".into(), "10.2.2.2".into()]);
        private
            .entries
            .insert(SlotType::Email, vec!["ada@one.net".into()]);
        let mut public = EntityPool::new("public");
        public
            .entries
            .insert(SlotType::Ip, vec!["77.5.5.5".into(), "88.6.6.6".into()]);
        public
            .entries
            .insert(SlotType::Email, vec!["kit@two.org".into()]);
        (private, public)
    }

    #[test]
    fn swap_removes_all_original_entities() {
        let (private, public) = pools();
        let t = Template::parse("from {IP} mail {EMAIL} done").unwrap();
        let sample = render(&t, &private, 3).unwrap();
        let swapped = entity_swap(&sample, &public, 11).unwrap();
        for e in &sample.entities {
            assert!(!swapped.contains(&e.string), "'{}' survived", e.string);
        }
        assert_ne!(swapped, sample.text);
    }

    #[test]
    fn no_entities_means_unchanged() {
        let (_, public) = pools();
        let sample = PiiSample {
            text: "plain sentence".into(),
            entities: vec![],
        };
        assert_eq!(entity_swap(&sample, &public, 0).unwrap(), "plain sentence");
    }

    #[test]
    fn swap_is_seed_deterministic() {
        let (private, public) = pools();
        let t = Template::parse("a {IP} b").unwrap();
        let sample = render(&t, &private, 5).unwrap();
        assert_eq!(
            entity_swap(&sample, &public, 9).unwrap(),
            entity_swap(&sample, &public, 9).unwrap()
        );
    }

    #[test]
    fn overlapping_pool_is_rejected() {
        let (private, mut public) = pools();
        let t = Template::parse("a {IP} b").unwrap();
        let sample = render(&t, &private, 5).unwrap();
        public
            .entries
            .get_mut(&SlotType::Ip)
            .unwrap()
            .push(sample.entities[0].string.clone());
        assert!(matches!(
            entity_swap(&sample, &public, 0),
            Err(Error::Disjointness(_))
        ));
    }
}
