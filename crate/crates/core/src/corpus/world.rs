//! Seeded synthetic knowledge base: entities with one type each and a
//! functional set of `(head, relation) → tail` facts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSizes {
    pub entities: usize,
    pub relations: usize,
    pub types: usize,
    pub triples: usize,
}

impl Default for WorldSizes {
    fn default() -> Self {
        WorldSizes {
            entities: 200,
            relations: 20,
            types: 10,
            triples: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub sizes: WorldSizes,
    triples: Vec<Triple>,
    lookup: BTreeMap<(usize, usize), usize>,
    types: Vec<usize>,
}

impl SyntheticWorld {
    pub fn build(seed: u64, sizes: WorldSizes) -> Result<Self> {
        if sizes.entities < 2 || sizes.relations == 0 || sizes.types == 0 || sizes.triples == 0 {
            return Err(Error::Config(format!("world sizes must be positive: {sizes:?}")));
        }
        let slots = sizes.entities * sizes.relations;
        if sizes.triples > slots {
            return Err(Error::Config(format!(
                "{} triples cannot be functional over {} entities × {} relations",
                sizes.triples, sizes.entities, sizes.relations
            )));
        }
        if sizes.entities > 1000 || sizes.relations > 100 || sizes.types > 100 {
            return Err(Error::Config("token naming supports ≤1000 entities, ≤100 relations and types".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let types: Vec<usize> = (0..sizes.entities).map(|_| rng.gen_range(0..sizes.types)).collect();
        let mut pairs = index::sample(&mut rng, slots, sizes.triples).into_vec();
        pairs.sort_unstable();
        let mut triples = Vec::with_capacity(sizes.triples);
        let mut lookup = BTreeMap::new();
        for slot in pairs {
            let head = slot / sizes.relations;
            let relation = slot % sizes.relations;
            // tails never equal the head
            let mut tail = rng.gen_range(0..sizes.entities - 1);
            if tail >= head {
                tail += 1;
            }
            lookup.insert((head, relation), triples.len());
            triples.push(Triple { head, relation, tail });
        }
        Ok(SyntheticWorld {
            seed,
            sizes,
            triples,
            lookup,
            types,
        })
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn tail(&self, head: usize, relation: usize) -> Option<usize> {
        self.lookup.get(&(head, relation)).map(|&i| self.triples[i].tail)
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tail(t.head, t.relation) == Some(t.tail)
    }

    pub fn entity_type(&self, entity: usize) -> usize {
        self.types[entity]
    }

    /// Relations with an outgoing fact from `head`, ascending.
    pub fn relations_of(&self, head: usize) -> Vec<usize> {
        self.lookup
            .range((head, 0)..(head + 1, 0))
            .map(|(&(_, r), _)| r)
            .collect()
    }

    pub fn entity_token(&self, e: usize) -> String {
        format!("e{e:03}")
    }

    pub fn relation_token(&self, r: usize) -> String {
        format!("r{r:02}")
    }

    pub fn type_token(&self, t: usize) -> String {
        format!("t{t:02}")
    }

    pub fn parse_entity(&self, tok: &str) -> Option<usize> {
        parse_prefixed(tok, 'e').filter(|&e| e < self.sizes.entities)
    }

    pub fn parse_relation(&self, tok: &str) -> Option<usize> {
        parse_prefixed(tok, 'r').filter(|&r| r < self.sizes.relations)
    }

    pub fn triple_text(&self, t: &Triple) -> String {
        format!(
            "{} {} {}",
            self.entity_token(t.head),
            self.relation_token(t.relation),
            self.entity_token(t.tail)
        )
    }

    /// Every token the generators can emit for this world.
    pub fn all_tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = super::generators::TEMPLATE_WORDS.iter().map(|s| String::from(*s)).collect();
        out.extend(super::generators::FLAGS.iter().map(|s| String::from(*s)));
        out.extend((0..self.sizes.entities).map(|e| self.entity_token(e)));
        out.extend((0..self.sizes.relations).map(|r| self.relation_token(r)));
        out.extend((0..self.sizes.types).map(|t| self.type_token(t)));
        out
    }
}

fn parse_prefixed(tok: &str, prefix: char) -> Option<usize> {
    let rest = tok.strip_prefix(prefix)?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}
