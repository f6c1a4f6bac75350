//! Small synthetic FewRel-style corpora for smoke tests and demos.
//!
//! In a marker corpus every relation owns one marker word, placed right
//! after the head entity; the rest of the sentence is filler and entity
//! names shared by all relations. An unsignaled corpus uses the same
//! template with a filler word in the marker slot, so labels carry no
//! information about the text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Relation, RelationDataset, Span, Split, TokenizedInstance};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub relations: usize,
    pub instances_per_relation: usize,
    /// Relation ids are `{prefix}{index}`; distinct prefixes give disjoint
    /// splits.
    pub prefix: String,
    /// Marker words are `marker_{marker_prefix}{index}`. Two splits with the
    /// same marker prefix share templates but not relation ids.
    pub marker_prefix: String,
    pub marker: bool,
    /// Inclusive filler-run length range used before, between and after
    /// the entities.
    pub filler_run: (usize, usize),
    pub filler_words: usize,
    pub entity_names: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn marker(relations: usize, instances_per_relation: usize, prefix: &str, seed: u64) -> Self {
        SyntheticSpec {
            relations,
            instances_per_relation,
            prefix: prefix.to_string(),
            marker_prefix: prefix.to_string(),
            marker: true,
            filler_run: (3, 8),
            filler_words: 40,
            entity_names: 40,
            seed,
        }
    }

    pub fn with_markers_of(mut self, marker_prefix: &str) -> Self {
        self.marker_prefix = marker_prefix.to_string();
        self
    }

    pub fn with_filler_run(mut self, lo: usize, hi: usize) -> Self {
        self.filler_run = (lo, hi.max(lo));
        self
    }

    pub fn unsignaled(relations: usize, instances_per_relation: usize, prefix: &str, seed: u64) -> Self {
        SyntheticSpec {
            marker: false,
            ..Self::marker(relations, instances_per_relation, prefix, seed)
        }
    }
}

pub fn marker_word(prefix: &str, relation: usize) -> String {
    format!("marker_{}{relation}", prefix.to_lowercase())
}

pub fn generate(spec: &SyntheticSpec, split: Split) -> Result<RelationDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let filler: Vec<String> = (0..spec.filler_words).map(|i| format!("w{i}")).collect();
    let names: Vec<String> = (0..spec.entity_names).map(|i| format!("entity{i}")).collect();
    let mut relations = Vec::with_capacity(spec.relations);
    for r in 0..spec.relations {
        let id = format!("{}{r}", spec.prefix);
        let mut instances = Vec::with_capacity(spec.instances_per_relation);
        for _ in 0..spec.instances_per_relation {
            let (lo, hi) = spec.filler_run;
            let n_front = rng.gen_range(lo..=hi);
            let n_mid = rng.gen_range(lo..=hi);
            let n_back = rng.gen_range(lo..=hi);
            let mut tokens = Vec::new();
            for _ in 0..n_front {
                tokens.push(filler.choose(&mut rng).unwrap().clone());
            }
            let head = tokens.len();
            tokens.push(names.choose(&mut rng).unwrap().clone());
            if spec.marker {
                tokens.push(marker_word(&spec.marker_prefix, r));
            } else {
                tokens.push(filler.choose(&mut rng).unwrap().clone());
            }
            for _ in 0..n_mid {
                tokens.push(filler.choose(&mut rng).unwrap().clone());
            }
            let tail = tokens.len();
            tokens.push(names.choose(&mut rng).unwrap().clone());
            for _ in 0..n_back {
                tokens.push(filler.choose(&mut rng).unwrap().clone());
            }
            instances.push(TokenizedInstance::new(
                tokens,
                Span::new(head, head),
                Span::new(tail, tail),
                id.clone(),
            )?);
        }
        relations.push(Relation { id, instances });
    }
    RelationDataset::new(split, relations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_markers() {
        let d = generate(&SyntheticSpec::marker(10, 20, "T", 1), Split::Train).unwrap();
        assert_eq!(d.num_relations(), 10);
        assert_eq!(d.num_instances(), 200);
        for r in d.relations() {
            let idx: usize = r.id[1..].parse().unwrap();
            for i in &r.instances {
                assert_eq!(i.tokens[i.head.end + 1], marker_word("T", idx));
            }
        }
        let u = generate(&SyntheticSpec::unsignaled(5, 10, "U", 1), Split::Val).unwrap();
        assert!(u.instances().all(|i| i.tokens.iter().all(|t| !t.starts_with("marker"))));
        let a = generate(&SyntheticSpec::marker(3, 4, "T", 9), Split::Train).unwrap();
        assert_eq!(a, generate(&SyntheticSpec::marker(3, 4, "T", 9), Split::Train).unwrap());
    }
}
