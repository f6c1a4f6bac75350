//! FewRel ingestion: instances, datasets, vocabulary, entity-relative
//! positions and the five-phrase segmentation.

mod fewrel;
mod segment;
mod vocab;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fewrel::{load_fewrel, parse_fewrel, write_fewrel};
pub use segment::{
    encode_positions, position_index, segment_instance, FiveSegments, PositionFeatures, PreparedDataset,
    PreparedInstance, Segment, SegmentLayout,
};
pub use vocab::{build_vocab, build_vocab_from_reader, Vocab};

/// Inclusive token index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// One pre-tokenized sentence with its marked head and tail entities.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedInstance {
    pub tokens: Vec<String>,
    pub head: Span,
    pub tail: Span,
    pub relation: String,
}

impl TokenizedInstance {
    pub fn new(tokens: Vec<String>, head: Span, tail: Span, relation: impl Into<String>) -> Result<Self> {
        let inst = TokenizedInstance {
            tokens,
            head,
            tail,
            relation: relation.into(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "instance has {n} tokens, need at least 2"
            )));
        }
        for (name, s) in [("head", self.head), ("tail", self.tail)] {
            if s.start > s.end || s.end >= n {
                return Err(Error::InvalidArgument(format!(
                    "{name} span [{}, {}] invalid for {n} tokens",
                    s.start, s.end
                )));
            }
        }
        if self.head.overlaps(&self.tail) {
            return Err(Error::InvalidArgument("head and tail spans overlap".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Drops non-entity tokens until at most `cap` remain. Entity tokens are
    /// always kept; among the rest, the earliest survive.
    pub fn truncated(&self, cap: usize) -> TokenizedInstance {
        if self.tokens.len() <= cap {
            return self.clone();
        }
        let entity_count = self.head.len() + self.tail.len();
        let mut budget = cap.saturating_sub(entity_count);
        let mut keep = Vec::with_capacity(cap);
        for i in 0..self.tokens.len() {
            if self.head.contains(i) || self.tail.contains(i) {
                keep.push(i);
            } else if budget > 0 {
                budget -= 1;
                keep.push(i);
            }
        }
        let remap = |i: usize| keep.binary_search(&i).expect("entity token kept");
        TokenizedInstance {
            tokens: keep.iter().map(|&i| self.tokens[i].clone()).collect(),
            head: Span::new(remap(self.head.start), remap(self.head.end)),
            tail: Span::new(remap(self.tail.start), remap(self.tail.end)),
            relation: self.relation.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub id: String,
    pub instances: Vec<TokenizedInstance>,
}

/// Instances grouped by relation, ordered by relation id.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationDataset {
    pub split: Split,
    relations: Vec<Relation>,
    /// Instances skipped at load because head and tail overlapped.
    pub dropped_overlapping: usize,
}

impl RelationDataset {
    pub fn new(split: Split, mut relations: Vec<Relation>) -> Result<Self> {
        relations.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = relations.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidArgument(format!("duplicate relation {:?}", w[0].id)));
        }
        Ok(RelationDataset {
            split,
            relations,
            dropped_overlapping: 0,
        })
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = &str> {
        self.relations.iter().map(|r| r.id.as_str())
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_instances(&self) -> usize {
        self.relations.iter().map(|r| r.instances.len()).sum()
    }

    pub fn get(&self, relation: &str) -> Option<&Relation> {
        self.relations
            .binary_search_by(|r| r.id.as_str().cmp(relation))
            .ok()
            .map(|i| &self.relations[i])
    }

    pub fn instances(&self) -> impl Iterator<Item = &TokenizedInstance> {
        self.relations.iter().flat_map(|r| r.instances.iter())
    }
}

/// Fails when any relation id appears in more than one dataset.
pub fn assert_disjoint(datasets: &[&RelationDataset]) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut overlap = BTreeSet::new();
    for d in datasets {
        for id in d.relation_ids() {
            if !seen.insert(id) {
                overlap.insert(id.to_string());
            }
        }
    }
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::SplitOverlap(overlap.into_iter().collect()))
    }
}

/// Moves `n_holdout` seeded-uniformly chosen relations into a second
/// dataset tagged as a test split.
pub fn split_holdout(
    dataset: &RelationDataset,
    n_holdout: usize,
    seed: u64,
) -> Result<(RelationDataset, RelationDataset)> {
    let n = dataset.num_relations();
    if n_holdout >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {n_holdout} of {n} relations"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = sample(&mut rng, n, n_holdout).into_iter().collect();
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for (i, r) in dataset.relations.iter().enumerate() {
        if chosen.contains(&i) {
            held.push(r.clone());
        } else {
            kept.push(r.clone());
        }
    }
    let reduced = RelationDataset {
        split: dataset.split,
        relations: kept,
        dropped_overlapping: dataset.dropped_overlapping,
    };
    let holdout = RelationDataset {
        split: Split::Test,
        relations: held,
        dropped_overlapping: 0,
    };
    Ok((reduced, holdout))
}
