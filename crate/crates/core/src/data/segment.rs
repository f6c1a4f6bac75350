use std::ops::Range;

use super::{RelationDataset, TokenizedInstance, Vocab};

pub const R_FRONT: usize = 0;
pub const HEAD: usize = 1;
pub const R_MID: usize = 2;
pub const TAIL: usize = 3;
pub const R_BACK: usize = 4;

/// Token index ranges of the five phrases, in slot order
/// `[r_front, head, r_mid, tail, r_back]`. The head and tail slots always
/// hold the head and tail entities, whichever comes first in the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    pub ranges: [Range<usize>; 5],
    pub head_first: bool,
}

impl SegmentLayout {
    pub fn of(inst: &TokenizedInstance) -> Self {
        let head_first = inst.head.start < inst.tail.start;
        let (first, second) = if head_first {
            (inst.head, inst.tail)
        } else {
            (inst.tail, inst.head)
        };
        SegmentLayout {
            ranges: [
                0..first.start,
                inst.head.start..inst.head.end + 1,
                first.end + 1..second.start,
                inst.tail.start..inst.tail.end + 1,
                second.end + 1..inst.tokens.len(),
            ],
            head_first,
        }
    }

    /// Slot indices in textual order.
    pub fn textual_order(&self) -> [usize; 5] {
        if self.head_first {
            [R_FRONT, HEAD, R_MID, TAIL, R_BACK]
        } else {
            [R_FRONT, TAIL, R_MID, HEAD, R_BACK]
        }
    }
}

/// One phrase as vocabulary ids. `token_index[i]` is the sentence position
/// of `ids[i]`, or `None` for an inserted PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub ids: Vec<usize>,
    pub token_index: Vec<Option<usize>>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_padding(&self) -> bool {
        self.token_index.iter().all(Option::is_none)
    }
}

/// The five phrases of a sentence. Empty relation-mention phrases hold a
/// single PAD id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiveSegments {
    pub segments: [Segment; 5],
    pub layout: SegmentLayout,
}

impl FiveSegments {
    pub fn r_front(&self) -> &Segment {
        &self.segments[R_FRONT]
    }
    pub fn head(&self) -> &Segment {
        &self.segments[HEAD]
    }
    pub fn r_mid(&self) -> &Segment {
        &self.segments[R_MID]
    }
    pub fn tail(&self) -> &Segment {
        &self.segments[TAIL]
    }
    pub fn r_back(&self) -> &Segment {
        &self.segments[R_BACK]
    }

    /// Reassembles the sentence ids in textual order, skipping inserted PADs.
    pub fn textual_ids(&self) -> Vec<usize> {
        self.layout
            .textual_order()
            .iter()
            .flat_map(|&slot| {
                let s = &self.segments[slot];
                s.ids
                    .iter()
                    .zip(&s.token_index)
                    .filter(|(_, ti)| ti.is_some())
                    .map(|(&id, _)| id)
            })
            .collect()
    }
}

pub fn segment_instance(inst: &TokenizedInstance, vocab: &Vocab) -> FiveSegments {
    let layout = SegmentLayout::of(inst);
    let segments = layout.ranges.clone().map(|r| {
        if r.is_empty() {
            Segment {
                ids: vec![vocab.pad()],
                token_index: vec![None],
            }
        } else {
            Segment {
                ids: r.clone().map(|i| vocab.id(&inst.tokens[i])).collect(),
                token_index: r.map(Some).collect(),
            }
        }
    });
    FiveSegments { segments, layout }
}

/// Entity-relative offsets as non-negative table rows:
/// `clip(i - anchor, -max_rel, max_rel) + max_rel`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionFeatures {
    pub head: Vec<usize>,
    pub tail: Vec<usize>,
    pub max_rel: usize,
}

pub fn position_index(token: usize, anchor: usize, max_rel: usize) -> usize {
    let offset = token as i64 - anchor as i64;
    let m = max_rel as i64;
    (offset.clamp(-m, m) + m) as usize
}

pub fn encode_positions(inst: &TokenizedInstance, max_rel: usize) -> PositionFeatures {
    let n = inst.tokens.len();
    PositionFeatures {
        head: (0..n).map(|i| position_index(i, inst.head.start, max_rel)).collect(),
        tail: (0..n).map(|i| position_index(i, inst.tail.start, max_rel)).collect(),
        max_rel,
    }
}

/// A sentence resolved against a vocabulary, ready for encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub word_ids: Vec<usize>,
    pub positions: PositionFeatures,
    pub segments: FiveSegments,
    pub head_start: usize,
    pub tail_start: usize,
}

impl PreparedInstance {
    /// Truncates to `max_len` tokens (entities always kept), then resolves
    /// ids, positions and segments.
    pub fn new(inst: &TokenizedInstance, vocab: &Vocab, max_len: usize, max_rel: usize) -> Self {
        let inst = inst.truncated(max_len);
        PreparedInstance {
            word_ids: inst.tokens.iter().map(|t| vocab.id(t)).collect(),
            positions: encode_positions(&inst, max_rel),
            segments: segment_instance(&inst, vocab),
            head_start: inst.head.start,
            tail_start: inst.tail.start,
        }
    }

    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

/// Prepared instances aligned with a [`RelationDataset`]'s relation order.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub relations: Vec<Vec<PreparedInstance>>,
}

impl PreparedDataset {
    pub fn new(dataset: &RelationDataset, vocab: &Vocab, max_len: usize, max_rel: usize) -> Self {
        PreparedDataset {
            relations: dataset
                .relations()
                .iter()
                .map(|r| {
                    r.instances
                        .iter()
                        .map(|i| PreparedInstance::new(i, vocab, max_len, max_rel))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn get(&self, relation: usize, index: usize) -> &PreparedInstance {
        &self.relations[relation][index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab_from_reader, Relation, Span, Split};
    use proptest::prelude::*;

    fn inst(text: &str, head: (usize, usize), tail: (usize, usize)) -> TokenizedInstance {
        TokenizedInstance::new(
            text.split_whitespace().map(String::from).collect(),
            Span::new(head.0, head.1),
            Span::new(tail.0, tail.1),
            "r",
        )
        .unwrap()
    }

    fn vocab_for(insts: &[TokenizedInstance]) -> Vocab {
        let d = RelationDataset::new(
            Split::Train,
            vec![Relation {
                id: "r".into(),
                instances: insts.to_vec(),
            }],
        )
        .unwrap();
        build_vocab_from_reader::<&[u8]>(&[&d], None, 4, false, 0).unwrap()
    }

    fn words(seg: &Segment, v: &Vocab) -> Vec<String> {
        seg.ids.iter().map(|&i| v.word(i).to_string()).collect()
    }

    #[test]
    fn capital_gate_example() {
        let i = inst(
            "Capital Gate was designed by architectural firm RMJM and was completed in 2011 .",
            (0, 1),
            (7, 7),
        );
        let v = vocab_for(&[i.clone()]);
        let s = segment_instance(&i, &v);
        assert_eq!(words(s.r_front(), &v), vec!["<pad>"]);
        assert_eq!(words(s.head(), &v), vec!["Capital", "Gate"]);
        assert_eq!(
            words(s.r_mid(), &v),
            vec!["was", "designed", "by", "architectural", "firm"]
        );
        assert_eq!(words(s.tail(), &v), vec!["RMJM"]);
        assert_eq!(
            words(s.r_back(), &v),
            vec!["and", "was", "completed", "in", "2011", "."]
        );
    }

    #[test]
    fn boundary_entities_get_padding() {
        let i = inst("a b c d", (0, 0), (3, 3));
        let v = vocab_for(&[i.clone()]);
        let s = segment_instance(&i, &v);
        assert!(s.r_front().is_padding());
        assert!(s.r_back().is_padding());
        assert_eq!(words(s.r_mid(), &v), vec!["b", "c"]);
    }

    #[test]
    fn tail_before_head_keeps_roles() {
        let i = inst("x t y h z", (3, 3), (1, 1));
        let v = vocab_for(&[i.clone()]);
        let s = segment_instance(&i, &v);
        assert_eq!(words(s.head(), &v), vec!["h"]);
        assert_eq!(words(s.tail(), &v), vec!["t"]);
        assert_eq!(words(s.r_front(), &v), vec!["x"]);
        assert_eq!(words(s.r_mid(), &v), vec!["y"]);
        let expected: Vec<usize> = i.tokens.iter().map(|t| v.id(t)).collect();
        assert_eq!(s.textual_ids(), expected);
    }

    #[test]
    fn position_offsets() {
        let i = inst("a b c", (0, 0), (2, 2));
        let p = encode_positions(&i, 5);
        let shift = |v: &[usize]| v.iter().map(|&x| x as i64 - 5).collect::<Vec<_>>();
        assert_eq!(shift(&p.head), vec![0, 1, 2]);
        assert_eq!(shift(&p.tail), vec![-2, -1, 0]);
        let clipped = encode_positions(&i, 1);
        assert_eq!(clipped.head, vec![1, 2, 2]);
        assert_eq!(clipped.tail, vec![0, 0, 1]);
    }

    fn arb_instance() -> impl Strategy<Value = TokenizedInstance> {
        (4usize..30)
            .prop_flat_map(|n| (Just(n), 0..n, 0..n, 1usize..4, 1usize..4))
            .prop_filter_map("non-overlapping spans", |(n, a, b, la, lb)| {
                let ha = Span::new(a, (a + la - 1).min(n - 1));
                let tb = Span::new(b, (b + lb - 1).min(n - 1));
                if ha.overlaps(&tb) {
                    return None;
                }
                let tokens = (0..n).map(|i| format!("w{}", i % 7)).collect();
                TokenizedInstance::new(tokens, ha, tb, "r").ok()
            })
    }

    proptest! {
        #[test]
        fn segments_reconstruct_sentence(i in arb_instance(), max_rel in 1usize..40) {
            let v = vocab_for(&[i.clone()]);
            let s = segment_instance(&i, &v);
            let expected: Vec<usize> = i.tokens.iter().map(|t| v.id(t)).collect();
            prop_assert_eq!(s.textual_ids(), expected);
            prop_assert!(!s.head().is_padding() && !s.tail().is_padding());
            prop_assert!(s.segments.iter().all(|seg| !seg.is_empty()));

            let p = encode_positions(&i, max_rel);
            prop_assert!(p.head.iter().chain(&p.tail).all(|&x| x <= 2 * max_rel));
            prop_assert_eq!(p.head[i.head.start], max_rel);
            prop_assert_eq!(p.tail[i.tail.start], max_rel);
        }
    }
}
