use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{Relation, RelationDataset, Span, Split, TokenizedInstance};
use crate::error::{Error, Result};

/// Reads a FewRel-format JSON file.
pub fn load_fewrel(path: impl AsRef<Path>, split: Split) -> Result<RelationDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fewrel(&text, split)
}

/// Parses FewRel JSON: `{relation_id: [{"tokens": [...], "h": [surface,
/// kb_id, [[idx...], ...]], "t": [...]}, ...]}`.
///
/// The first mention of each entity defines its span; the first contiguous
/// run of that mention's indices becomes the inclusive span. Instances whose
/// head and tail overlap are dropped and counted.
pub fn parse_fewrel(text: &str, split: Split) -> Result<RelationDataset> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::JsonParse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Object(map) = root else {
        return Err(Error::JsonParse {
            offset: 0,
            message: "top level must be an object of relation id to instances".into(),
        });
    };

    let mut relations = Vec::with_capacity(map.len());
    let mut dropped = 0usize;
    for (rel, items) in map {
        let Value::Array(items) = items else {
            return Err(Error::Instance {
                relation: rel,
                index: 0,
                message: "relation entry must be an array".into(),
            });
        };
        let mut instances = Vec::with_capacity(items.len());
        for (index, item) in items.iter().enumerate() {
            let fail = |message: String| Error::Instance {
                relation: rel.clone(),
                index,
                message,
            };
            let tokens = parse_tokens(item).map_err(fail)?;
            let head = parse_entity(item, "h", tokens.len()).map_err(fail)?;
            let tail = parse_entity(item, "t", tokens.len()).map_err(fail)?;
            if head.overlaps(&tail) {
                dropped += 1;
                continue;
            }
            let inst = TokenizedInstance::new(tokens, head, tail, rel.clone()).map_err(|e| fail(e.to_string()))?;
            instances.push(inst);
        }
        relations.push(Relation { id: rel, instances });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} instances with overlapping head/tail spans");
    }
    let mut dataset = RelationDataset::new(split, relations)?;
    dataset.dropped_overlapping = dropped;
    Ok(dataset)
}

fn parse_tokens(item: &Value) -> std::result::Result<Vec<String>, String> {
    let tokens = item
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or("missing \"tokens\" array")?;
    tokens
        .iter()
        .map(|t| {
            t.as_str()
                .map(String::from)
                .ok_or_else(|| "non-string token".to_string())
        })
        .collect()
}

fn parse_entity(item: &Value, key: &str, n_tokens: usize) -> std::result::Result<Span, String> {
    let entity = item
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| format!("missing {key:?} entity"))?;
    let mentions = entity
        .get(2)
        .and_then(Value::as_array)
        .ok_or_else(|| format!("{key:?} has no mention index lists"))?;
    let first = mentions
        .first()
        .and_then(Value::as_array)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| format!("{key:?} first mention is empty"))?;
    let idx: Vec<usize> = first
        .iter()
        .map(|v| v.as_u64().map(|x| x as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| format!("{key:?} has a non-integer token index"))?;
    let start = idx[0];
    let mut end = start;
    for &i in &idx[1..] {
        if i == end + 1 {
            end = i;
        } else {
            break;
        }
    }
    if end >= n_tokens {
        return Err(format!("{key:?} index {end} out of range for {n_tokens} tokens"));
    }
    Ok(Span::new(start, end))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Serializes a dataset back into FewRel JSON.
pub fn write_fewrel(dataset: &RelationDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut map = Map::new();
    for r in dataset.relations() {
        let items = r
            .instances
            .iter()
            .map(|i| {
                let ent = |s: Span| {
                    let surface = i.tokens[s.start..=s.end].join(" ");
                    json!([surface, "", [(s.start..=s.end).collect::<Vec<_>>()]])
                };
                json!({"tokens": i.tokens, "h": ent(i.head), "t": ent(i.tail)})
            })
            .collect();
        map.insert(r.id.clone(), Value::Array(items));
    }
    let text = serde_json::to_string(&Value::Object(map)).expect("JSON values serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
