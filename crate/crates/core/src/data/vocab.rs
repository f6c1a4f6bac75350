use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RelationDataset;
use crate::error::{Error, Result};

const RANDOM_ROW_BOUND: f32 = 0.25;

/// Word-to-id mapping plus the initial word-embedding table.
///
/// Ids `0..words.len()` are dataset words in sorted order, followed by UNK
/// and PAD. The PAD row is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    embeddings: Vec<f32>,
    lowercase: bool,
    pretrained_rows: usize,
}

impl Vocab {
    /// Rebuilds a vocabulary from its word list and an embedding table of
    /// `(words.len() + 2) × dim` values.
    pub fn from_parts(words: Vec<String>, dim: usize, embeddings: Vec<f32>, lowercase: bool) -> Result<Self> {
        if embeddings.len() != (words.len() + 2) * dim {
            return Err(Error::shape(
                "vocab",
                format!(
                    "{} words need {} embedding values, got {}",
                    words.len(),
                    (words.len() + 2) * dim,
                    embeddings.len()
                ),
            ));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocab {
            words,
            index,
            dim,
            embeddings,
            lowercase,
            pretrained_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unk(&self) -> usize {
        self.words.len()
    }

    pub fn pad(&self) -> usize {
        self.words.len() + 1
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.embeddings[id * self.dim..(id + 1) * self.dim]
    }

    /// Rows initialised from the pretrained vector file.
    pub fn pretrained_rows(&self) -> usize {
        self.pretrained_rows
    }

    pub fn id(&self, token: &str) -> usize {
        let hit = if self.lowercase {
            self.index.get(&token.to_lowercase())
        } else {
            self.index.get(token)
        };
        hit.copied().unwrap_or(self.unk())
    }

    pub fn word(&self, id: usize) -> &str {
        match id {
            i if i < self.words.len() => &self.words[i],
            i if i == self.unk() => "<unk>",
            _ => "<pad>",
        }
    }
}

/// Builds a vocabulary over every token in `datasets`, seeding rows from an
/// optional pretrained vector file (`word v1 ... vD` per line).
pub fn build_vocab(
    datasets: &[&RelationDataset],
    vectors: Option<&Path>,
    dim: usize,
    lowercase: bool,
    seed: u64,
) -> Result<Vocab> {
    match vectors {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            build_vocab_from_reader(datasets, Some(BufReader::new(file)), dim, lowercase, seed)
        }
        None => build_vocab_from_reader::<BufReader<File>>(datasets, None, dim, lowercase, seed),
    }
}

pub fn build_vocab_from_reader<R: BufRead>(
    datasets: &[&RelationDataset],
    vectors: Option<R>,
    dim: usize,
    lowercase: bool,
    seed: u64,
) -> Result<Vocab> {
    if dim == 0 {
        return Err(Error::InvalidArgument("word dimension must be positive".into()));
    }
    let fold = |t: &str| if lowercase { t.to_lowercase() } else { t.to_string() };
    let words: Vec<String> = datasets
        .iter()
        .flat_map(|d| d.instances())
        .flat_map(|i| i.tokens.iter())
        .map(|t| fold(t))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = words.len() + 2;
    let mut embeddings: Vec<f32> = (0..(v - 1) * dim)
        .map(|_| rng.gen_range(-RANDOM_ROW_BOUND..=RANDOM_ROW_BOUND))
        .collect();
    embeddings.extend(std::iter::repeat_n(0.0, dim));

    let mut vocab = Vocab::from_parts(words, dim, embeddings, lowercase)?;
    if let Some(reader) = vectors {
        vocab.pretrained_rows = load_vectors(&mut vocab, reader)?;
    }
    Ok(vocab)
}

fn load_vectors<R: BufRead>(vocab: &mut Vocab, reader: R) -> Result<usize> {
    let mut file_dim: Option<usize> = None;
    let mut filled = vec![false; vocab.words.len()];
    let mut hits = 0;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::VectorFile {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        // word2vec text files start with a "<count> <dim>" header.
        if line_no == 1 && values.len() == 1 && word.parse::<u64>().is_ok() && values[0].parse::<u64>().is_ok() {
            continue;
        }
        match file_dim {
            None => {
                if values.len() != vocab.dim {
                    return Err(Error::VectorFile {
                        line: line_no,
                        message: format!(
                            "vector dimension {} does not match word dimension {}",
                            values.len(),
                            vocab.dim
                        ),
                    });
                }
                file_dim = Some(values.len());
            }
            Some(d) if d != values.len() => {
                return Err(Error::VectorFile {
                    line: line_no,
                    message: format!("inconsistent dimension {} (expected {d})", values.len()),
                });
            }
            Some(_) => {}
        }
        let key = if vocab.lowercase {
            word.to_lowercase()
        } else {
            word.to_string()
        };
        let Some(&id) = vocab.index.get(&key) else { continue };
        if filled[id] {
            continue;
        }
        let dim = vocab.dim;
        let row = &mut vocab.embeddings[id * dim..(id + 1) * dim];
        for (dst, s) in row.iter_mut().zip(&values) {
            *dst = s.parse().map_err(|_| Error::VectorFile {
                line: line_no,
                message: format!("invalid number {s:?}"),
            })?;
        }
        filled[id] = true;
        hits += 1;
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Relation, Span, Split, TokenizedInstance};

    fn ds(tokens: &[&str]) -> RelationDataset {
        let inst = TokenizedInstance::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            Span::new(0, 0),
            Span::new(tokens.len() - 1, tokens.len() - 1),
            "r",
        )
        .unwrap();
        RelationDataset::new(
            Split::Train,
            vec![Relation {
                id: "r".into(),
                instances: vec![inst],
            }],
        )
        .unwrap()
    }

    #[test]
    fn single_word_vocab() {
        let d = ds(&["the", "The"]);
        let vectors = "the 0.1 0.2 0.3\nother 1 1 1\n";
        let v = build_vocab_from_reader(&[&d], Some(vectors.as_bytes()), 3, true, 1).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("THE"), 0);
        assert_eq!(v.id("missing"), v.unk());
        assert_eq!(v.row(0), &[0.1, 0.2, 0.3]);
        assert_eq!(v.pretrained_rows(), 1);
        assert!(v.row(v.pad()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_rows_are_seeded() {
        let d = ds(&["alpha", "beta"]);
        let a = build_vocab_from_reader::<&[u8]>(&[&d], None, 4, true, 9).unwrap();
        let b = build_vocab_from_reader::<&[u8]>(&[&d], None, 4, true, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.row(0).iter().all(|x| x.abs() <= 0.25));
        let c = build_vocab_from_reader::<&[u8]>(&[&d], None, 4, true, 10).unwrap();
        assert_ne!(a.row(0), c.row(0));
    }

    #[test]
    fn inconsistent_dimension_names_line() {
        let d = ds(&["a", "b"]);
        let vectors = "a 1 2\nb 1 2 3\n";
        match build_vocab_from_reader(&[&d], Some(vectors.as_bytes()), 2, true, 0) {
            Err(Error::VectorFile { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn word2vec_header_skipped() {
        let d = ds(&["a", "b"]);
        let vectors = "2 2\na 1 2\nb 3 4\n";
        let v = build_vocab_from_reader(&[&d], Some(vectors.as_bytes()), 2, true, 0).unwrap();
        assert_eq!(v.row(v.id("b")), &[3.0, 4.0]);
    }
}
