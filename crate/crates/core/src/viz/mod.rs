//! Embedding export, exact t-SNE and SVG scatter plots.
//!
//! Every CSV written here starts with `#` comment lines recording the seed
//! and other provenance; readers skip them.

mod svg;
mod tsne;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{PreparedDataset, RelationDataset};
use crate::error::{Error, Result};
use crate::fewshot::{episode_rng, sample_episode, EpisodeSpec};
use crate::train::Checkpoint;

pub use svg::{render_scatter, scatter_svg, PALETTE};
pub use tsne::{joint_probabilities, kl_divergence, tsne_project, TsneConfig, MAX_POINTS};

/// Rows of embeddings with an instance id and class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f32>>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut header = vec!["instance_id".to_string(), "class".to_string()];
        header.extend((0..self.dim()).map(|d| format!("dim_{d}")));
        let records = self.ids.iter().zip(&self.labels).zip(&self.rows).map(|((id, l), r)| {
            let mut rec = vec![id.clone(), l.clone()];
            rec.extend(r.iter().map(|v| v.to_string()));
            rec
        });
        write_csv(path, comments, &header, records)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, records) = read_csv(path)?;
        if header.len() < 3 || header[0] != "instance_id" || header[1] != "class" {
            return Err(Error::Csv {
                line: 1,
                message: "expected header instance_id,class,dim_0,...".into(),
            });
        }
        let mut m = EmbeddingMatrix {
            ids: Vec::new(),
            labels: Vec::new(),
            rows: Vec::new(),
        };
        for (line, rec) in records {
            m.ids.push(rec[0].clone());
            m.labels.push(rec[1].clone());
            let row = rec[2..]
                .iter()
                .map(|v| parse_finite(v, line).map(|x| x as f32))
                .collect::<Result<Vec<f32>>>()?;
            m.rows.push(row);
        }
        Ok(m)
    }
}

fn parse_finite(v: &str, line: usize) -> Result<f64> {
    match v.trim().parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::Csv {
            line,
            message: format!("not a finite number: {v:?}"),
        }),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv {
            line: 0,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

fn write_csv<I>(path: &Path, comments: &[String], header: &[String], records: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for c in comments {
        writeln!(out, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for rec in records {
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header and records (with 1-based file line numbers) of a CSV file,
/// skipping `#` comment lines.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| match e.position() {
            Some(p) => Error::Csv {
                line: p.line() as usize,
                message: e.to_string(),
            },
            None => csv_err(path, e),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Csv {
                line,
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        records.push((line, rec.iter().map(String::from).collect()));
    }
    Ok((header, records))
}

/// 2-D coordinates with the labels they were projected from.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub coords: Vec<[f64; 2]>,
}

impl Projection {
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let header = ["instance_id", "class", "x", "y"].map(String::from);
        let records = self
            .ids
            .iter()
            .zip(&self.labels)
            .zip(&self.coords)
            .map(|((id, l), c)| vec![id.clone(), l.clone(), c[0].to_string(), c[1].to_string()]);
        write_csv(path, comments, &header, records)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, records) = read_csv(path)?;
        if header != ["instance_id", "class", "x", "y"] {
            return Err(Error::Csv {
                line: 1,
                message: "expected header instance_id,class,x,y".into(),
            });
        }
        let mut p = Projection {
            ids: Vec::new(),
            labels: Vec::new(),
            coords: Vec::new(),
        };
        for (line, rec) in records {
            p.ids.push(rec[0].clone());
            p.labels.push(rec[1].clone());
            p.coords
                .push([parse_finite(&rec[2], line)?, parse_finite(&rec[3], line)?]);
        }
        Ok(p)
    }
}

pub fn project(matrix: &EmbeddingMatrix, cfg: &TsneConfig) -> Result<Projection> {
    Ok(Projection {
        ids: matrix.ids.clone(),
        labels: matrix.labels.clone(),
        coords: tsne_project(&matrix.rows_f64(), cfg)?,
    })
}

/// Encodes the support set of one seeded `N`-way-`K`-shot episode (stream 0
/// of `seed`). Instance ids are `relation:index`.
pub fn export_embeddings(
    ckpt: &Checkpoint,
    dataset: &RelationDataset,
    n_way: usize,
    k_shot: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let spec = EpisodeSpec::support_only(n_way, k_shot);
    let episode = sample_episode(dataset, &spec, &mut episode_rng(seed, 0))?;
    let vocab = ckpt.vocab()?;
    let cfg = &ckpt.params.config;
    let data = PreparedDataset::new(dataset, &vocab, cfg.max_len, cfg.max_rel);
    let mut m = EmbeddingMatrix {
        ids: Vec::new(),
        labels: Vec::new(),
        rows: Vec::new(),
    };
    for (c, shots) in episode.support.iter().enumerate() {
        let r = episode.relations[c];
        let relation = &dataset.relations()[r].id;
        let insts: Vec<_> = shots.iter().map(|&i| data.get(r, i)).collect();
        let rows = ckpt.params.embed(&insts)?;
        for (&i, row) in shots.iter().zip(rows) {
            m.ids.push(format!("{relation}:{i}"));
            m.labels.push(relation.clone());
            m.rows.push(row);
        }
    }
    Ok(m)
}
