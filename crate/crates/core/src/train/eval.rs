use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::data::{PreparedDataset, RelationDataset};
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::fewshot::{classify_query, compute_prototypes, episode_rng, knn_predict, sample_episode, EpisodeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    Prototype,
    /// k-nearest supports; `None` means k = K.
    Knn(Option<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub spec: EpisodeSpec,
    pub n_episodes: usize,
    /// Mean per-episode accuracy, in percent.
    pub accuracy: f64,
    /// Half-width of the normal-approximation 95% interval, in percent.
    pub ci95: f64,
    pub seed: u64,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn row(&self) -> ReportRow {
        ReportRow {
            model: self.model.clone(),
            setting: self.spec.label(),
            n_episodes: self.n_episodes,
            accuracy: Some(self.accuracy),
            ci95: Some(self.ci95),
            seed: self.seed,
        }
    }
}

/// One CSV line of a report; accuracy is absent for settings that could
/// not be run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub setting: String,
    pub n_episodes: usize,
    pub accuracy: Option<f64>,
    pub ci95: Option<f64>,
    pub seed: u64,
}

pub const REPORT_HEADER: &str = "model,setting,n_episodes,accuracy,ci95,seed";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str("# ci95 = 1.96 * sample stdev of per-episode accuracy / sqrt(n_episodes)\n");
    out.push_str(REPORT_HEADER);
    out.push('\n');
    let num = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.model,
            r.setting,
            r.n_episodes,
            num(r.accuracy),
            num(r.ci95),
            r.seed
        );
    }
    out
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Mean and 95% half-width of per-episode accuracies (fractions in, percent
/// out). A single episode has zero spread.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (100.0 * mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (100.0 * mean, 100.0 * 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Accuracy over `n_episodes` seeded episodes. Episode `i` draws from
/// stream `i` of `seed`, and each instance is embedded at most once, so
/// results do not depend on how rayon schedules the work.
pub fn evaluate(
    params: &ModelParams<f32>,
    dataset: &RelationDataset,
    data: &PreparedDataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    method: EvalMethod,
) -> Result<EvalReport> {
    spec.validate()?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    let k = match method {
        EvalMethod::Knn(Some(k)) => Some(k),
        EvalMethod::Knn(None) => Some(spec.k_shot),
        EvalMethod::Prototype => None,
    };
    // fail fast on an unsatisfiable spec
    sample_episode(dataset, spec, &mut episode_rng(seed, 0))?;

    let cache: Vec<Vec<OnceLock<Vec<f32>>>> = data
        .relations
        .iter()
        .map(|r| (0..r.len()).map(|_| OnceLock::new()).collect())
        .collect();
    let embed = |r: usize, i: usize| -> Result<&[f32]> {
        let cell = &cache[r][i];
        if let Some(v) = cell.get() {
            return Ok(v);
        }
        let v = params.embed(&[data.get(r, i)])?.remove(0);
        Ok(cell.get_or_init(|| v))
    };

    let per_episode = (0..n_episodes)
        .into_par_iter()
        .map(|e| -> Result<f64> {
            let ep = sample_episode(dataset, spec, &mut episode_rng(seed, e as u64))?;
            let mut correct = 0usize;
            match k {
                None => {
                    let support = ep
                        .support
                        .iter()
                        .enumerate()
                        .map(|(c, s)| {
                            s.iter()
                                .map(|&i| embed(ep.relations[c], i).map(<[f32]>::to_vec))
                                .collect()
                        })
                        .collect::<Result<Vec<Vec<Vec<f32>>>>>()?;
                    let protos = compute_prototypes(&support)?;
                    for (label, r, i) in ep.labeled_queries() {
                        if classify_query(embed(r, i)?, &protos)?.predicted == label {
                            correct += 1;
                        }
                    }
                }
                Some(k) => {
                    let mut supports = Vec::with_capacity(spec.n_way * spec.k_shot);
                    for (c, s) in ep.support.iter().enumerate() {
                        for &i in s {
                            supports.push((embed(ep.relations[c], i)?.to_vec(), c));
                        }
                    }
                    for (label, r, i) in ep.labeled_queries() {
                        if knn_predict(&supports, embed(r, i)?, k)? == label {
                            correct += 1;
                        }
                    }
                }
            }
            Ok(correct as f64 / ep.num_queries() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let (accuracy, ci95) = mean_ci95(&per_episode);
    let encoder = params.config.encoder.label();
    let model = match k {
        None => format!("ProtoNet ({encoder})"),
        Some(_) => format!("KNN ({encoder})"),
    };
    Ok(EvalReport {
        model,
        spec: *spec,
        n_episodes,
        accuracy,
        ci95,
        seed,
        per_episode,
    })
}

/// [`evaluate`] with the checkpoint's own vocabulary and model name.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &RelationDataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    method: EvalMethod,
) -> Result<EvalReport> {
    let vocab = ckpt.vocab()?;
    let cfg = &ckpt.params.config;
    let data = PreparedDataset::new(dataset, &vocab, cfg.max_len, cfg.max_rel);
    let mut report = evaluate(&ckpt.params, dataset, &data, spec, n_episodes, seed, method)?;
    if method == EvalMethod::Prototype {
        report.model = ckpt.model_name();
    }
    Ok(report)
}
