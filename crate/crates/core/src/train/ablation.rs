use std::io::Write;
use std::path::Path;

use super::{evaluate, train, EvalMethod, Objective, ReportRow, TrainConfig};
use crate::data::{split_holdout, PreparedDataset, RelationDataset, Vocab};
use crate::encoder::EncoderMode;
use crate::error::{Error, Result};
use crate::fewshot::EpisodeSpec;

/// The four evaluation settings, as (N, K).
pub const ABLATION_SETTINGS: [(usize, usize); 4] = [(5, 1), (5, 5), (10, 1), (10, 5)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub objective: Objective,
    pub encoder: EncoderMode,
}

impl AblationVariant {
    pub fn name(&self) -> String {
        let base = match self.objective {
            Objective::Softmax => "ProtoNet",
            Objective::SoftmaxTriplet => "LM-ProtoNet",
        };
        format!("{base} ({})", self.encoder.label())
    }
}

pub fn ablation_variants() -> [AblationVariant; 4] {
    let v = |objective, encoder| AblationVariant { objective, encoder };
    [
        v(Objective::Softmax, EncoderMode::Cnn),
        v(Objective::Softmax, EncoderMode::Fgf),
        v(Objective::SoftmaxTriplet, EncoderMode::Cnn),
        v(Objective::SoftmaxTriplet, EncoderMode::Fgf),
    ]
}

/// Splits `val_set` into a model-selection part and an `n_holdout`-relation
/// test part, trains every variant with the same seed and budget, and
/// evaluates each on the holdout in all four settings.
///
/// Settings that need more relations than the holdout has are reported with
/// zero episodes and no accuracy.
pub fn run_ablation(
    base: &TrainConfig,
    train_set: &RelationDataset,
    val_set: &RelationDataset,
    vocab: &Vocab,
    n_holdout: usize,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<ReportRow>> {
    let (selection, holdout) = split_holdout(val_set, n_holdout, seed)?;
    let mut rows = Vec::with_capacity(16);
    for variant in ablation_variants() {
        let mut config = base.with_variant(variant.objective, variant.encoder);
        config.seed = seed;
        writeln!(log, "# {}", variant.name()).map_err(|e| Error::io(Path::new("<progress log>"), e))?;
        let outcome = train(&config, train_set, &selection, vocab, log)?;
        let params = &outcome.checkpoint.params;
        let data = PreparedDataset::new(&holdout, vocab, config.model.max_len, config.model.max_rel);
        for (n_way, k_shot) in ABLATION_SETTINGS {
            let spec = EpisodeSpec {
                n_way,
                k_shot,
                n_query: config.val_episode.n_query,
            };
            if n_way > holdout.num_relations() {
                log::warn!(
                    "{}: {} skipped, holdout has only {} relations",
                    variant.name(),
                    spec.label(),
                    holdout.num_relations()
                );
                rows.push(ReportRow {
                    model: variant.name(),
                    setting: spec.label(),
                    n_episodes: 0,
                    accuracy: None,
                    ci95: None,
                    seed,
                });
                continue;
            }
            let mut report = evaluate(
                params,
                &holdout,
                &data,
                &spec,
                config.eval_episodes,
                seed,
                EvalMethod::Prototype,
            )?;
            report.model = variant.name();
            rows.push(report.row());
        }
    }
    Ok(rows)
}
