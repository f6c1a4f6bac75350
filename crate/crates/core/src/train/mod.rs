//! Episodic training with validation-based model selection, evaluation,
//! checkpoints and the four-variant ablation grid.

mod ablation;
mod checkpoint;
mod eval;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assert_disjoint, PreparedDataset, RelationDataset, Vocab};
use crate::encoder::{EncoderMode, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::fewshot::{
    combined_loss, embed_episode, episode_rng, sample_episode, EpisodeGraph, EpisodeSpec, LossConfig,
};
use crate::tensor::{OptimizerKind, OptimizerState, Tape};

pub use ablation::{ablation_variants, run_ablation, AblationVariant, ABLATION_SETTINGS};
pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use eval::{
    evaluate, evaluate_checkpoint, mean_ci95, report_csv, write_report_csv, EvalMethod, EvalReport, ReportRow,
    REPORT_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Plain prototypical network.
    Softmax,
    /// Softmax cross-entropy plus the prototype-anchored triplet margin.
    SoftmaxTriplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerAlgorithm {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: OptimizerAlgorithm,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every this many
    /// episodes; 0 disables the schedule.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: OptimizerAlgorithm::Sgd,
            learning_rate: 0.1,
            weight_decay: 1e-5,
            decay_every: 20_000,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn kind(&self) -> OptimizerKind {
        match self.algorithm {
            OptimizerAlgorithm::Sgd => OptimizerKind::Sgd,
            OptimizerAlgorithm::Adam => OptimizerKind::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
        }
    }

    /// Learning rate in effect after `episodes_done` training episodes.
    pub fn learning_rate_at(&self, episodes_done: usize) -> f64 {
        if self.decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.decay_factor.powi((episodes_done / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Pretrained word vectors in GloVe text format.
    pub vectors: Option<PathBuf>,
}

/// Everything that determines a training run. Read from JSON; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: Objective,
    pub loss: LossConfig,
    pub train_episode: EpisodeSpec,
    pub episodes: usize,
    pub eval_every: usize,
    pub val_episode: EpisodeSpec,
    pub val_episodes: usize,
    pub eval_episodes: usize,
    /// Episodes whose losses are averaged into one optimizer step.
    pub episodes_per_step: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            objective: Objective::SoftmaxTriplet,
            loss: LossConfig::default(),
            train_episode: EpisodeSpec {
                n_way: 10,
                k_shot: 1,
                n_query: 5,
            },
            episodes: 30_000,
            eval_every: 2_000,
            val_episode: EpisodeSpec {
                n_way: 5,
                k_shot: 1,
                n_query: 5,
            },
            val_episodes: 1_000,
            eval_episodes: 10_000,
            episodes_per_step: 1,
            optimizer: OptimizerConfig::default(),
            seed: 42,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train_episode.validate()?;
        self.val_episode.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.episodes == 0 {
            return bad("episodes must be at least 1");
        }
        if self.eval_every == 0 || self.eval_every > self.episodes {
            return bad("eval_every must lie in 1..=episodes");
        }
        if self.val_episodes == 0 || self.eval_episodes == 0 {
            return bad("val_episodes and eval_episodes must be at least 1");
        }
        if self.episodes_per_step == 0 {
            return bad("episodes_per_step must be at least 1");
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad("optimizer.learning_rate must be positive");
        }
        if !(o.weight_decay >= 0.0) {
            return bad("optimizer.weight_decay must be >= 0");
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) {
            return bad("optimizer.decay_factor must lie in (0, 1]");
        }
        Ok(())
    }

    /// Loss weights actually used: λ is forced to 0 for the softmax objective.
    pub fn effective_loss(&self) -> LossConfig {
        match self.objective {
            Objective::Softmax => LossConfig {
                lambda: 0.0,
                ..self.loss
            },
            Objective::SoftmaxTriplet => self.loss,
        }
    }

    pub fn with_variant(&self, objective: Objective, encoder: EncoderMode) -> TrainConfig {
        let mut c = self.clone();
        c.objective = objective;
        c.model.encoder = encoder;
        c
    }
}

/// Seed for a named sub-stream of `master`.
pub fn derive_seed(master: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(purpose);
    rng.next_u64()
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

/// Seed of the fixed validation episode stream used for model selection.
pub fn validation_seed(config: &TrainConfig) -> u64 {
    derive_seed(config.seed, VAL_STREAM)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub episode: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    /// Validation accuracy in percent.
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LogEntry>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f32>,
}

/// Runs episodic training and returns the parameters with the best
/// validation accuracy (earliest on ties). Progress lines
/// `episode\tloss\tval_acc` go to `log`.
pub fn train(
    config: &TrainConfig,
    train_set: &RelationDataset,
    val_set: &RelationDataset,
    vocab: &Vocab,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    assert_disjoint(&[train_set, val_set])?;
    let mc = &config.model;
    let mut params = ModelParams::<f32>::new(mc.clone(), vocab, config.seed)?;
    let train_data = PreparedDataset::new(train_set, vocab, mc.max_len, mc.max_rel);
    let val_data = PreparedDataset::new(val_set, vocab, mc.max_len, mc.max_rel);
    // surface unsatisfiable specs before any work
    sample_episode(train_set, &config.train_episode, &mut episode_rng(0, 0))?;
    sample_episode(val_set, &config.val_episode, &mut episode_rng(0, 0))?;

    let loss_cfg = config.effective_loss();
    let train_seed = derive_seed(config.seed, TRAIN_STREAM);
    let val_seed = validation_seed(config);
    let mut opt = OptimizerState::<f32>::new(
        config.optimizer.kind(),
        config.optimizer.learning_rate,
        config.optimizer.weight_decay,
    );

    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let mut since_log = (0.0f64, 0usize);
    let mut done = 0usize;
    while done < config.episodes {
        let batch_end = (done + config.episodes_per_step).min(config.episodes);
        let mut tape = Tape::new(&params.store);
        let mut totals = Vec::with_capacity(batch_end - done);
        let mut parts_list = Vec::with_capacity(batch_end - done);
        for e in done..batch_end {
            let ep = sample_episode(train_set, &config.train_episode, &mut episode_rng(train_seed, e as u64))?;
            let emb = embed_episode(&mut tape, &params, &ep, &train_data)?;
            let graph = EpisodeGraph::build(&mut tape, &emb)?;
            let parts = combined_loss(&mut tape, &graph, &loss_cfg)?;
            totals.push(parts.total);
            parts_list.push((e, parts));
        }
        let total = if totals.len() == 1 {
            totals[0]
        } else {
            tape.mean(&totals)?
        };
        let value = tape.scalar(total);
        if !value.is_finite() {
            let (e, parts) = parts_list
                .iter()
                .find(|(_, p)| !tape.scalar(p.total).is_finite())
                .copied()
                .unwrap_or(parts_list[0]);
            return Err(Error::NonFiniteLoss {
                episode: e as u64,
                seed: config.seed,
                softmax: tape.scalar(parts.softmax) as f64,
                triplet: parts.triplet.map_or(0.0, |t| tape.scalar(t) as f64),
            });
        }
        let grads = tape.backward(total)?;
        drop(tape);
        params.store.accumulate(&grads);
        opt.learning_rate = config.optimizer.learning_rate_at(done);
        opt.apply(&mut params.store)?;
        step_losses.push(value);
        since_log.0 += value as f64;
        since_log.1 += 1;

        let crossed = batch_end / config.eval_every > done / config.eval_every;
        done = batch_end;
        if crossed || done == config.episodes {
            let report = evaluate(
                &params,
                val_set,
                &val_data,
                &config.val_episode,
                config.val_episodes,
                val_seed,
                EvalMethod::Prototype,
            )?;
            let entry = LogEntry {
                episode: done,
                loss: since_log.0 / since_log.1 as f64,
                val_accuracy: report.accuracy,
            };
            since_log = (0.0, 0);
            writeln!(log, "{}\t{:.6}\t{:.4}", entry.episode, entry.loss, entry.val_accuracy)
                .and_then(|_| log.flush())
                .map_err(|e| Error::io(Path::new("<progress log>"), e))?;
            log::info!(
                "episode {done}: loss {:.4}, val acc {:.2}%",
                entry.loss,
                entry.val_accuracy
            );
            if best.as_ref().is_none_or(|(acc, _, _)| entry.val_accuracy > *acc) {
                best = Some((entry.val_accuracy, done, params.clone()));
            }
            history.push(entry);
        }
    }

    let (best_acc, best_episode, best_params) = best.expect("at least one validation pass");
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            config: config.clone(),
            vocab: vocab.words().to_vec(),
            episodes_trained: done,
            best_episode,
            best_val_accuracy: Some(best_acc),
        },
        params: best_params,
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        step_losses,
    })
}
