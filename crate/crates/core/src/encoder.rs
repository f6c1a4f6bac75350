//! Sentence CNN, five-phrase network and their fine-grained concatenation.
//!
//! The sentence branch embeds every token as `word ⊕ head-offset ⊕
//! tail-offset`, convolves, applies ReLU and max-pools over time. The phrase
//! branch encodes `r_front, head, r_mid, tail, r_back` with a phrase CNN,
//! concatenates the five vectors in that fixed order and feeds them through
//! a ReLU-activated fully connected layer. In `fgf` mode the final embedding
//! is `sentence ⊕ phrase`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{position_index, PreparedInstance, Vocab};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const SEGMENT_NAMES: [&str; 5] = ["r_front", "head", "r_mid", "tail", "r_back"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Cnn,
    Fgf,
}

impl EncoderMode {
    pub fn label(self) -> &'static str {
        match self {
            EncoderMode::Cnn => "CNN",
            EncoderMode::Fgf => "FGF",
        }
    }
}

/// How the five phrases share convolution parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseCnn {
    /// One phrase CNN applied to all five segments.
    Shared,
    /// A separate CNN per segment.
    PerSegment,
    /// Reuse the sentence CNN's kernel and bias.
    Tied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderMode,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub max_rel: usize,
    pub max_len: usize,
    pub filters: usize,
    pub window: usize,
    pub phrase_filters: usize,
    pub phrase_window: usize,
    pub phrase_hidden: usize,
    pub phrase_cnn: PhraseCnn,
    /// Feed position embeddings to the phrase CNN as well.
    pub phrase_positions: bool,
    pub lowercase: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderMode::Fgf,
            word_dim: 50,
            pos_dim: 5,
            max_rel: 128,
            max_len: 128,
            filters: 230,
            window: 3,
            phrase_filters: 100,
            phrase_window: 3,
            phrase_hidden: 200,
            phrase_cnn: PhraseCnn::Shared,
            phrase_positions: false,
            lowercase: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("pos_dim", self.pos_dim),
            ("max_rel", self.max_rel),
            ("max_len", self.max_len),
            ("filters", self.filters),
            ("window", self.window),
            ("phrase_filters", self.phrase_filters),
            ("phrase_window", self.phrase_window),
            ("phrase_hidden", self.phrase_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.phrase_cnn == PhraseCnn::Tied && !self.phrase_positions {
            return Err(Error::Config(
                "phrase_cnn \"tied\" needs phrase_positions=true so input widths match".into(),
            ));
        }
        Ok(())
    }

    pub fn sentence_input_dim(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }

    pub fn phrase_input_dim(&self) -> usize {
        if self.phrase_positions {
            self.sentence_input_dim()
        } else {
            self.word_dim
        }
    }

    /// Filters per phrase vector.
    pub fn phrase_width(&self) -> usize {
        match self.phrase_cnn {
            PhraseCnn::Tied => self.filters,
            _ => self.phrase_filters,
        }
    }

    fn phrase_conv_window(&self) -> usize {
        match self.phrase_cnn {
            PhraseCnn::Tied => self.window,
            _ => self.phrase_window,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self.encoder {
            EncoderMode::Cnn => self.filters,
            EncoderMode::Fgf => self.filters + self.phrase_hidden,
        }
    }

    /// Parameter names and shapes, in storage order, for a vocabulary of
    /// `vocab_len` rows.
    pub fn parameter_shapes(&self, vocab_len: usize) -> Vec<(String, Vec<usize>)> {
        let pos_rows = 2 * self.max_rel + 1;
        let mut out = vec![
            ("word_embedding".to_string(), vec![vocab_len, self.word_dim]),
            ("pos_head".to_string(), vec![pos_rows, self.pos_dim]),
            ("pos_tail".to_string(), vec![pos_rows, self.pos_dim]),
            (
                "sentence_conv.kernel".to_string(),
                vec![self.window, self.sentence_input_dim(), self.filters],
            ),
            ("sentence_conv.bias".to_string(), vec![self.filters]),
        ];
        if self.encoder == EncoderMode::Fgf {
            let kshape = vec![self.phrase_window, self.phrase_input_dim(), self.phrase_filters];
            match self.phrase_cnn {
                PhraseCnn::Shared => {
                    out.push(("phrase_conv.kernel".into(), kshape));
                    out.push(("phrase_conv.bias".into(), vec![self.phrase_filters]));
                }
                PhraseCnn::PerSegment => {
                    for name in SEGMENT_NAMES {
                        out.push((format!("phrase_conv.{name}.kernel"), kshape.clone()));
                        out.push((format!("phrase_conv.{name}.bias"), vec![self.phrase_filters]));
                    }
                }
                PhraseCnn::Tied => {}
            }
            out.push((
                "phrase_fc.weight".into(),
                vec![5 * self.phrase_width(), self.phrase_hidden],
            ));
            out.push(("phrase_fc.bias".into(), vec![self.phrase_hidden]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    word: ParamId,
    pos_head: ParamId,
    pos_tail: ParamId,
    conv_kernel: ParamId,
    conv_bias: ParamId,
    // one entry per segment slot
    phrase_conv: Option<[(ParamId, ParamId); 5]>,
    fc_weight: Option<ParamId>,
    fc_bias: Option<ParamId>,
}

/// All trainable parameters of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    ids: ParamIds,
    vocab_len: usize,
}

impl<T: Real> ModelParams<T> {
    /// Word table from `vocab`; Xavier-uniform weights and zero biases
    /// elsewhere, drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: &Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.dim() != config.word_dim {
            return Err(Error::Config(format!(
                "vocabulary dimension {} differs from model.word_dim {}",
                vocab.dim(),
                config.word_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in config.parameter_shapes(vocab.len()) {
            let t = if name == "word_embedding" {
                let data = vocab.embeddings().iter().map(|&x| T::lit(x as f64)).collect();
                Tensor::new(shape, data)?
            } else if name.ends_with("bias") {
                Tensor::zeros(shape)?
            } else {
                let fan_out = *shape.last().unwrap();
                let fan_in = shape.iter().product::<usize>() / fan_out;
                Tensor::xavier_uniform(shape, fan_in, fan_out, &mut rng)?
            };
            store.insert(name, t.with_grad())?;
        }
        Self::from_store(config, store)
    }

    /// Binds an existing store, checking every name and shape.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let vocab_len = store
            .find("word_embedding")
            .map(|id| store.get(id).shape()[0])
            .ok_or_else(|| Error::Config("missing word_embedding".into()))?;
        let expected = config.parameter_shapes(vocab_len);
        if expected.len() != store.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in &expected {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
        }
        let id = |n: &str| store.find(n).expect("checked above");
        let phrase_conv = match (config.encoder, config.phrase_cnn) {
            (EncoderMode::Cnn, _) => None,
            (_, PhraseCnn::Shared) => Some([(id("phrase_conv.kernel"), id("phrase_conv.bias")); 5]),
            (_, PhraseCnn::PerSegment) => Some(SEGMENT_NAMES.map(|s| {
                (
                    id(&format!("phrase_conv.{s}.kernel")),
                    id(&format!("phrase_conv.{s}.bias")),
                )
            })),
            (_, PhraseCnn::Tied) => Some([(id("sentence_conv.kernel"), id("sentence_conv.bias")); 5]),
        };
        let fgf = config.encoder == EncoderMode::Fgf;
        let ids = ParamIds {
            word: id("word_embedding"),
            pos_head: id("pos_head"),
            pos_tail: id("pos_tail"),
            conv_kernel: id("sentence_conv.kernel"),
            conv_bias: id("sentence_conv.bias"),
            phrase_conv,
            fc_weight: fgf.then(|| id("phrase_fc.weight")),
            fc_bias: fgf.then(|| id("phrase_fc.bias")),
        };
        let mut store = store;
        for pid in store.ids().collect::<Vec<_>>() {
            store.get_mut(pid).set_requires_grad(true);
        }
        store.freeze_row(ids.word, vocab_len - 1)?;
        Ok(ModelParams {
            config,
            store,
            ids,
            vocab_len,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    pub fn pad_id(&self) -> usize {
        self.vocab_len - 1
    }

    pub fn unk_id(&self) -> usize {
        self.vocab_len - 2
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
            vocab_len: self.vocab_len,
        }
    }

    fn word_id(&self, id: usize) -> usize {
        if id < self.vocab_len {
            id
        } else {
            self.unk_id()
        }
    }

    /// Embeds ids (with optional positions) and runs conv → ReLU → max-pool.
    fn conv_block(
        &self,
        tape: &mut Tape<'_, T>,
        ids: &[usize],
        positions: Option<(&[usize], &[usize])>,
        kernel: ParamId,
        bias: ParamId,
    ) -> Result<Var> {
        let table = tape.param(self.ids.word);
        let words = tape.gather_rows(table, ids)?;
        let input = match positions {
            Some((head, tail)) => {
                let ht = tape.param(self.ids.pos_head);
                let tt = tape.param(self.ids.pos_tail);
                let h = tape.gather_rows(ht, head)?;
                let t = tape.gather_rows(tt, tail)?;
                tape.concat(&[words, h, t])?
            }
            None => words,
        };
        let k = tape.param(kernel);
        let b = tape.param(bias);
        let conv = tape.conv1d(input, k, b)?;
        let act = tape.relu(conv);
        tape.maxpool_over_time(act)
    }

    /// Sentence-level embedding, dimension `filters`.
    pub fn encode_sentence(&self, tape: &mut Tape<'_, T>, inst: &PreparedInstance) -> Result<Var> {
        let cfg = &self.config;
        let n = inst.len().max(cfg.window);
        let mut ids: Vec<usize> = inst.word_ids.iter().map(|&i| self.word_id(i)).collect();
        ids.resize(n, self.pad_id());
        let mut head = inst.positions.head.clone();
        let mut tail = inst.positions.tail.clone();
        for i in inst.len()..n {
            head.push(position_index(i, inst.head_start, cfg.max_rel));
            tail.push(position_index(i, inst.tail_start, cfg.max_rel));
        }
        self.conv_block(
            tape,
            &ids,
            Some((&head, &tail)),
            self.ids.conv_kernel,
            self.ids.conv_bias,
        )
    }

    /// Phrase-level embedding, dimension `phrase_hidden`.
    pub fn encode_phrase(&self, tape: &mut Tape<'_, T>, inst: &PreparedInstance) -> Result<Var> {
        let cfg = &self.config;
        let (Some(convs), Some(fc_w), Some(fc_b)) = (self.ids.phrase_conv, self.ids.fc_weight, self.ids.fc_bias) else {
            return Err(Error::Config("phrase encoder requires encoder mode fgf".into()));
        };
        let window = cfg.phrase_conv_window();
        let mut parts = Vec::with_capacity(5);
        for (seg, (kernel, bias)) in inst.segments.segments.iter().zip(convs) {
            let n = seg.len().max(window);
            let mut ids: Vec<usize> = seg.ids.iter().map(|&i| self.word_id(i)).collect();
            ids.resize(n, self.pad_id());
            let v = if cfg.phrase_positions {
                let idx = |anchor: usize| -> Vec<usize> {
                    (0..n)
                        .map(|j| match seg.token_index.get(j).copied().flatten() {
                            Some(i) => position_index(i, anchor, cfg.max_rel),
                            None => cfg.max_rel,
                        })
                        .collect()
                };
                let (h, t) = (idx(inst.head_start), idx(inst.tail_start));
                self.conv_block(tape, &ids, Some((&h, &t)), kernel, bias)?
            } else {
                self.conv_block(tape, &ids, None, kernel, bias)?
            };
            parts.push(v);
        }
        let joined = tape.concat(&parts)?;
        let w = tape.param(fc_w);
        let b = tape.param(fc_b);
        let hidden = tape.linear(joined, w, b)?;
        Ok(tape.relu(hidden))
    }

    /// `encode_sentence` in cnn mode; `encode_sentence ⊕ encode_phrase` in fgf mode.
    pub fn encode(&self, tape: &mut Tape<'_, T>, inst: &PreparedInstance) -> Result<Var> {
        let sentence = self.encode_sentence(tape, inst)?;
        match self.config.encoder {
            EncoderMode::Cnn => Ok(sentence),
            EncoderMode::Fgf => {
                let phrase = self.encode_phrase(tape, inst)?;
                tape.concat(&[sentence, phrase])
            }
        }
    }

    /// Forward-only embeddings for a batch of instances.
    pub fn embed(&self, insts: &[&PreparedInstance]) -> Result<Vec<Vec<T>>> {
        insts
            .iter()
            .map(|inst| {
                let mut tape = Tape::new(&self.store);
                let v = self.encode(&mut tape, inst)?;
                Ok(tape.value(v).to_vec())
            })
            .collect()
    }
}
