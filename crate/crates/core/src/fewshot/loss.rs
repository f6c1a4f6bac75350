use serde::{Deserialize, Serialize};

use super::Episode;
use crate::data::PreparedDataset;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// How triplets are formed inside an episode. Anchors are always class
/// prototypes; positives and negatives are query embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletPolicy {
    /// Every (class, positive, negative) combination, averaged.
    #[default]
    #[serde(alias = "all-pairs")]
    AllPairs,
    /// Per positive, only the negative closest to the anchor.
    #[serde(alias = "semi-hard")]
    SemiHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub triplet_policy: TripletPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 5.0,
            lambda: 1.0,
            triplet_policy: TripletPolicy::AllPairs,
        }
    }
}

impl LossConfig {
    pub fn softmax_only() -> Self {
        LossConfig {
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Tape nodes for every instance of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeEmbeddings {
    /// `support[c][k]`
    pub support: Vec<Vec<Var>>,
    pub queries: Vec<Var>,
    pub labels: Vec<usize>,
}

pub fn embed_episode<T: Real>(
    tape: &mut Tape<'_, T>,
    params: &ModelParams<T>,
    episode: &Episode,
    data: &PreparedDataset,
) -> Result<EpisodeEmbeddings> {
    let mut support = Vec::with_capacity(episode.n_way());
    for (c, shots) in episode.support.iter().enumerate() {
        let r = episode.relations[c];
        let vars = shots
            .iter()
            .map(|&i| params.encode(tape, data.get(r, i)))
            .collect::<Result<Vec<_>>>()?;
        support.push(vars);
    }
    let mut queries = Vec::with_capacity(episode.num_queries());
    let mut labels = Vec::with_capacity(episode.num_queries());
    for (c, r, i) in episode.labeled_queries() {
        queries.push(params.encode(tape, data.get(r, i))?);
        labels.push(c);
    }
    Ok(EpisodeEmbeddings {
        support,
        queries,
        labels,
    })
}

/// Prototypes and the query-by-class squared distance matrix.
#[derive(Debug, Clone)]
pub struct EpisodeGraph {
    pub prototypes: Vec<Var>,
    /// `distances[q][c]`, one-element nodes.
    pub distances: Vec<Vec<Var>>,
    pub labels: Vec<usize>,
}

impl EpisodeGraph {
    pub fn build<T: Real>(tape: &mut Tape<'_, T>, emb: &EpisodeEmbeddings) -> Result<Self> {
        let mut prototypes = Vec::with_capacity(emb.support.len());
        for (c, shots) in emb.support.iter().enumerate() {
            match shots.as_slice() {
                [] => return Err(Error::InvalidArgument(format!("class {c} has no support instances"))),
                [single] => prototypes.push(*single),
                many => prototypes.push(tape.mean(many)?),
            }
        }
        let mut distances = Vec::with_capacity(emb.queries.len());
        for &q in &emb.queries {
            let row = prototypes
                .iter()
                .map(|&p| tape.squared_euclidean(q, p))
                .collect::<Result<Vec<_>>>()?;
            distances.push(row);
        }
        Ok(EpisodeGraph {
            prototypes,
            distances,
            labels: emb.labels.clone(),
        })
    }

    pub fn n_way(&self) -> usize {
        self.prototypes.len()
    }

    /// Logit values `-d²` per query.
    pub fn logits<T: Real>(&self, tape: &Tape<'_, T>) -> Vec<Vec<T>> {
        self.distances
            .iter()
            .map(|row| row.iter().map(|&d| -tape.scalar(d)).collect())
            .collect()
    }

    /// Number of queries whose arg-max logit is the true class.
    pub fn correct<T: Real>(&self, tape: &Tape<'_, T>) -> usize {
        self.logits(tape)
            .iter()
            .zip(&self.labels)
            .filter(|(l, &y)| super::argmax(l) == y)
            .count()
    }

    /// Mean cross-entropy of the distance softmax over all queries.
    pub fn softmax_loss<T: Real>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        if self.distances.is_empty() {
            return Err(Error::InvalidArgument("episode has no queries".into()));
        }
        let mut terms = Vec::with_capacity(self.distances.len());
        for (row, &y) in self.distances.iter().zip(&self.labels) {
            let d = tape.concat(row)?;
            let logits = tape.neg(d);
            terms.push(tape.log_softmax_xent(logits, y)?);
        }
        tape.mean(&terms)
    }

    pub fn triplet_loss<T: Real>(&self, tape: &mut Tape<'_, T>, gamma: f64, policy: TripletPolicy) -> Result<Var> {
        let margin = T::lit(gamma);
        let mut terms = Vec::new();
        for c in 0..self.n_way() {
            let positives: Vec<usize> = (0..self.labels.len()).filter(|&q| self.labels[q] == c).collect();
            let negatives: Vec<usize> = (0..self.labels.len()).filter(|&q| self.labels[q] != c).collect();
            if negatives.is_empty() {
                continue;
            }
            match policy {
                TripletPolicy::AllPairs => {
                    for &p in &positives {
                        for &n in &negatives {
                            terms.push(tape.hinge(margin, self.distances[p][c], self.distances[n][c])?);
                        }
                    }
                }
                TripletPolicy::SemiHard => {
                    let mut hardest = negatives[0];
                    for &n in &negatives[1..] {
                        if tape.scalar(self.distances[n][c]) < tape.scalar(self.distances[hardest][c]) {
                            hardest = n;
                        }
                    }
                    for &p in &positives {
                        terms.push(tape.hinge(margin, self.distances[p][c], self.distances[hardest][c])?);
                    }
                }
            }
        }
        if terms.is_empty() {
            return Err(Error::InvalidArgument("episode yields no triplets".into()));
        }
        tape.mean(&terms)
    }
}

/// Loss nodes of one episode. `triplet` is absent when λ is zero.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub softmax: Var,
    pub triplet: Option<Var>,
}

/// `softmax + λ·triplet`; with λ = 0 the triplet graph is never built and
/// `total` is the softmax node itself.
pub fn combined_loss<T: Real>(tape: &mut Tape<'_, T>, graph: &EpisodeGraph, cfg: &LossConfig) -> Result<LossParts> {
    let softmax = graph.softmax_loss(tape)?;
    if cfg.lambda == 0.0 {
        return Ok(LossParts {
            total: softmax,
            softmax,
            triplet: None,
        });
    }
    let triplet = graph.triplet_loss(tape, cfg.gamma, cfg.triplet_policy)?;
    let weighted = tape.scale(triplet, T::lit(cfg.lambda));
    let total = tape.add(softmax, weighted)?;
    Ok(LossParts {
        total,
        softmax,
        triplet: Some(triplet),
    })
}

pub fn episode_softmax_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    params: &ModelParams<T>,
    episode: &Episode,
    data: &PreparedDataset,
) -> Result<Var> {
    let emb = embed_episode(tape, params, episode, data)?;
    EpisodeGraph::build(tape, &emb)?.softmax_loss(tape)
}

pub fn episode_triplet_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    params: &ModelParams<T>,
    episode: &Episode,
    data: &PreparedDataset,
    gamma: f64,
    policy: TripletPolicy,
) -> Result<Var> {
    let emb = embed_episode(tape, params, episode, data)?;
    EpisodeGraph::build(tape, &emb)?.triplet_loss(tape, gamma, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, PreparedDataset, Relation, RelationDataset, Span, Split, TokenizedInstance};
    use crate::encoder::{EncoderMode, ModelConfig};
    use crate::fewshot::{classify_query, compute_prototypes, episode_rng, sample_episode, EpisodeSpec};
    use crate::tensor::{finite_diff_check, GradCheckConfig, ParamStore, Tensor};

    fn leaf(tape: &mut Tape<'_, f64>, v: &[f64]) -> Var {
        tape.input(Tensor::vector(v.to_vec()).unwrap())
    }

    /// Builds a graph from raw support points (one per class) and labeled queries.
    fn graph_from<'p>(
        tape: &mut Tape<'p, f64>,
        support: &[Vec<Vec<f64>>],
        queries: &[(Vec<f64>, usize)],
    ) -> EpisodeGraph {
        let support = support
            .iter()
            .map(|shots| shots.iter().map(|s| leaf(tape, s)).collect())
            .collect();
        let q = queries.iter().map(|(v, _)| leaf(tape, v)).collect();
        let emb = EpisodeEmbeddings {
            support,
            queries: q,
            labels: queries.iter().map(|(_, y)| *y).collect(),
        };
        EpisodeGraph::build(tape, &emb).unwrap()
    }

    #[test]
    fn hinge_arithmetic() {
        let store = ParamStore::new();
        // anchor at origin; positive at d²=1, negative at d²=3
        let mut tape = Tape::new(&store);
        let g = graph_from(
            &mut tape,
            &[vec![vec![0.0, 0.0]], vec![vec![100.0, 100.0]]],
            &[(vec![1.0, 0.0], 0), (vec![1.0, 1.414_213_562_373_095_1], 1)],
        );
        let l = g.triplet_loss(&mut tape, 1.0, TripletPolicy::AllPairs).unwrap();
        // class-0 term: max(0, 1 + 1 - 3) = 0; class-1 term is far inside the margin
        let d_pos = tape.scalar(g.distances[1][1]);
        let d_neg = tape.scalar(g.distances[0][1]);
        let expected = ((1.0 + d_pos - d_neg).max(0.0)) / 2.0;
        assert!((tape.scalar(l) - expected).abs() < 1e-9);

        let mut tape = Tape::new(&store);
        let a = leaf(&mut tape, &[2.0]);
        let b = leaf(&mut tape, &[2.0]);
        let h = tape.hinge(1.0, a, b).unwrap();
        assert_eq!(tape.scalar(h), 1.0);
    }

    #[test]
    fn zero_margin_separated_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let g = graph_from(
            &mut tape,
            &[vec![vec![0.0, 0.0]], vec![vec![10.0, 0.0]], vec![vec![0.0, 10.0]]],
            &[
                (vec![0.5, 0.0], 0),
                (vec![0.0, 0.5], 0),
                (vec![9.5, 0.0], 1),
                (vec![10.0, 0.5], 1),
                (vec![0.0, 9.0], 2),
                (vec![1.0, 10.0], 2),
            ],
        );
        for policy in [TripletPolicy::AllPairs, TripletPolicy::SemiHard] {
            let l = g.triplet_loss(&mut tape, 0.0, policy).unwrap();
            assert_eq!(tape.scalar(l), 0.0);
        }
        let l = g.triplet_loss(&mut tape, 1e6, TripletPolicy::AllPairs).unwrap();
        assert!(tape.scalar(l) > 0.0);
    }

    #[test]
    fn semi_hard_picks_closest_negative() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let g = graph_from(
            &mut tape,
            &[vec![vec![0.0]], vec![vec![100.0]]],
            &[(vec![1.0], 0), (vec![2.0], 1), (vec![50.0], 1)],
        );
        let l = g.triplet_loss(&mut tape, 5.0, TripletPolicy::SemiHard).unwrap();
        // class 0: 5 + 1 - 4 = 2; class 1: positives {4, 2500} vs negative 9801
        assert!((tape.scalar(l) - 2.0 / 3.0).abs() < 1e-12);
        let all = g.triplet_loss(&mut tape, 5.0, TripletPolicy::AllPairs).unwrap();
        // class 0: (5+1-4) and (5+1-2500)->0 ; class 1: 0, 0
        assert!((tape.scalar(all) - 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_limit() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let g = graph_from(
            &mut tape,
            &[
                vec![vec![1.0, 0.0]],
                vec![vec![-1.0, 0.0]],
                vec![vec![0.0, 1.0]],
                vec![vec![0.0, -1.0]],
            ],
            &[(vec![0.0, 0.0], 0), (vec![0.0, 0.0], 3)],
        );
        let l = g.softmax_loss(&mut tape).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new(&store);
        let g = graph_from(
            &mut tape,
            &[vec![vec![0.0]], vec![vec![1e3]]],
            &[(vec![0.0], 0), (vec![1e3], 1)],
        );
        let l = g.softmax_loss(&mut tape).unwrap();
        assert!(tape.scalar(l) >= 0.0 && tape.scalar(l) < 1e-12);
    }

    #[test]
    fn prototype_mean_on_tape() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let g = graph_from(
            &mut tape,
            &[vec![vec![1.0, 1.0], vec![3.0, 3.0]], vec![vec![7.0, 7.0]]],
            &[(vec![0.0, 0.0], 0)],
        );
        assert_eq!(tape.value(g.prototypes[0]), &[2.0, 2.0]);
        assert_eq!(tape.value(g.prototypes[1]), &[7.0, 7.0]);
    }

    fn small_model(mode: EncoderMode) -> (ModelParams<f64>, RelationDataset, PreparedDataset) {
        let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];
        let relations = (0..4)
            .map(|r| Relation {
                id: format!("R{r}"),
                instances: (0..6)
                    .map(|i| {
                        let toks: Vec<String> = (0..7)
                            .map(|t| words[(r * 3 + i + t) % words.len()].to_string())
                            .collect();
                        TokenizedInstance::new(toks, Span::new(1, 1), Span::new(4, 5), format!("R{r}")).unwrap()
                    })
                    .collect(),
            })
            .collect();
        let ds = RelationDataset::new(Split::Train, relations).unwrap();
        let vocab = build_vocab(&[&ds], None, 4, true, 3).unwrap();
        let config = ModelConfig {
            encoder: mode,
            word_dim: 4,
            pos_dim: 2,
            max_rel: 8,
            filters: 5,
            phrase_filters: 3,
            phrase_hidden: 4,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f32>::new(config, &vocab, 11).unwrap().cast::<f64>();
        let data = PreparedDataset::new(&ds, &vocab, 128, 8);
        (params, ds, data)
    }

    #[test]
    fn lambda_zero_is_softmax_exactly() {
        let (params, ds, data) = small_model(EncoderMode::Fgf);
        let spec = EpisodeSpec::new(3, 2, 2).unwrap();
        for i in 0..100 {
            let ep = sample_episode(&ds, &spec, &mut episode_rng(5, i)).unwrap();
            let mut tape = Tape::new(&params.store);
            let emb = embed_episode(&mut tape, &params, &ep, &data).unwrap();
            let g = EpisodeGraph::build(&mut tape, &emb).unwrap();
            let parts = combined_loss(&mut tape, &g, &LossConfig::softmax_only()).unwrap();
            assert!(parts.triplet.is_none());
            let mut t2 = Tape::new(&params.store);
            let plain = episode_softmax_loss(&mut t2, &params, &ep, &data).unwrap();
            assert_eq!(tape.scalar(parts.total).to_bits(), t2.scalar(plain).to_bits());
        }
    }

    #[test]
    fn combined_monotone_in_lambda() {
        let (params, ds, data) = small_model(EncoderMode::Cnn);
        let ep = sample_episode(&ds, &EpisodeSpec::new(4, 1, 3).unwrap(), &mut episode_rng(1, 1)).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for lambda in [0.0, 0.5, 1.0, 2.0, 10.0] {
            let mut tape = Tape::new(&params.store);
            let emb = embed_episode(&mut tape, &params, &ep, &data).unwrap();
            let g = EpisodeGraph::build(&mut tape, &emb).unwrap();
            let cfg = LossConfig {
                lambda,
                ..LossConfig::default()
            };
            let total = combined_loss(&mut tape, &g, &cfg).unwrap().total;
            let v = tape.scalar(total);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (params, ds, data) = small_model(EncoderMode::Fgf);
        let ep = sample_episode(&ds, &EpisodeSpec::new(4, 2, 2).unwrap(), &mut episode_rng(9, 0)).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted = ep.permuted(&perm);
        let logits = |e: &Episode| {
            let mut tape = Tape::new(&params.store);
            let emb = embed_episode(&mut tape, &params, e, &data).unwrap();
            let g = EpisodeGraph::build(&mut tape, &emb).unwrap();
            (g.logits(&tape), g.labels.clone())
        };
        let (base, base_labels) = logits(&ep);
        let (moved, moved_labels) = logits(&permuted);
        // query order follows class order, so permuted query block j is old block perm[j]
        let q = 2;
        for (j, &p) in perm.iter().enumerate() {
            for s in 0..q {
                let new_row = &moved[j * q + s];
                let old_row = &base[p * q + s];
                assert_eq!(moved_labels[j * q + s], j);
                assert_eq!(base_labels[p * q + s], p);
                for (jj, &pp) in perm.iter().enumerate() {
                    assert_eq!(new_row[jj].to_bits(), old_row[pp].to_bits());
                }
                assert_eq!(perm[crate::fewshot::argmax(new_row)], crate::fewshot::argmax(old_row));
            }
        }
    }

    #[test]
    fn brute_force_prediction_oracle() {
        let (params, ds, data) = small_model(EncoderMode::Fgf);
        let ep = sample_episode(&ds, &EpisodeSpec::new(2, 1, 1).unwrap(), &mut episode_rng(2, 2)).unwrap();
        let support: Vec<Vec<f64>> = ep
            .support
            .iter()
            .enumerate()
            .map(|(c, s)| params.embed(&[data.get(ep.relations[c], s[0])]).unwrap().remove(0))
            .collect();
        let protos = compute_prototypes(&support.iter().map(|v| vec![v.clone()]).collect::<Vec<_>>()).unwrap();
        for (_, r, i) in ep.labeled_queries() {
            let q = params.embed(&[data.get(r, i)]).unwrap().remove(0);
            let mut best = (f64::INFINITY, usize::MAX);
            for (c, s) in support.iter().enumerate() {
                let mut d = 0.0;
                for k in 0..q.len() {
                    d += (q[k] - s[k]) * (q[k] - s[k]);
                }
                if d < best.0 {
                    best = (d, c);
                }
            }
            assert_eq!(classify_query(&q, &protos).unwrap().predicted, best.1);
        }
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let (params, ds, data) = small_model(EncoderMode::Fgf);
        let mut params = params;
        let mut rng = episode_rng(4, 4);
        for id in params.store.ids().collect::<Vec<_>>() {
            if params.store.name(id).ends_with("bias") {
                use rand::Rng;
                for x in params.store.get_mut(id).data_mut() {
                    *x = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let ep = sample_episode(&ds, &EpisodeSpec::new(3, 2, 2).unwrap(), &mut episode_rng(3, 0)).unwrap();
        let cfg = LossConfig {
            gamma: 5.0,
            lambda: 0.7,
            triplet_policy: TripletPolicy::AllPairs,
        };
        let err = finite_diff_check(
            |tape| {
                let emb = embed_episode(tape, &params, &ep, &data)?;
                let g = EpisodeGraph::build(tape, &emb)?;
                Ok(combined_loss(tape, &g, &cfg)?.total)
            },
            &params.store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}
