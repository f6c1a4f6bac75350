//! Episodic machinery: N-way-K-shot sampling, prototypes, distance-based
//! classification, the KNN baseline and the training objectives.

mod loss;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RelationDataset;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub use loss::{
    combined_loss, embed_episode, episode_softmax_loss, episode_triplet_loss, EpisodeEmbeddings, EpisodeGraph,
    LossConfig, LossParts, TripletPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize) -> Result<Self> {
        let spec = EpisodeSpec { n_way, k_shot, n_query };
        spec.validate()?;
        Ok(spec)
    }

    /// A support-only spec (no queries), used for embedding export.
    pub fn support_only(n_way: usize, k_shot: usize) -> Self {
        EpisodeSpec {
            n_way,
            k_shot,
            n_query: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.n_query < 1 {
            return Err(Error::InvalidArgument(format!(
                "episode spec needs n_way >= 2, k_shot >= 1, n_query >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}-way-{}-shot", self.n_way, self.k_shot)
    }
}

/// One N-way-K-shot task. Classes are local indices `0..n_way`; instances
/// are `(relation index, instance index)` pairs into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub relations: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.relations.len()
    }

    /// Queries in class-major order as `(local label, relation, instance)`.
    pub fn labeled_queries(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.query
            .iter()
            .enumerate()
            .flat_map(move |(c, qs)| qs.iter().map(move |&i| (c, self.relations[c], i)))
    }

    pub fn num_queries(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }

    /// Reorders classes so that new class `j` is old class `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Episode {
        Episode {
            relations: perm.iter().map(|&p| self.relations[p]).collect(),
            support: perm.iter().map(|&p| self.support[p].clone()).collect(),
            query: perm.iter().map(|&p| self.query[p].clone()).collect(),
        }
    }
}

/// Independent RNG stream for episode `index` under `master_seed`.
pub fn episode_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Draws `n_way` relations without replacement and, per relation,
/// `k_shot + n_query` distinct instances; the first `k_shot` form the
/// support set.
pub fn sample_episode<R: Rng>(dataset: &RelationDataset, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    if spec.n_way == 0 || spec.k_shot == 0 {
        return Err(Error::Sampling(format!("invalid spec {spec:?}")));
    }
    let n_rel = dataset.num_relations();
    if n_rel < spec.n_way {
        return Err(Error::Sampling(format!(
            "{}-way episodes need {} relations, dataset has {n_rel}",
            spec.n_way, spec.n_way
        )));
    }
    let need = spec.k_shot + spec.n_query;
    if let Some(r) = dataset.relations().iter().find(|r| r.instances.len() < need) {
        return Err(Error::Sampling(format!(
            "relation {} has {} instances, {} needed per episode",
            r.id,
            r.instances.len(),
            need
        )));
    }
    let relations = sample(rng, n_rel, spec.n_way).into_vec();
    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::with_capacity(spec.n_way);
    for &r in &relations {
        let pool = dataset.relations()[r].instances.len();
        let mut picked = sample(rng, pool, need).into_vec();
        let q = picked.split_off(spec.k_shot);
        support.push(picked);
        query.push(q);
    }
    Ok(Episode {
        relations,
        support,
        query,
    })
}

/// Class prototypes: mean of each class's support embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes<T = f32> {
    pub vectors: Vec<Vec<T>>,
}

pub fn compute_prototypes<T: Real>(support: &[Vec<Vec<T>>]) -> Result<Prototypes<T>> {
    let mut vectors = Vec::with_capacity(support.len());
    for (c, shots) in support.iter().enumerate() {
        let first = shots
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("class {c} has no support embeddings")))?;
        let mut acc = first.clone();
        for s in &shots[1..] {
            if s.len() != acc.len() {
                return Err(Error::shape(
                    "compute_prototypes",
                    "support embeddings differ in dimension",
                ));
            }
            for (a, &x) in acc.iter_mut().zip(s) {
                *a += x;
            }
        }
        if shots.len() > 1 {
            let n = T::from_usize(shots.len()).expect("count representable");
            acc.iter_mut().for_each(|a| *a = *a / n);
        }
        vectors.push(acc);
    }
    Ok(Prototypes { vectors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification<T = f32> {
    /// Negative squared Euclidean distance to each prototype.
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
    pub predicted: usize,
}

/// First index of the maximum; NaN never wins.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn classify_query<T: Real>(query: &[T], protos: &Prototypes<T>) -> Result<Classification<T>> {
    if protos.vectors.is_empty() {
        return Err(Error::InvalidArgument("no prototypes".into()));
    }
    let mut logits = Vec::with_capacity(protos.vectors.len());
    for p in &protos.vectors {
        if p.len() != query.len() {
            return Err(Error::shape(
                "classify_query",
                format!("query dim {} vs prototype dim {}", query.len(), p.len()),
            ));
        }
        logits.push(-crate::tensor::squared_distance(query, p));
    }
    let (_, probabilities) = crate::tensor::log_sum_exp_and_softmax(&logits);
    let predicted = argmax(&logits);
    Ok(Classification {
        logits,
        probabilities,
        predicted,
    })
}

/// Majority vote among the `k` nearest labeled supports (squared Euclidean).
///
/// Neighbours at equal distance are ranked by support order. Vote ties go to
/// the class with the smaller mean neighbour distance, then the lower class.
pub fn knn_predict<T: Real>(supports: &[(Vec<T>, usize)], query: &[T], k: usize) -> Result<usize> {
    if k == 0 || k > supports.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            supports.len()
        )));
    }
    let mut ranked: Vec<(T, usize, usize)> = Vec::with_capacity(supports.len());
    for (i, (emb, label)) in supports.iter().enumerate() {
        if emb.len() != query.len() {
            return Err(Error::shape("knn_predict", "support and query dimensions differ"));
        }
        ranked.push((crate::tensor::squared_distance(emb, query), i, *label));
    }
    ranked.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });

    let n_classes = supports.iter().map(|s| s.1).max().unwrap() + 1;
    let mut votes = vec![0usize; n_classes];
    let mut dist_sum = vec![T::zero(); n_classes];
    for &(d, _, label) in &ranked[..k] {
        votes[label] += 1;
        dist_sum[label] += d;
    }
    let mut best: Option<(usize, T, usize)> = None;
    for c in 0..n_classes {
        if votes[c] == 0 {
            continue;
        }
        let mean = dist_sum[c] / T::from_usize(votes[c]).unwrap();
        let better = match best {
            None => true,
            Some((bv, bm, _)) => votes[c] > bv || (votes[c] == bv && mean < bm),
        };
        if better {
            best = Some((votes[c], mean, c));
        }
    }
    Ok(best.expect("k >= 1 guarantees a vote").2)
}
