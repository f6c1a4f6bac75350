//! Built-in gradient checks and invariant checks, run by `lmproto selftest`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{build_vocab, PreparedDataset, RelationDataset, Split};
use crate::encoder::{EncoderMode, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::fewshot::{
    classify_query, combined_loss, compute_prototypes, embed_episode, episode_rng, episode_softmax_loss, knn_predict,
    sample_episode, EpisodeGraph, EpisodeSpec, LossConfig, Prototypes,
};
use crate::synth::{generate, SyntheticSpec};
use crate::tensor::{finite_diff_check, GradCheckConfig, ParamStore, Tape, Tensor, Var};
use crate::train::{Checkpoint, CheckpointMeta, TrainConfig};
use crate::viz::joint_probabilities;

/// Relative-error bound used for every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values with magnitude in [0.2, 1) and random sign, so ReLU kinks are
/// far from any probe.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Distinct values at least 0.05 apart in every column, so the arg-max of
/// a max-pool never changes under a probe.
fn well_separated(rng: &mut ChaCha8Rng, len: usize, ch: usize) -> Tensor<f64> {
    let mut data = vec![0.0; len * ch];
    for f in 0..ch {
        let mut order: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for (rank, &t) in order.iter().enumerate() {
            data[t * ch + f] = 0.1 * rank as f64 + rng.gen_range(-0.02..0.02);
        }
    }
    Tensor::new(vec![len, ch], data).expect("shape matches")
}

struct OpCase {
    name: &'static str,
    store: ParamStore<f64>,
    target: Option<Tensor<f64>>,
    build: fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
}

fn check_case(case: &OpCase, cfg: &GradCheckConfig) -> Result<f64> {
    let ids: Vec<_> = case.store.ids().collect();
    finite_diff_check(
        |tape| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let out = (case.build)(tape, &vars)?;
            match &case.target {
                Some(t) => {
                    let target = tape.input(t.clone());
                    tape.squared_euclidean(out, target)
                }
                None => Ok(out),
            }
        },
        &case.store,
        cfg,
    )
}

fn store_of(tensors: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.insert(format!("p{i}"), t.with_grad()).expect("unique names");
    }
    s
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();
    let mut case = |name, tensors: Vec<Tensor<f64>>, target: Option<Vec<usize>>, build, rng: &mut ChaCha8Rng| {
        let target = target.map(|shape| uniform(rng, &shape, -1.0, 1.0));
        cases.push(OpCase {
            name,
            store: store_of(tensors),
            target,
            build,
        });
    };
    let t = uniform(r, &[5, 3], -1.0, 1.0);
    case(
        "gather_rows",
        vec![t],
        Some(vec![4, 3]),
        |tp, v| tp.gather_rows(v[0], &[4, 0, 4, 2]),
        r,
    );
    let (a, b) = (uniform(r, &[3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0));
    case("concat", vec![a, b], Some(vec![5]), |tp, v| tp.concat(&[v[0], v[1]]), r);
    let (x, k, bias) = (
        uniform(r, &[6, 4], -1.0, 1.0),
        uniform(r, &[3, 4, 5], -0.5, 0.5),
        uniform(r, &[5], -0.5, 0.5),
    );
    case(
        "conv1d",
        vec![x, k, bias],
        Some(vec![4, 5]),
        |tp, v| tp.conv1d(v[0], v[1], v[2]),
        r,
    );
    let x = off_kink(r, &[8]);
    case("relu", vec![x], Some(vec![8]), |tp, v| Ok(tp.relu(v[0])), r);
    let x = well_separated(r, 5, 4);
    case(
        "maxpool_over_time",
        vec![x],
        Some(vec![4]),
        |tp, v| tp.maxpool_over_time(v[0]),
        r,
    );
    let (x, w, b) = (
        uniform(r, &[4], -1.0, 1.0),
        uniform(r, &[4, 3], -1.0, 1.0),
        uniform(r, &[3], -1.0, 1.0),
    );
    case(
        "linear",
        vec![x, w, b],
        Some(vec![3]),
        |tp, v| tp.linear(v[0], v[1], v[2]),
        r,
    );
    let (x, w, b) = (
        uniform(r, &[2, 4], -1.0, 1.0),
        uniform(r, &[4, 3], -1.0, 1.0),
        uniform(r, &[3], -1.0, 1.0),
    );
    case(
        "linear (batch)",
        vec![x, w, b],
        Some(vec![2, 3]),
        |tp, v| tp.linear(v[0], v[1], v[2]),
        r,
    );
    let (a, b) = (uniform(r, &[5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0));
    case(
        "squared_euclidean",
        vec![a, b],
        None,
        |tp, v| tp.squared_euclidean(v[0], v[1]),
        r,
    );
    let l = uniform(r, &[5], -2.0, 2.0);
    case(
        "log_softmax_xent",
        vec![l],
        None,
        |tp, v| tp.log_softmax_xent(v[0], 2),
        r,
    );
    let (a, b) = (uniform(r, &[4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0));
    case("add", vec![a, b], Some(vec![4]), |tp, v| tp.add(v[0], v[1]), r);
    let x = uniform(r, &[4], -1.0, 1.0);
    case("scale", vec![x], Some(vec![4]), |tp, v| Ok(tp.scale(v[0], 1.7)), r);
    let x = uniform(r, &[4], -1.0, 1.0);
    case("neg", vec![x], Some(vec![4]), |tp, v| Ok(tp.neg(v[0])), r);
    let xs = (0..3).map(|_| uniform(r, &[4], -1.0, 1.0)).collect();
    case("sum", xs, Some(vec![4]), |tp, v| tp.sum(v), r);
    let xs = (0..3).map(|_| uniform(r, &[4], -1.0, 1.0)).collect();
    case("mean", xs, Some(vec![4]), |tp, v| tp.mean(v), r);
    let x = uniform(r, &[3, 2], -1.0, 1.0);
    case("sum_all", vec![x], Some(vec![1]), |tp, v| Ok(tp.sum_all(v[0])), r);
    // anchor with two nearby points: the margin term stays active
    let a = uniform(r, &[3], -1.0, 1.0);
    let near = |r: &mut ChaCha8Rng| {
        let d: Vec<f64> = a.data().iter().map(|x| x + r.gen_range(-0.2..0.2)).collect();
        Tensor::vector(d).expect("vector")
    };
    let (p, n) = (near(r), near(r));
    case(
        "hinge",
        vec![a.clone(), p, n],
        None,
        |tp, v| {
            let dp = tp.squared_euclidean(v[0], v[1])?;
            let dn = tp.squared_euclidean(v[0], v[2])?;
            tp.hinge(1.0, dp, dn)
        },
        r,
    );
    cases
}

/// A tiny model over a three-relation marker corpus, in f64, with
/// non-zero biases so no ReLU sits exactly on its kink.
pub fn toy_model(mode: EncoderMode, seed: u64) -> Result<(ModelParams<f64>, RelationDataset, PreparedDataset)> {
    let spec = SyntheticSpec::marker(3, 6, "G", seed).with_filler_run(1, 3);
    let ds = generate(&spec, Split::Train)?;
    let vocab = build_vocab(&[&ds], None, 4, true, seed)?;
    let config = ModelConfig {
        encoder: mode,
        word_dim: 4,
        pos_dim: 2,
        max_rel: 12,
        filters: 6,
        phrase_filters: 3,
        phrase_hidden: 4,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::<f32>::new(config, &vocab, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for id in params.store.ids().collect::<Vec<_>>() {
        if params.store.name(id).ends_with("bias") {
            for x in params.store.get_mut(id).data_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let data = PreparedDataset::new(&ds, &vocab, 128, 12);
    Ok((params, ds, data))
}

/// Finite-difference checks for every tape op and for the full combined
/// loss of a 2-way-2-shot episode (FGF encoder, λ = 1).
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    for case in op_cases(seed) {
        out.push(GradCheck {
            name: case.name,
            max_rel_error: check_case(&case, &cfg)?,
        });
    }
    let (params, ds, data) = toy_model(EncoderMode::Fgf, seed)?;
    let episode = sample_episode(&ds, &EpisodeSpec::new(2, 2, 2)?, &mut episode_rng(seed, 0))?;
    let loss = LossConfig::default();
    let err = finite_diff_check(
        |tape| {
            let emb = embed_episode(tape, &params, &episode, &data)?;
            let graph = EpisodeGraph::build(tape, &emb)?;
            Ok(combined_loss(tape, &graph, &loss)?.total)
        },
        &params.store,
        &cfg,
    )?;
    out.push(GradCheck {
        name: "combined_loss (2-way-2-shot, FGF)",
        max_rel_error: err,
    });
    Ok(out)
}

/// Naive nearest-prototype prediction: double loop, strict `<`, so ties go
/// to the lower class.
pub fn naive_nearest(query: &[f64], protos: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, p) in protos.iter().enumerate() {
        let mut d = 0.0;
        for k in 0..query.len() {
            d += (query[k] - p[k]) * (query[k] - p[k]);
        }
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Naive KNN: full sort of (distance, index), vote count, then smaller
/// mean distance, then lower class.
pub fn naive_knn(supports: &[(Vec<f64>, usize)], query: &[f64], k: usize) -> usize {
    let mut all: Vec<(f64, usize)> = supports
        .iter()
        .enumerate()
        .map(|(i, (s, _))| (s.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_classes = supports.iter().map(|s| s.1).max().unwrap_or(0) + 1;
    let mut stats = vec![(0usize, 0.0f64); n_classes];
    for &(d, i) in &all[..k] {
        stats[supports[i].1].0 += 1;
        stats[supports[i].1].1 += d;
    }
    let mut best: Option<usize> = None;
    for c in 0..n_classes {
        let (votes, total) = stats[c];
        if votes == 0 {
            continue;
        }
        match best {
            None => best = Some(c),
            Some(b) => {
                let (bv, bt) = stats[b];
                let (mean, best_mean) = (total / votes as f64, bt / bv as f64);
                if votes > bv || (votes == bv && mean < best_mean) {
                    best = Some(c);
                }
            }
        }
    }
    best.unwrap_or(0)
}

/// Random small classification problem on a coarse integer grid so that
/// distance ties actually occur.
pub fn random_oracle_case(rng: &mut ChaCha8Rng) -> (Vec<(Vec<f64>, usize)>, Vec<f64>, usize) {
    let n_way = rng.gen_range(2..=5);
    let k_shot = rng.gen_range(1..=3);
    let dim = rng.gen_range(1..=4);
    let point = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-3..=3) as f64).collect::<Vec<f64>>();
    let mut supports = Vec::new();
    for c in 0..n_way {
        for _ in 0..k_shot {
            supports.push((point(rng), c));
        }
    }
    let query = point(rng);
    let k = rng.gen_range(1..=supports.len());
    (supports, query, k)
}

/// Checks `classify_query` and `knn_predict` against the naive versions on
/// `cases` random problems; returns the number of disagreements.
pub fn oracle_disagreements(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let (supports, query, k) = random_oracle_case(&mut rng);
        let n_way = supports.iter().map(|s| s.1).max().unwrap() + 1;
        let grouped: Vec<Vec<Vec<f64>>> = (0..n_way)
            .map(|c| supports.iter().filter(|s| s.1 == c).map(|s| s.0.clone()).collect())
            .collect();
        let protos: Prototypes<f64> = compute_prototypes(&grouped)?;
        if classify_query(&query, &protos)?.predicted != naive_nearest(&query, &protos.vectors) {
            bad += 1;
        }
        if knn_predict(&supports, &query, k)? != naive_knn(&supports, &query, k) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Samples `n` episodes and returns the first violated invariant, if any.
pub fn episode_invariant_violation(
    ds: &RelationDataset,
    spec: &EpisodeSpec,
    n: usize,
    seed: u64,
) -> Result<Option<String>> {
    for i in 0..n {
        let ep = sample_episode(ds, spec, &mut episode_rng(seed, i as u64))?;
        let mut rels = ep.relations.clone();
        rels.sort_unstable();
        rels.dedup();
        if rels.len() != spec.n_way || ep.relations.len() != spec.n_way {
            return Ok(Some(format!("episode {i}: repeated or missing classes")));
        }
        for c in 0..spec.n_way {
            if ep.support[c].len() != spec.k_shot || ep.query[c].len() != spec.n_query {
                return Ok(Some(format!("episode {i}: class {c} has wrong counts")));
            }
            let mut all: Vec<usize> = ep.support[c].iter().chain(&ep.query[c]).copied().collect();
            all.sort_unstable();
            all.dedup();
            if all.len() != spec.k_shot + spec.n_query {
                return Ok(Some(format!("episode {i}: class {c} support and query overlap")));
            }
        }
    }
    Ok(None)
}

/// Runs every check, writing one line per check; returns whether all passed.
pub fn run_selftest(out: &mut dyn Write) -> Result<bool> {
    let mut all_ok = true;
    let mut report = |name: &str, ok: bool, detail: String| -> Result<()> {
        all_ok &= ok;
        writeln!(out, "[{}] {name}: {detail}", if ok { "ok" } else { "FAIL" })
            .map_err(|e| Error::io(std::path::Path::new("<stdout>"), e))
    };

    for g in gradient_suite(7)? {
        report(
            &format!("gradient {}", g.name),
            g.max_rel_error < GRAD_TOLERANCE,
            format!("max relative error {:.3e}", g.max_rel_error),
        )?;
    }

    let (params, ds, data) = toy_model(EncoderMode::Fgf, 3)?;
    let spec = EpisodeSpec::new(3, 2, 2)?;
    let mut equal = 0;
    for i in 0..20 {
        let ep = sample_episode(&ds, &spec, &mut episode_rng(11, i))?;
        let mut t1 = Tape::new(&params.store);
        let emb = embed_episode(&mut t1, &params, &ep, &data)?;
        let g = EpisodeGraph::build(&mut t1, &emb)?;
        let total = combined_loss(&mut t1, &g, &LossConfig::softmax_only())?.total;
        let mut t2 = Tape::new(&params.store);
        let plain = episode_softmax_loss(&mut t2, &params, &ep, &data)?;
        if t1.scalar(total).to_bits() == t2.scalar(plain).to_bits() {
            equal += 1;
        }
    }
    report(
        "lambda = 0 reduces to softmax loss",
        equal == 20,
        format!("{equal}/20 bitwise equal"),
    )?;

    let bad = oracle_disagreements(200, 5)?;
    report(
        "classify/knn match naive oracles",
        bad == 0,
        format!("{bad} disagreements in 200 cases"),
    )?;

    let corpus = generate(&SyntheticSpec::marker(8, 12, "S", 1), Split::Val)?;
    let violation = episode_invariant_violation(&corpus, &EpisodeSpec::new(5, 2, 3)?, 1000, 2)?;
    report(
        "episode invariants",
        violation.is_none(),
        violation.unwrap_or_else(|| "1000 episodes".into()),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let p_sum: f64 = joint_probabilities(&points, 10.0).iter().sum();
    report(
        "t-SNE P normalization",
        (p_sum - 1.0).abs() < 1e-9,
        format!("sum P = {p_sum:.12}"),
    )?;

    let vocab = build_vocab(&[&corpus], None, 8, true, 0)?;
    let model = ModelConfig {
        word_dim: 8,
        filters: 8,
        phrase_filters: 4,
        phrase_hidden: 5,
        ..ModelConfig::default()
    };
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config: TrainConfig {
                model: model.clone(),
                ..TrainConfig::default()
            },
            vocab: vocab.words().to_vec(),
            episodes_trained: 0,
            best_episode: 0,
            best_val_accuracy: None,
        },
        params: ModelParams::new(model, &vocab, 0)?,
    };
    let bytes = ckpt.to_bytes()?;
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes()?;
    let truncated_rejected = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err();
    report(
        "checkpoint round trip",
        bytes == again && truncated_rejected,
        format!("{} bytes", bytes.len()),
    )?;
    Ok(all_ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        let mut out = Vec::new();
        let ok = run_selftest(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(ok, "{text}");
    }
}
