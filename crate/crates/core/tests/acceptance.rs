//! Acceptance checks. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL/SKIPPED line.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lmproto::data::{assert_disjoint, build_vocab, load_fewrel, write_fewrel, PreparedDataset, RelationDataset, Split};
use lmproto::encoder::{EncoderMode, ModelConfig, ModelParams};
use lmproto::fewshot::{
    combined_loss, embed_episode, episode_rng, episode_softmax_loss, sample_episode, EpisodeGraph, EpisodeSpec,
    LossConfig,
};
use lmproto::selftest::{episode_invariant_violation, gradient_suite, oracle_disagreements, toy_model, GRAD_TOLERANCE};
use lmproto::synth::{generate, SyntheticSpec};
use lmproto::tensor::Tape;
use lmproto::train::{evaluate, run_ablation, train, EvalMethod, Objective, ReportRow, TrainConfig, TrainOutcome};
use lmproto::viz::{joint_probabilities, tsne_project, TsneConfig};

type Outcome = Result<String, String>;

enum Verdict {
    Pass(String),
    Fail(String),
    Skipped(String),
}

fn verdict(o: Outcome) -> Verdict {
    match o {
        Ok(d) => Verdict::Pass(d),
        Err(d) => Verdict::Fail(d),
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn marker_corpora() -> (RelationDataset, RelationDataset) {
    let train_set = generate(&SyntheticSpec::marker(10, 60, "T", 1), Split::Train).unwrap();
    let val_set = generate(&SyntheticSpec::marker(10, 60, "V", 2).with_markers_of("T"), Split::Val).unwrap();
    (train_set, val_set)
}

fn small_config(episodes: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            word_dim: 16,
            filters: 32,
            phrase_filters: 16,
            phrase_hidden: 16,
            ..ModelConfig::default()
        },
        train_episode: EpisodeSpec::new(5, 1, 5).unwrap(),
        val_episode: EpisodeSpec::new(5, 1, 5).unwrap(),
        episodes,
        eval_every: 200.min(episodes),
        val_episodes: 200,
        eval_episodes: 500,
        ..TrainConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let checks = gradient_suite(7).map_err(e2s)?;
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failing: Vec<_> = checks
        .iter()
        .filter(|c| !(c.max_rel_error < GRAD_TOLERANCE))
        .map(|c| c.name)
        .collect();
    check(
        failing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst {} at {:.2e}, failing {:?}, {:.1}s",
            checks.len(),
            worst.name,
            worst.max_rel_error,
            failing,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let spec = EpisodeSpec::new(3, 2, 2).unwrap();
    let mut equal = 0;
    for i in 0..100u64 {
        let mode = if i % 2 == 0 { EncoderMode::Cnn } else { EncoderMode::Fgf };
        let (params, ds, data) = toy_model(mode, 1000 + i).map_err(e2s)?;
        let ep = sample_episode(&ds, &spec, &mut episode_rng(i, 0)).map_err(e2s)?;
        let mut t1 = Tape::new(&params.store);
        let emb = embed_episode(&mut t1, &params, &ep, &data).map_err(e2s)?;
        let g = EpisodeGraph::build(&mut t1, &emb).map_err(e2s)?;
        let total = combined_loss(&mut t1, &g, &LossConfig::softmax_only())
            .map_err(e2s)?
            .total;
        let mut t2 = Tape::new(&params.store);
        let plain = episode_softmax_loss(&mut t2, &params, &ep, &data).map_err(e2s)?;
        if t1.scalar(total).to_bits() == t2.scalar(plain).to_bits() {
            equal += 1;
        }
    }

    let (train_set, val_set) = marker_corpora();
    let base = small_config(50);
    let vocab = build_vocab(&[&train_set, &val_set], None, base.model.word_dim, true, base.seed).map_err(e2s)?;
    let run = |objective| -> Result<TrainOutcome, String> {
        let mut cfg = base.with_variant(objective, EncoderMode::Cnn);
        cfg.loss.lambda = 0.0;
        train(&cfg, &train_set, &val_set, &vocab, &mut std::io::sink()).map_err(e2s)
    };
    let plain = run(Objective::Softmax)?;
    let large_margin = run(Objective::SoftmaxTriplet)?;
    let same_losses = plain.step_losses.len() == 50
        && plain
            .step_losses
            .iter()
            .zip(&large_margin.step_losses)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let same_params = plain.checkpoint.params == large_margin.checkpoint.params;
    let same_history = plain.history == large_margin.history;
    check(
        equal == 100 && same_losses && same_params && same_history,
        format!(
            "{equal}/100 losses bitwise equal; 50-episode trajectories: losses {same_losses}, parameters {same_params}, validation log {same_history}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let unsignaled = generate(&SyntheticSpec::unsignaled(10, 60, "U", 3), Split::Test).unwrap();
    let cfg = small_config(1);
    let vocab = build_vocab(&[&unsignaled], None, cfg.model.word_dim, true, 0).map_err(e2s)?;
    let params = ModelParams::<f32>::new(cfg.model.clone(), &vocab, 0).map_err(e2s)?;
    let data = PreparedDataset::new(&unsignaled, &vocab, cfg.model.max_len, cfg.model.max_rel);
    let spec = EpisodeSpec::new(5, 1, 5).unwrap();
    let report = evaluate(&params, &unsignaled, &data, &spec, 2000, 9, EvalMethod::Prototype).map_err(e2s)?;
    let chance_ok = (report.accuracy - 20.0).abs() <= 3.0 * report.ci95;

    let (train_set, val_set) = marker_corpora();
    let cfg = small_config(2000);
    let vocab = build_vocab(&[&train_set, &val_set], None, cfg.model.word_dim, true, cfg.seed).map_err(e2s)?;
    let start = Instant::now();
    let outcome = train(&cfg, &train_set, &val_set, &vocab, &mut std::io::sink()).map_err(e2s)?;
    let elapsed = start.elapsed();
    let best = outcome
        .history
        .iter()
        .map(|h| h.val_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let first = outcome
        .history
        .iter()
        .find(|h| h.val_accuracy >= 95.0)
        .map(|h| h.episode);
    check(
        chance_ok && best >= 95.0 && elapsed < Duration::from_secs(600),
        format!(
            "untrained {:.2} ± {:.2} (|Δ| ≤ {:.2} required); {} best val acc {:.2}%, ≥95% first at episode {:?}, {:.1}s",
            report.accuracy,
            report.ci95,
            3.0 * report.ci95,
            outcome.checkpoint.model_name(),
            best,
            first,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_4() -> Outcome {
    let bad = oracle_disagreements(1000, 2024).map_err(e2s)?;
    check(bad == 0, format!("{bad} disagreements over 1000 cases"))
}

fn criterion_5() -> Outcome {
    let (train_set, val_set) = marker_corpora();
    let mut violations = Vec::new();
    for (ds, spec) in [
        (&train_set, EpisodeSpec::new(10, 1, 5).unwrap()),
        (&val_set, EpisodeSpec::new(5, 5, 5).unwrap()),
    ] {
        if let Some(v) = episode_invariant_violation(ds, &spec, 10_000, 17).map_err(e2s)? {
            violations.push(v);
        }
    }
    let disjoint = assert_disjoint(&[&train_set, &val_set]).is_ok();
    let overlap_rejected = assert_disjoint(&[&train_set, &train_set]).is_err();

    let (params, ds, data) = toy_model(EncoderMode::Fgf, 5).map_err(e2s)?;
    let spec = EpisodeSpec::new(3, 2, 2).unwrap();
    let mut equivariant = 0;
    for i in 0..100u64 {
        let ep = sample_episode(&ds, &spec, &mut episode_rng(23, i)).map_err(e2s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let mut perm: Vec<usize> = (0..spec.n_way).collect();
        for j in (1..perm.len()).rev() {
            perm.swap(j, rng.gen_range(0..=j));
        }
        let logits_of = |ep: &lmproto::fewshot::Episode| -> Result<HashMap<(usize, usize), Vec<u64>>, String> {
            let mut tape = Tape::new(&params.store);
            let emb = embed_episode(&mut tape, &params, ep, &data).map_err(e2s)?;
            let g = EpisodeGraph::build(&mut tape, &emb).map_err(e2s)?;
            let rows = g.logits(&tape);
            Ok(ep
                .labeled_queries()
                .zip(rows)
                .map(|((_, r, i), row)| ((r, i), row.iter().map(|v| v.to_bits()).collect()))
                .collect())
        };
        let before = logits_of(&ep)?;
        let after = logits_of(&ep.permuted(&perm))?;
        let ok = before.iter().all(|(key, row)| {
            let permuted: Vec<u64> = perm.iter().map(|&p| row[p]).collect();
            after.get(key) == Some(&permuted)
        });
        if ok {
            equivariant += 1;
        }
    }
    check(
        violations.is_empty() && disjoint && overlap_rejected && equivariant == 100,
        format!(
            "20000 episodes, violations {violations:?}; splits disjoint {disjoint}, overlap rejected {overlap_rejected}; {equivariant}/100 permutation-equivariant"
        ),
    )
}

/// Looks for FewRel JSON under `$LMPN_FEWREL_DIR`; word vectors come from
/// `$LMPN_VECTORS` when set.
fn criterion_6() -> Verdict {
    let Some(dir) = std::env::var_os("LMPN_FEWREL_DIR").map(PathBuf::from) else {
        return Verdict::Skipped("set LMPN_FEWREL_DIR to a directory with FewRel train and val JSON".into());
    };
    let pick = |names: &[&str]| names.iter().map(|n| dir.join(n)).find(|p| p.exists());
    let (Some(train_path), Some(val_path)) = (
        pick(&["train_wiki.json", "train.json"]),
        pick(&["val_wiki.json", "val.json"]),
    ) else {
        return Verdict::Skipped(format!("no train/val JSON in {}", dir.display()));
    };
    verdict(fewrel_reproduction(&train_path, &val_path))
}

fn fewrel_reproduction(train_path: &Path, val_path: &Path) -> Outcome {
    let mut config = TrainConfig::default();
    config.data.vectors = std::env::var_os("LMPN_VECTORS").map(PathBuf::from);
    let train_set = load_fewrel(train_path, Split::Train).map_err(e2s)?;
    let val_set = load_fewrel(val_path, Split::Val).map_err(e2s)?;
    let vocab = build_vocab(
        &[&train_set, &val_set],
        config.data.vectors.as_deref(),
        config.model.word_dim,
        config.model.lowercase,
        config.seed,
    )
    .map_err(e2s)?;
    let rows = run_ablation(
        &config,
        &train_set,
        &val_set,
        &vocab,
        8,
        config.seed,
        &mut std::io::stderr(),
    )
    .map_err(e2s)?;
    let row = |name: &str| -> Result<&ReportRow, String> {
        rows.iter()
            .find(|r| r.model == name && r.setting == "5-way-1-shot")
            .ok_or_else(|| format!("no 5-way-1-shot row for {name}"))
    };
    let acc = |name: &str| -> Result<(f64, f64), String> {
        let r = row(name)?;
        Ok((r.accuracy.unwrap_or(f64::NAN), r.ci95.unwrap_or(0.0)))
    };
    let (p_cnn, p_cnn_ci) = acc("ProtoNet (CNN)")?;
    let (p_fgf, _) = acc("ProtoNet (FGF)")?;
    let (lm_cnn, lm_cnn_ci) = acc("LM-ProtoNet (CNN)")?;
    let (lm_fgf, _) = acc("LM-ProtoNet (FGF)")?;
    // "≈" means the CNN pair overlaps within their joint interval
    let cnn_order = lm_cnn > p_cnn || (lm_cnn - p_cnn).abs() <= p_cnn_ci + lm_cnn_ci;
    check(
        lm_fgf > p_fgf && lm_fgf > lm_cnn && cnn_order && lm_fgf - p_cnn >= 2.0 && (p_cnn - 68.40).abs() <= 4.0,
        format!(
            "ProtoNet(CNN) {p_cnn:.2}, ProtoNet(FGF) {p_fgf:.2}, LM-ProtoNet(CNN) {lm_cnn:.2}, LM-ProtoNet(FGF) {lm_fgf:.2}"
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lmproto"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(e2s)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "lmproto {} exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn write_corpora(dir: &Path) -> Result<(String, String), String> {
    let (train_set, val_set) = marker_corpora();
    let (t, v) = (dir.join("train.json"), dir.join("val.json"));
    write_fewrel(&train_set, &t).map_err(e2s)?;
    write_fewrel(&val_set, &v).map_err(e2s)?;
    Ok((t.display().to_string(), v.display().to_string()))
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let (train_path, val_path) = write_corpora(dir.path())?;
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config(100).to_json_pretty()).map_err(e2s)?;
    let config = config.display().to_string();
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let ckpt = dir.path().join(format!("run{run}.ckpt")).display().to_string();
        let csv = dir.path().join(format!("run{run}.csv")).display().to_string();
        let log = dir.path().join(format!("run{run}.log")).display().to_string();
        run_cli(&[
            "train",
            "--config",
            &config,
            "--train",
            &train_path,
            "--val",
            &val_path,
            "--out",
            &ckpt,
            "--seed",
            "11",
            "--log",
            &log,
        ])?;
        run_cli(&[
            "eval",
            "--ckpt",
            &ckpt,
            "--data",
            &val_path,
            "--nway",
            "5",
            "--kshot",
            "1",
            "--episodes",
            "300",
            "--seed",
            "4",
            "--csv",
            &csv,
        ])?;
        artifacts.push((
            std::fs::read(&ckpt).map_err(e2s)?,
            std::fs::read(&csv).map_err(e2s)?,
            std::fs::read(&log).map_err(e2s)?,
        ));
    }
    let (a, b) = (&artifacts[0], &artifacts[1]);
    check(
        a.0 == b.0 && a.1 == b.1 && a.2 == b.2,
        format!(
            "checkpoint {} bytes identical {}, CSV identical {}, log identical {}",
            a.0.len(),
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let points: Vec<Vec<f64>> = (0..120)
        .map(|_| (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let p_sum: f64 = joint_probabilities(&points, 30.0).iter().sum();
    let normalized = (p_sum - 1.0).abs() < 1e-9;

    let mut clusters = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..50 {
            clusters.push(
                (0..8)
                    .map(|d| if d == 0 { 10.0 * c as f64 } else { 0.0 } + rng.gen_range(-1.0..1.0))
                    .collect(),
            );
            labels.push(c);
        }
    }
    let cfg = TsneConfig {
        perplexity: 15.0,
        seed: 3,
        ..TsneConfig::default()
    };
    let y = tsne_project(&clusters, &cfg).map_err(e2s)?;
    let pure = (0..y.len())
        .filter(|&i| {
            let nn = (0..y.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let d = |j: usize| (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            labels[nn] == labels[i]
        })
        .count();

    let dir = tempfile::tempdir().map_err(e2s)?;
    let (train_path, val_path) = write_corpora(dir.path())?;
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config(50).to_json_pretty()).map_err(e2s)?;
    let p = |n: &str| dir.path().join(n).display().to_string();
    let (ckpt, emb, proj, svg) = (p("m.ckpt"), p("emb.csv"), p("proj.csv"), p("plot.svg"));
    run_cli(&[
        "train",
        "--config",
        &config.display().to_string(),
        "--train",
        &train_path,
        "--val",
        &val_path,
        "--out",
        &ckpt,
        "--log",
        &p("train.log"),
    ])?;
    let start = Instant::now();
    run_cli(&[
        "export-emb",
        "--ckpt",
        &ckpt,
        "--data",
        &val_path,
        "--nway",
        "7",
        "--kshot",
        "40",
        "--seed",
        "0",
        "--out",
        &emb,
    ])?;
    run_cli(&[
        "tsne",
        "--in",
        &emb,
        "--perplexity",
        "30",
        "--iters",
        "1000",
        "--seed",
        "0",
        "--out",
        &proj,
    ])?;
    run_cli(&["plot", "--in", &proj, "--out", &svg])?;
    let elapsed = start.elapsed();
    let text = std::fs::read_to_string(&svg).map_err(e2s)?;
    let doc = roxmltree::Document::parse(&text).map_err(e2s)?;
    let circles = doc.descendants().filter(|n| n.has_tag_name("circle")).count();
    let legend = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("legend-entry"))
        .count();
    check(
        normalized && pure == y.len() && circles == 280 && legend == 7 && elapsed < Duration::from_secs(120),
        format!(
            "sum P - 1 = {:.1e}; NN purity {pure}/{}; pipeline {:.1}s, SVG has {circles} points and {legend} legend entries",
            p_sum - 1.0,
            y.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 gradient suite", || verdict(criterion_1())),
        ("2 reduction equivalence", || verdict(criterion_2())),
        ("3 chance level and learning sanity", || verdict(criterion_3())),
        ("4 oracle equivalence", || verdict(criterion_4())),
        ("5 episodic protocol invariants", || verdict(criterion_5())),
        ("6 FewRel reproduction", criterion_6),
        ("7 determinism", || verdict(criterion_7())),
        ("8 t-SNE suite", || verdict(criterion_8())),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        match f() {
            Verdict::Pass(d) => println!("criterion {name}: PASS ({d})"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("criterion {name}: FAIL ({d})");
            }
            Verdict::Skipped(d) => println!("criterion {name}: SKIPPED ({d})"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
