//! Exact O(n²) t-SNE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_POINTS: usize = 5_000;
const PERPLEXITY_TOL: f64 = 1e-5;
const PERPLEXITY_STEPS: usize = 50;
const MIN_GAIN: f64 = 0.01;
const IDENTICAL_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations with exaggerated P and momentum 0.5; 0.8 afterwards.
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1_000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(2..=MAX_POINTS).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "t-SNE needs between 2 and {MAX_POINTS} points, got {n}"
            )));
        }
        let upper = (n as f64 - 1.0) / 3.0;
        if !(self.perplexity > 1.0 && self.perplexity < upper) {
            return Err(Error::InvalidArgument(format!(
                "perplexity {} must lie in (1, {upper:.3}) for {n} points",
                self.perplexity
            )));
        }
        if self.iterations < 250 {
            return Err(Error::InvalidArgument(format!(
                "at least 250 iterations required, got {}",
                self.iterations
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.early_exaggeration >= 1.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and exaggeration at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-conditional Gaussian affinities `p(j|i)`, each row calibrated to
/// `perplexity` by bisection on the precision.
fn conditional_probabilities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let di = &d[i * n..(i + 1) * n];
        // shift by the nearest neighbour so the largest weight is exp(0)
        let dmin = (0..n).filter(|&j| j != i).map(|j| di[j]).fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        for _ in 0..PERPLEXITY_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(di[j] - dmin) * beta).exp() };
                sum += row[j];
                weighted += (di[j] - dmin) * row[j];
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < PERPLEXITY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_infinite() {
                    beta * 2.0
                } else {
                    0.5 * (beta + hi)
                };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[i * n + j] = row[j] / sum;
        }
    }
    p
}

/// Symmetrized affinities `(p(j|i) + p(i|j))` normalized to sum 1.
/// Returned row-major, `n × n`, zero diagonal.
pub fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let mut p = conditional_probabilities(&squared_distances(x), n, perplexity);
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = p[i * n + j] + p[j * n + i];
            p[i * n + j] = v;
            p[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Projects `x` (n rows of equal width) to two dimensions.
///
/// All-identical inputs are first perturbed by seeded uniform noise of
/// magnitude 1e-10 so the affinities are defined.
pub fn tsne_project(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = x.len();
    cfg.validate(n)?;
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("tsne_project", "rows differ in width"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("t-SNE input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jittered;
    let x = if x.iter().all(|r| r == &x[0]) {
        jittered = x
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| v + rng.gen_range(-IDENTICAL_JITTER..IDENTICAL_JITTER))
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>();
        &jittered[..]
    } else {
        x
    };

    let p = joint_probabilities(x, cfg.perplexity);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0f64; n * n];
    let mut grad = vec![[0.0f64; 2]; n];

    for iter in 0..cfg.iterations {
        let early = iter < cfg.exaggeration_iters;
        let exaggeration = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };

        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = (exaggeration * p[i * n + j] - w / z) * w;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign {
                    gains[i][k] * 0.8
                } else {
                    gains[i][k] + 0.2
                };
                gains[i][k] = gains[i][k].max(MIN_GAIN);
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        let mean = y.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "t-SNE diverged to non-finite coordinates".into(),
        ));
    }
    Ok(y)
}

/// KL(P || Q) of a finished embedding, for diagnostics.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut q = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                q[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
                z += q[i * n + j];
            }
        }
    }
    p.iter()
        .zip(&q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / (qv / z).max(1e-300)).ln())
        .sum()
}
