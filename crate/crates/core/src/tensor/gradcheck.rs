use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates probed per parameter tensor; all of them when the tensor
    /// is smaller.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            max_coords_per_param: 64,
            seed: 0,
        }
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the maximum over probed coordinates of
/// `|autodiff - central| / max(1e-8, |central|)`.
pub fn finite_diff_check<F>(f: F, params: &ParamStore<f64>, cfg: &GradCheckConfig) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        let t = params.get(id);
        if !t.requires_grad() {
            continue;
        }
        let n = t.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.max_coords_per_param).into_vec()
        };
        let auto = analytic.get(id);
        for i in coords {
            let original = t.data()[i];
            probe.get_mut(id).data_mut()[i] = original + cfg.epsilon;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = original - cfg.epsilon;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = original;
            let central = (up - down) / (2.0 * cfg.epsilon);
            let a = auto.map_or(0.0, |g| g[i]);
            let rel = (a - central).abs() / central.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
