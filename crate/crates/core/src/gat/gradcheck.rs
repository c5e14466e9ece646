use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::{loss, loss_and_grad};
use super::params::GatParams;
use super::train::GatExample;

pub const DEFAULT_GRAD_SAMPLES: usize = 200;

/// Below this magnitude a gradient entry is treated as zero when forming
/// the relative error. Central differences at ε = 1e-5 carry roundoff of
/// about ε_mach·|L|/ε ≈ 1e-11·|L|, so smaller entries are mostly noise.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Parameter index with the largest relative error.
    pub worst_index: usize,
}

/// Compares the analytic gradient with central differences on a random
/// sample of `samples` parameters (all of them if the model is smaller).
pub fn grad_check(
    params: &GatParams,
    example: &GatExample,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (_, analytic) = loss_and_grad(params, &example.graph, &example.context, example.gold)?;
    let indices: Vec<usize> = if samples >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = rand::seq::index::sample(&mut rng, params.len(), samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: indices.len(),
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
    };
    for &k in &indices {
        let orig = probe.values()[k];
        probe.values_mut()[k] = orig + epsilon;
        let up = loss(&probe, &example.graph, &example.context, example.gold)?;
        probe.values_mut()[k] = orig - epsilon;
        let down = loss(&probe, &example.graph, &example.context, example.gold)?;
        probe.values_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[k];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        report.max_absolute_error = report.max_absolute_error.max(abs);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = k;
        }
    }
    Ok(report)
}
