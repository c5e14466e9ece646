use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::prune::ElementGraph;

use super::model::{backward, check_gold, forward_trace};
use super::params::GatParams;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// One supervised instance: element graph, QA-context embedding, gold option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatExample {
    pub graph: ElementGraph,
    pub context: Vec<f64>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch (with dropout).
    pub loss: f64,
    pub accuracy: f64,
    pub dev_loss: Option<f64>,
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss and accuracy on the training set before any update.
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub epochs: Vec<EpochMetrics>,
}

/// Rectified Adam (Liu et al.): plain momentum SGD while the variance
/// estimate is unreliable, adaptive steps with a rectification term after.
#[derive(Debug, Clone)]
pub struct RAdam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl RAdam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        RAdam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        let b1t = b1.powi(t);
        let b2t = b2.powi(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * self.step as f64 * b2t / (1.0 - b2t);
        let step_size = self.lr / (1.0 - b1t);
        if rho_t > 5.0 {
            let rect = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt();
            let bias2 = (1.0 - b2t).sqrt();
            for ((p, m), v) in params.iter_mut().zip(&self.m).zip(&self.v) {
                *p -= step_size * rect * m / (v.sqrt() / bias2 + self.eps);
            }
        } else {
            for (p, m) in params.iter_mut().zip(&self.m) {
                *p -= step_size * m;
            }
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean loss and accuracy without dropout.
pub fn evaluate(params: &GatParams, data: &[GatExample], exec: Execution) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let rows = par::try_map(exec, data, |ex| -> Result<(f64, bool)> {
        check_gold(params, ex.gold)?;
        let tr = forward_trace::<ChaCha8Rng>(params, &ex.graph, &ex.context, None)?;
        Ok((tr.loss(ex.gold), argmax(tr.probabilities()) == ex.gold))
    })?;
    let n = rows.len() as f64;
    let loss = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = rows.iter().filter(|r| r.1).count() as f64 / n;
    Ok((loss, acc))
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Minibatch training with RAdam. Per-instance gradients of a batch may be
/// computed in parallel; they are summed in instance order, so the result is
/// the same for every execution strategy.
pub fn train(
    params: &mut GatParams,
    data: &[GatExample],
    dev: Option<&[GatExample]>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for ex in data {
        check_gold(params, ex.gold)?;
    }
    let (initial_loss, initial_accuracy) = evaluate(params, data, cfg.execution)?;
    if !initial_loss.is_finite() {
        return Err(Error::Numerical("initial loss is not finite".into()));
    }
    let mut opt = RAdam::new(
        params.len(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let current: &GatParams = params;
            let results = par::map(
                cfg.execution,
                batch,
                |&idx| -> Result<(f64, Vec<f64>, bool)> {
                    let ex = &data[idx];
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, idx as u64));
                    let tr = forward_trace(current, &ex.graph, &ex.context, Some(&mut rng))?;
                    let hit = argmax(tr.probabilities()) == ex.gold;
                    let (loss, grad) = backward(current, &tr, ex.gold);
                    Ok((loss, grad, hit))
                },
            );
            let mut grad = vec![0.0; params.len()];
            for (k, r) in results.into_iter().enumerate() {
                let (loss, g, hit) = r?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss became {loss} at epoch {}, batch {b}, instance {}",
                        epoch + 1,
                        batch[k]
                    )));
                }
                loss_sum += loss;
                correct += hit as usize;
                for (a, x) in grad.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(params.values_mut(), &grad);
            if params.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite at epoch {}, batch {b}",
                    epoch + 1
                )));
            }
        }
        let (dev_loss, dev_accuracy) = match dev {
            Some(d) if !d.is_empty() => {
                let (l, a) = evaluate(params, d, cfg.execution)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            dev_loss,
            dev_accuracy,
        };
        log::info!(
            "epoch {} loss {:.4} acc {:.3}{}",
            m.epoch,
            m.loss,
            m.accuracy,
            m.dev_accuracy
                .map(|a| format!(" dev acc {a:.3}"))
                .unwrap_or_default()
        );
        epochs.push(m);
    }
    Ok(TrainReport {
        initial_loss,
        initial_accuracy,
        epochs,
    })
}

/// Gradient of the mean loss over `batch`, reduced in input order.
pub fn batch_gradient(
    params: &GatParams,
    batch: &[GatExample],
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts = par::try_map(exec, batch, |ex| -> Result<(f64, Vec<f64>)> {
        check_gold(params, ex.gold)?;
        let tr = forward_trace::<ChaCha8Rng>(params, &ex.graph, &ex.context, None)?;
        Ok(backward(params, &tr, ex.gold))
    })?;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, x) in grad.iter_mut().zip(&g) {
            *a += x;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radam_warmup_then_rectified() {
        // first steps are un-adapted momentum; later steps scale by 1/sqrt(v)
        let mut opt = RAdam::new(1, 0.1, 0.9, 0.999, 1e-8);
        let mut p = [1.0];
        opt.step(&mut p, &[2.0]);
        // m̂ = 2 → p = 1 - 0.1*2
        assert!((p[0] - 0.8).abs() < 1e-12);
        for _ in 0..10 {
            opt.step(&mut p, &[2.0]);
        }
        let before = p[0];
        opt.step(&mut p, &[2.0]);
        // rectified step with constant gradient: ≈ lr * rect, rect < 1
        let delta = before - p[0];
        assert!(delta > 0.0 && delta < 0.1, "{delta}");
    }

    #[test]
    fn radam_minimises_quadratic() {
        let mut opt = RAdam::new(2, 0.05, 0.9, 0.999, 1e-8);
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }
}
