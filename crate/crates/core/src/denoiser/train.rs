use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::CHUNK;
use super::{init_weights, Denoiser, DenoiserConfig};
use crate::data::Dataset;
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Domain, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a label with the null class.
    pub cond_dropout_p: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            cond_dropout_p: 0.1,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "cond_dropout_p must lie in [0, 1], got {}",
                self.cond_dropout_p
            )));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::InvalidConfig("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// How many training examples were shown with the null class.
    pub null_presented: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Minimizes the noise-prediction loss with Adam. Step `s` draws, per
/// example `i`, the step, the dropout coin and the noise from stream
/// `(TrainStep, s, i)`; epoch order comes from `(DataOrder, epoch)`.
pub fn train(
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    data: &Dataset,
    tc: &TrainConfig,
) -> Result<(Denoiser, TrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    tc.validate()?;
    cfg.validate()?;
    if data.samples().ncols() != cfg.sample_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset samples have length {}, model expects {}",
            data.samples().ncols(),
            cfg.sample_dim()
        )));
    }
    if data.num_labels() >= cfg.num_classes {
        return Err(Error::InvalidConfig(format!(
            "{} data classes leave no room for the null class in a {}-class model",
            data.num_labels(),
            cfg.num_classes
        )));
    }

    let mut model = init_weights(cfg, derive_seed(tc.seed, "init"))?;
    let mut adam = Adam::new(model.num_params());
    let null = cfg.null_class();
    let dim = cfg.sample_dim();
    let order_seed = derive_seed(tc.seed, "order");
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(tc.epochs),
        steps: 0,
        null_presented: 0,
    };

    for epoch in 0..tc.epochs {
        let order = data.shuffled_indices(order_seed, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(tc.batch_size) {
            let b = idx.len();
            let mut x_t = Array2::zeros((b, dim));
            let mut eps = Array2::zeros((b, dim));
            let mut ts = Vec::with_capacity(b);
            let mut classes = Vec::with_capacity(b);
            for (i, &row) in idx.iter().enumerate() {
                let mut rng =
                    SeededRng::new(tc.seed, Domain::TrainStep, report.steps as u64, i as u64);
                let t = 1 + rng.below(sched.steps());
                let drop = rng.uniform() < tc.cond_dropout_p;
                let noise = ndarray::Array1::from(rng.normals(dim));
                let x0 = data.sample(row).to_owned();
                x_t.row_mut(i)
                    .assign(&forward_noise(&x0, t, &noise, sched)?);
                eps.row_mut(i).assign(&noise);
                ts.push(t);
                if drop {
                    classes.push(null);
                    report.null_presented += 1;
                } else {
                    classes.push(data.labels()[row]);
                }
            }

            let (loss, mut grad) = batch_gradient(&model, &x_t, &ts, &classes, &eps)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: report.steps,
                    loss,
                });
            }
            if tc.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > tc.grad_clip {
                    let k = tc.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= k);
                }
            }
            adam.step(model.params_mut(), &grad, tc.lr);
            epoch_loss += loss;
            batches += 1;
            report.steps += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }

    model.round_to_f32();
    model.set_null_trained(report.null_presented > 0);
    Ok((model, report))
}

/// Mean squared error over every element of the batch and its gradient.
/// Chunks run in parallel; partial gradients are summed in chunk order.
fn batch_gradient(
    model: &Denoiser,
    x_t: &Array2<f64>,
    ts: &[usize],
    classes: &[usize],
    eps: &Array2<f64>,
) -> Result<(f64, Vec<f64>)> {
    let b = x_t.nrows();
    let count = eps.len() as f64;
    let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
    let parts: Vec<Result<(f64, Vec<f64>)>> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + CHUNK).min(b);
            let xs = x_t.slice(s![lo..hi, ..]).to_owned();
            let (out, cache) = model.forward_cached(&xs, &ts[lo..hi], &classes[lo..hi])?;
            let diff = out - eps.slice(s![lo..hi, ..]);
            let sq = diff.iter().map(|v| v * v).sum::<f64>();
            let dout = diff.mapv(|v| 2.0 * v / count);
            let mut g = vec![0.0; model.num_params()];
            model.backward(&cache, &dout, &mut g);
            Ok((sq, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for part in parts {
        let (sq, g) = part?;
        total += sq;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total / count, grad))
}
