//! Discrete variance-preserving diffusion: schedule tables, forward noising,
//! the noise-prediction loss, and DDIM / ancestral (DDPM) solver steps.
//!
//! Steps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1` standing for
//! clean data.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig(
                "diffusion needs at least one step".into(),
            ));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got [{}, {}]",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

/// Per-step tables, stored 0-based (`betas[t - 1]` is the beta of step `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        make_linear_schedule(cfg)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidStep(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn make_linear_schedule(cfg: &DiffusionConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let n = cfg.steps;
    let betas: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// `steps` evenly spaced steps in descending order, `1 + floor(i * T / steps)`.
///
/// With `T = 1000` and 50 steps this gives `981, 961, ..., 21, 1`.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidConfig(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((0..steps).rev().map(|i| 1 + i * total / steps).collect())
}

fn check_same_shape<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`. `t = 0` returns `x0`.
pub fn forward_noise<D: Dimension>(
    x0: &Array<f64, D>,
    t: usize,
    eps: &Array<f64, D>,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    if t > sched.steps() {
        return Err(Error::InvalidStep(format!(
            "step {t} outside 0..={}",
            sched.steps()
        )));
    }
    check_same_shape(x0, eps, "forward_noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Mean squared error between predicted and true noise.
pub fn dsm_loss<D: Dimension>(eps_hat: &Array<f64, D>, eps: &Array<f64, D>) -> Result<f64> {
    check_same_shape(eps_hat, eps, "dsm_loss")?;
    if eps.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = Zip::from(eps_hat)
        .and(eps)
        .fold(0.0, |acc, &p, &e| acc + (p - e) * (p - e));
    Ok(sum / eps.len() as f64)
}

/// Deterministic DDIM update between two cumulative signal levels.
pub fn ddim_update<D: Dimension>(
    x_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    alpha_bar_from: f64,
    alpha_bar_to: f64,
) -> Array<f64, D> {
    let (sa, sb) = (alpha_bar_from.sqrt(), (1.0 - alpha_bar_from).sqrt());
    let (ta, tb) = (alpha_bar_to.sqrt(), (1.0 - alpha_bar_to).sqrt());
    Zip::from(x_t).and(eps_hat).map_collect(|&x, &e| {
        let x0 = (x - sb * e) / sa;
        ta * x0 + tb * e
    })
}

/// DDIM step with `eta = 0` from `t` to `t_prev < t`.
pub fn ddim_step<D: Dimension>(
    x_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::InvalidStep(format!(
            "DDIM needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    check_same_shape(x_t, eps_hat, "ddim_step")?;
    Ok(ddim_update(
        x_t,
        eps_hat,
        sched.alpha_bar(t),
        sched.alpha_bar(t_prev),
    ))
}

/// Ancestral step from `t` to `t - 1`.
pub fn ddpm_step<D: Dimension>(
    x_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Array<f64, D>> {
    sched.check_step(t)?;
    ddpm_step_to(x_t, eps_hat, t, t - 1, sched, rng)
}

/// Ancestral step across a skipped interval `t -> t_prev`, using the
/// effective `alpha = abar_t / abar_prev`. Reduces to the single-step
/// update when `t_prev = t - 1`. No noise is added when landing on step 0.
pub fn ddpm_step_to<D: Dimension>(
    x_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Array<f64, D>> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::InvalidStep(format!(
            "DDPM needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    check_same_shape(x_t, eps_hat, "ddpm_step")?;
    let ab_t = sched.alpha_bar(t);
    let (alpha, beta) = if t_prev + 1 == t {
        (sched.alpha(t), sched.beta(t))
    } else {
        let a = ab_t / sched.alpha_bar(t_prev);
        (a, 1.0 - a)
    };
    let coef = beta / (1.0 - ab_t).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = Zip::from(x_t)
        .and(eps_hat)
        .map_collect(|&x, &e| inv * (x - coef * e));
    if t_prev > 0 {
        let sigma = beta.sqrt();
        out.iter_mut().for_each(|v| *v += sigma * rng.normal());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Domain;
    use ndarray::{array, Array1, Array2};

    fn default_sched() -> NoiseSchedule {
        make_linear_schedule(&DiffusionConfig::default()).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let cfg = DiffusionConfig {
            steps: 1,
            beta_start: 0.02,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
        };
        let s = make_linear_schedule(&cfg).unwrap();
        assert_eq!(s.betas(), &[0.02]);
        assert!((s.alpha_bar(1) - 0.98).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = default_sched();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1) < s.alpha_bar(0));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn final_alpha_bar_matches_running_product() {
        // independent product in log space, betas rebuilt from the closed form
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let s = default_sched();
        assert!((s.alpha_bar(1000) - log_sum.exp()).abs() < 1e-12);
        // regression pin
        assert!(
            (s.alpha_bar(1000) - 4.035_829_826_859_4e-5).abs() < 1e-12,
            "{}",
            s.alpha_bar(1000)
        );
    }

    #[test]
    fn invalid_configs() {
        for (bs, be) in [(0.0, 0.02), (0.03, 0.02), (1e-4, 1.0), (-1.0, 0.5)] {
            let cfg = DiffusionConfig {
                beta_start: bs,
                beta_end: be,
                ..Default::default()
            };
            assert!(matches!(
                make_linear_schedule(&cfg),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn forward_noise_cases() {
        let s = default_sched();
        let x0 = array![0.3, -1.2, 0.7];
        let eps = array![1.0, 0.5, -2.0];
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = Array1::zeros(3);
        let out = forward_noise(&zero, 500, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(500)).sqrt();
        for (o, e) in out.iter().zip(eps.iter()) {
            assert!((o - scale * e).abs() < 1e-15);
        }
        assert!(forward_noise(&x0, 1001, &eps, &s).is_err());
        assert!(forward_noise(&x0, 5, &array![1.0], &s).is_err());
    }

    #[test]
    fn forward_noise_closed_form() {
        let cfg = DiffusionConfig {
            steps: 1,
            beta_start: 0.02,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
        };
        let s = make_linear_schedule(&cfg).unwrap();
        let out = forward_noise(&array![1.0], 1, &array![1.0], &s).unwrap();
        assert!((out[0] - (0.98f64.sqrt() + 0.02f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = default_sched();
        let x0 = Array1::from_elem(10_000, 0.5);
        for t in [1, 100, 500, 1000] {
            let mut rng = SeededRng::new(3, Domain::Eval, t as u64, 0);
            let eps = Array1::from(rng.normals(10_000));
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let mean = xt.mean().unwrap();
            let var = xt.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let want = 1.0 - s.alpha_bar(t);
            assert!(
                (var / want - 1.0).abs() < 0.05,
                "t={t} var={var} want={want}"
            );
        }
    }

    #[test]
    fn loss_cases() {
        let eps = array![[0.1, -0.2], [1.5, 0.0]];
        assert_eq!(dsm_loss(&eps, &eps).unwrap(), 0.0);
        assert!((dsm_loss(&(&eps + 1.0), &eps).unwrap() - 1.0).abs() < 1e-15);
        let pred = array![[0.3, 0.1], [-1.0, 2.0]];
        let mut want = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                want += (pred[[i, j]] - eps[[i, j]]).powi(2);
            }
        }
        assert!((dsm_loss(&pred, &eps).unwrap() - want / 4.0).abs() < 1e-15);
        assert!(dsm_loss(&pred, &array![[1.0]]).is_err());
    }

    #[test]
    fn ddim_fixed_point_and_inversion() {
        let s = default_sched();
        let x = array![0.4, -0.9];
        let e = array![0.2, 1.1];
        let ab = s.alpha_bar(300);
        let same = ddim_update(&x, &e, ab, ab);
        for (a, b) in same.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let xt = forward_noise(&x, 700, &e, &s).unwrap();
        let back = ddim_step(&xt, &e, 700, 0, &s).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_two_steps_match_closed_form() {
        let s = default_sched();
        let x = array![1.3, -0.4];
        let e = array![0.5, 0.25];
        let mid = ddim_step(&x, &e, 800, 400, &s).unwrap();
        let end = ddim_step(&mid, &e, 400, 100, &s).unwrap();
        // composing two DDIM updates with the same eps equals one jump
        let (a8, a1) = (s.alpha_bar(800), s.alpha_bar(100));
        for i in 0..2 {
            let x0 = (x[i] - (1.0 - a8).sqrt() * e[i]) / a8.sqrt();
            let want = a1.sqrt() * x0 + (1.0 - a1).sqrt() * e[i];
            assert!((end[i] - want).abs() < 1e-12);
        }
        assert!(ddim_step(&x, &e, 100, 100, &s).is_err());
        assert!(ddim_step(&x, &e, 0, 0, &s).is_err());
    }

    #[test]
    fn ddpm_terminal_step_is_posterior_mean() {
        let s = default_sched();
        let x = array![0.7, -0.1];
        let e = array![0.3, 0.9];
        let mut rng = SeededRng::new(0, Domain::Solver, 0, 1);
        let out = ddpm_step(&x, &e, 1, &s, &mut rng).unwrap();
        let coef = s.beta(1) / (1.0 - s.alpha_bar(1)).sqrt();
        for i in 0..2 {
            let want = (x[i] - coef * e[i]) / s.alpha(1).sqrt();
            assert!((out[i] - want).abs() < 1e-15);
        }
        assert!(ddpm_step(&x, &e, 0, &s, &mut rng).is_err());
    }

    #[test]
    fn ddpm_zero_input_is_scaled_noise() {
        let s = default_sched();
        let z = Array2::<f64>::zeros((2, 3));
        let out = ddpm_step(
            &z,
            &z,
            10,
            &s,
            &mut SeededRng::new(4, Domain::Solver, 0, 10),
        )
        .unwrap();
        let mut rng = SeededRng::new(4, Domain::Solver, 0, 10);
        for v in out.iter() {
            assert!((v - s.beta(10).sqrt() * rng.normal()).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_two_step_closed_form() {
        let cfg = DiffusionConfig {
            steps: 2,
            beta_start: 0.1,
            beta_end: 0.3,
            schedule: ScheduleKind::Linear,
        };
        let s = make_linear_schedule(&cfg).unwrap();
        let x2 = array![1.0];
        let e = array![0.5];
        let mut rng = SeededRng::new(9, Domain::Solver, 0, 2);
        let x1 = ddpm_step(&x2, &e, 2, &s, &mut rng).unwrap();
        let x0 = ddpm_step(&x1, &e, 1, &s, &mut rng).unwrap();
        // hand computation: abar_1 = 0.9, abar_2 = 0.9 * 0.7 = 0.63
        let z = SeededRng::new(9, Domain::Solver, 0, 2).normal();
        let m2 = (1.0 - 0.3 / 0.37f64.sqrt() * 0.5) / 0.7f64.sqrt();
        let want1 = m2 + 0.3f64.sqrt() * z;
        assert!((x1[0] - want1).abs() < 1e-12);
        let want0 = (want1 - 0.1 / 0.1f64.sqrt() * 0.5) / 0.9f64.sqrt();
        assert!((x0[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn timesteps_are_uniform() {
        let ts = sampling_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 981);
        assert_eq!(*ts.last().unwrap(), 1);
        assert_eq!(sampling_timesteps(4, 4).unwrap(), vec![4, 3, 2, 1]);
        assert!(sampling_timesteps(10, 11).is_err());
        assert!(sampling_timesteps(10, 0).is_err());
    }

    #[test]
    fn ddim_with_oracle_converges_to_point() {
        let s = default_sched();
        let target = array![0.6, -0.35];
        let mut x = array![1.2, 0.4];
        let ts = sampling_timesteps(1000, 50).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let ab = s.alpha_bar(t);
            let eps = (&x - &(&target * ab.sqrt())) / (1.0 - ab).sqrt();
            let prev = ts.get(i + 1).copied().unwrap_or(0);
            x = ddim_step(&x, &eps, t, prev, &s).unwrap();
        }
        for (a, b) in x.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
