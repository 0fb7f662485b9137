//! Noise schedules, forward noising, DDIM stepping and the latent
//! compositions used by both pipeline stages.
//!
//! Timesteps are 1-based (`1..=T`) and `α_0 = 1`, so a DDIM step that lands
//! on `t_prev = 0` returns the clean prediction.

use thiserror::Error;

use crate::layout::BinaryMask;
use crate::tensor::{Latent, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("invalid timesteps: t={t}, t_prev={t_prev}")]
    InvalidTimesteps { t: usize, t_prev: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// β_t and the cumulative products α_t = ∏_{i≤t}(1 − β_i).
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Total number of diffusion steps `T`.
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t for `t` in `0..=T`, with α_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.train_steps() {
            return Err(DiffusionError::InvalidRange(format!(
                "timestep {t} exceeds T={}",
                self.train_steps()
            )));
        }
        Ok(())
    }
}

impl Default for Schedule {
    /// T = 1000, linear β in [0.00085, 0.012].
    fn default() -> Self {
        make_schedule(1000, 0.00085, 0.012).expect("default schedule is valid")
    }
}

/// Linear β schedule over `train_steps` steps.
pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<Schedule, DiffusionError> {
    if train_steps == 0 {
        return Err(DiffusionError::InvalidRange("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if train_steps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (train_steps - 1) as f64;
        (0..train_steps)
            .map(|i| beta_start + step * i as f64)
            .collect()
    };
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(Schedule { betas, alpha_bars })
}

/// `√α_t·x0 + √(1−α_t)·eps`. `t = 0` is allowed and returns `x0`.
pub fn forward_noise(
    x0: &Latent,
    t: usize,
    eps: &Latent,
    schedule: &Schedule,
) -> Result<Latent, DiffusionError> {
    schedule.check_t(t)?;
    let a = schedule.alpha_bar(t);
    Ok(x0.axpby(a.sqrt(), eps, (1.0 - a).sqrt())?)
}

/// Clean-latent estimate `(x_t − √(1−α_t)·eps)/√α_t`.
pub fn predict_x0(
    x_t: &Latent,
    eps_pred: &Latent,
    t: usize,
    schedule: &Schedule,
) -> Result<Latent, DiffusionError> {
    schedule.check_t(t)?;
    let a = schedule.alpha_bar(t);
    let inv = 1.0 / a.sqrt();
    Ok(x_t.axpby(inv, eps_pred, -(1.0 - a).sqrt() * inv)?)
}

/// Deterministic DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(
    x_t: &Latent,
    eps_pred: &Latent,
    t: usize,
    t_prev: usize,
    schedule: &Schedule,
) -> Result<Latent, DiffusionError> {
    if t_prev >= t || t == 0 || t > schedule.train_steps() {
        return Err(DiffusionError::InvalidTimesteps { t, t_prev });
    }
    let x0 = predict_x0(x_t, eps_pred, t, schedule)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let a_prev = schedule.alpha_bar(t_prev);
    Ok(x0.axpby(a_prev.sqrt(), eps_pred, (1.0 - a_prev).sqrt())?)
}

/// Flat background latent at timestep `t`: the cached encoding of the flat
/// image, noised with one `eps` that is reused for every timestep of a
/// generation.
pub fn flat_latent(
    flat_code: &Latent,
    t: usize,
    eps: &Latent,
    schedule: &Schedule,
) -> Result<Latent, DiffusionError> {
    forward_noise(flat_code, t, eps, schedule)
}

/// Starting latent: pure noise inside the mask, the noised flat background
/// outside it.
pub fn compose_starting_latent(
    x_flat: &Latent,
    mask: &BinaryMask,
    eps: &Latent,
) -> Result<Latent, DiffusionError> {
    Ok(Latent::select(mask, eps, x_flat)?)
}

/// Keeps the denoised latent inside the mask and resets everything else to
/// the flat background trajectory.
pub fn blend_background(
    x_t: &Latent,
    x_flat_t: &Latent,
    mask: &BinaryMask,
) -> Result<Latent, DiffusionError> {
    Ok(Latent::select(mask, x_t, x_flat_t)?)
}

/// Strictly decreasing timesteps, `steps[0] == t_start`, last `>= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn t_start(&self) -> usize {
        self.steps[0]
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(t, t_prev)` pairs; the final pair lands on 0.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
    }

    /// Uniform grid of `nominal` steps over `1..=T`, truncated to the steps at
    /// or below `t_start`. `t_start` is prepended if it is not on the grid.
    pub fn from_nominal(
        nominal: usize,
        train_steps: usize,
        t_start: usize,
    ) -> Result<Self, DiffusionError> {
        if nominal == 0 || train_steps == 0 {
            return Err(DiffusionError::InvalidRange(
                "step counts must be >= 1".into(),
            ));
        }
        if t_start == 0 || t_start > train_steps {
            return Err(DiffusionError::InvalidRange(format!(
                "t_start must be in 1..={train_steps}, got {t_start}"
            )));
        }
        let mut steps: Vec<usize> = vec![t_start];
        for k in 0..nominal {
            // round(T·(nominal − k)/nominal)
            let t = (train_steps * (nominal - k) * 2 + nominal) / (2 * nominal);
            if t >= 1 && t < *steps.last().unwrap() {
                steps.push(t);
            }
        }
        Ok(Self { steps })
    }
}

/// Plan with `num_steps` effective steps when starting at `t_start`: the
/// nominal full-range count is `round(num_steps·T/t_start)`, so starting at
/// T′ = 800 of T = 1000 with 40 steps keeps the 40 lowest of 50.
pub fn plan_timesteps(
    num_steps: usize,
    train_steps: usize,
    t_start: usize,
) -> Result<TimestepPlan, DiffusionError> {
    if num_steps == 0 {
        return Err(DiffusionError::InvalidRange("num_steps must be >= 1".into()));
    }
    if t_start == 0 || t_start > train_steps {
        return Err(DiffusionError::InvalidRange(format!(
            "t_start must be in 1..={train_steps}, got {t_start}"
        )));
    }
    let nominal = (2 * num_steps * train_steps + t_start) / (2 * t_start);
    TimestepPlan::from_nominal(nominal.max(1), train_steps, t_start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_latent(seed: u64) -> Latent {
        Latent::randn(4, 5, 6, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_schedule_ends_near_zero() {
        let s = Schedule::default();
        // running product computed independently in log space
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (0.00085 + (0.012 - 0.00085) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000) - log_sum.exp()).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_noise_limits() {
        let s = Schedule::default();
        let x0 = rand_latent(1);
        let zero = Latent::zeros(4, 5, 6);
        let a = s.alpha_bar(300);
        let out = forward_noise(&x0, 300, &zero, &s).unwrap();
        assert!(out.max_abs_diff(&x0.axpby(a.sqrt(), &zero, 0.0).unwrap()) == 0.0);
        let eps = rand_latent(2);
        let out = forward_noise(&zero, 300, &eps, &s).unwrap();
        assert!(out.max_abs_diff(&eps.axpby((1.0 - a).sqrt(), &zero, 0.0).unwrap()) < 1e-15);
    }

    #[test]
    fn forward_noise_shape_mismatch() {
        let s = Schedule::default();
        let err = forward_noise(&Latent::zeros(1, 2, 2), 5, &Latent::zeros(1, 2, 3), &s);
        assert!(matches!(err, Err(DiffusionError::Tensor(TensorError::ShapeMismatch { .. }))));
    }

    #[test]
    fn chained_single_steps_match_closed_form_coefficients() {
        // Iterating q(x_t | x_{t-1}) keeps x_t = m_t·x0 + noise with
        // m_t = ∏√(1−β_i) and variance v_t = (1−β_t)·v_{t−1} + β_t.
        let s = Schedule::default();
        let (mut mean, mut var) = (1.0f64, 0.0f64);
        for t in 1..=500 {
            let b = s.beta(t);
            mean *= (1.0 - b).sqrt();
            var = (1.0 - b) * var + b;
        }
        let a = s.alpha_bar(500);
        assert!((mean - a.sqrt()).abs() < 1e-12);
        assert!((var - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn predict_x0_inverts_forward_noise() {
        let s = Schedule::default();
        let x0 = rand_latent(3);
        let eps = rand_latent(4);
        for t in [1, 250, 800, 1000] {
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, &eps, t, &s).unwrap();
            assert!(back.max_abs_diff(&x0) < 1e-12 * (1.0 / s.alpha_bar(t).sqrt()) * 10.0);
        }
    }

    #[test]
    fn predict_x0_of_pure_noise_is_zero() {
        let s = Schedule::default();
        let eps = rand_latent(5);
        let a = s.alpha_bar(600);
        let xt = eps.axpby((1.0 - a).sqrt(), &eps, 0.0).unwrap();
        assert!(predict_x0(&xt, &eps, 600, &s).unwrap().norm() < 1e-12);
    }

    #[test]
    fn ddim_to_zero_returns_prediction() {
        let s = Schedule::default();
        let xt = rand_latent(6);
        let e = rand_latent(7);
        assert_eq!(
            ddim_step(&xt, &e, 20, 0, &s).unwrap(),
            predict_x0(&xt, &e, 20, &s).unwrap()
        );
    }

    #[test]
    fn ddim_rejects_bad_order() {
        let s = Schedule::default();
        let x = rand_latent(8);
        assert_eq!(
            ddim_step(&x, &x, 10, 10, &s),
            Err(DiffusionError::InvalidTimesteps { t: 10, t_prev: 10 })
        );
        assert!(ddim_step(&x, &x, 1001, 10, &s).is_err());
    }

    #[test]
    fn ddim_with_true_eps_stays_on_forward_path() {
        let s = Schedule::default();
        let x0 = rand_latent(9);
        let eps = rand_latent(10);
        let xt = forward_noise(&x0, 700, &eps, &s).unwrap();
        let next = ddim_step(&xt, &eps, 700, 640, &s).unwrap();
        let expected = forward_noise(&x0, 640, &eps, &s).unwrap();
        assert!(next.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn flat_latent_limits() {
        let s = Schedule::default();
        let flat = Latent::from_fn(4, 5, 6, |(c, _, _)| c as f64 - 1.5).unwrap();
        let eps = rand_latent(11);
        let low = flat_latent(&flat, 1, &eps, &s).unwrap();
        assert!(low.max_abs_diff(&flat) < 0.05 * 4.0);
        assert_eq!(flat_latent(&flat, 0, &eps, &s).unwrap(), flat);
    }

    #[test]
    fn starting_latent_selection() {
        let flat = rand_latent(12);
        let eps = rand_latent(13);
        let none = BinaryMask::zeros(5, 6).unwrap();
        let all = BinaryMask::ones(5, 6).unwrap();
        assert_eq!(compose_starting_latent(&flat, &none, &eps).unwrap(), flat);
        assert_eq!(compose_starting_latent(&flat, &all, &eps).unwrap(), eps);
        let half = BinaryMask::from_fn(5, 6, |(_, c)| c < 3).unwrap();
        let out = compose_starting_latent(&flat, &half, &eps).unwrap();
        for ((k, r, c), v) in out.as_array().indexed_iter() {
            let src = if c < 3 { &eps } else { &flat };
            assert_eq!(*v, src.as_array()[(k, r, c)]);
        }
        let wrong = BinaryMask::ones(5, 5).unwrap();
        assert!(compose_starting_latent(&flat, &wrong, &eps).is_err());
    }

    #[test]
    fn blend_limits_and_idempotence() {
        let x = rand_latent(14);
        let f = rand_latent(15);
        let all = BinaryMask::ones(5, 6).unwrap();
        let none = BinaryMask::zeros(5, 6).unwrap();
        assert_eq!(blend_background(&x, &f, &all).unwrap(), x);
        assert_eq!(blend_background(&x, &f, &none).unwrap(), f);
        let m = BinaryMask::from_fn(5, 6, |(r, c)| (r + c) % 3 == 0).unwrap();
        let once = blend_background(&x, &f, &m).unwrap();
        assert_eq!(blend_background(&once, &f, &m).unwrap(), once);
    }

    #[test]
    fn plan_full_range() {
        let p = TimestepPlan::from_nominal(50, 1000, 1000).unwrap();
        assert_eq!(p.len(), 50);
        assert_eq!(p.steps()[0], 1000);
        assert!(p.steps().windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(*p.steps().last().unwrap(), 20);
    }

    #[test]
    fn plan_skips_early_steps() {
        let p = TimestepPlan::from_nominal(50, 1000, 800).unwrap();
        assert_eq!(p.len(), 40);
        assert_eq!(p.t_start(), 800);
        let q = plan_timesteps(40, 1000, 800).unwrap();
        assert_eq!(p, q);
        let pairs: Vec<_> = q.pairs().collect();
        assert_eq!(pairs[0], (800, 780));
        assert_eq!(*pairs.last().unwrap(), (20, 0));
    }

    #[test]
    fn plan_off_grid_start_is_prepended() {
        let p = TimestepPlan::from_nominal(10, 100, 55).unwrap();
        assert_eq!(p.steps(), &[55, 50, 40, 30, 20, 10]);
    }

    #[test]
    fn plan_rejects_bad_ranges() {
        assert!(plan_timesteps(0, 1000, 800).is_err());
        assert!(plan_timesteps(10, 1000, 0).is_err());
        assert!(plan_timesteps(10, 1000, 1001).is_err());
    }

    #[test]
    fn plan_with_more_steps_than_timesteps_stays_strict() {
        let p = plan_timesteps(100, 10, 10).unwrap();
        assert!(p.steps().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*p.steps().last().unwrap(), 1);
    }
}
