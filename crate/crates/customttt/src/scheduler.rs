//! Diffusion-time mathematics: schedule tables, the forward noising kernel,
//! deterministic DDIM reverse steps, and classifier-free guidance.
//!
//! Schedule tables are always kept in f64; per-element tensor math runs in
//! the caller's element type. The DDIM grid uses a virtual final index of -1
//! whose cumulative alpha is defined as 1 (a step to it returns the clean
//! estimate).

use ndarray::{Array, Array1, Array4, Dimension};

use crate::data::{embed_prompt, Prompt};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{Denoiser, ForwardOpts, PromptRouting};
use crate::real::Real;
use crate::rng::{derive_rng, normal_array};

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Array1<f64>,
    pub alphas: Array1<f64>,
    pub alphas_cumprod: Array1<f64>,
}

impl Default for NoiseSchedule {
    /// The stock schedule: linear betas, T=100, 1e-4 to 0.05.
    fn default() -> Self {
        Self::linear(100, 1e-4, 0.05).expect("stock schedule parameters are valid")
    }
}

impl NoiseSchedule {
    /// Linear beta schedule over `t_count` steps.
    pub fn linear(t_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::config(format!("schedule needs T >= 2, got {t_count}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let n = t_count as f64;
        let betas = Array1::from_shape_fn(t_count, |t| {
            beta_start + (beta_end - beta_start) * t as f64 / (n - 1.0)
        });
        let alphas = betas.mapv(|b| 1.0 - b);
        let mut acc = 1.0;
        let alphas_cumprod = alphas.mapv(|a| {
            acc *= a;
            acc
        });
        Ok(Self {
            betas,
            alphas,
            alphas_cumprod,
        })
    }

    pub fn t_count(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative alpha with the virtual final index: `alpha_bar(-1) = 1`.
    pub fn alpha_bar(&self, t: i64) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alphas_cumprod[t as usize]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_count() {
            return Err(Error::config(format!(
                "timestep {t} out of range (T = {})",
                self.t_count()
            )));
        }
        Ok(())
    }
}

fn check_same_shape<A, D>(a: &Array<A, D>, b: &Array<A, D>, what: &str) -> Result<()>
where
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Forward noising: `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<A, D>(
    z0: &Array<A, D>,
    t: usize,
    eps: &Array<A, D>,
    sched: &NoiseSchedule,
) -> Result<Array<A, D>>
where
    A: Real,
    D: Dimension,
{
    sched.check_t(t)?;
    check_same_shape(z0, eps, "q_sample")?;
    let abar = sched.alpha_bar(t as i64);
    let c0 = A::real(abar.sqrt());
    let c1 = A::real((1.0 - abar).sqrt());
    Ok(z0 * c0 + eps * c1)
}

/// Deterministic DDIM update from index `t` to `t_prev` (eta = 0).
///
/// Recovers the clean estimate from the model's noise prediction and
/// re-noises it at the earlier index:
/// `zhat0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`,
/// `z_prev = sqrt(abar_prev) zhat0 + sqrt(1 - abar_prev) eps`.
/// `t_prev = -1` is the virtual final index and returns `zhat0`.
pub fn ddim_step<A, D>(
    z_t: &Array<A, D>,
    eps_pred: &Array<A, D>,
    t: usize,
    t_prev: i64,
    sched: &NoiseSchedule,
) -> Result<Array<A, D>>
where
    A: Real,
    D: Dimension,
{
    sched.check_t(t)?;
    check_same_shape(z_t, eps_pred, "ddim_step")?;
    if t_prev >= t as i64 {
        return Err(Error::config(format!(
            "ddim_step requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let abar_t = sched.alpha_bar(t as i64);
    let abar_prev = sched.alpha_bar(t_prev);
    let inv_sqrt = 1.0 / abar_t.sqrt();
    // Fused coefficients of z_t and eps_pred; one pass, no zhat0 temporary.
    let cz = A::real(abar_prev.sqrt() * inv_sqrt);
    let ce = A::real((1.0 - abar_prev).sqrt() - abar_prev.sqrt() * inv_sqrt * (1.0 - abar_t).sqrt());
    Ok(z_t * cz + eps_pred * ce)
}

/// Classifier-free guidance: `eps_u + scale (eps_c - eps_u)`.
pub fn cfg_combine<A, D>(
    eps_uncond: &Array<A, D>,
    eps_cond: &Array<A, D>,
    scale: f64,
) -> Result<Array<A, D>>
where
    A: Real,
    D: Dimension,
{
    check_same_shape(eps_uncond, eps_cond, "cfg_combine")?;
    let s = A::real(scale);
    Ok(eps_uncond + &((eps_cond - eps_uncond) * s))
}

/// Evenly spaced descending DDIM grid: `steps + 1` entries, starting at
/// `T - 1` and ending at the virtual final index `-1`. Entry `j` is
/// `floor((T - 1)(S - j) / S)`; strictly decreasing for `1 <= steps <= T`.
pub fn ddim_timesteps(t_count: usize, steps: usize) -> Result<Vec<i64>> {
    if steps < 1 || steps > t_count {
        return Err(Error::config(format!(
            "sampling steps must be in 1..={t_count}, got {steps}"
        )));
    }
    let k = (t_count - 1) as i64;
    let s = steps as i64;
    let mut grid: Vec<i64> = (0..s).map(|j| k * (s - j) / s).collect();
    grid.push(-1);
    debug_assert!(grid.windows(2).all(|w| w[0] > w[1]));
    Ok(grid)
}

/// Visited schedule indices of one sampling run, plus optionally the latent
/// recorded at each index (index 0 holds the initial Gaussian latent).
#[derive(Clone, Debug)]
pub struct DdimTrajectory<A: Real> {
    pub timesteps: Vec<i64>,
    pub latents: Option<Vec<ndarray::Array4<A>>>,
}

impl<A: Real> DdimTrajectory<A> {
    /// Schedule index the returned latent sits at (-1 once fully denoised).
    pub fn current_index(&self) -> i64 {
        *self.timesteps.last().expect("trajectory is never empty")
    }
}

/// Deterministic DDIM rollout from a seeded Gaussian latent.
///
/// Runs `steps` evenly spaced reverse steps, or only the first `stop_after`
/// of them when given (0 returns the initial latent untouched). Guidance
/// with `cfg_scale != 1` evaluates a second, unconditional branch routed
/// with the null prompt. The trajectory records every visited schedule index
/// and the latent sitting at it.
pub fn ddim_sample<A: Real>(
    model: &Denoiser<A>,
    routing: &PromptRouting<A>,
    adapters: &[&LoraAdapter<A>],
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    sched: &NoiseSchedule,
    stop_after: Option<usize>,
) -> Result<(Array4<A>, DdimTrajectory<A>)> {
    let grid = ddim_timesteps(sched.t_count(), steps)?;
    let stop = stop_after.unwrap_or(steps);
    if stop > steps {
        return Err(Error::config(format!(
            "stop_after {stop} exceeds sampling steps {steps}"
        )));
    }
    let cfg = &model.config;
    routing.validate(cfg)?;
    let uncond = (cfg_scale != 1.0)
        .then(|| PromptRouting::uniform(&embed_prompt::<A>(&Prompt::null(), cfg.embed_dim)));

    let mut rng = derive_rng(seed, &["sample", "init"]);
    let mut z: Array4<A> = normal_array(&mut rng, (cfg.frames, cfg.channels, cfg.height, cfg.width));
    let opts = ForwardOpts::default();

    let mut visited = Vec::with_capacity(stop + 1);
    let mut latents = Vec::with_capacity(stop + 1);
    visited.push(grid[0]);
    latents.push(z.clone());
    for j in 0..stop {
        let t = grid[j] as usize;
        let eps_cond = model.forward(&z, t, routing, adapters, &opts)?;
        let eps = match &uncond {
            Some(null_routing) => {
                let eps_uncond = model.forward(&z, t, null_routing, adapters, &opts)?;
                cfg_combine(&eps_uncond, &eps_cond, cfg_scale)?
            }
            None => eps_cond,
        };
        z = ddim_step(&z, &eps, t, grid[j + 1], sched)?;
        visited.push(grid[j + 1]);
        latents.push(z.clone());
    }
    let trajectory = DdimTrajectory {
        timesteps: visited,
        latents: Some(latents),
    };
    Ok((z, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, normal_array};
    use ndarray::{Array1, Array3};

    #[test]
    fn constant_beta_products() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert!((s.alphas_cumprod[0] - 0.5).abs() < 1e-15);
        assert!((s.alphas_cumprod[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cumprod_matches_loop_product() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for &b in s.betas.iter() {
            prod *= 1.0 - b;
        }
        assert!((s.alphas_cumprod[99] - prod).abs() < 1e-12);
    }

    #[test]
    fn abar_strictly_decreasing_in_unit_interval() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for t in 0..100 {
            let a = s.alphas_cumprod[t];
            assert!(a > 0.0 && a < 1.0);
            if t > 0 {
                assert!(a < s.alphas_cumprod[t - 1]);
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_args() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_boundary_cases() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
        let mut rng = derive_rng(1, &["q"]);
        let z0: Array3<f64> = normal_array(&mut rng, (2, 3, 3));
        let zeros = Array3::<f64>::zeros((2, 3, 3));
        let t = 17;

        let no_noise = q_sample(&z0, t, &zeros, &s).unwrap();
        let c0 = s.alpha_bar(t as i64).sqrt();
        for (a, b) in no_noise.iter().zip(z0.iter()) {
            assert_eq!(*a, c0 * *b);
        }

        let eps: Array3<f64> = normal_array(&mut rng, (2, 3, 3));
        let no_signal = q_sample(&zeros, t, &eps, &s).unwrap();
        let c1 = (1.0 - s.alpha_bar(t as i64)).sqrt();
        for (a, b) in no_signal.iter().zip(eps.iter()) {
            assert_eq!(*a, c1 * *b);
        }
    }

    #[test]
    fn q_sample_matches_scalar_formula() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
        let mut rng = derive_rng(2, &["q"]);
        let z0: Array3<f64> = normal_array(&mut rng, (2, 4, 4));
        let eps: Array3<f64> = normal_array(&mut rng, (2, 4, 4));
        let t = 49;
        let out = q_sample(&z0, t, &eps, &s).unwrap();
        let abar = s.alphas_cumprod[t];
        for ((o, z), e) in out.iter().zip(z0.iter()).zip(eps.iter()) {
            let want = abar.sqrt() * z + (1.0 - abar).sqrt() * e;
            assert!((o - want).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_rejects_bad_inputs() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.05).unwrap();
        let a = Array3::<f64>::zeros((1, 2, 2));
        let b = Array3::<f64>::zeros((1, 2, 3));
        assert!(q_sample(&a, 3, &b, &s).is_err());
        assert!(q_sample(&a, 10, &a, &s).is_err());
    }

    #[test]
    fn ddim_inverts_oracle_noise() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
        let mut rng = derive_rng(3, &["inv"]);
        for t in [0usize, 7, 42, 99] {
            let z0: Array3<f64> = normal_array(&mut rng, (2, 4, 4));
            let eps: Array3<f64> = normal_array(&mut rng, (2, 4, 4));
            let z_t = q_sample(&z0, t, &eps, &s).unwrap();
            let rec = ddim_step(&z_t, &eps, t, -1, &s).unwrap();
            for (r, z) in rec.iter().zip(z0.iter()) {
                assert!((r - z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ddim_zero_eps_is_a_rescale() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
        let mut rng = derive_rng(4, &["re"]);
        let z_t: Array3<f64> = normal_array(&mut rng, (1, 3, 3));
        let zeros = Array3::<f64>::zeros((1, 3, 3));
        let (t, t_prev) = (60usize, 20i64);
        let out = ddim_step(&z_t, &zeros, t, t_prev, &s).unwrap();
        let c = (s.alpha_bar(t_prev) / s.alpha_bar(t as i64)).sqrt();
        for (o, z) in out.iter().zip(z_t.iter()) {
            assert!((o - c * z).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_matches_two_term_formula() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
        let mut rng = derive_rng(5, &["f"]);
        let z_t: Array3<f64> = normal_array(&mut rng, (2, 3, 3));
        let eps: Array3<f64> = normal_array(&mut rng, (2, 3, 3));
        let (t, t_prev) = (80usize, 33i64);
        let out = ddim_step(&z_t, &eps, t, t_prev, &s).unwrap();
        let (at, ap) = (s.alpha_bar(t as i64), s.alpha_bar(t_prev));
        for ((o, z), e) in out.iter().zip(z_t.iter()).zip(eps.iter()) {
            let zhat0 = (z - (1.0 - at).sqrt() * e) / at.sqrt();
            let want = ap.sqrt() * zhat0 + (1.0 - ap).sqrt() * e;
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing_step() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.05).unwrap();
        let z = Array3::<f64>::zeros((1, 2, 2));
        assert!(ddim_step(&z, &z, 3, 3, &s).is_err());
        assert!(ddim_step(&z, &z, 3, 7, &s).is_err());
    }

    #[test]
    fn cfg_boundary_scales() {
        let mut rng = derive_rng(6, &["cfg"]);
        let u: Array3<f64> = normal_array(&mut rng, (1, 2, 2));
        let c: Array3<f64> = normal_array(&mut rng, (1, 2, 2));
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
    }

    #[test]
    fn cfg_hand_value() {
        let u = Array1::from_elem(5, 0.1f64);
        let c = Array1::from_elem(5, 0.2f64);
        let out = cfg_combine(&u, &c, 9.0).unwrap();
        for v in out.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_grid_shape_and_order() {
        for (t_count, steps) in [(100, 25), (100, 100), (10, 10), (50, 1), (7, 3)] {
            let grid = ddim_timesteps(t_count, steps).unwrap();
            assert_eq!(grid.len(), steps + 1);
            assert_eq!(grid[0], t_count as i64 - 1);
            assert_eq!(*grid.last().unwrap(), -1);
            assert!(grid.windows(2).all(|w| w[0] > w[1]));
        }
        assert!(ddim_timesteps(100, 0).is_err());
        assert!(ddim_timesteps(100, 101).is_err());
    }

    #[test]
    fn q_sample_moments_match_theory() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
        let t = 70usize;
        let n = 10_000usize;
        let mut rng = derive_rng(7, &["mom"]);
        let z0 = Array1::from_elem(n, 0.7f64);
        let eps: Array1<f64> = normal_array(&mut rng, n);
        let out = q_sample(&z0, t, &eps, &s).unwrap();

        let abar = s.alphas_cumprod[t];
        let want_mean = abar.sqrt() * 0.7;
        let want_var = 1.0 - abar;
        let mean = out.sum() / n as f64;
        let var = out.mapv(|x| (x - mean).powi(2)).sum() / (n - 1) as f64;

        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean);
        assert!((var - want_var).abs() < 3.0 * se_var);
    }
}
