//! Test-time training for combining independently trained adapters.
//!
//! Two single-concept adapters (one appearance, one motion) are cloned, and
//! the clones are optimized jointly: each step rolls a *frozen* single-concept
//! teacher a few DDIM steps to produce a reference latent, renoises it one
//! grid step, and regresses the combined model's noise prediction onto the
//! injected noise. Appearance and motion branches alternate. The temporal
//! branch compares noise through a per-frame debiasing map anchored at one
//! frame, which cancels the shared component across frames.

use ndarray::{Array4, Axis};

use crate::data::{embed_prompt, Prompt};
use crate::error::{Error, Result};
use crate::lora::{AdapterKind, LoraAdapter};
use crate::model::{Denoiser, ForwardOpts, GradScope, Grads, PromptRouting};
use crate::real::Real;
use crate::rng::{derive_rng, derive_seed, normal_array};
use crate::scheduler::{ddim_sample, ddim_timesteps, q_sample, NoiseSchedule};
use crate::train::{step_adapter, mse_loss, OptKind, OptimizerState, TrainConfig};
use rand::Rng;

/// How a reference latent is pushed back up the noise ladder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RenoiseMode {
    /// One DDIM grid step noisier than where the reference stopped.
    #[default]
    NextGridStep,
    /// A uniformly drawn schedule index strictly noisier than the reference.
    RandomHigher,
}

/// Knobs for the combination run.
#[derive(Clone, Debug)]
pub struct TttConfig {
    /// DDIM steps used to make each reference latent.
    pub f: usize,
    /// Optimization steps over the adapter copies.
    pub ttt_steps: usize,
    pub lr: f64,
    /// Debias strength in the temporal branch.
    pub beta_debias: f64,
    /// Frame whose noise is subtracted from every frame's noise.
    pub anchor_index: usize,
    /// Grid size for reference-latent sampling.
    pub sampling_steps: usize,
    pub cfg_scale: f64,
    pub renoise: RenoiseMode,
    pub appearance_prompt_pool: Vec<Prompt>,
    pub motion_prompt_pool: Vec<Prompt>,
    pub seed: u64,
}

impl TttConfig {
    /// Desk-scale defaults. The learning rate is 1e-4; production-scale video
    /// models use ~1e-6, which remains selectable through the field.
    pub fn desk(
        appearance_prompt_pool: Vec<Prompt>,
        motion_prompt_pool: Vec<Prompt>,
        seed: u64,
    ) -> Self {
        Self {
            f: 5,
            ttt_steps: 30,
            lr: 1e-4,
            beta_debias: 1.0,
            anchor_index: 0,
            sampling_steps: 25,
            cfg_scale: 9.0,
            renoise: RenoiseMode::default(),
            appearance_prompt_pool,
            motion_prompt_pool,
            seed,
        }
    }

    /// `frames` is the model's frame count (bounds the anchor index).
    /// `ttt_steps = 0` is allowed as a diagnostic no-op.
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.f == 0 || self.f >= self.sampling_steps {
            return Err(Error::config(format!(
                "reference steps f must satisfy 0 < f < sampling_steps ({}), got {}",
                self.sampling_steps, self.f
            )));
        }
        if self.anchor_index >= frames {
            return Err(Error::config(format!(
                "anchor frame {} out of range for {frames} frames",
                self.anchor_index
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !self.beta_debias.is_finite() {
            return Err(Error::config("beta_debias must be finite"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::config("cfg_scale must be finite"));
        }
        if self.appearance_prompt_pool.is_empty() || self.motion_prompt_pool.is_empty() {
            return Err(Error::config("prompt pools must be nonempty"));
        }
        Ok(())
    }
}

/// A partly denoised latent from a frozen single-concept model, plus where on
/// the noise ladder it sits.
#[derive(Clone, Debug)]
pub struct ReferenceLatent<A: Real> {
    pub z: Array4<A>,
    /// Schedule index the latent sits at (-1 when fully denoised).
    pub schedule_index: i64,
    /// The grid entry one DDIM step noisier, absent at the top of the grid.
    pub noisier_index: Option<usize>,
    pub source_kind: AdapterKind,
    pub prompt: Prompt,
}

/// Rolls `base` + one frozen adapter for `f` DDIM steps (CFG at
/// `cfg.cfg_scale` over a `cfg.sampling_steps` grid) from a seeded Gaussian.
/// `f = 0` returns the untouched Gaussian at the noisiest index.
pub fn make_reference_latent<A: Real>(
    base: &Denoiser<A>,
    adapter: &LoraAdapter<A>,
    prompt: &Prompt,
    f: usize,
    cfg: &TttConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<ReferenceLatent<A>> {
    let routing = PromptRouting::uniform(&embed_prompt(prompt, base.config.embed_dim));
    let (z, trajectory) = ddim_sample(
        base,
        &routing,
        &[adapter],
        cfg.sampling_steps,
        cfg.cfg_scale,
        seed,
        sched,
        Some(f),
    )?;
    Ok(ReferenceLatent {
        z,
        schedule_index: trajectory.current_index(),
        noisier_index: (f > 0).then(|| trajectory.timesteps[f - 1] as usize),
        source_kind: adapter.kind,
        prompt: prompt.clone(),
    })
}

/// Treats the reference as pseudo-clean and noises it to a strictly noisier
/// schedule index `t*`: `z' = sqrt(abar_t*) z + sqrt(1 - abar_t*) eps`.
/// Returns `(z', eps, t*)`; `eps` is the regression target downstream.
pub fn renoise<A: Real>(
    reference: &ReferenceLatent<A>,
    sched: &NoiseSchedule,
    mode: RenoiseMode,
    seed: u64,
) -> Result<(Array4<A>, Array4<A>, usize)> {
    let t_star = match mode {
        RenoiseMode::NextGridStep => reference.noisier_index.ok_or_else(|| {
            Error::config("reference latent is already at the noisiest grid index")
        })?,
        RenoiseMode::RandomHigher => {
            let top = sched.t_count() as i64 - 1;
            if reference.schedule_index >= top {
                return Err(Error::config(
                    "reference latent is already at the noisiest schedule index",
                ));
            }
            let lo = reference.schedule_index + 1;
            derive_rng(seed, &["renoise", "t"]).random_range(lo..=top) as usize
        }
    };
    let mut rng = derive_rng(seed, &["renoise", "eps"]);
    let eps: Array4<A> = normal_array(&mut rng, reference.z.raw_dim());
    let z_noised = renoise_to(reference, sched, t_star, &eps)?;
    Ok((z_noised, eps, t_star))
}

/// The deterministic core of [`renoise`], with the noise supplied by the
/// caller (tests inject zeros to isolate the scaling).
pub(crate) fn renoise_to<A: Real>(
    reference: &ReferenceLatent<A>,
    sched: &NoiseSchedule,
    t_star: usize,
    eps: &Array4<A>,
) -> Result<Array4<A>> {
    q_sample(&reference.z, t_star, eps, sched)
}

/// Per-frame debias map: `out_i = sqrt(beta^2 + 1) eps_i - beta eps_anchor`
/// for every frame, the anchor included.
pub fn phi_debias<A: Real>(eps: &Array4<A>, anchor_index: usize, beta: f64) -> Result<Array4<A>> {
    let frames = eps.shape()[0];
    if anchor_index >= frames {
        return Err(Error::shape(format!(
            "anchor frame {anchor_index} out of range for {frames} frames"
        )));
    }
    let k = A::real((beta * beta + 1.0).sqrt());
    let b = A::real(beta);
    let anchor = eps.index_axis(Axis(0), anchor_index).to_owned();
    let mut out = eps.mapv(|v| v * k);
    for mut frame in out.axis_iter_mut(Axis(0)) {
        frame.zip_mut_with(&anchor, |o, &a| *o = *o - b * a);
    }
    Ok(out)
}

/// Adjoint of [`phi_debias`] as a linear map in `eps`: pulls loss gradients
/// back through the debiasing. Every frame's gradient is scaled by
/// `sqrt(beta^2 + 1)`; the anchor additionally collects `-beta` times the
/// frame-sum of the incoming gradient.
fn phi_debias_adjoint<A: Real>(dout: &Array4<A>, anchor_index: usize, beta: f64) -> Array4<A> {
    let k = A::real((beta * beta + 1.0).sqrt());
    let b = A::real(beta);
    let total = dout.sum_axis(Axis(0));
    let mut d = dout.mapv(|v| v * k);
    d.index_axis_mut(Axis(0), anchor_index)
        .zip_mut_with(&total, |o, &s| *o = *o - b * s);
    d
}

fn prediction_loss<A: Real>(
    base: &Denoiser<A>,
    adapters: &[&LoraAdapter<A>],
    z_noised: &Array4<A>,
    eps_used: &Array4<A>,
    t_star: usize,
    routing: &PromptRouting<A>,
    debias: Option<(usize, f64)>,
) -> Result<(f64, Grads<A>)> {
    if adapters.iter().map(|a| a.entries.len()).sum::<usize>() == 0 {
        return Err(Error::config("empty trainable set: adapters have no entries"));
    }
    let opts = ForwardOpts::default();
    let (pred, cache) = base.forward_cached(z_noised, t_star, routing, adapters, &opts)?;
    let (loss, d_eps) = match debias {
        None => mse_loss(&pred, eps_used)?,
        Some((anchor, beta)) => {
            let phi_pred = phi_debias(&pred, anchor, beta)?;
            let phi_target = phi_debias(eps_used, anchor, beta)?;
            let (loss, d_phi) = mse_loss(&phi_pred, &phi_target)?;
            (loss, phi_debias_adjoint(&d_phi, anchor, beta))
        }
    };
    let grads = base.backward(&cache, &d_eps, adapters, GradScope::Adapters)?;
    Ok((loss, grads))
}

/// Squared error between the combined model's conditional noise prediction at
/// `t_star` and the injected noise. Gradients cover only the attached adapter
/// copies (`adapter{slot}.*`); base weights stay frozen by construction.
pub fn appearance_preservation_loss<A: Real>(
    base: &Denoiser<A>,
    adapters: &[&LoraAdapter<A>],
    z_noised: &Array4<A>,
    eps_used: &Array4<A>,
    t_star: usize,
    routing: &PromptRouting<A>,
) -> Result<(f64, Grads<A>)> {
    prediction_loss(base, adapters, z_noised, eps_used, t_star, routing, None)
}

/// Like [`appearance_preservation_loss`], but both prediction and target pass
/// through [`phi_debias`] first, suppressing noise shared with the anchor
/// frame so the penalty concentrates on frame-to-frame structure.
pub fn temporal_preservation_loss<A: Real>(
    base: &Denoiser<A>,
    adapters: &[&LoraAdapter<A>],
    z_noised: &Array4<A>,
    eps_used: &Array4<A>,
    t_star: usize,
    routing: &PromptRouting<A>,
    anchor_index: usize,
    beta: f64,
) -> Result<(f64, Grads<A>)> {
    prediction_loss(
        base,
        adapters,
        z_noised,
        eps_used,
        t_star,
        routing,
        Some((anchor_index, beta)),
    )
}

/// Which branch a combination step optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TttLossKind {
    Appearance,
    Temporal,
}

impl TttLossKind {
    pub fn name(self) -> &'static str {
        match self {
            TttLossKind::Appearance => "appearance",
            TttLossKind::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TttStep {
    pub index: usize,
    pub kind: TttLossKind,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TttReport {
    pub steps: Vec<TttStep>,
}

/// Jointly adapts copies of both adapters so they cooperate in one model.
///
/// Odd-numbered human steps (k = 0, 2, ... zero-based) draw an appearance
/// prompt, roll the *frozen original* appearance adapter to a reference
/// latent, renoise it, and take one optimizer step on the appearance loss;
/// even steps do the same with the motion teacher and the temporal loss. Both
/// copies receive gradients on every step. Inputs are never mutated.
pub fn run_ttt<A: Real>(
    base: &Denoiser<A>,
    appearance: &LoraAdapter<A>,
    motion: &LoraAdapter<A>,
    cfg: &TttConfig,
    sched: &NoiseSchedule,
) -> Result<(LoraAdapter<A>, LoraAdapter<A>, TttReport)> {
    cfg.validate(base.config.frames)?;
    if appearance.kind != AdapterKind::Appearance {
        return Err(Error::config(format!(
            "appearance slot holds a {} adapter",
            appearance.kind.name()
        )));
    }
    if motion.kind != AdapterKind::Motion {
        return Err(Error::config(format!(
            "motion slot holds a {} adapter",
            motion.kind.name()
        )));
    }
    // Surface an invalid grid before any work happens.
    ddim_timesteps(sched.t_count(), cfg.sampling_steps)?;

    let mut appearance_copy = appearance.clone();
    let mut motion_copy = motion.clone();
    let mut state = OptimizerState::new();
    let opt_cfg = TrainConfig {
        steps: cfg.ttt_steps.max(1),
        lr: cfg.lr,
        batch: 1,
        optimizer: OptKind::Lion,
        cond_drop_prob: 0.0,
        seed: cfg.seed,
        ..TrainConfig::pretrain(cfg.seed)
    };
    let mut report = TttReport::default();

    for k in 0..cfg.ttt_steps {
        let ks = k.to_string();
        let (pool, teacher, kind) = if k % 2 == 0 {
            (&cfg.appearance_prompt_pool, appearance, TttLossKind::Appearance)
        } else {
            (&cfg.motion_prompt_pool, motion, TttLossKind::Temporal)
        };
        let pick = derive_rng(cfg.seed, &["ttt", &ks, "prompt"]).random_range(0..pool.len());
        let prompt = &pool[pick];

        let reference = make_reference_latent(
            base,
            teacher,
            prompt,
            cfg.f,
            cfg,
            sched,
            derive_seed(cfg.seed, &["ttt", &ks, "ref"]),
        )?;
        let (z_noised, eps_used, t_star) = renoise(
            &reference,
            sched,
            cfg.renoise,
            derive_seed(cfg.seed, &["ttt", &ks, "renoise"]),
        )?;

        let routing = PromptRouting::uniform(&embed_prompt(prompt, base.config.embed_dim));
        let attached = [&appearance_copy, &motion_copy];
        let (loss, grads) = match kind {
            TttLossKind::Appearance => appearance_preservation_loss(
                base, &attached, &z_noised, &eps_used, t_star, &routing,
            )?,
            TttLossKind::Temporal => temporal_preservation_loss(
                base,
                &attached,
                &z_noised,
                &eps_used,
                t_star,
                &routing,
                cfg.anchor_index,
                cfg.beta_debias,
            )?,
        };
        report.steps.push(TttStep { index: k, kind, loss });

        step_adapter(&mut appearance_copy, 0, &grads, &mut state, &opt_cfg)?;
        step_adapter(&mut motion_copy, 1, &grads, &mut state, &opt_cfg)?;
    }

    Ok((appearance_copy, motion_copy, report))
}
