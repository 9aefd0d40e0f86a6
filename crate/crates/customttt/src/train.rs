//! Optimization engines: base-model pretraining, single-concept LoRA
//! training, and the LION update rule.
//!
//! Every run is bit-reproducible per seed: item picks, conditioning drops,
//! and per-item (t, eps) draws all come from tagged derivations of the run
//! seed, and batch gradients are accumulated in slot order.

use indexmap::IndexMap;
use ndarray::{Array4, ArrayD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::data::{embed_prompt, Corpus, Prompt};
use crate::error::{Error, Result};
use crate::lora::{init_adapter, AdapterKind, LoraAdapter, ModuleKind};
use crate::model::{Denoiser, ForwardOpts, GradScope, Grads, PromptRouting};
use crate::real::Real;
use crate::rng::{derive_rng, derive_seed, normal_array};
use crate::scheduler::{q_sample, NoiseSchedule};

/// Spatial LoRA learning rate.
pub const DEFAULT_SPATIAL_LR: f64 = 1e-5;
/// Temporal LoRA learning rate, 5x the spatial rate.
pub const DEFAULT_TEMPORAL_LR: f64 = 5e-5;
/// Base pretraining learning rate (LION sign updates move every weight by
/// exactly lr per step, so this doubles as the per-step weight step size).
pub const DEFAULT_PRETRAIN_LR: f64 = 1e-3;
/// Adapter rank used by the desk-scale pipeline.
pub const DEFAULT_LORA_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptKind {
    Lion,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptKind,
    pub lion_beta1: f64,
    pub lion_beta2: f64,
    pub weight_decay: f64,
    pub cond_drop_prob: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Base pretraining defaults: 3000 steps with conditioning dropout.
    pub fn pretrain(seed: u64) -> Self {
        Self {
            steps: 3000,
            lr: DEFAULT_PRETRAIN_LR,
            batch: 4,
            optimizer: OptKind::Lion,
            lion_beta1: 0.9,
            lion_beta2: 0.99,
            weight_decay: 0.0,
            cond_drop_prob: 0.1,
            seed,
        }
    }

    /// Appearance LoRA defaults: 500 steps, no conditioning dropout.
    pub fn appearance(seed: u64) -> Self {
        Self {
            steps: 500,
            lr: DEFAULT_SPATIAL_LR,
            cond_drop_prob: 0.0,
            ..Self::pretrain(seed)
        }
    }

    /// Motion LoRA defaults: like appearance but at the temporal rate.
    pub fn motion(seed: u64) -> Self {
        Self {
            lr: DEFAULT_TEMPORAL_LR,
            ..Self::appearance(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("training needs steps >= 1"));
        }
        if self.batch < 1 {
            return Err(Error::config("training needs batch >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("bad learning rate {}", self.lr)));
        }
        // 1.0 is legal: it trains a fully unconditional model.
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::config(format!(
                "cond_drop_prob must be in [0, 1], got {}",
                self.cond_drop_prob
            )));
        }
        for (name, b) in [("lion_beta1", self.lion_beta1), ("lion_beta2", self.lion_beta2)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1], got {b}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("bad weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Per-parameter momentum plus a step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<A: Real> {
    pub momentum: IndexMap<String, ArrayD<A>>,
    pub step: u64,
}

impl<A: Real> Default for OptimizerState<A> {
    fn default() -> Self {
        Self {
            momentum: IndexMap::new(),
            step: 0,
        }
    }
}

impl<A: Real> OptimizerState<A> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Loss curve and any non-fatal notes from a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean squared error over all elements plus its gradient w.r.t. `pred`.
pub(crate) fn mse_loss<A: Real>(pred: &Array4<A>, target: &Array4<A>) -> Result<(f64, Array4<A>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut d = pred - target;
    let loss = d.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / n;
    let scale = A::real(2.0 / n);
    d.mapv_inplace(|v| v * scale);
    Ok((loss, d))
}

/// Denoising reconstruction loss at one seeded (t, eps) draw.
///
/// Noises `z0` at a uniformly drawn timestep, runs the model, and returns
/// the per-element mean squared error between predicted and true noise with
/// gradients for the trainable set: adapter factors when `adapters` is
/// given, all base weights otherwise.
pub fn diffusion_loss<A: Real>(
    model: &Denoiser<A>,
    adapters: Option<&[&LoraAdapter<A>]>,
    z0: &Array4<A>,
    routing: &PromptRouting<A>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(f64, Grads<A>)> {
    let cfg = &model.config;
    let want = (cfg.frames, cfg.channels, cfg.height, cfg.width);
    if z0.dim() != want {
        return Err(Error::shape(format!(
            "clip shape {:?} does not match model {:?}",
            z0.dim(),
            want
        )));
    }
    let (scope, fwd_adapters) = match adapters {
        Some(list) => {
            let entries: usize = list.iter().map(|a| a.entries.len()).sum();
            if entries == 0 {
                return Err(Error::config("empty trainable set: adapters have no entries"));
            }
            (GradScope::Adapters, list)
        }
        None => (GradScope::AllBase, &[][..]),
    };

    let t = derive_rng(seed, &["t"]).random_range(0..sched.t_count());
    let eps: Array4<A> = normal_array(&mut derive_rng(seed, &["eps"]), z0.dim());
    let z_t = q_sample(z0, t, &eps, sched)?;
    let opts = ForwardOpts::default();
    let (pred, cache) = model.forward_cached(&z_t, t, routing, fwd_adapters, &opts)?;
    let (loss, d_pred) = mse_loss(&pred, &eps)?;
    let grads = model.backward(&cache, &d_pred, fwd_adapters, scope)?;
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

fn sign<A: Real>(v: A) -> A {
    if v > A::zero() {
        A::one()
    } else if v < A::zero() {
        -A::one()
    } else {
        A::zero()
    }
}

fn update_array<A: Real>(
    kind: OptKind,
    mut p: ArrayViewMutD<'_, A>,
    g: &ArrayD<A>,
    m: &mut ArrayD<A>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) {
    let lr = A::real(lr);
    let wd = A::real(weight_decay);
    match kind {
        OptKind::Lion => {
            let b1 = A::real(beta1);
            let b2 = A::real(beta2);
            let one = A::one();
            for ((p, &g), m) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                let c = b1 * *m + (one - b1) * g;
                *p = *p - lr * (sign(c) + wd * *p);
                *m = b2 * *m + (one - b2) * g;
            }
        }
        OptKind::Sgd => {
            for ((p, &g), _) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                *p = *p - lr * (g + wd * *p);
            }
        }
    }
}

/// One LION update over a named parameter set:
/// `c = b1 m + (1-b1) g; p -= lr (sign(c) + wd p); m = b2 m + (1-b2) g`,
/// with `sign(0) = 0`. Momentum entries are created on first use.
pub fn lion_step<A: Real>(
    params: &mut IndexMap<String, ArrayD<A>>,
    grads: &Grads<A>,
    state: &mut OptimizerState<A>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params.iter_mut() {
        let g = lookup_grad(grads, name, p.shape())?;
        let m = momentum_for(&mut state.momentum, name, p)?;
        update_array(OptKind::Lion, p.view_mut(), g, m, lr, beta1, beta2, weight_decay);
    }
    state.step += 1;
    Ok(())
}

fn lookup_grad<'g, A: Real>(grads: &'g Grads<A>, name: &str, shape: &[usize]) -> Result<&'g ArrayD<A>> {
    let g = grads
        .get(name)
        .ok_or_else(|| Error::config(format!("gradient missing for {name}")))?;
    if g.shape() != shape {
        return Err(Error::shape(format!(
            "gradient for {name}: {:?} vs parameter {:?}",
            g.shape(),
            shape
        )));
    }
    Ok(g)
}

fn momentum_for<'m, A: Real>(
    momentum: &'m mut IndexMap<String, ArrayD<A>>,
    name: &str,
    p: &ArrayD<A>,
) -> Result<&'m mut ArrayD<A>> {
    if !momentum.contains_key(name) {
        momentum.insert(name.to_string(), ArrayD::zeros(p.raw_dim()));
    }
    let m = momentum.get_mut(name).expect("just inserted");
    if m.shape() != p.shape() {
        return Err(Error::shape(format!(
            "momentum for {name}: {:?} vs parameter {:?}",
            m.shape(),
            p.shape()
        )));
    }
    Ok(m)
}

fn step_model<A: Real>(
    model: &mut Denoiser<A>,
    grads: &Grads<A>,
    state: &mut OptimizerState<A>,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut failure = None;
    model.for_each_param_mut(&mut |name, view| {
        if failure.is_some() {
            return;
        }
        let owned_shape: Vec<usize> = view.shape().to_vec();
        match lookup_grad(grads, name, &owned_shape) {
            Ok(g) => {
                // Momentum borrow is re-resolved per parameter; the closure
                // cannot hold it across calls.
                match momentum_for(&mut state.momentum, name, g) {
                    Ok(m) => update_array(
                        cfg.optimizer,
                        view,
                        g,
                        m,
                        cfg.lr,
                        cfg.lion_beta1,
                        cfg.lion_beta2,
                        cfg.weight_decay,
                    ),
                    Err(e) => failure = Some(e),
                }
            }
            Err(e) => failure = Some(e),
        }
    });
    state.step += 1;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Visits adapter factors under the gradient-key naming scheme
/// `adapter{slot}.{target}.a|b`.
pub(crate) fn visit_adapter_params_mut<A: Real>(
    adapter: &mut LoraAdapter<A>,
    slot: usize,
    f: &mut impl FnMut(String, ArrayViewMutD<'_, A>),
) {
    for entry in adapter.entries.iter_mut() {
        let target = entry.target.name();
        f(
            format!("adapter{slot}.{target}.a"),
            entry.a.view_mut().into_dyn(),
        );
        f(
            format!("adapter{slot}.{target}.b"),
            entry.b.view_mut().into_dyn(),
        );
    }
}

pub(crate) fn step_adapter<A: Real>(
    adapter: &mut LoraAdapter<A>,
    slot: usize,
    grads: &Grads<A>,
    state: &mut OptimizerState<A>,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut failure = None;
    visit_adapter_params_mut(adapter, slot, &mut |name, view| {
        if failure.is_some() {
            return;
        }
        let owned_shape: Vec<usize> = view.shape().to_vec();
        match lookup_grad(grads, &name, &owned_shape) {
            Ok(g) => match momentum_for(&mut state.momentum, &name, g) {
                Ok(m) => update_array(
                    cfg.optimizer,
                    view,
                    g,
                    m,
                    cfg.lr,
                    cfg.lion_beta1,
                    cfg.lion_beta2,
                    cfg.weight_decay,
                ),
                Err(e) => failure = Some(e),
            },
            Err(e) => failure = Some(e),
        }
    });
    state.step += 1;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

fn accumulate<A: Real>(acc: &mut Grads<A>, grads: Grads<A>, weight: f64) {
    let w = A::real(weight);
    for (name, mut g) in grads {
        g.mapv_inplace(|v| v * w);
        crate::model::add_grad(acc, name, g);
    }
}

/// Tracks the divergence guard: aborts once the loss has stayed above
/// 10x the initial loss for 50 consecutive steps.
struct DivergenceGuard {
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceGuard {
    const LIMIT: usize = 50;
    const FACTOR: f64 = 10.0;

    fn new() -> Self {
        Self {
            initial: None,
            consecutive: 0,
        }
    }

    fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > Self::FACTOR * initial || !loss.is_finite() {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        if self.consecutive >= Self::LIMIT {
            return Err(Error::Divergence(format!(
                "loss {loss:.6} above {}x initial {initial:.6} for {} consecutive steps (step {step})",
                Self::FACTOR,
                Self::LIMIT
            )));
        }
        Ok(())
    }
}

/// Trains every base weight on the corpus's (video, prompt) pairs,
/// dropping conditioning to the null prompt with `cond_drop_prob` so the
/// checkpoint supports classifier-free guidance. Returns the loss curve;
/// the model is updated in place.
pub fn pretrain_base<A: Real>(
    model: &mut Denoiser<A>,
    corpus: &Corpus<A>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.items.is_empty() {
        return Err(Error::data("pretraining corpus is empty"));
    }
    let d = model.config.embed_dim;
    let routings: Vec<PromptRouting<A>> = corpus
        .items
        .iter()
        .map(|it| PromptRouting::uniform(&embed_prompt(&it.prompt, d)))
        .collect();
    let null_routing = PromptRouting::uniform(&embed_prompt::<A>(&Prompt::null(), d));

    let mut state = OptimizerState::new();
    let mut guard = DivergenceGuard::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let st = step.to_string();
        let mut acc: Grads<A> = Grads::default();
        let mut loss_sum = 0.0;
        for slot in 0..cfg.batch {
            let sl = slot.to_string();
            let item = derive_rng(cfg.seed, &["train", &st, &sl, "pick"])
                .random_range(0..corpus.items.len());
            let dropped = cfg.cond_drop_prob > 0.0
                && derive_rng(cfg.seed, &["train", &st, &sl, "drop"]).random::<f64>()
                    < cfg.cond_drop_prob;
            let routing = if dropped { &null_routing } else { &routings[item] };
            let loss_seed = derive_seed(cfg.seed, &["train", &st, &sl, "loss"]);
            let (loss, grads) =
                diffusion_loss(model, None, &corpus.items[item].video, routing, sched, loss_seed)?;
            loss_sum += loss;
            accumulate(&mut acc, grads, 1.0 / cfg.batch as f64);
        }
        let step_loss = loss_sum / cfg.batch as f64;
        losses.push(step_loss);
        guard.observe(step, step_loss)?;
        step_model(model, &acc, &mut state, cfg)?;
    }
    Ok(TrainReport {
        losses,
        warnings: Vec::new(),
    })
}

fn boundary_check<A: Real>(model: &Denoiser<A>, clip: &Array4<A>, what: &str) -> Result<()> {
    let cfg = &model.config;
    let want = (cfg.frames, cfg.channels, cfg.height, cfg.width);
    if clip.dim() != want {
        return Err(Error::shape(format!(
            "{what} shape {:?} does not match model {:?}",
            clip.dim(),
            want
        )));
    }
    Ok(())
}

fn train_adapter_loop<A: Real>(
    base: &Denoiser<A>,
    mut adapter: LoraAdapter<A>,
    clips: &[Array4<A>],
    routing: &PromptRouting<A>,
    null_routing: &PromptRouting<A>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    warnings: Vec<String>,
) -> Result<(LoraAdapter<A>, TrainReport)> {
    let mut state = OptimizerState::new();
    let mut guard = DivergenceGuard::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let st = step.to_string();
        let mut acc: Grads<A> = Grads::default();
        let mut loss_sum = 0.0;
        for slot in 0..cfg.batch {
            let sl = slot.to_string();
            let item =
                derive_rng(cfg.seed, &["train", &st, &sl, "pick"]).random_range(0..clips.len());
            let dropped = cfg.cond_drop_prob > 0.0
                && derive_rng(cfg.seed, &["train", &st, &sl, "drop"]).random::<f64>()
                    < cfg.cond_drop_prob;
            let r = if dropped { null_routing } else { routing };
            let loss_seed = derive_seed(cfg.seed, &["train", &st, &sl, "loss"]);
            let (loss, grads) =
                diffusion_loss(base, Some(&[&adapter]), &clips[item], r, sched, loss_seed)?;
            loss_sum += loss;
            accumulate(&mut acc, grads, 1.0 / cfg.batch as f64);
        }
        let step_loss = loss_sum / cfg.batch as f64;
        losses.push(step_loss);
        guard.observe(step, step_loss)?;
        step_adapter(&mut adapter, 0, &acc, &mut state, cfg)?;
    }
    Ok((adapter, TrainReport { losses, warnings }))
}

/// Trains a spatial (appearance) adapter on reference images lifted to
/// static F-frame clips. The base model is read-only throughout.
pub fn train_appearance_lora<A: Real>(
    base: &Denoiser<A>,
    refs: &[Array4<A>],
    prompt: &Prompt,
    layers: &[usize],
    rank: usize,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(LoraAdapter<A>, TrainReport)> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::data("appearance training needs at least one reference image"));
    }
    let model_cfg = &base.config;
    let mut clips = Vec::with_capacity(refs.len());
    for (i, r) in refs.iter().enumerate() {
        let (f, c, h, w) = r.dim();
        if f != 1 || (c, h, w) != (model_cfg.channels, model_cfg.height, model_cfg.width) {
            return Err(Error::shape(format!(
                "reference image {i} has shape {:?}, want (1, {}, {}, {})",
                r.dim(),
                model_cfg.channels,
                model_cfg.height,
                model_cfg.width
            )));
        }
        // Static lift: the single frame repeated across the clip.
        let frame = r.index_axis(Axis(0), 0);
        let mut clip = Array4::<A>::zeros((
            model_cfg.frames,
            model_cfg.channels,
            model_cfg.height,
            model_cfg.width,
        ));
        for mut dst in clip.axis_iter_mut(Axis(0)) {
            dst.assign(&frame);
        }
        clips.push(clip);
    }

    let mut warnings = Vec::new();
    for &l in layers {
        if l < crate::model::LAYER_COUNT && !model_cfg.layer_specs[l].has_cross_attn {
            warnings.push(format!(
                "layer {l} has no cross-attention; adapter restricted to self-attention there"
            ));
        }
    }

    let mut adapter = init_adapter(
        base,
        layers,
        ModuleKind::Spatial,
        rank,
        derive_seed(cfg.seed, &["adapter", "init"]),
    )?;
    debug_assert_eq!(adapter.kind, AdapterKind::Appearance);
    if let Some(id) = prompt.appearance_token() {
        adapter.concept_id = format!("sks{id}");
    }

    let routing = PromptRouting::uniform(&embed_prompt(prompt, model_cfg.embed_dim));
    let null_routing = PromptRouting::uniform(&embed_prompt::<A>(&Prompt::null(), model_cfg.embed_dim));
    train_adapter_loop(base, adapter, &clips, &routing, &null_routing, sched, cfg, warnings)
}

/// Trains a temporal (motion) adapter on one reference video. The base
/// model is read-only throughout.
pub fn train_motion_lora<A: Real>(
    base: &Denoiser<A>,
    ref_video: &Array4<A>,
    prompt: &Prompt,
    layers: &[usize],
    rank: usize,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(LoraAdapter<A>, TrainReport)> {
    cfg.validate()?;
    boundary_check(base, ref_video, "reference video")?;

    let mut adapter = init_adapter(
        base,
        layers,
        ModuleKind::Temporal,
        rank,
        derive_seed(cfg.seed, &["adapter", "init"]),
    )?;
    debug_assert_eq!(adapter.kind, AdapterKind::Motion);
    if let Some(id) = prompt.motion_token() {
        adapter.concept_id = format!("mot{id}");
    }

    let model_cfg = &base.config;
    let routing = PromptRouting::uniform(&embed_prompt(prompt, model_cfg.embed_dim));
    let null_routing = PromptRouting::uniform(&embed_prompt::<A>(&Prompt::null(), model_cfg.embed_dim));
    let clips = std::slice::from_ref(ref_video);
    train_adapter_loop(
        base,
        adapter,
        clips,
        &routing,
        &null_routing,
        sched,
        cfg,
        Vec::new(),
    )
}

#[cfg(test)]
mod tests;
