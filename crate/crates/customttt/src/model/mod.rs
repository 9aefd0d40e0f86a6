//! The toy layered video denoiser.
//!
//! Nine layers in network order: four down (0..=3), one middle (4), four up
//! (5..=8). Spatial resolution halves after layers 0 and 1 and doubles after
//! layers 6 and 7; the output of down-layer i feeds additively into the input
//! of up-layer 8−i. Each layer runs a residual block, a per-frame spatial
//! self-attention, a cross-attention reading that layer's routed prompt
//! (absent at layers 3 and 5), and a temporal self-attention over the frame
//! axis at each spatial location (absent at layer 4).
//!
//! Every parameter is addressable by a dotted name such as
//! `layer2.spatial.self_attn.wq`; low-rank adapters reference the same names.
//! The backward pass is written by hand against per-block caches, and can be
//! scoped to all base weights or to attached adapter factors only.

mod blocks;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis, CowArray, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::container::Container;
use crate::data::{PromptEmbedding, MAX_PROMPT_LEN};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraEntry};
use crate::real::Real;
use crate::rng::derive_rng;

use blocks::{
    cross_attn_bwd, cross_attn_fwd, ln_bwd, ln_fwd, pool2_bwd, pool2_fwd, res_bwd, res_fwd,
    self_attn_bwd, self_attn_fwd, sinusoid_row, sinusoid_table, up2_bwd, up2_fwd, AttnView,
    CrossAttnCache, DwMask, LnCache, ResCache, ResView, SelfAttnCache,
};

/// Video array in (frames, channels, height, width) order. Values at the
/// model boundary live in roughly [-1, 1]; interior widths vary per layer.
pub type VideoTensor<A> = Array4<A>;

pub const LAYER_COUNT: usize = 9;

/// Layers carrying a cross-attention block (all but 3 and 5).
pub const CROSS_ATTN_LAYERS: [usize; 7] = [0, 1, 2, 4, 6, 7, 8];

/// Downsampling factor of each layer's working resolution.
const RES_DIVISOR: [usize; LAYER_COUNT] = [1, 2, 4, 4, 4, 4, 4, 2, 1];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub width: usize,
    pub has_cross_attn: bool,
    pub has_temporal: bool,
}

impl LayerSpec {
    /// The standard flag pattern: cross-attention everywhere but layers 3
    /// and 5, a temporal module everywhere but layer 4.
    pub fn standard(index: usize, width: usize) -> Self {
        Self {
            index,
            width,
            has_cross_attn: !matches!(index, 3 | 5),
            has_temporal: index != 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub time_embed_dim: usize,
    pub layer_specs: Vec<LayerSpec>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::with_dims(8, 3, 16, 16, 32, 32, 32)
    }
}

impl DenoiserConfig {
    pub fn with_dims(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        base_width: usize,
        embed_dim: usize,
        time_embed_dim: usize,
    ) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            base_width,
            embed_dim,
            time_embed_dim,
            layer_specs: (0..LAYER_COUNT)
                .map(|i| LayerSpec::standard(i, base_width))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 {
            return Err(Error::config("frames and channels must be positive"));
        }
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::config(
                "height and width must be multiples of 4 (two pooling stages)",
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even and positive"));
        }
        if self.layer_specs.len() != LAYER_COUNT {
            return Err(Error::config(format!(
                "inconsistent layer specs: expected {LAYER_COUNT} layers, got {}",
                self.layer_specs.len()
            )));
        }
        for (i, spec) in self.layer_specs.iter().enumerate() {
            if spec.index != i {
                return Err(Error::config(format!(
                    "inconsistent layer specs: index {} at position {i}",
                    spec.index
                )));
            }
            if spec.has_cross_attn != !matches!(i, 3 | 5) {
                return Err(Error::config(format!(
                    "inconsistent layer specs: cross-attention flag wrong at layer {i}"
                )));
            }
            if spec.has_temporal != (i != 4) {
                return Err(Error::config(format!(
                    "inconsistent layer specs: temporal flag wrong at layer {i}"
                )));
            }
            if spec.width < 2 || spec.width % 2 != 0 {
                return Err(Error::config(format!(
                    "inconsistent layer specs: width at layer {i} must be even and >= 2"
                )));
            }
        }
        // Additive skips require the input of up-layer 8-i to match the
        // output width of down-layer i.
        for i in 0..4 {
            let (a, b) = (self.layer_specs[i].width, self.layer_specs[7 - i].width);
            if a != b {
                return Err(Error::config(format!(
                    "inconsistent layer specs: widths of layers {i} and {} must match for the skip into layer {}",
                    7 - i,
                    8 - i
                )));
            }
        }
        Ok(())
    }

    /// Channel width entering layer `i` (the previous layer's width, or
    /// layer 0's own width straight out of the stem).
    fn input_width(&self, i: usize) -> usize {
        if i == 0 {
            self.layer_specs[0].width
        } else {
            self.layer_specs[i - 1].width
        }
    }

    fn layer_hw(&self, i: usize) -> (usize, usize) {
        let d = RES_DIVISOR[i];
        (self.height / d, self.width / d)
    }
}

#[derive(Clone, Debug)]
pub struct AttnWeights<A: Real> {
    pub wq: Array2<A>,
    pub wk: Array2<A>,
    pub wv: Array2<A>,
    pub wo: Array2<A>,
}

impl<A: Real> AttnWeights<A> {
    fn zeros(c_q: usize, c_kv: usize, width: usize) -> Self {
        Self {
            wq: Array2::zeros((c_q, width)),
            wk: Array2::zeros((c_kv, width)),
            wv: Array2::zeros((c_kv, width)),
            wo: Array2::zeros((width, width)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResBlockWeights<A: Real> {
    pub w1: Array2<A>,
    pub b1: Array1<A>,
    pub w2: Array2<A>,
    pub b2: Array1<A>,
    pub time_w: Array2<A>,
    pub time_b: Array1<A>,
    /// Residual projection, present only when input and output widths differ.
    pub skip_w: Option<Array2<A>>,
}

#[derive(Clone, Debug)]
pub struct SpatialModule<A: Real> {
    pub res: ResBlockWeights<A>,
    pub self_attn: AttnWeights<A>,
    pub cross_attn: Option<AttnWeights<A>>,
}

#[derive(Clone, Debug)]
pub struct TemporalModule<A: Real> {
    pub attn: AttnWeights<A>,
}

#[derive(Clone, Debug)]
pub struct DenoiserLayer<A: Real> {
    pub spatial: SpatialModule<A>,
    pub temporal: Option<TemporalModule<A>>,
}

#[derive(Clone, Debug)]
pub struct Denoiser<A: Real> {
    pub config: DenoiserConfig,
    pub proj_in_w: Array2<A>,
    pub proj_in_b: Array1<A>,
    pub layers: Vec<DenoiserLayer<A>>,
    pub proj_out_w: Array2<A>,
    pub proj_out_b: Array1<A>,
}

/// Per-layer prompt assignment for the cross-attention blocks.
#[derive(Clone, Debug)]
pub struct PromptRouting<A: Real> {
    pub per_layer: IndexMap<usize, PromptEmbedding<A>>,
}

impl<A: Real> PromptRouting<A> {
    /// Routes the same embedding to every cross-attention layer.
    pub fn uniform(embed: &PromptEmbedding<A>) -> Self {
        let per_layer = CROSS_ATTN_LAYERS
            .iter()
            .map(|&i| (i, embed.clone()))
            .collect();
        Self { per_layer }
    }

    pub fn set(&mut self, layer: usize, embed: PromptEmbedding<A>) {
        self.per_layer.insert(layer, embed);
    }

    pub fn validate(&self, config: &DenoiserConfig) -> Result<()> {
        for (i, spec) in config.layer_specs.iter().enumerate() {
            match (spec.has_cross_attn, self.per_layer.contains_key(&i)) {
                (true, false) => {
                    return Err(Error::config(format!(
                        "routing missing a prompt for cross-attention layer {i}"
                    )))
                }
                (false, true) => {
                    return Err(Error::config(format!(
                        "routing assigns a prompt to layer {i}, which has no cross-attention"
                    )))
                }
                _ => {}
            }
        }
        for (i, embed) in &self.per_layer {
            if embed.tokens.dim() != (MAX_PROMPT_LEN, config.embed_dim) {
                return Err(Error::shape(format!(
                    "prompt for layer {i} has shape {:?}, expected ({MAX_PROMPT_LEN}, {})",
                    embed.tokens.dim(),
                    config.embed_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    /// Diagnostic mode: skip every temporal attention (identity), making
    /// frames fully independent.
    pub temporal_identity: bool,
}

/// Which parameters the backward pass produces gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    /// All base weights; attached adapters are treated as frozen.
    AllBase,
    /// Only the attached adapters' A/B factors, keyed
    /// `adapter{slot}.{target}.a` / `.b` by position in the adapter slice.
    Adapters,
}

pub type Grads<A> = IndexMap<String, ArrayD<A>>;

pub(crate) fn add_grad<A: Real>(grads: &mut Grads<A>, name: String, v: ArrayD<A>) {
    match grads.entry(name) {
        indexmap::map::Entry::Occupied(mut e) => {
            let acc = e.get_mut();
            *acc += &v;
        }
        indexmap::map::Entry::Vacant(e) => {
            e.insert(v);
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter walking
// ---------------------------------------------------------------------------

// One definition of the name schema, instantiated for shared and mutable
// access. Walk order is canonical: stem, layers 0..8 (resblock, self-attn,
// cross-attn, temporal), head.
macro_rules! walk_params {
    ($model:expr, $f:expr, $view:ident, $iter:ident) => {{
        let f = $f;
        f("proj_in.w", $model.proj_in_w.$view().into_dyn());
        f("proj_in.b", $model.proj_in_b.$view().into_dyn());
        for (i, layer) in $model.layers.$iter().enumerate() {
            let res = mut_or_ref!($iter, layer.spatial.res);
            f(&format!("layer{i}.spatial.res.w1"), res.w1.$view().into_dyn());
            f(&format!("layer{i}.spatial.res.b1"), res.b1.$view().into_dyn());
            f(&format!("layer{i}.spatial.res.w2"), res.w2.$view().into_dyn());
            f(&format!("layer{i}.spatial.res.b2"), res.b2.$view().into_dyn());
            f(
                &format!("layer{i}.spatial.res.time_w"),
                res.time_w.$view().into_dyn(),
            );
            f(
                &format!("layer{i}.spatial.res.time_b"),
                res.time_b.$view().into_dyn(),
            );
            if let Some(sk) = mut_or_ref!($iter, res.skip_w, opt) {
                f(&format!("layer{i}.spatial.res.skip_w"), sk.$view().into_dyn());
            }
            let sa = mut_or_ref!($iter, layer.spatial.self_attn);
            f(&format!("layer{i}.spatial.self_attn.wq"), sa.wq.$view().into_dyn());
            f(&format!("layer{i}.spatial.self_attn.wk"), sa.wk.$view().into_dyn());
            f(&format!("layer{i}.spatial.self_attn.wv"), sa.wv.$view().into_dyn());
            f(&format!("layer{i}.spatial.self_attn.wo"), sa.wo.$view().into_dyn());
            if let Some(ca) = mut_or_ref!($iter, layer.spatial.cross_attn, opt) {
                f(&format!("layer{i}.spatial.cross_attn.wq"), ca.wq.$view().into_dyn());
                f(&format!("layer{i}.spatial.cross_attn.wk"), ca.wk.$view().into_dyn());
                f(&format!("layer{i}.spatial.cross_attn.wv"), ca.wv.$view().into_dyn());
                f(&format!("layer{i}.spatial.cross_attn.wo"), ca.wo.$view().into_dyn());
            }
            if let Some(tm) = mut_or_ref!($iter, layer.temporal, opt) {
                f(&format!("layer{i}.temporal.attn.wq"), tm.attn.wq.$view().into_dyn());
                f(&format!("layer{i}.temporal.attn.wk"), tm.attn.wk.$view().into_dyn());
                f(&format!("layer{i}.temporal.attn.wv"), tm.attn.wv.$view().into_dyn());
                f(&format!("layer{i}.temporal.attn.wo"), tm.attn.wo.$view().into_dyn());
            }
        }
        f("proj_out.w", $model.proj_out_w.$view().into_dyn());
        f("proj_out.b", $model.proj_out_b.$view().into_dyn());
    }};
}

macro_rules! mut_or_ref {
    (iter, $e:expr) => {
        &$e
    };
    (iter_mut, $e:expr) => {
        &mut $e
    };
    (iter, $e:expr, opt) => {
        $e.as_ref()
    };
    (iter_mut, $e:expr, opt) => {
        $e.as_mut()
    };
}

impl<A: Real> Denoiser<A> {
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, A>)) {
        walk_params!(self, f, view, iter);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, A>)) {
        walk_params!(self, f, view_mut, iter_mut);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn clone_param(&self, name: &str) -> Option<ArrayD<A>> {
        let mut out = None;
        self.for_each_param(&mut |n, v| {
            if n == name {
                out = Some(v.to_owned());
            }
        });
        out
    }

    /// Applies `f` to the named parameter; returns false if absent.
    pub fn modify_param(&mut self, name: &str, f: impl FnOnce(&mut ArrayViewMutD<'_, A>)) -> bool {
        let mut f = Some(f);
        let mut hit = false;
        self.for_each_param_mut(&mut |n, mut v| {
            if n == name {
                if let Some(f) = f.take() {
                    f(&mut v);
                    hit = true;
                }
            }
        });
        hit
    }

    /// Names of all attention projection matrices (valid adapter targets).
    pub(crate) fn attention_names(&self) -> HashSet<String> {
        let mut names = HashSet::new();
        self.for_each_param(&mut |n, _| {
            if n.contains("attn") {
                names.insert(n.to_string());
            }
        });
        names
    }

    fn zeros(config: DenoiserConfig) -> Self {
        let d = config.embed_dim;
        let td = config.time_embed_dim;
        let layers = config
            .layer_specs
            .iter()
            .map(|spec| {
                let w = spec.width;
                let c_in = config.input_width(spec.index);
                DenoiserLayer {
                    spatial: SpatialModule {
                        res: ResBlockWeights {
                            w1: Array2::zeros((c_in, w)),
                            b1: Array1::zeros(w),
                            w2: Array2::zeros((w, w)),
                            b2: Array1::zeros(w),
                            time_w: Array2::zeros((td, w)),
                            time_b: Array1::zeros(w),
                            skip_w: (c_in != w).then(|| Array2::zeros((c_in, w))),
                        },
                        self_attn: AttnWeights::zeros(w, w, w),
                        cross_attn: spec.has_cross_attn.then(|| AttnWeights::zeros(w, d, w)),
                    },
                    temporal: spec.has_temporal.then(|| TemporalModule {
                        attn: AttnWeights::zeros(w, w, w),
                    }),
                }
            })
            .collect();
        let c = config.channels;
        let w0 = config.layer_specs[0].width;
        let w8 = config.layer_specs[8].width;
        Self {
            proj_in_w: Array2::zeros((c, w0)),
            proj_in_b: Array1::zeros(w0),
            layers,
            proj_out_w: Array2::zeros((w8, c)),
            proj_out_b: Array1::zeros(c),
            config,
        }
    }
}

/// Builds a denoiser with seeded Gaussian weights, std 1/sqrt(fan_in) per
/// matrix, drawn from a per-parameter-name stream so the result does not
/// depend on traversal order. Biases, attention output projections, and the
/// output head start at zero, leaving the initial model near-linear with an
/// exactly zero noise prediction.
pub fn build_denoiser<A: Real>(config: &DenoiserConfig, seed: u64) -> Result<Denoiser<A>> {
    config.validate()?;
    let mut model = Denoiser::zeros(config.clone());
    model.for_each_param_mut(&mut |name, mut view| {
        if view.ndim() < 2 || name.ends_with(".wo") || name == "proj_out.w" {
            return;
        }
        let std = 1.0 / (view.shape()[0] as f64).sqrt();
        let mut rng = derive_rng(seed, &["init", name]);
        for v in view.iter_mut() {
            *v = A::real(rng.sample::<f64, _>(StandardNormal) * std);
        }
    });
    Ok(model)
}

/// Scalar parameter count: all base weights, or, when `adapters` is given,
/// only the adapters' A/B entries.
pub fn param_count<A: Real>(model: &Denoiser<A>, adapters: Option<&[&LoraAdapter<A>]>) -> usize {
    match adapters {
        None => {
            let mut n = 0;
            model.for_each_param(&mut |_, v| n += v.len());
            n
        }
        Some(list) => list
            .iter()
            .flat_map(|ad| ad.entries.iter())
            .map(|e| e.a.len() + e.b.len())
            .sum(),
    }
}

// ---------------------------------------------------------------------------
// Adapter resolution
// ---------------------------------------------------------------------------

struct AdapterHit<'a, A: Real> {
    slot: usize,
    entry: &'a LoraEntry<A>,
    scale: A,
}

/// Target-name index over the adapters attached to one forward/backward
/// call. Built per call; validates that every target resolves.
struct AdapterIndex<'a, A: Real> {
    map: HashMap<String, Vec<AdapterHit<'a, A>>>,
}

impl<'a, A: Real> AdapterIndex<'a, A> {
    fn build(model: &Denoiser<A>, adapters: &[&'a LoraAdapter<A>]) -> Result<Self> {
        let mut map: HashMap<String, Vec<AdapterHit<'a, A>>> = HashMap::new();
        if adapters.is_empty() {
            return Ok(Self { map });
        }
        let valid = model.attention_names();
        for (slot, adapter) in adapters.iter().enumerate() {
            let scale = A::real(adapter.scale);
            for entry in &adapter.entries {
                let name = entry.target.name();
                if !valid.contains(&name) {
                    return Err(Error::config(format!(
                        "adapter target not found in model: {name}"
                    )));
                }
                map.entry(name).or_default().push(AdapterHit { slot, entry, scale });
            }
        }
        Ok(Self { map })
    }

    fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    fn hits(&self, name: &str) -> &[AdapterHit<'a, A>] {
        self.map.get(name).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Effective attention weights for one block: base matrices plus any adapter
/// deltas, materialized only where an adapter actually hits.
struct EffAttn<'m, A: Real> {
    wq: CowArray<'m, A, Ix2>,
    wk: CowArray<'m, A, Ix2>,
    wv: CowArray<'m, A, Ix2>,
    wo: CowArray<'m, A, Ix2>,
}

impl<'m, A: Real> EffAttn<'m, A> {
    fn view(&self) -> AttnView<'_, A> {
        AttnView {
            wq: self.wq.view(),
            wk: self.wk.view(),
            wv: self.wv.view(),
            wo: self.wo.view(),
        }
    }
}

fn eff_mat<'m, A: Real>(
    idx: &AdapterIndex<'_, A>,
    name: String,
    w0: &'m Array2<A>,
) -> Result<CowArray<'m, A, Ix2>> {
    let hits = idx.hits(&name);
    if hits.is_empty() {
        return Ok(w0.view().into());
    }
    let mut w = w0.clone();
    for hit in hits {
        let (m0, n0) = w0.dim();
        let (ma, ra) = hit.entry.a.dim();
        let (rb, nb) = hit.entry.b.dim();
        if ma != m0 || nb != n0 || ra != rb {
            return Err(Error::shape(format!(
                "adapter entry on {name}: A is {ma}x{ra}, B is {rb}x{nb}, base is {m0}x{n0}"
            )));
        }
        w.scaled_add(hit.scale, &hit.entry.a.dot(&hit.entry.b));
    }
    Ok(w.into())
}

fn eff_attn<'m, A: Real>(
    idx: &AdapterIndex<'_, A>,
    base: &'m AttnWeights<A>,
    prefix: &str,
) -> Result<EffAttn<'m, A>> {
    Ok(EffAttn {
        wq: eff_mat(idx, format!("{prefix}.wq"), &base.wq)?,
        wk: eff_mat(idx, format!("{prefix}.wk"), &base.wk)?,
        wv: eff_mat(idx, format!("{prefix}.wv"), &base.wv)?,
        wo: eff_mat(idx, format!("{prefix}.wo"), &base.wo)?,
    })
}

// ---------------------------------------------------------------------------
// Layout helpers
// ---------------------------------------------------------------------------

/// Cross-attention key rows of an embedding: the non-null source tokens, in
/// order. The null token is padding-like conditioning, so a null-only prompt
/// yields zero keys and the cross-attention block reduces to the identity
/// (which also keeps its weights out of unconditional training updates).
fn prompt_keys<A: Real>(embed: &PromptEmbedding<A>) -> (Array2<A>, usize) {
    let d = embed.tokens.ncols();
    let active: Vec<usize> = embed
        .source_tokens
        .iter()
        .take(MAX_PROMPT_LEN)
        .enumerate()
        .filter(|(_, &t)| t != crate::data::NULL_TOKEN)
        .map(|(j, _)| j)
        .collect();
    let mut keys = Array2::<A>::zeros((active.len(), d));
    for (row, &j) in active.iter().enumerate() {
        keys.row_mut(row).assign(&embed.tokens.row(j));
    }
    let n = active.len();
    (keys, n)
}

/// (F, C, H, W) video to (F*H*W, C) token rows, frame-major.
fn nchw_to_tokens<A: Real>(z: &Array4<A>) -> Array2<A> {
    let (f, c, h, w) = z.dim();
    z.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((f * h * w, c))
        .expect("contiguous after standardizing")
}

fn tokens_to_nchw<A: Real>(x: &Array2<A>, f: usize, h: usize, w: usize) -> Array4<A> {
    let c = x.ncols();
    let x4 = x
        .view()
        .into_shape_with_order((f, h, w, c))
        .expect("token count must equal f*h*w");
    x4.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned()
}

/// Frame-major tokens to location-major tokens (each location's F frames
/// contiguous), the grouping used by temporal attention.
fn to_temporal<A: Real>(x: &Array2<A>, f: usize, h: usize, w: usize) -> Array2<A> {
    let c = x.ncols();
    let x4 = x
        .view()
        .into_shape_with_order((f, h, w, c))
        .expect("token count must equal f*h*w");
    x4.permuted_axes([1, 2, 0, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w * f, c))
        .expect("contiguous after standardizing")
}

fn from_temporal<A: Real>(x: &Array2<A>, f: usize, h: usize, w: usize) -> Array2<A> {
    let c = x.ncols();
    let x4 = x
        .view()
        .into_shape_with_order((h, w, f, c))
        .expect("token count must equal h*w*f");
    x4.permuted_axes([2, 0, 1, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((f * h * w, c))
        .expect("contiguous after standardizing")
}

fn pool_tokens<A: Real>(x: &Array2<A>, f: usize, h: usize, w: usize) -> Array2<A> {
    let c = x.ncols();
    let x4 = x
        .view()
        .into_shape_with_order((f, h, w, c))
        .expect("token count must equal f*h*w")
        .to_owned();
    let y = pool2_fwd(&x4);
    y.into_shape_with_order((f * (h / 2) * (w / 2), c)).expect("contiguous")
}

fn pool_tokens_bwd<A: Real>(dy: &Array2<A>, f: usize, h: usize, w: usize) -> Array2<A> {
    let c = dy.ncols();
    let d4 = dy
        .view()
        .into_shape_with_order((f, h, w, c))
        .expect("token count must equal f*h*w")
        .to_owned();
    let d = pool2_bwd(&d4);
    d.into_shape_with_order((f * h * 2 * w * 2, c)).expect("contiguous")
}

fn up_tokens<A: Real>(x: &Array2<A>, f: usize, h: usize, w: usize) -> Array2<A> {
    let c = x.ncols();
    let x4 = x
        .view()
        .into_shape_with_order((f, h, w, c))
        .expect("token count must equal f*h*w")
        .to_owned();
    let y = up2_fwd(&x4);
    y.into_shape_with_order((f * h * 2 * w * 2, c)).expect("contiguous")
}

fn up_tokens_bwd<A: Real>(dy: &Array2<A>, f: usize, h: usize, w: usize) -> Array2<A> {
    let c = dy.ncols();
    let d4 = dy
        .view()
        .into_shape_with_order((f, h, w, c))
        .expect("token count must equal f*h*w")
        .to_owned();
    let d = up2_bwd(&d4);
    d.into_shape_with_order((f * (h / 2) * (w / 2), c)).expect("contiguous")
}

fn add_bias_rows<A: Real>(x: &mut Array2<A>, b: &Array1<A>) {
    for mut row in x.rows_mut() {
        row += b;
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct LayerCache<A: Real> {
    res: ResCache<A>,
    self_attn: SelfAttnCache<A>,
    cross: Option<CrossAttnCache<A>>,
    temporal: Option<SelfAttnCache<A>>,
}

pub struct ForwardCache<A: Real> {
    t_emb: Array1<A>,
    z_tokens: Array2<A>,
    layers: Vec<LayerCache<A>>,
    head_ln: LnCache<A>,
}

impl<A: Real> Denoiser<A> {
    /// Predicts the noise in `z_t`. Attached adapters contribute
    /// `scale * A * B` to their target matrices without mutating the model.
    pub fn forward(
        &self,
        z_t: &VideoTensor<A>,
        t: usize,
        routing: &PromptRouting<A>,
        adapters: &[&LoraAdapter<A>],
        opts: &ForwardOpts,
    ) -> Result<VideoTensor<A>> {
        self.run(z_t, t, routing, adapters, opts).map(|(eps, _)| eps)
    }

    /// Forward pass that also returns the activation caches needed by
    /// [`Denoiser::backward`].
    pub fn forward_cached(
        &self,
        z_t: &VideoTensor<A>,
        t: usize,
        routing: &PromptRouting<A>,
        adapters: &[&LoraAdapter<A>],
        opts: &ForwardOpts,
    ) -> Result<(VideoTensor<A>, ForwardCache<A>)> {
        self.run(z_t, t, routing, adapters, opts)
    }

    fn run(
        &self,
        z_t: &VideoTensor<A>,
        t: usize,
        routing: &PromptRouting<A>,
        adapters: &[&LoraAdapter<A>],
        opts: &ForwardOpts,
    ) -> Result<(VideoTensor<A>, ForwardCache<A>)> {
        let cfg = &self.config;
        let want = (cfg.frames, cfg.channels, cfg.height, cfg.width);
        if z_t.dim() != want {
            return Err(Error::shape(format!(
                "input video has shape {:?}, model expects {want:?}",
                z_t.dim()
            )));
        }
        routing.validate(cfg)?;
        let idx = AdapterIndex::build(self, adapters)?;
        let t_emb: Array1<A> = sinusoid_row(t as f64, cfg.time_embed_dim);
        let f = cfg.frames;
        let (h0, w0) = cfg.layer_hw(0);
        let (h1, w1) = cfg.layer_hw(1);

        let z_tokens = nchw_to_tokens(z_t);
        let mut x = z_tokens.dot(&self.proj_in_w);
        add_bias_rows(&mut x, &self.proj_in_b);

        let mut caches = Vec::with_capacity(LAYER_COUNT);
        let layer = |i: usize, x: Array2<A>, h: usize, w: usize, caches: &mut Vec<LayerCache<A>>| {
            self.layer_fwd(i, x, h, w, &t_emb, routing, &idx, opts)
                .map(|(y, cache)| {
                    caches.push(cache);
                    y
                })
        };

        let y0 = layer(0, x, h0, w0, &mut caches)?;
        let y1 = layer(1, pool_tokens(&y0, f, h0, w0), h1, w1, &mut caches)?;
        let (h2, w2) = cfg.layer_hw(2);
        let y2 = layer(2, pool_tokens(&y1, f, h1, w1), h2, w2, &mut caches)?;
        let y3 = layer(3, y2.clone(), h2, w2, &mut caches)?;
        let y4 = layer(4, y3.clone(), h2, w2, &mut caches)?;
        let y5 = layer(5, &y4 + &y3, h2, w2, &mut caches)?;
        let y6 = layer(6, &y5 + &y2, h2, w2, &mut caches)?;
        let y7 = layer(7, &up_tokens(&y6, f, h2, w2) + &y1, h1, w1, &mut caches)?;
        let y8 = layer(8, &up_tokens(&y7, f, h1, w1) + &y0, h0, w0, &mut caches)?;

        let head_ln = ln_fwd(&y8);
        let mut eps = head_ln.xhat.dot(&self.proj_out_w);
        add_bias_rows(&mut eps, &self.proj_out_b);
        let eps = tokens_to_nchw(&eps, f, h0, w0);
        Ok((
            eps,
            ForwardCache {
                t_emb,
                z_tokens,
                layers: caches,
                head_ln,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_fwd(
        &self,
        i: usize,
        x: Array2<A>,
        h: usize,
        w: usize,
        t_emb: &Array1<A>,
        routing: &PromptRouting<A>,
        idx: &AdapterIndex<'_, A>,
        opts: &ForwardOpts,
    ) -> Result<(Array2<A>, LayerCache<A>)> {
        let cfg = &self.config;
        let frames = cfg.frames;
        let width = cfg.layer_specs[i].width;
        let sp = &self.layers[i].spatial;

        let t_vec = &t_emb.dot(&sp.res.time_w) + &sp.res.time_b;
        let res_view = ResView {
            w1: sp.res.w1.view(),
            b1: sp.res.b1.view(),
            w2: sp.res.w2.view(),
            b2: sp.res.b2.view(),
            skip: sp.res.skip_w.as_ref().map(|m| m.view()),
        };
        let (x, res_cache) = res_fwd(&x, &t_vec, &res_view);

        let eff_sa = eff_attn(idx, &sp.self_attn, &format!("layer{i}.spatial.self_attn"))?;
        let (mut x, sa_cache) = self_attn_fwd(&x, frames, None, &eff_sa.view());

        let cross = match &sp.cross_attn {
            Some(ca) => {
                let embed = &routing.per_layer[&i];
                let eff = eff_attn(idx, ca, &format!("layer{i}.spatial.cross_attn"))?;
                let (keys, valid) = prompt_keys(embed);
                let (y, cache) = cross_attn_fwd(&x, &keys, valid, &eff.view());
                x = y;
                Some(cache)
            }
            None => None,
        };

        let temporal = match &self.layers[i].temporal {
            Some(tm) if !opts.temporal_identity => {
                let eff = eff_attn(idx, &tm.attn, &format!("layer{i}.temporal.attn"))?;
                let pos: Array2<A> = sinusoid_table(frames, width);
                let xt = to_temporal(&x, frames, h, w);
                let (yt, cache) = self_attn_fwd(&xt, h * w, Some(&pos), &eff.view());
                x = from_temporal(&yt, frames, h, w);
                Some(cache)
            }
            _ => None,
        };

        Ok((
            x,
            LayerCache {
                res: res_cache,
                self_attn: sa_cache,
                cross,
                temporal,
            },
        ))
    }

    /// Backpropagates `d_eps` through the cached forward pass, returning
    /// gradients for the parameters selected by `scope`. The adapter slice
    /// must match the one used in the forward call.
    pub fn backward(
        &self,
        cache: &ForwardCache<A>,
        d_eps: &VideoTensor<A>,
        adapters: &[&LoraAdapter<A>],
        scope: GradScope,
    ) -> Result<Grads<A>> {
        let cfg = &self.config;
        let idx = AdapterIndex::build(self, adapters)?;
        let mut grads = Grads::default();
        let f = cfg.frames;
        let (h0, w0) = cfg.layer_hw(0);
        let (h1, w1) = cfg.layer_hw(1);
        let (h2, w2) = cfg.layer_hw(2);

        let d_tokens = nchw_to_tokens(d_eps);
        if scope == GradScope::AllBase {
            add_grad(
                &mut grads,
                "proj_out.w".into(),
                cache.head_ln.xhat.t().dot(&d_tokens).into_dyn(),
            );
            add_grad(
                &mut grads,
                "proj_out.b".into(),
                d_tokens.sum_axis(Axis(0)).into_dyn(),
            );
        }
        let d_y8 = ln_bwd(&cache.head_ln, &d_tokens.dot(&self.proj_out_w.t()));

        let d_in8 = self.layer_bwd(8, &d_y8, h0, w0, cache, &idx, scope, &mut grads)?;
        // d_in8 feeds both the upsampled layer-7 output and the skip from y0.
        let d_y7 = up_tokens_bwd(&d_in8, f, h0, w0);
        let d_in7 = self.layer_bwd(7, &d_y7, h1, w1, cache, &idx, scope, &mut grads)?;
        let d_y6 = up_tokens_bwd(&d_in7, f, h1, w1);
        let d_in6 = self.layer_bwd(6, &d_y6, h2, w2, cache, &idx, scope, &mut grads)?;
        let d_in5 = self.layer_bwd(5, &d_in6, h2, w2, cache, &idx, scope, &mut grads)?;
        let d_in4 = self.layer_bwd(4, &d_in5, h2, w2, cache, &idx, scope, &mut grads)?;
        let d_y3 = &d_in5 + &d_in4;
        let d_in3 = self.layer_bwd(3, &d_y3, h2, w2, cache, &idx, scope, &mut grads)?;
        let d_y2 = &d_in6 + &d_in3;
        let d_in2 = self.layer_bwd(2, &d_y2, h2, w2, cache, &idx, scope, &mut grads)?;
        let d_y1 = &pool_tokens_bwd(&d_in2, f, h2, w2) + &d_in7;
        let d_in1 = self.layer_bwd(1, &d_y1, h1, w1, cache, &idx, scope, &mut grads)?;
        let d_y0 = &pool_tokens_bwd(&d_in1, f, h1, w1) + &d_in8;
        let d_in0 = self.layer_bwd(0, &d_y0, h0, w0, cache, &idx, scope, &mut grads)?;

        if scope == GradScope::AllBase {
            add_grad(
                &mut grads,
                "proj_in.w".into(),
                cache.z_tokens.t().dot(&d_in0).into_dyn(),
            );
            add_grad(
                &mut grads,
                "proj_in.b".into(),
                d_in0.sum_axis(Axis(0)).into_dyn(),
            );
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_bwd(
        &self,
        i: usize,
        dy: &Array2<A>,
        h: usize,
        w: usize,
        cache: &ForwardCache<A>,
        idx: &AdapterIndex<'_, A>,
        scope: GradScope,
        grads: &mut Grads<A>,
    ) -> Result<Array2<A>> {
        let frames = self.config.frames;
        let sp = &self.layers[i].spatial;
        let lc = &cache.layers[i];
        let mut d = dy.clone();

        if let Some(tc) = &lc.temporal {
            let tm = self.layers[i].temporal.as_ref().expect("cache implies module");
            let prefix = format!("layer{i}.temporal.attn");
            let eff = eff_attn(idx, &tm.attn, &prefix)?;
            let mask = dw_mask(scope, idx, &prefix);
            let dt = to_temporal(&d, frames, h, w);
            let (dxt, ag) = self_attn_bwd(tc, &eff.view(), &dt, mask);
            d = from_temporal(&dxt, frames, h, w);
            emit_attn_grads(grads, scope, idx, &prefix, ag);
        }

        if let Some(cc) = &lc.cross {
            let ca = sp.cross_attn.as_ref().expect("cache implies module");
            let prefix = format!("layer{i}.spatial.cross_attn");
            let eff = eff_attn(idx, ca, &prefix)?;
            let mask = dw_mask(scope, idx, &prefix);
            let (dx, ag) = cross_attn_bwd(cc, &eff.view(), &d, mask);
            d = dx;
            emit_attn_grads(grads, scope, idx, &prefix, ag);
        }

        {
            let prefix = format!("layer{i}.spatial.self_attn");
            let eff = eff_attn(idx, &sp.self_attn, &prefix)?;
            let mask = dw_mask(scope, idx, &prefix);
            let (dx, ag) = self_attn_bwd(&lc.self_attn, &eff.view(), &d, mask);
            d = dx;
            emit_attn_grads(grads, scope, idx, &prefix, ag);
        }

        {
            let res_view = ResView {
                w1: sp.res.w1.view(),
                b1: sp.res.b1.view(),
                w2: sp.res.w2.view(),
                b2: sp.res.b2.view(),
                skip: sp.res.skip_w.as_ref().map(|m| m.view()),
            };
            let want = scope == GradScope::AllBase;
            let (dx, rg) = res_bwd(&lc.res, &res_view, &d, want);
            d = dx;
            if want {
                let p = format!("layer{i}.spatial.res");
                if let Some(g) = rg.dw1 {
                    add_grad(grads, format!("{p}.w1"), g.into_dyn());
                }
                if let Some(g) = rg.db1 {
                    add_grad(grads, format!("{p}.b1"), g.into_dyn());
                }
                if let Some(g) = rg.dw2 {
                    add_grad(grads, format!("{p}.w2"), g.into_dyn());
                }
                if let Some(g) = rg.db2 {
                    add_grad(grads, format!("{p}.b2"), g.into_dyn());
                }
                if let Some(g) = rg.dskip {
                    add_grad(grads, format!("{p}.skip_w"), g.into_dyn());
                }
                // Fold the broadcast time-row gradient into the projection.
                let dt = &rg.dt_vec;
                let te = &cache.t_emb;
                let dtw = Array2::from_shape_fn((te.len(), dt.len()), |(r, c)| te[r] * dt[c]);
                add_grad(grads, format!("{p}.time_w"), dtw.into_dyn());
                add_grad(grads, format!("{p}.time_b"), rg.dt_vec.into_dyn());
            }
        }

        Ok(d)
    }
}

fn dw_mask<A: Real>(scope: GradScope, idx: &AdapterIndex<'_, A>, prefix: &str) -> DwMask {
    if scope == GradScope::AllBase {
        return DwMask::all(true);
    }
    DwMask {
        wq: idx.has(&format!("{prefix}.wq")),
        wk: idx.has(&format!("{prefix}.wk")),
        wv: idx.has(&format!("{prefix}.wv")),
        wo: idx.has(&format!("{prefix}.wo")),
    }
}

/// Routes one attention block's weight gradients: to the base names under
/// `AllBase`, and through the chain rule onto every adapter factor that
/// targets them (`dA = scale * dW * B^T`, `dB = scale * A^T * dW`).
fn emit_attn_grads<A: Real>(
    grads: &mut Grads<A>,
    scope: GradScope,
    idx: &AdapterIndex<'_, A>,
    prefix: &str,
    ag: blocks::AttnGrads<A>,
) {
    for (suffix, dw) in [("wq", ag.dwq), ("wk", ag.dwk), ("wv", ag.dwv), ("wo", ag.dwo)] {
        let Some(dw) = dw else { continue };
        let name = format!("{prefix}.{suffix}");
        match scope {
            GradScope::AllBase => add_grad(grads, name, dw.into_dyn()),
            GradScope::Adapters => {
                for hit in idx.hits(&name) {
                    let mut da = dw.dot(&hit.entry.b.t());
                    da.mapv_inplace(|v| v * hit.scale);
                    add_grad(grads, format!("adapter{}.{name}.a", hit.slot), da.into_dyn());
                    let mut db = hit.entry.a.t().dot(&dw);
                    db.mapv_inplace(|v| v * hit.scale);
                    add_grad(grads, format!("adapter{}.{name}.b", hit.slot), db.into_dyn());
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_KIND: &str = "denoiser";

pub fn save_checkpoint<A: Real>(model: &Denoiser<A>, path: impl AsRef<Path>) -> Result<()> {
    let cfg = &model.config;
    let mut c = Container::new();
    c.set_meta("kind", CKPT_KIND);
    c.set_meta("dtype", A::DTYPE.name());
    c.set_meta("frames", cfg.frames.to_string());
    c.set_meta("channels", cfg.channels.to_string());
    c.set_meta("height", cfg.height.to_string());
    c.set_meta("width", cfg.width.to_string());
    c.set_meta("base_width", cfg.base_width.to_string());
    c.set_meta("embed_dim", cfg.embed_dim.to_string());
    c.set_meta("time_embed_dim", cfg.time_embed_dim.to_string());
    let widths: Vec<String> = cfg.layer_specs.iter().map(|s| s.width.to_string()).collect();
    c.set_meta("layer_widths", widths.join(","));
    model.for_each_param(&mut |name, view| {
        c.insert(name, &view.to_owned());
    });
    c.save(path)
}

pub fn load_checkpoint<A: Real>(path: impl AsRef<Path>) -> Result<Denoiser<A>> {
    let c = Container::load(path)?;
    let kind = c.require_meta("kind")?;
    if kind != CKPT_KIND {
        return Err(Error::data(format!(
            "expected a {CKPT_KIND} checkpoint, found kind {kind:?}"
        )));
    }
    let num = |key: &str| -> Result<usize> {
        c.require_meta(key)?
            .parse::<usize>()
            .map_err(|_| Error::Container(format!("meta key {key:?} is not an integer")))
    };
    let widths: Vec<usize> = c
        .require_meta("layer_widths")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Container("bad layer_widths meta".into()))
        })
        .collect::<Result<_>>()?;
    let mut config = DenoiserConfig::with_dims(
        num("frames")?,
        num("channels")?,
        num("height")?,
        num("width")?,
        num("base_width")?,
        num("embed_dim")?,
        num("time_embed_dim")?,
    );
    if widths.len() != LAYER_COUNT {
        return Err(Error::Container("bad layer_widths meta".into()));
    }
    for (spec, w) in config.layer_specs.iter_mut().zip(&widths) {
        spec.width = *w;
    }
    config.validate()?;

    let mut model = Denoiser::<A>::zeros(config);
    let mut problems = Vec::new();
    let mut loaded = 0usize;
    model.for_each_param_mut(&mut |name, mut view| match c.get::<A>(name) {
        Ok(arr) if arr.shape() == view.shape() => {
            view.assign(&arr);
            loaded += 1;
        }
        Ok(arr) => problems.push(format!(
            "array {name:?} has shape {:?}, expected {:?}",
            arr.shape(),
            view.shape()
        )),
        Err(e) => problems.push(e.to_string()),
    });
    if !problems.is_empty() {
        return Err(Error::Container(problems.join("; ")));
    }
    if loaded != c.arrays.len() {
        return Err(Error::Container(format!(
            "checkpoint holds {} arrays, model expects {loaded}",
            c.arrays.len()
        )));
    }
    Ok(model)
}

/// Overwrites every parameter with seeded Gaussian values, including the
/// zero-initialized output projections. Tests need this: with those
/// projections at zero, most gradient paths and prompt influence vanish.
#[cfg(test)]
pub(crate) fn randomize_for_tests<A: Real>(model: &mut Denoiser<A>, seed: u64) {
    model.for_each_param_mut(&mut |name, mut view| {
        let std = if view.ndim() >= 2 {
            1.0 / (view.shape()[0] as f64).sqrt()
        } else {
            0.05
        };
        let mut rng = crate::rng::derive_rng(seed, &["randomize", name]);
        for v in view.iter_mut() {
            *v = A::real(rng.sample::<f64, _>(StandardNormal) * std);
        }
    });
}

#[cfg(test)]
mod tests;
