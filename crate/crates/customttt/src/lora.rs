//! Low-rank adapters over the denoiser's attention projections.
//!
//! An adapter contributes `scale * A * B` to each target matrix. Targets are
//! the dotted weight names used by the model; an appearance adapter covers
//! the spatial self- and cross-attention projections of its layers, a motion
//! adapter the temporal attention projections. `B` starts at zero, so a
//! freshly initialized adapter is an exact no-op.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::real::Real;
use crate::rng::derive_rng;

/// Std of the seeded Gaussian used for the A factor.
const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    Spatial,
    Temporal,
}

impl ModuleKind {
    pub fn path(self) -> &'static str {
        match self {
            ModuleKind::Spatial => "spatial",
            ModuleKind::Temporal => "temporal",
        }
    }

    pub fn from_path(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(ModuleKind::Spatial),
            "temporal" => Ok(ModuleKind::Temporal),
            other => Err(Error::data(format!("unknown module kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Appearance,
    Motion,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Appearance => "appearance",
            AdapterKind::Motion => "motion",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(AdapterKind::Appearance),
            "motion" => Ok(AdapterKind::Motion),
            other => Err(Error::data(format!("unknown adapter kind {other:?}"))),
        }
    }

    pub fn module_kind(self) -> ModuleKind {
        match self {
            AdapterKind::Appearance => ModuleKind::Spatial,
            AdapterKind::Motion => ModuleKind::Temporal,
        }
    }
}

/// Address of one adapted matrix: layer, module kind, and the matrix path
/// within the module (e.g. `self_attn.wq`, `attn.wo`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LoraTarget {
    pub layer: usize,
    pub module_kind: ModuleKind,
    pub matrix: String,
}

impl LoraTarget {
    /// The full weight name this target resolves to.
    pub fn name(&self) -> String {
        format!("layer{}.{}.{}", self.layer, self.module_kind.path(), self.matrix)
    }

    pub fn parse(name: &str) -> Result<Self> {
        fn bad(name: &str) -> Error {
            Error::data(format!("bad adapter target {name:?}"))
        }
        let mut parts = name.splitn(3, '.');
        let layer_part = parts.next().ok_or_else(|| bad(name))?;
        let kind_part = parts.next().ok_or_else(|| bad(name))?;
        let matrix = parts.next().ok_or_else(|| bad(name))?.to_string();
        let layer: usize = layer_part
            .strip_prefix("layer")
            .ok_or_else(|| bad(name))?
            .parse()
            .map_err(|_| bad(name))?;
        let module_kind = ModuleKind::from_path(kind_part)?;
        let valid_tail = match module_kind {
            ModuleKind::Spatial => {
                matrix.strip_prefix("self_attn.").or_else(|| matrix.strip_prefix("cross_attn."))
            }
            ModuleKind::Temporal => matrix.strip_prefix("attn."),
        };
        match valid_tail {
            Some("wq") | Some("wk") | Some("wv") | Some("wo") => {}
            _ => return Err(bad(name)),
        }
        Ok(Self {
            layer,
            module_kind,
            matrix,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LoraEntry<A: Real> {
    pub target: LoraTarget,
    pub a: Array2<A>,
    pub b: Array2<A>,
}

#[derive(Clone, Debug)]
pub struct LoraAdapter<A: Real> {
    pub kind: AdapterKind,
    pub concept_id: String,
    pub rank: usize,
    pub scale: f64,
    pub entries: Vec<LoraEntry<A>>,
}

/// Creates a rank-`rank` adapter over every attention projection of
/// `module_kind` in `layers`. A is seeded Gaussian (std 0.02) per target,
/// B is zero, so the initial delta vanishes.
pub fn init_adapter<A: Real>(
    model: &Denoiser<A>,
    layers: &[usize],
    module_kind: ModuleKind,
    rank: usize,
    seed: u64,
) -> Result<LoraAdapter<A>> {
    if rank == 0 {
        return Err(Error::config("adapter rank must be at least 1"));
    }
    let specs = &model.config.layer_specs;
    let mut entries = Vec::new();
    for &layer in layers {
        if layer >= specs.len() {
            return Err(Error::config(format!("adapter layer {layer} out of range")));
        }
        let blocks: Vec<&str> = match module_kind {
            ModuleKind::Spatial => {
                if specs[layer].has_cross_attn {
                    vec!["self_attn", "cross_attn"]
                } else {
                    vec!["self_attn"]
                }
            }
            ModuleKind::Temporal => {
                if !specs[layer].has_temporal {
                    return Err(Error::config(format!(
                        "layer {layer} has no temporal module to adapt"
                    )));
                }
                vec!["attn"]
            }
        };
        for block in blocks {
            for matrix in ["wq", "wk", "wv", "wo"] {
                let target = LoraTarget {
                    layer,
                    module_kind,
                    matrix: format!("{block}.{matrix}"),
                };
                let name = target.name();
                let base = model
                    .clone_param(&name)
                    .ok_or_else(|| Error::config(format!("adapter target not found in model: {name}")))?;
                let (m, n) = (base.shape()[0], base.shape()[1]);
                let mut rng = derive_rng(seed, &["lora", &name, "a"]);
                let mut a = Array2::<A>::zeros((m, rank));
                for v in a.iter_mut() {
                    *v = A::real(rng.sample::<f64, _>(StandardNormal) * A_INIT_STD);
                }
                entries.push(LoraEntry {
                    target,
                    a,
                    b: Array2::zeros((rank, n)),
                });
            }
        }
    }
    Ok(LoraAdapter {
        kind: match module_kind {
            ModuleKind::Spatial => AdapterKind::Appearance,
            ModuleKind::Temporal => AdapterKind::Motion,
        },
        concept_id: String::new(),
        rank,
        scale: 1.0,
        entries,
    })
}

/// `W0 + scale * A * B`.
pub fn apply<A: Real>(
    w0: &Array2<A>,
    a: &Array2<A>,
    b: &Array2<A>,
    scale: f64,
) -> Result<Array2<A>> {
    let (m0, n0) = w0.dim();
    let (ma, ra) = a.dim();
    let (rb, nb) = b.dim();
    if ma != m0 || nb != n0 || ra != rb {
        return Err(Error::shape(format!(
            "adapter factors A {ma}x{ra}, B {rb}x{nb} incompatible with base {m0}x{n0}"
        )));
    }
    let mut w = w0.clone();
    w.scaled_add(A::real(scale), &a.dot(b));
    Ok(w)
}

/// Returns a copy of the model with every adapter delta folded into its
/// target matrix. The input model is untouched.
pub fn merge_into<A: Real>(
    model: &Denoiser<A>,
    adapters: &[&LoraAdapter<A>],
) -> Result<Denoiser<A>> {
    let mut seen: HashSet<(AdapterKind, String)> = HashSet::new();
    for adapter in adapters {
        for entry in &adapter.entries {
            if !seen.insert((adapter.kind, entry.target.name())) {
                return Err(Error::config(format!(
                    "two {} adapters target the same matrix {}",
                    adapter.kind.name(),
                    entry.target.name()
                )));
            }
        }
    }
    let mut merged = model.clone();
    for adapter in adapters {
        for entry in &adapter.entries {
            let name = entry.target.name();
            let base = merged
                .clone_param(&name)
                .ok_or_else(|| Error::config(format!("adapter target not found in model: {name}")))?
                .into_dimensionality::<Ix2>()
                .map_err(|_| Error::shape(format!("target {name} is not a matrix")))?;
            let updated = apply(&base, &entry.a, &entry.b, adapter.scale)?.into_dyn();
            merged.modify_param(&name, |view| view.assign(&updated));
        }
    }
    Ok(merged)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const ADAPTER_KIND_META: &str = "lora-adapter";

pub fn save_adapter<A: Real>(adapter: &LoraAdapter<A>, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new();
    c.set_meta("kind", ADAPTER_KIND_META);
    c.set_meta("dtype", A::DTYPE.name());
    c.set_meta("adapter_kind", adapter.kind.name());
    c.set_meta("concept_id", &adapter.concept_id);
    c.set_meta("rank", adapter.rank.to_string());
    c.set_meta("scale", format!("{:?}", adapter.scale));
    let targets: Vec<String> = adapter.entries.iter().map(|e| e.target.name()).collect();
    c.set_meta("targets", targets.join(";"));
    for entry in &adapter.entries {
        let name = entry.target.name();
        c.insert(&format!("{name}.a"), &entry.a);
        c.insert(&format!("{name}.b"), &entry.b);
    }
    c.save(path)
}

pub fn load_adapter<A: Real>(path: impl AsRef<Path>) -> Result<LoraAdapter<A>> {
    let c = Container::load(path)?;
    let kind = c.require_meta("kind")?;
    if kind != ADAPTER_KIND_META {
        return Err(Error::data(format!(
            "expected a {ADAPTER_KIND_META} container, found kind {kind:?}"
        )));
    }
    let adapter_kind = AdapterKind::from_name(c.require_meta("adapter_kind")?)?;
    let concept_id = c.require_meta("concept_id")?.to_string();
    let rank: usize = c
        .require_meta("rank")?
        .parse()
        .map_err(|_| Error::Container("rank meta is not an integer".into()))?;
    let scale: f64 = c
        .require_meta("scale")?
        .parse()
        .map_err(|_| Error::Container("scale meta is not a number".into()))?;
    let mut entries = Vec::new();
    for target_name in c.require_meta("targets")?.split(';').filter(|s| !s.is_empty()) {
        let target = LoraTarget::parse(target_name)?;
        let a = c
            .get::<A>(&format!("{target_name}.a"))?
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Container(format!("factor {target_name}.a is not a matrix")))?;
        let b = c
            .get::<A>(&format!("{target_name}.b"))?
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Container(format!("factor {target_name}.b is not a matrix")))?;
        if a.ncols() != rank || b.nrows() != rank {
            return Err(Error::Container(format!(
                "factors of {target_name} disagree with manifest rank {rank}: A {:?}, B {:?}",
                a.dim(),
                b.dim()
            )));
        }
        entries.push(LoraEntry { target, a, b });
    }
    if entries.len() * 2 != c.arrays.len() {
        return Err(Error::Container(format!(
            "adapter container holds {} arrays, target list implies {}",
            c.arrays.len(),
            entries.len() * 2
        )));
    }
    Ok(LoraAdapter {
        kind: adapter_kind,
        concept_id,
        rank,
        scale,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{embed_prompt, Prompt};
    use crate::model::{build_denoiser, DenoiserConfig, ForwardOpts, PromptRouting};
    use crate::rng::normal_array;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig::with_dims(3, 2, 8, 8, 8, 8, 8)
    }

    fn randomize<A: Real>(model: &mut Denoiser<A>, seed: u64) {
        crate::model::randomize_for_tests(model, seed);
    }

    fn randomize_factors<A: Real>(adapter: &mut LoraAdapter<A>, seed: u64) {
        for (e, entry) in adapter.entries.iter_mut().enumerate() {
            let mut rng = derive_rng(seed, &["factors", &entry.target.name(), &e.to_string()]);
            for v in entry.a.iter_mut().chain(entry.b.iter_mut()) {
                *v = A::real(rng.sample::<f64, _>(StandardNormal) * 0.1);
            }
        }
    }

    fn routing<A: Real>(cfg: &DenoiserConfig) -> PromptRouting<A> {
        let p = Prompt::parse("a sks2 triangle mot1").unwrap();
        PromptRouting::uniform(&embed_prompt(&p, cfg.embed_dim))
    }

    fn input<A: Real>(cfg: &DenoiserConfig, seed: u64) -> Array4<A> {
        let mut rng = derive_rng(seed, &["z"]);
        normal_array(&mut rng, (cfg.frames, cfg.channels, cfg.height, cfg.width))
    }

    fn param_bits<A: Real>(model: &Denoiser<A>) -> Vec<u64> {
        let mut out = Vec::new();
        model.for_each_param(&mut |_, view| {
            out.extend(view.iter().map(|v| v.as_f64().to_bits()));
        });
        out
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let cfg = tiny_config();
        let mut model = build_denoiser::<f32>(&cfg, 1).unwrap();
        randomize(&mut model, 2);
        let appearance = init_adapter(&model, &[2, 6], ModuleKind::Spatial, 4, 3).unwrap();
        let motion = init_adapter(&model, &[2, 5], ModuleKind::Temporal, 4, 4).unwrap();
        let r = routing::<f32>(&cfg);
        let z = input::<f32>(&cfg, 5);
        let base = model.forward(&z, 6, &r, &[], &ForwardOpts::default()).unwrap();
        let with = model
            .forward(&z, 6, &r, &[&appearance, &motion], &ForwardOpts::default())
            .unwrap();
        let diff = (&base - &with).iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn init_covers_expected_targets_with_expected_shapes() {
        let model = build_denoiser::<f32>(&DenoiserConfig::default(), 1).unwrap();
        let ad = init_adapter(&model, &[2, 6], ModuleKind::Spatial, 4, 9).unwrap();
        assert_eq!(ad.kind, AdapterKind::Appearance);
        assert_eq!(ad.rank, 4);
        // Both layers have cross-attention: 8 matrices each.
        assert_eq!(ad.entries.len(), 16);
        for entry in &ad.entries {
            assert_eq!(entry.a.dim(), (32, 4));
            assert_eq!(entry.b.dim(), (4, 32));
            assert!(entry.b.iter().all(|&v| v == 0.0));
            assert!(entry.a.iter().any(|&v| v != 0.0));
        }
        // Layer 3 has no cross-attention: only self-attention targets.
        let bare = init_adapter(&model, &[3], ModuleKind::Spatial, 2, 9).unwrap();
        assert_eq!(bare.entries.len(), 4);
        assert!(bare
            .entries
            .iter()
            .all(|e| e.target.matrix.starts_with("self_attn.")));

        let motion = init_adapter(&model, &[2, 5], ModuleKind::Temporal, 4, 9).unwrap();
        assert_eq!(motion.kind, AdapterKind::Motion);
        assert_eq!(motion.entries.len(), 8);
    }

    #[test]
    fn temporal_adapter_on_middle_layer_is_rejected() {
        let model = build_denoiser::<f32>(&DenoiserConfig::default(), 1).unwrap();
        let err = init_adapter(&model, &[4], ModuleKind::Temporal, 4, 9).unwrap_err();
        assert!(err.to_string().contains("no temporal module"), "{err}");
        assert!(init_adapter(&model, &[9], ModuleKind::Spatial, 4, 9).is_err());
        assert!(init_adapter(&model, &[2], ModuleKind::Spatial, 0, 9).is_err());
    }

    #[test]
    fn apply_boundary_cases_and_oracle() {
        let mut rng = derive_rng(11, &["apply"]);
        let w0: ndarray::Array2<f64> = normal_array(&mut rng, (8, 8));
        let a: ndarray::Array2<f64> = normal_array(&mut rng, (8, 2));
        let b: ndarray::Array2<f64> = normal_array(&mut rng, (2, 8));

        let zero_a = ndarray::Array2::<f64>::zeros((8, 2));
        assert_eq!(apply(&w0, &zero_a, &b, 1.0).unwrap(), w0);
        assert_eq!(apply(&w0, &a, &b, 0.0).unwrap(), w0);

        let got = apply(&w0, &a, &b, 0.7).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += a[[i, k]] * b[[k, j]];
                }
                let want = w0[[i, j]] + 0.7 * acc;
                assert!((got[[i, j]] - want).abs() < 1e-10);
            }
        }

        let bad_b = ndarray::Array2::<f64>::zeros((3, 8));
        assert!(apply(&w0, &a, &bad_b, 1.0).is_err());
    }

    #[test]
    fn merged_model_matches_dynamic_adapters() {
        let cfg = tiny_config();
        let mut model = build_denoiser::<f32>(&cfg, 21).unwrap();
        randomize(&mut model, 22);
        let mut appearance = init_adapter(&model, &[2, 6], ModuleKind::Spatial, 3, 23).unwrap();
        let mut motion = init_adapter(&model, &[2, 5], ModuleKind::Temporal, 3, 24).unwrap();
        randomize_factors(&mut appearance, 25);
        randomize_factors(&mut motion, 26);
        appearance.scale = 0.8;

        let before = param_bits(&model);
        let r = routing::<f32>(&cfg);
        let z = input::<f32>(&cfg, 27);
        let dynamic = model
            .forward(&z, 8, &r, &[&appearance, &motion], &ForwardOpts::default())
            .unwrap();
        assert_eq!(param_bits(&model), before, "forward must not mutate weights");

        let merged = merge_into(&model, &[&appearance, &motion]).unwrap();
        assert_eq!(param_bits(&model), before, "merge must not mutate the source");
        let from_merged = merged.forward(&z, 8, &r, &[], &ForwardOpts::default()).unwrap();
        let diff = (&dynamic - &from_merged)
            .iter()
            .fold(0f32, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "max diff {diff}");
    }

    #[test]
    fn merge_rules() {
        let cfg = tiny_config();
        let model = build_denoiser::<f32>(&cfg, 31).unwrap();
        let appearance = init_adapter(&model, &[2, 6], ModuleKind::Spatial, 2, 32).unwrap();
        let motion = init_adapter(&model, &[2, 5], ModuleKind::Temporal, 2, 33).unwrap();
        // Disjoint target sets merge cleanly.
        merge_into(&model, &[&appearance, &motion]).unwrap();

        // Two same-kind adapters overlapping on layer 2 collide.
        let other = init_adapter(&model, &[2], ModuleKind::Spatial, 2, 34).unwrap();
        let err = merge_into(&model, &[&appearance, &other]).unwrap_err();
        assert!(err.to_string().contains("same matrix"), "{err}");

        // Merging nothing returns a bit-identical copy.
        let merged = merge_into(&model, &[]).unwrap();
        assert_eq!(param_bits(&merged), param_bits(&model));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.cttt");
        let model = build_denoiser::<f32>(&DenoiserConfig::default(), 41).unwrap();
        let mut ad = init_adapter(&model, &[2, 6], ModuleKind::Spatial, 4, 42).unwrap();
        randomize_factors(&mut ad, 43);
        ad.concept_id = "sks3".to_string();
        ad.scale = 0.5;
        save_adapter(&ad, &path).unwrap();

        let loaded = load_adapter::<f32>(&path).unwrap();
        assert_eq!(loaded.kind, ad.kind);
        assert_eq!(loaded.concept_id, ad.concept_id);
        assert_eq!(loaded.rank, ad.rank);
        assert_eq!(loaded.scale, ad.scale);
        assert_eq!(loaded.entries.len(), ad.entries.len());
        for (x, y) in loaded.entries.iter().zip(&ad.entries) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.a, y.a);
            assert_eq!(x.b, y.b);
        }

        // The stored manifest pins the factor shapes.
        let c = Container::load(&path).unwrap();
        let first = ad.entries[0].target.name();
        assert_eq!(c.get::<f32>(&format!("{first}.a")).unwrap().shape(), &[32, 4]);
        assert_eq!(c.get::<f32>(&format!("{first}.b")).unwrap().shape(), &[4, 32]);

        // Truncation is reported as a corrupt container.
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.cttt");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_adapter::<f32>(&cut).unwrap_err();
        assert!(matches!(err, Error::Container(_)), "{err}");
    }

    /// Column-pivoted Gaussian elimination rank estimate, enough for small
    /// well-separated matrices.
    fn numeric_rank(m: &ndarray::Array2<f64>, tol: f64) -> usize {
        let mut a = m.clone();
        let (rows, cols) = a.dim();
        let mut rank = 0;
        let mut row = 0;
        for col in 0..cols {
            if row >= rows {
                break;
            }
            let mut pivot = row;
            for r in row..rows {
                if a[[r, col]].abs() > a[[pivot, col]].abs() {
                    pivot = r;
                }
            }
            if a[[pivot, col]].abs() <= tol {
                continue;
            }
            if pivot != row {
                for c in 0..cols {
                    let tmp = a[[row, c]];
                    a[[row, c]] = a[[pivot, c]];
                    a[[pivot, c]] = tmp;
                }
            }
            for r in (row + 1)..rows {
                let factor = a[[r, col]] / a[[row, col]];
                for c in col..cols {
                    a[[r, c]] -= factor * a[[row, c]];
                }
            }
            row += 1;
            rank += 1;
        }
        rank
    }

    #[test]
    fn merged_delta_has_rank_at_most_r() {
        let cfg = tiny_config();
        let model = build_denoiser::<f64>(&cfg, 51).unwrap();
        for rank in [1usize, 2, 3] {
            let mut ad = init_adapter(&model, &[2], ModuleKind::Temporal, rank, 52).unwrap();
            randomize_factors(&mut ad, 53 + rank as u64);
            let merged = merge_into(&model, &[&ad]).unwrap();
            let name = ad.entries[0].target.name();
            let w0 = model.clone_param(&name).unwrap();
            let w1 = merged.clone_param(&name).unwrap();
            let delta = (&w1 - &w0).into_dimensionality::<Ix2>().unwrap();
            let est = numeric_rank(&delta, 1e-8);
            assert!(est <= rank, "rank {est} > {rank}");
            assert!(est >= 1, "delta unexpectedly zero");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]
        #[test]
        fn dynamic_equals_merged_for_random_adapters(
            rank in 1usize..4,
            temporal in proptest::bool::ANY,
            layer in 0usize..9,
            seed in 0u64..1000,
        ) {
            let layer = if temporal && layer == 4 { 5 } else { layer };
            let cfg = tiny_config();
            let mut model = build_denoiser::<f64>(&cfg, 61).unwrap();
            randomize(&mut model, 62);
            let kind = if temporal { ModuleKind::Temporal } else { ModuleKind::Spatial };
            let mut ad = init_adapter(&model, &[layer], kind, rank, seed).unwrap();
            randomize_factors(&mut ad, seed ^ 0xabcd);
            let r = routing::<f64>(&cfg);
            let z = input::<f64>(&cfg, seed ^ 0x1234);
            let dynamic = model.forward(&z, 4, &r, &[&ad], &ForwardOpts::default()).unwrap();
            let merged = merge_into(&model, &[&ad]).unwrap();
            let from_merged = merged.forward(&z, 4, &r, &[], &ForwardOpts::default()).unwrap();
            let diff = (&dynamic - &from_merged).iter().fold(0f64, |m, v| m.max(v.abs()));
            prop_assert!(diff < 1e-10, "max diff {diff}");
        }
    }
}
