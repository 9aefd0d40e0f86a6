use super::*;
use crate::data::{embed_prompt, Prompt};
use crate::lora::{init_adapter, ModuleKind};
use crate::rng::normal_array;
use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny_config() -> DenoiserConfig {
    DenoiserConfig::with_dims(3, 2, 8, 8, 8, 8, 8)
}

/// Like tiny_config but with wider middle layers, so layers 3 and 5 carry
/// residual skip projections.
fn tiny_config_mixed_widths() -> DenoiserConfig {
    let mut cfg = tiny_config();
    cfg.layer_specs[3].width = 12;
    cfg.layer_specs[4].width = 12;
    cfg
}

fn randomize<A: Real>(model: &mut Denoiser<A>, seed: u64) {
    randomize_for_tests(model, seed);
}

fn test_routing<A: Real>(cfg: &DenoiserConfig) -> PromptRouting<A> {
    let p = Prompt::parse("a sks1 circle mot2").unwrap();
    PromptRouting::uniform(&embed_prompt(&p, cfg.embed_dim))
}

fn test_input<A: Real>(cfg: &DenoiserConfig, seed: u64) -> Array4<A> {
    let mut rng = derive_rng(seed, &["z"]);
    normal_array(&mut rng, (cfg.frames, cfg.channels, cfg.height, cfg.width))
}

fn param_bits<A: Real>(model: &Denoiser<A>) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    model.for_each_param(&mut |name, view| {
        out.push((
            name.to_string(),
            view.iter().map(|v| v.as_f64().to_bits()).collect(),
        ));
    });
    out
}

#[test]
fn build_is_deterministic() {
    let cfg = tiny_config();
    let a: Denoiser<f32> = build_denoiser(&cfg, 99).unwrap();
    let b: Denoiser<f32> = build_denoiser(&cfg, 99).unwrap();
    assert_eq!(param_bits(&a), param_bits(&b));
    let c: Denoiser<f32> = build_denoiser(&cfg, 100).unwrap();
    assert_ne!(param_bits(&a), param_bits(&c));
}

#[test]
fn default_config_structure() {
    let model: Denoiser<f32> = build_denoiser(&DenoiserConfig::default(), 1).unwrap();
    assert_eq!(model.layers.len(), 9);
    for (i, layer) in model.layers.iter().enumerate() {
        assert_eq!(
            layer.spatial.cross_attn.is_some(),
            CROSS_ATTN_LAYERS.contains(&i),
            "cross-attention at layer {i}"
        );
        assert_eq!(layer.temporal.is_some(), i != 4, "temporal at layer {i}");
        assert!(layer.spatial.self_attn.wo.iter().all(|&v| v == 0.0));
    }
    assert!(model.proj_out_w.iter().all(|&v| v == 0.0));
    // Zero head means the untrained model predicts exactly zero noise.
    let routing = test_routing::<f32>(&model.config);
    let z = test_input::<f32>(&model.config, 5);
    let eps = model
        .forward(&z, 10, &routing, &[], &ForwardOpts::default())
        .unwrap();
    assert!(eps.iter().all(|&v| v == 0.0));
}

#[test]
fn config_validation_rejects_inconsistencies() {
    let mut cfg = tiny_config();
    cfg.layer_specs.pop();
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config();
    cfg.layer_specs[3].has_cross_attn = true;
    assert!(cfg.validate().unwrap_err().to_string().contains("layer specs"));

    let mut cfg = tiny_config();
    cfg.layer_specs[4].has_temporal = true;
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config();
    cfg.layer_specs[2].width = 16; // breaks the symmetry with layer 5
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config();
    cfg.layer_specs[1].index = 2;
    assert!(cfg.validate().is_err());

    assert!(tiny_config_mixed_widths().validate().is_ok());
}

#[test]
fn forward_is_pure_and_shape_preserving() {
    let cfg = tiny_config();
    let mut model: Denoiser<f32> = build_denoiser(&cfg, 3).unwrap();
    randomize(&mut model, 17);
    let routing = test_routing::<f32>(&cfg);
    let z = test_input::<f32>(&cfg, 6);
    let a = model.forward(&z, 7, &routing, &[], &ForwardOpts::default()).unwrap();
    let b = model.forward(&z, 7, &routing, &[], &ForwardOpts::default()).unwrap();
    assert_eq!(a.dim(), z.dim());
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn uniform_routing_matches_manual_map() {
    let cfg = tiny_config();
    let mut model: Denoiser<f32> = build_denoiser(&cfg, 3).unwrap();
    randomize(&mut model, 18);
    let p = Prompt::parse("a sks0 square").unwrap();
    let embed = embed_prompt::<f32>(&p, cfg.embed_dim);
    let uniform = PromptRouting::uniform(&embed);
    let mut manual = PromptRouting {
        per_layer: IndexMap::new(),
    };
    for &i in CROSS_ATTN_LAYERS.iter().rev() {
        manual.set(i, embed.clone());
    }
    let z = test_input::<f32>(&cfg, 8);
    let a = model.forward(&z, 3, &uniform, &[], &ForwardOpts::default()).unwrap();
    let b = model.forward(&z, 3, &manual, &[], &ForwardOpts::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn routing_validation_errors() {
    let cfg = tiny_config();
    let model: Denoiser<f32> = build_denoiser(&cfg, 3).unwrap();
    let p = Prompt::null();
    let embed = embed_prompt::<f32>(&p, cfg.embed_dim);
    let z = test_input::<f32>(&cfg, 9);

    let mut missing = PromptRouting::uniform(&embed);
    missing.per_layer.shift_remove(&6);
    let err = model
        .forward(&z, 1, &missing, &[], &ForwardOpts::default())
        .unwrap_err();
    assert!(err.to_string().contains("layer 6"), "{err}");

    let mut extra = PromptRouting::uniform(&embed);
    extra.set(3, embed.clone());
    assert!(model.forward(&z, 1, &extra, &[], &ForwardOpts::default()).is_err());

    let wide = PromptRouting::uniform(&embed_prompt::<f32>(&p, cfg.embed_dim + 2));
    assert!(model.forward(&z, 1, &wide, &[], &ForwardOpts::default()).is_err());
}

#[test]
fn adapter_target_must_exist() {
    let cfg = tiny_config();
    let model: Denoiser<f32> = build_denoiser(&cfg, 3).unwrap();
    let adapter = crate::lora::LoraAdapter::<f32> {
        kind: crate::lora::AdapterKind::Motion,
        concept_id: String::new(),
        rank: 2,
        scale: 1.0,
        entries: vec![crate::lora::LoraEntry {
            target: crate::lora::LoraTarget {
                layer: 4,
                module_kind: ModuleKind::Temporal,
                matrix: "attn.wq".into(),
            },
            a: ndarray::Array2::zeros((8, 2)),
            b: ndarray::Array2::zeros((2, 8)),
        }],
    };
    let routing = test_routing::<f32>(&cfg);
    let z = test_input::<f32>(&cfg, 10);
    let err = model
        .forward(&z, 1, &routing, &[&adapter], &ForwardOpts::default())
        .unwrap_err();
    assert!(err.to_string().contains("not found"), "{err}");
}

#[test]
fn temporal_identity_makes_frames_independent() {
    let cfg = tiny_config();
    let mut model: Denoiser<f32> = build_denoiser(&cfg, 4).unwrap();
    randomize(&mut model, 19);
    let routing = test_routing::<f32>(&cfg);
    let z = test_input::<f32>(&cfg, 11);
    let opts = ForwardOpts {
        temporal_identity: true,
    };
    let base = model.forward(&z, 5, &routing, &[], &opts).unwrap();

    let perm = [2usize, 0, 1];
    let mut z_perm = z.clone();
    let mut want = base.clone();
    for (dst, &src) in perm.iter().enumerate() {
        z_perm.index_axis_mut(Axis(0), dst).assign(&z.index_axis(Axis(0), src));
        want.index_axis_mut(Axis(0), dst).assign(&base.index_axis(Axis(0), src));
    }
    let got = model.forward(&z_perm, 5, &routing, &[], &opts).unwrap();
    assert_eq!(got, want);

    // With temporal attention active, frames interact and the equality breaks.
    let full = model
        .forward(&z_perm, 5, &routing, &[], &ForwardOpts::default())
        .unwrap();
    assert_ne!(full, want);
}

fn mean_sq_loss(model: &Denoiser<f64>, z: &Array4<f64>, t: usize, routing: &PromptRouting<f64>) -> f64 {
    let eps = model.forward(z, t, routing, &[], &ForwardOpts::default()).unwrap();
    eps.iter().map(|v| v * v).sum::<f64>() / eps.len() as f64
}

fn set_entry(model: &mut Denoiser<f64>, name: &str, k: usize, value: f64) {
    let hit = model.modify_param(name, |v| {
        *v.as_slice_mut().expect("params are contiguous").get_mut(k).unwrap() = value;
    });
    assert!(hit, "parameter {name} not found");
}

#[test]
fn gradients_match_finite_differences_in_every_module_kind() {
    const STEP: f64 = 1e-4;
    let cfg = tiny_config_mixed_widths();
    let mut model: Denoiser<f64> = build_denoiser(&cfg, 12).unwrap();
    randomize(&mut model, 21);
    let routing = test_routing::<f64>(&cfg);
    let z = test_input::<f64>(&cfg, 13);
    let t = 42;

    let (eps, cache) = model
        .forward_cached(&z, t, &routing, &[], &ForwardOpts::default())
        .unwrap();
    let d_eps = eps.mapv(|v| 2.0 * v / eps.len() as f64);
    let grads = model.backward(&cache, &d_eps, &[], GradScope::AllBase).unwrap();

    let mut names = vec!["proj_in.w".to_string(), "proj_out.w".to_string()];
    for (i, layer) in model.layers.iter().enumerate() {
        names.push(format!("layer{i}.spatial.res.w1"));
        names.push(format!("layer{i}.spatial.res.time_w"));
        names.push(format!("layer{i}.spatial.res.b1"));
        names.push(format!("layer{i}.spatial.self_attn.wq"));
        if layer.spatial.res.skip_w.is_some() {
            names.push(format!("layer{i}.spatial.res.skip_w"));
        }
        if layer.spatial.cross_attn.is_some() {
            names.push(format!("layer{i}.spatial.cross_attn.wk"));
        }
        if layer.temporal.is_some() {
            names.push(format!("layer{i}.temporal.attn.wv"));
        }
    }

    for name in &names {
        let g = grads
            .get(name.as_str())
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        let flat = g.as_slice().unwrap();
        let orig = model.clone_param(name).unwrap();
        let base = orig.as_slice().unwrap();
        for &k in &[0usize, flat.len() / 2] {
            set_entry(&mut model, name, k, base[k] + STEP);
            let lp = mean_sq_loss(&model, &z, t, &routing);
            set_entry(&mut model, name, k, base[k] - STEP);
            let lm = mean_sq_loss(&model, &z, t, &routing);
            set_entry(&mut model, name, k, base[k]);
            let numeric = (lp - lm) / (2.0 * STEP);
            let analytic = flat[k];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "{name}[{k}]: analytic {analytic}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    const STEP: f64 = 1e-4;
    let cfg = tiny_config();
    let mut model: Denoiser<f64> = build_denoiser(&cfg, 14).unwrap();
    randomize(&mut model, 22);
    let mut appearance = init_adapter(&model, &[2, 6], ModuleKind::Spatial, 2, 31).unwrap();
    let mut motion = init_adapter(&model, &[2, 5], ModuleKind::Temporal, 2, 32).unwrap();
    for (s, ad) in [(0u64, &mut appearance), (1, &mut motion)] {
        for (e, entry) in ad.entries.iter_mut().enumerate() {
            let mut rng = derive_rng(77 + s, &["ab", &e.to_string()]);
            for v in entry.a.iter_mut().chain(entry.b.iter_mut()) {
                *v = rng.sample::<f64, _>(StandardNormal) * 0.1;
            }
        }
    }
    let routing = test_routing::<f64>(&cfg);
    let z = test_input::<f64>(&cfg, 15);
    let t = 9;

    let loss = |model: &Denoiser<f64>, ads: &[&crate::lora::LoraAdapter<f64>]| {
        let eps = model.forward(&z, t, &routing, ads, &ForwardOpts::default()).unwrap();
        eps.iter().map(|v| v * v).sum::<f64>() / eps.len() as f64
    };

    let (eps, cache) = model
        .forward_cached(&z, t, &routing, &[&appearance, &motion], &ForwardOpts::default())
        .unwrap();
    let d_eps = eps.mapv(|v| 2.0 * v / eps.len() as f64);
    let grads = model
        .backward(&cache, &d_eps, &[&appearance, &motion], GradScope::Adapters)
        .unwrap();
    assert!(grads.keys().all(|k| k.starts_with("adapter")));

    // A couple of entries per adapter, both factors.
    for (slot, entry_idx, factor) in [(0usize, 0usize, "a"), (0, 5, "b"), (1, 2, "a"), (1, 7, "b")] {
        let (target, analytic) = {
            let ad = if slot == 0 { &appearance } else { &motion };
            let entry = &ad.entries[entry_idx];
            let key = format!("adapter{slot}.{}.{factor}", entry.target.name());
            let g = grads.get(&key).unwrap_or_else(|| panic!("missing {key}"));
            (entry.target.name(), g.as_slice().unwrap()[1])
        };
        let read = |ad: &crate::lora::LoraAdapter<f64>| {
            let entry = &ad.entries[entry_idx];
            if factor == "a" { entry.a.as_slice().unwrap()[1] } else { entry.b.as_slice().unwrap()[1] }
        };
        let write = |ad: &mut crate::lora::LoraAdapter<f64>, v: f64| {
            let entry = &mut ad.entries[entry_idx];
            if factor == "a" {
                entry.a.as_slice_mut().unwrap()[1] = v;
            } else {
                entry.b.as_slice_mut().unwrap()[1] = v;
            }
        };
        let base = read(if slot == 0 { &appearance } else { &motion });
        write(if slot == 0 { &mut appearance } else { &mut motion }, base + STEP);
        let lp = loss(&model, &[&appearance, &motion]);
        write(if slot == 0 { &mut appearance } else { &mut motion }, base - STEP);
        let lm = loss(&model, &[&appearance, &motion]);
        write(if slot == 0 { &mut appearance } else { &mut motion }, base);
        let numeric = (lp - lm) / (2.0 * STEP);
        let denom = numeric.abs().max(analytic.abs()).max(1e-6);
        assert!(
            (numeric - analytic).abs() / denom < 1e-4,
            "{target}.{factor}: analytic {analytic}, numeric {numeric}"
        );
    }
}

#[test]
fn base_scope_ignores_adapters_and_vice_versa() {
    let cfg = tiny_config();
    let mut model: Denoiser<f64> = build_denoiser(&cfg, 16).unwrap();
    randomize(&mut model, 23);
    let adapter = init_adapter(&model, &[2], ModuleKind::Spatial, 2, 41).unwrap();
    let routing = test_routing::<f64>(&cfg);
    let z = test_input::<f64>(&cfg, 17);
    let (eps, cache) = model
        .forward_cached(&z, 3, &routing, &[&adapter], &ForwardOpts::default())
        .unwrap();
    let d_eps = eps.mapv(|v| v / eps.len() as f64);
    let base_grads = model
        .backward(&cache, &d_eps, &[&adapter], GradScope::AllBase)
        .unwrap();
    assert!(base_grads.keys().all(|k| !k.starts_with("adapter")));
    assert!(base_grads.contains_key("layer2.spatial.self_attn.wq"));
    let adapter_grads = model
        .backward(&cache, &d_eps, &[&adapter], GradScope::Adapters)
        .unwrap();
    assert!(!adapter_grads.is_empty());
    assert!(adapter_grads.keys().all(|k| k.starts_with("adapter0.")));
}

#[test]
fn param_count_matches_shape_arithmetic() {
    let cfg = DenoiserConfig::default();
    let model: Denoiser<f32> = build_denoiser(&cfg, 2).unwrap();
    let (c, w, d, td) = (3usize, 32usize, 32usize, 32usize);
    let res = w * w + w + w * w + w + td * w + w; // w1+b1+w2+b2+time_w+time_b (no skips: equal widths)
    let attn = 4 * w * w;
    let cross = 2 * w * w + 2 * d * w;
    let expected = (c * w + w)              // stem
        + 9 * (res + attn)                  // residual + spatial self-attention
        + 7 * cross                         // cross-attention at 7 layers
        + 8 * attn                          // temporal attention at 8 layers
        + (w * c + c); // head
    assert_eq!(param_count(&model, None), expected);
}

#[test]
fn param_count_for_adapters() {
    let cfg = DenoiserConfig::default();
    let model: Denoiser<f32> = build_denoiser(&cfg, 2).unwrap();
    assert_eq!(param_count(&model, Some(&[])), 0);

    let one = init_adapter(&model, &[2], ModuleKind::Temporal, 4, 5).unwrap();
    // Four 32x32 matrices, each adding rank*(m+n) = 4*64.
    assert_eq!(param_count(&model, Some(&[&one])), 4 * 4 * 64);

    let ours_s = init_adapter(&model, &[2, 6], ModuleKind::Spatial, 4, 5).unwrap();
    let ours_t = init_adapter(&model, &[2, 5], ModuleKind::Temporal, 4, 5).unwrap();
    let all_s = init_adapter(&model, &[0, 1, 2, 3, 4, 5, 6, 7, 8], ModuleKind::Spatial, 4, 5).unwrap();
    let all_t = init_adapter(&model, &[0, 1, 2, 3, 5, 6, 7, 8], ModuleKind::Temporal, 4, 5).unwrap();
    let ours = param_count(&model, Some(&[&ours_s, &ours_t]));
    let all = param_count(&model, Some(&[&all_s, &all_t]));
    assert!(ours > 0 && all > ours);
    assert!((ours as f64) / (all as f64) < 0.6);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cttt");
    let cfg = tiny_config_mixed_widths();
    let mut model: Denoiser<f32> = build_denoiser(&cfg, 123).unwrap();
    randomize(&mut model, 99);
    save_checkpoint(&model, &path).unwrap();
    let loaded: Denoiser<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(param_bits(&model), param_bits(&loaded));

    // Requesting the wrong element type is an error, not a silent cast.
    assert!(load_checkpoint::<f64>(&path).is_err());

    // A non-checkpoint container is rejected by kind.
    let mut c = Container::new();
    c.set_meta("kind", "something-else");
    let other = dir.path().join("other.cttt");
    c.save(&other).unwrap();
    assert!(load_checkpoint::<f32>(&other).is_err());
}

/// Manual probe for sizing training budgets: `cargo test -p customttt --release
/// -- --ignored --nocapture timing_probe`.
#[test]
#[ignore]
fn timing_probe() {
    let cfg = DenoiserConfig::default();
    let mut model = build_denoiser::<f32>(&cfg, 1).unwrap();
    randomize(&mut model, 2);
    let routing = PromptRouting::uniform(&crate::data::embed_prompt(
        &crate::data::Prompt::parse("a sks1 circle mot2").unwrap(),
        cfg.embed_dim,
    ));
    let mut rng = derive_rng(3, &["z"]);
    let z: Array4<f32> = normal_array(&mut rng, (cfg.frames, cfg.channels, cfg.height, cfg.width));
    let opts = ForwardOpts::default();

    let t0 = std::time::Instant::now();
    let mut sink = 0f32;
    for _ in 0..20 {
        let eps = model.forward(&z, 10, &routing, &[], &opts).unwrap();
        sink += eps[[0, 0, 0, 0]];
    }
    let fwd = t0.elapsed().as_secs_f64() / 20.0;

    let t1 = std::time::Instant::now();
    for _ in 0..10 {
        let (eps, cache) = model.forward_cached(&z, 10, &routing, &[], &opts).unwrap();
        let d_eps = eps.mapv(|v| 2.0 * v);
        let g = model
            .backward(&cache, &d_eps, &[], GradScope::AllBase)
            .unwrap();
        sink += g.len() as f32;
    }
    let fwd_bwd = t1.elapsed().as_secs_f64() / 10.0;
    println!("forward {:.1} ms, forward+backward {:.1} ms (sink {sink})", fwd * 1e3, fwd_bwd * 1e3);
}

#[test]
fn null_prompt_leaves_cross_attention_inert() {
    let cfg = tiny_config();
    let mut model = build_denoiser::<f64>(&cfg, 71).unwrap();
    randomize(&mut model, 72);
    let null_routing: PromptRouting<f64> =
        PromptRouting::uniform(&embed_prompt(&Prompt::null(), cfg.embed_dim));
    let z = test_input::<f64>(&cfg, 73);
    let opts = ForwardOpts::default();
    let (eps, cache) = model.forward_cached(&z, 3, &null_routing, &[], &opts).unwrap();

    // Scrambling every cross-attention weight cannot change the output.
    let mut scrambled = model.clone();
    for name in scrambled.param_names() {
        if name.contains("cross_attn") {
            assert!(scrambled.modify_param(&name, |v| v.mapv_inplace(|x| x + 0.37)));
        }
    }
    let eps2 = scrambled.forward(&z, 3, &null_routing, &[], &opts).unwrap();
    assert_eq!(eps, eps2);

    // And no gradient reaches them, while other modules still get signal.
    let d_eps = eps.mapv(|v| 2.0 * v);
    let grads = model.backward(&cache, &d_eps, &[], GradScope::AllBase).unwrap();
    for (name, g) in grads.iter() {
        if name.contains("cross_attn") {
            assert!(g.iter().all(|&v| v == 0.0), "{name} has nonzero grad");
        }
    }
    let sa = &grads["layer0.spatial.self_attn.wq"];
    assert!(sa.iter().any(|&v| v != 0.0));
}
