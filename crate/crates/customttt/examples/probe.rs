//! Scratch driver for sizing the full pipeline: stage timings, customization
//! efficacy margins, and test-time combination win rates at a given scale.
//!
//! Usage: probe <frames> <hw> <width> <pretrain_steps> <lora_steps> <seeds> [label]

use std::time::Instant;

use customttt::data::{
    embed_prompt, eval_prompts, make_corpus, render_reference_images, render_video,
    AppearanceConcept, HeldOut, MotionConcept, Prompt, Shape, Trajectory,
};
use customttt::eval::{appearance_similarity, motion_similarity, text_alignment};
use customttt::lora::LoraAdapter;
use customttt::model::{build_denoiser, DenoiserConfig, PromptRouting};
use customttt::scheduler::{ddim_sample, NoiseSchedule};
use customttt::train::{pretrain_base, train_appearance_lora, train_motion_lora, TrainConfig};
use customttt::ttt::TttConfig;
use customttt::Result;

type F = f32;

const SAMPLE_STEPS: usize = 25;
const CFG_SCALE: f64 = 9.0;

fn gen(
    model: &customttt::model::Denoiser<F>,
    adapters: &[&LoraAdapter<F>],
    prompt: &Prompt,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<ndarray::Array4<F>> {
    let routing = PromptRouting::uniform(&embed_prompt::<F>(prompt, model.config.embed_dim));
    Ok(ddim_sample(model, &routing, adapters, SAMPLE_STEPS, CFG_SCALE, seed, sched, None)?.0)
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: usize| -> usize {
        args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d)
    };
    let frames = get(1, 8);
    let hw = get(2, 16);
    let width = get(3, 32);
    let pretrain_steps = get(4, 3000);
    let lora_steps = get(5, 500);
    let n_seeds = get(6, 8) as u64;

    let model_cfg = DenoiserConfig::with_dims(frames, 3, hw, hw, width, width, width);
    let sched = NoiseSchedule::default();
    println!("== dims f={frames} hw={hw} width={width} pretrain={pretrain_steps} lora={lora_steps} seeds={n_seeds}");

    // Corpus: 4 appearances x 4 motions, hold out pattern 1 and trajectory 1.
    let appearances = vec![
        AppearanceConcept::new(Shape::Square, 0),
        AppearanceConcept::new(Shape::Circle, 1),
        AppearanceConcept::new(Shape::Triangle, 2),
        AppearanceConcept::new(Shape::Square, 3),
    ];
    let motions: Vec<MotionConcept> = (0..4)
        .map(|i| MotionConcept::new(Trajectory::from_index(i).unwrap()))
        .collect();
    let held_out = HeldOut {
        patterns: vec![1],
        trajectories: vec![Trajectory::from_index(1).unwrap()],
    };
    let corpus = make_corpus::<F>(&appearances, &motions, 1, &held_out, frames, hw, hw, 7)?;
    println!("corpus: {} clips", corpus.items.len());

    // Pretrain.
    let t0 = Instant::now();
    let mut model = build_denoiser::<F>(&model_cfg, 11)?;
    let mut pre_cfg = TrainConfig::pretrain(11);
    pre_cfg.steps = pretrain_steps;
    let report = pretrain_base(&mut model, &corpus, &sched, &pre_cfg)?;
    println!(
        "pretrain: {:.1}s  loss {:.4} -> {:.4}  ({} warnings)",
        t0.elapsed().as_secs_f64(),
        report.losses.first().unwrap(),
        report.losses.last().unwrap(),
        report.warnings.len()
    );

    // Held-out targets.
    let held_appearance = AppearanceConcept::new(Shape::Circle, 1);
    let held_motion = MotionConcept::new(Trajectory::from_index(1).unwrap());
    let refs = render_reference_images::<F>(&held_appearance, 5, hw, hw, 71)?;
    let ref_video = render_video::<F>(
        &AppearanceConcept::new(Shape::Square, 0),
        &held_motion,
        frames,
        hw,
        hw,
        72,
    )?;
    let app_prompt = Prompt::parse("a sks1 circle")?;
    let mot_prompt = Prompt::parse("a square mot1")?;
    let eval_prompt = Prompt::parse("a sks1 circle mot1")?;

    // Adapters.
    let t0 = Instant::now();
    let mut app_cfg = TrainConfig::appearance(13);
    app_cfg.steps = lora_steps;
    let (app, app_rep) =
        train_appearance_lora(&model, &refs, &app_prompt, &[2, 6], 4, &sched, &app_cfg)?;
    println!(
        "appearance lora: {:.1}s  loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        app_rep.losses.first().unwrap(),
        app_rep.losses.last().unwrap()
    );
    let t0 = Instant::now();
    let mut mot_cfg = TrainConfig::motion(17);
    mot_cfg.steps = lora_steps;
    let (mot, mot_rep) =
        train_motion_lora(&model, &ref_video, &mot_prompt, &[2, 5], 4, &sched, &mot_cfg)?;
    println!(
        "motion lora: {:.1}s  loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        mot_rep.losses.first().unwrap(),
        mot_rep.losses.last().unwrap()
    );

    // Efficacy: per-seed similarity, base vs adapted.
    let t0 = Instant::now();
    let mut app_base = 0.0;
    let mut app_adapted = 0.0;
    let mut mot_base = 0.0;
    let mut mot_adapted = 0.0;
    for seed in 0..n_seeds {
        let v = gen(&model, &[], &app_prompt, seed, &sched)?;
        app_base += appearance_similarity(&v, &refs)?;
        let v = gen(&model, &[&app], &app_prompt, seed, &sched)?;
        app_adapted += appearance_similarity(&v, &refs)?;
        let v = gen(&model, &[], &mot_prompt, seed, &sched)?;
        mot_base += motion_similarity(&v, &ref_video)?;
        let v = gen(&model, &[&mot], &mot_prompt, seed, &sched)?;
        mot_adapted += motion_similarity(&v, &ref_video)?;
    }
    let n = n_seeds as f64;
    println!(
        "efficacy ({:.1}s): appearance {:.4} -> {:.4} (delta {:+.4}), motion {:.4} -> {:.4} (delta {:+.4})",
        t0.elapsed().as_secs_f64(),
        app_base / n,
        app_adapted / n,
        (app_adapted - app_base) / n,
        mot_base / n,
        mot_adapted / n,
        (mot_adapted - mot_base) / n,
    );

    // TTT vs naive merge, per-seed joint scores.
    let joint = |video: &ndarray::Array4<F>| -> Result<f64> {
        let ta = text_alignment(video, &eval_prompt)?;
        let ap = appearance_similarity(video, &refs)?;
        let ms = motion_similarity(video, &ref_video)?;
        Ok((ta + ap + ms) / 3.0)
    };
    let t0 = Instant::now();
    let ttt_cfg = TttConfig::desk(vec![app_prompt.clone()], vec![mot_prompt.clone()], 19);
    let (app_t, mot_t, ttt_rep) = customttt::ttt::run_ttt(&model, &app, &mot, &ttt_cfg, &sched)?;
    println!(
        "ttt: {:.1}s  first loss {:.5} last {:.5}",
        t0.elapsed().as_secs_f64(),
        ttt_rep.steps.first().map(|s| s.loss).unwrap_or(f64::NAN),
        ttt_rep.steps.last().map(|s| s.loss).unwrap_or(f64::NAN),
    );

    let t0 = Instant::now();
    let mut wins = 0;
    let mut naive_mean = 0.0;
    let mut ttt_mean = 0.0;
    for seed in 0..n_seeds {
        let v_naive = gen(&model, &[&app, &mot], &eval_prompt, seed, &sched)?;
        let v_ttt = gen(&model, &[&app_t, &mot_t], &eval_prompt, seed, &sched)?;
        let (jn, jt) = (joint(&v_naive)?, joint(&v_ttt)?);
        naive_mean += jn;
        ttt_mean += jt;
        if jt > jn {
            wins += 1;
        }
        println!("  seed {seed}: naive {jn:.4} ttt {jt:.4} {}", if jt > jn { "WIN" } else { "-" });
    }
    println!(
        "ttt-vs-naive ({:.1}s): naive {:.4} ttt {:.4} wins {}/{}",
        t0.elapsed().as_secs_f64(),
        naive_mean / n,
        ttt_mean / n,
        wins,
        n_seeds
    );

    // Prompts the benchmark would use, for reference.
    println!("eval prompt variants: {}", eval_prompts(&eval_prompt).len());
    Ok(())
}
