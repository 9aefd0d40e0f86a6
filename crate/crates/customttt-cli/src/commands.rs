//! One function per subcommand, plus the shared run context that handles
//! output-directory discipline, input pre-checks, and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use customttt::analysis::{
    greedy_pair_search, layer_importance_scan, CriterionReport, ScanCriterion,
};
use customttt::data::{
    concepts_from_prompt, embed_prompt, eval_prompts, load_corpus, make_corpus,
    render_reference_images, render_video, save_corpus, AppearanceConcept, MotionConcept, Prompt,
};
use customttt::eval::{adapter_params, benchmark, BenchmarkConfig, EvalCase, MethodSpec};
use customttt::lora::{load_adapter, save_adapter, LoraAdapter};
use customttt::model::{build_denoiser, load_checkpoint, save_checkpoint, PromptRouting};
use customttt::rng::derive_seed;
use customttt::scheduler::ddim_sample;
use customttt::train::{pretrain_base, train_appearance_lora, train_motion_lora, TrainReport};
use customttt::ttt::run_ttt;
use customttt::{Error, Result};

use crate::artifacts::{load_video, save_gif, save_video};
use crate::config::RunConfig;
use crate::manifest::{sha256_hex, RunManifest};
use crate::plot;

/// Pipeline scalar type: single precision everywhere outside the test oracles.
type F = f32;

const GIF_SCALE: u32 = 8;

/// Refuse to write into a directory that already has content, so a rerun can
/// never silently mix artifacts from two runs.
pub fn prepare_out_dir(out: &Path) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(Error::config(format!(
                "output path {} exists and is not a directory",
                out.display()
            )));
        }
        if out.read_dir()?.next().is_some() {
            return Err(Error::config(format!(
                "output directory {} is not empty",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out)?;
    }
    Ok(())
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub quiet: bool,
    manifest: RunManifest,
    started: Instant,
}

impl Ctx {
    /// Claims the output directory and records the resolved configuration
    /// before any work starts.
    pub fn new(command: &str, cfg: RunConfig, out: PathBuf, quiet: bool) -> Result<Self> {
        prepare_out_dir(&out)?;
        let text = cfg.to_text();
        fs::write(out.join("config.txt"), &text)?;
        let mut ctx = Self {
            cfg,
            out,
            quiet,
            manifest: RunManifest::new(command, sha256_hex(text.as_bytes())),
            started: Instant::now(),
        };
        ctx.artifact("config.txt")?;
        Ok(ctx)
    }

    pub fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    /// Register an input file; a missing path is a configuration error caught
    /// before the command does any work.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::config(format!(
                "input file {} does not exist",
                path.display()
            )));
        }
        self.manifest.add_input(label, path)
    }

    pub fn artifact(&mut self, rel: &str) -> Result<()> {
        self.manifest.add_artifact(&self.out, rel)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        fs::write(self.out.join(rel), text)?;
        self.artifact(rel)
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.manifest.save(&self.out)?;
        self.say(&format!(
            "wrote {} ({:.1}s)",
            self.out.join("manifest.txt").display(),
            self.manifest.wall_clock_secs
        ));
        Ok(())
    }
}

fn write_loss_curve(ctx: &mut Ctx, stem: &str, report: &TrainReport) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, loss) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{loss:.8}\n"));
    }
    ctx.write_text(&format!("{stem}.csv"), &csv)?;
    plot::line_chart(&ctx.out.join(format!("{stem}.png")), &[report.losses.clone()])?;
    ctx.artifact(&format!("{stem}.png"))?;
    for w in &report.warnings {
        ctx.say(&format!("warning: {w}"));
    }
    if !report.warnings.is_empty() {
        ctx.write_text(&format!("{stem}_warnings.txt"), &report.warnings.join("\n"))?;
    }
    Ok(())
}

/// Parse a `key = value` document (the benchmark case sheet).
fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("{}: expected key = value", path.display())))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn kv_get<'a>(kv: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::data(format!("{} is missing key {key:?}", path.display())))
}

/// Files a previous `make-data` run left in its output directory.
struct DataDir {
    root: PathBuf,
}

impl DataDir {
    fn new(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::config(format!(
                "data directory {} does not exist",
                root.display()
            )));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    fn case_path(&self) -> PathBuf {
        self.root.join("case.txt")
    }

    fn ref_video_path(&self) -> PathBuf {
        self.root.join("ref_video.cttt")
    }

    fn ref_paths(&self) -> Result<Vec<PathBuf>> {
        let dir = self.root.join("refs");
        if !dir.is_dir() {
            return Err(Error::config(format!(
                "reference directory {} does not exist",
                dir.display()
            )));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "cttt"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::config(format!(
                "no reference images under {}",
                dir.display()
            )));
        }
        Ok(paths)
    }

    fn case_prompt(&self, ctx: &mut Ctx, key: &str) -> Result<Prompt> {
        let path = self.case_path();
        ctx.input("case", &path)?;
        let kv = read_kv_file(&path)?;
        Prompt::parse(kv_get(&kv, key, &path)?)
    }
}

// ----- make-data -----

pub fn make_data(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let appearances = cfg.appearance_concepts()?;
    let motions = cfg.motion_concepts()?;
    let held_out = cfg.held_out()?;

    ctx.say("rendering pretraining corpus...");
    let corpus = make_corpus::<F>(
        &appearances,
        &motions,
        cfg.per_pair,
        &held_out,
        cfg.frames,
        cfg.height,
        cfg.width,
        cfg.data_seed,
    )?;
    let corpus_dir = ctx.out.join("corpus");
    save_corpus(&corpus, &corpus_dir)?;
    let mut names: Vec<String> = fs::read_dir(&corpus_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        ctx.artifact(&format!("corpus/{name}"))?;
    }
    ctx.say(&format!("corpus: {} clips", corpus.items.len()));

    // Customization targets: the held-out appearance as still references, and
    // the held-out trajectory ridden by an already-seen appearance.
    let held_shape = cfg.shape_of_pattern(cfg.held_out_pattern)?;
    let held_appearance = AppearanceConcept::new(held_shape, cfg.held_out_pattern);
    let refs = render_reference_images::<F>(
        &held_appearance,
        cfg.ref_count,
        cfg.height,
        cfg.width,
        derive_seed(cfg.data_seed, &["make-data", "refs"]),
    )?;
    fs::create_dir_all(ctx.out.join("refs"))?;
    for (i, image) in refs.iter().enumerate() {
        let rel = format!("refs/ref{i}.cttt");
        save_video(&ctx.out.join(&rel), image, &[("role", format!("reference {i}"))])?;
        ctx.artifact(&rel)?;
    }

    let motion_shape = cfg.shape_of_pattern(cfg.motion_ref_pattern)?;
    let motion_appearance = AppearanceConcept::new(motion_shape, cfg.motion_ref_pattern);
    let held_motion = MotionConcept::new(held_out.trajectories[0]);
    let ref_video = render_video::<F>(
        &motion_appearance,
        &held_motion,
        cfg.frames,
        cfg.height,
        cfg.width,
        derive_seed(cfg.data_seed, &["make-data", "motion-ref"]),
    )?;
    save_video(
        &ctx.out.join("ref_video.cttt"),
        &ref_video,
        &[("role", "motion reference".to_string())],
    )?;
    ctx.artifact("ref_video.cttt")?;

    let appearance_prompt = format!("a sks{} {}", cfg.held_out_pattern, held_shape.noun());
    let motion_prompt = format!(
        "a {} mot{}",
        motion_shape.noun(),
        cfg.held_out_trajectory
    );
    let eval_prompt = format!(
        "a sks{} {} mot{}",
        cfg.held_out_pattern,
        held_shape.noun(),
        cfg.held_out_trajectory
    );
    // Fail here, not three stages later, if a prompt leaves the vocabulary.
    for text in [&appearance_prompt, &motion_prompt, &eval_prompt] {
        Prompt::parse(text)?;
    }
    let case = format!(
        "appearance_prompt = {appearance_prompt}\nmotion_prompt = {motion_prompt}\neval_prompt = {eval_prompt}\n"
    );
    ctx.write_text("case.txt", &case)?;
    ctx.say(&format!("case prompts:\n{case}"));
    Ok(())
}

// ----- pretrain-base -----

pub fn pretrain(ctx: &mut Ctx, data: &Path) -> Result<()> {
    let data = DataDir::new(data)?;
    ctx.input("corpus", &data.corpus_dir().join("corpus.txt"))?;
    let corpus = load_corpus::<F>(&data.corpus_dir())?;
    let sched = ctx.cfg.schedule()?;
    let train_cfg = ctx.cfg.pretrain_train();

    ctx.say(&format!(
        "pretraining base denoiser: {} steps on {} clips...",
        train_cfg.steps,
        corpus.items.len()
    ));
    let mut model = build_denoiser::<F>(&ctx.cfg.denoiser_config(), ctx.cfg.pretrain_seed)?;
    let report = pretrain_base(&mut model, &corpus, &sched, &train_cfg)?;
    save_checkpoint(&model, ctx.out.join("base.cttt"))?;
    ctx.artifact("base.cttt")?;
    write_loss_curve(ctx, "loss", &report)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        ctx.say(&format!("loss {first:.5} -> {last:.5}"));
    }
    Ok(())
}

// ----- train-appearance / train-motion -----

pub fn train_appearance(ctx: &mut Ctx, base: &Path, data: &Path) -> Result<()> {
    let data = DataDir::new(data)?;
    ctx.input("base", base)?;
    let model = load_checkpoint::<F>(base)?;
    let mut refs = Vec::new();
    for (i, path) in data.ref_paths()?.iter().enumerate() {
        ctx.input(&format!("ref{i}"), path)?;
        refs.push(load_video(path)?);
    }
    let prompt = data.case_prompt(ctx, "appearance_prompt")?;
    let sched = ctx.cfg.schedule()?;
    let cfg = ctx.cfg.clone();

    ctx.say(&format!(
        "fitting appearance adapter on layers {:?} (rank {}, {} refs, prompt {:?})...",
        cfg.appearance_layers,
        cfg.appearance_rank,
        refs.len(),
        prompt.text()
    ));
    let (adapter, report) = train_appearance_lora(
        &model,
        &refs,
        &prompt,
        &cfg.appearance_layers,
        cfg.appearance_rank,
        &sched,
        &cfg.appearance_train(),
    )?;
    save_adapter(&adapter, ctx.out.join("appearance.cttt"))?;
    ctx.artifact("appearance.cttt")?;
    write_loss_curve(ctx, "loss", &report)
}

pub fn train_motion(ctx: &mut Ctx, base: &Path, data: &Path) -> Result<()> {
    let data = DataDir::new(data)?;
    ctx.input("base", base)?;
    let model = load_checkpoint::<F>(base)?;
    ctx.input("ref_video", &data.ref_video_path())?;
    let ref_video = load_video(&data.ref_video_path())?;
    let prompt = data.case_prompt(ctx, "motion_prompt")?;
    let sched = ctx.cfg.schedule()?;
    let cfg = ctx.cfg.clone();

    ctx.say(&format!(
        "fitting motion adapter on layers {:?} (rank {}, prompt {:?})...",
        cfg.motion_layers,
        cfg.motion_rank,
        prompt.text()
    ));
    let (adapter, report) = train_motion_lora(
        &model,
        &ref_video,
        &prompt,
        &cfg.motion_layers,
        cfg.motion_rank,
        &sched,
        &cfg.motion_train(),
    )?;
    save_adapter(&adapter, ctx.out.join("motion.cttt"))?;
    ctx.artifact("motion.cttt")?;
    write_loss_curve(ctx, "loss", &report)
}

// ----- analyze-layers -----

fn token_class(token: u16) -> Option<ScanCriterion> {
    let probe = Prompt::new(vec![token]).ok()?;
    match concepts_from_prompt(&probe) {
        (Some(_), None) => Some(ScanCriterion::Appearance),
        (None, Some(_)) => Some(ScanCriterion::Motion),
        _ => None,
    }
}

/// Pick the scan criterion from the one differing token of the prompt pair.
fn infer_criterion(p: &Prompt, p_star: &Prompt) -> Result<ScanCriterion> {
    if p.tokens().len() != p_star.tokens().len() {
        return Err(Error::config(
            "prompt pair must have the same token count".to_string(),
        ));
    }
    let diffs: Vec<(u16, u16)> = p
        .tokens()
        .iter()
        .zip(p_star.tokens())
        .filter(|(a, b)| a != b)
        .map(|(&a, &b)| (a, b))
        .collect();
    match diffs.as_slice() {
        [] => Err(Error::config(
            "prompts are identical; pass --criterion appearance or --criterion motion"
                .to_string(),
        )),
        [(a, b)] => match (token_class(*a), token_class(*b)) {
            (Some(x), Some(y)) if x == y => Ok(x),
            _ => Err(Error::config(
                "the differing tokens are not both appearance ids or both motion ids"
                    .to_string(),
            )),
        },
        _ => Err(Error::config(
            "prompt pair differs in more than one token".to_string(),
        )),
    }
}

pub fn analyze_layers(
    ctx: &mut Ctx,
    base: &Path,
    prompt: &str,
    prompt_star: &str,
    criterion: Option<ScanCriterion>,
) -> Result<()> {
    ctx.input("base", base)?;
    let model = load_checkpoint::<F>(base)?;
    let p = Prompt::parse(prompt)?;
    let p_star = Prompt::parse(prompt_star)?;
    let criterion = match criterion {
        Some(c) => c,
        None => infer_criterion(&p, &p_star)?,
    };
    let sched = ctx.cfg.schedule()?;
    let scan_cfg = ctx.cfg.scan_config();

    ctx.say(&format!(
        "scanning cross-attention layers for {} influence ({} seeds)...",
        criterion.name(),
        scan_cfg.seeds.len()
    ));
    let scan = layer_importance_scan(&model, &p, &p_star, criterion, &scan_cfg, &sched)?;
    let pair_search =
        greedy_pair_search(&model, &p, &p_star, criterion, scan.best_single, &scan_cfg, &sched)?;
    let report = CriterionReport { scan, pair_search };

    ctx.write_text("importance.csv", &report.to_csv())?;
    let singles: Vec<f64> = report.scan.singles.iter().map(|s| s.score).collect();
    plot::bar_chart(&ctx.out.join("importance.png"), &singles)?;
    ctx.artifact("importance.png")?;
    ctx.say(&report.to_table());
    Ok(())
}

// ----- ttt-combine -----

pub fn ttt_combine(
    ctx: &mut Ctx,
    base: &Path,
    appearance: &Path,
    motion: &Path,
    data: &Path,
) -> Result<()> {
    let data = DataDir::new(data)?;
    ctx.input("base", base)?;
    ctx.input("appearance", appearance)?;
    ctx.input("motion", motion)?;
    let model = load_checkpoint::<F>(base)?;
    let appearance = load_adapter::<F>(appearance)?;
    let motion = load_adapter::<F>(motion)?;
    let appearance_prompt = data.case_prompt(ctx, "appearance_prompt")?;
    let case_path = data.case_path();
    let kv = read_kv_file(&case_path)?;
    let motion_prompt = Prompt::parse(kv_get(&kv, "motion_prompt", &case_path)?)?;
    let sched = ctx.cfg.schedule()?;
    let ttt_cfg = ctx
        .cfg
        .ttt_config(vec![appearance_prompt], vec![motion_prompt])?;

    ctx.say(&format!(
        "joint test-time pass: {} steps, anchor grid 1/{}...",
        ttt_cfg.ttt_steps, ttt_cfg.f
    ));
    let (appearance_ttt, motion_ttt, report) = run_ttt(&model, &appearance, &motion, &ttt_cfg, &sched)?;
    save_adapter(&appearance_ttt, ctx.out.join("appearance_ttt.cttt"))?;
    ctx.artifact("appearance_ttt.cttt")?;
    save_adapter(&motion_ttt, ctx.out.join("motion_ttt.cttt"))?;
    ctx.artifact("motion_ttt.cttt")?;

    let mut csv = String::from("step,which_loss,value\n");
    let mut by_kind: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for step in &report.steps {
        csv.push_str(&format!("{},{},{:.8}\n", step.index, step.kind.name(), step.loss));
        by_kind[(step.kind.name() == "temporal") as usize].push(step.loss);
    }
    ctx.write_text("ttt_losses.csv", &csv)?;
    plot::line_chart(&ctx.out.join("ttt_losses.png"), &by_kind)?;
    ctx.artifact("ttt_losses.png")?;
    Ok(())
}

// ----- sample -----

pub fn sample(ctx: &mut Ctx, base: &Path, adapter_paths: &[PathBuf], prompt: &str) -> Result<()> {
    ctx.input("base", base)?;
    let model = load_checkpoint::<F>(base)?;
    let mut adapters = Vec::new();
    for (i, path) in adapter_paths.iter().enumerate() {
        ctx.input(&format!("adapter{i}"), path)?;
        adapters.push(load_adapter::<F>(path)?);
    }
    let adapter_refs: Vec<&LoraAdapter<F>> = adapters.iter().collect();
    let p = Prompt::parse(prompt)?;
    let sched = ctx.cfg.schedule()?;
    let cfg = ctx.cfg.clone();

    ctx.say(&format!(
        "sampling {:?} ({} steps, guidance {}, seed {})...",
        p.text(),
        cfg.sample_steps,
        cfg.sample_cfg_scale,
        cfg.sample_seed
    ));
    let routing = PromptRouting::uniform(&embed_prompt::<F>(&p, model.config.embed_dim));
    let (video, _) = ddim_sample(
        &model,
        &routing,
        &adapter_refs,
        cfg.sample_steps,
        cfg.sample_cfg_scale,
        cfg.sample_seed,
        &sched,
        None,
    )?;
    save_video(
        &ctx.out.join("sample.cttt"),
        &video,
        &[
            ("prompt", p.text()),
            ("seed", cfg.sample_seed.to_string()),
            ("steps", cfg.sample_steps.to_string()),
            ("cfg_scale", cfg.sample_cfg_scale.to_string()),
        ],
    )?;
    ctx.artifact("sample.cttt")?;
    save_gif(&ctx.out.join("sample.gif"), &video, GIF_SCALE)?;
    ctx.artifact("sample.gif")?;
    Ok(())
}

// ----- evaluate -----

/// `--method name=adapter.cttt+adapter.cttt`; a bare `name=` runs the base
/// model without adapters.
pub fn parse_method_flag(flag: &str) -> Result<(String, Vec<PathBuf>)> {
    let (name, rest) = flag.split_once('=').ok_or_else(|| {
        Error::config(format!(
            "--method must look like name=adapter.cttt+adapter.cttt, got {flag:?}"
        ))
    })?;
    if name.is_empty() {
        return Err(Error::config("--method needs a non-empty name".to_string()));
    }
    let paths = rest
        .split('+')
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    Ok((name.to_string(), paths))
}

pub fn evaluate(
    ctx: &mut Ctx,
    base: &Path,
    data: &Path,
    method_flags: &[String],
) -> Result<()> {
    let data = DataDir::new(data)?;
    ctx.input("base", base)?;
    let model = load_checkpoint::<F>(base)?;

    let mut methods: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for flag in method_flags {
        methods.push(parse_method_flag(flag)?);
    }
    if methods.is_empty() {
        methods.push(("base".to_string(), Vec::new()));
    }

    let mut adapter_store: Vec<Vec<LoraAdapter<F>>> = Vec::new();
    for (name, paths) in &methods {
        let mut loaded = Vec::new();
        for (i, path) in paths.iter().enumerate() {
            ctx.input(&format!("{name}.adapter{i}"), path)?;
            loaded.push(load_adapter::<F>(path)?);
        }
        adapter_store.push(loaded);
    }

    let mut refs = Vec::new();
    for (i, path) in data.ref_paths()?.iter().enumerate() {
        ctx.input(&format!("ref{i}"), path)?;
        refs.push(load_video(path)?);
    }
    ctx.input("ref_video", &data.ref_video_path())?;
    let ref_video = load_video(&data.ref_video_path())?;
    let eval_prompt = data.case_prompt(ctx, "eval_prompt")?;

    let specs: Vec<MethodSpec<'_, F>> = methods
        .iter()
        .zip(&adapter_store)
        .map(|((name, _), adapters)| {
            let adapters: Vec<&LoraAdapter<F>> = adapters.iter().collect();
            let trainable_params = adapter_params(&adapters);
            MethodSpec {
                name: name.clone(),
                model: &model,
                adapters,
                trainable_params,
            }
        })
        .collect();
    let case = EvalCase {
        name: "held-out".to_string(),
        refs,
        ref_video,
        prompts: eval_prompts(&eval_prompt),
    };
    let bench_cfg: BenchmarkConfig = ctx.cfg.bench_config();

    ctx.say(&format!(
        "benchmarking {} methods x {} prompts x {} seeds...",
        specs.len(),
        case.prompts.len(),
        bench_cfg.seeds.len()
    ));
    let sched = ctx.cfg.schedule()?;
    let report = benchmark(&specs, &[case], &sched, &bench_cfg)?;

    ctx.write_text("metrics.csv", &report.to_csv())?;
    ctx.write_text("metrics.txt", &report.to_table())?;
    let columns: [(&str, fn(&customttt::eval::MethodMetrics) -> f64); 4] = [
        ("text_alignment", |m| m.text_alignment),
        ("appearance_sim", |m| m.appearance_sim),
        ("temporal_consistency", |m| m.temporal_consistency),
        ("motion_sim", |m| m.motion_sim),
    ];
    for (name, pick) in columns {
        let values: Vec<f64> = report
            .rows
            .iter()
            .map(|r| r.metrics.as_ref().map(pick).unwrap_or(f64::NAN))
            .collect();
        let rel = format!("metric_{name}.png");
        plot::bar_chart(&ctx.out.join(&rel), &values)?;
        ctx.artifact(&rel)?;
    }
    ctx.say(&report.to_table());
    Ok(())
}
