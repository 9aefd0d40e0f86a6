//! `customttt`: a desk-scale lab for customizing a tiny synthetic video
//! diffusion model. Subcommands cover the whole pipeline: render data,
//! pretrain the base denoiser, fit appearance and motion adapters, scan
//! cross-attention layers for concept influence, combine adapters with a
//! test-time pass, sample videos, and benchmark methods against each other.
//!
//! Every run claims a fresh `--out` directory and leaves `config.txt` (the
//! fully resolved configuration) and `manifest.txt` (SHA-256 digests of all
//! inputs and artifacts) beside its outputs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use customttt::analysis::ScanCriterion;
use customttt::Error;

use customttt_cli::commands::{self, Ctx};
use customttt_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "customttt", version, about = "tiny video-diffusion customization lab")]
struct Cli {
    /// Key = value configuration file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the command's primary seed (or seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; must be new or empty.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Appearance,
    Motion,
}

impl From<CriterionArg> for ScanCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Appearance => ScanCriterion::Appearance,
            CriterionArg::Motion => ScanCriterion::Motion,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the pretraining corpus, customization references, and the
    /// held-out benchmark case.
    MakeData,
    /// Pretrain the base video denoiser on a rendered corpus.
    PretrainBase {
        /// Directory written by make-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Fit an appearance adapter to the reference images.
    TrainAppearance {
        /// Base checkpoint from pretrain-base.
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Fit a motion adapter to the reference video.
    TrainMotion {
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Score each cross-attention layer's influence by prompt injection.
    AnalyzeLayers {
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        /// Base prompt, e.g. "a sks0 square".
        #[arg(long)]
        prompt: String,
        /// Injected prompt; may differ from --prompt in one concept token.
        #[arg(long = "prompt-star")]
        prompt_star: String,
        /// Required when the prompts are identical; inferred otherwise.
        #[arg(long, value_enum)]
        criterion: Option<CriterionArg>,
    },
    /// Adapt both adapters jointly at test time before composing them.
    TttCombine {
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        #[arg(long, value_name = "FILE")]
        appearance: PathBuf,
        #[arg(long, value_name = "FILE")]
        motion: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Generate one video (container + GIF) from a prompt.
    Sample {
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        /// Adapter to apply; repeat for several.
        #[arg(long = "adapter", value_name = "FILE")]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        prompt: String,
    },
    /// Score methods on the held-out case with the proxy metrics.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// name=adapter.cttt+adapter.cttt; repeat per method. Defaults to the
        /// bare base model.
        #[arg(long = "method", value_name = "SPEC")]
        methods: Vec<String>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::MakeData => "make-data",
            Cmd::PretrainBase { .. } => "pretrain-base",
            Cmd::TrainAppearance { .. } => "train-appearance",
            Cmd::TrainMotion { .. } => "train-motion",
            Cmd::AnalyzeLayers { .. } => "analyze-layers",
            Cmd::TttCombine { .. } => "ttt-combine",
            Cmd::Sample { .. } => "sample",
            Cmd::Evaluate { .. } => "evaluate",
        }
    }

    /// `--seed` overrides the one seed (or seed list) this command draws from.
    fn apply_seed(&self, cfg: &mut RunConfig, seed: u64) {
        match self {
            Cmd::MakeData => cfg.data_seed = seed,
            Cmd::PretrainBase { .. } => cfg.pretrain_seed = seed,
            Cmd::TrainAppearance { .. } => cfg.appearance_seed = seed,
            Cmd::TrainMotion { .. } => cfg.motion_seed = seed,
            Cmd::AnalyzeLayers { .. } => cfg.scan_seeds = vec![seed],
            Cmd::TttCombine { .. } => cfg.ttt_seed = seed,
            Cmd::Sample { .. } => cfg.sample_seed = seed,
            Cmd::Evaluate { .. } => cfg.eval_seeds = vec![seed],
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Container(_) => 3,
        Error::Divergence(_) => 4,
        Error::Shape(_) | Error::Io(_) => 1,
    }
}

fn run(cli: Cli) -> customttt::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cli.command.apply_seed(&mut cfg, seed);
    }
    let out = cli
        .out
        .ok_or_else(|| Error::config("--out <DIR> is required".to_string()))?;
    let mut ctx = Ctx::new(cli.command.name(), cfg, out, cli.quiet)?;

    match &cli.command {
        Cmd::MakeData => commands::make_data(&mut ctx)?,
        Cmd::PretrainBase { data } => commands::pretrain(&mut ctx, data)?,
        Cmd::TrainAppearance { base, data } => commands::train_appearance(&mut ctx, base, data)?,
        Cmd::TrainMotion { base, data } => commands::train_motion(&mut ctx, base, data)?,
        Cmd::AnalyzeLayers {
            base,
            prompt,
            prompt_star,
            criterion,
        } => commands::analyze_layers(
            &mut ctx,
            base,
            prompt,
            prompt_star,
            criterion.map(ScanCriterion::from),
        )?,
        Cmd::TttCombine {
            base,
            appearance,
            motion,
            data,
        } => commands::ttt_combine(&mut ctx, base, appearance, motion, data)?,
        Cmd::Sample {
            base,
            adapters,
            prompt,
        } => commands::sample(&mut ctx, base, adapters, prompt)?,
        Cmd::Evaluate {
            base,
            data,
            methods,
        } => commands::evaluate(&mut ctx, base, data, methods)?,
    }
    ctx.finish()
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CUSTOMTTT_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
