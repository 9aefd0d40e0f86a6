//! Flat key=value run configuration.
//!
//! One plain-text document covers every tunable default across the pipeline:
//! model dimensions, noise schedule, corpus composition, per-stage training
//! budgets and seeds, TTT parameters, and the sampling budgets of the scan,
//! sample, and evaluate commands. Unknown and duplicate keys are rejected so
//! a typo cannot silently fall back to a default.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use customttt::analysis::ScanConfig;
use customttt::data::{AppearanceConcept, HeldOut, MotionConcept, Prompt, Shape, Trajectory};
use customttt::eval::BenchmarkConfig;
use customttt::model::DenoiserConfig;
use customttt::scheduler::NoiseSchedule;
use customttt::train::TrainConfig;
use customttt::ttt::{RenoiseMode, TttConfig};
use customttt::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub time_embed_dim: usize,
    // schedule
    pub sched_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    // data
    pub patterns: Vec<u8>,
    pub shapes: Vec<String>,
    pub trajectories: Vec<u8>,
    pub per_pair: usize,
    pub ref_count: usize,
    pub held_out_pattern: u8,
    pub held_out_trajectory: u8,
    pub motion_ref_pattern: u8,
    pub data_seed: u64,
    // optimizer (shared by every training stage)
    pub lion_beta1: f64,
    pub lion_beta2: f64,
    pub weight_decay: f64,
    // pretraining
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_cond_drop: f64,
    pub pretrain_seed: u64,
    // appearance adapter
    pub appearance_layers: Vec<usize>,
    pub appearance_rank: usize,
    pub appearance_steps: usize,
    pub appearance_lr: f64,
    pub appearance_seed: u64,
    // motion adapter
    pub motion_layers: Vec<usize>,
    pub motion_rank: usize,
    pub motion_steps: usize,
    pub motion_lr: f64,
    pub motion_seed: u64,
    // test-time combination
    pub ttt_f: usize,
    pub ttt_steps: usize,
    pub ttt_lr: f64,
    pub ttt_beta_debias: f64,
    pub ttt_anchor: usize,
    pub ttt_renoise: String,
    pub ttt_sampling_steps: usize,
    pub ttt_cfg_scale: f64,
    pub ttt_seed: u64,
    // layer-importance scan
    pub scan_sampling_steps: usize,
    pub scan_cfg_scale: f64,
    pub scan_seeds: Vec<u64>,
    // single-sample command
    pub sample_steps: usize,
    pub sample_cfg_scale: f64,
    pub sample_seed: u64,
    // benchmark
    pub eval_sampling_steps: usize,
    pub eval_cfg_scale: f64,
    pub eval_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 3,
            height: 16,
            width: 16,
            base_width: 32,
            embed_dim: 32,
            time_embed_dim: 32,
            sched_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.05,
            patterns: vec![0, 1, 2, 3],
            shapes: vec![
                "square".into(),
                "circle".into(),
                "triangle".into(),
                "square".into(),
            ],
            trajectories: vec![0, 1, 2, 3],
            per_pair: 1,
            ref_count: 5,
            held_out_pattern: 1,
            held_out_trajectory: 1,
            motion_ref_pattern: 0,
            data_seed: 7,
            lion_beta1: 0.9,
            lion_beta2: 0.99,
            weight_decay: 0.0,
            pretrain_steps: 3000,
            pretrain_lr: 1e-3,
            pretrain_batch: 4,
            pretrain_cond_drop: 0.1,
            pretrain_seed: 11,
            appearance_layers: vec![2, 6],
            appearance_rank: 4,
            appearance_steps: 500,
            appearance_lr: 1e-5,
            appearance_seed: 13,
            motion_layers: vec![2, 5],
            motion_rank: 4,
            motion_steps: 500,
            motion_lr: 5e-5,
            motion_seed: 17,
            ttt_f: 5,
            ttt_steps: 30,
            ttt_lr: 1e-4,
            ttt_beta_debias: 1.0,
            ttt_anchor: 0,
            ttt_renoise: "next".into(),
            ttt_sampling_steps: 25,
            ttt_cfg_scale: 9.0,
            ttt_seed: 19,
            scan_sampling_steps: 25,
            scan_cfg_scale: 9.0,
            scan_seeds: (0..8).collect(),
            sample_steps: 25,
            sample_cfg_scale: 9.0,
            sample_seed: 23,
            eval_sampling_steps: 25,
            eval_cfg_scale: 9.0,
            eval_seeds: (0..8).collect(),
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::config(format!("config key {key}: expected {want}, got {value:?}"))
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn p_u8(key: &str, v: &str) -> Result<u8> {
    v.parse().map_err(|_| bad(key, v, "a small non-negative integer"))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn p_list<T>(key: &str, v: &str, one: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| one(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::config(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("duplicate config key {key:?}")));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model.frames" => self.frames = p_usize(key, v)?,
            "model.channels" => self.channels = p_usize(key, v)?,
            "model.height" => self.height = p_usize(key, v)?,
            "model.width" => self.width = p_usize(key, v)?,
            "model.base_width" => self.base_width = p_usize(key, v)?,
            "model.embed_dim" => self.embed_dim = p_usize(key, v)?,
            "model.time_embed_dim" => self.time_embed_dim = p_usize(key, v)?,
            "sched.steps" => self.sched_steps = p_usize(key, v)?,
            "sched.beta_start" => self.beta_start = p_f64(key, v)?,
            "sched.beta_end" => self.beta_end = p_f64(key, v)?,
            "data.patterns" => self.patterns = p_list(key, v, p_u8)?,
            "data.shapes" => {
                self.shapes = v.split(',').map(|s| s.trim().to_string()).collect()
            }
            "data.trajectories" => self.trajectories = p_list(key, v, p_u8)?,
            "data.per_pair" => self.per_pair = p_usize(key, v)?,
            "data.ref_count" => self.ref_count = p_usize(key, v)?,
            "data.held_out_pattern" => self.held_out_pattern = p_u8(key, v)?,
            "data.held_out_trajectory" => self.held_out_trajectory = p_u8(key, v)?,
            "data.motion_ref_pattern" => self.motion_ref_pattern = p_u8(key, v)?,
            "data.seed" => self.data_seed = p_u64(key, v)?,
            "optim.lion_beta1" => self.lion_beta1 = p_f64(key, v)?,
            "optim.lion_beta2" => self.lion_beta2 = p_f64(key, v)?,
            "optim.weight_decay" => self.weight_decay = p_f64(key, v)?,
            "pretrain.steps" => self.pretrain_steps = p_usize(key, v)?,
            "pretrain.lr" => self.pretrain_lr = p_f64(key, v)?,
            "pretrain.batch" => self.pretrain_batch = p_usize(key, v)?,
            "pretrain.cond_drop" => self.pretrain_cond_drop = p_f64(key, v)?,
            "pretrain.seed" => self.pretrain_seed = p_u64(key, v)?,
            "appearance.layers" => self.appearance_layers = p_list(key, v, p_usize)?,
            "appearance.rank" => self.appearance_rank = p_usize(key, v)?,
            "appearance.steps" => self.appearance_steps = p_usize(key, v)?,
            "appearance.lr" => self.appearance_lr = p_f64(key, v)?,
            "appearance.seed" => self.appearance_seed = p_u64(key, v)?,
            "motion.layers" => self.motion_layers = p_list(key, v, p_usize)?,
            "motion.rank" => self.motion_rank = p_usize(key, v)?,
            "motion.steps" => self.motion_steps = p_usize(key, v)?,
            "motion.lr" => self.motion_lr = p_f64(key, v)?,
            "motion.seed" => self.motion_seed = p_u64(key, v)?,
            "ttt.f" => self.ttt_f = p_usize(key, v)?,
            "ttt.steps" => self.ttt_steps = p_usize(key, v)?,
            "ttt.lr" => self.ttt_lr = p_f64(key, v)?,
            "ttt.beta_debias" => self.ttt_beta_debias = p_f64(key, v)?,
            "ttt.anchor" => self.ttt_anchor = p_usize(key, v)?,
            "ttt.renoise" => self.ttt_renoise = v.to_string(),
            "ttt.sampling_steps" => self.ttt_sampling_steps = p_usize(key, v)?,
            "ttt.cfg_scale" => self.ttt_cfg_scale = p_f64(key, v)?,
            "ttt.seed" => self.ttt_seed = p_u64(key, v)?,
            "scan.sampling_steps" => self.scan_sampling_steps = p_usize(key, v)?,
            "scan.cfg_scale" => self.scan_cfg_scale = p_f64(key, v)?,
            "scan.seeds" => self.scan_seeds = p_list(key, v, p_u64)?,
            "sample.steps" => self.sample_steps = p_usize(key, v)?,
            "sample.cfg_scale" => self.sample_cfg_scale = p_f64(key, v)?,
            "sample.seed" => self.sample_seed = p_u64(key, v)?,
            "eval.sampling_steps" => self.eval_sampling_steps = p_usize(key, v)?,
            "eval.cfg_scale" => self.eval_cfg_scale = p_f64(key, v)?,
            "eval.seeds" => self.eval_seeds = p_list(key, v, p_u64)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The fully resolved document: every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.frames", self.frames.to_string());
        kv("model.channels", self.channels.to_string());
        kv("model.height", self.height.to_string());
        kv("model.width", self.width.to_string());
        kv("model.base_width", self.base_width.to_string());
        kv("model.embed_dim", self.embed_dim.to_string());
        kv("model.time_embed_dim", self.time_embed_dim.to_string());
        kv("sched.steps", self.sched_steps.to_string());
        kv("sched.beta_start", self.beta_start.to_string());
        kv("sched.beta_end", self.beta_end.to_string());
        kv("data.patterns", join(&self.patterns));
        kv("data.shapes", self.shapes.join(","));
        kv("data.trajectories", join(&self.trajectories));
        kv("data.per_pair", self.per_pair.to_string());
        kv("data.ref_count", self.ref_count.to_string());
        kv("data.held_out_pattern", self.held_out_pattern.to_string());
        kv(
            "data.held_out_trajectory",
            self.held_out_trajectory.to_string(),
        );
        kv(
            "data.motion_ref_pattern",
            self.motion_ref_pattern.to_string(),
        );
        kv("data.seed", self.data_seed.to_string());
        kv("optim.lion_beta1", self.lion_beta1.to_string());
        kv("optim.lion_beta2", self.lion_beta2.to_string());
        kv("optim.weight_decay", self.weight_decay.to_string());
        kv("pretrain.steps", self.pretrain_steps.to_string());
        kv("pretrain.lr", self.pretrain_lr.to_string());
        kv("pretrain.batch", self.pretrain_batch.to_string());
        kv("pretrain.cond_drop", self.pretrain_cond_drop.to_string());
        kv("pretrain.seed", self.pretrain_seed.to_string());
        kv("appearance.layers", join(&self.appearance_layers));
        kv("appearance.rank", self.appearance_rank.to_string());
        kv("appearance.steps", self.appearance_steps.to_string());
        kv("appearance.lr", self.appearance_lr.to_string());
        kv("appearance.seed", self.appearance_seed.to_string());
        kv("motion.layers", join(&self.motion_layers));
        kv("motion.rank", self.motion_rank.to_string());
        kv("motion.steps", self.motion_steps.to_string());
        kv("motion.lr", self.motion_lr.to_string());
        kv("motion.seed", self.motion_seed.to_string());
        kv("ttt.f", self.ttt_f.to_string());
        kv("ttt.steps", self.ttt_steps.to_string());
        kv("ttt.lr", self.ttt_lr.to_string());
        kv("ttt.beta_debias", self.ttt_beta_debias.to_string());
        kv("ttt.anchor", self.ttt_anchor.to_string());
        kv("ttt.renoise", self.ttt_renoise.clone());
        kv("ttt.sampling_steps", self.ttt_sampling_steps.to_string());
        kv("ttt.cfg_scale", self.ttt_cfg_scale.to_string());
        kv("ttt.seed", self.ttt_seed.to_string());
        kv("scan.sampling_steps", self.scan_sampling_steps.to_string());
        kv("scan.cfg_scale", self.scan_cfg_scale.to_string());
        kv("scan.seeds", join(&self.scan_seeds));
        kv("sample.steps", self.sample_steps.to_string());
        kv("sample.cfg_scale", self.sample_cfg_scale.to_string());
        kv("sample.seed", self.sample_seed.to_string());
        kv("eval.sampling_steps", self.eval_sampling_steps.to_string());
        kv("eval.cfg_scale", self.eval_cfg_scale.to_string());
        kv("eval.seeds", join(&self.eval_seeds));
        s
    }

    // ----- conversions into the library's config types -----

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig::with_dims(
            self.frames,
            self.channels,
            self.height,
            self.width,
            self.base_width,
            self.embed_dim,
            self.time_embed_dim,
        )
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.sched_steps, self.beta_start, self.beta_end)
    }

    fn with_optim(&self, mut t: TrainConfig) -> TrainConfig {
        t.lion_beta1 = self.lion_beta1;
        t.lion_beta2 = self.lion_beta2;
        t.weight_decay = self.weight_decay;
        t
    }

    pub fn pretrain_train(&self) -> TrainConfig {
        let mut t = TrainConfig::pretrain(self.pretrain_seed);
        t.steps = self.pretrain_steps;
        t.lr = self.pretrain_lr;
        t.batch = self.pretrain_batch;
        t.cond_drop_prob = self.pretrain_cond_drop;
        self.with_optim(t)
    }

    pub fn appearance_train(&self) -> TrainConfig {
        let mut t = TrainConfig::appearance(self.appearance_seed);
        t.steps = self.appearance_steps;
        t.lr = self.appearance_lr;
        t.batch = self.pretrain_batch;
        self.with_optim(t)
    }

    pub fn motion_train(&self) -> TrainConfig {
        let mut t = TrainConfig::motion(self.motion_seed);
        t.steps = self.motion_steps;
        t.lr = self.motion_lr;
        t.batch = self.pretrain_batch;
        self.with_optim(t)
    }

    pub fn ttt_config(
        &self,
        appearance_pool: Vec<Prompt>,
        motion_pool: Vec<Prompt>,
    ) -> Result<TttConfig> {
        let renoise = match self.ttt_renoise.as_str() {
            "next" => RenoiseMode::NextGridStep,
            "random" => RenoiseMode::RandomHigher,
            other => {
                return Err(Error::config(format!(
                    "config key ttt.renoise: expected next or random, got {other:?}"
                )))
            }
        };
        Ok(TttConfig {
            f: self.ttt_f,
            ttt_steps: self.ttt_steps,
            lr: self.ttt_lr,
            beta_debias: self.ttt_beta_debias,
            anchor_index: self.ttt_anchor,
            sampling_steps: self.ttt_sampling_steps,
            cfg_scale: self.ttt_cfg_scale,
            renoise,
            appearance_prompt_pool: appearance_pool,
            motion_prompt_pool: motion_pool,
            seed: self.ttt_seed,
        })
    }

    pub fn scan_config(&self) -> ScanConfig {
        ScanConfig {
            sampling_steps: self.scan_sampling_steps,
            cfg_scale: self.scan_cfg_scale,
            seeds: self.scan_seeds.clone(),
        }
    }

    pub fn bench_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            sampling_steps: self.eval_sampling_steps,
            cfg_scale: self.eval_cfg_scale,
            seeds: self.eval_seeds.clone(),
        }
    }

    // ----- corpus composition -----

    pub fn parse_shape(name: &str) -> Result<Shape> {
        match name {
            "square" => Ok(Shape::Square),
            "circle" => Ok(Shape::Circle),
            "triangle" => Ok(Shape::Triangle),
            other => Err(Error::config(format!(
                "unknown shape {other:?} (expected square, circle, or triangle)"
            ))),
        }
    }

    pub fn appearance_concepts(&self) -> Result<Vec<AppearanceConcept>> {
        if self.patterns.len() != self.shapes.len() {
            return Err(Error::config(format!(
                "data.patterns has {} entries but data.shapes has {}",
                self.patterns.len(),
                self.shapes.len()
            )));
        }
        self.patterns
            .iter()
            .zip(&self.shapes)
            .map(|(&p, s)| Ok(AppearanceConcept::new(Self::parse_shape(s)?, p)))
            .collect()
    }

    pub fn motion_concepts(&self) -> Result<Vec<MotionConcept>> {
        self.trajectories
            .iter()
            .map(|&i| {
                Trajectory::from_index(i)
                    .map(MotionConcept::new)
                    .ok_or_else(|| Error::config(format!("unknown trajectory index {i}")))
            })
            .collect()
    }

    pub fn held_out(&self) -> Result<HeldOut> {
        let traj = Trajectory::from_index(self.held_out_trajectory).ok_or_else(|| {
            Error::config(format!(
                "unknown trajectory index {}",
                self.held_out_trajectory
            ))
        })?;
        Ok(HeldOut {
            patterns: vec![self.held_out_pattern],
            trajectories: vec![traj],
        })
    }

    /// Shape paired with a pattern id in the corpus lists.
    pub fn shape_of_pattern(&self, pattern: u8) -> Result<Shape> {
        let idx = self
            .patterns
            .iter()
            .position(|&p| p == pattern)
            .ok_or_else(|| {
                Error::config(format!("pattern {pattern} is not in data.patterns"))
            })?;
        Self::parse_shape(&self.shapes[idx])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse_str("model.depth = 4").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = RunConfig::parse_str("ttt.f = 3\nttt.f = 4").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn comments_blanks_and_overrides_apply() {
        let cfg = RunConfig::parse_str("# a comment\n\nttt.f = 9\nscan.seeds = 4,5\n").unwrap();
        assert_eq!(cfg.ttt_f, 9);
        assert_eq!(cfg.scan_seeds, vec![4, 5]);
        assert_eq!(cfg.frames, RunConfig::default().frames);
    }

    #[test]
    fn malformed_values_name_the_key() {
        let err = RunConfig::parse_str("pretrain.steps = many").unwrap_err();
        assert!(err.to_string().contains("pretrain.steps"));
        let err = RunConfig::parse_str("just a line").unwrap_err();
        assert!(err.to_string().contains("key = value"));
    }

    #[test]
    fn concept_lists_validate() {
        let mut cfg = RunConfig::default();
        cfg.shapes.pop();
        assert!(cfg.appearance_concepts().is_err());
        let cfg = RunConfig::parse_str("data.trajectories = 0,9").unwrap();
        assert!(cfg.motion_concepts().is_err());
        assert!(RunConfig::default().ttt_config(vec![], vec![]).is_ok());
        let bad = RunConfig::parse_str("ttt.renoise = sometimes").unwrap();
        assert!(bad.ttt_config(vec![], vec![]).is_err());
    }
}
