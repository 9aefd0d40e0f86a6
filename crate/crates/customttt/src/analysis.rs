//! Prompt-injection layer-importance experiments.
//!
//! Hybrid sampling routes one prompt to a chosen set of cross-attention
//! layers and a second prompt to the rest. Scanning all single-layer
//! injections (and then all pairs containing the best single layer) ranks
//! layers by how strongly they pull the output toward the injected concept,
//! measured with the proxy metrics rather than by eye.

use ndarray::Array4;
use rayon::prelude::*;

use crate::data::{concepts_from_prompt, embed_prompt, Prompt};
use crate::error::{Error, Result};
use crate::eval::{
    appearance_similarity, canonical_appearance_refs, canonical_motion_render, motion_similarity,
};
use crate::model::{Denoiser, PromptRouting, CROSS_ATTN_LAYERS};
use crate::real::Real;
use crate::scheduler::{ddim_sample, NoiseSchedule};

/// Hybrid-prompt sampling request: layers in `layers` attend to `p_star`,
/// every other cross-attention layer attends to `p`.
#[derive(Clone, Debug)]
pub struct InjectionSpec {
    pub p: Prompt,
    pub p_star: Prompt,
    pub layers: Vec<usize>,
}

impl InjectionSpec {
    pub fn validate(&self) -> Result<()> {
        for &l in &self.layers {
            if !CROSS_ATTN_LAYERS.contains(&l) {
                return Err(Error::config(format!(
                    "layer {l} carries no cross-attention and cannot receive an injected prompt"
                )));
            }
        }
        Ok(())
    }
}

/// Routing that realizes an injection spec for a model of the given
/// embedding width.
pub fn injection_routing<A: Real>(spec: &InjectionSpec, embed_dim: usize) -> Result<PromptRouting<A>> {
    spec.validate()?;
    let base = embed_prompt::<A>(&spec.p, embed_dim);
    let injected = embed_prompt::<A>(&spec.p_star, embed_dim);
    let per_layer = CROSS_ATTN_LAYERS
        .iter()
        .map(|&l| {
            let e = if spec.layers.contains(&l) {
                injected.clone()
            } else {
                base.clone()
            };
            (l, e)
        })
        .collect();
    Ok(PromptRouting { per_layer })
}

/// Samples one video with hybrid per-layer prompts.
pub fn generate_with_injection<A: Real>(
    model: &Denoiser<A>,
    spec: &InjectionSpec,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Array4<A>> {
    let routing = injection_routing(spec, model.config.embed_dim)?;
    let (video, _) = ddim_sample(model, &routing, &[], steps, cfg_scale, seed, sched, None)?;
    Ok(video)
}

/// Which concept class a scan measures and which token class may differ
/// between the scanned prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanCriterion {
    Appearance,
    Motion,
}

impl ScanCriterion {
    pub fn name(self) -> &'static str {
        match self {
            ScanCriterion::Appearance => "appearance",
            ScanCriterion::Motion => "motion",
        }
    }
}

/// Sampling budget shared by every cell of a scan.
#[derive(Clone, Debug)]
pub struct ScanConfig {
    pub sampling_steps: usize,
    pub cfg_scale: f64,
    pub seeds: Vec<u64>,
}

impl ScanConfig {
    /// Stock budget: 8 seeds per cell.
    pub fn desk() -> Self {
        Self {
            sampling_steps: 25,
            cfg_scale: 9.0,
            seeds: (0..8).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("scan needs at least one seed"));
        }
        if self.sampling_steps == 0 {
            return Err(Error::config("scan needs at least one sampling step"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::config("cfg_scale must be finite"));
        }
        Ok(())
    }
}

/// Score of one injected layer set: per-seed values of
/// (similarity to the injected concept − similarity to the base concept)
/// and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionScore {
    pub layers: Vec<usize>,
    pub per_seed: Vec<f64>,
    pub score: f64,
}

/// Single-layer scan over every cross-attention layer, plus the
/// full-replacement calibration row.
#[derive(Clone, Debug)]
pub struct CriterionScan {
    pub criterion: ScanCriterion,
    /// One entry per cross-attention layer, in ascending layer order.
    pub singles: Vec<InjectionScore>,
    /// All layers injected at once: the ceiling a subset is compared against.
    pub full_replacement: InjectionScore,
    pub best_single: usize,
    pub seeds: Vec<u64>,
}

/// Second-round search over pairs {best_single, j}.
#[derive(Clone, Debug)]
pub struct PairSearch {
    pub pairs: Vec<InjectionScore>,
    pub best_pair: (usize, usize),
    pub best_score: f64,
}

/// Similarity anchors for one criterion: the video is scored against the
/// injected concept's canonical render minus the base concept's.
enum Anchors<A: Real> {
    Appearance {
        target_refs: Vec<Array4<A>>,
        source_refs: Vec<Array4<A>>,
    },
    Motion {
        target_video: Array4<A>,
        source_video: Array4<A>,
    },
}

impl<A: Real> Anchors<A> {
    fn build(
        criterion: ScanCriterion,
        p: &Prompt,
        p_star: &Prompt,
        model: &Denoiser<A>,
    ) -> Result<Self> {
        let cfg = &model.config;
        let (source_app, source_mot) = concepts_from_prompt(p);
        let (target_app, target_mot) = concepts_from_prompt(p_star);
        match criterion {
            ScanCriterion::Appearance => {
                let (sa, ta) = match (source_app, target_app) {
                    (Some(s), Some(t)) => (s, t),
                    _ => {
                        return Err(Error::config(
                            "appearance scan needs an appearance token in both prompts",
                        ))
                    }
                };
                Ok(Anchors::Appearance {
                    target_refs: canonical_appearance_refs(&ta, cfg.height, cfg.width)?,
                    source_refs: canonical_appearance_refs(&sa, cfg.height, cfg.width)?,
                })
            }
            ScanCriterion::Motion => {
                let (sm, tm) = match (source_mot, target_mot) {
                    (Some(s), Some(t)) => (s, t),
                    _ => {
                        return Err(Error::config(
                            "motion scan needs a motion token in both prompts",
                        ))
                    }
                };
                Ok(Anchors::Motion {
                    target_video: canonical_motion_render(
                        target_app,
                        &tm,
                        cfg.frames,
                        cfg.height,
                        cfg.width,
                    )?,
                    source_video: canonical_motion_render(
                        source_app,
                        &sm,
                        cfg.frames,
                        cfg.height,
                        cfg.width,
                    )?,
                })
            }
        }
    }

    /// sim(video, injected concept) − sim(video, base concept).
    fn pull(&self, video: &Array4<A>) -> Result<f64> {
        match self {
            Anchors::Appearance {
                target_refs,
                source_refs,
            } => Ok(appearance_similarity(video, target_refs)?
                - appearance_similarity(video, source_refs)?),
            Anchors::Motion {
                target_video,
                source_video,
            } => {
                Ok(motion_similarity(video, target_video)? - motion_similarity(video, source_video)?)
            }
        }
    }
}

/// The scanned prompts must be identical except for (at most) one token of
/// the criterion's concept class; anything else would confound the score.
fn validate_prompt_pair(p: &Prompt, p_star: &Prompt, criterion: ScanCriterion) -> Result<()> {
    let a = p.tokens();
    let b = p_star.tokens();
    if a.len() != b.len() {
        return Err(Error::config(
            "scanned prompts must have the same token count",
        ));
    }
    let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
    match diffs.len() {
        0 => Ok(()),
        1 => {
            let i = diffs[0];
            let class_of = |t: u16| -> Option<ScanCriterion> {
                let probe = Prompt::new(vec![t]).ok()?;
                let (app, mot) = concepts_from_prompt(&probe);
                if app.is_some() {
                    Some(ScanCriterion::Appearance)
                } else if mot.is_some() {
                    Some(ScanCriterion::Motion)
                } else {
                    None
                }
            };
            if class_of(a[i]) == Some(criterion) && class_of(b[i]) == Some(criterion) {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "scanned prompts must differ only in one {} token",
                    criterion.name()
                )))
            }
        }
        _ => Err(Error::config(
            "scanned prompts differ in more than one token",
        )),
    }
}

/// Scores one injected layer set over all seeds. Cells fan out; the seed
/// order of `per_seed` and the mean are thread-count independent.
fn score_layer_set<A: Real>(
    model: &Denoiser<A>,
    p: &Prompt,
    p_star: &Prompt,
    layers: &[usize],
    anchors: &Anchors<A>,
    cfg: &ScanConfig,
    sched: &NoiseSchedule,
) -> Result<InjectionScore> {
    let spec = InjectionSpec {
        p: p.clone(),
        p_star: p_star.clone(),
        layers: layers.to_vec(),
    };
    let per_seed: Result<Vec<f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let video =
                generate_with_injection(model, &spec, cfg.sampling_steps, cfg.cfg_scale, seed, sched)?;
            anchors.pull(&video)
        })
        .collect();
    let per_seed = per_seed?;
    let score = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(InjectionScore {
        layers: layers.to_vec(),
        per_seed,
        score,
    })
}

fn argmax_layer(singles: &[InjectionScore]) -> usize {
    let mut best = 0usize;
    for (i, s) in singles.iter().enumerate() {
        if s.score > singles[best].score {
            best = i;
        }
    }
    singles[best].layers[0]
}

/// Scores every single-layer injection of `p_star` into a `p` generation,
/// plus the all-layers calibration row, and picks the strongest layer.
pub fn layer_importance_scan<A: Real>(
    model: &Denoiser<A>,
    p: &Prompt,
    p_star: &Prompt,
    criterion: ScanCriterion,
    cfg: &ScanConfig,
    sched: &NoiseSchedule,
) -> Result<CriterionScan> {
    cfg.validate()?;
    validate_prompt_pair(p, p_star, criterion)?;
    let anchors = Anchors::build(criterion, p, p_star, model)?;

    let mut singles = Vec::with_capacity(CROSS_ATTN_LAYERS.len());
    for &layer in CROSS_ATTN_LAYERS.iter() {
        singles.push(score_layer_set(
            model,
            p,
            p_star,
            &[layer],
            &anchors,
            cfg,
            sched,
        )?);
    }
    let full_replacement =
        score_layer_set(model, p, p_star, &CROSS_ATTN_LAYERS, &anchors, cfg, sched)?;
    let best_single = argmax_layer(&singles);
    Ok(CriterionScan {
        criterion,
        singles,
        full_replacement,
        best_single,
        seeds: cfg.seeds.clone(),
    })
}

/// Scores every pair {best_single, j} over the remaining cross-attention
/// layers and returns the strongest.
pub fn greedy_pair_search<A: Real>(
    model: &Denoiser<A>,
    p: &Prompt,
    p_star: &Prompt,
    criterion: ScanCriterion,
    best_single: usize,
    cfg: &ScanConfig,
    sched: &NoiseSchedule,
) -> Result<PairSearch> {
    cfg.validate()?;
    validate_prompt_pair(p, p_star, criterion)?;
    if !CROSS_ATTN_LAYERS.contains(&best_single) {
        return Err(Error::config(format!(
            "best_single layer {best_single} carries no cross-attention"
        )));
    }
    let anchors = Anchors::build(criterion, p, p_star, model)?;

    let mut pairs = Vec::new();
    for &j in CROSS_ATTN_LAYERS.iter().filter(|&&j| j != best_single) {
        let mut layers = [best_single, j];
        layers.sort_unstable();
        pairs.push(score_layer_set(
            model, p, p_star, &layers, &anchors, cfg, sched,
        )?);
    }
    let mut best = 0usize;
    for (i, s) in pairs.iter().enumerate() {
        if s.score > pairs[best].score {
            best = i;
        }
    }
    let best_pair = (pairs[best].layers[0], pairs[best].layers[1]);
    let best_score = pairs[best].score;
    Ok(PairSearch {
        pairs,
        best_pair,
        best_score,
    })
}

/// Mean absolute deviation from score antisymmetry between a forward scan
/// (p → p_star) and its reverse (p_star → p). Ideally swapping the prompts
/// only flips every score's sign, so the deviation is metric noise; callers
/// flag it when it exceeds their tolerance.
pub fn antisymmetry_deviation(forward: &CriterionScan, reverse: &CriterionScan) -> f64 {
    let n = forward.singles.len().min(reverse.singles.len());
    let total: f64 = forward.singles[..n]
        .iter()
        .zip(&reverse.singles[..n])
        .map(|(f, r)| (f.score + r.score).abs())
        .sum();
    total / n as f64
}

/// Scan plus pair search for one criterion.
#[derive(Clone, Debug)]
pub struct CriterionReport {
    pub scan: CriterionScan,
    pub pair_search: PairSearch,
}

pub const SCAN_CSV_HEADER: &str = "criterion,layers,score,per_seed\n";

impl CriterionReport {
    /// Every scored layer set: singles in ascending layer order, then the
    /// full-replacement row, then the searched pairs.
    pub fn scores(&self) -> impl Iterator<Item = &InjectionScore> {
        self.scan
            .singles
            .iter()
            .chain([&self.scan.full_replacement])
            .chain(&self.pair_search.pairs)
    }

    fn push_csv(&self, out: &mut String) {
        let name = self.scan.criterion.name();
        for s in self.scores() {
            let layers = s
                .layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join("+");
            let per_seed = s
                .per_seed
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!("{name},{layers},{:.6},{per_seed}\n", s.score));
        }
    }

    fn push_table(&self, out: &mut String) {
        let scan = &self.scan;
        out.push_str(&format!(
            "criterion: {} (seeds {:?})\n",
            scan.criterion.name(),
            scan.seeds
        ));
        out.push_str(&format!("{:<12} {:>10}\n", "layers", "score"));
        for s in self.scores() {
            let layers = s
                .layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join("+");
            let label = if s.layers.len() == CROSS_ATTN_LAYERS.len() {
                "all".to_string()
            } else {
                layers
            };
            out.push_str(&format!("{label:<12} {:>10.4}\n", s.score));
        }
        out.push_str(&format!(
            "best single: {}   best pair: {}+{} ({:.4})\n\n",
            scan.best_single,
            self.pair_search.best_pair.0,
            self.pair_search.best_pair.1,
            self.pair_search.best_score
        ));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCAN_CSV_HEADER);
        self.push_csv(&mut out);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        self.push_table(&mut out);
        out
    }
}

/// Both criteria side by side, as produced by the layer-analysis command.
#[derive(Clone, Debug)]
pub struct ImportanceReport {
    pub appearance: CriterionReport,
    pub motion: CriterionReport,
    pub notes: Vec<String>,
}

impl ImportanceReport {
    /// Runs both scans and both pair searches on their own prompt pairs.
    pub fn build<A: Real>(
        model: &Denoiser<A>,
        appearance_pair: (&Prompt, &Prompt),
        motion_pair: (&Prompt, &Prompt),
        cfg: &ScanConfig,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let mut reports = Vec::with_capacity(2);
        for (criterion, (p, p_star)) in [
            (ScanCriterion::Appearance, appearance_pair),
            (ScanCriterion::Motion, motion_pair),
        ] {
            let scan = layer_importance_scan(model, p, p_star, criterion, cfg, sched)?;
            let pair_search =
                greedy_pair_search(model, p, p_star, criterion, scan.best_single, cfg, sched)?;
            reports.push(CriterionReport { scan, pair_search });
        }
        let motion = reports.pop().expect("two reports built");
        let appearance = reports.pop().expect("two reports built");
        Ok(Self {
            appearance,
            motion,
            notes: vec![
                "layer influence is scored with this lab's proxy metrics, not by visual inspection"
                    .to_string(),
            ],
        })
    }

    fn criteria(&self) -> [&CriterionReport; 2] {
        [&self.appearance, &self.motion]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCAN_CSV_HEADER);
        for report in self.criteria() {
            report.push_csv(&mut out);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for report in self.criteria() {
            report.push_table(&mut out);
        }
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}
