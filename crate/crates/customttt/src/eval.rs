//! Deterministic proxy metrics.
//!
//! A frozen hand-built frame encoder (foreground color histogram plus coarse
//! luminance layout) stands in for a learned image embedder; every metric is
//! "embed and take cosines", so scores are reproducible bit for bit. The
//! benchmark runner samples each method over a shared prompt/seed grid and
//! reports one row per method.

use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};
use rayon::prelude::*;

use crate::data::{
    centroid_track, concepts_from_prompt, embed_prompt, estimate_foreground,
    render_reference_images, render_video, AppearanceConcept, Prompt, Shape,
};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{Denoiser, PromptRouting};
use crate::real::Real;
use crate::rng::derive_seed;
use crate::scheduler::{ddim_sample, NoiseSchedule};

/// Histogram bins per color channel (8^3 = 512 total).
pub const HIST_BINS: usize = 8;
/// Luminance layout grid (4x4 = 16 cells).
pub const LUM_GRID: usize = 4;
/// Weight of the luminance block relative to the color histogram.
pub const LUM_WEIGHT: f64 = 0.25;
/// Total feature length.
pub const FEATURE_DIM: usize = HIST_BINS * HIST_BINS * HIST_BINS + LUM_GRID * LUM_GRID;

/// Displacement norms below this count as "no motion".
pub const DEGENERATE_MOTION: f64 = 1e-3;

/// Seed for the canonical renders that text alignment scores against; frozen
/// so scores are comparable across runs.
const CANONICAL_SEED: u64 = 9_0001;
/// Reference images per canonical appearance render.
const CANONICAL_REFS: usize = 3;

/// Unit-norm descriptor of one frame: a color histogram over the eroded
/// foreground core (falling back to the full mask, then the whole frame)
/// concatenated with a mean-centered 4x4 luminance layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeature {
    pub values: Array1<f64>,
}

impl FrameFeature {
    pub fn cosine(&self, other: &FrameFeature) -> f64 {
        self.values.dot(&other.values)
    }
}

/// Shrinks a mask by one pixel: a pixel survives only if it and its four
/// neighbors are all set (image borders never survive).
fn erode(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        y > 0
            && x > 0
            && y + 1 < h
            && x + 1 < w
            && mask[(y, x)]
            && mask[(y - 1, x)]
            && mask[(y + 1, x)]
            && mask[(y, x - 1)]
            && mask[(y, x + 1)]
    })
}

fn feature_from(frame: &ArrayView3<'_, f64>, mask: &Array2<bool>) -> FrameFeature {
    let (c, h, w) = frame.dim();
    debug_assert_eq!(c, 3);
    let hist_len = HIST_BINS * HIST_BINS * HIST_BINS;
    let mut values = Array1::<f64>::zeros(FEATURE_DIM);

    // Color histogram over masked pixels; values binned over [-1, 1].
    let bin = |v: f64| -> usize {
        let unit = (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
        ((unit * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
    };
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                let idx = (bin(frame[(0, y, x)]) * HIST_BINS + bin(frame[(1, y, x)])) * HIST_BINS
                    + bin(frame[(2, y, x)]);
                values[idx] += 1.0;
            }
        }
    }

    // Mean-centered block luminance over the whole frame. Centering makes the
    // feature exactly invariant to a uniform brightness offset.
    let mut lum = [0.0f64; LUM_GRID * LUM_GRID];
    for (by, row) in lum.chunks_mut(LUM_GRID).enumerate() {
        for (bx, cell) in row.iter_mut().enumerate() {
            let (y0, y1) = (by * h / LUM_GRID, (by + 1) * h / LUM_GRID);
            let (x0, x1) = (bx * w / LUM_GRID, (bx + 1) * w / LUM_GRID);
            let mut total = 0.0;
            let mut count = 0.0f64;
            for y in y0..y1.max(y0 + 1).min(h) {
                for x in x0..x1.max(x0 + 1).min(w) {
                    total += (frame[(0, y, x)] + frame[(1, y, x)] + frame[(2, y, x)]) / 3.0;
                    count += 1.0;
                }
            }
            *cell = total / count.max(1.0);
        }
    }
    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
    for (i, v) in lum.iter().enumerate() {
        values[hist_len + i] = (v - mean) * LUM_WEIGHT;
    }

    let norm = values.dot(&values).sqrt();
    // The histogram always holds at least one count, so the norm is >= 1.
    values.mapv_inplace(|v| v / norm);
    FrameFeature { values }
}

/// Per-frame features of an RGB video. Foreground masks come from the video's
/// own background estimate; each frame uses its eroded mask core, falling
/// back to the uneroded mask and then to the whole frame.
pub fn frame_features<A: Real>(video: &Array4<A>) -> Result<Vec<FrameFeature>> {
    let (frames, c, h, w) = video.dim();
    if c != 3 {
        return Err(Error::shape(format!("frame features need RGB video, got {c} channels")));
    }
    if frames == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("degenerate video shape {:?}", video.dim())));
    }
    let fg = estimate_foreground(video)?;
    let v = video.mapv(|x| x.as_f64());
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let binary = fg.weights[t].mapv(|w| w > 0.0);
        let core = erode(&binary);
        let mask = if core.iter().any(|&b| b) {
            core
        } else if binary.iter().any(|&b| b) {
            binary
        } else {
            Array2::from_elem(binary.dim(), true)
        };
        out.push(feature_from(&v.index_axis(Axis(0), t), &mask));
    }
    Ok(out)
}

/// Mean cosine similarity between every video frame and every reference
/// image, in feature space. References are single-frame videos; their spatial
/// size need not match the video's.
pub fn appearance_similarity<A: Real>(video: &Array4<A>, refs: &[Array4<A>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::config("appearance similarity needs at least one reference image"));
    }
    let video_feats = frame_features(video)?;
    let mut ref_feats = Vec::with_capacity(refs.len());
    for (i, r) in refs.iter().enumerate() {
        if r.dim().0 != 1 {
            return Err(Error::shape(format!(
                "reference {i} must be a single frame, got {} frames",
                r.dim().0
            )));
        }
        ref_feats.push(frame_features(r)?.remove(0));
    }
    let mut total = 0.0;
    for vf in &video_feats {
        for rf in &ref_feats {
            total += vf.cosine(rf);
        }
    }
    Ok(total / (video_feats.len() * ref_feats.len()) as f64)
}

fn displacements(track: &[(f64, f64)]) -> Vec<f64> {
    track
        .windows(2)
        .flat_map(|w| [w[1].0 - w[0].0, w[1].1 - w[0].1])
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity between the two videos' centroid displacement
/// sequences, each normalized to unit length (so amplitude cancels). When the
/// reference barely moves, the score is 1 if the candidate also barely moves,
/// else 0; the rule is symmetric.
pub fn motion_similarity<A: Real>(video: &Array4<A>, reference: &Array4<A>) -> Result<f64> {
    let (fa, fb) = (video.dim().0, reference.dim().0);
    if fa != fb {
        return Err(Error::shape(format!(
            "motion comparison needs equal frame counts, got {fa} vs {fb}"
        )));
    }
    if fa < 2 {
        return Err(Error::shape("motion comparison needs at least 2 frames"));
    }
    let da = displacements(&centroid_track(video)?);
    let db = displacements(&centroid_track(reference)?);
    let (na, nb) = (norm(&da), norm(&db));
    if na < DEGENERATE_MOTION || nb < DEGENERATE_MOTION {
        return Ok(if na < DEGENERATE_MOTION && nb < DEGENERATE_MOTION {
            1.0
        } else {
            0.0
        });
    }
    Ok(da.iter().zip(&db).map(|(a, b)| (a / na) * (b / nb)).sum())
}

/// Mean cosine similarity of consecutive frames' features.
pub fn temporal_consistency<A: Real>(video: &Array4<A>) -> Result<f64> {
    let frames = video.dim().0;
    if frames < 2 {
        return Err(Error::shape("temporal consistency needs at least 2 frames"));
    }
    let feats = frame_features(video)?;
    let total: f64 = feats.windows(2).map(|w| w[0].cosine(&w[1])).sum();
    Ok(total / (frames - 1) as f64)
}

/// Fixed-seed reference images of an appearance concept, used as the scoring
/// anchor wherever "similarity to concept X" is needed.
pub(crate) fn canonical_appearance_refs<A: Real>(
    a: &AppearanceConcept,
    h: usize,
    w: usize,
) -> Result<Vec<Array4<A>>> {
    render_reference_images(a, CANONICAL_REFS, h, w, CANONICAL_SEED)
}

/// Fixed-seed render of a motion concept (square sprite when no appearance
/// concept accompanies it), the scoring anchor for trajectory similarity.
pub(crate) fn canonical_motion_render<A: Real>(
    a: Option<AppearanceConcept>,
    m: &crate::data::MotionConcept,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Array4<A>> {
    let a = a.unwrap_or_else(|| AppearanceConcept::new(Shape::Square, 0));
    render_video(&a, m, frames, h, w, CANONICAL_SEED)
}

/// Alignment between a video and its prompt, scored against canonical
/// renders of the prompt's concepts: the appearance half compares against
/// fixed-seed reference images of the named pattern, the motion half against
/// a fixed-seed render of the named trajectory. A prompt naming only one
/// concept class puts full weight on that class.
pub fn text_alignment<A: Real>(video: &Array4<A>, prompt: &Prompt) -> Result<f64> {
    let (frames, _, h, w) = video.dim();
    let (appearance, motion) = concepts_from_prompt(prompt);
    if appearance.is_none() && motion.is_none() {
        return Err(Error::config(format!(
            "prompt {:?} names no appearance or motion concept",
            prompt.text()
        )));
    }

    let mut score = 0.0;
    let mut weight = 0.0;
    if let Some(a) = appearance {
        let refs: Vec<Array4<A>> = canonical_appearance_refs(&a, h, w)?;
        score += appearance_similarity(video, &refs)?;
        weight += 1.0;
    }
    if let Some(m) = motion {
        let canon: Array4<A> = canonical_motion_render(appearance, &m, frames, h, w)?;
        score += motion_similarity(video, &canon)?;
        weight += 1.0;
    }
    Ok(score / weight)
}

/// One contender in a benchmark run: a model plus the adapters it samples
/// with, and the parameter count its training touched.
pub struct MethodSpec<'a, A: Real> {
    pub name: String,
    pub model: &'a Denoiser<A>,
    pub adapters: Vec<&'a LoraAdapter<A>>,
    pub trainable_params: usize,
}

/// Total factor parameters across adapters (the usual `trainable_params`).
pub fn adapter_params<A: Real>(adapters: &[&LoraAdapter<A>]) -> usize {
    adapters
        .iter()
        .map(|a| a.entries.iter().map(|e| e.a.len() + e.b.len()).sum::<usize>())
        .sum()
}

/// One customization task: reference images for the appearance concept, a
/// reference video for the motion concept, and the prompts to sample.
pub struct EvalCase<A: Real> {
    pub name: String,
    pub refs: Vec<Array4<A>>,
    pub ref_video: Array4<A>,
    pub prompts: Vec<Prompt>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    pub sampling_steps: usize,
    pub cfg_scale: f64,
    pub seeds: Vec<u64>,
}

/// Metric averages for one method; every value is a mean over
/// (case, prompt, seed) cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodMetrics {
    pub text_alignment: f64,
    pub appearance_sim: f64,
    pub temporal_consistency: f64,
    pub motion_sim: f64,
}

impl MethodMetrics {
    /// Scalar used when two methods must be compared on one axis.
    pub fn joint_score(&self) -> f64 {
        (self.text_alignment + self.appearance_sim + self.motion_sim) / 3.0
    }
}

#[derive(Clone, Debug)]
pub struct MethodRow {
    pub name: String,
    pub trainable_params: usize,
    pub metrics: Option<MethodMetrics>,
    /// First failure that aborted this row, if any.
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MethodRow>,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,trainable_params,text_alignment,appearance_sim,temporal_consistency,motion_sim,error\n",
        );
        for row in &self.rows {
            let (ta, ap, tc, ms) = match &row.metrics {
                Some(m) => (
                    format!("{:.6}", m.text_alignment),
                    format!("{:.6}", m.appearance_sim),
                    format!("{:.6}", m.temporal_consistency),
                    format!("{:.6}", m.motion_sim),
                ),
                None => Default::default(),
            };
            let err = row.error.as_deref().unwrap_or("").replace(',', ";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.name, row.trainable_params, ta, ap, tc, ms, err
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("dataset: {}\nseeds: {:?}\n", self.dataset, self.seeds);
        out.push_str(&format!(
            "{:<24} {:>8} {:>10} {:>10} {:>10} {:>10}\n",
            "method", "params", "text", "appearance", "temporal", "motion"
        ));
        for row in &self.rows {
            match &row.metrics {
                Some(m) => out.push_str(&format!(
                    "{:<24} {:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
                    row.name,
                    row.trainable_params,
                    m.text_alignment,
                    m.appearance_sim,
                    m.temporal_consistency,
                    m.motion_sim
                )),
                None => out.push_str(&format!(
                    "{:<24} {:>8} failed: {}\n",
                    row.name,
                    row.trainable_params,
                    row.error.as_deref().unwrap_or("unknown")
                )),
            }
        }
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}

/// Samples every (method, case, prompt, seed) cell and averages the four
/// metrics per method. Rows keep the order methods were given in; a failure
/// inside a row records the error and moves on to the next method.
pub fn benchmark<A: Real>(
    methods: &[MethodSpec<'_, A>],
    cases: &[EvalCase<A>],
    sched: &NoiseSchedule,
    cfg: &BenchmarkConfig,
) -> Result<MetricsReport> {
    if methods.is_empty() || cases.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::config("benchmark needs methods, cases, and seeds"));
    }
    if cases.iter().any(|c| c.prompts.is_empty()) {
        return Err(Error::config("every benchmark case needs at least one prompt"));
    }

    // Flat cell grid so work can fan out; collect preserves cell order, and
    // the serial reduction below makes the result thread-count independent.
    let cells: Vec<(usize, usize, u64)> = cases
        .iter()
        .enumerate()
        .flat_map(|(ci, case)| {
            (0..case.prompts.len())
                .flat_map(move |pi| cfg.seeds.iter().map(move |&s| (ci, pi, s)))
        })
        .collect();

    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let outcomes: Vec<Result<[f64; 4]>> = cells
            .par_iter()
            .map(|&(ci, pi, seed)| {
                let case = &cases[ci];
                let prompt = &case.prompts[pi];
                let cell_seed = derive_seed(
                    seed,
                    &["bench", &method.name, &case.name, &pi.to_string()],
                );
                let routing = PromptRouting::uniform(&embed_prompt(
                    prompt,
                    method.model.config.embed_dim,
                ));
                let (sample, _) = ddim_sample(
                    method.model,
                    &routing,
                    &method.adapters,
                    cfg.sampling_steps,
                    cfg.cfg_scale,
                    cell_seed,
                    sched,
                    None,
                )?;
                Ok([
                    text_alignment(&sample, prompt)?,
                    appearance_similarity(&sample, &case.refs)?,
                    temporal_consistency(&sample)?,
                    motion_similarity(&sample, &case.ref_video)?,
                ])
            })
            .collect();

        let mut sums = [0.0f64; 4];
        let mut failure: Option<String> = None;
        for (&(ci, pi, seed), outcome) in cells.iter().zip(outcomes) {
            match outcome {
                Ok(vals) => {
                    for (s, v) in sums.iter_mut().zip(vals) {
                        *s += v;
                    }
                }
                Err(e) => {
                    failure = Some(format!(
                        "case {} prompt {pi} seed {seed}: {e}",
                        cases[ci].name
                    ));
                    break;
                }
            }
        }

        rows.push(MethodRow {
            name: method.name.clone(),
            trainable_params: method.trainable_params,
            metrics: failure.is_none().then(|| MethodMetrics {
                text_alignment: sums[0] / cells.len() as f64,
                appearance_sim: sums[1] / cells.len() as f64,
                temporal_consistency: sums[2] / cells.len() as f64,
                motion_sim: sums[3] / cells.len() as f64,
            }),
            error: failure,
        });
    }

    Ok(MetricsReport {
        dataset: format!(
            "{} case(s), {} cell(s) per method",
            cases.len(),
            cells.len()
        ),
        seeds: cfg.seeds.clone(),
        rows,
        notes: vec![
            "motion_sim is this lab's own displacement-cosine column, not a standard metric"
                .to_string(),
        ],
    })
}
