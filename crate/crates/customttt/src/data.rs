//! Procedural concept world.
//!
//! Appearance concepts are two-color sprite fills drawn from a fixed palette;
//! motion concepts are analytic trajectories. Videos are rendered with 4x4
//! supersampled coverage so centroids move smoothly at subpixel resolution.
//! The prompt embedder is a frozen seeded table: deterministic, injective over
//! the vocabulary, zero rows for padding.
//!
//! Palette entries sit on the centers of the 8-bin-per-channel histogram grid
//! used by the eval features, and every pattern owns a disjoint pair of
//! palette colors. Interior sprite pixels carry pure palette colors, which is
//! what keeps same-concept histogram similarity near 1 and cross-concept
//! similarity near 0.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{derive_rng, derive_seed};

/// Frozen seed of the prompt-embedding table. Changing it changes every
/// embedding; it is part of the artifact definition.
pub const EMBED_TABLE_SEED: u64 = 0xC777_0001;

/// Seed for canonical renders used as metric anchors.
pub const CANONICAL_SEED: u64 = 17;

pub const MAX_PROMPT_LEN: usize = 8;
pub const DEFAULT_SPRITE_SIZE: f64 = 0.4;
pub const DEFAULT_AMPLITUDE: f64 = 0.3;
pub const DEFAULT_REF_COUNT: usize = 5;

/// Background gray level; texture jitter stays within +-TEXTURE_AMP of it.
pub const BG_GRAY: f64 = -0.1;
pub const TEXTURE_AMP: f64 = 0.02;

/// Foreground mask threshold on the max-channel deviation from background.
pub const FG_THRESHOLD: f64 = 0.1;

const SUPERSAMPLE: usize = 4;

/// 16 colors on histogram-bin centers (odd multiples of 0.125). Each has at
/// least one channel at magnitude >= 0.375 so sprites always clear the
/// foreground threshold against the gray background.
pub const PALETTE: [[f64; 3]; 16] = [
    [0.875, -0.875, -0.875],
    [-0.875, 0.875, -0.875],
    [-0.875, -0.875, 0.875],
    [0.875, 0.875, -0.875],
    [0.875, -0.875, 0.875],
    [-0.875, 0.875, 0.875],
    [0.875, 0.375, -0.625],
    [0.625, -0.125, 0.875],
    [-0.625, 0.875, -0.125],
    [0.875, -0.375, 0.375],
    [-0.375, 0.625, 0.875],
    [0.375, 0.875, -0.625],
    [0.875, 0.875, 0.625],
    [-0.875, -0.375, -0.625],
    [0.625, 0.125, -0.875],
    [-0.125, -0.875, 0.375],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub fn noun(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_noun(s: &str) -> Option<Self> {
        match s {
            "square" => Some(Shape::Square),
            "circle" => Some(Shape::Circle),
            "triangle" => Some(Shape::Triangle),
            _ => None,
        }
    }

    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Circle => u * u + v * v <= 1.0,
            // Apex up (image y grows downward): base at v = 1.
            Shape::Triangle => v <= 1.0 && v >= 2.0 * u.abs() - 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppearanceConcept {
    pub shape: Shape,
    pub pattern_id: u8,
    pub size: f64,
}

impl AppearanceConcept {
    pub fn new(shape: Shape, pattern_id: u8) -> Self {
        Self {
            shape,
            pattern_id,
            size: DEFAULT_SPRITE_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trajectory {
    LinearRight,
    LinearUp,
    Diagonal,
    Circular,
    Zigzag,
    Bounce,
}

pub const TRAJECTORIES: [Trajectory; 6] = [
    Trajectory::LinearRight,
    Trajectory::LinearUp,
    Trajectory::Diagonal,
    Trajectory::Circular,
    Trajectory::Zigzag,
    Trajectory::Bounce,
];

impl Trajectory {
    pub fn index(self) -> u8 {
        TRAJECTORIES.iter().position(|&t| t == self).unwrap() as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        TRAJECTORIES.get(i as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionConcept {
    pub trajectory: Trajectory,
    pub amplitude: f64,
    pub phase_seed: u64,
}

impl MotionConcept {
    pub fn new(trajectory: Trajectory) -> Self {
        Self {
            trajectory,
            amplitude: DEFAULT_AMPLITUDE,
            phase_seed: 0,
        }
    }
}

/// Sprite center at frame `t` of `f_count`, in continuous pixel coordinates
/// (pixel (ix, iy) spans [ix, ix+1) x [iy, iy+1)).
pub fn trajectory_point(
    m: &MotionConcept,
    t: usize,
    f_count: usize,
    h: usize,
    w: usize,
) -> (f64, f64) {
    let u = if f_count > 1 {
        t as f64 / (f_count - 1) as f64
    } else {
        0.5
    };
    let (cx0, cy0) = (w as f64 / 2.0, h as f64 / 2.0);
    let ax = m.amplitude * w as f64;
    let ay = m.amplitude * h as f64;
    match m.trajectory {
        Trajectory::LinearRight => (cx0 + ax * (u - 0.5), cy0),
        Trajectory::LinearUp => (cx0, cy0 + ay * (0.5 - u)),
        Trajectory::Diagonal => (cx0 + ax * (u - 0.5), cy0 + ay * (0.5 - u)),
        Trajectory::Circular => {
            let phase = std::f64::consts::TAU * (m.phase_seed % 8) as f64 / 8.0;
            let th = std::f64::consts::TAU * u + phase;
            (cx0 + 0.5 * ax * th.cos(), cy0 + 0.5 * ay * th.sin())
        }
        Trajectory::Zigzag => {
            // Triangle wave, two periods over the clip.
            let s = (2.0 * u).fract();
            let tri = 1.0 - 4.0 * (s - 0.5).abs();
            (cx0 + ax * (u - 0.5), cy0 + 0.5 * ay * tri)
        }
        Trajectory::Bounce => {
            let floor_y = cy0 + 0.5 * ay;
            (
                cx0,
                floor_y - ay * (std::f64::consts::PI * u * 2.0).sin().abs(),
            )
        }
    }
}

/// Two palette colors per pattern; the pair (2k, 2k+1) is unique to pattern k.
fn pattern_colors(pattern_id: u8) -> ([f64; 3], [f64; 3]) {
    let k = (pattern_id as usize % 8) * 2;
    (PALETTE[k], PALETTE[k + 1])
}

/// Fill color at sprite-relative coordinates (u, v) in [-1, 1]^2. Pattern
/// cells are anchored to the sprite center, so the fill travels with it.
fn pattern_color(pattern_id: u8, u: f64, v: f64) -> [f64; 3] {
    let (ca, cb) = pattern_colors(pattern_id);
    let cell_u = (2.0 * (u + 1.0)).floor() as i64;
    let cell_v = (2.0 * (v + 1.0)).floor() as i64;
    let pick_b = match pattern_id % 4 {
        0 => false,                        // solid
        1 => (cell_u + cell_v).rem_euclid(2) == 1, // checker
        2 => cell_v.rem_euclid(2) == 1,    // horizontal stripes
        _ => cell_u.rem_euclid(2) == 1,    // vertical stripes
    };
    if pick_b {
        cb
    } else {
        ca
    }
}

fn background_texture(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut rng = derive_rng(seed, &["texture"]);
    Array2::from_shape_simple_fn((h, w), || {
        BG_GRAY + rng.random_range(-TEXTURE_AMP..TEXTURE_AMP)
    })
}

/// Renders one sprite frame over the given background texture.
fn render_frame<A: Real>(
    frame: &mut ndarray::ArrayViewMut3<'_, A>,
    bg: &Array2<f64>,
    shape: Shape,
    pattern_id: u8,
    cx: f64,
    cy: f64,
    half: f64,
) {
    let (_c, h, w) = frame.dim();
    let inv = 1.0 / SUPERSAMPLE as f64;
    for iy in 0..h {
        for ix in 0..w {
            // Cheap reject: pixel square fully outside the sprite bound.
            let dx = (ix as f64 + 0.5 - cx).abs();
            let dy = (iy as f64 + 0.5 - cy).abs();
            let g = bg[[iy, ix]];
            if dx > half + 1.0 || dy > half + 1.0 {
                for c in 0..3 {
                    frame[[c, iy, ix]] = A::real(g);
                }
                continue;
            }
            let mut cover = 0usize;
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = ix as f64 + (sx as f64 + 0.5) * inv;
                    let py = iy as f64 + (sy as f64 + 0.5) * inv;
                    let u = (px - cx) / half;
                    let v = (py - cy) / half;
                    if shape.contains(u, v) {
                        let col = pattern_color(pattern_id, u, v);
                        for c in 0..3 {
                            acc[c] += col[c];
                        }
                        cover += 1;
                    }
                }
            }
            if cover == 0 {
                for c in 0..3 {
                    frame[[c, iy, ix]] = A::real(g);
                }
            } else {
                let frac = cover as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    let fg = acc[c] / cover as f64;
                    frame[[c, iy, ix]] = A::real(g * (1.0 - frac) + fg * frac);
                }
            }
        }
    }
}

/// Renders an F-frame sprite video. Values stay in [-1, 1]; the render is
/// deterministic per (concepts, dims, seed).
pub fn render_video<A: Real>(
    a: &AppearanceConcept,
    m: &MotionConcept,
    f_count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Array4<A>> {
    if f_count == 0 || h == 0 || w == 0 {
        return Err(Error::config("render_video needs positive dimensions"));
    }
    let half = a.size * h as f64 / 2.0;
    for t in 0..f_count {
        let (cx, cy) = trajectory_point(m, t, f_count, h, w);
        if cx - half < 0.0 || cx + half > w as f64 || cy - half < 0.0 || cy + half > h as f64 {
            return Err(Error::data(format!(
                "trajectory exits frame at t={t}: center ({cx:.2},{cy:.2}), half-extent {half:.2}"
            )));
        }
    }
    let bg = background_texture(h, w, seed);
    let mut video = Array4::<A>::zeros((f_count, 3, h, w));
    for t in 0..f_count {
        let (cx, cy) = trajectory_point(m, t, f_count, h, w);
        let mut frame = video.index_axis_mut(ndarray::Axis(0), t);
        render_frame(&mut frame, &bg, a.shape, a.pattern_id, cx, cy, half);
    }
    Ok(video)
}

/// `n` single-frame reference renders at distinct jittered positions/scales.
pub fn render_reference_images<A: Real>(
    a: &AppearanceConcept,
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<Array4<A>>> {
    if n == 0 {
        return Err(Error::config("reference image count must be >= 1"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tag = format!("ref{i}");
        let mut rng = derive_rng(seed, &["refimg", &tag]);
        let scale = rng.random_range(0.85..1.15);
        let half = a.size * scale * h as f64 / 2.0;
        let margin = 0.5;
        let cx = rng.random_range(half + margin..w as f64 - half - margin);
        let cy = rng.random_range(half + margin..h as f64 - half - margin);
        let bg = background_texture(h, w, derive_seed(seed, &["refimg", &tag]));
        let mut img = Array4::<A>::zeros((1, 3, h, w));
        let mut frame = img.index_axis_mut(ndarray::Axis(0), 0);
        render_frame(&mut frame, &bg, a.shape, a.pattern_id, cx, cy, half);
        out.push(img);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Prompts and the frozen embedder
// ---------------------------------------------------------------------------

pub const VOCAB: [&str; 23] = [
    "<null>", "a", "square", "circle", "triangle", "sks0", "sks1", "sks2", "sks3", "sks4", "sks5",
    "sks6", "sks7", "mot0", "mot1", "mot2", "mot3", "mot4", "mot5", "plain", "grid", "dusk",
    "dawn",
];

pub const NULL_TOKEN: u16 = 0;
const SKS_BASE: u16 = 5;
const MOT_BASE: u16 = 13;
const BG_BASE: u16 = 19;

pub fn token_id(token: &str) -> Option<u16> {
    VOCAB.iter().position(|&t| t == token).map(|i| i as u16)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Prompt {
    tokens: Vec<u16>,
}

impl Prompt {
    pub fn new(tokens: Vec<u16>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > MAX_PROMPT_LEN {
            return Err(Error::config(format!(
                "prompt length must be 1..={MAX_PROMPT_LEN}, got {}",
                tokens.len()
            )));
        }
        for &t in &tokens {
            if t as usize >= VOCAB.len() {
                return Err(Error::config(format!("token id {t} out of vocabulary")));
            }
        }
        let n_sks = tokens
            .iter()
            .filter(|&&t| (SKS_BASE..MOT_BASE).contains(&t))
            .count();
        let n_mot = tokens
            .iter()
            .filter(|&&t| (MOT_BASE..BG_BASE).contains(&t))
            .count();
        if n_sks > 1 || n_mot > 1 {
            return Err(Error::config(
                "prompt may contain at most one sks token and one mot token",
            ));
        }
        Ok(Self { tokens })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for word in text.split_whitespace() {
            let id = token_id(word)
                .ok_or_else(|| Error::config(format!("unknown token {word:?}")))?;
            tokens.push(id);
        }
        Self::new(tokens)
    }

    pub fn null() -> Self {
        Self {
            tokens: vec![NULL_TOKEN],
        }
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|&t| VOCAB[t as usize])
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Pattern id of the sks token, when present.
    pub fn appearance_token(&self) -> Option<u8> {
        self.tokens
            .iter()
            .find(|&&t| (SKS_BASE..MOT_BASE).contains(&t))
            .map(|&t| (t - SKS_BASE) as u8)
    }

    /// Trajectory index of the mot token, when present.
    pub fn motion_token(&self) -> Option<u8> {
        self.tokens
            .iter()
            .find(|&&t| (MOT_BASE..BG_BASE).contains(&t))
            .map(|&t| (t - MOT_BASE) as u8)
    }

    pub fn shape(&self) -> Option<Shape> {
        self.tokens
            .iter()
            .find_map(|&t| Shape::from_noun(VOCAB[t as usize]))
    }

    /// Same prompt with one background token appended.
    fn with_background(&self, bg_index: u16) -> Prompt {
        let mut tokens = self.tokens.clone();
        tokens.push(BG_BASE + bg_index);
        Prompt { tokens }
    }
}

/// "a sks{pattern} {shape} mot{traj}".
pub fn concept_prompt(pattern_id: u8, shape: Shape, trajectory: Trajectory) -> Prompt {
    Prompt {
        tokens: vec![
            token_id("a").unwrap(),
            SKS_BASE + pattern_id as u16,
            token_id(shape.noun()).unwrap(),
            MOT_BASE + trajectory.index() as u16,
        ],
    }
}

/// "a sks{pattern} {shape}".
pub fn appearance_prompt(pattern_id: u8, shape: Shape) -> Prompt {
    Prompt {
        tokens: vec![
            token_id("a").unwrap(),
            SKS_BASE + pattern_id as u16,
            token_id(shape.noun()).unwrap(),
        ],
    }
}

/// Four diversity prompts: one per background word, replacing any background
/// already present. A pathologically long base is truncated to make room.
pub fn background_variants(base: &Prompt) -> Vec<Prompt> {
    let mut tokens: Vec<u16> = base
        .tokens
        .iter()
        .copied()
        .filter(|&t| !(BG_BASE..VOCAB.len() as u16).contains(&t))
        .collect();
    tokens.truncate(MAX_PROMPT_LEN - 1);
    let stripped = Prompt { tokens };
    (0..4).map(|i| stripped.with_background(i)).collect()
}

/// Five evaluation prompts: the base prompt plus its background variants.
pub fn eval_prompts(base: &Prompt) -> Vec<Prompt> {
    let mut v = vec![base.clone()];
    v.extend(background_variants(base));
    v
}

/// Token embedding table: one frozen unit vector per vocabulary entry.
fn token_embedding(token: u16, d: usize) -> Array1<f64> {
    let mut rng = derive_rng(EMBED_TABLE_SEED, &["embed", VOCAB[token as usize]]);
    let mut v = crate::rng::normal_array::<f64, _>(&mut rng, d);
    let norm = v.mapv(|x| x * x).sum().sqrt();
    v.mapv_inplace(|x| x / norm);
    v
}

/// L x d prompt embedding; rows past the prompt length are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding<A: Real> {
    pub tokens: Array2<A>,
    pub source_tokens: Vec<u16>,
}

impl<A: Real> PromptEmbedding<A> {
    pub fn len(&self) -> usize {
        self.source_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_tokens.is_empty()
    }
}

pub fn embed_prompt<A: Real>(p: &Prompt, d: usize) -> PromptEmbedding<A> {
    let mut tokens = Array2::<A>::zeros((MAX_PROMPT_LEN, d));
    for (j, &t) in p.tokens().iter().enumerate() {
        let row = token_embedding(t, d);
        for (k, &x) in row.iter().enumerate() {
            tokens[[j, k]] = A::real(x);
        }
    }
    PromptEmbedding {
        tokens,
        source_tokens: p.tokens().to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Concept lookup for metrics
// ---------------------------------------------------------------------------

/// Concepts named by a prompt's tokens. Appearance needs an sks token (shape
/// noun defaults to square); motion needs a mot token.
pub fn concepts_from_prompt(p: &Prompt) -> (Option<AppearanceConcept>, Option<MotionConcept>) {
    let appearance = p.appearance_token().map(|pattern| {
        AppearanceConcept::new(p.shape().unwrap_or(Shape::Square), pattern)
    });
    let motion = p
        .motion_token()
        .and_then(Trajectory::from_index)
        .map(MotionConcept::new);
    (appearance, motion)
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CorpusItem<A: Real> {
    pub video: Array4<A>,
    pub prompt: Prompt,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeldOut {
    pub patterns: Vec<u8>,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Clone, Debug)]
pub struct Corpus<A: Real> {
    pub items: Vec<CorpusItem<A>>,
    pub held_out: HeldOut,
}

/// Cartesian product of concepts minus pairs touching a held-out id,
/// `per_pair` renders each, prompts "a sks{i} {shape} mot{j}".
pub fn make_corpus<A: Real>(
    appearances: &[AppearanceConcept],
    motions: &[MotionConcept],
    per_pair: usize,
    held_out: &HeldOut,
    f_count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Corpus<A>> {
    if held_out.patterns.is_empty() && held_out.trajectories.is_empty() {
        return Err(Error::config("held-out set must be nonempty"));
    }
    for p in &held_out.patterns {
        if !appearances.iter().any(|a| a.pattern_id == *p) {
            return Err(Error::config(format!(
                "held-out pattern {p} not in appearance list"
            )));
        }
    }
    for t in &held_out.trajectories {
        if !motions.iter().any(|m| m.trajectory == *t) {
            return Err(Error::config(
                "held-out trajectory not in motion list".to_string(),
            ));
        }
    }
    if per_pair == 0 {
        return Err(Error::config("per_pair must be >= 1"));
    }

    let mut items = Vec::new();
    let mut idx = 0usize;
    for a in appearances {
        if held_out.patterns.contains(&a.pattern_id) {
            continue;
        }
        for m in motions {
            if held_out.trajectories.contains(&m.trajectory) {
                continue;
            }
            for _ in 0..per_pair {
                let tag = format!("item{idx}");
                let video = render_video(a, m, f_count, h, w, derive_seed(seed, &["corpus", &tag]))?;
                let prompt = concept_prompt(a.pattern_id, a.shape, m.trajectory);
                items.push(CorpusItem { video, prompt });
                idx += 1;
            }
        }
    }
    if items.is_empty() {
        return Err(Error::config(
            "corpus is empty after held-out exclusion".to_string(),
        ));
    }
    Ok(Corpus {
        items,
        held_out: held_out.clone(),
    })
}

/// Writes a corpus directory: a human-readable manifest plus one container
/// per item (array "video", prompt stored as ids and display text).
pub fn save_corpus<A: Real>(corpus: &Corpus<A>, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("items = {}\n", corpus.items.len()));
    manifest.push_str(&format!(
        "held_out_patterns = {}\n",
        join_nums(corpus.held_out.patterns.iter().map(|p| p.to_string()))
    ));
    manifest.push_str(&format!(
        "held_out_trajectories = {}\n",
        join_nums(
            corpus
                .held_out
                .trajectories
                .iter()
                .map(|t| t.index().to_string())
        )
    ));
    for (i, item) in corpus.items.iter().enumerate() {
        let file = format!("item{i:04}.cttt");
        manifest.push_str(&format!(
            "item{i}.file = {file}\nitem{i}.tokens = {}\nitem{i}.prompt = {}\n",
            join_nums(item.prompt.tokens().iter().map(|t| t.to_string())),
            item.prompt.text()
        ));
        let mut c = Container::new();
        c.set_meta("prompt", item.prompt.text());
        c.set_meta(
            "tokens",
            join_nums(item.prompt.tokens().iter().map(|t| t.to_string())),
        );
        c.insert("video", &item.video);
        c.save(dir.join(file))?;
    }
    std::fs::write(dir.join("corpus.txt"), manifest)?;
    Ok(())
}

pub fn load_corpus<A: Real>(dir: &std::path::Path) -> Result<Corpus<A>> {
    let manifest = std::fs::read_to_string(dir.join("corpus.txt"))?;
    let map = parse_kv(&manifest)?;
    let count: usize = get_parsed(&map, "items")?;
    let held_out = HeldOut {
        patterns: parse_num_list(map.get("held_out_patterns").map(|s| s.as_str()).unwrap_or(""))?,
        trajectories: parse_num_list::<u8>(
            map.get("held_out_trajectories")
                .map(|s| s.as_str())
                .unwrap_or(""),
        )?
        .into_iter()
        .map(|i| {
            Trajectory::from_index(i)
                .ok_or_else(|| Error::data(format!("bad trajectory index {i}")))
        })
        .collect::<Result<Vec<_>>>()?,
    };
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let file = map
            .get(&format!("item{i}.file"))
            .ok_or_else(|| Error::data(format!("corpus manifest missing item{i}.file")))?;
        let c = Container::load(dir.join(file))?;
        let video = c
            .get::<A>("video")?
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::data("corpus video is not 4-dimensional".to_string()))?;
        let tokens = parse_num_list::<u16>(c.require_meta("tokens")?)?;
        items.push(CorpusItem {
            video,
            prompt: Prompt::new(tokens)?,
        });
    }
    Ok(Corpus { items, held_out })
}

fn join_nums(it: impl Iterator<Item = String>) -> String {
    it.collect::<Vec<_>>().join(",")
}

fn parse_num_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::data(format!("bad number {p:?} in list")))
        })
        .collect()
}

fn parse_kv(text: &str) -> Result<IndexMap<String, String>> {
    let mut map = IndexMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("bad manifest line {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn get_parsed<T: std::str::FromStr>(map: &IndexMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::data(format!("manifest missing key {key:?}")))?
        .parse::<T>()
        .map_err(|_| Error::data(format!("manifest key {key:?} not parseable")))
}

// ---------------------------------------------------------------------------
// Foreground extraction and centroid tracking
// ---------------------------------------------------------------------------

/// Per-video background estimate and per-frame foreground weight masks.
///
/// The background starts as the per-pixel temporal median. Pixels whose
/// median deviates from the global scalar median by more than FG_THRESHOLD
/// are sprite ghosts (the sprite parked there for most frames, or F = 1);
/// those fall back to the scalar median. Without that repair, static or
/// self-overlapping trajectories would swallow their own foreground.
#[derive(Clone, Debug)]
pub struct Foreground {
    pub background: Array3<f64>,
    /// Per frame: max-channel |frame - background|, zeroed below threshold.
    pub weights: Vec<Array2<f64>>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn estimate_foreground<A: Real>(video: &Array4<A>) -> Result<Foreground> {
    let (f, c, h, w) = video.dim();
    if f == 0 || c == 0 {
        return Err(Error::shape("empty video".to_string()));
    }
    let v = video.mapv(|x| x.as_f64());

    let mut background = Array3::<f64>::zeros((c, h, w));
    let mut scratch = vec![0.0f64; f];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                for (t, s) in scratch.iter_mut().enumerate() {
                    *s = v[[t, ci, y, x]];
                }
                background[[ci, y, x]] = median(&mut scratch);
            }
        }
    }

    let mut all: Vec<f64> = v.iter().copied().collect();
    let scalar = median(&mut all);
    for y in 0..h {
        for x in 0..w {
            let dev = (0..c)
                .map(|ci| (background[[ci, y, x]] - scalar).abs())
                .fold(0.0, f64::max);
            if dev > FG_THRESHOLD {
                for ci in 0..c {
                    background[[ci, y, x]] = scalar;
                }
            }
        }
    }

    let mut weights = Vec::with_capacity(f);
    for t in 0..f {
        let mut wmask = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let dev = (0..c)
                    .map(|ci| (v[[t, ci, y, x]] - background[[ci, y, x]]).abs())
                    .fold(0.0, f64::max);
                if dev > FG_THRESHOLD {
                    wmask[[y, x]] = dev;
                }
            }
        }
        weights.push(wmask);
    }
    Ok(Foreground {
        background,
        weights,
    })
}

/// Intensity-weighted foreground centroid per frame, in pixel-center
/// coordinates. Errors when any frame has an empty mask.
pub fn centroid_track<A: Real>(video: &Array4<A>) -> Result<Vec<(f64, f64)>> {
    let fg = estimate_foreground(video)?;
    let (h, w) = fg.weights[0].dim();
    let mut track = Vec::with_capacity(fg.weights.len());
    for (t, wmask) in fg.weights.iter().enumerate() {
        let mut sum = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in 0..h {
            for x in 0..w {
                let wgt = wmask[[y, x]];
                sum += wgt;
                sx += wgt * (x as f64 + 0.5);
                sy += wgt * (y as f64 + 0.5);
            }
        }
        if sum <= 0.0 {
            return Err(Error::data(format!("no foreground in frame {t}")));
        }
        track.push((sx / sum, sy / sum));
    }
    Ok(track)
}
