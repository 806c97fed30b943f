//! Synthetic grounding corpus generator.
//!
//! Each sample pairs a video token grid with a bracketed caption. The
//! caption's subject and action words are painted into the grid as channel
//! directions drawn from the same hash embedding family the scoring side
//! uses, so a matching sentence embedding genuinely prefers the annotated
//! window. Distractor events reuse the same vocabulary at reduced gain:
//! they look similar enough to punish sloppy models but never outscore an
//! exact match when the noise floor is zero.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder, HashEmbedder};
use crate::refiner::{GridBuffer, RefineError};
use crate::seeding::{derive_seed, derive_seed_indexed, rng_from};
use crate::tensor::{read_tensor, write_tensor, TensorIoError};

// ── Vocabulary ──

const SUBJECTS: [&str; 24] = [
    "panda", "horse", "dog", "cat", "girl", "boy", "man", "woman", "bear", "rabbit", "monkey",
    "bird", "elephant", "tiger", "fox", "deer", "lion", "otter", "goat", "sheep", "pig", "duck",
    "owl", "wolf",
];

const ACTIONS: [&str; 24] = [
    "running", "jumping", "eating", "sleeping", "climbing", "swimming", "digging", "rolling",
    "walking", "drinking", "flying", "hiding", "barking", "stretching", "spinning", "crawling",
    "sliding", "waving", "bouncing", "sniffing", "pouncing", "grazing", "diving", "hopping",
];

/// Sliding-window widths used to enumerate candidate spans.
pub const CANDIDATE_WIDTHS: [usize; 4] = [4, 8, 16, 32];

const GT_WIDTH_MIN: usize = 4;
const GT_WIDTH_MAX: usize = 5;
const MAX_ACTIONS: usize = 3;
// How many times a sample rolls for an extra background event.
const DISTRACTOR_ATTEMPTS: usize = 2;
// Frames kept clear between painted events.
const PLACEMENT_GAP: usize = 1;

// ── Errors ──

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad generator config: {detail}")]
    BadConfig { detail: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Grid(#[from] RefineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor file: {0}")]
    TensorIo(#[from] TensorIoError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path} line {line}: {detail}")]
    BadManifest {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("dataset is missing {path}")]
    MissingFile { path: String },
}

// ── Config ──

/// Knobs for the generator. `action_gain` scales action directions against
/// the subject direction, `noise` is the per-channel Gaussian floor, and
/// `distractor_gain` dims background events relative to the true one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub slots: usize,
    pub frames: usize,
    pub channels: usize,
    pub action_gain: f64,
    pub noise: f64,
    pub distractor_rate: f64,
    pub distractor_gain: f64,
    /// How many subject and action words are in play (caps both lists).
    pub concepts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            count: 96,
            slots: 8,
            frames: 64,
            channels: 32,
            action_gain: 1.5,
            noise: 0.25,
            distractor_rate: 0.5,
            distractor_gain: 0.8,
            concepts: SUBJECTS.len(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |detail: String| Err(SynthError::BadConfig { detail });
        if self.count == 0 {
            return fail("count must be positive".into());
        }
        if self.slots < 2 {
            return fail(format!("need at least 2 slots, got {}", self.slots));
        }
        if self.frames < 8 {
            return fail(format!("need at least 8 frames, got {}", self.frames));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        // Wrong-action distractors need a word outside the caption even
        // when the caption already uses MAX_ACTIONS of them.
        if self.concepts <= MAX_ACTIONS || self.concepts > SUBJECTS.len() {
            return fail(format!(
                "concepts must lie in {}..={}, got {}",
                MAX_ACTIONS + 1,
                SUBJECTS.len(),
                self.concepts
            ));
        }
        if !(self.action_gain > 0.0 && self.action_gain.is_finite()) {
            return fail(format!("action_gain must be positive, got {}", self.action_gain));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return fail(format!(
                "distractor_rate must lie in [0, 1], got {}",
                self.distractor_rate
            ));
        }
        // Strictly below 1 so an exact match always outranks an echo.
        if !(self.distractor_gain > 0.0 && self.distractor_gain < 1.0) {
            return fail(format!(
                "distractor_gain must lie in (0, 1), got {}",
                self.distractor_gain
            ));
        }
        Ok(())
    }

    /// The embedder that painted the grids. Anything scoring against these
    /// grids must use this exact embedder, so it travels with the config.
    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(derive_seed(self.seed, "embed"), self.channels)
    }
}

// ── Samples ──

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    /// Bracketed caption tree in treebank notation.
    pub tree: String,
    pub grid: GridBuffer,
    /// Frame window `[start, end)` the caption describes.
    pub gt: (usize, usize),
    pub candidates: Vec<(usize, usize)>,
}

/// Sliding candidate windows over `frames`: every width in
/// [`CANDIDATE_WIDTHS`] that fits, stepped by a quarter of the width.
pub fn candidate_windows(frames: usize) -> Vec<(usize, usize)> {
    let mut windows = Vec::new();
    for &width in &CANDIDATE_WIDTHS {
        if width > frames {
            continue;
        }
        let stride = (width / 4).max(1);
        let mut start = 0;
        while start + width <= frames {
            windows.push((start, start + width));
            start += stride;
        }
    }
    windows
}

// ── Generation ──

#[derive(Clone, Copy, Debug)]
enum DistractorKind {
    /// Right subject, an action the caption never mentions.
    WrongAction,
    /// A caption action with nobody performing it.
    MissingSubject,
    /// Right subject doing a strict subset of the caption's actions.
    PartialActions,
}

/// One painted region: `parts` are disjoint frame spans, each optionally
/// tagged with an index into the sample's direction pool.
struct Paint {
    slots: Vec<usize>,
    parts: Vec<(usize, usize, Option<usize>)>,
    with_subject: bool,
    gain: f64,
}

/// Generate the full corpus for `config`. Sample `i` draws every choice
/// from its own stream, so corpora are reproducible and insertion order
/// never matters.
pub fn generate(config: &SynthConfig) -> Result<Vec<GroundingSample>, SynthError> {
    config.validate()?;
    let embedder = config.embedder();
    (0..config.count)
        .map(|i| generate_one(config, &embedder, i))
        .collect()
}

fn generate_one(
    cfg: &SynthConfig,
    embedder: &HashEmbedder,
    index: usize,
) -> Result<GroundingSample, SynthError> {
    let mut rng = rng_from(derive_seed_indexed(cfg.seed, "sample", index as u64));

    // Caption: one subject, one to three distinct actions.
    let subject = SUBJECTS[rng.gen_range(0..cfg.concepts)];
    let k = rng.gen_range(1..=MAX_ACTIONS);
    let action_ids = sorted_sample(&mut rng, cfg.concepts, k);
    let actions: Vec<&str> = action_ids.iter().map(|&j| ACTIONS[j]).collect();
    let tree = caption_tree(subject, &actions);

    // True window, its subject slots, and the action timeline: the actions
    // partition the window in caption order.
    let width = rng.gen_range(GT_WIDTH_MIN..=GT_WIDTH_MAX);
    let start = rng.gen_range(0..=cfg.frames - width);
    let gt = (start, start + width);
    let gt_slots = sorted_sample(&mut rng, cfg.slots, cfg.slots / 2);
    let gt_spans = partition_span(&mut rng, gt, k);

    let mut pool: Vec<Vec<f64>> = Vec::with_capacity(k + DISTRACTOR_ATTEMPTS);
    for action in &actions {
        pool.push(embedder.embed(action)?);
    }
    let mut paints = vec![Paint {
        slots: gt_slots,
        parts: gt_spans
            .iter()
            .enumerate()
            .map(|(j, &(a, b))| (a, b, Some(j)))
            .collect(),
        with_subject: true,
        gain: 1.0,
    }];

    // Background events land in frames the true window (and earlier
    // events) left free. Every rng draw happens here, before the noise
    // fill, so the layout stream is stable.
    let mut free = FreeList::new(cfg.frames);
    free.remove(gt, PLACEMENT_GAP);
    for _ in 0..DISTRACTOR_ATTEMPTS {
        if rng.gen::<f64>() >= cfg.distractor_rate {
            continue;
        }
        let width = rng.gen_range(GT_WIDTH_MIN..=GT_WIDTH_MAX);
        let Some(span) = free.place(&mut rng, width) else {
            continue;
        };
        free.remove(span, PLACEMENT_GAP);
        let slots = sorted_sample(&mut rng, cfg.slots, cfg.slots / 2);
        let kind = pick_kind(&mut rng, k, cfg.concepts);
        let paint = match kind {
            DistractorKind::WrongAction => {
                let outside: Vec<usize> = (0..cfg.concepts)
                    .filter(|j| !action_ids.contains(j))
                    .collect();
                let wrong = outside[rng.gen_range(0..outside.len())];
                pool.push(embedder.embed(ACTIONS[wrong])?);
                Paint {
                    slots,
                    parts: vec![(span.0, span.1, Some(pool.len() - 1))],
                    with_subject: true,
                    gain: cfg.distractor_gain,
                }
            }
            DistractorKind::MissingSubject => {
                let j = rng.gen_range(0..k);
                Paint {
                    slots,
                    parts: vec![(span.0, span.1, Some(j))],
                    with_subject: false,
                    gain: cfg.distractor_gain,
                }
            }
            DistractorKind::PartialActions => {
                let m = rng.gen_range(1..k);
                let chosen = sorted_sample(&mut rng, k, m);
                let parts = partition_span(&mut rng, span, m)
                    .into_iter()
                    .zip(chosen)
                    .map(|((a, b), j)| (a, b, Some(j)))
                    .collect();
                Paint {
                    slots,
                    parts,
                    with_subject: true,
                    gain: cfg.distractor_gain,
                }
            }
        };
        paints.push(paint);
    }

    let mut grid = GridBuffer::zeros(cfg.slots, cfg.frames, cfg.channels);
    if cfg.noise > 0.0 {
        for v in grid.data.iter_mut() {
            *v = cfg.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let subject_dir = embedder.embed(subject)?;
    for paint in &paints {
        apply_paint(&mut grid, paint, &subject_dir, &pool, cfg.action_gain);
    }

    Ok(GroundingSample {
        id: format!("vtg-{}-{:04}", cfg.seed, index),
        tree,
        grid,
        gt,
        candidates: candidate_windows(cfg.frames),
    })
}

fn apply_paint(
    grid: &mut GridBuffer,
    paint: &Paint,
    subject_dir: &[f64],
    pool: &[Vec<f64>],
    action_gain: f64,
) {
    for &(a, b, action) in &paint.parts {
        for t in a..b {
            for &slot in &paint.slots {
                for c in 0..grid.channels {
                    let mut v = 0.0;
                    if paint.with_subject {
                        v += subject_dir[c];
                    }
                    if let Some(j) = action {
                        v += action_gain * pool[j][c];
                    }
                    *grid.at_mut(slot, t, c) += paint.gain * v;
                }
            }
        }
    }
}

fn pick_kind<R: Rng>(rng: &mut R, k: usize, concepts: usize) -> DistractorKind {
    let mut kinds = Vec::with_capacity(3);
    if concepts > k {
        kinds.push(DistractorKind::WrongAction);
    }
    kinds.push(DistractorKind::MissingSubject);
    if k >= 2 {
        kinds.push(DistractorKind::PartialActions);
    }
    kinds[rng.gen_range(0..kinds.len())]
}

/// Bracketed caption for a subject and its actions, coordinated the way
/// treebank annotation writes "a, b and c".
fn caption_tree(subject: &str, actions: &[&str]) -> String {
    if actions.len() == 1 {
        return format!("(S (NP (NN {})) (VP (VBG {})))", subject, actions[0]);
    }
    let mut vp = String::from("(VP");
    for (j, action) in actions.iter().enumerate() {
        if j > 0 {
            if j + 1 == actions.len() {
                vp.push_str(" (CC and)");
            } else {
                vp.push_str(" (, ,)");
            }
        }
        vp.push_str(&format!(" (VP (VBG {}))", action));
    }
    vp.push(')');
    format!("(S (NP (NN {})) {})", subject, vp)
}

/// Split `span` into `k` contiguous non-empty parts at random cuts.
fn partition_span<R: Rng>(rng: &mut R, span: (usize, usize), k: usize) -> Vec<(usize, usize)> {
    let width = span.1 - span.0;
    debug_assert!(k >= 1 && k <= width);
    let mut cuts: Vec<usize> = index_sample(rng, width - 1, k - 1)
        .into_iter()
        .map(|c| span.0 + c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut lo = span.0;
    for cut in cuts {
        out.push((lo, cut));
        lo = cut;
    }
    out.push((lo, span.1));
    out
}

fn sorted_sample<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut v = index_sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Frame intervals still free for event placement.
struct FreeList {
    spans: Vec<(usize, usize)>,
}

impl FreeList {
    fn new(frames: usize) -> Self {
        FreeList {
            spans: vec![(0, frames)],
        }
    }

    /// Carve `span` (padded by `gap` on both sides) out of the free set.
    fn remove(&mut self, span: (usize, usize), gap: usize) {
        let lo = span.0.saturating_sub(gap);
        let hi = span.1 + gap;
        let mut next = Vec::with_capacity(self.spans.len() + 1);
        for &(a, b) in &self.spans {
            if hi <= a || b <= lo {
                next.push((a, b));
                continue;
            }
            if a < lo {
                next.push((a, lo));
            }
            if hi < b {
                next.push((hi, b));
            }
        }
        self.spans = next;
    }

    /// Pick a width-`width` span inside a random free interval, or None if
    /// nothing fits. Draws from `rng` only when placement is possible.
    fn place<R: Rng>(&self, rng: &mut R, width: usize) -> Option<(usize, usize)> {
        let eligible: Vec<(usize, usize)> = self
            .spans
            .iter()
            .copied()
            .filter(|&(a, b)| b - a >= width)
            .collect();
        if eligible.is_empty() {
            return None;
        }
        let (a, b) = eligible[rng.gen_range(0..eligible.len())];
        let start = rng.gen_range(a..=b - width);
        Some((start, start + width))
    }
}

// ── Dataset files ──

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    grid: String,
    tree: String,
    gt: (usize, usize),
    candidates: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    tree: String,
    gt: (usize, usize),
    candidates: Vec<(usize, usize)>,
}

/// Loaded corpus: the generating config travels with the samples because
/// the embedder that painted the grids is derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<GroundingSample>,
}

/// Layout on disk:
///
/// ```text
/// dir/
///   dataset.json           config echo
///   manifest.jsonl         one row per sample, insertion order
///   samples/<id>/grid.prtk
///   samples/<id>/tree.mrg
///   samples/<id>/meta.json
/// ```
pub fn write_dataset(
    dir: &Path,
    config: &SynthConfig,
    samples: &[GroundingSample],
) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let mut config_json = serde_json::to_string_pretty(config)?;
    config_json.push('\n');
    fs::write(dir.join("dataset.json"), config_json)?;

    let mut manifest = String::new();
    for sample in samples {
        let sample_dir = dir.join("samples").join(&sample.id);
        fs::create_dir_all(&sample_dir)?;
        write_tensor(&sample_dir.join("grid.prtk"), &sample.grid.to_tensor())?;
        fs::write(sample_dir.join("tree.mrg"), format!("{}\n", sample.tree))?;
        let meta = SampleMeta {
            id: sample.id.clone(),
            tree: sample.tree.clone(),
            gt: sample.gt,
            candidates: sample.candidates.clone(),
        };
        let mut meta_json = serde_json::to_string_pretty(&meta)?;
        meta_json.push('\n');
        fs::write(sample_dir.join("meta.json"), meta_json)?;

        let row = ManifestRow {
            id: sample.id.clone(),
            grid: format!("samples/{}/grid.prtk", sample.id),
            tree: sample.tree.clone(),
            gt: sample.gt,
            candidates: sample.candidates.clone(),
        };
        manifest.push_str(&serde_json::to_string(&row)?);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let config_path = dir.join("dataset.json");
    if !config_path.exists() {
        return Err(SynthError::MissingFile {
            path: config_path.display().to_string(),
        });
    }
    let config: SynthConfig = serde_json::from_str(&fs::read_to_string(&config_path)?)?;

    let manifest_path = dir.join("manifest.jsonl");
    if !manifest_path.exists() {
        return Err(SynthError::MissingFile {
            path: manifest_path.display().to_string(),
        });
    }
    let reader = BufReader::new(fs::File::open(&manifest_path)?);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| SynthError::BadManifest {
            path: manifest_path.display().to_string(),
            line: lineno + 1,
            detail,
        };
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let tensor = read_tensor(&dir.join(&row.grid))?;
        let grid = GridBuffer::from_tensor(&tensor)?;
        if (grid.slots, grid.frames, grid.channels) != (config.slots, config.frames, config.channels)
        {
            return Err(bad(format!(
                "grid is {}x{}x{}, dataset says {}x{}x{}",
                grid.slots, grid.frames, grid.channels, config.slots, config.frames, config.channels
            )));
        }
        samples.push(GroundingSample {
            id: row.id,
            tree: row.tree,
            grid,
            gt: row.gt,
            candidates: row.candidates,
        });
    }
    Ok(Dataset { config, samples })
}

// ── Tests ──
