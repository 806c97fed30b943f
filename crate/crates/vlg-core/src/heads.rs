//! Task heads on top of refined grids.
//!
//! Temporal grounding: frames are summarized by averaging the grid over
//! slots, candidate windows by averaging their frames, and each window
//! is scored as `sigmoid(<window, sentence> / sqrt(C))`. Training labels
//! are interval overlaps rescaled between two thresholds.
//!
//! Referring segmentation: language rows cross-attend over the flattened
//! grid through a small decoder stack, the attended rows are pooled into
//! one embedding, and per-pixel logits are its dot products with a mask
//! feature volume. The loss mixes per-frame and whole-volume terms.
//!
//! Masks travel as strict binary PGM (P5, maxval 255, pixels 0 or 255).

use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::metrics::{temporal_iou, BinaryMask, MetricError};
use crate::tensor::{cross_attention, AttentionParams, AttnMeter, Tape, Tensor, TensorError};

/// Probabilities are squeezed into `[eps, 1-eps]` before the log terms.
const BCE_EPS: f64 = 1e-12;
/// Dice numerator and denominator smoothing.
const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no candidate windows")]
    EmptyCandidates,
    #[error("{what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("candidate window [{start}, {end}) does not fit {frames} frames")]
    BadWindow {
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("ground truth value {value} is not 0 or 1")]
    NonBinaryGroundTruth { value: f64 },
    #[error("bad grid: expected rank {expected}, got shape {got:?}")]
    BadRank { expected: usize, got: Vec<usize> },
}

// ── Temporal grounding ──

/// Scores each candidate window `[start, end)` of a `slots x frames x C`
/// grid against a sentence embedding. Returns a `[k]` tensor of
/// probabilities, in candidate order.
pub fn vtg_scores(
    tape: &mut Tape,
    grid: &Tensor,
    sentence: &[f64],
    candidates: &[(usize, usize)],
) -> Result<Tensor, HeadError> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(HeadError::BadRank { expected: 3, got: shape });
    }
    let (frames, channels) = (shape[1], shape[2]);
    if sentence.len() != channels {
        return Err(HeadError::LengthMismatch {
            what: "sentence embedding",
            expected: channels,
            got: sentence.len(),
        });
    }
    if candidates.is_empty() {
        return Err(HeadError::EmptyCandidates);
    }
    for &(s, e) in candidates {
        if s >= e || e > frames {
            return Err(HeadError::BadWindow { start: s, end: e, frames });
        }
    }

    // One vector per frame: the grid averaged over slots.
    let clips = tape.mean_axis(grid, 0)?; // [frames, channels]
    let sent = Tensor::from_vec(sentence.to_vec(), &[channels])?;
    let inv_sqrt_c = 1.0 / (channels as f64).sqrt();

    let mut scores = Vec::with_capacity(candidates.len());
    for &(s, e) in candidates {
        let window = tape.slice(&clips, 0, s, e - s)?;
        let pooled = tape.mean_axis(&window, 0)?; // [channels]
        let sim = tape.dot(&pooled, &sent)?;
        let scaled = tape.scale(&sim, inv_sqrt_c)?;
        scores.push(tape.sigmoid(&scaled)?);
    }
    let refs: Vec<&Tensor> = scores.iter().collect();
    Ok(tape.concat(&refs, 0)?)
}

/// Regression targets from interval overlap: 0 at or below `tau_min`,
/// 1 at or above `tau_max`, linear in between.
pub fn scaled_iou_labels(
    candidates: &[(usize, usize)],
    gt: (usize, usize),
    tau_min: f64,
    tau_max: f64,
) -> Vec<f64> {
    assert!(tau_max > tau_min, "thresholds must be ordered");
    let gt_f = (gt.0 as f64, gt.1 as f64);
    candidates
        .iter()
        .map(|&(s, e)| {
            let o = temporal_iou((s as f64, e as f64), gt_f);
            ((o - tau_min) / (tau_max - tau_min)).clamp(0.0, 1.0)
        })
        .collect()
}

/// Default label thresholds.
pub const TAU_MIN: f64 = 0.3;
pub const TAU_MAX: f64 = 0.7;

/// Binary cross entropy of probabilities `p` (a `[k]` tensor) against
/// constant labels, averaged over `k`.
fn bce_mean(tape: &mut Tape, p: &Tensor, labels: &[f64]) -> Result<Tensor, TensorError> {
    let k = labels.len();
    let y = Tensor::from_vec(labels.to_vec(), &[k])?;
    let y_neg = Tensor::from_vec(labels.iter().map(|l| 1.0 - l).collect(), &[k])?;
    // Affine squish keeps both logs finite without changing well-behaved
    // probabilities beyond 1e-12.
    let p_safe = tape.scale(p, 1.0 - 2.0 * BCE_EPS)?;
    let p_safe = tape.add_scalar(&p_safe, BCE_EPS)?;
    let one_minus = tape.scale(&p_safe, -1.0)?;
    let one_minus = tape.add_scalar(&one_minus, 1.0)?;
    let log_p = tape.log(&p_safe)?;
    let log_q = tape.log(&one_minus)?;
    let pos = tape.mul(&y, &log_p)?;
    let neg = tape.mul(&y_neg, &log_q)?;
    let sum = tape.add(&pos, &neg)?;
    let mean = tape.mean_all(&sum)?;
    tape.scale(&mean, -1.0)
}

/// Grounding loss: mean binary cross entropy of candidate scores against
/// scaled-overlap labels.
pub fn vtg_loss(tape: &mut Tape, scores: &Tensor, labels: &[f64]) -> Result<Tensor, HeadError> {
    let k = scores.numel();
    if k == 0 {
        return Err(HeadError::EmptyCandidates);
    }
    if labels.len() != k {
        return Err(HeadError::LengthMismatch {
            what: "labels",
            expected: k,
            got: labels.len(),
        });
    }
    Ok(bce_mean(tape, scores, labels)?)
}

/// Candidate spans reordered best score first; equal scores keep their
/// original candidate order.
pub fn ranked_spans(candidates: &[(usize, usize)], scores: &[f64]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order
        .into_iter()
        .map(|i| (candidates[i].0 as f64, candidates[i].1 as f64))
        .collect()
}

// ── Referring segmentation ──

/// Decoder for mask prediction: a stack of cross-attention layers where
/// language rows query the grid, plus an optional warmup layer that lets
/// the language rows attend over the unrefined grid first.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub layers: Vec<AttentionParams>,
    pub warmup: Option<AttentionParams>,
}

impl MaskDecoder {
    pub fn init<R: rand::Rng>(
        channels: usize,
        heads: usize,
        layers: usize,
        warmup: bool,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        assert!(layers >= 1, "decoder needs at least one layer");
        Ok(Self {
            layers: (0..layers)
                .map(|_| AttentionParams::init(channels, heads, rng))
                .collect::<Result<_, _>>()?,
            warmup: warmup
                .then(|| AttentionParams::init(channels, heads, rng))
                .transpose()?,
        })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        if let Some(w) = &self.warmup {
            out.extend(w.tensors());
        }
        out
    }
}

fn flatten_grid(tape: &mut Tape, grid: &Tensor) -> Result<Tensor, HeadError> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(HeadError::BadRank { expected: 3, got: shape });
    }
    Ok(tape.reshape(grid, &[shape[0] * shape[1], shape[2]])?)
}

/// Per-pixel mask logits of shape `[frames, height, width]`.
///
/// `lang` is an `[l, C]` block of language rows, `grid` the refined
/// `slots x frames x C` video grid, and `mask_features` a
/// `[frames, height, width, C]` feature volume. With a warmup layer and
/// `original` given, language rows first attend over the unrefined grid.
pub fn rvos_mask_logits(
    tape: &mut Tape,
    decoder: &MaskDecoder,
    lang: &Tensor,
    grid: &Tensor,
    original: Option<&Tensor>,
    mask_features: &Tensor,
    mut meter: Option<&mut AttnMeter>,
) -> Result<Tensor, HeadError> {
    let feat_shape = mask_features.shape();
    if feat_shape.len() != 4 {
        return Err(HeadError::BadRank { expected: 4, got: feat_shape });
    }
    let (t, h, w, c) = (feat_shape[0], feat_shape[1], feat_shape[2], feat_shape[3]);

    let mut queries = lang.clone();
    if let (Some(warm), Some(orig)) = (&decoder.warmup, original) {
        let flat = flatten_grid(tape, orig)?;
        queries = cross_attention(tape, warm, &queries, &flat, meter.as_deref_mut())?;
    }
    let flat = flatten_grid(tape, grid)?;
    for layer in &decoder.layers {
        queries = cross_attention(tape, layer, &queries, &flat, meter.as_deref_mut())?;
    }
    let pooled = tape.mean_axis(&queries, 0)?; // [C]
    let column = tape.reshape(&pooled, &[c, 1])?;
    let pixels = tape.reshape(mask_features, &[t * h * w, c])?;
    let logits = tape.matmul(&pixels, &column)?; // [t*h*w, 1]
    Ok(tape.reshape(&logits, &[t, h, w])?)
}

#[derive(Debug, Clone, Copy)]
pub struct RvosLossConfig {
    /// Weight of the per-frame term.
    pub lambda_frame: f64,
    /// Weight of the whole-volume term.
    pub lambda_volume: f64,
}

impl Default for RvosLossConfig {
    fn default() -> Self {
        Self { lambda_frame: 1.0, lambda_volume: 1.0 }
    }
}

/// Smoothed Dice loss of probabilities against constant targets:
/// `1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1)`.
fn dice_loss(tape: &mut Tape, p: &Tensor, gt: &Tensor) -> Result<Tensor, TensorError> {
    let overlap = tape.mul(p, gt)?;
    let inter = tape.sum_all(&overlap)?;
    let num = tape.scale(&inter, 2.0)?;
    let num = tape.add_scalar(&num, DICE_SMOOTH)?;
    let p_sum = tape.sum_all(p)?;
    let g_sum = tape.sum_all(gt)?;
    let denom = tape.add(&p_sum, &g_sum)?;
    let denom = tape.add_scalar(&denom, DICE_SMOOTH)?;
    let denom_inv = tape.recip(&denom)?;
    let ratio = tape.mul(&num, &denom_inv)?;
    let neg = tape.scale(&ratio, -1.0)?;
    tape.add_scalar(&neg, 1.0)
}

/// Segmentation loss over `[frames, height, width]` logits: the mean
/// over frames of (cross entropy + Dice) plus a Dice term over the whole
/// volume, weighted by the config.
pub fn rvos_loss(
    tape: &mut Tape,
    logits: &Tensor,
    gt: &[f64],
    config: &RvosLossConfig,
) -> Result<Tensor, HeadError> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(HeadError::BadRank { expected: 3, got: shape });
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    if gt.len() != t * h * w {
        return Err(HeadError::LengthMismatch {
            what: "ground truth volume",
            expected: t * h * w,
            got: gt.len(),
        });
    }
    for &v in gt {
        if v != 0.0 && v != 1.0 {
            return Err(HeadError::NonBinaryGroundTruth { value: v });
        }
    }

    let mut frame_terms: Vec<Tensor> = Vec::with_capacity(t);
    for ti in 0..t {
        let frame = tape.slice(logits, 0, ti, 1)?;
        let frame = tape.reshape(&frame, &[h * w])?;
        let p = tape.sigmoid(&frame)?;
        let gt_slice = &gt[ti * h * w..(ti + 1) * h * w];
        let bce = bce_mean(tape, &p, gt_slice)?;
        let gt_tensor = Tensor::from_vec(gt_slice.to_vec(), &[h * w])?;
        let dice = dice_loss(tape, &p, &gt_tensor)?;
        frame_terms.push(tape.add(&bce, &dice)?);
    }
    let refs: Vec<&Tensor> = frame_terms.iter().collect();
    let stacked = tape.concat(&refs, 0)?;
    let frame_mean = tape.mean_all(&stacked)?;

    let flat = tape.reshape(logits, &[t * h * w])?;
    let p_all = tape.sigmoid(&flat)?;
    let gt_all = Tensor::from_vec(gt.to_vec(), &[t * h * w])?;
    let volume = dice_loss(tape, &p_all, &gt_all)?;

    let weighted_frame = tape.scale(&frame_mean, config.lambda_frame)?;
    let weighted_volume = tape.scale(&volume, config.lambda_volume)?;
    Ok(tape.add(&weighted_frame, &weighted_volume)?)
}

/// Thresholds `[frames, height, width]` logits into per-frame masks,
/// foreground strictly above probability one half (logit above zero).
pub fn masks_from_logits(logits: &Tensor) -> Result<Vec<BinaryMask>, HeadError> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(HeadError::BadRank { expected: 3, got: shape });
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let data = logits.value();
    (0..t)
        .map(|ti| {
            let frame = &data[ti * h * w..(ti + 1) * h * w];
            Ok(BinaryMask::new(w, h, frame.iter().map(|&v| v > 0.0).collect())?)
        })
        .collect()
}

// ── Binary PGM io ──

#[derive(Debug, Error)]
pub enum PgmError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a P5 file")]
    BadMagic,
    #[error("bad header: {detail}")]
    BadHeader { detail: String },
    #[error("file ends before {expected} pixels")]
    Truncated { expected: usize },
    #[error("pixel value {value} is neither 0 nor 255")]
    NonBinaryPixel { value: u8 },
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<(), PgmError> {
    let mut out = Vec::with_capacity(32 + mask.width() * mask.height());
    write!(out, "P5\n{} {}\n255\n", mask.width(), mask.height())?;
    out.extend(mask.pixels().iter().map(|&p| if p { 255u8 } else { 0u8 }));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask, PgmError> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<BinaryMask, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut at = 2;
    // Three whitespace-separated header fields; # starts a comment line.
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while at < bytes.len() {
            if bytes[at].is_ascii_whitespace() {
                at += 1;
            } else if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                break;
            }
        }
        let start = at;
        while at < bytes.len() && bytes[at].is_ascii_digit() {
            at += 1;
        }
        if start == at {
            return Err(PgmError::BadHeader {
                detail: "expected a decimal field".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .expect("digits are utf-8")
            .parse()
            .map_err(|_| PgmError::BadHeader { detail: "field overflow".into() })?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(PgmError::BadHeader {
            detail: format!("maxval {maxval}, expected 255"),
        });
    }
    if w == 0 || h == 0 {
        return Err(PgmError::BadHeader { detail: "zero extent".into() });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if at >= bytes.len() || !bytes[at].is_ascii_whitespace() {
        return Err(PgmError::BadHeader {
            detail: "missing separator before pixels".into(),
        });
    }
    at += 1;
    let expected = w * h;
    let payload = &bytes[at..];
    if payload.len() < expected {
        return Err(PgmError::Truncated { expected });
    }
    let mut data = Vec::with_capacity(expected);
    for &b in &payload[..expected] {
        match b {
            0 => data.push(false),
            255 => data.push(true),
            value => return Err(PgmError::NonBinaryPixel { value }),
        }
    }
    Ok(BinaryMask::new(w, h, data).expect("sized to fit"))
}
