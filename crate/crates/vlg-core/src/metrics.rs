//! Evaluation metrics: temporal interval overlap, ranked retrieval
//! hit rates, and mask quality (region similarity and boundary score).
//!
//! The `reference` submodule carries deliberately naive second
//! implementations of the nontrivial metrics. They are slow and obvious
//! by design; tests hold the fast paths to them.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("empty query set")]
    EmptyQuerySet,
    #[error("rank must be at least 1")]
    InvalidRank,
    #[error("mask sizes differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    MaskSizeMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("mask data length {len} does not fill {w}x{h}")]
    BadMaskData { w: usize, h: usize, len: usize },
    #[error("empty frame sequence")]
    EmptySequence,
}

// ── Temporal grounding ──

/// Intersection over union of two intervals `(start, end)`. Reversed or
/// empty intervals have zero length; a zero union yields 0.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let len = |x: (f64, f64)| (x.1 - x.0).max(0.0);
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = len(a) + len(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One retrieval query: the target interval and candidate intervals
/// already ranked best first (callers sort by descending score, ties
/// broken by original index).
#[derive(Debug, Clone)]
pub struct RankedQuery {
    pub gt: (f64, f64),
    pub ranked: Vec<(f64, f64)>,
}

/// Fraction of queries whose top `n` candidates contain one with
/// IoU >= `m` against the target.
pub fn rank_n_at_m(queries: &[RankedQuery], n: usize, m: f64) -> Result<f64, MetricError> {
    if queries.is_empty() {
        return Err(MetricError::EmptyQuerySet);
    }
    if n == 0 {
        return Err(MetricError::InvalidRank);
    }
    let hits = queries
        .iter()
        .filter(|q| {
            q.ranked
                .iter()
                .take(n)
                .any(|c| temporal_iou(*c, q.gt) >= m)
        })
        .count();
    Ok(hits as f64 / queries.len() as f64)
}

// ── Masks ──

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, MetricError> {
        if data.len() != width * height {
            return Err(MetricError::BadMaskData { w: width, h: height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn pixels(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|p| **p).count()
    }

    fn same_size(&self, other: &BinaryMask) -> Result<(), MetricError> {
        if self.width != other.width || self.height != other.height {
            return Err(MetricError::MaskSizeMismatch {
                a_w: self.width,
                a_h: self.height,
                b_w: other.width,
                b_h: other.height,
            });
        }
        Ok(())
    }

    /// Foreground pixels that touch the background through a 4-neighbor
    /// or lie on the image border.
    pub fn boundary(&self) -> BinaryMask {
        let mut out = BinaryMask::filled(self.width, self.height, false);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let on_border =
                    x == 0 || y == 0 || x == self.width - 1 || y == self.height - 1;
                let bg_neighbor = (x > 0 && !self.get(x - 1, y))
                    || (x + 1 < self.width && !self.get(x + 1, y))
                    || (y > 0 && !self.get(x, y - 1))
                    || (y + 1 < self.height && !self.get(x, y + 1));
                if on_border || bg_neighbor {
                    out.set(x, y, true);
                }
            }
        }
        out
    }
}

/// Region similarity: intersection over union of the foregrounds. Two
/// empty masks count as a perfect match.
pub fn region_similarity_j(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    pred.same_size(gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.pixels().iter().zip(gt.pixels()) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Marks every pixel within Chebyshev distance `radius` of a set pixel.
fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = BinaryMask::filled(w, h, false);
    let r = radius as isize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        out.set(nx as usize, ny as usize, true);
                    }
                }
            }
        }
    }
    out
}

/// Boundary score: precision and recall of the two boundaries matched
/// within Chebyshev distance `radius`, combined as 2PR/(P+R). Two empty
/// boundaries score 1; exactly one empty scores 0.
pub fn boundary_f(
    pred: &BinaryMask,
    gt: &BinaryMask,
    radius: usize,
) -> Result<f64, MetricError> {
    pred.same_size(gt)?;
    let pred_b = pred.boundary();
    let gt_b = gt.boundary();
    let np = pred_b.count_ones();
    let ng = gt_b.count_ones();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gt_zone = dilate(&gt_b, radius);
    let pred_zone = dilate(&pred_b, radius);
    let matched_pred = pred_b
        .pixels()
        .iter()
        .zip(gt_zone.pixels())
        .filter(|(p, z)| **p && **z)
        .count();
    let matched_gt = gt_b
        .pixels()
        .iter()
        .zip(pred_zone.pixels())
        .filter(|(g, z)| **g && **z)
        .count();
    let precision = matched_pred as f64 / np as f64;
    let recall = matched_gt as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Per-sequence mask quality: mean region similarity, mean boundary
/// score, and their average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JfSummary {
    pub j_mean: f64,
    pub f_mean: f64,
    pub combined: f64,
}

pub fn j_and_f(
    frames: &[(BinaryMask, BinaryMask)],
    radius: usize,
) -> Result<JfSummary, MetricError> {
    if frames.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    for (pred, gt) in frames {
        j_sum += region_similarity_j(pred, gt)?;
        f_sum += boundary_f(pred, gt, radius)?;
    }
    let n = frames.len() as f64;
    let j_mean = j_sum / n;
    let f_mean = f_sum / n;
    Ok(JfSummary { j_mean, f_mean, combined: 0.5 * (j_mean + f_mean) })
}

// ── Reference implementations ──

pub mod reference {
    //! Slow, structurally different implementations used as oracles.

    use super::*;

    /// Interval IoU by midpoint sampling on a fine grid. Exactness is
    /// not expected; agreement within a loose tolerance is.
    pub fn temporal_iou_by_counting(a: (f64, f64), b: (f64, f64), steps: usize) -> f64 {
        let lo = a.0.min(b.0);
        let hi = a.1.max(b.1);
        if hi <= lo {
            return 0.0;
        }
        let dx = (hi - lo) / steps as f64;
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..steps {
            let x = lo + (i as f64 + 0.5) * dx;
            let in_a = x > a.0 && x < a.1;
            let in_b = x > b.0 && x < b.1;
            inter += (in_a && in_b) as usize;
            union += (in_a || in_b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Hit test written directly from the definition, per query.
    pub fn rank_hit(query: &RankedQuery, n: usize, m: f64) -> bool {
        let mut hit = false;
        for (i, c) in query.ranked.iter().enumerate() {
            if i >= n {
                break;
            }
            if temporal_iou(*c, query.gt) >= m {
                hit = true;
            }
        }
        hit
    }

    /// Region similarity by explicit pixel loops.
    pub fn region_similarity_by_pixels(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
        let mut inter = 0.0;
        let mut union = 0.0;
        for y in 0..pred.height() {
            for x in 0..pred.width() {
                let p = pred.get(x, y);
                let g = gt.get(x, y);
                if p && g {
                    inter += 1.0;
                }
                if p || g {
                    union += 1.0;
                }
            }
        }
        if union == 0.0 {
            1.0
        } else {
            inter / union
        }
    }

    /// Boundary score with all-pairs distance checks instead of a
    /// dilation pass. Quadratic in boundary size; use on small masks.
    pub fn boundary_f_by_distances(
        pred: &BinaryMask,
        gt: &BinaryMask,
        radius: usize,
    ) -> f64 {
        let points = |m: &BinaryMask| -> Vec<(usize, usize)> {
            let b = m.boundary();
            let mut out = Vec::new();
            for y in 0..b.height() {
                for x in 0..b.width() {
                    if b.get(x, y) {
                        out.push((x, y));
                    }
                }
            }
            out
        };
        let pb = points(pred);
        let gb = points(gt);
        if pb.is_empty() && gb.is_empty() {
            return 1.0;
        }
        if pb.is_empty() || gb.is_empty() {
            return 0.0;
        }
        let near = |a: (usize, usize), b: (usize, usize)| -> bool {
            let dx = (a.0 as isize - b.0 as isize).unsigned_abs();
            let dy = (a.1 as isize - b.1 as isize).unsigned_abs();
            dx.max(dy) <= radius
        };
        let matched_pred = pb.iter().filter(|p| gb.iter().any(|g| near(**p, *g))).count();
        let matched_gt = gb.iter().filter(|g| pb.iter().any(|p| near(*p, **g))).count();
        let precision = matched_pred as f64 / pb.len() as f64;
        let recall = matched_gt as f64 / gb.len() as f64;
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}
