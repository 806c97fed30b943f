//! Attention cost accounting.
//!
//! Cost is counted in core attention MACs: the two big products per call,
//! scores and mixing, at `2 * rows * keys * channels` each. Projections
//! and the residual mix are excluded on both sides of every comparison,
//! so instrumented runs and closed forms must agree exactly.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::refiner::{
    refine, refine_forward, ChainEmbeddings, GridBuffer, RefineError, RefinerConfig,
    RefinerParams, Variant,
};
use crate::seeding::{derive_seed, rng_from};
use crate::tensor::Tape;

// ── Closed forms ──

fn call_macs(rows: usize, keys: usize, channels: usize) -> u64 {
    2 * (rows as u64) * (keys as u64) * (channels as u64)
}

/// One factorized step: a spatial pass per frame over grid rows plus
/// replicated language rows, then a temporal pass per slot. Both halves
/// attend over doubled sequences, so each call costs `2 * (2n)^2 * C`.
pub fn factorized_step_macs(slots: usize, frames: usize, channels: usize) -> u64 {
    let spatial = (frames as u64) * call_macs(2 * slots, 2 * slots, channels);
    let temporal = (slots as u64) * call_macs(2 * frames, 2 * frames, channels);
    spatial + temporal
}

/// One joint step: a single call over the flattened grid plus as many
/// language rows, `2 * (2 * slots * frames)^2 * C`.
pub fn joint_step_macs(slots: usize, frames: usize, channels: usize) -> u64 {
    call_macs(2 * slots * frames, 2 * slots * frames, channels)
}

/// Factorized cost with constant factors stripped, the form quoted when
/// comparing attention stacks: `slots * frames * (slots + frames) * C`.
pub fn factorized_order(slots: usize, frames: usize, channels: usize) -> u64 {
    (slots as u64) * (frames as u64) * ((slots + frames) as u64) * (channels as u64)
}

/// Joint cost with constant factors stripped: `(slots * frames)^2 * C`.
pub fn joint_order(slots: usize, frames: usize, channels: usize) -> u64 {
    let cells = (slots as u64) * (frames as u64);
    cells * cells * (channels as u64)
}

// ── Instrumented runs ──

fn probe_inputs(
    variant: Variant,
    slots: usize,
    frames: usize,
    channels: usize,
    heads: usize,
) -> Result<(RefinerParams, RefinerConfig, GridBuffer, ChainEmbeddings), RefineError> {
    let mut rng = rng_from(derive_seed(0x6D_AC5, variant.name()));
    let params = RefinerParams::init(channels, heads, &mut rng)?;
    let config = RefinerConfig {
        heads,
        ..RefinerConfig::for_variant(variant)
    };
    let mut grid = GridBuffer::zeros(slots, frames, channels);
    for v in grid.data.iter_mut() {
        *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let basis = |i: usize| {
        let mut e = vec![0.0; channels];
        e[i % channels] = 1.0;
        e
    };
    let chain = ChainEmbeddings {
        np: basis(0),
        vps: vec![basis(1)],
    };
    Ok((params, config, grid, chain))
}

/// Core MACs of one refinement step, read off a metered run with a single
/// sub-prompt. Head count cancels out of the core products, so the probe
/// runs single-headed and works for any channel width.
pub fn measured_step_macs(
    variant: Variant,
    slots: usize,
    frames: usize,
    channels: usize,
) -> Result<u64, RefineError> {
    let (params, config, grid, chain) = probe_inputs(variant, slots, frames, channels, 1)?;
    let mut tape = Tape::new();
    let input = grid.to_tensor();
    let (_, trace) = refine(&mut tape, &params, &config, &input, &chain)?;
    Ok(trace.meter.core_macs)
}

// ── Reports ──

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityRow {
    pub slots: usize,
    pub frames: usize,
    pub channels: usize,
    pub factorized_measured: u64,
    pub factorized_closed: u64,
    pub joint_measured: u64,
    pub joint_closed: u64,
    pub factorized_order: u64,
    pub joint_order: u64,
}

impl ComplexityRow {
    pub fn agrees(&self) -> bool {
        self.factorized_measured == self.factorized_closed
            && self.joint_measured == self.joint_closed
    }

    /// Joint over factorized cost, constants stripped.
    pub fn order_ratio(&self) -> f64 {
        self.joint_order as f64 / self.factorized_order as f64
    }
}

pub fn complexity_table(
    dims: &[(usize, usize)],
    channels: usize,
) -> Result<Vec<ComplexityRow>, RefineError> {
    dims.iter()
        .map(|&(slots, frames)| {
            Ok(ComplexityRow {
                slots,
                frames,
                channels,
                factorized_measured: measured_step_macs(Variant::Full, slots, frames, channels)?,
                factorized_closed: factorized_step_macs(slots, frames, channels),
                joint_measured: measured_step_macs(Variant::Joint, slots, frames, channels)?,
                joint_closed: joint_step_macs(slots, frames, channels),
                factorized_order: factorized_order(slots, frames, channels),
                joint_order: joint_order(slots, frames, channels),
            })
        })
        .collect()
}

pub fn complexity_tsv(rows: &[ComplexityRow]) -> String {
    let mut out = String::from(
        "slots\tframes\tchannels\tfactorized_measured\tfactorized_closed\tjoint_measured\t\
         joint_closed\tfactorized_order\tjoint_order\torder_ratio\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\n",
            r.slots,
            r.frames,
            r.channels,
            r.factorized_measured,
            r.factorized_closed,
            r.joint_measured,
            r.joint_closed,
            r.factorized_order,
            r.joint_order,
            r.order_ratio()
        ));
    }
    out
}

/// Median wallclock of a forward refinement step after one warmup run.
pub fn median_step_wallclock(
    variant: Variant,
    slots: usize,
    frames: usize,
    channels: usize,
    heads: usize,
    repeats: usize,
) -> Result<Duration, RefineError> {
    assert!(repeats >= 1, "need at least one timed repeat");
    let (params, config, grid, chain) = probe_inputs(variant, slots, frames, channels, heads)?;
    refine_forward(&params, &config, &grid, &chain)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        refine_forward(&params, &config, &grid, &chain)?;
        times.push(t0.elapsed());
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

/// A complexity row with measured step times for both layouts.
#[derive(Debug, Clone)]
pub struct TimedRow {
    pub row: ComplexityRow,
    pub factorized_time: Duration,
    pub joint_time: Duration,
}

pub fn timed_table(
    dims: &[(usize, usize)],
    channels: usize,
    heads: usize,
    repeats: usize,
) -> Result<Vec<TimedRow>, RefineError> {
    complexity_table(dims, channels)?
        .into_iter()
        .map(|row| {
            Ok(TimedRow {
                factorized_time: median_step_wallclock(
                    Variant::Full,
                    row.slots,
                    row.frames,
                    channels,
                    heads,
                    repeats,
                )?,
                joint_time: median_step_wallclock(
                    Variant::Joint,
                    row.slots,
                    row.frames,
                    channels,
                    heads,
                    repeats,
                )?,
                row,
            })
        })
        .collect()
}

pub fn timed_tsv(rows: &[TimedRow]) -> String {
    let mut out = String::from(
        "slots\tframes\tchannels\tfactorized_measured\tfactorized_closed\tjoint_measured\t\
         joint_closed\tfactorized_order\tjoint_order\torder_ratio\tfactorized_ms\tjoint_ms\n",
    );
    for t in rows {
        let r = &t.row;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}\n",
            r.slots,
            r.frames,
            r.channels,
            r.factorized_measured,
            r.factorized_closed,
            r.joint_measured,
            r.joint_closed,
            r.factorized_order,
            r.joint_order,
            r.order_ratio(),
            t.factorized_time.as_secs_f64() * 1e3,
            t.joint_time.as_secs_f64() * 1e3
        ));
    }
    out
}

// ── Tests ──
