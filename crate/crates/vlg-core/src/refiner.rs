//! Progressive grid refinement.
//!
//! A video is a token grid of `slots x frames x channels`: `slots` spatial
//! positions tracked across `frames` time steps. Each refinement step takes
//! one (subject, action) pair from a decomposed sentence and rewrites the
//! grid as
//!
//! ```text
//! O_p = O_{p-1} W + temporal(spatial(O_{p-1}, subject), action_p)
//! ```
//!
//! where `spatial` runs self-attention inside each frame with the subject
//! embedding appended as extra rows, `temporal` does the same along each
//! slot's track with the action embedding, and `W` is a learned channel
//! mixer on the residual path. Language rows only steer the attention; they
//! are dropped before the grid is reassembled. Weights are shared across
//! steps; spatial and temporal attention have separate weights.
//!
//! Ablation variants rewire the same pieces: dropping a stage, dropping the
//! language rows, swapping which embedding guides which stage, running the
//! stages in parallel, or flattening everything into one joint attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder};
use crate::planner::SubPromptChain;
use crate::tensor::{
    cross_attention, scaled_dot_attention, AttentionParams, AttnMeter, Tape, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("refinement chain is empty")]
    EmptyChain,
    #[error("embedding dimension {got} does not match grid channels {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("bad grid: {detail}")]
    BadGrid { detail: String },
    #[error("bad parameter state: {detail}")]
    BadState { detail: String },
}

// ── Grid storage ──

/// Plain owned token grid, laid out row-major as `[slot][frame][channel]`.
/// This is the form grids take on disk and across threads; it becomes a
/// [`Tensor`] only inside a tape computation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridBuffer {
    pub slots: usize,
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GridBuffer {
    pub fn new(
        slots: usize,
        frames: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, RefineError> {
        if slots == 0 || frames == 0 || channels == 0 {
            return Err(RefineError::BadGrid {
                detail: format!("degenerate extents {slots}x{frames}x{channels}"),
            });
        }
        if data.len() != slots * frames * channels {
            return Err(RefineError::BadGrid {
                detail: format!(
                    "{} values cannot fill {slots}x{frames}x{channels}",
                    data.len()
                ),
            });
        }
        Ok(Self { slots, frames, channels, data })
    }

    pub fn zeros(slots: usize, frames: usize, channels: usize) -> Self {
        Self {
            slots,
            frames,
            channels,
            data: vec![0.0; slots * frames * channels],
        }
    }

    pub fn at(&self, slot: usize, frame: usize, channel: usize) -> f64 {
        self.data[(slot * self.frames + frame) * self.channels + channel]
    }

    pub fn at_mut(&mut self, slot: usize, frame: usize, channel: usize) -> &mut f64 {
        &mut self.data[(slot * self.frames + frame) * self.channels + channel]
    }

    /// Constant (no gradient) rank-3 tensor view of the grid.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[self.slots, self.frames, self.channels])
            .expect("extents validated at construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, RefineError> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(RefineError::BadGrid {
                detail: format!("expected rank 3, got shape {shape:?}"),
            });
        }
        Self::new(shape[0], shape[1], shape[2], t.value())
    }
}

// ── Configuration ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoSpatial,
    NoTemporal,
    NoLang,
    Joint,
    Swap,
    ParallelAvg,
    ParallelSum,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoSpatial,
        Variant::NoTemporal,
        Variant::NoLang,
        Variant::Joint,
        Variant::Swap,
        Variant::ParallelAvg,
        Variant::ParallelSum,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpatial => "no-spatial",
            Variant::NoTemporal => "no-temporal",
            Variant::NoLang => "no-lang",
            Variant::Joint => "joint",
            Variant::Swap => "swap",
            Variant::ParallelAvg => "parallel-avg",
            Variant::ParallelSum => "parallel-sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.name() == name)
    }
}

/// How language embeddings enter an attention sequence: one row per grid
/// row in the sequence, or a single shared row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LangRows {
    Replicated,
    Single,
}

#[derive(Debug, Clone)]
pub struct RefinerConfig {
    pub variant: Variant,
    /// Attention heads used when initializing parameters.
    pub heads: usize,
    /// Cap on refinement steps; longer chains run only this many.
    pub max_steps: Option<usize>,
    pub lang_rows: LangRows,
    /// Normalize each token over channels after every step.
    pub layer_norm: bool,
    /// An empty chain returns the grid unchanged instead of erroring.
    pub empty_chain_identity: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            heads: 4,
            max_steps: None,
            lang_rows: LangRows::Replicated,
            layer_norm: false,
            empty_chain_identity: true,
        }
    }
}

impl RefinerConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }
}

// ── Parameters ──

#[derive(Debug, Clone)]
pub struct RefinerParams {
    /// Channel mixer on the residual path, applied as `rows @ w`.
    pub w: Tensor,
    pub spatial: AttentionParams,
    pub temporal: AttentionParams,
}

/// One named parameter in plain form; the unit of checkpoint io.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Whole-model snapshot. Unlike [`RefinerParams`] this is `Send + Sync`,
/// so it is what crosses threads and goes to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerState {
    pub channels: usize,
    pub heads: usize,
    pub params: Vec<ParamState>,
}

fn attn_names(prefix: &str) -> [String; 4] {
    ["wq", "wk", "wv", "wo"].map(|n| format!("{prefix}.{n}"))
}

impl RefinerParams {
    /// Fresh parameters: `w` starts near the identity so early steps are
    /// close to pass-through; projections start at scale `1/sqrt(C)`.
    pub fn init<R: Rng>(channels: usize, heads: usize, rng: &mut R) -> Result<Self, TensorError> {
        let sigma = 0.01 / (channels as f64).sqrt();
        let normal = Normal::new(0.0, sigma).expect("sigma is finite");
        let mut w = vec![0.0; channels * channels];
        for i in 0..channels {
            w[i * channels + i] = 1.0;
        }
        for x in w.iter_mut() {
            *x += normal.sample(rng);
        }
        Ok(Self {
            w: Tensor::param(w, &[channels, channels])?,
            spatial: AttentionParams::init(channels, heads, rng)?,
            temporal: AttentionParams::init(channels, heads, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.spatial.heads
    }

    /// All trainable tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![self.w.clone()];
        out.extend(self.spatial.tensors());
        out.extend(self.temporal.tensors());
        out
    }

    pub fn to_state(&self) -> RefinerState {
        let mut params = Vec::with_capacity(9);
        params.push(ParamState {
            name: "w".into(),
            shape: self.w.shape(),
            data: self.w.value(),
        });
        for (attn, prefix) in [(&self.spatial, "spatial"), (&self.temporal, "temporal")] {
            for (tensor, name) in attn.tensors().iter().zip(attn_names(prefix)) {
                params.push(ParamState {
                    name,
                    shape: tensor.shape(),
                    data: tensor.value(),
                });
            }
        }
        RefinerState {
            channels: self.channels(),
            heads: self.heads(),
            params,
        }
    }

    pub fn from_state(state: &RefinerState) -> Result<Self, RefineError> {
        let c = state.channels;
        let mut expected = vec!["w".to_string()];
        expected.extend(attn_names("spatial"));
        expected.extend(attn_names("temporal"));
        if state.params.len() != expected.len() {
            return Err(RefineError::BadState {
                detail: format!(
                    "expected {} parameters, got {}",
                    expected.len(),
                    state.params.len()
                ),
            });
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for (param, name) in state.params.iter().zip(&expected) {
            if &param.name != name {
                return Err(RefineError::BadState {
                    detail: format!("expected parameter {name:?}, got {:?}", param.name),
                });
            }
            if param.shape != [c, c] {
                return Err(RefineError::BadState {
                    detail: format!("{name} has shape {:?}, expected [{c}, {c}]", param.shape),
                });
            }
            tensors.push(Tensor::param(param.data.clone(), &param.shape)?);
        }
        if c % state.heads != 0 {
            return Err(RefineError::BadState {
                detail: format!("{c} channels do not split into {} heads", state.heads),
            });
        }
        let mut it = tensors.into_iter();
        let w = it.next().expect("validated count");
        let mut take4 = |heads| AttentionParams {
            w_q: it.next().expect("validated count"),
            w_k: it.next().expect("validated count"),
            w_v: it.next().expect("validated count"),
            w_o: it.next().expect("validated count"),
            heads,
        };
        let spatial = take4(state.heads);
        let temporal = take4(state.heads);
        Ok(Self { w, spatial, temporal })
    }
}

// ── Language input ──

/// Unit-norm embeddings for one decomposed sentence: the subject and one
/// vector per action, all of the grid's channel width.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainEmbeddings {
    pub np: Vec<f64>,
    pub vps: Vec<Vec<f64>>,
}

impl ChainEmbeddings {
    pub fn from_chain(
        embedder: &dyn Embedder,
        chain: &SubPromptChain,
    ) -> Result<Self, EmbedError> {
        Ok(Self {
            np: embedder.embed(&chain.np)?,
            vps: chain
                .vps
                .iter()
                .map(|v| embedder.embed(&v.text))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn steps(&self) -> usize {
        self.vps.len()
    }
}

// ── Trace ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Spatial,
    Temporal,
    Joint,
}

/// Which embedding steered a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guide {
    Np,
    Vp,
    Both,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub step: usize,
    pub kind: StageKind,
    pub guide: Guide,
}

#[derive(Debug, Clone)]
pub struct RefineTrace {
    pub stages: Vec<Stage>,
    /// Frobenius norm of the grid after each step.
    pub per_step_norms: Vec<f64>,
    pub meter: AttnMeter,
}

impl RefineTrace {
    fn empty() -> Self {
        Self {
            stages: Vec::new(),
            per_step_norms: Vec::new(),
            meter: AttnMeter::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.per_step_norms.len()
    }
}

// ── Refinement ──

struct StepCtx<'a> {
    params: &'a RefinerParams,
    config: &'a RefinerConfig,
    slots: usize,
    frames: usize,
    channels: usize,
}

impl StepCtx<'_> {
    /// Language block sized for a stage whose grid part has `rows` rows.
    fn lang_block(&self, emb: &[f64], rows: usize) -> Tensor {
        match self.config.lang_rows {
            LangRows::Replicated => {
                let mut data = Vec::with_capacity(rows * emb.len());
                for _ in 0..rows {
                    data.extend_from_slice(emb);
                }
                Tensor::from_vec(data, &[rows, emb.len()]).expect("sized to fit")
            }
            LangRows::Single => {
                Tensor::from_vec(emb.to_vec(), &[1, emb.len()]).expect("sized to fit")
            }
        }
    }

    /// Self-attention over rows plus optional language rows; language rows
    /// are discarded from the result.
    fn guided_rows(
        &self,
        tape: &mut Tape,
        attn: &AttentionParams,
        rows: &Tensor,
        lang: Option<&Tensor>,
        meter: &mut AttnMeter,
    ) -> Result<Tensor, TensorError> {
        let n = rows.shape()[0];
        match lang {
            Some(block) => {
                let seq = tape.concat(&[rows, block], 0)?;
                let att = scaled_dot_attention(tape, attn, &seq, Some(meter))?;
                tape.slice(&att, 0, 0, n)
            }
            None => scaled_dot_attention(tape, attn, rows, Some(meter)),
        }
    }

    /// Per-frame attention across slots, reassembled along the frame axis.
    fn spatial(
        &self,
        tape: &mut Tape,
        grid: &Tensor,
        lang: Option<&Tensor>,
        meter: &mut AttnMeter,
    ) -> Result<Tensor, TensorError> {
        let (nf, t, c) = (self.slots, self.frames, self.channels);
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let frame = tape.slice(grid, 1, ti, 1)?;
            let frame = tape.reshape(&frame, &[nf, c])?;
            let out = self.guided_rows(tape, &self.params.spatial, &frame, lang, meter)?;
            frames.push(tape.reshape(&out, &[nf, 1, c])?);
        }
        let refs: Vec<&Tensor> = frames.iter().collect();
        tape.concat(&refs, 1)
    }

    /// Per-slot attention across frames, reassembled along the slot axis.
    fn temporal(
        &self,
        tape: &mut Tape,
        grid: &Tensor,
        lang: Option<&Tensor>,
        meter: &mut AttnMeter,
    ) -> Result<Tensor, TensorError> {
        let (nf, t, c) = (self.slots, self.frames, self.channels);
        let mut tracks = Vec::with_capacity(nf);
        for si in 0..nf {
            let track = tape.slice(grid, 0, si, 1)?;
            let track = tape.reshape(&track, &[t, c])?;
            let out = self.guided_rows(tape, &self.params.temporal, &track, lang, meter)?;
            tracks.push(tape.reshape(&out, &[1, t, c])?);
        }
        let refs: Vec<&Tensor> = tracks.iter().collect();
        tape.concat(&refs, 0)
    }

    /// One attention over the whole flattened grid. Reuses the spatial
    /// attention weights.
    fn joint(
        &self,
        tape: &mut Tape,
        grid: &Tensor,
        lang: &Tensor,
        meter: &mut AttnMeter,
    ) -> Result<Tensor, TensorError> {
        let (nf, t, c) = (self.slots, self.frames, self.channels);
        let flat = tape.reshape(grid, &[nf * t, c])?;
        let out = self.guided_rows(tape, &self.params.spatial, &flat, Some(lang), meter)?;
        tape.reshape(&out, &[nf, t, c])
    }

    /// Residual path: every token row through the channel mixer.
    fn mixed_residual(&self, tape: &mut Tape, grid: &Tensor) -> Result<Tensor, TensorError> {
        let (nf, t, c) = (self.slots, self.frames, self.channels);
        let flat = tape.reshape(grid, &[nf * t, c])?;
        let mixed = tape.matmul(&flat, &self.params.w)?;
        tape.reshape(&mixed, &[nf, t, c])
    }
}

fn frobenius(t: &Tensor) -> f64 {
    t.borrow_data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the configured refinement over `grid`, one step per chain action,
/// recording stages, per-step norms, and attention cost. The returned
/// tensor stays on `tape`, so losses built on it backpropagate into both
/// the parameters and (if it requires grad) the grid.
pub fn refine(
    tape: &mut Tape,
    params: &RefinerParams,
    config: &RefinerConfig,
    grid: &Tensor,
    chain: &ChainEmbeddings,
) -> Result<(Tensor, RefineTrace), RefineError> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(RefineError::BadGrid {
            detail: format!("expected rank 3, got shape {shape:?}"),
        });
    }
    let (nf, t, c) = (shape[0], shape[1], shape[2]);
    if params.channels() != c {
        return Err(RefineError::DimMismatch { expected: c, got: params.channels() });
    }
    if chain.np.len() != c {
        return Err(RefineError::DimMismatch { expected: c, got: chain.np.len() });
    }
    for vp in &chain.vps {
        if vp.len() != c {
            return Err(RefineError::DimMismatch { expected: c, got: vp.len() });
        }
    }

    let steps = match config.max_steps {
        Some(cap) => chain.steps().min(cap),
        None => chain.steps(),
    };
    if steps == 0 {
        if config.empty_chain_identity {
            return Ok((grid.clone(), RefineTrace::empty()));
        }
        return Err(RefineError::EmptyChain);
    }

    let ctx = StepCtx { params, config, slots: nf, frames: t, channels: c };
    let mut trace = RefineTrace::empty();
    let mut current = grid.clone();

    for p in 0..steps {
        let vp = &chain.vps[p];
        let np_spatial = ctx.lang_block(&chain.np, nf);
        let vp_temporal = ctx.lang_block(vp, t);
        let meter = &mut trace.meter;

        let stage = |kind, guide| Stage { step: p, kind, guide };
        let refined = match config.variant {
            Variant::Full => {
                trace.stages.push(stage(StageKind::Spatial, Guide::Np));
                trace.stages.push(stage(StageKind::Temporal, Guide::Vp));
                let s = ctx.spatial(tape, &current, Some(&np_spatial), meter)?;
                ctx.temporal(tape, &s, Some(&vp_temporal), meter)?
            }
            Variant::NoSpatial => {
                trace.stages.push(stage(StageKind::Temporal, Guide::Vp));
                ctx.temporal(tape, &current, Some(&vp_temporal), meter)?
            }
            Variant::NoTemporal => {
                trace.stages.push(stage(StageKind::Spatial, Guide::Np));
                ctx.spatial(tape, &current, Some(&np_spatial), meter)?
            }
            Variant::NoLang => {
                trace.stages.push(stage(StageKind::Spatial, Guide::None));
                trace.stages.push(stage(StageKind::Temporal, Guide::None));
                let s = ctx.spatial(tape, &current, None, meter)?;
                ctx.temporal(tape, &s, None, meter)?
            }
            Variant::Swap => {
                trace.stages.push(stage(StageKind::Spatial, Guide::Vp));
                trace.stages.push(stage(StageKind::Temporal, Guide::Np));
                let vp_spatial = ctx.lang_block(vp, nf);
                let np_temporal = ctx.lang_block(&chain.np, t);
                let s = ctx.spatial(tape, &current, Some(&vp_spatial), meter)?;
                ctx.temporal(tape, &s, Some(&np_temporal), meter)?
            }
            Variant::Joint => {
                trace.stages.push(stage(StageKind::Joint, Guide::Both));
                let avg: Vec<f64> = chain
                    .np
                    .iter()
                    .zip(vp)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                let lang = ctx.lang_block(&avg, nf * t);
                ctx.joint(tape, &current, &lang, meter)?
            }
            Variant::ParallelAvg | Variant::ParallelSum => {
                trace.stages.push(stage(StageKind::Spatial, Guide::Np));
                trace.stages.push(stage(StageKind::Temporal, Guide::Vp));
                let s = ctx.spatial(tape, &current, Some(&np_spatial), meter)?;
                let tt = ctx.temporal(tape, &current, Some(&vp_temporal), meter)?;
                let sum = tape.add(&s, &tt)?;
                if config.variant == Variant::ParallelAvg {
                    tape.scale(&sum, 0.5)?
                } else {
                    sum
                }
            }
        };

        let residual = ctx.mixed_residual(tape, &current)?;
        let mut next = tape.add(&residual, &refined)?;
        if config.layer_norm {
            next = tape.layer_norm(&next, 1e-5)?;
        }
        trace.per_step_norms.push(frobenius(&next));
        current = next;
    }

    Ok((current, trace))
}

/// Forward-only refinement of a plain grid on a throwaway tape.
pub fn refine_forward(
    params: &RefinerParams,
    config: &RefinerConfig,
    grid: &GridBuffer,
    chain: &ChainEmbeddings,
) -> Result<(GridBuffer, RefineTrace), RefineError> {
    let mut tape = Tape::new();
    let input = grid.to_tensor();
    let (out, trace) = refine(&mut tape, params, config, &input, chain)?;
    Ok((GridBuffer::from_tensor(&out)?, trace))
}

/// Decoder cross-attention shared by downstream heads: language rows as
/// queries over the flattened grid.
pub fn grid_cross_attention(
    tape: &mut Tape,
    attn: &AttentionParams,
    queries: &Tensor,
    grid: &Tensor,
    meter: Option<&mut AttnMeter>,
) -> Result<Tensor, TensorError> {
    let shape = grid.shape();
    let flat = tape.reshape(grid, &[shape[0] * shape[1], shape[2]])?;
    cross_attention(tape, attn, queries, &flat, meter)
}
