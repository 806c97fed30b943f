//! Multi-head scaled dot-product attention built from tape primitives.

use super::{Tape, Tensor, TensorError};
use rand::Rng;

/// Projection weights for one attention block. All four matrices are
/// `C x C`; rows act on row-vector tokens (`out = tokens @ w`).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    /// Gaussian init with scale `1/sqrt(C)`.
    pub fn init<R: Rng>(channels: usize, heads: usize, rng: &mut R) -> Result<Self, TensorError> {
        if heads == 0 || channels % heads != 0 {
            return Err(TensorError::HeadSplit { heads, channels });
        }
        let sigma = 1.0 / (channels as f64).sqrt();
        let mut proj = || {
            let t = Tensor::randn(rng, &[channels, channels], sigma);
            t.set_requires_grad(true);
            t
        };
        Ok(AttentionParams {
            w_q: proj(),
            w_k: proj(),
            w_v: proj(),
            w_o: proj(),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.w_q.clone(),
            self.w_k.clone(),
            self.w_v.clone(),
            self.w_o.clone(),
        ]
    }
}

/// Instrumentation for attention calls: multiply-accumulate counts of the
/// two attention-matrix products (`Q K^T` and `A V`; projections excluded)
/// and the observed softmax row-sum range.
#[derive(Debug, Clone)]
pub struct AttnMeter {
    pub core_macs: u64,
    pub calls: u64,
    pub row_sum_min: f64,
    pub row_sum_max: f64,
}

impl Default for AttnMeter {
    fn default() -> Self {
        AttnMeter {
            core_macs: 0,
            calls: 0,
            row_sum_min: f64::INFINITY,
            row_sum_max: f64::NEG_INFINITY,
        }
    }
}

impl AttnMeter {
    pub fn new() -> Self {
        Self::default()
    }

    fn observe_rows(&mut self, attn: &Tensor, cols: usize) {
        let data = attn.borrow_data();
        for row in data.chunks(cols) {
            let s: f64 = row.iter().sum();
            self.row_sum_min = self.row_sum_min.min(s);
            self.row_sum_max = self.row_sum_max.max(s);
        }
    }
}

/// Self-attention over one sequence: every row attends to every row.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    params: &AttentionParams,
    seq: &Tensor,
    meter: Option<&mut AttnMeter>,
) -> Result<Tensor, TensorError> {
    cross_attention(tape, params, seq, seq, meter)
}

/// Attention with separate query and key/value sequences.
///
/// `queries` is `m x C`, `context` is `n x C`; output is `m x C`. Per head
/// `A = rowsoftmax(Q K^T / sqrt(C/h))`, head outputs are concatenated on
/// the channel axis and passed through the output projection.
pub fn cross_attention(
    tape: &mut Tape,
    params: &AttentionParams,
    queries: &Tensor,
    context: &Tensor,
    mut meter: Option<&mut AttnMeter>,
) -> Result<Tensor, TensorError> {
    let c = params.channels();
    let qs = queries.shape();
    let cs = context.shape();
    if qs.len() != 2 || qs[1] != c || cs.len() != 2 || cs[1] != c {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            detail: format!("queries {qs:?}, context {cs:?}, channels {c}"),
        });
    }
    if c % params.heads != 0 {
        return Err(TensorError::HeadSplit {
            heads: params.heads,
            channels: c,
        });
    }
    let (m, n) = (qs[0], cs[0]);
    let d = c / params.heads;
    let inv_scale = 1.0 / (d as f64).sqrt();

    let q = tape.matmul(queries, &params.w_q)?;
    let k = tape.matmul(context, &params.w_k)?;
    let v = tape.matmul(context, &params.w_v)?;

    let mut head_outputs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice(&q, 1, h * d, d)?;
        let kh = tape.slice(&k, 1, h * d, d)?;
        let vh = tape.slice(&v, 1, h * d, d)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scaled = tape.scale(&scores, inv_scale)?;
        let attn = tape.row_softmax(&scaled)?;
        if let Some(meter) = meter.as_deref_mut() {
            meter.core_macs += 2 * (m * n * d) as u64;
            meter.observe_rows(&attn, n);
        }
        head_outputs.push(tape.matmul(&attn, &vh)?);
    }
    if let Some(meter) = meter.as_deref_mut() {
        meter.calls += 1;
    }
    let refs: Vec<&Tensor> = head_outputs.iter().collect();
    let merged = tape.concat(&refs, 1)?;
    tape.matmul(&merged, &params.w_o)
}
