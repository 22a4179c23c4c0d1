//! Attention mechanisms: structured self-attention, symmetric co-attention,
//! hard attention with extractive-overlap supervision, and the multi-head
//! attention inference sublayer with residual + layer normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Layer-norm epsilon used by the attention inference sublayer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn init_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::param(&[rows, cols], values).expect("consistent shape")
}

// ---------------------------------------------------------------------------
// Structured self-attention
// ---------------------------------------------------------------------------

/// Multi-hop scoring: weights = softmax over tokens of score · tanh(proj · Hᵀ).
pub struct SelfAttentionParams {
    /// W₁: proj_dim × input width.
    pub proj: Tensor,
    /// w₂: one scoring row per hop, hops × proj_dim.
    pub score: Tensor,
    pub hops: usize,
    pub proj_dim: usize,
}

impl SelfAttentionParams {
    pub fn init(input_dim: usize, proj_dim: usize, hops: usize, rng: &mut ChaCha8Rng) -> SelfAttentionParams {
        SelfAttentionParams {
            proj: init_matrix(proj_dim, input_dim, rng),
            score: init_matrix(hops, proj_dim, rng),
            hops,
            proj_dim,
        }
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.proj"), self.proj.clone()));
        out.push((format!("{prefix}.score"), self.score.clone()));
    }
}

/// Returns (context rows, attention weights). Context is hops × width, the
/// weight matrix hops × n with each hop summing to 1 over tokens. Consumers
/// average-pool the context rows.
pub fn self_attention(tape: &Tape, params: &SelfAttentionParams, h: &Tensor) -> Result<(Tensor, Tensor)> {
    let sh = h.shape();
    if sh.len() != 2 || sh[0] == 0 {
        return Err(Error::shape("self_attention", format!("expected n×d with n ≥ 1, got {:?}", sh)));
    }
    let scores = tape.matmul(&params.score, &tape.tanh(&tape.matmul(&params.proj, &tape.transpose(h)?)?)?)?;
    let weights = tape.softmax(&scores, 1)?;
    let context = tape.matmul(&weights, h)?;
    Ok((context, weights))
}

// ---------------------------------------------------------------------------
// Co-attention
// ---------------------------------------------------------------------------

/// Symmetric bidirectional attention sharing one score matrix between texts.
pub struct CoAttentionParams {
    pub review_proj: Tensor,  // d × d
    pub summary_proj: Tensor, // d × d
    /// The d inside softmax(A/√d): the encoder output width.
    pub scale_dim: usize,
}

impl CoAttentionParams {
    pub fn init(width: usize, rng: &mut ChaCha8Rng) -> CoAttentionParams {
        CoAttentionParams {
            review_proj: init_matrix(width, width, rng),
            summary_proj: init_matrix(width, width, rng),
            scale_dim: width,
        }
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.review_proj"), self.review_proj.clone()));
        out.push((format!("{prefix}.summary_proj"), self.summary_proj.clone()));
    }
}

pub struct CoAttentionOutput {
    /// Review states with attended summary content added, n × d.
    pub review: Tensor,
    /// Summary states with attended review content added, m × d.
    pub summary: Tensor,
    /// Row-softmax of A/√d (n × m).
    pub review_weights: Tensor,
    /// Row-softmax of Aᵀ/√d (m × n).
    pub summary_weights: Tensor,
}

/// A = H^w W^w (H^s W^s)ᵀ; each side adds the softmax-weighted other text to
/// itself (residual included, as written).
pub fn co_attention(
    tape: &Tape,
    params: &CoAttentionParams,
    h_review: &Tensor,
    h_summary: &Tensor,
) -> Result<CoAttentionOutput> {
    let (rsh, ssh) = (h_review.shape(), h_summary.shape());
    if rsh.len() != 2 || ssh.len() != 2 || rsh[0] == 0 || ssh[0] == 0 {
        return Err(Error::shape(
            "co_attention",
            format!("expected non-empty matrices, got {:?} and {:?}", rsh, ssh),
        ));
    }
    let a = tape.matmul(
        &tape.matmul(h_review, &params.review_proj)?,
        &tape.transpose(&tape.matmul(h_summary, &params.summary_proj)?)?,
    )?;
    let inv_sqrt_d = 1.0 / (params.scale_dim as f64).sqrt();
    let review_weights = tape.softmax(&tape.scale(&a, inv_sqrt_d)?, 1)?;
    let summary_weights = tape.softmax(&tape.scale(&tape.transpose(&a)?, inv_sqrt_d)?, 1)?;
    let review = tape.add(h_review, &tape.matmul(&review_weights, h_summary)?)?;
    let summary = tape.add(h_summary, &tape.matmul(&summary_weights, h_review)?)?;
    Ok(CoAttentionOutput { review, summary, review_weights, summary_weights })
}

// ---------------------------------------------------------------------------
// Hard attention supervision
// ---------------------------------------------------------------------------

/// Binary labels over review tokens: 1 iff the token (case-folded) appears in
/// the summary token set. Extraction order is review order.
pub fn extract_overlap_labels(review: &[String], summary: &[String]) -> Vec<f64> {
    let summary_set: std::collections::HashSet<String> =
        summary.iter().map(|t| t.to_lowercase()).collect();
    review
        .iter()
        .map(|t| if summary_set.contains(&t.to_lowercase()) { 1.0 } else { 0.0 })
        .collect()
}

/// Cross-entropy between an attention distribution and the normalized label
/// distribution. All-zero labels contribute nothing.
pub fn hard_attention_loss(tape: &Tape, weights: &Tensor, labels: &[f64]) -> Result<Tensor> {
    if weights.rank() != 1 || weights.numel() != labels.len() {
        return Err(Error::shape(
            "hard_attention_loss",
            format!("weights {:?} vs {} labels", weights.shape(), labels.len()),
        ));
    }
    let total: f64 = labels.iter().sum();
    if total == 0.0 {
        return Ok(Tensor::scalar(0.0));
    }
    let target = Tensor::from_values(&[labels.len()], labels.iter().map(|l| l / total).collect())?;
    // −Σ q_t · ln w_t
    tape.scale(&tape.sum(&tape.mul(&target, &tape.ln(weights)?)?)?, -1.0)
}

// ---------------------------------------------------------------------------
// Attention inference sublayer
// ---------------------------------------------------------------------------

pub struct AttentionHead {
    pub query: Tensor, // width × width/heads
    pub key: Tensor,
    pub value: Tensor,
}

/// Multi-head dot-product attention from review token states to the pooled
/// summary vector, with residual connection and layer normalization.
pub struct AttentionInferenceParams {
    pub heads: Vec<AttentionHead>,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// Encoder output width (2·d_h); the per-head dimension is width/heads.
    pub width: usize,
}

impl AttentionInferenceParams {
    pub fn init(width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<AttentionInferenceParams> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide the encoder output width {}",
                heads, width
            )));
        }
        let head_dim = width / heads;
        let heads = (0..heads)
            .map(|_| AttentionHead {
                query: init_matrix(width, head_dim, rng),
                key: init_matrix(width, head_dim, rng),
                value: init_matrix(width, head_dim, rng),
            })
            .collect();
        Ok(AttentionInferenceParams {
            heads,
            ln_gain: Tensor::param(&[width], vec![1.0; width]).expect("consistent shape"),
            ln_bias: Tensor::param(&[width], vec![0.0; width]).expect("consistent shape"),
            width,
        })
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, head) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{i}.query"), head.query.clone()));
            out.push((format!("{prefix}.head{i}.key"), head.key.clone()));
            out.push((format!("{prefix}.head{i}.value"), head.value.clone()));
        }
        out.push((format!("{prefix}.ln_gain"), self.ln_gain.clone()));
        out.push((format!("{prefix}.ln_bias"), self.ln_bias.clone()));
    }
}

/// Returns layer_norm(H^w + H^{w,s}) and the per-head attention vectors over
/// review tokens.
pub fn attention_inference(
    tape: &Tape,
    params: &AttentionInferenceParams,
    h_review: &Tensor,
    summary_pooled: &Tensor,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let sh = h_review.shape();
    if sh.len() != 2 || sh[1] != params.width {
        return Err(Error::shape(
            "attention_inference",
            format!("expected n×{}, got {:?}", params.width, sh),
        ));
    }
    if sh[0] == 0 {
        return Err(Error::EmptySequence("attention_inference"));
    }
    if summary_pooled.shape() != vec![params.width] {
        return Err(Error::shape(
            "attention_inference",
            format!("pooled summary must be [{}], got {:?}", params.width, summary_pooled.shape()),
        ));
    }
    let head_dim = params.width / params.heads.len();
    let scale = 1.0 / (params.width as f64 / params.heads.len() as f64).sqrt();
    let summary_row = tape.reshape(summary_pooled, &[1, params.width])?;
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    let mut alphas = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let queries = tape.matmul(h_review, &head.query)?; // n × head_dim
        let key = tape.matmul(&summary_row, &head.key)?; // 1 × head_dim
        let scores = tape.scale(&tape.matmul(&queries, &tape.transpose(&key)?)?, scale)?; // n × 1
        let alpha = tape.softmax(&scores, 0)?;
        let value = tape.matmul(&summary_row, &head.value)?; // 1 × head_dim
        head_outputs.push(tape.matmul(&alpha, &value)?); // n × head_dim
        alphas.push(alpha.values());
    }
    debug_assert_eq!(head_outputs[0].dim(1), head_dim);
    let mut combined = head_outputs[0].clone();
    for head_out in &head_outputs[1..] {
        combined = tape.concat(&combined, head_out, 1)?;
    }
    let residual = tape.add(h_review, &combined)?;
    let out = tape.layer_norm(&residual, &params.ln_gain, &params.ln_bias, LAYER_NORM_EPS)?;
    Ok((out, alphas))
}

// ---------------------------------------------------------------------------
// Attention traces
// ---------------------------------------------------------------------------

/// One recorded attention distribution set: `rows` query positions (hops or
/// a single pooled query) over `cols` attended tokens. Every row sums to 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl TraceMatrix {
    pub fn from_tensor(t: &Tensor) -> TraceMatrix {
        let sh = t.shape();
        match sh.len() {
            1 => TraceMatrix { rows: 1, cols: sh[0], weights: t.values() },
            2 => TraceMatrix { rows: sh[0], cols: sh[1], weights: t.values() },
            _ => unreachable!("trace matrices are rank 1 or 2"),
        }
    }

    pub fn from_vector(weights: Vec<f64>) -> TraceMatrix {
        TraceMatrix { rows: 1, cols: weights.len(), weights }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-layer attention record: one entry per head (or one full matrix for
/// self- and co-attention).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceLayer {
    pub label: String,
    pub heads: Vec<TraceMatrix>,
}

/// Attention weights recorded during a forward pass, for analysis and
/// heatmap export.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<TraceLayer>,
}

impl AttentionTrace {
    pub fn push(&mut self, label: impl Into<String>, heads: Vec<TraceMatrix>) {
        self.layers.push(TraceLayer { label: label.into(), heads });
    }

    /// Every stored distribution must be nonnegative and sum to 1 per row.
    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            for head in &layer.heads {
                for i in 0..head.rows {
                    let row = head.row(i);
                    if row.iter().any(|w| *w < 0.0) {
                        return Err(Error::Data(format!("negative attention weight in {}", layer.label)));
                    }
                    let total: f64 = row.iter().sum();
                    if (total - 1.0).abs() > 1e-12 {
                        return Err(Error::Data(format!(
                            "attention row in {} sums to {} instead of 1",
                            layer.label, total
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
