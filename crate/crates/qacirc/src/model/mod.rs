//! A small decoder-only transformer with full activation exposure.
//!
//! The residual stream is strictly additive: token embedding plus positional
//! embedding, then every attention head and MLP adds its contribution.
//! Normalization is scale-only (per-channel gains on block inputs, identity
//! before the unembedding), so the final-position logits decompose exactly
//! into a sum of per-component direct contributions. Every analysis pass in
//! this crate leans on that decomposition.
//!
//! Submodules: [`engine`] runs forwards (with optional activation overrides,
//! attention upweighting, and an analytic backward pass), [`fixture`] builds
//! the hand-constructed QA model, [`io`] persists weights.

pub mod engine;
pub mod fixture;
pub mod io;

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_seq {max} ({n} tokens generated before overflow)", n = .generated.len())]
    SequenceTooLong { len: usize, max: usize, generated: Vec<u32> },
    #[error("fixture infeasible: {0}")]
    FixtureInfeasible(String),
    #[error("weight file format error: {0}")]
    FormatError(String),
    #[error("corrupt weights: {0}")]
    CorruptWeights(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration and weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Per-head projection matrices. `w_q`/`w_k`/`w_v` map the d_model stream
/// down to d_head; `w_o` maps the head's context vector back up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Matrix, // d_head x d_model
    pub w_k: Matrix, // d_head x d_model
    pub w_v: Matrix, // d_head x d_model
    pub w_o: Matrix, // d_model x d_head
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// Per-channel scale applied to the attention block's input.
    pub attn_norm_gain: Vec<f64>,
    pub mlp_in: Matrix,  // d_mlp x d_model
    pub mlp_out: Matrix, // d_model x d_mlp
    /// Per-channel scale applied to the MLP block's input.
    pub mlp_norm_gain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Matrix, // vocab_size x d_model
    /// Additive positional embedding, one row per position.
    pub pos_embedding: Matrix, // max_seq x d_model
    pub layers: Vec<LayerWeights>,
    pub unembedding: Matrix, // vocab_size x d_model
}

impl ModelWeights {
    /// Checks every tensor against the config and rejects non-finite values.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let c = &self.config;
        let mut shapes: Vec<(String, (usize, usize), (usize, usize))> = vec![
            ("token_embedding".into(), self.token_embedding.shape(), (c.vocab_size, c.d_model)),
            ("pos_embedding".into(), self.pos_embedding.shape(), (c.max_seq, c.d_model)),
            ("unembedding".into(), self.unembedding.shape(), (c.vocab_size, c.d_model)),
        ];
        if self.layers.len() != c.n_layers {
            return Err(ModelError::CorruptWeights(format!(
                "{} layers in weights, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != c.n_heads {
                return Err(ModelError::CorruptWeights(format!(
                    "layer {li} has {} heads, config says {}",
                    layer.heads.len(),
                    c.n_heads
                )));
            }
            if layer.attn_norm_gain.len() != c.d_model || layer.mlp_norm_gain.len() != c.d_model {
                return Err(ModelError::CorruptWeights(format!(
                    "layer {li} norm gains must have d_model = {} entries",
                    c.d_model
                )));
            }
            for (hi, head) in layer.heads.iter().enumerate() {
                shapes.push((format!("layers.{li}.heads.{hi}.w_q"), head.w_q.shape(), (c.d_head, c.d_model)));
                shapes.push((format!("layers.{li}.heads.{hi}.w_k"), head.w_k.shape(), (c.d_head, c.d_model)));
                shapes.push((format!("layers.{li}.heads.{hi}.w_v"), head.w_v.shape(), (c.d_head, c.d_model)));
                shapes.push((format!("layers.{li}.heads.{hi}.w_o"), head.w_o.shape(), (c.d_model, c.d_head)));
            }
            shapes.push((format!("layers.{li}.mlp_in"), layer.mlp_in.shape(), (c.d_mlp, c.d_model)));
            shapes.push((format!("layers.{li}.mlp_out"), layer.mlp_out.shape(), (c.d_model, c.d_mlp)));
        }
        for (name, got, want) in shapes {
            if got != want {
                return Err(ModelError::CorruptWeights(format!(
                    "tensor {name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        let finite = self.token_embedding.is_finite()
            && self.pos_embedding.is_finite()
            && self.unembedding.is_finite()
            && self.layers.iter().all(|l| {
                l.mlp_in.is_finite()
                    && l.mlp_out.is_finite()
                    && l.attn_norm_gain.iter().all(|v| v.is_finite())
                    && l.mlp_norm_gain.iter().all(|v| v.is_finite())
                    && l.heads.iter().all(|h| {
                        h.w_q.is_finite() && h.w_k.is_finite() && h.w_v.is_finite() && h.w_o.is_finite()
                    })
            });
        if !finite {
            return Err(ModelError::CorruptWeights("non-finite tensor entry".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Token sequences
// ---------------------------------------------------------------------------

/// A tokenized prompt with its context window and question span marked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    /// Half-open [start, end) of the retrieved-context segment.
    pub context: (usize, usize),
    /// Half-open [start, end) of the question segment.
    pub question: (usize, usize),
}

impl TokenSeq {
    pub fn new(
        tokens: Vec<u32>,
        context: (usize, usize),
        question: (usize, usize),
    ) -> Result<Self, ModelError> {
        let n = tokens.len();
        if context.0 >= context.1 {
            return Err(ModelError::InvalidSequence("context window is empty".into()));
        }
        if context.1 > n || question.0 > question.1 || question.1 > n {
            return Err(ModelError::InvalidSequence(format!(
                "segment markers {context:?}/{question:?} out of range for length {n}"
            )));
        }
        Ok(TokenSeq { tokens, context, question })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn context_tokens(&self) -> &[u32] {
        &self.tokens[self.context.0..self.context.1]
    }
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// Which activations a forward pass should retain. Capturing never perturbs
/// the computation; it only controls what the trace stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureSpec {
    pub heads: bool,
    pub attn_layers: bool,
    pub mlps: bool,
    pub residuals: bool,
}

impl CaptureSpec {
    pub fn none() -> Self {
        CaptureSpec { heads: false, attn_layers: false, mlps: false, residuals: false }
    }

    pub fn full() -> Self {
        CaptureSpec { heads: true, attn_layers: true, mlps: true, residuals: true }
    }
}

/// Per-head record: raw pre-softmax scores, causal post-softmax attention
/// (rows are distributions over positions 0..=t, exactly 0 beyond), and the
/// head's output-projected contribution to the stream at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub scores: Matrix, // T x T, zero above the diagonal
    pub attn: Matrix,   // T x T, rows sum to 1 over 0..=t
    pub contrib: Matrix, // T x d_model
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub resid_pre: Option<Matrix>,
    pub heads: Vec<Option<HeadTrace>>,
    pub attn_out: Option<Matrix>,
    pub resid_mid: Option<Matrix>,
    pub mlp: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub seq_len: usize,
    pub layers: Vec<LayerTrace>,
    /// Logits at the last position.
    pub logits: Vec<f64>,
    /// Greedy next token (lowest-id tie-break).
    pub next_token: u32,
    /// How many attention-upweight interventions hit a negative peak score
    /// during this run (see the steering module for why that matters).
    pub negative_peaks: usize,
}

/// Addressable write-slots within one layer, ordered for deterministic
/// iteration: heads first, then the summed attention output, then the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    Head(usize),
    AttnLayer,
    Mlp,
}

// ---------------------------------------------------------------------------
// Forward-pass accounting
// ---------------------------------------------------------------------------

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Total engine forward passes on this thread; the attribution pipeline's
/// one-pass-per-token guarantee is asserted against deltas of this counter.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(|c| c.get())
}

pub(crate) fn note_forward_pass() {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Runs the model on `input`, capturing per the spec. Bit-for-bit
/// deterministic for identical (weights, input).
pub fn forward(
    weights: &ModelWeights,
    input: &TokenSeq,
    capture: &CaptureSpec,
) -> Result<RunTrace, ModelError> {
    engine::run(weights, &input.tokens, capture, &engine::RunOptions::default())
}

/// Greedily decodes `l` tokens from `prompt`, returning each step's trace.
/// Overflowing max_seq mid-generation reports the tokens produced so far
/// inside the error.
pub fn greedy_generate(
    weights: &ModelWeights,
    prompt: &TokenSeq,
    l: usize,
    capture: &CaptureSpec,
) -> Result<(Vec<u32>, Vec<RunTrace>), ModelError> {
    assert!(l >= 1, "greedy_generate needs l >= 1");
    let mut tokens = prompt.tokens.clone();
    let mut out = Vec::with_capacity(l);
    let mut traces = Vec::with_capacity(l);
    for _ in 0..l {
        if tokens.len() > weights.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: weights.config.max_seq,
                generated: out,
            });
        }
        let trace = engine::run(weights, &tokens, capture, &engine::RunOptions::default())?;
        let next = trace.next_token;
        out.push(next);
        traces.push(trace);
        tokens.push(next);
    }
    Ok((out, traces))
}
