//! Data attribution from a single attention head.
//!
//! The model answers from context through one identifiable head, so that
//! head's attention pattern *is* an attribution signal: while greedily
//! generating the answer, each step's attention row (restricted to the
//! context window and renormalized) points at the evidence for the token
//! just produced. One forward pass per generated token — no gradients, no
//! extra runs.
//!
//! Which head to read is decided empirically by `head_entropy_profile`:
//! the attribution head is the one whose context attention is sharpest
//! (lowest mean entropy), with accuracy against the known evidence slot as
//! the tie-breaker. A saliency baseline built on the exact input gradient
//! is provided for comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instrument::ComponentKind;
use crate::model::engine::{nll_grad, run, RunOptions};
use crate::model::{CaptureSpec, ModelError, ModelWeights, TokenSeq};
use crate::numerics::{entropy, NumericsError, ProbDist};
use crate::probe::{Mode, ProbeExample};

#[derive(Debug, Error)]
pub enum AttributeError {
    #[error("invalid attribution config: {0}")]
    InvalidConfig(String),
    #[error("invalid attention window: {0}")]
    InvalidWindow(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

// ---------------------------------------------------------------------------
// Head profiling
// ---------------------------------------------------------------------------

/// Sharpness and aim of one head's context attention at the answering
/// position, averaged over a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    #[serde(flatten)]
    pub component: ComponentKind,
    /// Mean entropy (nats) of the final-position attention renormalized
    /// over the context window.
    pub mean_entropy: f64,
    /// Fraction of examples whose attention argmax is the answer slot.
    pub accuracy: f64,
}

/// Profiles every attention head over the dataset in one forward pass per
/// example. The answer slot of each example is the gold position; in memory
/// mode that slot holds the mask token.
pub fn head_entropy_profile(
    weights: &ModelWeights,
    dataset: &[ProbeExample],
    mode: Mode,
) -> Result<Vec<HeadProfile>, AttributeError> {
    if dataset.is_empty() {
        return Err(AttributeError::InvalidConfig("empty dataset".into()));
    }
    let cfg = &weights.config;
    let n_heads = cfg.n_layers * cfg.n_heads;
    let per_example: Result<Vec<(Vec<f64>, Vec<bool>)>, AttributeError> = dataset
        .par_iter()
        .map(|ex| {
            let seq = ex.seq(mode);
            let trace = run(weights, &seq.tokens, &CaptureSpec::full(), &RunOptions::default())?;
            let last = seq.tokens.len() - 1;
            let (c0, c1) = seq.context;
            let mut entropies = Vec::with_capacity(n_heads);
            let mut hits = Vec::with_capacity(n_heads);
            for layer in 0..cfg.n_layers {
                for head in 0..cfg.n_heads {
                    let attn = trace.layers[layer].heads[head]
                        .as_ref()
                        .expect("full capture")
                        .attn
                        .row(last);
                    let window = context_window(attn, c0, c1)?;
                    entropies.push(entropy(&window));
                    hits.push(c0 + window.argmax() == ex.answer_position);
                }
            }
            Ok((entropies, hits))
        })
        .collect();
    let per_example = per_example?;
    let n = per_example.len() as f64;
    let mut out = Vec::with_capacity(n_heads);
    let mut idx = 0;
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_heads {
            let mean_entropy =
                per_example.iter().map(|(e, _)| e[idx]).sum::<f64>() / n;
            let accuracy =
                per_example.iter().filter(|(_, h)| h[idx]).count() as f64 / n;
            out.push(HeadProfile {
                component: ComponentKind::AttnHead { layer, head },
                mean_entropy,
                accuracy,
            });
            idx += 1;
        }
    }
    Ok(out)
}

/// Lowest mean entropy wins; ties fall to higher accuracy, then component
/// order.
pub fn select_attribution_head(
    profiles: &[HeadProfile],
) -> Result<ComponentKind, AttributeError> {
    profiles
        .iter()
        .min_by(|a, b| {
            a.mean_entropy
                .partial_cmp(&b.mean_entropy)
                .expect("entropies are finite")
                .then(
                    b.accuracy
                        .partial_cmp(&a.accuracy)
                        .expect("accuracies are finite"),
                )
                .then_with(|| a.component.cmp(&b.component))
        })
        .map(|p| p.component)
        .ok_or_else(|| AttributeError::InvalidConfig("no head profiles".into()))
}

fn context_window(attn_row: &[f64], c0: usize, c1: usize) -> Result<ProbDist, AttributeError> {
    if c0 >= c1 || c1 > attn_row.len() {
        return Err(AttributeError::InvalidWindow(format!(
            "context window [{c0}, {c1}) out of range for row of length {}",
            attn_row.len()
        )));
    }
    Ok(ProbDist::renormalized(&attn_row[c0..c1])?)
}

// ---------------------------------------------------------------------------
// Span extraction
// ---------------------------------------------------------------------------

/// How an attention peak widens into a span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SpanMode {
    /// Fixed-length window centered on the peak, shifted (never shrunk)
    /// when the center sits too close to an edge.
    Window { slength: usize },
    /// Maximal delimiter-free segment around the peak. A peak sitting on a
    /// delimiter degenerates to that single token.
    Delimiter { delimiters: Vec<u32> },
}

/// Peak position (lowest-index argmax) and its span under the given mode.
/// Returned indices are relative to the `values` slice; callers add their
/// window offset. Always `start <= peak < end <= len`.
pub fn get_max_span(
    tokens: &[u32],
    values: &[f64],
    mode: &SpanMode,
) -> Result<(usize, usize, usize), AttributeError> {
    let n = values.len();
    if n == 0 {
        return Err(AttributeError::InvalidWindow("empty value window".into()));
    }
    if tokens.len() != n {
        return Err(AttributeError::InvalidWindow(format!(
            "{} tokens vs {} values",
            tokens.len(),
            n
        )));
    }
    let peak = crate::numerics::argmax(values);
    let (start, end) = match mode {
        SpanMode::Window { slength } => {
            let s = *slength;
            if s == 0 {
                return Err(AttributeError::InvalidConfig("slength must be >= 1".into()));
            }
            if s >= n {
                (0, n)
            } else {
                let mut start = peak.saturating_sub(s / 2);
                if start + s > n {
                    start = n - s;
                }
                (start, start + s)
            }
        }
        SpanMode::Delimiter { delimiters } => {
            if delimiters.contains(&tokens[peak]) {
                (peak, peak + 1)
            } else {
                let mut start = peak;
                while start > 0 && !delimiters.contains(&tokens[start - 1]) {
                    start -= 1;
                }
                let mut end = peak + 1;
                while end < n && !delimiters.contains(&tokens[end]) {
                    end += 1;
                }
                (start, end)
            }
        }
    };
    Ok((start, end, peak))
}

// ---------------------------------------------------------------------------
// Greedy attribution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Attention head to read; must be an `attn_head` component.
    pub head: ComponentKind,
    /// Number of greedy generation steps (upper bound when a terminator is
    /// set).
    pub answer_length: usize,
    /// Spans kept after deduplication and sorting.
    pub top_k: usize,
    pub span_mode: SpanMode,
    /// Generating this token stops attribution; the stopping step yields no
    /// span.
    pub terminator: Option<u32>,
}

/// One attributed context span. Positions are absolute token indices into
/// the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSpan {
    pub start: usize,
    pub end: usize,
    /// Renormalized attention mass at the peak position.
    pub peak_value: f64,
    /// Generation step (0-based) the span came from.
    pub source_step: usize,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionOutcome {
    /// Deduplicated spans, highest peak first (generation order on ties).
    pub spans: Vec<AttributionSpan>,
    pub generated: Vec<u32>,
    /// Forward passes executed — one per generated token.
    pub steps: usize,
}

/// Greedy single-head attribution: generate up to `answer_length` tokens,
/// and for each one record the span around the head's context-attention
/// peak at the generating position.
pub fn attn_attrib(
    weights: &ModelWeights,
    prompt: &TokenSeq,
    cfg: &AttributionConfig,
) -> Result<AttributionOutcome, AttributeError> {
    let (layer, head) = match cfg.head {
        ComponentKind::AttnHead { layer, head } => (layer, head),
        other => {
            return Err(AttributeError::InvalidConfig(format!(
                "attribution reads an attention head, got {other}"
            )))
        }
    };
    let mc = &weights.config;
    if layer >= mc.n_layers || head >= mc.n_heads {
        return Err(AttributeError::InvalidConfig(format!(
            "head ({layer},{head}) outside a {}x{} model",
            mc.n_layers, mc.n_heads
        )));
    }
    if cfg.answer_length == 0 || cfg.top_k == 0 {
        return Err(AttributeError::InvalidConfig(
            "answer_length and top_k must be >= 1".into(),
        ));
    }
    if let SpanMode::Window { slength: 0 } = cfg.span_mode {
        return Err(AttributeError::InvalidConfig("slength must be >= 1".into()));
    }
    let (c0, c1) = prompt.context;
    let capture = CaptureSpec { heads: true, ..CaptureSpec::none() };

    let mut tokens = prompt.tokens.clone();
    let mut generated = Vec::new();
    let mut raw: Vec<AttributionSpan> = Vec::new();
    let mut steps = 0;
    for step in 0..cfg.answer_length {
        if tokens.len() > mc.max_seq {
            return Err(AttributeError::Model(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: mc.max_seq,
                generated,
            }));
        }
        let trace = run(weights, &tokens, &capture, &RunOptions::default())?;
        steps += 1;
        let next = trace.next_token;
        generated.push(next);
        if cfg.terminator == Some(next) {
            break;
        }
        let attn_row = trace.layers[layer].heads[head]
            .as_ref()
            .expect("head capture requested")
            .attn
            .row(tokens.len() - 1);
        let window = context_window(attn_row, c0, c1)?;
        let (s, e, peak) =
            get_max_span(&tokens[c0..c1], window.as_slice(), &cfg.span_mode)?;
        raw.push(AttributionSpan {
            start: c0 + s,
            end: c0 + e,
            peak_value: window.get(peak),
            source_step: step,
            tokens: tokens[c0 + s..c0 + e].to_vec(),
        });
        tokens.push(next);
    }

    // Deduplicate identical spans keeping the strongest peak (first step on
    // ties), then order by peak strength.
    let mut best: std::collections::BTreeMap<(usize, usize), AttributionSpan> =
        std::collections::BTreeMap::new();
    for span in raw {
        match best.get(&(span.start, span.end)) {
            Some(held) if held.peak_value >= span.peak_value => {}
            _ => {
                best.insert((span.start, span.end), span);
            }
        }
    }
    let mut spans: Vec<AttributionSpan> = best.into_values().collect();
    spans.sort_by(|a, b| {
        b.peak_value
            .partial_cmp(&a.peak_value)
            .expect("attention weights are finite")
            .then(a.source_step.cmp(&b.source_step))
    });
    spans.truncate(cfg.top_k);
    Ok(AttributionOutcome { spans, generated, steps })
}

// ---------------------------------------------------------------------------
// Gradient baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientAttribution {
    /// Per-position L2 norm of the answer-NLL gradient at the embedded
    /// input, full sequence.
    pub saliency: Vec<f64>,
    pub span: AttributionSpan,
    /// Set when the context gradient vanishes and the span is arbitrary.
    pub uninformative: bool,
}

/// Input-gradient saliency baseline: one exact backward pass, then the same
/// window rule applied to per-token gradient norms over the context.
pub fn gradient_baseline(
    weights: &ModelWeights,
    prompt: &TokenSeq,
    target: u32,
    slength: usize,
) -> Result<GradientAttribution, AttributeError> {
    let (_, grad) = nll_grad(weights, &prompt.tokens, target)?;
    let saliency: Vec<f64> = (0..prompt.tokens.len())
        .map(|t| grad.row(t).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let (c0, c1) = prompt.context;
    if c0 >= c1 || c1 > saliency.len() {
        return Err(AttributeError::InvalidWindow(format!(
            "context window [{c0}, {c1}) out of range"
        )));
    }
    let window = &saliency[c0..c1];
    let uninformative = window.iter().all(|v| *v <= 1e-12);
    let (s, e, peak) = get_max_span(
        &prompt.tokens[c0..c1],
        window,
        &SpanMode::Window { slength },
    )?;
    Ok(GradientAttribution {
        saliency: saliency.clone(),
        span: AttributionSpan {
            start: c0 + s,
            end: c0 + e,
            peak_value: window[peak],
            source_step: 0,
            tokens: prompt.tokens[c0 + s..c0 + e].to_vec(),
        },
        uninformative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{build_fixture, FixtureConfig, FixtureInfo};
    use crate::model::forward_pass_count;
    use crate::numerics::Matrix;
    use crate::probe::{gen_probe, ProbeConfig};
    use proptest::prelude::*;

    fn setup(n: usize) -> (ModelWeights, FixtureInfo, Vec<ProbeExample>) {
        let (w, info) = build_fixture(&FixtureConfig::default()).unwrap();
        let pcfg = ProbeConfig { n, ..Default::default() };
        let exs = gen_probe(&w, &info, &pcfg, 23).unwrap().examples;
        (w, info, exs)
    }

    #[test]
    fn copy_head_profiles_sharpest_and_most_accurate() {
        let (w, info, exs) = setup(40);
        let profiles = head_entropy_profile(&w, &exs, Mode::Copy).unwrap();
        assert_eq!(profiles.len(), w.config.n_layers * w.config.n_heads);
        let copy = ComponentKind::AttnHead { layer: info.copy_head.0, head: info.copy_head.1 };
        let best = select_attribution_head(&profiles).unwrap();
        assert_eq!(best, copy);
        let cp = profiles.iter().find(|p| p.component == copy).unwrap();
        assert!(cp.mean_entropy < 0.2, "copy head entropy {}", cp.mean_entropy);
        assert_eq!(cp.accuracy, 1.0);
        // The span head spreads its attention across every answer token.
        let span = ComponentKind::AttnHead { layer: info.span_head.0, head: info.span_head.1 };
        let sp = profiles.iter().find(|p| p.component == span).unwrap();
        assert!(sp.mean_entropy > 1.0, "span head entropy {}", sp.mean_entropy);
    }

    #[test]
    fn window_spans_match_hand_worked_cases() {
        let tokens = vec![0u32; 20];
        let mut v = vec![0.0; 20];
        v[7] = 1.0;
        let (s, e, m) = get_max_span(&tokens, &v, &SpanMode::Window { slength: 3 }).unwrap();
        assert_eq!((s, e, m), (6, 9, 7));

        let mut v0 = vec![0.0; 20];
        v0[0] = 1.0;
        let (s, e, m) = get_max_span(&tokens, &v0, &SpanMode::Window { slength: 5 }).unwrap();
        assert_eq!((s, e, m), (0, 5, 0));

        // Right edge shifts left instead of shrinking.
        let mut v19 = vec![0.0; 20];
        v19[19] = 1.0;
        let (s, e, _) = get_max_span(&tokens, &v19, &SpanMode::Window { slength: 4 }).unwrap();
        assert_eq!((s, e), (16, 20));

        // Window longer than the sequence covers everything.
        let short = vec![0u32; 3];
        let (s, e, _) =
            get_max_span(&short, &[0.1, 0.8, 0.1], &SpanMode::Window { slength: 9 }).unwrap();
        assert_eq!((s, e), (0, 3));
    }

    #[test]
    fn delimiter_spans_are_maximal_segments() {
        let d = 99u32;
        let tokens = vec![1, 2, d, 3, 4, 5, d, 6];
        let mut v = vec![0.0; 8];
        v[4] = 1.0;
        let (s, e, m) =
            get_max_span(&tokens, &v, &SpanMode::Delimiter { delimiters: vec![d] }).unwrap();
        assert_eq!((s, e, m), (3, 6, 4));

        // Peak on a delimiter degenerates to a single token.
        let mut vd = vec![0.0; 8];
        vd[2] = 1.0;
        let (s, e, _) =
            get_max_span(&tokens, &vd, &SpanMode::Delimiter { delimiters: vec![d] }).unwrap();
        assert_eq!((s, e), (2, 3));

        // No delimiters at all: the whole window.
        let (s, e, _) =
            get_max_span(&tokens, &v, &SpanMode::Delimiter { delimiters: vec![77] }).unwrap();
        assert_eq!((s, e), (0, 8));
    }

    proptest! {
        #[test]
        fn spans_always_bound_their_peak(
            values in proptest::collection::vec(0.0f64..1.0, 1..40),
            slength in 1usize..12,
            delim_stride in 2usize..6,
        ) {
            let tokens: Vec<u32> =
                (0..values.len()).map(|i| if i % delim_stride == 0 { 99 } else { i as u32 }).collect();
            for mode in [
                SpanMode::Window { slength },
                SpanMode::Delimiter { delimiters: vec![99] },
            ] {
                let (s, e, m) = get_max_span(&tokens, &values, &mode).unwrap();
                prop_assert!(s <= m && m < e && e <= values.len());
                if let SpanMode::Window { slength } = mode {
                    prop_assert_eq!(e - s, slength.min(values.len()));
                }
            }
        }
    }

    #[test]
    fn attribution_runs_one_forward_per_step_and_finds_the_slot() {
        let (w, info, exs) = setup(8);
        let ex = &exs[0];
        let cfg = AttributionConfig {
            head: ComponentKind::AttnHead { layer: info.copy_head.0, head: info.copy_head.1 },
            answer_length: 3,
            top_k: 4,
            span_mode: SpanMode::Window { slength: 3 },
            terminator: None,
        };
        let before = forward_pass_count();
        let out = attn_attrib(&w, &ex.seq(Mode::Copy), &cfg).unwrap();
        assert_eq!(forward_pass_count() - before, 3);
        assert_eq!(out.steps, 3);
        assert_eq!(out.generated[0], ex.swap_token());
        let top = &out.spans[0];
        assert!(top.start <= ex.answer_position && ex.answer_position < top.end);
        assert_eq!(top.tokens, ex.context_copy[top.start..top.end].to_vec());
        for pair in out.spans.windows(2) {
            assert!(pair[0].peak_value >= pair[1].peak_value);
        }
        // Spans are unique after deduplication.
        let mut keys: Vec<(usize, usize)> =
            out.spans.iter().map(|s| (s.start, s.end)).collect();
        keys.dedup();
        assert_eq!(keys.len(), out.spans.len());
    }

    #[test]
    fn terminator_truncates_with_partial_spans() {
        let (w, info, exs) = setup(8);
        let ex = &exs[0];
        let cfg = AttributionConfig {
            head: ComponentKind::AttnHead { layer: info.copy_head.0, head: info.copy_head.1 },
            answer_length: 6,
            top_k: 6,
            span_mode: SpanMode::Window { slength: 3 },
            terminator: Some(info.term),
        };
        let out = attn_attrib(&w, &ex.seq(Mode::Copy), &cfg).unwrap();
        // The fixture answers with one token and then terminates.
        assert_eq!(out.steps, 2);
        assert_eq!(out.generated, vec![ex.swap_token(), info.term]);
        assert_eq!(out.spans.len(), 1);
        assert_eq!(out.spans[0].source_step, 0);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let (w, _, exs) = setup(4);
        let seq = exs[0].seq(Mode::Copy);
        let head = ComponentKind::AttnHead { layer: 0, head: 0 };
        let base = AttributionConfig {
            head,
            answer_length: 1,
            top_k: 1,
            span_mode: SpanMode::Window { slength: 3 },
            terminator: None,
        };
        let mlp = AttributionConfig { head: ComponentKind::Mlp { layer: 0 }, ..base.clone() };
        assert!(matches!(attn_attrib(&w, &seq, &mlp), Err(AttributeError::InvalidConfig(_))));
        let oob = AttributionConfig {
            head: ComponentKind::AttnHead { layer: 9, head: 0 },
            ..base.clone()
        };
        assert!(matches!(attn_attrib(&w, &seq, &oob), Err(AttributeError::InvalidConfig(_))));
        let zero_len = AttributionConfig { answer_length: 0, ..base.clone() };
        assert!(matches!(
            attn_attrib(&w, &seq, &zero_len),
            Err(AttributeError::InvalidConfig(_))
        ));
        let zero_window =
            AttributionConfig { span_mode: SpanMode::Window { slength: 0 }, ..base };
        assert!(matches!(
            attn_attrib(&w, &seq, &zero_window),
            Err(AttributeError::InvalidConfig(_))
        ));
    }

    #[test]
    fn gradient_baseline_marks_vanishing_gradients() {
        let (w, _, exs) = setup(4);
        let ex = &exs[0];
        let seq = ex.seq(Mode::Copy);
        let g = gradient_baseline(&w, &seq, ex.swap_token(), 3).unwrap();
        assert!(!g.uninformative);
        assert_eq!(g.saliency.len(), seq.tokens.len());
        assert!(g.span.end <= ex.context_len());
        assert!(g.saliency.iter().all(|v| v.is_finite()));

        // Zero unembedding: uniform output, zero input gradient.
        let mut dead = w.clone();
        dead.unembedding = Matrix::zeros(w.config.vocab_size, w.config.d_model);
        let g0 = gradient_baseline(&dead, &seq, ex.swap_token(), 3).unwrap();
        assert!(g0.uninformative);
        assert_eq!(g0.span.start, 0);
        assert_eq!(g0.span.peak_value, 0.0);
    }
}
