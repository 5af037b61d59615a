//! Evaluation metrics and the attribution evaluation harness.
//!
//! Span quality is measured three ways: exact match (does the span cover
//! the gold position), multiset token F1 against the gold span, and a
//! faithfulness score `rel = |(logp_orig - logp_ablated) / logp_ablated|`
//! where the ablated run has the attributed span padded out of the
//! context. rel is scale-free in log-probability units and grows when
//! removing the span actually destroys the answer — a span can exactly
//! match the gold position and still be unfaithful if the model never used
//! it.
//!
//! `evaluate` runs the full comparison: pick the attribution head from the
//! entropy profile, attribute every example, run the gradient-saliency
//! baseline at the same span length, ablate both spans, and score both
//! methods side by side.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribute::{
    attn_attrib, gradient_baseline, head_entropy_profile, select_attribution_head,
    AttributeError, AttributionConfig, AttributionSpan, SpanMode,
};
use crate::instrument::ComponentKind;
use crate::model::{ModelError, ModelWeights, TokenSeq};
use crate::numerics::NumericsError;
use crate::probe::{Mode, ProbeExample};
use crate::steer::{Forwarder, SteerError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("relative score undefined: {0}")]
    UndefinedRelScore(String),
    #[error("invalid span: {0}")]
    InvalidSpan(String),
    #[error(transparent)]
    Attribute(#[from] AttributeError),
    #[error(transparent)]
    Steer(#[from] SteerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

// ---------------------------------------------------------------------------
// Span metrics
// ---------------------------------------------------------------------------

/// Loose match: the span intersects the gold span. Strict match: every
/// position of the span lies inside the gold span too, so padding around
/// the evidence no longer counts.
pub fn attribution_exact_match(
    span: &AttributionSpan,
    gold: (usize, usize),
    strict: bool,
) -> bool {
    let (gs, ge) = gold;
    if strict {
        gs <= span.start && span.end <= ge && span.start < span.end
    } else {
        span.start < ge && gs < span.end
    }
}

/// Multiset token F1: `2 * overlap / (|predicted| + |gold|)` with overlap
/// counted per token occurrence. Two empty inputs count as a perfect match.
pub fn token_f1(predicted: &[u32], gold: &[u32]) -> f64 {
    if predicted.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: std::collections::BTreeMap<u32, i64> = std::collections::BTreeMap::new();
    for &t in gold {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for &t in predicted {
        let c = counts.entry(t).or_insert(0);
        if *c > 0 {
            *c -= 1;
            overlap += 1;
        }
    }
    2.0 * overlap as f64 / (predicted.len() + gold.len()) as f64
}

/// Token F1 of two spans over the same token sequence.
pub fn span_f1(tokens: &[u32], predicted: (usize, usize), gold: (usize, usize)) -> f64 {
    token_f1(&tokens[predicted.0..predicted.1], &tokens[gold.0..gold.1])
}

/// `|(logp_orig - logp_ablated) / logp_ablated|`: how much of the answer's
/// log probability the ablated span was carrying. Invariant under rescaling
/// both inputs, so it compares across examples of different difficulty.
pub fn rel_score(logp_orig: f64, logp_ablated: f64) -> Result<f64, MetricsError> {
    if logp_ablated == 0.0 {
        return Err(MetricsError::UndefinedRelScore(
            "ablated log probability is exactly zero".into(),
        ));
    }
    Ok(((logp_orig - logp_ablated) / logp_ablated).abs())
}

// ---------------------------------------------------------------------------
// Context ablation
// ---------------------------------------------------------------------------

/// Replaces the given context spans with the pad token. Overlapping or
/// adjacent spans merge; spans must lie inside the context window; sequence
/// length, context and question bounds are all preserved.
pub fn ablate_spans_from_context(
    seq: &TokenSeq,
    spans: &[(usize, usize)],
    pad: u32,
) -> Result<TokenSeq, MetricsError> {
    let (c0, c1) = seq.context;
    let mut sorted: Vec<(usize, usize)> = spans.to_vec();
    sorted.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in sorted {
        if s >= e || s < c0 || e > c1 {
            return Err(MetricsError::InvalidSpan(format!(
                "span [{s}, {e}) outside context [{c0}, {c1}) or empty"
            )));
        }
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let mut tokens = seq.tokens.clone();
    for (s, e) in merged {
        for t in tokens.iter_mut().take(e).skip(s) {
            *t = pad;
        }
    }
    Ok(TokenSeq::new(tokens, seq.context, seq.question)
        .expect("bounds unchanged from a valid sequence"))
}

/// Fraction of examples whose greedy answer matches the mode's target,
/// under any forwarder (plain weights or a steered view).
pub fn qa_accuracy<F: Forwarder + ?Sized>(
    forwarder: &F,
    dataset: &[ProbeExample],
    mode: Mode,
) -> Result<f64, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::InvalidSpan("empty dataset".into()));
    }
    let hits: Result<Vec<bool>, MetricsError> = dataset
        .par_iter()
        .map(|ex| Ok(forwarder.next_token(&ex.seq(mode))? == ex.target(mode)))
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

// ---------------------------------------------------------------------------
// Attribution evaluation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Window span length used by both methods.
    pub slength: usize,
    /// Strict exact-match (span inside gold) instead of intersection.
    pub strict: bool,
    /// Pad token id used when ablating spans.
    pub pad: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: u64,
    pub attn_span: (usize, usize),
    pub grad_span: (usize, usize),
    pub attn_exact: bool,
    pub grad_exact: bool,
    pub attn_f1: f64,
    pub grad_f1: f64,
    pub attn_rel: f64,
    pub grad_rel: f64,
    /// Attention attribution was at least as faithful as the gradient
    /// baseline on this example.
    pub attn_wins: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy_copy: f64,
    pub accuracy_memory: f64,
    /// Head picked by the entropy profile and used for attribution.
    pub head: ComponentKind,
    pub attn_exact_rate: f64,
    pub grad_exact_rate: f64,
    pub attn_f1_mean: f64,
    pub grad_f1_mean: f64,
    pub attn_rel_mean: f64,
    pub grad_rel_mean: f64,
    pub win_rate: f64,
    pub per_example: Vec<EvalRow>,
}

/// Full harness over copy-mode prompts: QA accuracy in both modes, then a
/// per-example head-attribution vs gradient-baseline comparison.
pub fn evaluate(
    weights: &ModelWeights,
    dataset: &[ProbeExample],
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::InvalidSpan("empty dataset".into()));
    }
    if cfg.slength == 0 {
        return Err(MetricsError::InvalidSpan("slength must be >= 1".into()));
    }
    let accuracy_copy = qa_accuracy(weights, dataset, Mode::Copy)?;
    let accuracy_memory = qa_accuracy(weights, dataset, Mode::Memory)?;
    let profiles = head_entropy_profile(weights, dataset, Mode::Copy)?;
    let head = select_attribution_head(&profiles)?;
    let attn_cfg = AttributionConfig {
        head,
        answer_length: 1,
        top_k: 1,
        span_mode: SpanMode::Window { slength: cfg.slength },
        terminator: None,
    };

    let rows: Result<Vec<EvalRow>, MetricsError> = dataset
        .par_iter()
        .map(|ex| {
            let prompt = ex.seq(Mode::Copy);
            let target = ex.target(Mode::Copy);
            let gold = (ex.answer_position, ex.answer_position + 1);

            let attn = attn_attrib(weights, &prompt, &attn_cfg)?;
            let a_span = &attn.spans[0];
            let grad = gradient_baseline(weights, &prompt, target, cfg.slength)?;
            let g_span = &grad.span;

            let logp = |seq: &TokenSeq| -> Result<f64, MetricsError> {
                Ok(weights.next_distribution(seq)?.get(target as usize).ln())
            };
            let logp_orig = logp(&prompt)?;
            let attn_ablated =
                ablate_spans_from_context(&prompt, &[(a_span.start, a_span.end)], cfg.pad)?;
            let grad_ablated =
                ablate_spans_from_context(&prompt, &[(g_span.start, g_span.end)], cfg.pad)?;
            let attn_rel = rel_score(logp_orig, logp(&attn_ablated)?)?;
            let grad_rel = rel_score(logp_orig, logp(&grad_ablated)?)?;

            Ok(EvalRow {
                id: ex.id,
                attn_span: (a_span.start, a_span.end),
                grad_span: (g_span.start, g_span.end),
                attn_exact: attribution_exact_match(a_span, gold, cfg.strict),
                grad_exact: attribution_exact_match(g_span, gold, cfg.strict),
                attn_f1: span_f1(&prompt.tokens, (a_span.start, a_span.end), gold),
                grad_f1: span_f1(&prompt.tokens, (g_span.start, g_span.end), gold),
                attn_rel,
                grad_rel,
                attn_wins: attn_rel >= grad_rel,
            })
        })
        .collect();
    let rows = rows?;
    let n = rows.len();
    let nf = n as f64;
    let rate = |f: &dyn Fn(&EvalRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / nf;
    let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / nf;
    Ok(EvalReport {
        n,
        accuracy_copy,
        accuracy_memory,
        head,
        attn_exact_rate: rate(&|r| r.attn_exact),
        grad_exact_rate: rate(&|r| r.grad_exact),
        attn_f1_mean: mean(&|r| r.attn_f1),
        grad_f1_mean: mean(&|r| r.grad_f1),
        attn_rel_mean: mean(&|r| r.attn_rel),
        grad_rel_mean: mean(&|r| r.grad_rel),
        win_rate: rate(&|r| r.attn_wins),
        per_example: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{build_fixture, FixtureConfig, FixtureInfo};
    use crate::probe::{gen_probe, ProbeConfig};
    use proptest::prelude::*;

    fn setup(n: usize) -> (ModelWeights, FixtureInfo, Vec<ProbeExample>) {
        let (w, info) = build_fixture(&FixtureConfig::default()).unwrap();
        let pcfg = ProbeConfig { n, ..Default::default() };
        let exs = gen_probe(&w, &info, &pcfg, 41).unwrap().examples;
        (w, info, exs)
    }

    fn span(start: usize, end: usize) -> AttributionSpan {
        AttributionSpan { start, end, peak_value: 1.0, source_step: 0, tokens: vec![] }
    }

    #[test]
    fn token_f1_matches_hand_computed_values() {
        // overlap 2, sizes 3 and 4: F1 = 4/7.
        assert_eq!(token_f1(&[10, 11, 99], &[10, 11, 12, 13]), 4.0 / 7.0);
        // Multiset counting: the second `7` finds no second match.
        assert_eq!(token_f1(&[7, 7, 8], &[7]), 0.5);
        assert_eq!(token_f1(&[], &[]), 1.0);
        assert_eq!(token_f1(&[1], &[]), 0.0);
        assert_eq!(token_f1(&[1, 2], &[1, 2]), 1.0);
    }

    #[test]
    fn rel_score_matches_hand_computed_value() {
        assert_eq!(rel_score(-2.0, -5.0).unwrap(), 0.6);
        assert!(matches!(rel_score(-2.0, 0.0), Err(MetricsError::UndefinedRelScore(_))));
    }

    proptest! {
        #[test]
        fn rel_score_is_scale_free_and_nonnegative(
            a in -50.0f64..-0.01,
            b in -50.0f64..-0.01,
            c in 0.01f64..100.0,
        ) {
            let base = rel_score(a, b).unwrap();
            let scaled = rel_score(c * a, c * b).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!((base - scaled).abs() < 1e-9 * base.max(1.0));
        }
    }

    #[test]
    fn exact_match_loose_and_strict() {
        let s = span(5, 8);
        assert!(attribution_exact_match(&s, (6, 7), false));
        assert!(attribution_exact_match(&s, (7, 10), false));
        assert!(!attribution_exact_match(&s, (8, 9), false));
        assert!(!attribution_exact_match(&s, (2, 5), false));
        // Strict needs the whole span inside the gold region.
        assert!(!attribution_exact_match(&s, (6, 7), true));
        assert!(attribution_exact_match(&s, (5, 9), true));
    }

    #[test]
    fn ablation_merges_spans_and_preserves_shape() {
        let seq = TokenSeq::new(vec![10, 11, 12, 13, 14, 1, 2, 10], (0, 5), (5, 8)).unwrap();
        let out = ablate_spans_from_context(&seq, &[(1, 3), (2, 4)], 0).unwrap();
        assert_eq!(out.tokens, vec![10, 0, 0, 0, 14, 1, 2, 10]);
        assert_eq!(out.context, seq.context);
        assert_eq!(out.question, seq.question);
        assert_eq!(out.tokens.len(), seq.tokens.len());

        // Question positions may not be ablated, nor empty spans.
        assert!(matches!(
            ablate_spans_from_context(&seq, &[(4, 6)], 0),
            Err(MetricsError::InvalidSpan(_))
        ));
        assert!(matches!(
            ablate_spans_from_context(&seq, &[(2, 2)], 0),
            Err(MetricsError::InvalidSpan(_))
        ));
    }

    #[test]
    fn fixture_answers_both_modes_perfectly() {
        let (w, _, exs) = setup(16);
        assert_eq!(qa_accuracy(&w, &exs, Mode::Copy).unwrap(), 1.0);
        assert_eq!(qa_accuracy(&w, &exs, Mode::Memory).unwrap(), 1.0);
    }

    #[test]
    fn harness_finds_attention_attribution_faithful() {
        let (w, info, exs) = setup(24);
        let cfg = EvalConfig { slength: 3, strict: false, pad: info.pad };
        let report = evaluate(&w, &exs, &cfg).unwrap();
        assert_eq!(report.n, 24);
        assert_eq!(report.accuracy_copy, 1.0);
        assert_eq!(report.accuracy_memory, 1.0);
        assert_eq!(
            report.head,
            ComponentKind::AttnHead { layer: info.copy_head.0, head: info.copy_head.1 }
        );
        assert_eq!(report.attn_exact_rate, 1.0);
        assert_eq!(report.win_rate, 1.0);
        assert!(report.attn_rel_mean >= report.grad_rel_mean);
        assert!(report.attn_f1_mean > 0.0);
        for row in &report.per_example {
            assert!(row.attn_rel.is_finite() && row.grad_rel.is_finite());
        }
    }
}
