//! Component addressing, activation capture, and the three-step
//! direct-effect patch.
//!
//! A patch runs in three steps: (1) copy the donor (corrupted-run)
//! activation into the selected source components, (2) recompute the forward
//! pass, (3) restore every non-source component at every position to its
//! clean-run value. With restore on, only the sources' direct edges into the
//! final logits change — which, thanks to the exactly additive residual
//! stream, equals a closed-form logit adjustment the tests check against.
//! The implementation nonetheless routes through the engine's override
//! mechanism (a genuine re-run), because hierarchy-1 scoring needs the same
//! machinery with some components left free to recompute.
//!
//! Restores are applied to *all* non-source components rather than only
//! topologically downstream ones; upstream components would recompute their
//! clean values anyway, so the two formulations agree and this one needs no
//! dependency analysis.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::engine::{run, OverrideMap, RunOptions};
use crate::model::{CaptureSpec, ModelError, ModelWeights, RunTrace, Slot, TokenSeq};
use crate::numerics::{softmax, NumericsError, ProbDist};

#[derive(Debug, Error)]
pub enum InstrumentError {
    #[error("activation not captured: {0}")]
    NotCaptured(String),
    #[error("alignment error: {0}")]
    AlignmentError(String),
    #[error("invalid patch plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

// ---------------------------------------------------------------------------
// Component references
// ---------------------------------------------------------------------------

/// Which component of the network: one attention head, a whole attention
/// layer (all heads jointly), or an MLP block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentKind {
    AttnHead { layer: usize, head: usize },
    AttnLayer { layer: usize },
    Mlp { layer: usize },
}

impl ComponentKind {
    pub fn layer(&self) -> usize {
        match *self {
            ComponentKind::AttnHead { layer, .. }
            | ComponentKind::AttnLayer { layer }
            | ComponentKind::Mlp { layer } => layer,
        }
    }

    pub(crate) fn slot(&self) -> Slot {
        match *self {
            ComponentKind::AttnHead { head, .. } => Slot::Head(head),
            ComponentKind::AttnLayer { .. } => Slot::AttnLayer,
            ComponentKind::Mlp { .. } => Slot::Mlp,
        }
    }

    fn order_key(&self) -> (usize, u8, usize) {
        match *self {
            ComponentKind::AttnHead { layer, head } => (layer, 0, head),
            ComponentKind::AttnLayer { layer } => (layer, 1, 0),
            ComponentKind::Mlp { layer } => (layer, 2, 0),
        }
    }
}

impl Ord for ComponentKind {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl PartialOrd for ComponentKind {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl std::fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            ComponentKind::AttnHead { layer, head } => write!(f, "attn_head({layer},{head})"),
            ComponentKind::AttnLayer { layer } => write!(f, "attn_layer({layer})"),
            ComponentKind::Mlp { layer } => write!(f, "mlp({layer})"),
        }
    }
}

/// Token position a component is addressed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Index(usize),
    LastToken,
}

impl Position {
    pub fn resolve(&self, seq_len: usize) -> usize {
        match *self {
            Position::Index(t) => t,
            Position::LastToken => seq_len - 1,
        }
    }

    fn order_key(&self) -> (u8, usize) {
        match *self {
            Position::Index(t) => (0, t),
            Position::LastToken => (1, 0),
        }
    }
}

impl Ord for Position {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl PartialOrd for Position {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A component at a position — the unit the patcher operates on. Total
/// order: (layer, kind, head, position), giving deterministic iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentRef {
    pub kind: ComponentKind,
    pub position: Position,
}

impl ComponentRef {
    pub fn at_last(kind: ComponentKind) -> Self {
        ComponentRef { kind, position: Position::LastToken }
    }
}

/// Enumerates every head and MLP of the model in ComponentRef order.
pub fn all_components(weights: &ModelWeights) -> Vec<ComponentKind> {
    let c = &weights.config;
    let mut out = Vec::new();
    for layer in 0..c.n_layers {
        for head in 0..c.n_heads {
            out.push(ComponentKind::AttnHead { layer, head });
        }
        out.push(ComponentKind::Mlp { layer });
    }
    out
}

// ---------------------------------------------------------------------------
// Capture
// ---------------------------------------------------------------------------

/// Reads one component's activation row out of a trace. Borrow only — the
/// trace is never mutated by reads.
pub fn capture<'t>(trace: &'t RunTrace, c: &ComponentRef) -> Result<&'t [f64], InstrumentError> {
    let pos = c.position.resolve(trace.seq_len);
    if pos >= trace.seq_len {
        return Err(InstrumentError::NotCaptured(format!(
            "position {pos} beyond sequence length {}",
            trace.seq_len
        )));
    }
    let layer = c.kind.layer();
    let lt = trace
        .layers
        .get(layer)
        .ok_or_else(|| InstrumentError::NotCaptured(format!("layer {layer} out of range")))?;
    let mat = match c.kind {
        ComponentKind::AttnHead { head, .. } => lt
            .heads
            .get(head)
            .ok_or_else(|| InstrumentError::NotCaptured(format!("head {head} out of range")))?
            .as_ref()
            .map(|h| &h.contrib),
        ComponentKind::AttnLayer { .. } => lt.attn_out.as_ref(),
        ComponentKind::Mlp { .. } => lt.mlp.as_ref(),
    };
    mat.map(|m| m.row(pos))
        .ok_or_else(|| InstrumentError::NotCaptured(format!("{} was not in the capture spec", c.kind)))
}

// ---------------------------------------------------------------------------
// Patching
// ---------------------------------------------------------------------------

/// Sources to patch from the donor run, and whether step 3 (restore) runs.
#[derive(Debug, Clone)]
pub struct PatchPlan<'a> {
    pub sources: Vec<ComponentRef>,
    pub donor: &'a RunTrace,
    pub restore_downstream: bool,
}

impl<'a> PatchPlan<'a> {
    pub fn new(sources: Vec<ComponentRef>, donor: &'a RunTrace) -> Self {
        PatchPlan { sources, donor, restore_downstream: true }
    }
}

fn insert_rows(
    overrides: &mut OverrideMap,
    layer: usize,
    slot: Slot,
    positions: impl Iterator<Item = usize>,
    trace: &RunTrace,
    kind: &ComponentKind,
) -> Result<(), InstrumentError> {
    for pos in positions {
        let row = capture(trace, &ComponentRef { kind: *kind, position: Position::Index(pos) })?;
        overrides.insert((layer, slot, pos), row.to_vec());
    }
    Ok(())
}

/// Builds the engine override map realizing a plan: donor rows at source
/// cells, clean rows everywhere else (when restoring). `free` components are
/// left out entirely so the engine recomputes them — hierarchy-1 scoring
/// reads those recomputed activations back out of the returned trace.
fn build_overrides(
    weights: &ModelWeights,
    clean: &RunTrace,
    plan: &PatchPlan<'_>,
    free: &[ComponentKind],
) -> Result<OverrideMap, InstrumentError> {
    if plan.sources.is_empty() {
        return Err(InstrumentError::InvalidPlan("no sources".into()));
    }
    if plan.donor.seq_len != clean.seq_len {
        return Err(InstrumentError::AlignmentError(format!(
            "donor length {} != clean length {}",
            plan.donor.seq_len, clean.seq_len
        )));
    }
    let seq_len = clean.seq_len;
    let cfg = &weights.config;

    let mut overrides = OverrideMap::new();

    // Layers whose attention is addressed at layer granularity by a source.
    let mut layer_level = vec![false; cfg.n_layers];
    for s in &plan.sources {
        if let ComponentKind::AttnLayer { layer } = s.kind {
            layer_level[layer] = true;
        }
    }
    for s in &plan.sources {
        if let ComponentKind::AttnHead { layer, .. } = s.kind {
            if layer_level[layer] {
                return Err(InstrumentError::InvalidPlan(format!(
                    "layer {layer} is patched both as a whole and per-head"
                )));
            }
        }
    }

    // Step 1: donor activations into the sources (at their own positions).
    for s in &plan.sources {
        let pos = s.position.resolve(seq_len);
        insert_rows(
            &mut overrides,
            s.kind.layer(),
            s.kind.slot(),
            std::iter::once(pos),
            plan.donor,
            &s.kind,
        )?;
    }

    // Step 3: clean values into every other (component, position) cell.
    if plan.restore_downstream {
        let is_free = |k: &ComponentKind| free.contains(k);
        let source_cell = |k: &ComponentKind, pos: usize| {
            plan.sources
                .iter()
                .any(|s| s.kind == *k && s.position.resolve(seq_len) == pos)
        };
        for layer in 0..cfg.n_layers {
            let mut kinds: Vec<ComponentKind> = Vec::new();
            if layer_level[layer] {
                kinds.push(ComponentKind::AttnLayer { layer });
            } else {
                for head in 0..cfg.n_heads {
                    kinds.push(ComponentKind::AttnHead { layer, head });
                }
            }
            kinds.push(ComponentKind::Mlp { layer });
            for kind in kinds {
                if is_free(&kind) {
                    continue;
                }
                for pos in 0..seq_len {
                    if source_cell(&kind, pos) {
                        continue;
                    }
                    insert_rows(
                        &mut overrides,
                        layer,
                        kind.slot(),
                        std::iter::once(pos),
                        clean,
                        &kind,
                    )?;
                }
            }
        }
    }
    Ok(overrides)
}

/// Runs the patched forward pass and returns its trace. Pass a clean trace
/// captured with `CaptureSpec::full()` on the same tokens.
pub fn patched_trace(
    weights: &ModelWeights,
    tokens: &[u32],
    clean: &RunTrace,
    plan: &PatchPlan<'_>,
    free: &[ComponentKind],
    capture_spec: &CaptureSpec,
) -> Result<RunTrace, InstrumentError> {
    if tokens.len() != clean.seq_len {
        return Err(InstrumentError::AlignmentError(format!(
            "token length {} != clean trace length {}",
            tokens.len(),
            clean.seq_len
        )));
    }
    let overrides = build_overrides(weights, clean, plan, free)?;
    let options = RunOptions { overrides, ..Default::default() };
    Ok(run(weights, tokens, capture_spec, &options)?)
}

/// Next-token distribution at the last position after applying the plan,
/// reusing an existing clean trace.
pub fn patched_distribution_cached(
    weights: &ModelWeights,
    tokens: &[u32],
    clean: &RunTrace,
    plan: &PatchPlan<'_>,
) -> Result<ProbDist, InstrumentError> {
    let trace = patched_trace(weights, tokens, clean, plan, &[], &CaptureSpec::none())?;
    Ok(softmax(&trace.logits)?)
}

/// Convenience wrapper that produces the clean run itself.
pub fn patched_distribution(
    weights: &ModelWeights,
    clean_input: &TokenSeq,
    plan: &PatchPlan<'_>,
) -> Result<ProbDist, InstrumentError> {
    let clean = run(weights, &clean_input.tokens, &CaptureSpec::full(), &RunOptions::default())?;
    patched_distribution_cached(weights, &clean_input.tokens, &clean, plan)
}

/// Replaces each component's direct contribution at the last position with
/// an explicit row (e.g. zeros for ablation, a dataset mean for
/// mean-substitution) while restoring everything else to its clean value, so
/// indirect paths through the replaced components are preserved. Same
/// restore semantics as a patch, but the replacement rows come from the
/// caller instead of a donor trace.
pub fn replaced_direct_distribution(
    weights: &ModelWeights,
    tokens: &[u32],
    clean: &RunTrace,
    replacements: &[(ComponentKind, Vec<f64>)],
) -> Result<ProbDist, InstrumentError> {
    if replacements.is_empty() {
        return Err(InstrumentError::InvalidPlan("no replacements".into()));
    }
    if tokens.len() != clean.seq_len {
        return Err(InstrumentError::AlignmentError(format!(
            "token length {} != clean trace length {}",
            tokens.len(),
            clean.seq_len
        )));
    }
    let cfg = &weights.config;
    let seq_len = clean.seq_len;
    let last = seq_len - 1;
    for (kind, row) in replacements {
        if row.len() != cfg.d_model {
            return Err(InstrumentError::InvalidPlan(format!(
                "replacement for {kind} has {} entries, expected d_model = {}",
                row.len(),
                cfg.d_model
            )));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(InstrumentError::InvalidPlan(format!(
                "replacement for {kind} contains non-finite values"
            )));
        }
    }

    let mut layer_level = vec![false; cfg.n_layers];
    for (kind, _) in replacements {
        if let ComponentKind::AttnLayer { layer } = kind {
            layer_level[*layer] = true;
        }
    }
    for (kind, _) in replacements {
        if let ComponentKind::AttnHead { layer, .. } = kind {
            if layer_level[*layer] {
                return Err(InstrumentError::InvalidPlan(format!(
                    "layer {layer} is replaced both as a whole and per-head"
                )));
            }
        }
    }

    let mut overrides = OverrideMap::new();
    let replaced_cell = |k: &ComponentKind, pos: usize| {
        pos == last && replacements.iter().any(|(rk, _)| rk == k)
    };
    for layer in 0..cfg.n_layers {
        let mut kinds: Vec<ComponentKind> = Vec::new();
        if layer_level[layer] {
            kinds.push(ComponentKind::AttnLayer { layer });
        } else {
            for head in 0..cfg.n_heads {
                kinds.push(ComponentKind::AttnHead { layer, head });
            }
        }
        kinds.push(ComponentKind::Mlp { layer });
        for kind in kinds {
            for pos in 0..seq_len {
                if replaced_cell(&kind, pos) {
                    continue;
                }
                insert_rows(&mut overrides, layer, kind.slot(), std::iter::once(pos), clean, &kind)?;
            }
        }
    }
    for (kind, row) in replacements {
        overrides.insert((kind.layer(), kind.slot(), last), row.clone());
    }
    let options = RunOptions { overrides, ..Default::default() };
    let trace = run(weights, tokens, &CaptureSpec::none(), &options)?;
    Ok(softmax(&trace.logits)?)
}
