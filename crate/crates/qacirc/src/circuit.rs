//! Circuit extraction: score components by direct-effect patching, rank
//! them, greedily select a minimal prefix meeting a combined-score
//! threshold, and validate the result (random baseline, held-out ablation,
//! overlap between circuits).
//!
//! A component's score on one example is 1 - P_patched(target): how much
//! answer probability is destroyed when that component's direct contribution
//! is swapped for its corrupted-run value with everything else restored.
//! Scores average over the probe set in example-id order (a fixed-order
//! reduction, so worker parallelism never changes output bytes).
//!
//! Hierarchy 0 scores components against the final logits at the last
//! position. Hierarchy 1 scores *sources* against the already-selected
//! hierarchy-0 nodes: the source is patched at every position, the selected
//! nodes are left free to recompute on the perturbed stream, every other
//! component is restored, and only the selected nodes' recomputed direct
//! contributions are swapped into otherwise-clean logits. The source's own
//! direct edge to the logits therefore stays clean; what is measured is
//! purely its influence routed through the hierarchy-0 circuit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instrument::{
    capture, patched_distribution_cached, patched_trace, ComponentKind, ComponentRef,
    InstrumentError, PatchPlan, Position,
};
use crate::model::engine::{run, RunOptions};
use crate::model::{CaptureSpec, ModelError, ModelWeights, RunTrace};
use crate::numerics::{softmax, NumericsError};
use crate::probe::{dataset_sha256, Mode, ProbeExample};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("incomparable reports: {0}")]
    Incomparable(String),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Head,
    Layer,
    Mlp,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Head => "head",
            Granularity::Layer => "layer",
            Granularity::Mlp => "mlp",
        })
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "head" => Ok(Granularity::Head),
            "layer" => Ok(Granularity::Layer),
            "mlp" => Ok(Granularity::Mlp),
            other => Err(format!("unknown granularity '{other}' (head|layer|mlp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    #[serde(flatten)]
    pub component: ComponentKind,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitReport {
    pub hierarchy: usize,
    pub granularity: Granularity,
    pub delta: f64,
    pub combined_score: f64,
    pub delta_unmet: bool,
    pub selected: Vec<ComponentScore>,
    pub ranked: Vec<ComponentScore>,
    pub dataset_sha256: String,
    pub seed: u64,
    /// Combined score of each ranked prefix (index k-1 holds prefix length
    /// k); feeds the score-vs-k curve in the report stage.
    pub prefix_scores: Vec<f64>,
}

impl CircuitReport {
    pub fn selected_kinds(&self) -> Vec<ComponentKind> {
        self.selected.iter().map(|s| s.component).collect()
    }
}

// ---------------------------------------------------------------------------
// Prepared evaluation state
// ---------------------------------------------------------------------------

struct PreparedItem {
    tokens: Vec<u32>,
    target: u32,
    clean: RunTrace,
    donor: RunTrace,
}

/// Clean and donor traces for every example of a dataset in one mode,
/// computed once and shared by all scoring calls.
pub struct Prepared<'w> {
    weights: &'w ModelWeights,
    mode: Mode,
    items: Vec<PreparedItem>,
    fingerprint: String,
}

impl<'w> Prepared<'w> {
    pub fn new(
        weights: &'w ModelWeights,
        dataset: &[ProbeExample],
        mode: Mode,
    ) -> Result<Self, CircuitError> {
        let items: Result<Vec<PreparedItem>, CircuitError> = dataset
            .par_iter()
            .map(|ex| {
                let seq = ex.seq(mode);
                let clean =
                    run(weights, &seq.tokens, &CaptureSpec::full(), &RunOptions::default())?;
                let corrupt = ex.corrupt_seq();
                let donor =
                    run(weights, &corrupt.tokens, &CaptureSpec::full(), &RunOptions::default())?;
                Ok(PreparedItem { tokens: seq.tokens, target: ex.target(mode), clean, donor })
            })
            .collect();
        Ok(Prepared {
            weights,
            mode,
            items: items?,
            fingerprint: dataset_sha256(dataset),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Mean of a per-example evaluation, reduced in example order.
    fn mean_over<F>(&self, f: F) -> Result<f64, CircuitError>
    where
        F: Fn(&PreparedItem) -> Result<f64, CircuitError> + Sync + Send,
    {
        let vals: Result<Vec<f64>, CircuitError> = self.items.par_iter().map(f).collect();
        let vals = vals?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean patched target probability for a joint source set (restore on).
    fn mean_patched_probability(&self, kinds: &[ComponentKind]) -> Result<f64, CircuitError> {
        self.mean_over(|item| {
            let sources = kinds.iter().map(|&k| ComponentRef::at_last(k)).collect();
            let plan = PatchPlan::new(sources, &item.donor);
            let p = patched_distribution_cached(self.weights, &item.tokens, &item.clean, &plan)?;
            Ok(p.get(item.target as usize))
        })
    }
}

/// Components enumerated at a granularity, in ComponentRef order.
pub fn components_at(weights: &ModelWeights, granularity: Granularity) -> Vec<ComponentKind> {
    let c = &weights.config;
    let mut out = Vec::new();
    match granularity {
        Granularity::Head => {
            for layer in 0..c.n_layers {
                for head in 0..c.n_heads {
                    out.push(ComponentKind::AttnHead { layer, head });
                }
            }
        }
        Granularity::Layer => {
            for layer in 0..c.n_layers {
                out.push(ComponentKind::AttnLayer { layer });
            }
        }
        Granularity::Mlp => {
            for layer in 0..c.n_layers {
                out.push(ComponentKind::Mlp { layer });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scoring and selection
// ---------------------------------------------------------------------------

/// Average metric score of one component: mean(1 - P_patched(target)).
pub fn score_component(
    prep: &Prepared<'_>,
    component: ComponentKind,
) -> Result<ComponentScore, CircuitError> {
    let p = prep.mean_patched_probability(&[component])?;
    Ok(ComponentScore { component, score: 1.0 - p })
}

/// Diagnostic variant: patch each example from its own clean trace. On a
/// validity-filtered set this is mean(1 - P_clean), i.e. near zero.
pub fn score_component_noop(
    prep: &Prepared<'_>,
    component: ComponentKind,
) -> Result<ComponentScore, CircuitError> {
    let score = prep.mean_over(|item| {
        let plan =
            PatchPlan::new(vec![ComponentRef::at_last(component)], &item.clean);
        let p = patched_distribution_cached(prep.weights, &item.tokens, &item.clean, &plan)?;
        Ok(1.0 - p.get(item.target as usize))
    })?;
    Ok(ComponentScore { component, score })
}

/// Scores every component of the granularity and sorts descending, ties
/// broken by component order.
pub fn rank_components(
    prep: &Prepared<'_>,
    granularity: Granularity,
) -> Result<Vec<ComponentScore>, CircuitError> {
    let mut scores = Vec::new();
    for kind in components_at(prep.weights, granularity) {
        scores.push(score_component(prep, kind)?);
    }
    scores.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| a.component.cmp(&b.component))
    });
    Ok(scores)
}

/// Greedy minimal-prefix selection: the smallest k whose joint patch reaches
/// `delta`. Every prefix is evaluated jointly (component effects are not
/// additive in probability space); if no prefix reaches `delta` the full
/// list is returned flagged `delta_unmet`.
pub fn greedy_select(
    prep: &Prepared<'_>,
    ranked: Vec<ComponentScore>,
    delta: f64,
    seed: u64,
    granularity: Granularity,
    hierarchy: usize,
) -> Result<CircuitReport, CircuitError> {
    let kinds: Vec<ComponentKind> = ranked.iter().map(|s| s.component).collect();
    let mut prefix_scores = Vec::with_capacity(kinds.len());
    for k in 1..=kinds.len() {
        let p = prep.mean_patched_probability(&kinds[..k])?;
        prefix_scores.push(1.0 - p);
    }
    let chosen = prefix_scores.iter().position(|&s| s >= delta);
    let (selected_len, combined_score, delta_unmet) = match chosen {
        Some(i) => (i + 1, prefix_scores[i], false),
        None => (kinds.len(), *prefix_scores.last().expect("ranked non-empty"), true),
    };
    Ok(CircuitReport {
        hierarchy,
        granularity,
        delta,
        combined_score,
        delta_unmet,
        selected: ranked[..selected_len].to_vec(),
        ranked,
        dataset_sha256: prep.fingerprint.clone(),
        seed,
        prefix_scores,
    })
}

// ---------------------------------------------------------------------------
// Hierarchy
// ---------------------------------------------------------------------------

fn hierarchy1_sources(
    weights: &ModelWeights,
    granularity: Granularity,
    h0: &[ComponentKind],
) -> Vec<ComponentKind> {
    let mut out = components_at(weights, granularity);
    // Sources also include the MLPs when hierarchy 0 ran on attention.
    if granularity != Granularity::Mlp {
        out.extend(components_at(weights, Granularity::Mlp));
    }
    out.sort();
    out.retain(|k| !h0.contains(k));
    out
}

/// Mean hierarchy-1 score of a joint source set against the `h0` nodes.
fn h1_combined_score(
    prep: &Prepared<'_>,
    sources: &[ComponentKind],
    h0: &[ComponentKind],
) -> Result<f64, CircuitError> {
    if sources.iter().any(|s| h0.contains(s)) {
        return Err(CircuitError::Unsupported(
            "a hierarchy-1 source cannot also be a hierarchy-0 node".into(),
        ));
    }
    prep.mean_over(|item| {
        let t_len = item.tokens.len();
        let mut refs = Vec::with_capacity(sources.len() * t_len);
        for &kind in sources {
            for pos in 0..t_len {
                refs.push(ComponentRef { kind, position: Position::Index(pos) });
            }
        }
        let plan = PatchPlan::new(refs, &item.donor);
        let patched = patched_trace(
            prep.weights,
            &item.tokens,
            &item.clean,
            &plan,
            h0,
            &CaptureSpec::full(),
        )?;
        // Swap only the recomputed hierarchy-0 contributions into the
        // otherwise clean logits.
        let mut logits = item.clean.logits.clone();
        for node in h0 {
            let r = ComponentRef::at_last(*node);
            let clean_act = capture(&item.clean, &r)?;
            let new_act = capture(&patched, &r)?;
            let clean_log = prep.weights.unembedding.matvec(clean_act)?;
            let new_log = prep.weights.unembedding.matvec(new_act)?;
            for (l, (c, n)) in logits.iter_mut().zip(clean_log.iter().zip(&new_log)) {
                *l = *l - c + n;
            }
        }
        let p = softmax(&logits)?;
        Ok(1.0 - p.get(item.target as usize))
    })
}

/// Extracts circuits for hierarchies 0..=k. Only K in {0, 1} is supported.
pub fn extract_hierarchy(
    prep: &Prepared<'_>,
    k: usize,
    delta: f64,
    granularity: Granularity,
    seed: u64,
) -> Result<Vec<CircuitReport>, CircuitError> {
    if k > 1 {
        return Err(CircuitError::Unsupported(format!(
            "hierarchy {k} not supported (only 0 and 1)"
        )));
    }
    let ranked0 = rank_components(prep, granularity)?;
    let h0 = greedy_select(prep, ranked0, delta, seed, granularity, 0)?;
    let mut reports = vec![h0];
    if k == 1 {
        let h0_kinds = reports[0].selected_kinds();
        if h0_kinds.is_empty() {
            return Err(CircuitError::Unsupported(
                "hierarchy 1 needs a non-empty hierarchy-0 node set".into(),
            ));
        }
        let sources = hierarchy1_sources(prep.weights, granularity, &h0_kinds);
        let mut scores = Vec::with_capacity(sources.len());
        for s in sources {
            let score = h1_combined_score(prep, &[s], &h0_kinds)?;
            scores.push(ComponentScore { component: s, score });
        }
        scores.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores are finite")
                .then_with(|| a.component.cmp(&b.component))
        });
        let kinds: Vec<ComponentKind> = scores.iter().map(|s| s.component).collect();
        let mut prefix_scores = Vec::with_capacity(kinds.len());
        for k in 1..=kinds.len() {
            prefix_scores.push(h1_combined_score(prep, &kinds[..k], &h0_kinds)?);
        }
        let chosen = prefix_scores.iter().position(|&s| s >= delta);
        let (selected_len, combined_score, delta_unmet) = match chosen {
            Some(i) => (i + 1, prefix_scores[i], false),
            None => (kinds.len(), *prefix_scores.last().expect("sources non-empty"), true),
        };
        reports.push(CircuitReport {
            hierarchy: 1,
            granularity,
            delta,
            combined_score,
            delta_unmet,
            selected: scores[..selected_len].to_vec(),
            ranked: scores,
            dataset_sha256: prep.fingerprint.clone(),
            seed,
            prefix_scores,
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Patches a random component set of the given size (drawn at the requested
/// granularity, excluding `exclude`) and reports the mean patched answer
/// probability — high means the random set is causally irrelevant.
pub fn random_circuit_baseline(
    prep: &Prepared<'_>,
    granularity: Granularity,
    size: usize,
    seed: u64,
    exclude: &[ComponentKind],
) -> Result<(Vec<ComponentKind>, f64), CircuitError> {
    let mut pool: Vec<ComponentKind> = components_at(prep.weights, granularity)
        .into_iter()
        .filter(|k| !exclude.contains(k))
        .collect();
    if size > pool.len() {
        return Err(CircuitError::Unsupported(format!(
            "random circuit of size {size} exceeds {} available components",
            pool.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut chosen: Vec<ComponentKind> = pool.into_iter().take(size).collect();
    chosen.sort();
    let p = prep.mean_patched_probability(&chosen)?;
    Ok((chosen, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub acc_before: f64,
    pub acc_after: f64,
    /// Set when the evaluation dataset fingerprint equals the extraction
    /// fingerprint recorded in the report — the held-out precondition is
    /// violated. Reported, never fatal.
    pub overlap_warning: bool,
}

/// Greedy-answer accuracy before and after zeroing the selected components'
/// direct contributions (indirect paths preserved via restore semantics).
pub fn ablate_circuit_accuracy(
    weights: &ModelWeights,
    eval_dataset: &[ProbeExample],
    report: &CircuitReport,
    mode: Mode,
) -> Result<AblationOutcome, CircuitError> {
    let kinds = report.selected_kinds();
    let zero = vec![0.0; weights.config.d_model];
    let replacements: Vec<(ComponentKind, Vec<f64>)> =
        kinds.iter().map(|&k| (k, zero.clone())).collect();
    let outcomes: Result<Vec<(bool, bool)>, CircuitError> = eval_dataset
        .par_iter()
        .map(|ex| {
            let seq = ex.seq(mode);
            let target = ex.target(mode);
            let clean = run(weights, &seq.tokens, &CaptureSpec::full(), &RunOptions::default())?;
            let before = clean.next_token == target;
            let p = crate::instrument::replaced_direct_distribution(
                weights,
                &seq.tokens,
                &clean,
                &replacements,
            )?;
            let after = p.argmax() as u32 == target;
            Ok((before, after))
        })
        .collect();
    let outcomes = outcomes?;
    let n = outcomes.len() as f64;
    Ok(AblationOutcome {
        acc_before: outcomes.iter().filter(|o| o.0).count() as f64 / n,
        acc_after: outcomes.iter().filter(|o| o.1).count() as f64 / n,
        overlap_warning: dataset_sha256(eval_dataset) == report.dataset_sha256,
    })
}

/// Jaccard overlap of two selections (kind identity only; positions play no
/// role). Requires matching granularity.
pub fn circuit_overlap(a: &CircuitReport, b: &CircuitReport) -> Result<f64, CircuitError> {
    if a.granularity != b.granularity {
        return Err(CircuitError::Incomparable(format!(
            "granularity {} vs {}",
            a.granularity, b.granularity
        )));
    }
    let sa: std::collections::BTreeSet<ComponentKind> =
        a.selected_kinds().into_iter().collect();
    let sb: std::collections::BTreeSet<ComponentKind> =
        b.selected_kinds().into_iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
