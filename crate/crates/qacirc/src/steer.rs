//! Steering: targeted interventions that redirect which circuit answers.
//!
//! Three families:
//!
//! * `attn_upweight` — multiply the maximum pre-softmax context score of
//!   every head in the target layers by beta at the answering position.
//!   Saturating a span-reading head's peak makes its in-context candidate
//!   win over the memorized answer: the circuit switch. beta = 1 is the
//!   identity by construction. When a head's in-window peak is negative,
//!   upweighting *suppresses* it instead; those cases are counted and
//!   surfaced as a diagnostic rather than silently skewing the experiment.
//! * `mlp_zero` — replace target MLPs' direct contribution at the answering
//!   position with zeros, everything else restored, so only their direct
//!   route to the logits is severed.
//! * `mlp_mean` — same replacement, but with the MLP's mean contribution
//!   over a reference dataset, which keeps the output distribution in its
//!   typical regime instead of an all-zero hole.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instrument::{
    capture, replaced_direct_distribution, ComponentKind, ComponentRef, InstrumentError,
};
use crate::model::engine::{run, RunOptions, Upweight};
use crate::model::{CaptureSpec, ModelError, ModelWeights, TokenSeq};
use crate::numerics::{softmax, NumericsError, ProbDist};
use crate::probe::{Mode, ProbeExample};

#[derive(Debug, Error)]
pub enum SteerError {
    #[error("invalid steer spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// What to steer. Layer lists are deduplicated; an empty list is a valid
/// no-op spec (bit-for-bit baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SteerSpec {
    AttnUpweight { beta: f64, layers: Vec<usize> },
    MlpZero { layers: Vec<usize> },
    MlpMean { layers: Vec<usize> },
}

impl SteerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SteerSpec::AttnUpweight { .. } => "attn_upweight",
            SteerSpec::MlpZero { .. } => "mlp_zero",
            SteerSpec::MlpMean { .. } => "mlp_mean",
        }
    }

    pub fn layers(&self) -> &[usize] {
        match self {
            SteerSpec::AttnUpweight { layers, .. }
            | SteerSpec::MlpZero { layers }
            | SteerSpec::MlpMean { layers } => layers,
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match self {
            SteerSpec::AttnUpweight { beta, .. } => Some(*beta),
            _ => None,
        }
    }
}

/// Anything that maps a prompt to a next-token distribution: the plain
/// model, or a steered view of it. Lets evaluation code measure accuracy
/// without caring which one it was handed.
pub trait Forwarder: Sync {
    fn next_distribution(&self, seq: &TokenSeq) -> Result<ProbDist, SteerError>;

    fn next_token(&self, seq: &TokenSeq) -> Result<u32, SteerError> {
        Ok(self.next_distribution(seq)?.argmax() as u32)
    }
}

impl Forwarder for ModelWeights {
    fn next_distribution(&self, seq: &TokenSeq) -> Result<ProbDist, SteerError> {
        let trace = run(self, &seq.tokens, &CaptureSpec::none(), &RunOptions::default())?;
        Ok(softmax(&trace.logits)?)
    }
}

/// A validated steering intervention over a borrowed model. The underlying
/// weights are never modified; every application happens at run time.
pub struct SteeredModel<'w> {
    weights: &'w ModelWeights,
    spec: SteerSpec,
    layers: Vec<usize>,
    /// Replacement row per target MLP layer (zeros or dataset means).
    mlp_rows: BTreeMap<usize, Vec<f64>>,
}

impl<'w> SteeredModel<'w> {
    /// Validates the spec against the model. `mlp_mean` requires a
    /// non-empty reference dataset to average over (clean runs in the given
    /// mode).
    pub fn new(
        weights: &'w ModelWeights,
        spec: SteerSpec,
        mean_source: Option<(&[ProbeExample], Mode)>,
    ) -> Result<Self, SteerError> {
        let cfg = &weights.config;
        let mut layers: Vec<usize> = spec.layers().to_vec();
        layers.sort_unstable();
        layers.dedup();
        if let Some(l) = layers.iter().find(|&&l| l >= cfg.n_layers) {
            return Err(SteerError::InvalidSpec(format!(
                "layer {l} out of range for a {}-layer model",
                cfg.n_layers
            )));
        }
        if let SteerSpec::AttnUpweight { beta, .. } = spec {
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(SteerError::InvalidSpec(format!(
                    "beta must be finite and positive, got {beta}"
                )));
            }
        }
        let mut mlp_rows = BTreeMap::new();
        match spec {
            SteerSpec::MlpZero { .. } => {
                for &l in &layers {
                    mlp_rows.insert(l, vec![0.0; cfg.d_model]);
                }
            }
            SteerSpec::MlpMean { .. } => {
                let (dataset, mode) = mean_source.ok_or_else(|| {
                    SteerError::InvalidSpec(
                        "mlp_mean needs a reference dataset to average over".into(),
                    )
                })?;
                if dataset.is_empty() {
                    return Err(SteerError::InvalidSpec(
                        "mlp_mean reference dataset is empty".into(),
                    ));
                }
                let spec_cap = CaptureSpec { mlps: true, ..CaptureSpec::none() };
                let mut sums: BTreeMap<usize, Vec<f64>> =
                    layers.iter().map(|&l| (l, vec![0.0; cfg.d_model])).collect();
                for ex in dataset {
                    let seq = ex.seq(mode);
                    let trace = run(weights, &seq.tokens, &spec_cap, &RunOptions::default())?;
                    for &l in &layers {
                        let row = capture(
                            &trace,
                            &ComponentRef::at_last(ComponentKind::Mlp { layer: l }),
                        )?;
                        for (s, v) in sums.get_mut(&l).unwrap().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                let n = dataset.len() as f64;
                for (_, row) in sums.iter_mut() {
                    for v in row.iter_mut() {
                        *v /= n;
                    }
                }
                mlp_rows = sums;
            }
            SteerSpec::AttnUpweight { .. } => {}
        }
        Ok(SteeredModel { weights, spec, layers, mlp_rows })
    }

    pub fn spec(&self) -> &SteerSpec {
        &self.spec
    }

    /// Distribution plus the run's negative-peak count (attention modes
    /// only; replacement modes report zero).
    pub fn next_distribution_diagnosed(
        &self,
        seq: &TokenSeq,
    ) -> Result<(ProbDist, usize), SteerError> {
        if self.layers.is_empty() {
            return Ok((self.weights.next_distribution(seq)?, 0));
        }
        match self.spec {
            SteerSpec::AttnUpweight { beta, .. } => {
                let options = RunOptions {
                    upweight: Some(Upweight {
                        layers: self.layers.clone(),
                        beta,
                        window: seq.context,
                    }),
                    ..Default::default()
                };
                let trace = run(self.weights, &seq.tokens, &CaptureSpec::none(), &options)?;
                Ok((softmax(&trace.logits)?, trace.negative_peaks))
            }
            SteerSpec::MlpZero { .. } | SteerSpec::MlpMean { .. } => {
                let clean = run(
                    self.weights,
                    &seq.tokens,
                    &CaptureSpec::full(),
                    &RunOptions::default(),
                )?;
                let replacements: Vec<(ComponentKind, Vec<f64>)> = self
                    .mlp_rows
                    .iter()
                    .map(|(&l, row)| (ComponentKind::Mlp { layer: l }, row.clone()))
                    .collect();
                let p = replaced_direct_distribution(
                    self.weights,
                    &seq.tokens,
                    &clean,
                    &replacements,
                )?;
                Ok((p, 0))
            }
        }
    }
}

impl Forwarder for SteeredModel<'_> {
    fn next_distribution(&self, seq: &TokenSeq) -> Result<ProbDist, SteerError> {
        Ok(self.next_distribution_diagnosed(seq)?.0)
    }
}

// ---------------------------------------------------------------------------
// Circuit-switch experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchOutcome {
    pub id: u64,
    pub prediction: u32,
    pub fallback: u32,
    pub memorized: u32,
    pub switched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub mode: String,
    pub beta: Option<f64>,
    pub targets: Vec<usize>,
    pub switch_rate: f64,
    pub n: usize,
    /// Heads whose upweighted peak was negative, summed over the run —
    /// nonzero means the intervention partly suppressed instead.
    pub negative_peaks: usize,
    pub per_example: Vec<SwitchOutcome>,
}

/// Runs the steered model over memory-mode prompts and measures how often
/// the prediction flips from the memorized answer to the planted in-context
/// fallback.
pub fn switch_experiment(
    weights: &ModelWeights,
    dataset: &[ProbeExample],
    spec: &SteerSpec,
    mode: Mode,
) -> Result<SwitchReport, SteerError> {
    if mode != Mode::Memory {
        return Err(SteerError::InvalidDataset(
            "the switch experiment needs memory-mode prompts (the fallback answer only \
             exists there)"
                .into(),
        ));
    }
    if dataset.is_empty() {
        return Err(SteerError::InvalidDataset("empty dataset".into()));
    }
    // mlp_mean averages over the experiment's own prompts.
    let steered = SteeredModel::new(weights, spec.clone(), Some((dataset, Mode::Memory)))?;
    let rows: Result<Vec<(SwitchOutcome, usize)>, SteerError> = dataset
        .par_iter()
        .map(|ex| {
            let (p, negs) = steered.next_distribution_diagnosed(&ex.seq(Mode::Memory))?;
            let prediction = p.argmax() as u32;
            Ok((
                SwitchOutcome {
                    id: ex.id,
                    prediction,
                    fallback: ex.fallback_token(),
                    memorized: ex.answer,
                    switched: prediction == ex.fallback_token(),
                },
                negs,
            ))
        })
        .collect();
    let rows = rows?;
    let n = rows.len();
    let switched = rows.iter().filter(|(o, _)| o.switched).count();
    Ok(SwitchReport {
        mode: spec.kind_name().to_string(),
        beta: spec.beta(),
        targets: {
            let mut l = spec.layers().to_vec();
            l.sort_unstable();
            l.dedup();
            l
        },
        switch_rate: switched as f64 / n as f64,
        n,
        negative_peaks: rows.iter().map(|(_, g)| g).sum(),
        per_example: rows.into_iter().map(|(o, _)| o).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{build_fixture, FixtureConfig, FixtureInfo};
    use crate::probe::{gen_probe, ProbeConfig};

    fn setup(n: usize) -> (ModelWeights, FixtureInfo, Vec<ProbeExample>) {
        let (w, info) = build_fixture(&FixtureConfig::default()).unwrap();
        let pcfg = ProbeConfig { n, ..Default::default() };
        let exs = gen_probe(&w, &info, &pcfg, 37).unwrap().examples;
        (w, info, exs)
    }

    #[test]
    fn empty_targets_and_unit_beta_are_identity() {
        let (w, info, exs) = setup(6);
        let seq = exs[0].seq(Mode::Memory);
        let base = w.next_distribution(&seq).unwrap();

        let noop = SteeredModel::new(
            &w,
            SteerSpec::AttnUpweight { beta: 7.0, layers: vec![] },
            None,
        )
        .unwrap();
        assert_eq!(noop.next_distribution(&seq).unwrap().as_slice(), base.as_slice());

        let unit = SteeredModel::new(
            &w,
            SteerSpec::AttnUpweight { beta: 1.0, layers: vec![info.span_head.0] },
            None,
        )
        .unwrap();
        for (a, b) in unit.next_distribution(&seq).unwrap().as_slice().iter().zip(base.as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let (w, _, _) = setup(2);
        for beta in [0.0, -3.0, f64::NAN] {
            assert!(matches!(
                SteeredModel::new(&w, SteerSpec::AttnUpweight { beta, layers: vec![0] }, None),
                Err(SteerError::InvalidSpec(_))
            ));
        }
        assert!(matches!(
            SteeredModel::new(&w, SteerSpec::MlpZero { layers: vec![9] }, None),
            Err(SteerError::InvalidSpec(_))
        ));
        assert!(matches!(
            SteeredModel::new(&w, SteerSpec::MlpMean { layers: vec![0] }, None),
            Err(SteerError::InvalidSpec(_))
        ));
        assert!(matches!(
            SteeredModel::new(&w, SteerSpec::MlpMean { layers: vec![0] }, Some((&[], Mode::Copy))),
            Err(SteerError::InvalidSpec(_))
        ));
    }

    #[test]
    fn strong_upweight_switches_memory_answers_to_the_fallback() {
        let (w, info, exs) = setup(20);
        let layers = vec![info.span_head.0];
        let weak = switch_experiment(
            &w,
            &exs,
            &SteerSpec::AttnUpweight { beta: 1.0, layers: layers.clone() },
            Mode::Memory,
        )
        .unwrap();
        assert_eq!(weak.switch_rate, 0.0);
        // Unsteered, the memorized answer wins every time.
        assert!(weak.per_example.iter().all(|o| o.prediction == o.memorized));

        let strong = switch_experiment(
            &w,
            &exs,
            &SteerSpec::AttnUpweight { beta: 5.0, layers },
            Mode::Memory,
        )
        .unwrap();
        assert_eq!(strong.switch_rate, 1.0);
        assert_eq!(strong.n, 20);
        assert_eq!(strong.mode, "attn_upweight");
        assert_eq!(strong.beta, Some(5.0));
    }

    #[test]
    fn switch_experiment_requires_memory_mode() {
        let (w, info, exs) = setup(4);
        assert!(matches!(
            switch_experiment(
                &w,
                &exs,
                &SteerSpec::AttnUpweight { beta: 5.0, layers: vec![info.span_head.0] },
                Mode::Copy,
            ),
            Err(SteerError::InvalidDataset(_))
        ));
    }

    #[test]
    fn zeroing_the_memory_mlp_erases_recall() {
        let (w, info, exs) = setup(12);
        let steered =
            SteeredModel::new(&w, SteerSpec::MlpZero { layers: vec![info.memory_mlp] }, None)
                .unwrap();
        let mut p_mem = 0.0;
        for ex in &exs {
            let seq = ex.seq(Mode::Memory);
            p_mem += steered.next_distribution(&seq).unwrap().get(ex.answer as usize);
        }
        p_mem /= exs.len() as f64;
        assert!(p_mem < 0.05, "memorized answer still at {p_mem}");

        // Copy behaviour survives: the route through attention is untouched.
        let mut copy_hits = 0;
        for ex in &exs {
            if steered.next_token(&ex.seq(Mode::Copy)).unwrap() == ex.swap_token() {
                copy_hits += 1;
            }
        }
        assert_eq!(copy_hits, exs.len());
    }

    #[test]
    fn mean_replacement_uses_the_dataset_average() {
        let (w, info, exs) = setup(10);
        let steered = SteeredModel::new(
            &w,
            SteerSpec::MlpMean { layers: vec![info.memory_mlp] },
            Some((&exs, Mode::Memory)),
        )
        .unwrap();
        // Recompute the expected mean row independently.
        let mut expected = vec![0.0; w.config.d_model];
        for ex in &exs {
            let seq = ex.seq(Mode::Memory);
            let trace = run(&w, &seq.tokens, &CaptureSpec::full(), &RunOptions::default()).unwrap();
            let row = capture(
                &trace,
                &ComponentRef::at_last(ComponentKind::Mlp { layer: info.memory_mlp }),
            )
            .unwrap();
            for (e, v) in expected.iter_mut().zip(row) {
                *e += v;
            }
        }
        for e in expected.iter_mut() {
            *e /= exs.len() as f64;
        }
        let got = &steered.mlp_rows[&info.memory_mlp];
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // Mean substitution blurs recall across subjects: the specific
        // memorized answer no longer dominates.
        let mut hits = 0;
        for ex in &exs {
            if steered.next_token(&ex.seq(Mode::Memory)).unwrap() == ex.answer {
                hits += 1;
            }
        }
        assert!(hits < exs.len(), "mean substitution changed nothing");
    }

    #[test]
    fn negative_upweight_peaks_are_counted() {
        let (mut w, _, exs) = setup(4);
        // Rewire an inert head (zero value/output weights, so behaviour is
        // untouched) to score every token pair negatively: its in-window
        // peak is negative, so upweighting suppresses rather than
        // amplifies, which the diagnostic must report.
        let head = &mut w.layers[0].heads[0];
        for dim in 0..58 {
            head.w_q.set(0, dim, 1.0);
            head.w_k.set(0, dim, -1.0);
        }
        let steered = SteeredModel::new(
            &w,
            SteerSpec::AttnUpweight { beta: 2.0, layers: vec![0] },
            None,
        )
        .unwrap();
        let (_, negs) = steered.next_distribution_diagnosed(&exs[0].seq(Mode::Memory)).unwrap();
        assert_eq!(negs, 1, "exactly the rewired head has a negative peak");
        let report = switch_experiment(
            &w,
            &exs,
            &SteerSpec::AttnUpweight { beta: 2.0, layers: vec![0] },
            Mode::Memory,
        )
        .unwrap();
        assert_eq!(report.negative_peaks, exs.len());
    }
}
