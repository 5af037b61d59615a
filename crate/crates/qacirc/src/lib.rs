//! Mechanistic analysis of a synthetic question-answering transformer.
//!
//! The crate builds a small decoder-only model whose copy and recall
//! behaviour is implanted by construction, then provides the instruments to
//! rediscover that structure from the outside: probe-dataset generation,
//! component ranking and circuit extraction by direct-effect activation
//! patching, single-head data attribution, steering interventions that
//! switch which circuit answers, and an evaluation harness tying it all
//! together. Everything is deterministic: one global seed fans out to the
//! pipeline stages, parallel reductions are ordered, and artifacts rerun
//! byte-identically.
//!
//! Module map, bottom up:
//!
//! * [`numerics`] — matrices, softmax, entropy, validated distributions;
//! * [`model`] — config, weights, the forward engine, the synthetic
//!   fixture, and the on-disk weight format;
//! * [`instrument`] — component addressing, activation capture, and the
//!   three-step direct-effect patch;
//! * [`probe`] — paired copy/memory QA examples with corrupted donors;
//! * [`circuit`] — scoring, ranking, greedy selection, hierarchy, and
//!   validation of circuits;
//! * [`attribute`] — head profiling, span extraction, greedy single-head
//!   attribution, and the gradient baseline;
//! * [`steer`] — attention upweighting, MLP zero/mean ablation, and the
//!   circuit-switch experiment;
//! * [`evalmetrics`] — exact match, token F1, Rel-Score, span ablation,
//!   and the attribution comparison harness;
//! * [`cli`] — the end-to-end pipeline binary.

pub mod attribute;
pub mod circuit;
pub mod cli;
pub mod evalmetrics;
pub mod instrument;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod steer;

pub use attribute::{attn_attrib, head_entropy_profile, AttributionConfig, SpanMode};
pub use circuit::{extract_hierarchy, rank_components, CircuitReport, Granularity, Prepared};
pub use instrument::{ComponentKind, ComponentRef, PatchPlan, Position};
pub use model::fixture::{build_fixture, FixtureConfig, FixtureInfo};
pub use model::{ModelConfig, ModelWeights, TokenSeq};
pub use probe::{gen_probe, Mode, ProbeConfig, ProbeExample};
pub use steer::{switch_experiment, SteerSpec, SteeredModel};
