//! Python bindings for the analysis pipeline. The surface mirrors the CLI:
//! build or load the synthetic model, generate probe datasets, then run
//! extraction, profiling, attribution, steering, and evaluation against it.
//! Structured results cross the boundary as JSON strings — every report
//! type already serializes deterministically, and keeping the boundary
//! stringly avoids mirroring a dozen nested pyclasses.
//!
//! The heavy lifting lives in [`bridge`] as plain Rust so it stays testable
//! without an interpreter; the `#[pyfunction]` layer only translates errors.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use qacirc::model::fixture::FixtureInfo;
use qacirc::model::ModelWeights;
use qacirc::probe::ProbeExample;

/// Plain-Rust implementations of everything the module exposes.
pub mod bridge {
    use qacirc::attribute::{
        attn_attrib, head_entropy_profile, select_attribution_head, AttributionConfig, SpanMode,
    };
    use qacirc::circuit::{extract_hierarchy, Granularity, Prepared};
    use qacirc::evalmetrics::{evaluate, EvalConfig};
    use qacirc::instrument::ComponentKind;
    use qacirc::model::engine::{run, RunOptions};
    use qacirc::model::fixture::{build_fixture, FixtureConfig, FixtureInfo};
    use qacirc::model::{CaptureSpec, ModelWeights};
    use qacirc::numerics::softmax;
    use qacirc::probe::{gen_probe, Mode, ProbeConfig, ProbeExample};
    use qacirc::steer::{switch_experiment, SteerSpec};

    fn err(e: impl std::fmt::Display) -> String {
        e.to_string()
    }

    pub fn parse_mode(s: &str) -> Result<Mode, String> {
        match s {
            "copy" => Ok(Mode::Copy),
            "memory" => Ok(Mode::Memory),
            other => Err(format!("unknown mode '{other}' (expected copy or memory)")),
        }
    }

    pub fn fixture() -> Result<(ModelWeights, FixtureInfo), String> {
        build_fixture(&FixtureConfig::default()).map_err(err)
    }

    pub fn next_distribution(w: &ModelWeights, tokens: &[u32]) -> Result<Vec<f64>, String> {
        let trace =
            run(w, tokens, &CaptureSpec::none(), &RunOptions::default()).map_err(err)?;
        Ok(softmax(&trace.logits).map_err(err)?.as_slice().to_vec())
    }

    pub fn generate(
        w: &ModelWeights,
        info: &FixtureInfo,
        n: usize,
        seed: u64,
        plant_duplicate: bool,
    ) -> Result<Vec<ProbeExample>, String> {
        let pcfg = ProbeConfig { n, plant_duplicate, ..ProbeConfig::default() };
        Ok(gen_probe(w, info, &pcfg, seed).map_err(err)?.examples)
    }

    pub fn extract_json(
        w: &ModelWeights,
        probe: &[ProbeExample],
        mode: &str,
        granularity: &str,
        delta: f64,
        hierarchy: usize,
        seed: u64,
    ) -> Result<String, String> {
        let mode = parse_mode(mode)?;
        let granularity: Granularity = granularity.parse().map_err(err)?;
        let prep = Prepared::new(w, probe, mode).map_err(err)?;
        let reports = extract_hierarchy(&prep, hierarchy, delta, granularity, seed).map_err(err)?;
        serde_json::to_string_pretty(&reports).map_err(err)
    }

    pub fn profile_heads_json(
        w: &ModelWeights,
        probe: &[ProbeExample],
        mode: &str,
    ) -> Result<String, String> {
        let profiles = head_entropy_profile(w, probe, parse_mode(mode)?).map_err(err)?;
        serde_json::to_string_pretty(&profiles).map_err(err)
    }

    /// Attribution for one probe example; `head = None` means the
    /// entropy-profile winner over the whole set.
    pub fn attribute_json(
        w: &ModelWeights,
        probe: &[ProbeExample],
        index: usize,
        head: Option<(usize, usize)>,
        slength: usize,
    ) -> Result<String, String> {
        let ex = probe.get(index).ok_or_else(|| {
            format!("example index {index} out of range (dataset has {})", probe.len())
        })?;
        let head = match head {
            Some((layer, head)) => ComponentKind::AttnHead { layer, head },
            None => {
                let profiles = head_entropy_profile(w, probe, Mode::Copy).map_err(err)?;
                select_attribution_head(&profiles).map_err(err)?
            }
        };
        let cfg = AttributionConfig {
            head,
            answer_length: 1,
            top_k: 1,
            span_mode: SpanMode::Window { slength },
            terminator: None,
        };
        let outcome = attn_attrib(w, &ex.seq(Mode::Copy), &cfg).map_err(err)?;
        serde_json::to_string_pretty(&outcome).map_err(err)
    }

    pub fn steer_json(
        w: &ModelWeights,
        probe: &[ProbeExample],
        kind: &str,
        beta: Option<f64>,
        layers: Vec<usize>,
    ) -> Result<String, String> {
        let spec = match kind {
            "attn-upweight" => SteerSpec::AttnUpweight {
                beta: beta.ok_or("attn-upweight needs beta")?,
                layers,
            },
            "mlp-zero" => SteerSpec::MlpZero { layers },
            "mlp-mean" => SteerSpec::MlpMean { layers },
            other => Err(format!("unknown steering kind '{other}'"))?,
        };
        let report = switch_experiment(w, probe, &spec, Mode::Memory).map_err(err)?;
        serde_json::to_string_pretty(&report).map_err(err)
    }

    pub fn evaluate_json(
        w: &ModelWeights,
        info: &FixtureInfo,
        probe: &[ProbeExample],
        slength: usize,
        strict: bool,
    ) -> Result<String, String> {
        let cfg = EvalConfig { slength, strict, pad: info.pad };
        let report = evaluate(w, probe, &cfg).map_err(err)?;
        serde_json::to_string_pretty(&report).map_err(err)
    }
}

fn value_err<T>(r: Result<T, String>) -> PyResult<T> {
    r.map_err(PyValueError::new_err)
}

/// The synthetic QA transformer plus its token map.
#[pyclass]
struct Model {
    weights: ModelWeights,
    info: FixtureInfo,
}

#[pymethods]
impl Model {
    /// Builds the deterministic fixture.
    #[staticmethod]
    fn fixture() -> PyResult<Self> {
        let (weights, info) = value_err(bridge::fixture())?;
        Ok(Model { weights, info })
    }

    /// Loads weights written by `qacirc build-fixture` (the
    /// `<stem>.fixture.json` sidecar must sit beside the model file).
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let weights = qacirc::model::io::load_model(std::path::Path::new(path))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let sidecar = std::path::Path::new(path).with_extension("fixture.json");
        let raw = std::fs::read(&sidecar).map_err(|e| {
            PyValueError::new_err(format!("cannot read {}: {e}", sidecar.display()))
        })?;
        let info: FixtureInfo = serde_json::from_slice(&raw)
            .map_err(|e| PyValueError::new_err(format!("bad sidecar: {e}")))?;
        Ok(Model { weights, info })
    }

    /// Token map and planted-structure description as JSON.
    fn info_json(&self) -> PyResult<String> {
        value_err(serde_json::to_string_pretty(&self.info).map_err(|e| e.to_string()))
    }

    /// Next-token distribution over the vocabulary.
    fn next_distribution(&self, tokens: Vec<u32>) -> PyResult<Vec<f64>> {
        value_err(bridge::next_distribution(&self.weights, &tokens))
    }

    /// Greedy next token.
    fn next_token(&self, tokens: Vec<u32>) -> PyResult<u32> {
        let p = value_err(bridge::next_distribution(&self.weights, &tokens))?;
        Ok(qacirc::numerics::argmax(&p) as u32)
    }
}

/// A generated probe dataset of paired copy/memory examples.
#[pyclass]
struct ProbeSet {
    examples: Vec<ProbeExample>,
}

#[pymethods]
impl ProbeSet {
    #[staticmethod]
    #[pyo3(signature = (model, n, seed, plant_duplicate = false))]
    fn generate(model: &Model, n: usize, seed: u64, plant_duplicate: bool) -> PyResult<Self> {
        let examples =
            value_err(bridge::generate(&model.weights, &model.info, n, seed, plant_duplicate))?;
        Ok(ProbeSet { examples })
    }

    fn __len__(&self) -> usize {
        self.examples.len()
    }

    /// One example as JSON.
    fn example_json(&self, index: usize) -> PyResult<String> {
        let ex = self.examples.get(index).ok_or_else(|| {
            PyValueError::new_err(format!(
                "index {index} out of range (dataset has {})",
                self.examples.len()
            ))
        })?;
        serde_json::to_string_pretty(ex).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// The whole dataset in the on-disk JSONL encoding.
    fn to_jsonl(&self) -> String {
        String::from_utf8(qacirc::probe::to_jsonl(&self.examples)).expect("jsonl is utf-8")
    }
}

/// Ranks components by direct effect and selects circuits; returns the
/// hierarchy reports as JSON.
#[pyfunction]
#[pyo3(signature = (model, probe, mode = "copy", granularity = "head", delta = 0.95, hierarchy = 0, seed = 7))]
fn extract_circuit(
    model: &Model,
    probe: &ProbeSet,
    mode: &str,
    granularity: &str,
    delta: f64,
    hierarchy: usize,
    seed: u64,
) -> PyResult<String> {
    value_err(bridge::extract_json(
        &model.weights,
        &probe.examples,
        mode,
        granularity,
        delta,
        hierarchy,
        seed,
    ))
}

/// Per-head context-attention entropy and slot accuracy, as JSON.
#[pyfunction]
#[pyo3(signature = (model, probe, mode = "copy"))]
fn profile_heads(model: &Model, probe: &ProbeSet, mode: &str) -> PyResult<String> {
    value_err(bridge::profile_heads_json(&model.weights, &probe.examples, mode))
}

/// Single-head span attribution for one example, as JSON.
#[pyfunction]
#[pyo3(signature = (model, probe, index, head = None, slength = 3))]
fn attribute_example(
    model: &Model,
    probe: &ProbeSet,
    index: usize,
    head: Option<(usize, usize)>,
    slength: usize,
) -> PyResult<String> {
    value_err(bridge::attribute_json(&model.weights, &probe.examples, index, head, slength))
}

/// Steers the model over memory-mode prompts and reports the switch rate,
/// as JSON.
#[pyfunction]
#[pyo3(signature = (model, probe, kind, layers, beta = None))]
fn steer(
    model: &Model,
    probe: &ProbeSet,
    kind: &str,
    layers: Vec<usize>,
    beta: Option<f64>,
) -> PyResult<String> {
    value_err(bridge::steer_json(&model.weights, &probe.examples, kind, beta, layers))
}

/// The full attribution-quality harness, as JSON.
#[pyfunction]
#[pyo3(signature = (model, probe, slength = 3, strict = false))]
fn evaluate(model: &Model, probe: &ProbeSet, slength: usize, strict: bool) -> PyResult<String> {
    value_err(bridge::evaluate_json(&model.weights, &model.info, &probe.examples, slength, strict))
}

#[pymodule]
fn qacirc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<ProbeSet>()?;
    m.add_function(wrap_pyfunction!(extract_circuit, m)?)?;
    m.add_function(wrap_pyfunction!(profile_heads, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_example, m)?)?;
    m.add_function(wrap_pyfunction!(steer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::bridge;
    use qacirc::circuit::CircuitReport;
    use qacirc::instrument::ComponentKind;

    #[test]
    fn bridge_extraction_finds_the_copy_head() {
        let (w, info) = bridge::fixture().unwrap();
        let probe = bridge::generate(&w, &info, 40, 7, false).unwrap();
        let json = bridge::extract_json(&w, &probe, "copy", "head", 0.95, 0, 7).unwrap();
        let reports: Vec<CircuitReport> = serde_json::from_str(&json).unwrap();
        let (l, h) = info.copy_head;
        assert_eq!(
            reports[0].ranked[0].component,
            ComponentKind::AttnHead { layer: l, head: h }
        );
    }

    #[test]
    fn bridge_steering_switches_answers() {
        let (w, info) = bridge::fixture().unwrap();
        let probe = bridge::generate(&w, &info, 40, 7, false).unwrap();
        let json =
            bridge::steer_json(&w, &probe, "attn-upweight", Some(10.0), vec![1]).unwrap();
        let report: qacirc::steer::SwitchReport = serde_json::from_str(&json).unwrap();
        assert!(report.switch_rate >= 0.9, "switch rate {}", report.switch_rate);
        assert!(bridge::steer_json(&w, &probe, "attn-upweight", None, vec![1]).is_err());
    }

    #[test]
    fn bridge_rejects_unknown_names() {
        assert!(bridge::parse_mode("neither").is_err());
        let (w, info) = bridge::fixture().unwrap();
        let probe = bridge::generate(&w, &info, 10, 7, false).unwrap();
        assert!(bridge::extract_json(&w, &probe, "copy", "bogus", 0.95, 0, 7).is_err());
        assert!(bridge::attribute_json(&w, &probe, 99, None, 3).is_err());
    }
}
