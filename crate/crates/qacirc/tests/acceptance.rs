//! Acceptance gate for the whole pipeline: twelve end-to-end checks, one
//! verdict line each (run with `--nocapture` to see them). Every check uses
//! only the public API plus, for the last one, the compiled binary. Heavy
//! shared state — the fixture, the probe sets, the extracted circuits — is
//! built once behind `OnceLock` so the suite stays fast.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use qacirc::attribute::{
    attn_attrib, head_entropy_profile, select_attribution_head, AttributionConfig, SpanMode,
};
use qacirc::circuit::{
    ablate_circuit_accuracy, circuit_overlap, greedy_select, random_circuit_baseline,
    rank_components, CircuitReport, ComponentScore, Granularity, Prepared,
};
use qacirc::evalmetrics::{ablate_spans_from_context, evaluate, rel_score, EvalConfig};
use qacirc::instrument::{
    all_components, capture, patched_distribution_cached, ComponentKind, ComponentRef, PatchPlan,
};
use qacirc::model::engine::{nll_grad, run, RunOptions};
use qacirc::model::fixture::{build_fixture, FixtureConfig, FixtureInfo};
use qacirc::model::{forward_pass_count, CaptureSpec, ModelWeights, RunTrace};
use qacirc::numerics::{softmax, Matrix};
use qacirc::probe::{gen_probe, Mode, ProbeConfig, ProbeExample};
use qacirc::steer::{switch_experiment, Forwarder, SteerSpec, SteeredModel};

const PROBE_SEED: u64 = 11;
const EXTRACT_SEED: u64 = 402;
const DELTA: f64 = 0.95;

// ---------------------------------------------------------------------------
// Shared state
// ---------------------------------------------------------------------------

fn fixture() -> &'static (ModelWeights, FixtureInfo) {
    static F: OnceLock<(ModelWeights, FixtureInfo)> = OnceLock::new();
    F.get_or_init(|| build_fixture(&FixtureConfig::default()).expect("fixture builds"))
}

fn weights() -> &'static ModelWeights {
    &fixture().0
}

fn info() -> &'static FixtureInfo {
    &fixture().1
}

/// 400 paired examples under one seed: the first 200 drive extraction and
/// profiling, the last 200 stay held out for the ablation check.
fn probe() -> &'static Vec<ProbeExample> {
    static P: OnceLock<Vec<ProbeExample>> = OnceLock::new();
    P.get_or_init(|| {
        gen_probe(
            weights(),
            info(),
            &ProbeConfig { n: 400, ..ProbeConfig::default() },
            PROBE_SEED,
        )
        .expect("probe generation")
        .examples
    })
}

fn extraction_set() -> &'static [ProbeExample] {
    &probe()[..200]
}

fn heldout_set() -> &'static [ProbeExample] {
    &probe()[200..]
}

fn prep_copy() -> &'static Prepared<'static> {
    static P: OnceLock<Prepared<'static>> = OnceLock::new();
    P.get_or_init(|| Prepared::new(weights(), extraction_set(), Mode::Copy).expect("prepare copy"))
}

fn prep_memory() -> &'static Prepared<'static> {
    static P: OnceLock<Prepared<'static>> = OnceLock::new();
    P.get_or_init(|| {
        Prepared::new(weights(), extraction_set(), Mode::Memory).expect("prepare memory")
    })
}

/// Head-granularity copy-mode circuit at the standard threshold.
fn copy_circuit() -> &'static CircuitReport {
    static R: OnceLock<CircuitReport> = OnceLock::new();
    R.get_or_init(|| {
        let ranked = rank_components(prep_copy(), Granularity::Head).expect("rank copy heads");
        greedy_select(prep_copy(), ranked, DELTA, EXTRACT_SEED, Granularity::Head, 0)
            .expect("select copy circuit")
    })
}

/// Head-granularity memory-mode circuit, for the overlap comparison.
fn memory_circuit_heads() -> &'static CircuitReport {
    static R: OnceLock<CircuitReport> = OnceLock::new();
    R.get_or_init(|| {
        let ranked = rank_components(prep_memory(), Granularity::Head).expect("rank memory heads");
        greedy_select(prep_memory(), ranked, DELTA, EXTRACT_SEED, Granularity::Head, 0)
            .expect("select memory circuit")
    })
}

fn memory_mlp_ranking() -> &'static Vec<ComponentScore> {
    static R: OnceLock<Vec<ComponentScore>> = OnceLock::new();
    R.get_or_init(|| rank_components(prep_memory(), Granularity::Mlp).expect("rank memory mlps"))
}

fn verdict(criterion: usize, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] acceptance {criterion:02}: {detail}");
    assert!(pass, "acceptance check {criterion} failed: {detail}");
}

fn clean_trace(ex: &ProbeExample, mode: Mode) -> RunTrace {
    let seq = ex.seq(mode);
    run(weights(), &seq.tokens, &CaptureSpec::full(), &RunOptions::default()).expect("clean run")
}

// ---------------------------------------------------------------------------
// 1 — patching a component from its own run changes nothing
// ---------------------------------------------------------------------------

#[test]
fn a01_self_patch_is_identity() {
    let w = weights();
    let mut worst = 0.0_f64;
    for ex in &extraction_set()[..10] {
        let seq = ex.seq(Mode::Copy);
        let clean = clean_trace(ex, Mode::Copy);
        let base = softmax(&clean.logits).expect("clean softmax");
        for kind in all_components(w) {
            let plan = PatchPlan::new(vec![ComponentRef::at_last(kind)], &clean);
            let p = patched_distribution_cached(w, &seq.tokens, &clean, &plan)
                .expect("self-patch run");
            for (a, b) in p.as_slice().iter().zip(base.as_slice()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    verdict(
        1,
        worst < 1e-12,
        &format!(
            "self-patching every component leaves the distribution fixed \
             (max deviation {worst:.2e} < 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2 — a direct-effect patch equals the closed-form logit swap
// ---------------------------------------------------------------------------

/// Independent oracle: because everything outside the patched component is
/// restored, only its direct write moves the logits — swap its unembedded
/// contribution at the last position and re-normalize.
fn logit_swap_oracle(
    w: &ModelWeights,
    clean: &RunTrace,
    donor: &RunTrace,
    kind: ComponentKind,
) -> Vec<f64> {
    let r = ComponentRef::at_last(kind);
    let c_act = capture(clean, &r).expect("clean capture");
    let d_act = capture(donor, &r).expect("donor capture");
    let c_log = w.unembedding.matvec(c_act).expect("clean unembed");
    let d_log = w.unembedding.matvec(d_act).expect("donor unembed");
    clean
        .logits
        .iter()
        .zip(c_log.iter().zip(&d_log))
        .map(|(l, (c, d))| l - c + d)
        .collect()
}

#[test]
fn a02_patch_matches_logit_swap_oracle() {
    let w = weights();
    let mut worst = 0.0_f64;
    for ex in &extraction_set()[..10] {
        let seq = ex.seq(Mode::Copy);
        let clean = clean_trace(ex, Mode::Copy);
        let corrupt = ex.corrupt_seq();
        let donor = run(w, &corrupt.tokens, &CaptureSpec::full(), &RunOptions::default())
            .expect("donor run");
        for kind in all_components(w) {
            let plan = PatchPlan::new(vec![ComponentRef::at_last(kind)], &donor);
            let p = patched_distribution_cached(w, &seq.tokens, &clean, &plan)
                .expect("patched run");
            let oracle = softmax(&logit_swap_oracle(w, &clean, &donor, kind))
                .expect("oracle softmax");
            for (a, b) in p.as_slice().iter().zip(oracle.as_slice()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    verdict(
        2,
        worst < 1e-6,
        &format!(
            "patched distributions match the closed-form logit swap for every \
             component (max deviation {worst:.2e} < 1e-6)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3 — copy-mode head ranking finds the copy head, and the circuit is small
// ---------------------------------------------------------------------------

#[test]
fn a03_copy_head_tops_ranking_and_circuit_is_small() {
    let report = copy_circuit();
    let (l, h) = info().copy_head;
    let expected = ComponentKind::AttnHead { layer: l, head: h };
    let first = &report.ranked[0];
    let pass = first.component == expected && first.score >= 0.9 && report.selected.len() <= 2;
    verdict(
        3,
        pass,
        &format!(
            "copy-mode ranking puts {} first with score {:.4} (>= 0.9) and the \
             greedy selection keeps {} component(s) (<= 2) at threshold {}",
            first.component,
            first.score,
            report.selected.len(),
            report.delta
        ),
    );
}

// ---------------------------------------------------------------------------
// 4 — memory-mode MLP ranking finds the recall MLP; circuits barely overlap
// ---------------------------------------------------------------------------

#[test]
fn a04_memory_mlp_tops_ranking_and_circuits_are_disjoint() {
    let ranking = memory_mlp_ranking();
    let expected = ComponentKind::Mlp { layer: info().memory_mlp };
    let first = &ranking[0];
    let overlap = circuit_overlap(copy_circuit(), memory_circuit_heads()).expect("overlap");
    let pass = first.component == expected && overlap <= 0.2;
    verdict(
        4,
        pass,
        &format!(
            "memory-mode ranking puts {} first (score {:.4}); copy/memory \
             head-circuit overlap {:.3} <= 0.2",
            first.component, first.score, overlap
        ),
    );
}

// ---------------------------------------------------------------------------
// 5 — a random circuit of equal size is inert; the extracted one is not
// ---------------------------------------------------------------------------

#[test]
fn a05_random_circuit_is_inert_extracted_circuit_is_not() {
    let report = copy_circuit();
    let exclude = report.selected_kinds();
    let (chosen, random_p) = random_circuit_baseline(
        prep_copy(),
        Granularity::Head,
        exclude.len(),
        EXTRACT_SEED,
        &exclude,
    )
    .expect("random baseline");
    let true_p = 1.0 - report.combined_score;
    let names: Vec<String> = chosen.iter().map(|k| k.to_string()).collect();
    let pass = random_p >= 0.8 && true_p <= 0.1;
    verdict(
        5,
        pass,
        &format!(
            "patching random [{}] keeps answer probability {:.4} (>= 0.8) while \
             patching the extracted circuit drops it to {:.4} (<= 0.1)",
            names.join(", "),
            random_p,
            true_p
        ),
    );
}

// ---------------------------------------------------------------------------
// 6 — ablating the extracted context circuit collapses held-out accuracy
// ---------------------------------------------------------------------------

#[test]
fn a06_context_circuit_ablation_collapses_heldout_accuracy() {
    let outcome = ablate_circuit_accuracy(weights(), heldout_set(), copy_circuit(), Mode::Copy)
        .expect("ablation");
    let rel_drop = (outcome.acc_before - outcome.acc_after) / outcome.acc_before;
    let pass = rel_drop >= 0.7 && !outcome.overlap_warning && heldout_set().len() == 200;
    verdict(
        6,
        pass,
        &format!(
            "zeroing the context circuit on 200 held-out examples drops copy \
             accuracy {:.3} -> {:.3} ({:.0}% relative, >= 70%), no overlap warning",
            outcome.acc_before,
            outcome.acc_after,
            rel_drop * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 7 — the entropy profile singles out the copy head
// ---------------------------------------------------------------------------

#[test]
fn a07_entropy_profile_selects_copy_head() {
    let profiles =
        head_entropy_profile(weights(), extraction_set(), Mode::Copy).expect("profiles");
    let selected = select_attribution_head(&profiles).expect("selection");
    let (l, h) = info().copy_head;
    let expected = ComponentKind::AttnHead { layer: l, head: h };
    let winner = profiles.iter().find(|p| p.component == selected).expect("winner profile");
    let pass =
        selected == expected && winner.mean_entropy < 0.5 && winner.accuracy >= 0.95;
    verdict(
        7,
        pass,
        &format!(
            "minimum-entropy head is {} with mean context entropy {:.4} nats \
             (< 0.5) and slot-argmax accuracy {:.3} (>= 0.95)",
            selected, winner.mean_entropy, winner.accuracy
        ),
    );
}

// ---------------------------------------------------------------------------
// 8 — attribution is exact, one forward pass per generated token, and
//     robust to a planted non-causal duplicate
// ---------------------------------------------------------------------------

fn attribution_config() -> AttributionConfig {
    let (l, h) = info().copy_head;
    AttributionConfig {
        head: ComponentKind::AttnHead { layer: l, head: h },
        answer_length: 1,
        top_k: 1,
        span_mode: SpanMode::Window { slength: 3 },
        terminator: None,
    }
}

fn top_span_covers_slot(ex: &ProbeExample, cfg: &AttributionConfig) -> bool {
    let out = attn_attrib(weights(), &ex.seq(Mode::Copy), cfg).expect("attribution");
    let s = &out.spans[0];
    s.start <= ex.answer_position && ex.answer_position < s.end
}

#[test]
fn a08_attribution_exact_single_pass_and_causal_under_duplicates() {
    let cfg = attribution_config();
    let set = extraction_set();
    // Generate the duplicate set up front: probe generation runs the model
    // and must not pollute the pass counting below.
    let dup = gen_probe(
        weights(),
        info(),
        &ProbeConfig { n: 200, plant_duplicate: true, ..ProbeConfig::default() },
        PROBE_SEED + 1,
    )
    .expect("duplicate probe")
    .examples;

    let before = forward_pass_count();
    let exact = set.iter().filter(|ex| top_span_covers_slot(ex, &cfg)).count();
    let passes = forward_pass_count() - before;
    let expected_passes = (set.len() * cfg.answer_length) as u64;
    let exact_rate = exact as f64 / set.len() as f64;

    let causal = dup.iter().filter(|ex| top_span_covers_slot(ex, &cfg)).count();
    let causal_rate = causal as f64 / dup.len() as f64;

    let pass = exact_rate >= 0.95 && passes == expected_passes && causal_rate >= 0.9;
    verdict(
        8,
        pass,
        &format!(
            "attribution exact-match {:.3} (>= 0.95) in {} forward passes for \
             {} one-token questions (exactly one per token); with a planted \
             duplicate the causal slot still wins {:.3} (>= 0.9)",
            exact_rate,
            passes,
            set.len(),
            causal_rate
        ),
    );
}

// ---------------------------------------------------------------------------
// 9 — finite differences confirm the exact gradient
// ---------------------------------------------------------------------------

fn embedded_input(w: &ModelWeights, tokens: &[u32]) -> Matrix {
    let d = w.config.d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (t, &tok) in tokens.iter().enumerate() {
        let e = w.token_embedding.row(tok as usize);
        let p = w.pos_embedding.row(t);
        let row = x.row_mut(t);
        for c in 0..d {
            row[c] = e[c] + p[c];
        }
    }
    x
}

fn nll_at(w: &ModelWeights, x: Matrix, tokens: &[u32], target: u32) -> f64 {
    let opts = RunOptions { input_override: Some(x), ..RunOptions::default() };
    let trace = run(w, tokens, &CaptureSpec::none(), &opts).expect("override run");
    -softmax(&trace.logits).expect("softmax").get(target as usize).ln()
}

#[test]
fn a09_finite_differences_confirm_exact_gradient() {
    let w = weights();
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let mut pool: Vec<&ProbeExample> = extraction_set().iter().collect();
    pool.shuffle(&mut rng);
    let h = 1e-3;

    let mut worst_rel = 0.0_f64;
    for ex in pool.into_iter().take(20) {
        let seq = ex.seq(Mode::Copy);
        let target = ex.target(Mode::Copy);
        let (_, grad) = nll_grad(w, &seq.tokens, target).expect("exact gradient");
        let base = embedded_input(w, &seq.tokens);
        let mut diff_sq = 0.0;
        let mut grad_sq = 0.0;
        for t in 0..seq.tokens.len() {
            for c in 0..w.config.d_model {
                let mut plus = base.clone();
                plus.row_mut(t)[c] += h;
                let mut minus = base.clone();
                minus.row_mut(t)[c] -= h;
                let fd = (nll_at(w, plus, &seq.tokens, target)
                    - nll_at(w, minus, &seq.tokens, target))
                    / (2.0 * h);
                let g = grad.get(t, c);
                diff_sq += (fd - g) * (fd - g);
                grad_sq += g * g;
            }
        }
        worst_rel = worst_rel.max((diff_sq / grad_sq).sqrt());
    }

    // Report the two attribution accuracies side by side, as the harness does.
    let report = evaluate(
        weights(),
        extraction_set(),
        &EvalConfig { slength: 3, strict: false, pad: info().pad },
    )
    .expect("evaluation harness");

    let pass = worst_rel <= 1e-3;
    verdict(
        9,
        pass,
        &format!(
            "finite differences match the exact gradient on 20 random examples \
             (worst relative error {:.2e} <= 1e-3); attribution exact-match: \
             attention {:.3}, gradient baseline {:.3}",
            worst_rel, report.attn_exact_rate, report.grad_exact_rate
        ),
    );
}

// ---------------------------------------------------------------------------
// 10 — steering switches which circuit answers
// ---------------------------------------------------------------------------

#[test]
fn a10_steering_switches_the_answering_circuit() {
    let w = weights();
    let set = extraction_set();
    let top_layer = copy_circuit().selected[0].component.layer();

    let strong = switch_experiment(
        w,
        set,
        &SteerSpec::AttnUpweight { beta: 10.0, layers: vec![top_layer] },
        Mode::Memory,
    )
    .expect("strong upweight");
    let weak = switch_experiment(
        w,
        set,
        &SteerSpec::AttnUpweight { beta: 1.0, layers: vec![top_layer] },
        Mode::Memory,
    )
    .expect("unit upweight");

    let mlp_layer = memory_mlp_ranking()[0].component.layer();
    let zeroed = SteeredModel::new(w, SteerSpec::MlpZero { layers: vec![mlp_layer] }, None)
        .expect("mlp-zero model");
    let mut memorized_p = 0.0;
    for ex in set {
        let p = zeroed.next_distribution(&ex.seq(Mode::Memory)).expect("steered run");
        memorized_p += p.get(ex.answer as usize);
    }
    memorized_p /= set.len() as f64;

    let pass =
        strong.switch_rate >= 0.9 && weak.switch_rate <= 0.05 && memorized_p < 0.1;
    verdict(
        10,
        pass,
        &format!(
            "upweighting layer {} at beta=10 switches {:.3} of answers to the \
             in-context fallback (>= 0.9), beta=1 switches {:.3} (<= 0.05), and \
             zeroing the recall MLP leaves memorized-answer probability {:.4} (< 0.1)",
            top_layer, strong.switch_rate, weak.switch_rate, memorized_p
        ),
    );
}

// ---------------------------------------------------------------------------
// 11 — attributed spans matter more than random equal-length spans
// ---------------------------------------------------------------------------

#[test]
fn a11_attributed_spans_beat_random_spans() {
    let w = weights();
    let cfg = attribution_config();
    let pad = info().pad;
    let mut rng = ChaCha20Rng::seed_from_u64(47);

    let mut wins = 0usize;
    let mut total = 0usize;
    for ex in extraction_set() {
        let prompt = ex.seq(Mode::Copy);
        let target = ex.target(Mode::Copy) as usize;
        let clean = run(w, &prompt.tokens, &CaptureSpec::none(), &RunOptions::default())
            .expect("clean run");
        let logp = softmax(&clean.logits).expect("softmax").get(target).ln();

        let span = {
            let out = attn_attrib(w, &prompt, &cfg).expect("attribution");
            (out.spans[0].start, out.spans[0].end)
        };
        let len = span.1 - span.0;
        let (c0, c1) = prompt.context;
        // Random placement, same length, disjoint from the attributed span.
        let starts: Vec<usize> =
            (c0..=c1 - len).filter(|&s| s + len <= span.0 || s >= span.1).collect();
        if starts.is_empty() {
            continue;
        }
        let rs = starts[rng.random_range(0..starts.len())];

        let rel_of = |sp: (usize, usize)| {
            let ablated = ablate_spans_from_context(&prompt, &[sp], pad).expect("ablation");
            let t = run(w, &ablated.tokens, &CaptureSpec::none(), &RunOptions::default())
                .expect("ablated run");
            let lp = softmax(&t.logits).expect("softmax").get(target).ln();
            rel_score(logp, lp).expect("rel score")
        };
        if rel_of(span) > rel_of((rs, rs + len)) {
            wins += 1;
        }
        total += 1;
    }

    let win_rate = wins as f64 / total as f64;
    verdict(
        11,
        win_rate >= 0.9,
        &format!(
            "removing the attributed span shifts the answer log-probability \
             more than removing a random equal-length span on {:.3} of {} \
             examples (>= 0.9)",
            win_rate, total
        ),
    );
}

// ---------------------------------------------------------------------------
// 12 — the pipeline reruns byte-identically, at any job count
// ---------------------------------------------------------------------------

fn run_pipeline(dir: &Path, jobs: &str) {
    let bin = env!("CARGO_BIN_EXE_qacirc");
    let invoke = |args: &[&str]| {
        let status = Command::new(bin)
            .current_dir(dir)
            .args(args)
            .args(["--jobs", jobs, "--seed", "5"])
            .status()
            .expect("binary launches");
        assert!(status.success(), "qacirc {args:?} failed in {}", dir.display());
    };
    invoke(&["build-fixture", "--out", "model.bin"]);
    invoke(&["gen-probe", "--model", "model.bin", "--out", "probe.jsonl", "--n", "160"]);
    invoke(&[
        "extract",
        "--model",
        "model.bin",
        "--probe",
        "probe.jsonl",
        "--out",
        "circuit.json",
        "--mode",
        "copy",
        "--granularity",
        "head",
        "--delta",
        "0.95",
        "--hierarchy",
        "1",
    ]);
    invoke(&[
        "profile-heads",
        "--model",
        "model.bin",
        "--probe",
        "probe.jsonl",
        "--out",
        "profiles.json",
    ]);
    invoke(&[
        "attribute",
        "--model",
        "model.bin",
        "--probe",
        "probe.jsonl",
        "--out",
        "attribution.jsonl",
        "--slength",
        "3",
    ]);
    invoke(&[
        "steer",
        "--model",
        "model.bin",
        "--probe",
        "probe.jsonl",
        "--out",
        "switch.json",
        "--mode",
        "attn-upweight",
        "--beta",
        "10",
        "--layers",
        "1",
    ]);
    invoke(&[
        "eval",
        "--model",
        "model.bin",
        "--probe",
        "probe.jsonl",
        "--out",
        "eval.json",
        "--slength",
        "3",
    ]);
    invoke(&[
        "report",
        "--circuit",
        "circuit.json",
        "--profiles",
        "profiles.json",
        "--eval",
        "eval.json",
        "--out-dir",
        "reports",
    ]);
}

fn artifact_digests(root: &Path) -> BTreeMap<String, String> {
    use sha2::{Digest, Sha256};
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                let bytes = std::fs::read(&path).expect("readable artifact");
                let digest = format!("{:x}", Sha256::digest(&bytes));
                out.insert(rel.to_string_lossy().into_owned(), digest);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn a12_pipeline_artifacts_are_byte_identical() {
    let base = tempfile::tempdir().expect("tempdir");
    let dirs = ["serial", "serial_rerun", "wide"];
    let job_counts = ["1", "1", "8"];
    for (d, j) in dirs.iter().zip(job_counts) {
        let dir = base.path().join(d);
        std::fs::create_dir(&dir).expect("run dir");
        run_pipeline(&dir, j);
    }
    let reference = artifact_digests(&base.path().join(dirs[0]));
    assert!(!reference.is_empty(), "pipeline produced no artifacts");
    let mut identical = true;
    for d in &dirs[1..] {
        let other = artifact_digests(&base.path().join(d));
        if other != reference {
            identical = false;
            let missing: Vec<_> = reference
                .iter()
                .filter(|(k, v)| other.get(*k) != Some(v))
                .map(|(k, _)| k.clone())
                .collect();
            eprintln!("byte differences in {d}: {missing:?}");
        }
    }
    verdict(
        12,
        identical,
        &format!(
            "all {} pipeline artifacts (reports and manifests included) are \
             byte-identical across a rerun and across --jobs 1 vs --jobs 8",
            reference.len()
        ),
    );
}
