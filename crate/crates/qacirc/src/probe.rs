//! Probe-dataset generation: paired copy/memory QA examples with corrupted
//! counterparts, plus JSONL persistence and relation partitioning.
//!
//! Every example shares one context skeleton
//! `[filler.., subject, answer-slot, after-slot, filler..]` and a question
//! `[SEP, ?, subject]`, realized four ways:
//!
//! * `context_copy`   — answer slot holds a *swapped* answer (!= memorized),
//!   so a faithful model must copy from context;
//! * `context_memory` — answer slot holds MASK and the after-slot holds a
//!   fallback answer token, so the model must recall the memorized answer
//!   (the fallback is what steering flips it to);
//! * `context_orig`   — answer slot holds the memorized answer;
//! * `context_corrupt`— subject and answer slot replaced by fillers, and the
//!   question subject replaced too: the donor run for patching.
//!
//! All four contexts have identical length and the corrupted question
//! matches the clean question's length, which is what lets the patcher line
//! activations up position by position.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::fixture::FixtureInfo;
use crate::model::{forward, CaptureSpec, ModelError, ModelWeights, TokenSeq};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("insufficient entropy: {0}")]
    InsufficientEntropy(String),
    #[error("partition error: {0}")]
    PartitionError(String),
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("jsonl parse error: {0}")]
    Parse(String),
}

/// Which context variant feeds a clean run, and therefore which answer
/// counts as correct: the swapped context token or the memorized one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Copy,
    Memory,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Copy => "copy",
            Mode::Memory => "memory",
        })
    }
}

// Field order here is the JSONL contract; serde emits struct fields in
// declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub id: u64,
    pub question: Vec<u32>,
    pub subject: u32,
    /// The memorized answer mem(subject).
    pub answer: u32,
    pub context_copy: Vec<u32>,
    pub context_memory: Vec<u32>,
    pub context_orig: Vec<u32>,
    pub context_corrupt: Vec<u32>,
    pub question_corrupt: Vec<u32>,
    /// Index of the answer slot within the context.
    pub answer_position: usize,
    /// Relation family of the memorized answer.
    pub relation: usize,
}

impl ProbeExample {
    pub fn context_len(&self) -> usize {
        self.context_copy.len()
    }

    /// The swapped-in context answer (what copy mode must produce).
    pub fn swap_token(&self) -> u32 {
        self.context_copy[self.answer_position]
    }

    /// The planted fallback answer next to MASK in the memory context (what
    /// a successful circuit switch must produce).
    pub fn fallback_token(&self) -> u32 {
        self.context_memory[self.answer_position + 1]
    }

    pub fn target(&self, mode: Mode) -> u32 {
        match mode {
            Mode::Copy => self.swap_token(),
            Mode::Memory => self.answer,
        }
    }

    fn assemble(&self, context: &[u32]) -> TokenSeq {
        let cl = context.len();
        let mut tokens = Vec::with_capacity(cl + self.question.len());
        tokens.extend_from_slice(context);
        tokens.extend_from_slice(&self.question);
        TokenSeq::new(tokens, (0, cl), (cl, cl + self.question.len()))
            .expect("generated segments are always in range")
    }

    /// Clean prompt for the given mode.
    pub fn seq(&self, mode: Mode) -> TokenSeq {
        match mode {
            Mode::Copy => self.assemble(&self.context_copy),
            Mode::Memory => self.assemble(&self.context_memory),
        }
    }

    pub fn orig_seq(&self) -> TokenSeq {
        self.assemble(&self.context_orig)
    }

    /// Donor prompt: corrupted context plus corrupted question.
    pub fn corrupt_seq(&self) -> TokenSeq {
        let cl = self.context_corrupt.len();
        let mut tokens = Vec::with_capacity(cl + self.question_corrupt.len());
        tokens.extend_from_slice(&self.context_corrupt);
        tokens.extend_from_slice(&self.question_corrupt);
        TokenSeq::new(tokens, (0, cl), (cl, cl + self.question_corrupt.len()))
            .expect("generated segments are always in range")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n: usize,
    /// Half-open range of leading filler counts.
    pub pre_filler: (usize, usize),
    /// Half-open range of trailing filler counts.
    pub post_filler: (usize, usize),
    /// Plant a second copy of the swapped answer at the first context
    /// position — before the subject, hence non-causal. Used to test that
    /// attribution picks the causal occurrence.
    pub plant_duplicate: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { n: 200, pre_filler: (4, 8), post_filler: (3, 7), plant_duplicate: false }
    }
}

pub struct GenOutcome {
    pub examples: Vec<ProbeExample>,
    /// Examples discarded by the validity filter before `n` were collected.
    pub rejections: usize,
}

/// Generates `pcfg.n` examples, deterministic in `seed`. Each (subject,
/// swapped-answer) pair is used at most once; examples the fixture answers
/// incorrectly (either mode) are rejected and resampled so the shipped
/// dataset is 100% validity-filtered.
pub fn gen_probe(
    weights: &ModelWeights,
    info: &FixtureInfo,
    pcfg: &ProbeConfig,
    seed: u64,
) -> Result<GenOutcome, ProbeError> {
    if pcfg.n == 0 {
        return Err(ProbeError::InvalidConfig("n must be >= 1".into()));
    }
    if pcfg.pre_filler.0 >= pcfg.pre_filler.1 || pcfg.post_filler.0 >= pcfg.post_filler.1 {
        return Err(ProbeError::InvalidConfig("filler ranges must be non-empty half-open".into()));
    }
    if pcfg.pre_filler.0 == 0 && pcfg.plant_duplicate {
        return Err(ProbeError::InvalidConfig(
            "plant_duplicate needs at least one leading filler position".into(),
        ));
    }
    let question_len = 3;
    let max_len = (pcfg.pre_filler.1 - 1) + 3 + (pcfg.post_filler.1 - 1) + question_len;
    if max_len > weights.config.max_seq {
        return Err(ProbeError::InvalidConfig(format!(
            "longest possible sequence ({max_len}) exceeds max_seq {}",
            weights.config.max_seq
        )));
    }
    let combos = info.subjects.len() * (info.answers.len() - 1);
    if pcfg.n > combos {
        return Err(ProbeError::InsufficientEntropy(format!(
            "{} examples requested but only {} distinct (subject, swap) pairs exist",
            pcfg.n, combos
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut used: std::collections::BTreeSet<(u32, u32)> = std::collections::BTreeSet::new();
    let mut examples = Vec::with_capacity(pcfg.n);
    let mut rejections = 0usize;
    let mut attempts = 0usize;
    let attempt_budget = pcfg.n.saturating_mul(1000).max(10_000);

    while examples.len() < pcfg.n {
        attempts += 1;
        if attempts > attempt_budget {
            return Err(ProbeError::InsufficientEntropy(format!(
                "gave up after {attempts} attempts with {} rejections; \
                 the model does not satisfy the validity filter",
                rejections
            )));
        }
        let pre = rng.random_range(pcfg.pre_filler.0..pcfg.pre_filler.1);
        let post = rng.random_range(pcfg.post_filler.0..pcfg.post_filler.1);
        let subject = info.subjects[rng.random_range(0..info.subjects.len())];
        let answer = info.memorized_answer(subject);
        let swap = loop {
            let cand = info.answers[rng.random_range(0..info.answers.len())];
            if cand != answer {
                break cand;
            }
        };
        if used.contains(&(subject, swap)) {
            continue;
        }
        // Fallback answer: distinct from the memorized answer AND from its
        // sign-paired partner, otherwise the span head's write would land
        // negative crosstalk on the memorized answer and distort memory-mode
        // probabilities.
        let fallback = loop {
            let cand = info.answers[rng.random_range(0..info.answers.len())];
            if cand != answer && info.partner_answer(cand) != answer {
                break cand;
            }
        };

        let filler = |rng: &mut ChaCha20Rng| info.fillers[rng.random_range(0..info.fillers.len())];
        let mut base: Vec<u32> = Vec::with_capacity(pre + 3 + post);
        for _ in 0..pre {
            base.push(filler(&mut rng));
        }
        if pcfg.plant_duplicate {
            base[0] = swap;
        }
        base.push(subject);
        let answer_position = base.len();
        base.push(0); // answer slot, filled per variant
        base.push(0); // after slot
        for _ in 0..post {
            base.push(filler(&mut rng));
        }

        let after = filler(&mut rng);
        let mut context_copy = base.clone();
        context_copy[answer_position] = swap;
        context_copy[answer_position + 1] = after;
        let mut context_memory = base.clone();
        context_memory[answer_position] = info.mask;
        context_memory[answer_position + 1] = fallback;
        let mut context_orig = base.clone();
        context_orig[answer_position] = answer;
        context_orig[answer_position + 1] = after;
        let mut context_corrupt = context_copy.clone();
        context_corrupt[answer_position - 1] = filler(&mut rng);
        context_corrupt[answer_position] = filler(&mut rng);
        let question = vec![info.sep, info.qmark, subject];
        let question_corrupt = vec![info.sep, info.qmark, filler(&mut rng)];

        let ex = ProbeExample {
            id: examples.len() as u64,
            question,
            subject,
            answer,
            context_copy,
            context_memory,
            context_orig,
            context_corrupt,
            question_corrupt,
            answer_position,
            relation: info.relation_of(answer),
        };

        // Validity filter: the model must answer both modes correctly.
        let copy_ok =
            forward(weights, &ex.seq(Mode::Copy), &CaptureSpec::none())?.next_token == swap;
        let mem_ok =
            forward(weights, &ex.seq(Mode::Memory), &CaptureSpec::none())?.next_token == answer;
        if !(copy_ok && mem_ok) {
            rejections += 1;
            continue;
        }
        used.insert((subject, swap));
        examples.push(ex);
    }
    Ok(GenOutcome { examples, rejections })
}

/// Splits a dataset into `k_parts` disjoint groups of whole relation
/// classes (relation id modulo `k_parts`). With as many parts as distinct
/// relations, each part is exactly one relation family.
pub fn partition_by_relation(
    dataset: &[ProbeExample],
    k_parts: usize,
) -> Result<Vec<Vec<ProbeExample>>, ProbeError> {
    if k_parts < 2 {
        return Err(ProbeError::PartitionError("k_parts must be >= 2".into()));
    }
    let distinct: std::collections::BTreeSet<usize> =
        dataset.iter().map(|e| e.relation).collect();
    if distinct.len() < k_parts {
        return Err(ProbeError::PartitionError(format!(
            "{} distinct relations cannot fill {} partitions",
            distinct.len(),
            k_parts
        )));
    }
    let mut parts: Vec<Vec<ProbeExample>> = vec![Vec::new(); k_parts];
    for ex in dataset {
        parts[ex.relation % k_parts].push(ex.clone());
    }
    Ok(parts)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn to_jsonl(dataset: &[ProbeExample]) -> Vec<u8> {
    let mut out = Vec::new();
    for ex in dataset {
        out.extend_from_slice(
            serde_json::to_string(ex).expect("probe examples always serialize").as_bytes(),
        );
        out.push(b'\n');
    }
    out
}

/// Writes one example per line, atomically (temp file + rename).
pub fn write_jsonl(dataset: &[ProbeExample], path: &Path) -> Result<(), ProbeError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.as_file_mut().write_all(&to_jsonl(dataset))?;
    tmp.as_file_mut().flush()?;
    tmp.persist(path).map_err(|e| ProbeError::Io(e.error))?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ProbeExample>, ProbeError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: ProbeExample = serde_json::from_str(line)
            .map_err(|e| ProbeError::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

/// SHA-256 over the dataset's canonical JSONL bytes; the fingerprint every
/// downstream report embeds.
pub fn dataset_sha256(dataset: &[ProbeExample]) -> String {
    let digest = Sha256::digest(to_jsonl(dataset));
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}
