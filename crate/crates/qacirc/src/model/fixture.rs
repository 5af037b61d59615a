//! Analytic construction of the QA fixture model. No training: every weight
//! is written directly so the causal structure is known ground truth.
//!
//! The implanted mechanism, layer by layer:
//!
//! * A **previous-token head** whose query/key channels live on sinusoidal
//!   positional dimensions; a rotation block in the query makes position t
//!   match position t-1. Its value path reads subject tokens and writes the
//!   subject one-hot *negated* into the stream at the following position.
//! * A **copy head** one layer up: query = question subject, key = the
//!   (negated) subject channel written by the previous-token head, with a
//!   negative sign on the key projection so the token right after the
//!   subject gets a large positive score while the subject itself is
//!   suppressed. Its value/output path copies answer tokens (and the MASK
//!   token) into the logits.
//! * A **span head** in the same layer: constant query fired by the question
//!   subject, key active on any answer token in the context. At baseline its
//!   attention is spread thin; steering's beta-upweighting saturates it on
//!   the strongest context answer token, which is what flips answers from
//!   memory to context.
//! * A **memory MLP**: reads the subject one-hot, adds a scaled one-hot of
//!   the memorized answer (the MemoryTable) to the stream.
//! * A **terminator MLP**: fires on answer tokens and on the terminator
//!   itself, so generation emits answer-then-terminator deterministically.
//!
//! Answer values travel through d_head-sized heads via sign-paired channels:
//! answers j and j + n/2 share a channel with opposite signs, so n answers
//! plus MASK fit in n/2 + 1 channels. The correct answer always receives a
//! positive write; the only crosstalk is a *negative* write on its partner,
//! which can never flip an argmax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

use super::{HeadWeights, LayerWeights, ModelConfig, ModelError, ModelWeights};

/// Reserved token ids.
pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
pub const QMARK: u32 = 2;
pub const MASK: u32 = 3;
pub const TERM: u32 = 4;
const FIRST_SUBJECT: usize = 5;

/// Number of sinusoidal frequency pairs backing the previous-token match.
const N_FREQS: usize = 3;

/// Frequencies for the positional channels, found by a coarse-to-fine scan
/// maximizing the worst-case margin between the aligned (offset 1) response
/// of the previous-token matched filter and every other offset within the
/// 32-token window.
const OMEGA: [f64; N_FREQS] = [2.367103021370498, 0.6029297172614462, 0.1695941420651357];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureScales {
    /// Pre-softmax score of the previous-token positional match.
    pub a_prev: f64,
    /// Pre-softmax score of the copy head at the token after the subject.
    pub a_copy: f64,
    /// Pre-softmax score of the span head on answer tokens.
    pub a_span: f64,
    /// Logit weight of the copy head's value path.
    pub w_copy: f64,
    /// Logit weight of the span head's value path.
    pub w_span: f64,
    /// Logit weight the memory MLP gives the memorized answer.
    pub w_mem: f64,
    /// Logit weight of the terminator pathway.
    pub w_term: f64,
    /// Scale-down of the MASK unembedding row so a copied MASK loses to
    /// memory while genuine copied answers win.
    pub mask_unembed: f64,
}

impl Default for FixtureScales {
    fn default() -> Self {
        FixtureScales {
            a_prev: 90.0,
            a_copy: 40.0,
            a_span: 1.0,
            w_copy: 8.0,
            w_span: 9.0,
            w_mem: 4.0,
            w_term: 6.0,
            mask_unembed: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub model: ModelConfig,
    pub n_subjects: usize,
    pub n_answers: usize,
    pub n_fillers: usize,
    /// (l*, h*): the context-copy head.
    pub copy_head: (usize, usize),
    pub prev_head: (usize, usize),
    pub span_head: (usize, usize),
    /// m*: layer whose MLP holds the memory table.
    pub memory_mlp: usize,
    pub terminator_mlp: usize,
    pub scales: FixtureScales,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            model: ModelConfig {
                n_layers: 2,
                n_heads: 4,
                d_model: 64,
                d_head: 16,
                d_mlp: 64,
                vocab_size: 64,
                max_seq: 32,
                rng_seed: 0,
            },
            n_subjects: 16,
            n_answers: 30,
            n_fillers: 7,
            copy_head: (1, 2),
            prev_head: (0, 1),
            span_head: (1, 0),
            memory_mlp: 1,
            terminator_mlp: 0,
            scales: FixtureScales::default(),
        }
    }
}

/// Everything an analysis pass needs to know about the constructed model:
/// vocabulary layout, the memory table, and the implanted component
/// addresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureInfo {
    pub pad: u32,
    pub sep: u32,
    pub qmark: u32,
    pub mask: u32,
    pub term: u32,
    pub subjects: Vec<u32>,
    pub answers: Vec<u32>,
    pub fillers: Vec<u32>,
    /// subject token -> memorized answer token.
    pub memory: BTreeMap<u32, u32>,
    /// Relation families partition the answers into contiguous id ranges.
    pub n_relations: usize,
    pub copy_head: (usize, usize),
    pub prev_head: (usize, usize),
    pub span_head: (usize, usize),
    pub memory_mlp: usize,
    pub terminator_mlp: usize,
    pub scales: FixtureScales,
}

impl FixtureInfo {
    /// The answer sharing a sign-paired value channel with `a` (the one
    /// token that receives negative crosstalk when `a` is written).
    pub fn partner_answer(&self, a: u32) -> u32 {
        let n = self.answers.len();
        let j = self.answers.iter().position(|&x| x == a).expect("not an answer token");
        self.answers[(j + n / 2) % n]
    }

    /// Relation family of an answer token (contiguous id ranges).
    pub fn relation_of(&self, a: u32) -> usize {
        let j = self.answers.iter().position(|&x| x == a).expect("not an answer token");
        j / (self.answers.len() / self.n_relations)
    }

    pub fn memorized_answer(&self, subject: u32) -> u32 {
        self.memory[&subject]
    }
}

fn infeasible(msg: String) -> ModelError {
    ModelError::FixtureInfeasible(msg)
}

/// Builds the fixture weights plus the ground-truth description. Fails with
/// `FixtureInfeasible` when the requested entity counts cannot be realized
/// in the given dimensions.
pub fn build_fixture(fcfg: &FixtureConfig) -> Result<(ModelWeights, FixtureInfo), ModelError> {
    let c = &fcfg.model;
    c.validate()?;
    let sc = &fcfg.scales;

    let subj0 = FIRST_SUBJECT;
    let ans0 = subj0 + fcfg.n_subjects;
    let fill0 = ans0 + fcfg.n_answers;
    let pos0 = fill0 + fcfg.n_fillers;
    let half = fcfg.n_answers / 2;

    if fcfg.n_subjects == 0 || fcfg.n_answers == 0 || fcfg.n_fillers == 0 {
        return Err(infeasible("need at least one subject, answer, and filler".into()));
    }
    if pos0 > c.vocab_size {
        return Err(infeasible(format!(
            "vocab {} too small for {} subjects + {} answers + {} fillers + {} reserved ids",
            c.vocab_size, fcfg.n_subjects, fcfg.n_answers, fcfg.n_fillers, FIRST_SUBJECT
        )));
    }
    if pos0 + 2 * N_FREQS > c.d_model {
        return Err(infeasible(format!(
            "d_model {} too small: {} one-hot channels + {} positional channels needed",
            c.d_model,
            pos0,
            2 * N_FREQS
        )));
    }
    if fcfg.n_subjects > c.d_head {
        return Err(infeasible(format!(
            "{} subjects exceed d_head {} value channels",
            fcfg.n_subjects, c.d_head
        )));
    }
    if fcfg.n_answers % 2 != 0 || half + 1 > c.d_head {
        return Err(infeasible(format!(
            "{} answers need an even count with {}/2 + 1 <= d_head {} sign-paired channels",
            fcfg.n_answers, fcfg.n_answers, c.d_head
        )));
    }
    if c.d_mlp < fcfg.n_answers + 1 || c.d_mlp < fcfg.n_subjects {
        return Err(infeasible(format!(
            "d_mlp {} too small for the terminator ({}) and memory ({}) channel banks",
            c.d_mlp,
            fcfg.n_answers + 1,
            fcfg.n_subjects
        )));
    }
    let n_relations = 3;
    if fcfg.n_answers % n_relations != 0 {
        return Err(infeasible(format!(
            "{} answers do not split into {} equal relation families",
            fcfg.n_answers, n_relations
        )));
    }
    for (name, (l, h)) in [
        ("copy head", fcfg.copy_head),
        ("previous-token head", fcfg.prev_head),
        ("span head", fcfg.span_head),
    ] {
        if l >= c.n_layers || h >= c.n_heads {
            return Err(infeasible(format!("{name} ({l},{h}) out of range")));
        }
    }
    if fcfg.memory_mlp >= c.n_layers || fcfg.terminator_mlp >= c.n_layers {
        return Err(infeasible("MLP layer index out of range".into()));
    }
    if fcfg.prev_head.0 >= fcfg.copy_head.0 {
        return Err(infeasible(
            "previous-token head must sit in an earlier layer than the copy head".into(),
        ));
    }
    let distinct_heads = [fcfg.copy_head, fcfg.prev_head, fcfg.span_head];
    for i in 0..distinct_heads.len() {
        for j in (i + 1)..distinct_heads.len() {
            if distinct_heads[i] == distinct_heads[j] {
                return Err(infeasible("implanted heads must be distinct".into()));
            }
        }
    }
    if fcfg.memory_mlp == fcfg.terminator_mlp {
        return Err(infeasible("memory and terminator MLPs must occupy different layers".into()));
    }
    // The memory MLP writes answer one-hots at subject positions; if a layer
    // at or above it hosted the span or copy head, those writes would leak
    // into attention keys/values and corrupt the context pathway.
    if fcfg.memory_mlp < fcfg.span_head.0 || fcfg.memory_mlp < fcfg.copy_head.0 {
        return Err(infeasible(
            "memory MLP must not precede the span or copy head's layer".into(),
        ));
    }

    let subjects: Vec<u32> = (0..fcfg.n_subjects).map(|i| (subj0 + i) as u32).collect();
    let answers: Vec<u32> = (0..fcfg.n_answers).map(|j| (ans0 + j) as u32).collect();
    let fillers: Vec<u32> = (0..fcfg.n_fillers).map(|k| (fill0 + k) as u32).collect();
    // Memory table: a fixed affine map, coprime stride so entries spread
    // across all relation families.
    let memory: BTreeMap<u32, u32> = subjects
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, answers[(7 * i + 3) % fcfg.n_answers]))
        .collect();

    // Embedding / unembedding: one-hot per tokenizable id; ids >= pos0 are
    // reserved (never tokenized) so positional channels stay token-free.
    let mut emb = Matrix::zeros(c.vocab_size, c.d_model);
    let mut unembed = Matrix::zeros(c.vocab_size, c.d_model);
    for t in 0..pos0 {
        emb.set(t, t, 1.0);
        unembed.set(t, t, 1.0);
    }
    unembed.set(MASK as usize, MASK as usize, sc.mask_unembed);

    let mut pos = Matrix::zeros(c.max_seq, c.d_model);
    for u in 0..c.max_seq {
        for (k, w) in OMEGA.iter().enumerate() {
            pos.set(u, pos0 + 2 * k, (w * u as f64).cos());
            pos.set(u, pos0 + 2 * k + 1, (w * u as f64).sin());
        }
    }

    let blank_head = || HeadWeights {
        w_q: Matrix::zeros(c.d_head, c.d_model),
        w_k: Matrix::zeros(c.d_head, c.d_model),
        w_v: Matrix::zeros(c.d_head, c.d_model),
        w_o: Matrix::zeros(c.d_model, c.d_head),
    };
    let mut layers: Vec<LayerWeights> = (0..c.n_layers)
        .map(|_| LayerWeights {
            heads: (0..c.n_heads).map(|_| blank_head()).collect(),
            attn_norm_gain: vec![1.0; c.d_model],
            mlp_in: Matrix::zeros(c.d_mlp, c.d_model),
            mlp_out: Matrix::zeros(c.d_model, c.d_mlp),
            mlp_norm_gain: vec![1.0; c.d_model],
        })
        .collect();

    // Previous-token head. Query rows apply a rotation by -omega to the
    // positional pair so q(t) = g * (cos w(t-1), sin w(t-1)); keys are the
    // raw positional pair scaled by g. Aligned score = 3 g^2 / sqrt(d_head).
    {
        let (l, h) = fcfg.prev_head;
        let g = (sc.a_prev * (c.d_head as f64).sqrt() / N_FREQS as f64).sqrt();
        let head = &mut layers[l].heads[h];
        for (k, w) in OMEGA.iter().enumerate() {
            let (s, cos) = w.sin_cos();
            head.w_q.set(2 * k, pos0 + 2 * k, g * cos);
            head.w_q.set(2 * k, pos0 + 2 * k + 1, g * s);
            head.w_q.set(2 * k + 1, pos0 + 2 * k, -g * s);
            head.w_q.set(2 * k + 1, pos0 + 2 * k + 1, g * cos);
            head.w_k.set(2 * k, pos0 + 2 * k, g);
            head.w_k.set(2 * k + 1, pos0 + 2 * k + 1, g);
        }
        for (i, &s) in subjects.iter().enumerate() {
            head.w_v.set(i, s as usize, 1.0);
            head.w_o.set(s as usize, i, -1.0);
        }
    }

    // Sign-paired answer value/output coding shared by copy and span heads.
    let pair_vo = |head: &mut HeadWeights, scale: f64, with_mask: bool| {
        for (j, &a) in answers.iter().enumerate() {
            head.w_v.set(j % half, a as usize, if j < half { 1.0 } else { -1.0 });
        }
        for i in 0..half {
            head.w_o.set(answers[i] as usize, i, scale);
            head.w_o.set(answers[i + half] as usize, i, -scale);
        }
        if with_mask {
            head.w_v.set(half, MASK as usize, 1.0);
            head.w_o.set(MASK as usize, half, scale);
        }
    };

    // Copy head: question subject vs the negated subject channel the
    // previous-token head wrote. Score +a_copy right after the subject,
    // -a_copy at the subject itself and at the question's subject token.
    {
        let (l, h) = fcfg.copy_head;
        let gamma = (sc.a_copy * (c.d_head as f64).sqrt()).sqrt();
        let head = &mut layers[l].heads[h];
        for (i, &s) in subjects.iter().enumerate() {
            head.w_q.set(i, s as usize, gamma);
            head.w_k.set(i, s as usize, -gamma);
        }
        pair_vo(head, sc.w_copy, true);
    }

    // Span head: fires (mildly, score a_span) on every answer token in
    // range; the steering experiments upweight its peak.
    {
        let (l, h) = fcfg.span_head;
        let cqk = (sc.a_span * (c.d_head as f64).sqrt()).sqrt();
        let head = &mut layers[l].heads[h];
        for &s in &subjects {
            head.w_q.set(0, s as usize, cqk);
        }
        for &a in &answers {
            head.w_k.set(0, a as usize, cqk);
        }
        pair_vo(head, sc.w_span, false);
    }

    // Terminator MLP: any answer token (or TERM itself) at the last
    // position pushes the terminator logit up.
    {
        let layer = &mut layers[fcfg.terminator_mlp];
        for (j, &a) in answers.iter().enumerate() {
            layer.mlp_in.set(j, a as usize, 1.0);
            layer.mlp_out.set(TERM as usize, j, sc.w_term);
        }
        layer.mlp_in.set(fcfg.n_answers, TERM as usize, 1.0);
        layer.mlp_out.set(TERM as usize, fcfg.n_answers, sc.w_term);
    }

    // Memory MLP: subject one-hot -> memorized answer one-hot, scaled.
    {
        let layer = &mut layers[fcfg.memory_mlp];
        for (i, &s) in subjects.iter().enumerate() {
            layer.mlp_in.set(i, s as usize, 1.0);
            layer.mlp_out.set(memory[&s] as usize, i, sc.w_mem);
        }
    }

    let weights = ModelWeights {
        config: c.clone(),
        token_embedding: emb,
        pos_embedding: pos,
        layers,
        unembedding: unembed,
    };
    weights.validate()?;

    let info = FixtureInfo {
        pad: PAD,
        sep: SEP,
        qmark: QMARK,
        mask: MASK,
        term: TERM,
        subjects,
        answers,
        fillers,
        memory,
        n_relations,
        copy_head: fcfg.copy_head,
        prev_head: fcfg.prev_head,
        span_head: fcfg.span_head,
        memory_mlp: fcfg.memory_mlp,
        terminator_mlp: fcfg.terminator_mlp,
        scales: sc.clone(),
    };
    Ok((weights, info))
}

/// Zeroes a head's output projection, removing the head from the model
/// entirely (direct and indirect paths).
pub fn ablate_head(weights: &mut ModelWeights, head: (usize, usize)) {
    let d_head = weights.config.d_head;
    weights.layers[head.0].heads[head.1].w_o = Matrix::zeros(weights.config.d_model, d_head);
}

/// Zeroes an MLP's output projection.
pub fn ablate_mlp(weights: &mut ModelWeights, layer: usize) {
    weights.layers[layer].mlp_out = Matrix::zeros(weights.config.d_model, weights.config.d_mlp);
}
