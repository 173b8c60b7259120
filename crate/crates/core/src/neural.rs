//! Task and concept networks with hand-written forward and backward passes.
//!
//! The task network runs a two-layer ReLU encoder per entity and a linear
//! classifier over the concatenated entity features, yielding a pseudo-label
//! distribution per item. The concept network scores ground atoms from
//! entity features: unary predicates with an affine-sigmoid scorer, binary
//! predicates with a bilinear-sigmoid scorer, value-typed predicates with an
//! affine-softmax distribution over the value domain.
//!
//! Backward passes consume a recorded forward tape (task network) or
//! recompute the shallow scorer internals (concept network). Parameter
//! containers carry a version counter; a tape recorded under a different
//! version is stale and rejected.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::ground::{GroundAtom, ValueDomains};
use crate::logic::{PredicateDecl, PredicateKind, RuleSet};
use crate::mln::sigmoid;

pub type FeatureVector = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("tape recorded at version {tape_version} but parameters are at {state_version}")]
    StaleTape {
        state_version: u64,
        tape_version: u64,
    },
    #[error("no concept scorer for predicate {name}")]
    UntrainedPredicate { name: String },
    #[error("no feature for constant c{constant} (have {count})")]
    MissingFeature { constant: usize, count: usize },
    #[error("value {value} outside the domain of {predicate}")]
    ValueOutOfDomain { predicate: String, value: i64 },
    #[error("predicate {predicate} has an unsupported shape for concept scoring")]
    UnsupportedShape { predicate: String },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("distribution entry {value} is negative")]
    NegativeProbability { value: f64 },
}

pub type Result<T> = std::result::Result<T, NeuralError>;

/// Soft prediction over an ordered label space.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub distribution: Vec<f64>,
    /// Smallest index attaining the maximum probability.
    pub hard: usize,
}

impl PseudoLabel {
    pub fn from_distribution(distribution: Vec<f64>) -> Result<Self> {
        if distribution.is_empty() {
            return Err(NeuralError::EmptyDistribution);
        }
        let mut sum = 0.0;
        for &p in &distribution {
            if !p.is_finite() || p < 0.0 {
                return Err(NeuralError::NegativeProbability { value: p });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NeuralError::NonFinite {
                what: format!("distribution sum {sum}"),
            });
        }
        let hard = argmax(&distribution);
        Ok(PseudoLabel { distribution, hard })
    }
}

/// Smallest index of the maximum entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// y = w^T v for w laid out row-major [rows][cols].
fn matvec_t(w: &[Vec<f64>], v: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (row, &vi) in w.iter().zip(v) {
        for (slot, &wij) in out.iter_mut().zip(row) {
            *slot += vi * wij;
        }
    }
    out
}

fn uniform_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, fan_in: usize) -> Vec<Vec<f64>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-bound..=bound)).collect())
        .collect()
}

fn uniform_vec(rng: &mut ChaCha12Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Task-network parameters (theta-1).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub wc: Vec<Vec<f64>>,
    pub bc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskNetworkState {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub entities_per_item: usize,
    pub label_count: usize,
    params: TaskParams,
    version: u64,
}

/// Gradients with the same shapes as [`TaskParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradients {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub wc: Vec<Vec<f64>>,
    pub bc: Vec<f64>,
}

impl TaskGradients {
    pub fn zeros(state: &TaskNetworkState) -> Self {
        TaskGradients {
            w1: vec![vec![0.0; state.input_dim]; state.hidden_dim],
            b1: vec![0.0; state.hidden_dim],
            w2: vec![vec![0.0; state.hidden_dim]; state.feature_dim],
            b2: vec![0.0; state.feature_dim],
            wc: vec![vec![0.0; state.entities_per_item * state.feature_dim]; state.label_count],
            bc: vec![0.0; state.label_count],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.w1.iter_mut().chain(&mut self.w2).chain(&mut self.wc) {
            for v in row {
                *v *= factor;
            }
        }
        for v in self.b1.iter_mut().chain(&mut self.b2).chain(&mut self.bc) {
            *v *= factor;
        }
    }

    pub fn add(&mut self, other: &TaskGradients) {
        let pairs = |a: &mut Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (va, vb) in ra.iter_mut().zip(rb) {
                    *va += vb;
                }
            }
        };
        pairs(&mut self.w1, &other.w1);
        pairs(&mut self.w2, &other.w2);
        pairs(&mut self.wc, &other.wc);
        for (va, vb) in self.b1.iter_mut().zip(&other.b1) {
            *va += vb;
        }
        for (va, vb) in self.b2.iter_mut().zip(&other.b2) {
            *va += vb;
        }
        for (va, vb) in self.bc.iter_mut().zip(&other.bc) {
            *va += vb;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.w2)
            .chain(&self.wc)
            .flatten()
            .chain(&self.b1)
            .chain(&self.b2)
            .chain(&self.bc)
            .all(|v| v.is_finite())
    }
}

/// Recorded forward pass used by [`TaskNetworkState::backward`].
#[derive(Debug, Clone)]
pub struct TaskTape {
    version: u64,
    inputs: Vec<Vec<Vec<f64>>>,
    hidden: Vec<Vec<Vec<f64>>>,
    features: Vec<Vec<Vec<f64>>>,
    probs: Vec<Vec<f64>>,
}

/// Forward output: one pseudo-label per item and one feature vector per
/// entity of each item.
#[derive(Debug, Clone)]
pub struct TaskForward {
    pub labels: Vec<PseudoLabel>,
    pub features: Vec<Vec<FeatureVector>>,
    pub tape: TaskTape,
}

/// Per-item adjoints fed into the backward pass. Missing parts are zero.
#[derive(Debug, Clone, Default)]
pub struct TaskAdjoints {
    /// d objective / d probability, per item and label.
    pub d_probs: Option<Vec<Vec<f64>>>,
    /// d objective / d logit, per item and label (added after the softmax
    /// adjoint conversion).
    pub d_logits: Option<Vec<Vec<f64>>>,
    /// d objective / d feature, per item, entity, and coordinate.
    pub d_features: Option<Vec<Vec<Vec<f64>>>>,
}

impl TaskNetworkState {
    /// All parameters drawn uniformly in +-1/sqrt(fan_in) from a seeded
    /// stream; the draw order is fixed (w1 rows, b1, w2 rows, b2, wc rows,
    /// bc).
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        entities_per_item: usize,
        label_count: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let concat = entities_per_item * feature_dim;
        let params = TaskParams {
            w1: uniform_matrix(&mut rng, hidden_dim, input_dim, input_dim),
            b1: uniform_vec(&mut rng, hidden_dim, input_dim),
            w2: uniform_matrix(&mut rng, feature_dim, hidden_dim, hidden_dim),
            b2: uniform_vec(&mut rng, feature_dim, hidden_dim),
            wc: uniform_matrix(&mut rng, label_count, concat, concat),
            bc: uniform_vec(&mut rng, label_count, concat),
        };
        TaskNetworkState {
            input_dim,
            hidden_dim,
            feature_dim,
            entities_per_item,
            label_count,
            params,
            version: 0,
        }
    }

    pub fn params(&self) -> &TaskParams {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutates parameters through `f`, invalidating existing tapes.
    pub fn apply(&mut self, f: impl FnOnce(&mut TaskParams)) {
        f(&mut self.params);
        self.version += 1;
    }

    /// Gradient-ascent step: params += lr * grads.
    pub fn step(&mut self, grads: &TaskGradients, lr: f64) {
        let p = &mut self.params;
        let mats = [
            (&mut p.w1, &grads.w1),
            (&mut p.w2, &grads.w2),
            (&mut p.wc, &grads.wc),
        ];
        for (m, g) in mats {
            for (row, grow) in m.iter_mut().zip(g) {
                for (v, gv) in row.iter_mut().zip(grow) {
                    *v += lr * gv;
                }
            }
        }
        let vecs = [
            (&mut p.b1, &grads.b1),
            (&mut p.b2, &grads.b2),
            (&mut p.bc, &grads.bc),
        ];
        for (b, g) in vecs {
            for (v, gv) in b.iter_mut().zip(g) {
                *v += lr * gv;
            }
        }
        self.version += 1;
    }

    /// Forward pass over a batch of items; each item supplies
    /// `entities_per_item` input vectors of length `input_dim`.
    pub fn forward(&self, batch: &[Vec<Vec<f64>>]) -> Result<TaskForward> {
        let mut labels = Vec::with_capacity(batch.len());
        let mut features = Vec::with_capacity(batch.len());
        let mut tape = TaskTape {
            version: self.version,
            inputs: Vec::with_capacity(batch.len()),
            hidden: Vec::with_capacity(batch.len()),
            features: Vec::with_capacity(batch.len()),
            probs: Vec::with_capacity(batch.len()),
        };
        for item in batch {
            if item.len() != self.entities_per_item {
                return Err(NeuralError::ShapeMismatch {
                    what: "entities per item".into(),
                    expected: self.entities_per_item,
                    got: item.len(),
                });
            }
            let mut item_hidden = Vec::with_capacity(item.len());
            let mut item_features = Vec::with_capacity(item.len());
            let mut concat = Vec::with_capacity(self.entities_per_item * self.feature_dim);
            for input in item {
                if input.len() != self.input_dim {
                    return Err(NeuralError::ShapeMismatch {
                        what: "input length".into(),
                        expected: self.input_dim,
                        got: input.len(),
                    });
                }
                let mut h = matvec(&self.params.w1, input);
                for (v, b) in h.iter_mut().zip(&self.params.b1) {
                    *v = (*v + b).max(0.0);
                }
                let mut e = matvec(&self.params.w2, &h);
                for (v, b) in e.iter_mut().zip(&self.params.b2) {
                    *v = (*v + b).max(0.0);
                }
                concat.extend_from_slice(&e);
                item_hidden.push(h);
                item_features.push(e);
            }
            let mut logits = matvec(&self.params.wc, &concat);
            for (v, b) in logits.iter_mut().zip(&self.params.bc) {
                *v += b;
            }
            let probs = softmax(&logits);
            if probs.iter().any(|p| !p.is_finite()) {
                return Err(NeuralError::NonFinite {
                    what: "pseudo-label distribution".into(),
                });
            }
            labels.push(PseudoLabel {
                hard: argmax(&probs),
                distribution: probs.clone(),
            });
            tape.inputs.push(item.clone());
            tape.hidden.push(item_hidden);
            tape.features.push(item_features.clone());
            tape.probs.push(probs);
            features.push(item_features);
        }
        Ok(TaskForward {
            labels,
            features,
            tape,
        })
    }

    /// Backward pass over a recorded tape, returning gradients for every
    /// parameter. The tape must come from a forward pass at the current
    /// parameter version.
    pub fn backward(&self, tape: &TaskTape, adjoints: &TaskAdjoints) -> Result<TaskGradients> {
        if tape.version != self.version {
            return Err(NeuralError::StaleTape {
                state_version: self.version,
                tape_version: tape.version,
            });
        }
        let items = tape.inputs.len();
        let check_len = |what: &str, got: usize| -> Result<()> {
            if got != items {
                return Err(NeuralError::ShapeMismatch {
                    what: what.into(),
                    expected: items,
                    got,
                });
            }
            Ok(())
        };
        if let Some(d) = &adjoints.d_probs {
            check_len("d_probs items", d.len())?;
        }
        if let Some(d) = &adjoints.d_logits {
            check_len("d_logits items", d.len())?;
        }
        if let Some(d) = &adjoints.d_features {
            check_len("d_features items", d.len())?;
        }

        let mut grads = TaskGradients::zeros(self);
        for item in 0..items {
            // Softmax adjoint: dz_j = p_j (dp_j - sum_k dp_k p_k).
            let mut d_logits = vec![0.0; self.label_count];
            if let Some(dp) = adjoints.d_probs.as_ref().map(|d| &d[item]) {
                let p = &tape.probs[item];
                let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                for ((slot, &pi), &dpi) in d_logits.iter_mut().zip(p).zip(dp) {
                    *slot += pi * (dpi - dot);
                }
            }
            if let Some(dz) = adjoints.d_logits.as_ref().map(|d| &d[item]) {
                for (slot, &v) in d_logits.iter_mut().zip(dz) {
                    *slot += v;
                }
            }
            let concat: Vec<f64> = tape.features[item].concat();
            for (grow, &dz) in grads.wc.iter_mut().zip(&d_logits) {
                for (g, &x) in grow.iter_mut().zip(&concat) {
                    *g += dz * x;
                }
            }
            for (g, &dz) in grads.bc.iter_mut().zip(&d_logits) {
                *g += dz;
            }
            let d_concat = matvec_t(
                &self.params.wc,
                &d_logits,
                self.entities_per_item * self.feature_dim,
            );

            for entity in 0..self.entities_per_item {
                let e = &tape.features[item][entity];
                let h = &tape.hidden[item][entity];
                let x = &tape.inputs[item][entity];
                let mut d_e: Vec<f64> =
                    d_concat[entity * self.feature_dim..(entity + 1) * self.feature_dim].to_vec();
                if let Some(df) = adjoints.d_features.as_ref() {
                    for (slot, &v) in d_e.iter_mut().zip(&df[item][entity]) {
                        *slot += v;
                    }
                }
                // ReLU: pass adjoints only where the activation is positive.
                for (slot, &ei) in d_e.iter_mut().zip(e) {
                    if ei <= 0.0 {
                        *slot = 0.0;
                    }
                }
                for (grow, &de) in grads.w2.iter_mut().zip(&d_e) {
                    for (g, &hi) in grow.iter_mut().zip(h) {
                        *g += de * hi;
                    }
                }
                for (g, &de) in grads.b2.iter_mut().zip(&d_e) {
                    *g += de;
                }
                let mut d_h = matvec_t(&self.params.w2, &d_e, self.hidden_dim);
                for (slot, &hi) in d_h.iter_mut().zip(h) {
                    if hi <= 0.0 {
                        *slot = 0.0;
                    }
                }
                for (grow, &dh) in grads.w1.iter_mut().zip(&d_h) {
                    for (g, &xi) in grow.iter_mut().zip(x) {
                        *g += dh * xi;
                    }
                }
                for (g, &dh) in grads.b1.iter_mut().zip(&d_h) {
                    *g += dh;
                }
            }
        }
        Ok(grads)
    }
}

/// One concept scorer per latent predicate.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    /// sigma(w . e + b)
    Unary { w: Vec<f64>, b: f64 },
    /// sigma(e1^T M e2 + b)
    Binary { m: Vec<Vec<f64>>, b: f64 },
    /// softmax(W e + b) over the inclusive value domain [lo, hi]
    Value {
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
        lo: i64,
        hi: i64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptNetworkState {
    pub feature_dim: usize,
    scorers: BTreeMap<String, Scorer>,
    version: u64,
}

/// Gradients with the same shapes as the scorer parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptGradients {
    pub per_scorer: BTreeMap<String, Scorer>,
}

impl ConceptGradients {
    pub fn zeros(state: &ConceptNetworkState) -> Self {
        let per_scorer = state
            .scorers
            .iter()
            .map(|(name, s)| {
                let zero = match s {
                    Scorer::Unary { w, .. } => Scorer::Unary {
                        w: vec![0.0; w.len()],
                        b: 0.0,
                    },
                    Scorer::Binary { m, .. } => Scorer::Binary {
                        m: vec![vec![0.0; m[0].len()]; m.len()],
                        b: 0.0,
                    },
                    Scorer::Value { w, b, lo, hi } => Scorer::Value {
                        w: vec![vec![0.0; w[0].len()]; w.len()],
                        b: vec![0.0; b.len()],
                        lo: *lo,
                        hi: *hi,
                    },
                };
                (name.clone(), zero)
            })
            .collect();
        ConceptGradients { per_scorer }
    }

    pub fn scale(&mut self, factor: f64) {
        for scorer in self.per_scorer.values_mut() {
            match scorer {
                Scorer::Unary { w, b } => {
                    for v in w {
                        *v *= factor;
                    }
                    *b *= factor;
                }
                Scorer::Binary { m, b } => {
                    for row in m {
                        for v in row {
                            *v *= factor;
                        }
                    }
                    *b *= factor;
                }
                Scorer::Value { w, b, .. } => {
                    for row in w {
                        for v in row {
                            *v *= factor;
                        }
                    }
                    for v in b {
                        *v *= factor;
                    }
                }
            }
        }
    }

    pub fn add(&mut self, other: &ConceptGradients) {
        for (name, g) in &other.per_scorer {
            match (self.per_scorer.get_mut(name), g) {
                (Some(Scorer::Unary { w, b }), Scorer::Unary { w: gw, b: gb }) => {
                    for (v, gv) in w.iter_mut().zip(gw) {
                        *v += gv;
                    }
                    *b += gb;
                }
                (Some(Scorer::Binary { m, b }), Scorer::Binary { m: gm, b: gb }) => {
                    for (row, grow) in m.iter_mut().zip(gm) {
                        for (v, gv) in row.iter_mut().zip(grow) {
                            *v += gv;
                        }
                    }
                    *b += gb;
                }
                (Some(Scorer::Value { w, b, .. }), Scorer::Value { w: gw, b: gb, .. }) => {
                    for (row, grow) in w.iter_mut().zip(gw) {
                        for (v, gv) in row.iter_mut().zip(grow) {
                            *v += gv;
                        }
                    }
                    for (v, gv) in b.iter_mut().zip(gb) {
                        *v += gv;
                    }
                }
                _ => {}
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.per_scorer.values().all(|s| match s {
            Scorer::Unary { w, b } => w.iter().all(|v| v.is_finite()) && b.is_finite(),
            Scorer::Binary { m, b } => m.iter().flatten().all(|v| v.is_finite()) && b.is_finite(),
            Scorer::Value { w, b, .. } => {
                w.iter().flatten().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())
            }
        })
    }
}

impl ConceptNetworkState {
    /// Builds one scorer per latent predicate in `ruleset`. Value-typed
    /// predicates need a domain in `domains`. Parameters are drawn uniformly
    /// in +-1/sqrt(fan_in) in declaration order.
    pub fn init(
        ruleset: &RuleSet,
        domains: &ValueDomains,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut scorers = BTreeMap::new();
        for decl in &ruleset.predicates {
            if decl.kind != PredicateKind::Latent {
                continue;
            }
            let scorer = Self::init_scorer(decl, domains, feature_dim, &mut rng)?;
            scorers.insert(decl.name.clone(), scorer);
        }
        Ok(ConceptNetworkState {
            feature_dim,
            scorers,
            version: 0,
        })
    }

    fn init_scorer(
        decl: &PredicateDecl,
        domains: &ValueDomains,
        feature_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Scorer> {
        match (decl.entity_arity, decl.value_arity) {
            (1, 0) => Ok(Scorer::Unary {
                w: uniform_vec(rng, feature_dim, feature_dim),
                b: uniform_vec(rng, 1, feature_dim)[0],
            }),
            (2, 0) => Ok(Scorer::Binary {
                m: uniform_matrix(rng, feature_dim, feature_dim, feature_dim),
                b: uniform_vec(rng, 1, feature_dim)[0],
            }),
            (1, 1) => {
                let (lo, hi) =
                    domains
                        .get(&decl.name)
                        .ok_or_else(|| NeuralError::UnsupportedShape {
                            predicate: decl.name.clone(),
                        })?;
                let n = (hi - lo + 1).max(0) as usize;
                Ok(Scorer::Value {
                    w: uniform_matrix(rng, n, feature_dim, feature_dim),
                    b: uniform_vec(rng, n, feature_dim),
                    lo,
                    hi,
                })
            }
            _ => Err(NeuralError::UnsupportedShape {
                predicate: decl.name.clone(),
            }),
        }
    }

    pub fn scorer(&self, predicate: &str) -> Option<&Scorer> {
        self.scorers.get(predicate)
    }

    pub fn scorer_names(&self) -> impl Iterator<Item = &str> {
        self.scorers.keys().map(String::as_str)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn apply(&mut self, f: impl FnOnce(&mut BTreeMap<String, Scorer>)) {
        f(&mut self.scorers);
        self.version += 1;
    }

    /// Gradient-ascent step: params += lr * grads.
    pub fn step(&mut self, grads: &ConceptGradients, lr: f64) {
        let mut scaled = grads.clone();
        scaled.scale(lr);
        let mut merged = ConceptGradients {
            per_scorer: std::mem::take(&mut self.scorers),
        };
        merged.add(&scaled);
        self.scorers = merged.per_scorer;
        self.version += 1;
    }

    fn feature<'a>(&self, features: &'a [FeatureVector], constant: usize) -> Result<&'a [f64]> {
        let f = features
            .get(constant)
            .ok_or(NeuralError::MissingFeature {
                constant,
                count: features.len(),
            })?;
        if f.len() != self.feature_dim {
            return Err(NeuralError::ShapeMismatch {
                what: "feature length".into(),
                expected: self.feature_dim,
                got: f.len(),
            });
        }
        Ok(f)
    }

    /// Full softmax distribution of a value-typed predicate at one feature
    /// vector, indexed from the domain's lower bound.
    pub fn value_distribution(&self, predicate: &str, feature: &[f64]) -> Result<Vec<f64>> {
        match self.scorers.get(predicate) {
            Some(Scorer::Value { w, b, .. }) => {
                let mut logits = matvec(w, feature);
                for (z, bi) in logits.iter_mut().zip(b) {
                    *z += bi;
                }
                Ok(softmax(&logits))
            }
            Some(_) => Err(NeuralError::UnsupportedShape {
                predicate: predicate.into(),
            }),
            None => Err(NeuralError::UntrainedPredicate {
                name: predicate.into(),
            }),
        }
    }

    /// Concept score of one ground atom given per-constant features: the
    /// probability that the atom holds.
    pub fn score(&self, atom: &GroundAtom, features: &[FeatureVector]) -> Result<f64> {
        let scorer =
            self.scorers
                .get(&atom.predicate)
                .ok_or_else(|| NeuralError::UntrainedPredicate {
                    name: atom.predicate.clone(),
                })?;
        match scorer {
            Scorer::Unary { w, b } => {
                let e = self.feature(features, atom.entity_args[0])?;
                Ok(sigmoid(w.iter().zip(e).map(|(a, x)| a * x).sum::<f64>() + b))
            }
            Scorer::Binary { m, b } => {
                let e1 = self.feature(features, atom.entity_args[0])?;
                let e2 = self.feature(features, atom.entity_args[1])?;
                let mut z = *b;
                for (row, &x1) in m.iter().zip(e1) {
                    z += x1 * row.iter().zip(e2).map(|(a, x2)| a * x2).sum::<f64>();
                }
                Ok(sigmoid(z))
            }
            Scorer::Value { lo, hi, .. } => {
                let value = atom.value_args[0];
                if value < *lo || value > *hi {
                    return Err(NeuralError::ValueOutOfDomain {
                        predicate: atom.predicate.clone(),
                        value,
                    });
                }
                let e = self.feature(features, atom.entity_args[0])?;
                let dist = self.value_distribution(&atom.predicate, e)?;
                Ok(dist[(value - lo) as usize])
            }
        }
    }

    /// Accumulates parameter and feature adjoints for one atom's score. The
    /// scorer internals are recomputed, so no tape is needed.
    pub fn backward_atom(
        &self,
        atom: &GroundAtom,
        features: &[FeatureVector],
        d_score: f64,
        grads: &mut ConceptGradients,
        d_features: &mut [Vec<f64>],
    ) -> Result<()> {
        let scorer =
            self.scorers
                .get(&atom.predicate)
                .ok_or_else(|| NeuralError::UntrainedPredicate {
                    name: atom.predicate.clone(),
                })?;
        match scorer {
            Scorer::Unary { w, b } => {
                let c = atom.entity_args[0];
                let e = self.feature(features, c)?.to_vec();
                let s = sigmoid(w.iter().zip(&e).map(|(a, x)| a * x).sum::<f64>() + b);
                let dz = d_score * s * (1.0 - s);
                if let Some(Scorer::Unary { w: gw, b: gb }) = grads.per_scorer.get_mut(&atom.predicate)
                {
                    for (g, &x) in gw.iter_mut().zip(&e) {
                        *g += dz * x;
                    }
                    *gb += dz;
                }
                for (slot, &wi) in d_features[c].iter_mut().zip(w) {
                    *slot += dz * wi;
                }
            }
            Scorer::Binary { m, b } => {
                let (c1, c2) = (atom.entity_args[0], atom.entity_args[1]);
                let e1 = self.feature(features, c1)?.to_vec();
                let e2 = self.feature(features, c2)?.to_vec();
                let mut z = *b;
                for (row, &x1) in m.iter().zip(&e1) {
                    z += x1 * row.iter().zip(&e2).map(|(a, x2)| a * x2).sum::<f64>();
                }
                let s = sigmoid(z);
                let dz = d_score * s * (1.0 - s);
                if let Some(Scorer::Binary { m: gm, b: gb }) = grads.per_scorer.get_mut(&atom.predicate)
                {
                    for (grow, &x1) in gm.iter_mut().zip(&e1) {
                        for (g, &x2) in grow.iter_mut().zip(&e2) {
                            *g += dz * x1 * x2;
                        }
                    }
                    *gb += dz;
                }
                for (i, slot) in d_features[c1].iter_mut().enumerate() {
                    *slot += dz * m[i].iter().zip(&e2).map(|(a, x2)| a * x2).sum::<f64>();
                }
                for (j, slot) in d_features[c2].iter_mut().enumerate() {
                    *slot += dz * m.iter().zip(&e1).map(|(row, &x1)| x1 * row[j]).sum::<f64>();
                }
            }
            Scorer::Value { w, b, lo, hi } => {
                let value = atom.value_args[0];
                if value < *lo || value > *hi {
                    return Err(NeuralError::ValueOutOfDomain {
                        predicate: atom.predicate.clone(),
                        value,
                    });
                }
                let c = atom.entity_args[0];
                let e = self.feature(features, c)?.to_vec();
                let mut logits = matvec(w, &e);
                for (z, bi) in logits.iter_mut().zip(b) {
                    *z += bi;
                }
                let dist = softmax(&logits);
                let d = (value - lo) as usize;
                // d q_d / d z_j = q_d (delta_dj - q_j)
                let dz: Vec<f64> = (0..dist.len())
                    .map(|j| {
                        d_score * dist[d] * (if j == d { 1.0 - dist[j] } else { -dist[j] })
                    })
                    .collect();
                if let Some(Scorer::Value { w: gw, b: gb, .. }) =
                    grads.per_scorer.get_mut(&atom.predicate)
                {
                    for (grow, &dzj) in gw.iter_mut().zip(&dz) {
                        for (g, &x) in grow.iter_mut().zip(&e) {
                            *g += dzj * x;
                        }
                    }
                    for (g, &dzj) in gb.iter_mut().zip(&dz) {
                        *g += dzj;
                    }
                }
                let df = matvec_t(w, &dz, self.feature_dim);
                for (slot, v) in d_features[c].iter_mut().zip(df) {
                    *slot += v;
                }
            }
        }
        Ok(())
    }
}

/// Sign convention of the concept cross-entropy coupling term. The source
/// objective prints L_cro = sum Q log y_hat and then subtracts it, which at
/// alpha = gamma cancels the task term on the label head exactly; the
/// surrounding prose says the coupling exists to pass supervised information
/// through, which needs the standard loss -sum Q log y_hat instead. Both
/// readings are kept selectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossEntropyForm {
    /// sum over atoms of Q * log y_hat, as printed in the source objective.
    PaperLiteral,
    /// Standard cross-entropy loss -sum over atoms of Q * log y_hat.
    Conventional,
}

const CLAMP: f64 = 1e-12;

/// Cross-entropy coupling over (Q, y_hat) pairs; logs are clamped at 1e-12.
pub fn concept_cross_entropy(pairs: &[(f64, f64)], form: CrossEntropyForm) -> f64 {
    let literal: f64 = pairs.iter().map(|&(q, y)| q * y.max(CLAMP).ln()).sum();
    match form {
        CrossEntropyForm::PaperLiteral => literal,
        CrossEntropyForm::Conventional => -literal,
    }
}

/// Value and per-pair gradients (d/dQ, d/dy_hat) of [`concept_cross_entropy`].
pub fn concept_cross_entropy_with_grad(
    pairs: &[(f64, f64)],
    form: CrossEntropyForm,
) -> (f64, Vec<(f64, f64)>) {
    let value = concept_cross_entropy(pairs, form);
    let sign = match form {
        CrossEntropyForm::PaperLiteral => 1.0,
        CrossEntropyForm::Conventional => -1.0,
    };
    let grads = pairs
        .iter()
        .map(|&(q, y)| {
            let dy = if y > CLAMP { q / y } else { 0.0 };
            (sign * y.max(CLAMP).ln(), sign * dy)
        })
        .collect();
    (value, grads)
}
