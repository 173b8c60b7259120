//! Variational EM driver.
//!
//! Each round runs `e_passes` full-batch gradient-ascent steps on the task
//! and concept networks against the blended objective
//! `alpha * o_task + beta * o_logic - gamma * l_cro`, with backtracking so
//! the objective never decreases within a round, then an M-step on the rule
//! weights and a label-revision sweep that feeds the next round. Checkpoints
//! are byte-deterministic; a divergence guard aborts with the last good one.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bilevel::{
    attach_levels, e_step_objective, label_block_conditional, o_logic_expected, revise_labels,
    BiLevelError, BiLevelModel, HighLevelNode, SlotRef, TradeOff,
};
use crate::ground::{
    ground_rules, select_relevant_rules, ConstantTable, GroundAtom, GroundError, LabelRef,
    MlnGraph, ValueDomains,
};
use crate::infer::{
    explain_transductive, infer_inductive, Explanation, HeadValue, InductiveResult, InferError,
};
use crate::logic::{parse_rules, LogicError, PredicateKind, RuleSet};
use crate::mln::{m_step_batch, AtomAssignment, MlnError, WeightVector};
use crate::neural::{
    concept_cross_entropy_with_grad, ConceptGradients, ConceptNetworkState, CrossEntropyForm,
    FeatureVector, NeuralError, PseudoLabel, TaskAdjoints, TaskGradients, TaskNetworkState,
};
use crate::tasks::{accuracy, DataItem, Dataset, LabelSpace, Metrics, Split, TaskError, TaskLabel};

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {msg}")]
    Config { msg: String },
    #[error("train split is empty")]
    EmptyTrainSet,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("label {label} is outside the rule-derived label space")]
    LabelUnknown { label: String },
    #[error("no observed head predicate to bind task labels to")]
    NoLabelPredicate,
    #[error("rule hash mismatch: checkpoint was trained on a different ruleset")]
    RuleMismatch,
    #[error("inductive evaluation needs a rewritten ruleset")]
    MissingRules,
    #[error("concept scorer for {predicate} is missing from the checkpoint")]
    ScorerMissing { predicate: String },
    #[error("bad checkpoint: {msg}")]
    BadCheckpoint { msg: String },
    #[error("training diverged at round {round}; last good checkpoint attached")]
    Diverged {
        round: usize,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error(transparent)]
    Mln(#[from] MlnError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    BiLevel(#[from] BiLevelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Infer(#[from] InferError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub em_rounds: usize,
    pub e_passes: usize,
    pub m_steps: usize,
    pub lr_theta1: f64,
    pub lr_theta2: f64,
    pub lr_w: f64,
    pub batch: usize,
    pub seed: u64,
    pub grounding_cap: usize,
    pub l_cro_form: CrossEntropyForm,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            em_rounds: 30,
            e_passes: 5,
            m_steps: 10,
            lr_theta1: 1e-3,
            lr_theta2: 1e-3,
            lr_w: 0.05,
            batch: 64,
            seed: 0,
            grounding_cap: 200_000,
            l_cro_form: CrossEntropyForm::PaperLiteral,
            hidden_dim: 64,
            feature_dim: 16,
        }
    }
}

impl TrainConfig {
    /// Zero learning rates are legal (they make training a no-op), so rates
    /// are checked for finiteness and sign only.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| -> Result<()> {
            Err(TrainError::Config { msg: msg.into() })
        };
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("lr_theta1", self.lr_theta1),
            ("lr_theta2", self.lr_theta2),
            ("lr_w", self.lr_w),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(&format!("{name} must be a finite non-negative rate"));
            }
        }
        if self.em_rounds == 0 {
            return fail("em_rounds must be at least 1");
        }
        if self.e_passes == 0 {
            return fail("e_passes must be at least 1");
        }
        if self.batch == 0 {
            return fail("batch must be at least 1");
        }
        if self.grounding_cap == 0 {
            return fail("grounding_cap must be at least 1");
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return fail("network dimensions must be at least 1");
        }
        Ok(())
    }
}

/// How task labels attach to ground atoms: one value-typed predicate whose
/// domain enumerates the labels, or one class predicate per label.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelBinding {
    Value {
        predicate: String,
        lo: i64,
        hi: i64,
    },
    Classes { predicates: Vec<String> },
}

/// Reads the label binding off the ruleset: the observed predicates that
/// occur in rule heads, in declaration order.
pub fn derive_label_binding(ruleset: &RuleSet, domains: &ValueDomains) -> Result<LabelBinding> {
    let in_head = |name: &str| {
        ruleset
            .rules
            .iter()
            .any(|r| r.head.iter().any(|a| a.predicate == name))
    };
    let named: Vec<_> = ruleset
        .predicates
        .iter()
        .filter(|p| p.kind == PredicateKind::Observed && in_head(&p.name))
        .collect();
    if named.is_empty() {
        return Err(TrainError::NoLabelPredicate);
    }
    if named.len() == 1 && named[0].entity_arity == 0 && named[0].value_arity == 1 {
        let name = named[0].name.clone();
        let (lo, hi) = domains.get(&name).ok_or_else(|| TrainError::Config {
            msg: format!("predicate {name} has no value domain"),
        })?;
        return Ok(LabelBinding::Value {
            predicate: name,
            lo,
            hi,
        });
    }
    if named
        .iter()
        .all(|p| p.entity_arity == 1 && p.value_arity == 0)
    {
        return Ok(LabelBinding::Classes {
            predicates: named.iter().map(|p| p.name.clone()).collect(),
        });
    }
    Err(TrainError::Config {
        msg: "observed head predicates do not form a value or class label binding".into(),
    })
}

impl LabelBinding {
    pub fn label_space(&self) -> LabelSpace {
        match self {
            LabelBinding::Value { lo, hi, .. } => LabelSpace::Sums { lo: *lo, hi: *hi },
            LabelBinding::Classes { predicates } => LabelSpace::Classes(predicates.clone()),
        }
    }

    fn slots(&self) -> Vec<SlotRef> {
        match self {
            LabelBinding::Value { predicate, lo, hi } => (*lo..=*hi)
                .map(|value| SlotRef::Value {
                    predicate: predicate.clone(),
                    value,
                })
                .collect(),
            LabelBinding::Classes { predicates } => predicates
                .iter()
                .map(|p| SlotRef::Class {
                    predicate: p.clone(),
                })
                .collect(),
        }
    }

    fn node_constants(&self) -> Vec<usize> {
        match self {
            LabelBinding::Value { .. } => Vec::new(),
            LabelBinding::Classes { .. } => vec![0],
        }
    }

    fn selection_refs(&self) -> Vec<LabelRef> {
        match self {
            LabelBinding::Value { predicate, .. } => {
                vec![LabelRef::Predicate(predicate.clone())]
            }
            LabelBinding::Classes { predicates } => predicates
                .iter()
                .map(|p| LabelRef::Predicate(p.clone()))
                .collect(),
        }
    }

    fn is_label_atom(&self, atom: &GroundAtom) -> bool {
        match self {
            LabelBinding::Value { predicate, .. } => atom.predicate == *predicate,
            LabelBinding::Classes { predicates } => predicates.contains(&atom.predicate),
        }
    }

    /// Whether a label atom is true under the item's label index.
    fn atom_truth(&self, atom: &GroundAtom, label_index: usize) -> bool {
        match self {
            LabelBinding::Value { lo, .. } => atom.value_args[0] == lo + label_index as i64,
            LabelBinding::Classes { predicates } => atom.predicate == predicates[label_index],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub o_task: f64,
    pub o_logic: f64,
    pub l_cro: f64,
    pub objective: f64,
    pub train_acc: f64,
    /// Mean bridge potential over items (0 when beta is 0).
    pub mean_bridge: f64,
    /// E-step objective at the start of each pass, in pass order.
    pub pass_objectives: Vec<f64>,
}

/// Line-delimited diagnostics, one record per round.
pub fn render_diagnostics(rounds: &[RoundDiagnostics]) -> String {
    let mut out = String::new();
    for r in rounds {
        out.push_str(&format!(
            "round={} o_task={:.6} o_logic={:.6} l_cro={:.6} objective={:.6} train_acc={:.4} mean_bridge={:.6}\n",
            r.round, r.o_task, r.o_logic, r.l_cro, r.objective, r.train_acc, r.mean_bridge
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub round: usize,
    pub config: TrainConfig,
    /// Canonical rule source; parseable back into the training ruleset.
    pub ruleset_text: String,
    pub rules_hash: [u8; 32],
    pub domains: ValueDomains,
    pub label_space: LabelSpace,
    pub task_net: TaskNetworkState,
    pub concept_net: ConceptNetworkState,
    pub weights: WeightVector,
}

pub fn rules_digest(text: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.finalize().into()
}

struct ItemState {
    model: BiLevelModel,
    assignment: AtomAssignment,
    latent_atoms: Vec<usize>,
    target: PseudoLabel,
    label_index: usize,
}

fn one_hot(len: usize, index: usize) -> PseudoLabel {
    let mut distribution = vec![0.0; len];
    distribution[index] = 1.0;
    PseudoLabel {
        distribution,
        hard: index,
    }
}

fn uniform_label(len: usize) -> PseudoLabel {
    PseudoLabel {
        distribution: vec![1.0 / len as f64; len],
        hard: 0,
    }
}

fn latent_atom_ids(graph: &MlnGraph, ruleset: &RuleSet) -> Vec<usize> {
    graph
        .atoms
        .iter()
        .enumerate()
        .filter(|(_, atom)| {
            ruleset
                .predicate(&atom.predicate)
                .map(|p| p.kind == PredicateKind::Latent)
                .unwrap_or(false)
        })
        .map(|(id, _)| id)
        .collect()
}

/// Grounds the label-relevant rules for one item, pins the label atoms when
/// a label index is given, and attaches the high-level node.
fn build_item_state(
    item_id: usize,
    ruleset: &RuleSet,
    binding: &LabelBinding,
    space: &LabelSpace,
    domains: &ValueDomains,
    entities: usize,
    weights: &WeightVector,
    cap: usize,
    label_index: usize,
) -> Result<ItemState> {
    let selected = select_relevant_rules(ruleset, &binding.selection_refs());
    let mut graph = ground_rules(&selected, &ConstantTable::of_size(entities), domains, cap)?;
    // Selection preserves order but drops rules, so ground-rule indices must
    // be remapped onto the full ruleset the shared weight vector indexes.
    let global: Vec<usize> = selected
        .rules
        .iter()
        .map(|r| ruleset.rules.iter().position(|g| g.id == r.id).unwrap())
        .collect();
    for g in &mut graph.ground_rules {
        g.rule_index = global[g.rule_index];
    }
    for atom in &mut graph.atoms {
        if binding.is_label_atom(atom) {
            let truth = binding.atom_truth(atom, label_index);
            atom.observed = Some(truth);
            atom.score = if truth { 1.0 } else { 0.0 };
        }
    }
    let latent_atoms = latent_atom_ids(&graph, ruleset);
    let node = HighLevelNode {
        id: format!("item{item_id}"),
        constants: binding.node_constants(),
        slots: binding.slots(),
        label: uniform_label(space.len()),
    };
    let model = attach_levels(vec![node], graph, weights.clone())?;
    let assignment = AtomAssignment::from_graph(&model.mln);
    Ok(ItemState {
        model,
        assignment,
        latent_atoms,
        target: one_hot(space.len(), label_index),
        label_index,
    })
}

#[derive(Debug, Default)]
struct EpochStats {
    o_task: f64,
    o_logic: f64,
    l_cro: f64,
    objective: f64,
    bridge_sum: f64,
    correct: usize,
}

/// One pass over the train set: objective terms, optional parameter
/// gradients, and refreshed latent scores and node labels in `states`.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    task_net: &TaskNetworkState,
    concept_net: &ConceptNetworkState,
    states: &mut [ItemState],
    inputs: &[Vec<Vec<f64>>],
    trade: TradeOff,
    form: CrossEntropyForm,
    batch: usize,
    mut grads: Option<(&mut TaskGradients, &mut ConceptGradients)>,
) -> Result<EpochStats> {
    let mut stats = EpochStats::default();
    let label_count = task_net.label_count;
    for (chunk_index, chunk) in inputs.chunks(batch).enumerate() {
        let offset = chunk_index * batch;
        let fwd = task_net.forward(chunk)?;
        let mut d_probs = vec![vec![0.0; label_count]; chunk.len()];
        let mut d_feats =
            vec![vec![vec![0.0; task_net.feature_dim]; task_net.entities_per_item]; chunk.len()];
        for j in 0..chunk.len() {
            let state = &mut states[offset + j];
            let y = &fwd.labels[j];
            state.model.nodes[0].label = y.clone();
            if y.hard == state.label_index {
                stats.correct += 1;
            }
            for (k, &t) in state.target.distribution.iter().enumerate() {
                if t > 0.0 {
                    let p = y.distribution[k].max(LOG_CLAMP);
                    stats.o_task += t * p.ln();
                    if grads.is_some() && trade.alpha > 0.0 {
                        d_probs[j][k] += trade.alpha * t / p;
                    }
                }
            }
            if trade.beta > 0.0 {
                for &atom in &state.latent_atoms {
                    let s = concept_net.score(&state.model.mln.atoms[atom], &fwd.features[j])?;
                    state.assignment.set(&state.model.mln, atom, s)?;
                }
                let ex = o_logic_expected(&state.model, &state.assignment)?;
                stats.o_logic += ex.value;
                stats.bridge_sum += ex.mean_bridge;
                if let Some((_, cg)) = grads.as_mut() {
                    for &atom in &state.latent_atoms {
                        let d = trade.beta * ex.grad_scores[atom];
                        if d != 0.0 {
                            concept_net.backward_atom(
                                &state.model.mln.atoms[atom],
                                &fwd.features[j],
                                d,
                                cg,
                                &mut d_feats[j],
                            )?;
                        }
                    }
                    for (slot, g) in ex.grad_labels[0].iter().enumerate() {
                        d_probs[j][slot] += trade.beta * g;
                    }
                }
            }
            if trade.gamma > 0.0 {
                let pairs: Vec<(f64, f64)> = state
                    .model
                    .bridged_slots(0)
                    .map(|(slot, atom)| (state.assignment.get(atom), y.distribution[slot]))
                    .collect();
                let (value, pair_grads) = concept_cross_entropy_with_grad(&pairs, form);
                stats.l_cro += value;
                if grads.is_some() {
                    for ((slot, _), (_, dy)) in state.model.bridged_slots(0).zip(&pair_grads) {
                        d_probs[j][slot] -= trade.gamma * dy;
                    }
                }
            }
        }
        if let Some((tg, _)) = grads.as_mut() {
            let adjoints = TaskAdjoints {
                d_probs: Some(d_probs),
                d_logits: None,
                d_features: if trade.beta > 0.0 {
                    Some(d_feats)
                } else {
                    None
                },
            };
            tg.add(&task_net.backward(&fwd.tape, &adjoints)?);
        }
    }
    stats.objective = e_step_objective(stats.o_task, stats.o_logic, stats.l_cro, trade)?;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub diagnostics: Vec<RoundDiagnostics>,
}

pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    ruleset: &RuleSet,
    domains: &ValueDomains,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let trade = TradeOff::new(cfg.alpha, cfg.beta, cfg.gamma)?;
    let binding = derive_label_binding(ruleset, domains)?;
    let space = binding.label_space();
    let train_items: Vec<&DataItem> = dataset.split_items(Split::Train).collect();
    if train_items.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let inputs: Vec<Vec<Vec<f64>>> = train_items.iter().map(|i| dataset.inputs(i)).collect();
    let label_indices: Vec<usize> = train_items
        .iter()
        .map(|i| {
            space.index_of(&i.label).ok_or(TrainError::LabelUnknown {
                label: i.label.to_string(),
            })
        })
        .collect::<Result<_>>()?;

    let mut weights = WeightVector::ones(ruleset.rules.len());
    let mut task_net = TaskNetworkState::init(
        dataset.input_dim,
        cfg.hidden_dim,
        cfg.feature_dim,
        dataset.entities_per_item,
        space.len(),
        cfg.seed,
    );
    let mut concept_net =
        ConceptNetworkState::init(ruleset, domains, cfg.feature_dim, cfg.seed.wrapping_add(1))?;
    let mut states: Vec<ItemState> = label_indices
        .iter()
        .enumerate()
        .map(|(i, &idx)| {
            build_item_state(
                i,
                ruleset,
                &binding,
                &space,
                domains,
                dataset.entities_per_item,
                &weights,
                cfg.grounding_cap,
                idx,
            )
        })
        .collect::<Result<_>>()?;

    let ruleset_text = ruleset.render();
    let rules_hash = rules_digest(&ruleset_text);
    let snapshot = |round: usize,
                    task_net: &TaskNetworkState,
                    concept_net: &ConceptNetworkState,
                    weights: &WeightVector| Checkpoint {
        round,
        config: cfg.clone(),
        ruleset_text: ruleset_text.clone(),
        rules_hash,
        domains: domains.clone(),
        label_space: space.clone(),
        task_net: task_net.clone(),
        concept_net: concept_net.clone(),
        weights: weights.clone(),
    };
    let mut last_good = snapshot(0, &task_net, &concept_net, &weights);
    let mut diagnostics = Vec::with_capacity(cfg.em_rounds);

    for round in 0..cfg.em_rounds {
        let diverged = |last_good: Checkpoint| TrainError::Diverged {
            round,
            last_good: Box::new(last_good),
        };
        let mut pass_objectives = Vec::with_capacity(cfg.e_passes);
        for _pass in 0..cfg.e_passes {
            let mut tg = TaskGradients::zeros(&task_net);
            let mut cg = ConceptGradients::zeros(&concept_net);
            let base = run_epoch(
                &task_net,
                &concept_net,
                &mut states,
                &inputs,
                trade,
                cfg.l_cro_form,
                cfg.batch,
                Some((&mut tg, &mut cg)),
            )?;
            if !base.objective.is_finite() || !tg.is_finite() || !cg.is_finite() {
                return Err(diverged(last_good));
            }
            pass_objectives.push(base.objective);
            let mut factor = 1.0;
            for _try in 0..=5 {
                let mut trial_task = task_net.clone();
                trial_task.step(&tg, cfg.lr_theta1 * factor);
                let mut trial_concept = concept_net.clone();
                trial_concept.step(&cg, cfg.lr_theta2 * factor);
                // A trial that cannot even be evaluated has overflowed the
                // networks; that is divergence, not a line-search miss.
                let trial = match run_epoch(
                    &trial_task,
                    &trial_concept,
                    &mut states,
                    &inputs,
                    trade,
                    cfg.l_cro_form,
                    cfg.batch,
                    None,
                ) {
                    Ok(t) if t.objective.is_finite() => t,
                    _ => return Err(diverged(last_good)),
                };
                if trial.objective >= base.objective {
                    task_net = trial_task;
                    concept_net = trial_concept;
                    break;
                }
                factor *= 0.5;
            }
        }
        // Forward-only pass with the accepted parameters: diagnostics plus
        // fresh scores for the M-step and revision.
        let end = run_epoch(
            &task_net,
            &concept_net,
            &mut states,
            &inputs,
            trade,
            cfg.l_cro_form,
            cfg.batch,
            None,
        )?;
        if !end.objective.is_finite() {
            return Err(diverged(last_good));
        }
        if trade.beta > 0.0 && cfg.m_steps > 0 {
            let problems: Vec<(&MlnGraph, &AtomAssignment)> = states
                .iter()
                .map(|s| (&s.model.mln, &s.assignment))
                .collect();
            match m_step_batch(&problems, &weights, cfg.lr_w, cfg.m_steps) {
                Ok(outcome) => {
                    weights = outcome.weights;
                    for state in &mut states {
                        state.model.set_weights(weights.clone());
                    }
                }
                Err(_) => return Err(diverged(last_good)),
            }
        }
        for state in &mut states {
            let revised = revise_labels(&state.model, &state.assignment);
            state.target = revised.into_iter().next().unwrap();
        }
        diagnostics.push(RoundDiagnostics {
            round,
            o_task: end.o_task,
            o_logic: end.o_logic,
            l_cro: end.l_cro,
            objective: end.objective,
            train_acc: end.correct as f64 / states.len() as f64,
            mean_bridge: end.bridge_sum / states.len() as f64,
            pass_objectives,
        });
        last_good = snapshot(round + 1, &task_net, &concept_net, &weights);
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Transductive,
    Inductive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub predictions: Vec<TaskLabel>,
}

/// Per-entity features from the task encoder, chunking the entities into
/// pseudo-items of the network's width (zero-padding a short tail).
fn encode_features(net: &TaskNetworkState, entities: &[Vec<f64>]) -> Result<Vec<FeatureVector>> {
    let per = net.entities_per_item;
    let mut features = Vec::with_capacity(entities.len());
    let mut start = 0;
    while start < entities.len() {
        let n = per.min(entities.len() - start);
        let mut item: Vec<Vec<f64>> = entities[start..start + n].to_vec();
        while item.len() < per {
            item.push(vec![0.0; net.input_dim]);
        }
        let fwd = net.forward(std::slice::from_ref(&item))?;
        features.extend(fwd.features[0].iter().take(n).cloned());
        start += n;
    }
    Ok(features)
}

/// Evaluates a checkpoint on a dataset's test split (or the whole set when
/// no items are tagged test). Transductive mode re-runs the symbolic
/// revision over the checkpoint's own rules when its beta is positive;
/// inductive mode grounds the supplied rewritten rules per item.
/// Test split when one exists, otherwise every item.
fn eval_items(dataset: &Dataset) -> Result<Vec<&DataItem>> {
    let test: Vec<&DataItem> = dataset.split_items(Split::Test).collect();
    let items = if test.is_empty() {
        dataset.items.iter().collect()
    } else {
        test
    };
    if items.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    Ok(items)
}

/// Every latent body predicate of the rewritten rules must have a trained
/// scorer.
fn check_scorers(rules: &RuleSet, concept: &ConceptNetworkState) -> Result<()> {
    for rule in &rules.rules {
        for atom in &rule.body {
            let latent = rules
                .predicate(&atom.predicate)
                .map(|p| p.kind == PredicateKind::Latent)
                .unwrap_or(false);
            if latent && concept.scorer(&atom.predicate).is_none() {
                return Err(TrainError::ScorerMissing {
                    predicate: atom.predicate.clone(),
                });
            }
        }
    }
    Ok(())
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    mode: EvalMode,
    rules: Option<&RuleSet>,
) -> Result<EvalReport> {
    let eval_items = eval_items(dataset)?;
    let labels: Vec<TaskLabel> = eval_items.iter().map(|i| i.label.clone()).collect();
    let predictions = match mode {
        EvalMode::Transductive => {
            if let Some(supplied) = rules {
                if rules_digest(&supplied.render()) != checkpoint.rules_hash {
                    return Err(TrainError::RuleMismatch);
                }
            }
            let ruleset = parse_rules(&checkpoint.ruleset_text)?;
            let binding = derive_label_binding(&ruleset, &checkpoint.domains)?;
            if binding.label_space() != checkpoint.label_space {
                return Err(TrainError::BadCheckpoint {
                    msg: "label space does not match the embedded rules".into(),
                });
            }
            transduce(checkpoint, &ruleset, &binding, dataset, &eval_items)?
        }
        EvalMode::Inductive => {
            let new_rules = rules.ok_or(TrainError::MissingRules)?;
            check_scorers(new_rules, &checkpoint.concept_net)?;
            let mut preds = Vec::with_capacity(eval_items.len());
            for item in &eval_items {
                let features = encode_features(&checkpoint.task_net, &dataset.inputs(item))?;
                let out = infer_inductive(new_rules, &checkpoint.concept_net, &features)?;
                preds.push(match out.head_value {
                    HeadValue::Int(v) => TaskLabel::Sum(v),
                    HeadValue::Label(name) => TaskLabel::Class(name),
                });
            }
            preds
        }
    };
    let metrics = accuracy(&predictions, &labels)?;
    Ok(EvalReport {
        metrics,
        predictions,
    })
}

/// Per-item inductive inference over the test split (or every item), keeping
/// each reasoning path for reporting alongside the true label.
pub fn infer_dataset(
    checkpoint: &Checkpoint,
    rules_new: &RuleSet,
    dataset: &Dataset,
) -> Result<Vec<(TaskLabel, InductiveResult)>> {
    check_scorers(rules_new, &checkpoint.concept_net)?;
    let items = eval_items(dataset)?;
    let mut results = Vec::with_capacity(items.len());
    for item in items {
        let features = encode_features(&checkpoint.task_net, &dataset.inputs(item))?;
        let out = infer_inductive(rules_new, &checkpoint.concept_net, &features)?;
        results.push((item.label.clone(), out));
    }
    Ok(results)
}

fn transduce(
    checkpoint: &Checkpoint,
    ruleset: &RuleSet,
    binding: &LabelBinding,
    dataset: &Dataset,
    items: &[&DataItem],
) -> Result<Vec<TaskLabel>> {
    let space = &checkpoint.label_space;
    let net = &checkpoint.task_net;
    let batch = checkpoint.config.batch.max(1);
    let mut preds = Vec::with_capacity(items.len());
    let inputs: Vec<Vec<Vec<f64>>> = items.iter().map(|i| dataset.inputs(i)).collect();
    for (chunk_index, chunk) in inputs.chunks(batch).enumerate() {
        let fwd = net.forward(chunk)?;
        for (j, y) in fwd.labels.iter().enumerate() {
            let _ = chunk_index;
            let hard = if checkpoint.config.beta > 0.0 {
                let graph = ground_rules(
                    ruleset,
                    &ConstantTable::of_size(dataset.entities_per_item),
                    &checkpoint.domains,
                    checkpoint.config.grounding_cap,
                )?;
                let latent = latent_atom_ids(&graph, ruleset);
                let node = HighLevelNode {
                    id: "eval".into(),
                    constants: binding.node_constants(),
                    slots: binding.slots(),
                    label: y.clone(),
                };
                let model = attach_levels(vec![node], graph, checkpoint.weights.clone())?;
                let mut q = AtomAssignment::from_graph(&model.mln);
                for atom in 0..model.mln.atoms.len() {
                    q.set(&model.mln, atom, 0.5)?;
                }
                for &atom in &latent {
                    let s = checkpoint
                        .concept_net
                        .score(&model.mln.atoms[atom], &fwd.features[j])?;
                    q.set(&model.mln, atom, s)?;
                }
                label_block_conditional(&model, &mut q)?;
                let revised = revise_labels(&model, &q);
                revised[0].hard
            } else {
                y.hard
            };
            preds.push(space.label_at(hard));
        }
    }
    Ok(preds)
}

/// One evaluated item with its ranked rule evidence.
#[derive(Debug, Clone)]
pub struct ItemExplanation {
    pub truth: TaskLabel,
    pub prediction: TaskLabel,
    pub explanation: Explanation,
}

/// Runs the transductive pipeline over the test split (or every item when no
/// test split exists) and attaches ranked rule evidence to each prediction.
/// Explanation is inherently symbolic, so the grounded model is built even
/// when the checkpoint was trained with `beta = 0`.
pub fn explain_dataset(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Vec<ItemExplanation>> {
    let ruleset = parse_rules(&checkpoint.ruleset_text)?;
    let binding = derive_label_binding(&ruleset, &checkpoint.domains)?;
    let space = &checkpoint.label_space;
    let items = eval_items(dataset)?;
    let net = &checkpoint.task_net;
    let mut reports = Vec::with_capacity(items.len());
    for item in items {
        let fwd = net.forward(std::slice::from_ref(&dataset.inputs(item)))?;
        let graph = ground_rules(
            &ruleset,
            &ConstantTable::of_size(dataset.entities_per_item),
            &checkpoint.domains,
            checkpoint.config.grounding_cap,
        )?;
        let latent = latent_atom_ids(&graph, &ruleset);
        let node = HighLevelNode {
            id: "explain".into(),
            constants: binding.node_constants(),
            slots: binding.slots(),
            label: fwd.labels[0].clone(),
        };
        let model = attach_levels(vec![node], graph, checkpoint.weights.clone())?;
        let mut q = AtomAssignment::from_graph(&model.mln);
        for atom in 0..model.mln.atoms.len() {
            q.set(&model.mln, atom, 0.5)?;
        }
        for &atom in &latent {
            let s = checkpoint
                .concept_net
                .score(&model.mln.atoms[atom], &fwd.features[0])?;
            q.set(&model.mln, atom, s)?;
        }
        label_block_conditional(&model, &mut q)?;
        let revised = revise_labels(&model, &q);
        let explanation = explain_transductive(&model, &ruleset, &q, &revised[0])?;
        reports.push(ItemExplanation {
            truth: item.label.clone(),
            prediction: space.label_at(revised[0].hard),
            explanation,
        });
    }
    Ok(reports)
}

const MAGIC: &[u8; 8] = b"GBPGRCK1";
const MAX_LEN: u64 = 1 << 32;

fn w_u64(out: &mut dyn Write, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_i64(out: &mut dyn Write, v: i64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(out: &mut dyn Write, v: f64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_str(out: &mut dyn Write, s: &str) -> Result<()> {
    w_u64(out, s.len() as u64)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn w_f64s(out: &mut dyn Write, v: &[f64]) -> Result<()> {
    w_u64(out, v.len() as u64)?;
    for &x in v {
        w_f64(out, x)?;
    }
    Ok(())
}

fn w_mat(out: &mut dyn Write, m: &[Vec<f64>]) -> Result<()> {
    w_u64(out, m.len() as u64)?;
    for row in m {
        w_f64s(out, row)?;
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::BadCheckpoint { msg: msg.into() }
}

fn r_u64(inp: &mut dyn Read) -> Result<u64> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_len(inp: &mut dyn Read) -> Result<usize> {
    let v = r_u64(inp)?;
    if v > MAX_LEN {
        return Err(bad("length field out of range"));
    }
    Ok(v as usize)
}

fn r_i64(inp: &mut dyn Read) -> Result<i64> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}

fn r_f64(inp: &mut dyn Read) -> Result<f64> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn r_str(inp: &mut dyn Read) -> Result<String> {
    let len = r_len(inp)?;
    let mut bytes = vec![0u8; len];
    inp.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| bad("string field is not UTF-8"))
}

fn r_f64s(inp: &mut dyn Read) -> Result<Vec<f64>> {
    let len = r_len(inp)?;
    (0..len).map(|_| r_f64(inp)).collect()
}

fn r_mat(inp: &mut dyn Read) -> Result<Vec<Vec<f64>>> {
    let rows = r_len(inp)?;
    (0..rows).map(|_| r_f64s(inp)).collect()
}

fn w_scorer(out: &mut dyn Write, scorer: &crate::neural::Scorer) -> Result<()> {
    use crate::neural::Scorer;
    match scorer {
        Scorer::Unary { w, b } => {
            out.write_all(&[0])?;
            w_f64s(out, w)?;
            w_f64(out, *b)?;
        }
        Scorer::Binary { m, b } => {
            out.write_all(&[1])?;
            w_mat(out, m)?;
            w_f64(out, *b)?;
        }
        Scorer::Value { w, b, lo, hi } => {
            out.write_all(&[2])?;
            w_mat(out, w)?;
            w_f64s(out, b)?;
            w_i64(out, *lo)?;
            w_i64(out, *hi)?;
        }
    }
    Ok(())
}

fn r_scorer(inp: &mut dyn Read) -> Result<crate::neural::Scorer> {
    use crate::neural::Scorer;
    let mut tag = [0u8; 1];
    inp.read_exact(&mut tag)?;
    match tag[0] {
        0 => Ok(Scorer::Unary {
            w: r_f64s(inp)?,
            b: r_f64(inp)?,
        }),
        1 => Ok(Scorer::Binary {
            m: r_mat(inp)?,
            b: r_f64(inp)?,
        }),
        2 => Ok(Scorer::Value {
            w: r_mat(inp)?,
            b: r_f64s(inp)?,
            lo: r_i64(inp)?,
            hi: r_i64(inp)?,
        }),
        t => Err(bad(format!("unknown scorer tag {t}"))),
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, out: &mut dyn Write) -> Result<()> {
    out.write_all(MAGIC)?;
    w_u64(out, checkpoint.round as u64)?;
    let cfg = &checkpoint.config;
    w_f64(out, cfg.alpha)?;
    w_f64(out, cfg.beta)?;
    w_f64(out, cfg.gamma)?;
    w_u64(out, cfg.em_rounds as u64)?;
    w_u64(out, cfg.e_passes as u64)?;
    w_u64(out, cfg.m_steps as u64)?;
    w_f64(out, cfg.lr_theta1)?;
    w_f64(out, cfg.lr_theta2)?;
    w_f64(out, cfg.lr_w)?;
    w_u64(out, cfg.batch as u64)?;
    w_u64(out, cfg.seed)?;
    w_u64(out, cfg.grounding_cap as u64)?;
    out.write_all(&[match cfg.l_cro_form {
        CrossEntropyForm::PaperLiteral => 0,
        CrossEntropyForm::Conventional => 1,
    }])?;
    w_u64(out, cfg.hidden_dim as u64)?;
    w_u64(out, cfg.feature_dim as u64)?;
    w_str(out, &checkpoint.ruleset_text)?;
    out.write_all(&checkpoint.rules_hash)?;
    let entries: Vec<(&str, (i64, i64))> = checkpoint.domains.iter().collect();
    w_u64(out, entries.len() as u64)?;
    for (name, (lo, hi)) in entries {
        w_str(out, name)?;
        w_i64(out, lo)?;
        w_i64(out, hi)?;
    }
    match &checkpoint.label_space {
        LabelSpace::Sums { lo, hi } => {
            out.write_all(&[0])?;
            w_i64(out, *lo)?;
            w_i64(out, *hi)?;
        }
        LabelSpace::Classes(names) => {
            out.write_all(&[1])?;
            w_u64(out, names.len() as u64)?;
            for name in names {
                w_str(out, name)?;
            }
        }
    }
    let net = &checkpoint.task_net;
    w_u64(out, net.input_dim as u64)?;
    w_u64(out, net.hidden_dim as u64)?;
    w_u64(out, net.feature_dim as u64)?;
    w_u64(out, net.entities_per_item as u64)?;
    w_u64(out, net.label_count as u64)?;
    let p = net.params();
    w_mat(out, &p.w1)?;
    w_f64s(out, &p.b1)?;
    w_mat(out, &p.w2)?;
    w_f64s(out, &p.b2)?;
    w_mat(out, &p.wc)?;
    w_f64s(out, &p.bc)?;
    let names: Vec<&str> = checkpoint.concept_net.scorer_names().collect();
    w_u64(out, names.len() as u64)?;
    for name in names {
        w_str(out, name)?;
        w_scorer(out, checkpoint.concept_net.scorer(name).unwrap())?;
    }
    w_f64s(out, checkpoint.weights.as_slice())?;
    Ok(())
}

pub fn load_checkpoint(inp: &mut dyn Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let round = r_len(inp)?;
    let alpha = r_f64(inp)?;
    let beta = r_f64(inp)?;
    let gamma = r_f64(inp)?;
    let em_rounds = r_len(inp)?;
    let e_passes = r_len(inp)?;
    let m_steps = r_len(inp)?;
    let lr_theta1 = r_f64(inp)?;
    let lr_theta2 = r_f64(inp)?;
    let lr_w = r_f64(inp)?;
    let batch = r_len(inp)?;
    let seed = r_u64(inp)?;
    let grounding_cap = r_len(inp)?;
    let mut form_tag = [0u8; 1];
    inp.read_exact(&mut form_tag)?;
    let l_cro_form = match form_tag[0] {
        0 => CrossEntropyForm::PaperLiteral,
        1 => CrossEntropyForm::Conventional,
        t => return Err(bad(format!("unknown cross-entropy tag {t}"))),
    };
    let hidden_dim = r_len(inp)?;
    let feature_dim = r_len(inp)?;
    let config = TrainConfig {
        alpha,
        beta,
        gamma,
        em_rounds,
        e_passes,
        m_steps,
        lr_theta1,
        lr_theta2,
        lr_w,
        batch,
        seed,
        grounding_cap,
        l_cro_form,
        hidden_dim,
        feature_dim,
    };
    let ruleset_text = r_str(inp)?;
    let mut rules_hash = [0u8; 32];
    inp.read_exact(&mut rules_hash)?;
    if rules_digest(&ruleset_text) != rules_hash {
        return Err(bad("rules hash does not match the embedded text"));
    }
    let mut domains = ValueDomains::default();
    for _ in 0..r_len(inp)? {
        let name = r_str(inp)?;
        let lo = r_i64(inp)?;
        let hi = r_i64(inp)?;
        domains.set(name, lo, hi);
    }
    let mut space_tag = [0u8; 1];
    inp.read_exact(&mut space_tag)?;
    let label_space = match space_tag[0] {
        0 => LabelSpace::Sums {
            lo: r_i64(inp)?,
            hi: r_i64(inp)?,
        },
        1 => {
            let n = r_len(inp)?;
            LabelSpace::Classes((0..n).map(|_| r_str(inp)).collect::<Result<_>>()?)
        }
        t => return Err(bad(format!("unknown label-space tag {t}"))),
    };
    let input_dim = r_len(inp)?;
    let net_hidden = r_len(inp)?;
    let net_feature = r_len(inp)?;
    let entities = r_len(inp)?;
    let label_count = r_len(inp)?;
    let w1 = r_mat(inp)?;
    let b1 = r_f64s(inp)?;
    let w2 = r_mat(inp)?;
    let b2 = r_f64s(inp)?;
    let wc = r_mat(inp)?;
    let bc = r_f64s(inp)?;
    let shape = |ok: bool, what: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(bad(format!("{what} tensor shape mismatch")))
        }
    };
    shape(
        w1.len() == net_hidden && w1.iter().all(|r| r.len() == input_dim),
        "w1",
    )?;
    shape(b1.len() == net_hidden, "b1")?;
    shape(
        w2.len() == net_feature && w2.iter().all(|r| r.len() == net_hidden),
        "w2",
    )?;
    shape(b2.len() == net_feature, "b2")?;
    shape(
        wc.len() == label_count && wc.iter().all(|r| r.len() == entities * net_feature),
        "wc",
    )?;
    shape(bc.len() == label_count, "bc")?;
    let mut task_net =
        TaskNetworkState::init(input_dim, net_hidden, net_feature, entities, label_count, 0);
    task_net.apply(|p| {
        p.w1 = w1;
        p.b1 = b1;
        p.w2 = w2;
        p.b2 = b2;
        p.wc = wc;
        p.bc = bc;
    });
    let scorer_count = r_len(inp)?;
    let mut scorers = std::collections::BTreeMap::new();
    for _ in 0..scorer_count {
        let name = r_str(inp)?;
        scorers.insert(name, r_scorer(inp)?);
    }
    let ruleset = parse_rules(&ruleset_text)?;
    let mut concept_net = ConceptNetworkState::init(&ruleset, &domains, feature_dim, 0)?;
    concept_net.apply(|map| *map = scorers);
    let weights = WeightVector::from_vec(r_f64s(inp)?)?;
    Ok(Checkpoint {
        round,
        config,
        ruleset_text,
        rules_hash,
        domains,
        label_space,
        task_net,
        concept_net,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{digit_domains, gen_digit_dataset, make_addition_rules};

    const ATTR_RULES: &str = "\
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred horselike/1 latent
pred white_black/1 latent
pred stripe/1 latent
pred leopard/1
pred tiger/1
pred zebra/1
r1: likecat(x) & tawny(x) & spot(x) => leopard(x)
r2: likecat(x) & tawny(x) & stripe(x) => tiger(x)
r3: horselike(x) & white_black(x) & stripe(x) => zebra(x)
";

    fn attr_problem() -> (RuleSet, ValueDomains, Dataset) {
        let rules = parse_rules(ATTR_RULES).unwrap();
        let data = crate::tasks::gen_attribute_dataset(7, 6, 0.05, &rules, 1).unwrap();
        (rules, ValueDomains::default(), data)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            em_rounds: 2,
            e_passes: 2,
            m_steps: 2,
            lr_theta1: 0.05,
            lr_theta2: 0.05,
            lr_w: 0.05,
            batch: 8,
            hidden_dim: 8,
            feature_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad_cases = [
            TrainConfig {
                alpha: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                em_rounds: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                e_passes: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_w: f64::NAN,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_theta1: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch: 0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad_cases {
            assert!(matches!(cfg.validate(), Err(TrainError::Config { .. })));
        }
        // Zero learning rates are allowed: they make training a no-op.
        let zero = TrainConfig {
            lr_theta1: 0.0,
            lr_theta2: 0.0,
            lr_w: 0.0,
            m_steps: 0,
            ..TrainConfig::default()
        };
        assert!(zero.validate().is_ok());
    }

    #[test]
    fn label_binding_shapes() {
        let rules = make_addition_rules(1).unwrap();
        let domains = digit_domains(1).unwrap();
        let binding = derive_label_binding(&rules, &domains).unwrap();
        assert_eq!(
            binding,
            LabelBinding::Value {
                predicate: "addition".into(),
                lo: 0,
                hi: 18
            }
        );
        assert_eq!(binding.label_space().len(), 19);

        let (attr_rules, attr_domains, _) = attr_problem();
        let binding = derive_label_binding(&attr_rules, &attr_domains).unwrap();
        assert_eq!(
            binding,
            LabelBinding::Classes {
                predicates: vec!["leopard".into(), "tiger".into(), "zebra".into()]
            }
        );

        // A value predicate without a domain cannot bind labels.
        let err = derive_label_binding(&rules, &ValueDomains::default());
        assert!(matches!(err, Err(TrainError::Config { .. })));
    }

    #[test]
    fn unknown_label_is_rejected() {
        let (rules, domains, mut data) = attr_problem();
        data.items[0].label = TaskLabel::Class("dragon".into());
        let err = train(&quick_cfg(), &data, &rules, &domains);
        assert!(matches!(err, Err(TrainError::LabelUnknown { .. })));
    }

    #[test]
    fn zero_rates_leave_parameters_at_initialization() {
        let (rules, domains, data) = attr_problem();
        let cfg = TrainConfig {
            em_rounds: 1,
            lr_theta1: 0.0,
            lr_theta2: 0.0,
            lr_w: 0.0,
            m_steps: 0,
            ..quick_cfg()
        };
        let out = train(&cfg, &data, &rules, &domains).unwrap();
        let space_len = out.checkpoint.label_space.len();
        let fresh = TaskNetworkState::init(
            data.input_dim,
            cfg.hidden_dim,
            cfg.feature_dim,
            data.entities_per_item,
            space_len,
            cfg.seed,
        );
        assert_eq!(out.checkpoint.task_net.params(), fresh.params());
        let fresh_concept =
            ConceptNetworkState::init(&rules, &domains, cfg.feature_dim, cfg.seed + 1).unwrap();
        for name in fresh_concept.scorer_names() {
            assert_eq!(
                out.checkpoint.concept_net.scorer(name),
                fresh_concept.scorer(name)
            );
        }
        assert_eq!(
            out.checkpoint.weights.as_slice(),
            WeightVector::ones(rules.rules.len()).as_slice()
        );
    }

    #[test]
    fn srm_ablation_freezes_weights_and_ignores_symbols() {
        let (rules, domains, data) = attr_problem();
        let cfg = TrainConfig {
            beta: 0.0,
            gamma: 0.0,
            ..quick_cfg()
        };
        let out = train(&cfg, &data, &rules, &domains).unwrap();
        assert_eq!(
            out.checkpoint.weights.as_slice(),
            WeightVector::ones(rules.rules.len()).as_slice()
        );
        // Adding an unused latent predicate changes the concept network but
        // must leave theta-1 bitwise identical when beta = gamma = 0.
        let padded = parse_rules(&format!("pred ghost/1 latent\n{ATTR_RULES}")).unwrap();
        let out2 = train(&cfg, &data, &padded, &domains).unwrap();
        assert_eq!(
            out.checkpoint.task_net.params(),
            out2.checkpoint.task_net.params()
        );
    }

    #[test]
    fn pass_objectives_never_decrease_within_a_round() {
        let (rules, domains, data) = attr_problem();
        let cfg = TrainConfig {
            em_rounds: 2,
            e_passes: 4,
            ..quick_cfg()
        };
        let out = train(&cfg, &data, &rules, &domains).unwrap();
        for round in &out.diagnostics {
            assert_eq!(round.pass_objectives.len(), 4);
            for pair in round.pass_objectives.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9,
                    "pass objective decreased: {pair:?}"
                );
            }
            assert!(round.objective >= *round.pass_objectives.last().unwrap() - 1e-9);
        }
    }

    #[test]
    fn objective_monotone_across_rounds_without_m_step() {
        // With m_steps = 0 and pinned train labels the objective function is
        // identical across rounds, so the whole trace must be monotone.
        let (rules, domains, data) = attr_problem();
        for seed in 0..5 {
            let cfg = TrainConfig {
                em_rounds: 3,
                e_passes: 2,
                m_steps: 0,
                seed,
                ..quick_cfg()
            };
            let out = train(&cfg, &data, &rules, &domains).unwrap();
            let trace: Vec<f64> = out
                .diagnostics
                .iter()
                .flat_map(|r| r.pass_objectives.iter().copied())
                .collect();
            for pair in trace.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9,
                    "seed {seed}: objective trace decreased: {pair:?}"
                );
            }
        }
    }

    #[test]
    fn divergence_guard_returns_last_good_checkpoint() {
        // An absurd concept rate blows the scorer weights up to infinity on
        // the first accepted pass; the next pass then mixes an infinite weight
        // with a zero feature coordinate, the score turns non-finite, and the
        // guard must hand back the pre-round checkpoint instead of storing
        // poisoned parameters.
        let rules = parse_rules(ATTR_RULES).unwrap();
        let domains = ValueDomains::default();
        let data = crate::tasks::gen_attribute_dataset(10, 6, 0.1, &rules, 1).unwrap();
        let cfg = TrainConfig {
            lr_theta2: f64::MAX,
            em_rounds: 1,
            e_passes: 2,
            seed: 10,
            hidden_dim: 2,
            feature_dim: 2,
            ..quick_cfg()
        };
        match train(&cfg, &data, &rules, &domains) {
            Err(err @ TrainError::Diverged { .. }) => {
                assert!(err.to_string().contains("round 0"));
                let TrainError::Diverged { round, last_good } = err else {
                    unreachable!()
                };
                assert_eq!(round, 0);
                assert_eq!(last_good.round, 0);
                // The rescued checkpoint must still evaluate.
                let report =
                    evaluate(&last_good, &data, EvalMode::Transductive, None).unwrap();
                assert!(report.metrics.acc >= 0.0 && report.metrics.acc <= 1.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let (rules, domains, data) = attr_problem();
        let cfg = quick_cfg();
        let a = train(&cfg, &data, &rules, &domains).unwrap();
        let b = train(&cfg, &data, &rules, &domains).unwrap();
        let mut bytes_a = Vec::new();
        save_checkpoint(&a.checkpoint, &mut bytes_a).unwrap();
        let mut bytes_b = Vec::new();
        save_checkpoint(&b.checkpoint, &mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b, "checkpoints are not byte-identical");

        let loaded = load_checkpoint(&mut bytes_a.as_slice()).unwrap();
        let before = evaluate(&a.checkpoint, &data, EvalMode::Transductive, None).unwrap();
        let after = evaluate(&loaded, &data, EvalMode::Transductive, None).unwrap();
        assert_eq!(before.metrics, after.metrics);
        assert_eq!(before.predictions, after.predictions);

        // Corrupting the payload is caught.
        let mut broken = bytes_a.clone();
        broken[4] = b'X';
        assert!(matches!(
            load_checkpoint(&mut broken.as_slice()),
            Err(TrainError::BadCheckpoint { .. })
        ));
    }

    #[test]
    fn explanations_align_with_transductive_predictions() {
        let (rules, domains, data) = attr_problem();
        let cfg = quick_cfg();
        let outcome = train(&cfg, &data, &rules, &domains).unwrap();
        let report = evaluate(&outcome.checkpoint, &data, EvalMode::Transductive, None).unwrap();
        let explained = explain_dataset(&outcome.checkpoint, &data).unwrap();
        assert_eq!(explained.len(), report.predictions.len());
        for (ex, pred) in explained.iter().zip(&report.predictions) {
            assert_eq!(&ex.prediction, pred);
            // Every ranked candidate's posterior is a probability product.
            for ev in &ex.explanation.ranked {
                assert!(ev.posterior >= 0.0 && ev.posterior <= 1.0 + 1e-12);
            }
        }
        // At least one item should carry evidence: the class rules bridge the
        // label atoms directly.
        assert!(explained.iter().any(|e| e.explanation.evidence.is_some()));
    }

    #[test]
    fn transductive_eval_checks_rule_hash() {
        let (rules, domains, data) = attr_problem();
        let out = train(&quick_cfg(), &data, &rules, &domains).unwrap();
        let ok = evaluate(&out.checkpoint, &data, EvalMode::Transductive, Some(&rules));
        assert!(ok.is_ok());
        let other = make_addition_rules(1).unwrap();
        assert!(matches!(
            evaluate(&out.checkpoint, &data, EvalMode::Transductive, Some(&other)),
            Err(TrainError::RuleMismatch)
        ));
    }

    #[test]
    fn inductive_eval_needs_rules_and_scorers() {
        let rules = make_addition_rules(1).unwrap();
        let domains = digit_domains(1).unwrap();
        let data = gen_digit_dataset(3, 12, 0.0).unwrap();
        let cfg = TrainConfig {
            em_rounds: 1,
            e_passes: 1,
            m_steps: 0,
            ..quick_cfg()
        };
        let out = train(&cfg, &data, &rules, &domains).unwrap();
        assert!(matches!(
            evaluate(&out.checkpoint, &data, EvalMode::Inductive, None),
            Err(TrainError::MissingRules)
        ));
        let strange = parse_rules(
            "pred glyph/1+1 latent\npred addition/0+1\n\
             r: glyph(x; d1) & glyph(y; d2) => addition(; 1*d1 + 1*d2 -> z)\n",
        )
        .unwrap();
        assert!(matches!(
            evaluate(&out.checkpoint, &data, EvalMode::Inductive, Some(&strange)),
            Err(TrainError::ScorerMissing { .. })
        ));
        // The matching two-digit rewrite runs end to end.
        let two = make_addition_rules(2).unwrap();
        let multi = crate::tasks::gen_multi_digit_dataset(4, 6, 0.0)
            .unwrap()
            .with_split(Split::Test);
        let report = evaluate(&out.checkpoint, &multi, EvalMode::Inductive, Some(&two)).unwrap();
        assert_eq!(report.predictions.len(), 6);
        for p in &report.predictions {
            assert!(matches!(p, TaskLabel::Sum(v) if (0..=198).contains(v)));
        }
    }

    #[test]
    fn digit_training_runs_and_improves_objective() {
        let rules = make_addition_rules(1).unwrap();
        let domains = digit_domains(1).unwrap();
        let data = gen_digit_dataset(11, 16, 0.0).unwrap();
        let cfg = TrainConfig {
            em_rounds: 2,
            e_passes: 2,
            m_steps: 1,
            batch: 8,
            hidden_dim: 8,
            feature_dim: 6,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &data, &rules, &domains).unwrap();
        assert_eq!(out.diagnostics.len(), 2);
        let first = &out.diagnostics[0];
        let last = &out.diagnostics[1];
        assert!(last.pass_objectives[0] >= first.pass_objectives[0] - 1e-6);
        let text = render_diagnostics(&out.diagnostics);
        assert!(text.contains("round=0"));
        assert!(text.contains("o_task="));
        assert!(text.lines().count() == 2);
    }

    #[test]
    fn absurd_weight_rate_is_contained_by_m_step_backtracking() {
        // The M-step's own line search rejects weight candidates whose
        // pseudo-log-likelihood collapses, so even lr_w = MAX cannot blow up
        // the weights; training completes with finite parameters.
        let (rules, domains, data) = attr_problem();
        let cfg = TrainConfig {
            lr_w: f64::MAX,
            m_steps: 2,
            ..quick_cfg()
        };
        let out = train(&cfg, &data, &rules, &domains).unwrap();
        assert!(out
            .checkpoint
            .weights
            .as_slice()
            .iter()
            .all(|w| w.is_finite()));
        for round in &out.diagnostics {
            assert!(round.objective.is_finite());
        }
    }
}
