//! Post-training concept manipulation.
//!
//! Transductive explanation scores every rule bridged to the item's
//! high-level nodes: each candidate's best triggering grounding gets the
//! posterior `prod p(A_i | y_hat)` over its atoms (computed in the log
//! domain) plus its Lukasiewicz fuzzy truth, and the winner is the highest
//! posterior, ties broken by fuzzy truth and then rule id. Inductive
//! inference grounds a rewritten rule positionally over fresh inputs, reads
//! each body concept's label by argmax score, and evaluates the head's
//! value expression on those labels.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bilevel::BiLevelModel;
use crate::ground::MlnGraph;
use crate::logic::{Atom, EntityTerm, LogicError, Rule, RuleSet, ValueTerm};
use crate::mln::{ground_rule_truth, AtomAssignment, MlnError};
use crate::neural::{ConceptNetworkState, FeatureVector, NeuralError, PseudoLabel, Scorer};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("ruleset has no rules")]
    NoRules,
    #[error("rule {rule} binds {expected} entities but {got} inputs were given")]
    EntityCount {
        rule: String,
        expected: usize,
        got: usize,
    },
    #[error("rule {rule}: head value for {variable} cannot be computed")]
    UnboundHead { rule: String, variable: String },
    #[error("rule {rule} has no groundings")]
    NoGroundings { rule: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Mln(#[from] MlnError),
}

pub type Result<T> = std::result::Result<T, InferError>;

/// One scored candidate rule with its best triggering grounding.
#[derive(Debug, Clone)]
pub struct Evidence {
    pub rule: Rule,
    /// prod p(A_i | y_hat) over the grounding's distinct atoms.
    pub posterior: f64,
    pub fuzzy_truth: f64,
    /// (atom key, probability) in grounding order, body before head.
    pub atom_scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub prediction: PseudoLabel,
    /// Best candidate, if any rule is bridged to the prediction.
    pub evidence: Option<Evidence>,
    /// All candidates, best first.
    pub ranked: Vec<Evidence>,
}

/// Log-domain product of the grounding's atom probabilities.
fn grounding_posterior(
    graph: &MlnGraph,
    ground_rule: usize,
    assignment: &AtomAssignment,
) -> (f64, Vec<(String, f64)>) {
    let g = &graph.ground_rules[ground_rule];
    let mut seen = Vec::new();
    let mut log_sum = 0.0;
    for &atom in g.body.iter().chain(&g.head) {
        if seen.iter().any(|(a, _)| *a == atom) {
            continue;
        }
        let p = assignment.get(atom);
        seen.push((atom, p));
        log_sum += p.ln();
    }
    let scores = seen
        .into_iter()
        .map(|(a, p)| (graph.atoms[a].key.clone(), p))
        .collect();
    (log_sum.exp(), scores)
}

fn better(a: &Evidence, b: &Evidence) -> std::cmp::Ordering {
    a.posterior
        .partial_cmp(&b.posterior)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(
            a.fuzzy_truth
                .partial_cmp(&b.fuzzy_truth)
                .unwrap_or(std::cmp::Ordering::Equal),
        )
        .then(b.rule.id.cmp(&a.rule.id))
}

/// Explains a prediction by the paper's transductive steps: candidate rules
/// are those with a grounding touching a bridged atom; each is scored by its
/// best grounding's posterior and fuzzy truth. No candidates is not an
/// error; the explanation simply carries no evidence.
pub fn explain_transductive(
    model: &BiLevelModel,
    ruleset: &RuleSet,
    assignment: &AtomAssignment,
    prediction: &PseudoLabel,
) -> Result<Explanation> {
    let bridged: Vec<bool> = {
        let mut m = vec![false; model.mln.atoms.len()];
        for b in &model.bridges {
            m[b.atom] = true;
        }
        m
    };
    // Best triggering grounding per rule index.
    let mut best: BTreeMap<usize, Evidence> = BTreeMap::new();
    for gi in 0..model.mln.ground_rules.len() {
        let g = &model.mln.ground_rules[gi];
        if !g.body.iter().chain(&g.head).any(|&a| bridged[a]) {
            continue;
        }
        let (posterior, atom_scores) = grounding_posterior(&model.mln, gi, assignment);
        let candidate = Evidence {
            rule: ruleset.rules[g.rule_index].clone(),
            posterior,
            fuzzy_truth: ground_rule_truth(&model.mln, gi, assignment),
            atom_scores,
        };
        match best.get(&g.rule_index) {
            Some(held) if better(&candidate, held) != std::cmp::Ordering::Greater => {}
            _ => {
                best.insert(g.rule_index, candidate);
            }
        }
    }
    let mut ranked: Vec<Evidence> = best.into_values().collect();
    ranked.sort_by(|a, b| better(b, a));
    Ok(Explanation {
        prediction: prediction.clone(),
        evidence: ranked.first().cloned(),
        ranked,
    })
}

/// Text report: prediction, chosen rule in source syntax, per-atom
/// probabilities, posterior, fuzzy truth.
pub fn render_report(explanation: &Explanation, label: &str) -> String {
    let mut out = String::new();
    let conf = explanation
        .prediction
        .distribution
        .get(explanation.prediction.hard)
        .copied()
        .unwrap_or(0.0);
    out.push_str(&format!("prediction: {label} (confidence {conf:.4})\n"));
    match &explanation.evidence {
        None => out.push_str("evidence: none (no candidate rules)\n"),
        Some(e) => {
            out.push_str(&format!("evidence: {}\n", e.rule.render()));
            out.push_str(&format!("  posterior: {:.6}\n", e.posterior));
            out.push_str(&format!("  fuzzy truth: {:.6}\n", e.fuzzy_truth));
            out.push_str("  atoms:\n");
            for (key, p) in &e.atom_scores {
                out.push_str(&format!("    {key} = {p:.6}\n"));
            }
        }
    }
    out
}

/// The head value produced by inductive reasoning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadValue {
    Int(i64),
    Label(String),
}

/// One body atom with the concept label chosen for it.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStep {
    pub atom: String,
    pub label: i64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InductiveResult {
    pub head_value: HeadValue,
    pub reasoning_path: Vec<PathStep>,
}

fn constant_of(term: &EntityTerm, order: &[String]) -> usize {
    match term {
        EntityTerm::Variable(v) => order.iter().position(|x| x == v).unwrap(),
        EntityTerm::Constant(c) => *c,
    }
}

fn render_bound_atom(atom: &Atom, order: &[String], value: Option<i64>) -> String {
    let ents: Vec<String> = atom
        .entity_terms
        .iter()
        .map(|t| format!("c{}", constant_of(t, order)))
        .collect();
    match value {
        Some(v) => format!("{}({};{v})", atom.predicate, ents.join(",")),
        None => format!("{}({})", atom.predicate, ents.join(",")),
    }
}

/// Grounds the first rule of `ruleset_new` positionally over the inputs (the
/// i-th entity variable binds the i-th feature vector), labels each body
/// concept by argmax score, and evaluates the head's value expression on
/// those labels.
pub fn infer_inductive(
    ruleset_new: &RuleSet,
    concept: &ConceptNetworkState,
    inputs: &[FeatureVector],
) -> Result<InductiveResult> {
    let rule = ruleset_new.rules.first().ok_or(InferError::NoRules)?;
    let order: Vec<String> = rule
        .entity_variables()
        .into_iter()
        .map(str::to_owned)
        .collect();
    if order.len() != inputs.len() {
        return Err(InferError::EntityCount {
            rule: rule.id.clone(),
            expected: order.len(),
            got: inputs.len(),
        });
    }
    let mut value_bindings: BTreeMap<String, i64> = BTreeMap::new();
    let mut path = Vec::new();
    for atom in &rule.body {
        let scorer = concept
            .scorer(&atom.predicate)
            .ok_or_else(|| NeuralError::UntrainedPredicate {
                name: atom.predicate.clone(),
            })?;
        let entity = constant_of(&atom.entity_terms[0], &order);
        let feature = inputs
            .get(entity)
            .ok_or(NeuralError::MissingFeature {
                constant: entity,
                count: inputs.len(),
            })?;
        match scorer {
            Scorer::Value { lo, .. } => {
                let lo = *lo;
                let dist = concept.value_distribution(&atom.predicate, feature)?;
                let arg = crate::neural::argmax(&dist);
                let label = lo + arg as i64;
                if let Some(ValueTerm::Variable(v)) = atom.value_terms.first() {
                    value_bindings.insert(v.clone(), label);
                }
                path.push(PathStep {
                    atom: render_bound_atom(atom, &order, Some(label)),
                    label,
                    score: dist[arg],
                });
            }
            Scorer::Unary { .. } | Scorer::Binary { .. } => {
                let mut ground = crate::ground::GroundAtom {
                    key: String::new(),
                    predicate: atom.predicate.clone(),
                    entity_args: atom
                        .entity_terms
                        .iter()
                        .map(|t| constant_of(t, &order))
                        .collect(),
                    value_args: Vec::new(),
                    observed: None,
                    score: 0.5,
                };
                ground.key = crate::ground::atom_key(&ground.predicate, &ground.entity_args, &[]);
                let score = concept.score(&ground, inputs)?;
                let label = i64::from(score >= 0.5);
                path.push(PathStep {
                    atom: render_bound_atom(atom, &order, None),
                    label,
                    score,
                });
            }
        }
    }
    let head = rule.head.first().ok_or_else(|| InferError::UnboundHead {
        rule: rule.id.clone(),
        variable: "head".into(),
    })?;
    let head_value = match head.value_terms.first() {
        None => HeadValue::Label(head.predicate.clone()),
        Some(ValueTerm::Literal(v)) => HeadValue::Int(*v),
        Some(ValueTerm::Variable(v)) => HeadValue::Int(*value_bindings.get(v).ok_or_else(
            || InferError::UnboundHead {
                rule: rule.id.clone(),
                variable: v.clone(),
            },
        )?),
        Some(ValueTerm::Expr(expr)) => {
            let out = expr
                .eval(&|name| value_bindings.get(name).copied())
                .ok_or_else(|| InferError::UnboundHead {
                    rule: rule.id.clone(),
                    variable: expr.output.clone(),
                })?;
            HeadValue::Int(out)
        }
    };
    Ok(InductiveResult {
        head_value,
        reasoning_path: path,
    })
}

/// Mean Lukasiewicz truth over the groundings of one rule.
pub fn rule_confidence(
    graph: &MlnGraph,
    rule_id: &str,
    assignment: &AtomAssignment,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for gi in 0..graph.ground_rules.len() {
        if graph.ground_rules[gi].rule_id == rule_id {
            total += ground_rule_truth(graph, gi, assignment);
            count += 1;
        }
    }
    if count == 0 {
        return Err(InferError::NoGroundings {
            rule: rule_id.into(),
        });
    }
    Ok(total / count as f64)
}
