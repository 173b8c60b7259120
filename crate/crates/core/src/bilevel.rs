//! Bi-level model: high-level pseudo-label nodes bridged to ground atoms.
//!
//! Each high-level node carries a pseudo-label distribution whose slots name
//! ground atoms, either a class predicate over the node's constants or one
//! value of a value-typed predicate. Bridges align distribution slots with
//! atom scores; the bridge potential of a node is the Euclidean distance
//! between the aligned vectors, which reduces to |a - b| for a single slot.
//!
//! The logic objective comes in two forms. `o_logic` is the literal
//! log-unnormalized score -sum(phi_b) + sum_r w_r phi_l with soft rule
//! truths. `o_logic_expected` replaces the energy with its exact expectation
//! under the factorized Bernoulli posterior Q given by the atom scores, adds
//! the per-atom entropy, and returns gradients with respect to scores and
//! label slots; it coincides with `o_logic` at Boolean scores and is the
//! quantity the E-step climbs. Mean-field passes update free atoms by the
//! expected energy gap, which maximizes the ELBO coordinate-wise.

use thiserror::Error;

use crate::ground::{atom_key, AtomId, MlnGraph};
use crate::mln::{rule_potential, sigmoid, AtomAssignment, MlnError, WeightVector};
use crate::neural::{argmax, PseudoLabel};

/// Largest number of unobserved atoms enumerated inside one grounding.
pub const MAX_GROUNDING_ATOMS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BiLevelError {
    #[error("trade-off factor {name}={value} outside [0,1]")]
    FactorOutOfRange { name: &'static str, value: f64 },
    #[error("node {node} has no bridge")]
    Unbridged { node: String },
    #[error("node {node} has {slots} slots but a {label}-way label")]
    SlotMismatch {
        node: String,
        slots: usize,
        label: usize,
    },
    #[error("grounding of rule {rule} spans {count} unobserved atoms (max {max})")]
    GroundingTooLarge {
        rule: String,
        count: usize,
        max: usize,
    },
    #[error(transparent)]
    Mln(#[from] MlnError),
}

pub type Result<T> = std::result::Result<T, BiLevelError>;

/// E-step trade-off factors, each in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeOff {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TradeOff {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, value) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(BiLevelError::FactorOutOfRange { name, value });
            }
        }
        Ok(TradeOff { alpha, beta, gamma })
    }
}

/// What one distribution slot of a high-level node refers to.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotRef {
    /// Atom `predicate(constants)`.
    Class { predicate: String },
    /// Atom `predicate(constants; value)`.
    Value { predicate: String, value: i64 },
}

impl SlotRef {
    pub fn key(&self, constants: &[usize]) -> String {
        match self {
            SlotRef::Class { predicate } => atom_key(predicate, constants, &[]),
            SlotRef::Value { predicate, value } => atom_key(predicate, constants, &[*value]),
        }
    }
}

/// One high-level prediction: a pseudo-label whose slots name ground atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct HighLevelNode {
    pub id: String,
    pub constants: Vec<usize>,
    pub slots: Vec<SlotRef>,
    pub label: PseudoLabel,
}

/// A (node slot, ground atom) alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeEdge {
    pub node: usize,
    pub slot: usize,
    pub atom: AtomId,
}

#[derive(Debug, Clone)]
pub struct BiLevelModel {
    pub nodes: Vec<HighLevelNode>,
    pub mln: MlnGraph,
    pub bridges: Vec<BridgeEdge>,
    pub weights: WeightVector,
    /// Per node and slot, the bridged atom if the identifier matched.
    slot_atoms: Vec<Vec<Option<AtomId>>>,
}

impl BiLevelModel {
    pub fn slot_atom(&self, node: usize, slot: usize) -> Option<AtomId> {
        self.slot_atoms[node][slot]
    }

    /// Bridged (slot, atom) pairs of one node, in slot order.
    pub fn bridged_slots(&self, node: usize) -> impl Iterator<Item = (usize, AtomId)> + '_ {
        self.slot_atoms[node]
            .iter()
            .enumerate()
            .filter_map(|(slot, atom)| atom.map(|a| (slot, a)))
    }

    /// Indices of nodes whose identifiers matched no atom at all.
    pub fn unbridged_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&n| self.slot_atoms[n].iter().all(Option::is_none))
            .collect()
    }

    pub fn set_weights(&mut self, weights: WeightVector) {
        self.weights = weights;
    }
}

/// Bridges every slot whose key resolves to an atom of `mln`. Atoms are
/// deduplicated by key in the graph, so a slot matches at most one atom;
/// nodes with no match anywhere stay in the model flagged unbridged.
pub fn attach_levels(
    nodes: Vec<HighLevelNode>,
    mln: MlnGraph,
    weights: WeightVector,
) -> Result<BiLevelModel> {
    let mut bridges = Vec::new();
    let mut slot_atoms = Vec::with_capacity(nodes.len());
    for (n, node) in nodes.iter().enumerate() {
        if node.slots.len() != node.label.distribution.len() {
            return Err(BiLevelError::SlotMismatch {
                node: node.id.clone(),
                slots: node.slots.len(),
                label: node.label.distribution.len(),
            });
        }
        let mut per_slot = Vec::with_capacity(node.slots.len());
        for (s, slot) in node.slots.iter().enumerate() {
            let atom = mln.atom_id(&slot.key(&node.constants));
            if let Some(a) = atom {
                bridges.push(BridgeEdge {
                    node: n,
                    slot: s,
                    atom: a,
                });
            }
            per_slot.push(atom);
        }
        slot_atoms.push(per_slot);
    }
    Ok(BiLevelModel {
        nodes,
        mln,
        bridges,
        weights,
        slot_atoms,
    })
}

/// Euclidean distance between a node's bridged label slots and the bridged
/// atom scores; |a - b| when only one slot is bridged. Errors when the node
/// has no bridge at all.
pub fn bridge_potential(
    model: &BiLevelModel,
    node: usize,
    assignment: &AtomAssignment,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut any = false;
    for (slot, atom) in model.bridged_slots(node) {
        let d = model.nodes[node].label.distribution[slot] - assignment.get(atom);
        sum += d * d;
        any = true;
    }
    if !any {
        return Err(BiLevelError::Unbridged {
            node: model.nodes[node].id.clone(),
        });
    }
    Ok(sum.sqrt())
}

/// Literal logic objective: -sum over bridged nodes of phi_b plus
/// sum_r w_r phi_l with soft rule truths. With no bridges this is exactly
/// the log numerator of the MLN joint.
pub fn o_logic(model: &BiLevelModel, assignment: &AtomAssignment) -> Result<f64> {
    let mut total = 0.0;
    for node in 0..model.nodes.len() {
        if model.bridged_slots(node).next().is_some() {
            total -= bridge_potential(model, node, assignment)?;
        }
    }
    for r in 0..model.weights.len() {
        total += model.weights.get(r) * rule_potential(&model.mln, r, assignment);
    }
    Ok(total)
}

/// How one grounding reads during expectation: the unobserved atoms carrying
/// Bernoulli scores, plus the shape of the one failure event. An implication
/// is false exactly when every body literal is true and every head literal is
/// false, so the expectation is one minus the probability of that event.
struct GroundingLayout {
    free: Vec<AtomId>,
    /// Distinct free indices the failure event needs true (body literals).
    body_free: Vec<usize>,
    /// Distinct free indices the failure event needs false (head literals).
    head_free: Vec<usize>,
    /// No assignment can falsify the grounding: a body literal is observed
    /// false, a head literal is observed true, or one free atom would have to
    /// be both true and false.
    always_true: bool,
}

fn layout(graph: &MlnGraph, ground_rule: usize) -> Result<GroundingLayout> {
    let g = &graph.ground_rules[ground_rule];
    let mut free: Vec<AtomId> = Vec::new();
    let mut body_free: Vec<usize> = Vec::new();
    let mut head_free: Vec<usize> = Vec::new();
    let mut always_true = false;
    let slot_of = |atom: AtomId, free: &mut Vec<AtomId>| -> usize {
        free.iter().position(|&a| a == atom).unwrap_or_else(|| {
            free.push(atom);
            free.len() - 1
        })
    };
    for &atom in &g.body {
        match graph.atoms[atom].observed {
            Some(false) => always_true = true,
            Some(true) => {}
            None => {
                let i = slot_of(atom, &mut free);
                if !body_free.contains(&i) {
                    body_free.push(i);
                }
            }
        }
    }
    for &atom in &g.head {
        match graph.atoms[atom].observed {
            Some(true) => always_true = true,
            Some(false) => {}
            None => {
                let i = slot_of(atom, &mut free);
                if !head_free.contains(&i) {
                    head_free.push(i);
                }
            }
        }
    }
    if body_free.iter().any(|i| head_free.contains(i)) {
        always_true = true;
    }
    if free.len() > MAX_GROUNDING_ATOMS {
        return Err(BiLevelError::GroundingTooLarge {
            rule: g.rule_id.clone(),
            count: free.len(),
            max: MAX_GROUNDING_ATOMS,
        });
    }
    Ok(GroundingLayout {
        free,
        body_free,
        head_free,
        always_true,
    })
}

/// Expected Boolean truth of one grounding under independent Bernoulli
/// scores, with `forced` overriding individual free atoms.
fn expected_truth_forced(
    layout: &GroundingLayout,
    scores: &[f64],
    forced: &[(usize, bool)],
) -> f64 {
    if layout.always_true {
        return 1.0;
    }
    let p_true = |i: usize| -> f64 {
        match forced.iter().find(|&&(j, _)| j == i) {
            Some(&(_, v)) => {
                if v {
                    1.0
                } else {
                    0.0
                }
            }
            None => scores[layout.free[i]],
        }
    };
    let mut fail = 1.0;
    for &i in &layout.body_free {
        fail *= p_true(i);
        if fail == 0.0 {
            return 1.0;
        }
    }
    for &i in &layout.head_free {
        fail *= 1.0 - p_true(i);
        if fail == 0.0 {
            return 1.0;
        }
    }
    1.0 - fail
}

/// Expected energy sum_g w_g E_Q[truth_g] and its gradient per atom score.
pub fn expected_energy_with_grad(
    graph: &MlnGraph,
    weights: &WeightVector,
    assignment: &AtomAssignment,
) -> Result<(f64, Vec<f64>)> {
    let scores = assignment.as_slice();
    let mut energy = 0.0;
    let mut grad = vec![0.0; graph.atoms.len()];
    for (gi, g) in graph.ground_rules.iter().enumerate() {
        let w = weights.get(g.rule_index);
        let lay = layout(graph, gi)?;
        energy += w * expected_truth_forced(&lay, scores, &[]);
        for (i, &atom) in lay.free.iter().enumerate() {
            let up = expected_truth_forced(&lay, scores, &[(i, true)]);
            let down = expected_truth_forced(&lay, scores, &[(i, false)]);
            grad[atom] += w * (up - down);
        }
    }
    if !energy.is_finite() {
        return Err(BiLevelError::Mln(MlnError::NonFiniteGradient));
    }
    Ok((energy, grad))
}

/// Bernoulli entropy of every unobserved atom, with 0 log 0 read as 0, and
/// its d/dq = log((1-q)/q) with q clamped away from the endpoints.
pub fn assignment_entropy(graph: &MlnGraph, assignment: &AtomAssignment) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; graph.atoms.len()];
    for (i, atom) in graph.atoms.iter().enumerate() {
        if atom.observed.is_some() {
            continue;
        }
        let q = assignment.get(i);
        let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
        total += h(q) + h(1.0 - q);
        let c = q.clamp(1e-9, 1.0 - 1e-9);
        grad[i] = ((1.0 - c) / c).ln();
    }
    (total, grad)
}

/// Evidence lower bound of the factorized posterior: expected energy plus
/// entropy. Bounded above by the exact log partition of the pinned graph.
pub fn elbo(model: &BiLevelModel, assignment: &AtomAssignment) -> Result<f64> {
    let (energy, _) = expected_energy_with_grad(&model.mln, &model.weights, assignment)?;
    let (entropy, _) = assignment_entropy(&model.mln, assignment);
    Ok(energy + entropy)
}

/// Expected-form logic objective with gradients.
#[derive(Debug, Clone)]
pub struct ExpectedLogic {
    /// -sum phi_b + sum_g w_g E_Q[truth_g] + H(Q).
    pub value: f64,
    /// d value / d score, per atom; zero for observed atoms.
    pub grad_scores: Vec<f64>,
    /// d value / d label slot, per node and slot.
    pub grad_labels: Vec<Vec<f64>>,
    /// Mean phi_b over bridged nodes (0 when nothing is bridged).
    pub mean_bridge: f64,
    pub expected_energy: f64,
    pub entropy: f64,
}

/// Expected logic objective: bridge alignment, expected rule energy, and
/// posterior entropy, with gradients for atom scores and label slots. Equals
/// [`o_logic`] whenever all unobserved scores are Boolean.
pub fn o_logic_expected(model: &BiLevelModel, assignment: &AtomAssignment) -> Result<ExpectedLogic> {
    let (energy, mut grad_scores) =
        expected_energy_with_grad(&model.mln, &model.weights, assignment)?;
    let (entropy, entropy_grad) = assignment_entropy(&model.mln, assignment);
    for (g, eg) in grad_scores.iter_mut().zip(&entropy_grad) {
        *g += eg;
    }
    let mut grad_labels: Vec<Vec<f64>> = model
        .nodes
        .iter()
        .map(|n| vec![0.0; n.slots.len()])
        .collect();
    let mut bridge_sum = 0.0;
    let mut bridged_nodes = 0usize;
    for node in 0..model.nodes.len() {
        let pairs: Vec<(usize, AtomId)> = model.bridged_slots(node).collect();
        if pairs.is_empty() {
            continue;
        }
        let phi = bridge_potential(model, node, assignment)?;
        bridge_sum += phi;
        bridged_nodes += 1;
        if phi > 0.0 {
            for &(slot, atom) in &pairs {
                let diff = model.nodes[node].label.distribution[slot] - assignment.get(atom);
                // d(-phi)/dy = -diff/phi, d(-phi)/dq = diff/phi.
                grad_labels[node][slot] -= diff / phi;
                if model.mln.atoms[atom].observed.is_none() {
                    grad_scores[atom] += diff / phi;
                }
            }
        }
    }
    for (i, atom) in model.mln.atoms.iter().enumerate() {
        if atom.observed.is_some() {
            grad_scores[i] = 0.0;
        }
    }
    Ok(ExpectedLogic {
        value: -bridge_sum + energy + entropy,
        grad_scores,
        grad_labels,
        mean_bridge: if bridged_nodes > 0 {
            bridge_sum / bridged_nodes as f64
        } else {
            0.0
        },
        expected_energy: energy,
        entropy,
    })
}

/// alpha o_task + beta o_logic - gamma l_cro.
pub fn e_step_objective(o_task: f64, o_logic: f64, l_cro: f64, factors: TradeOff) -> Result<f64> {
    TradeOff::new(factors.alpha, factors.beta, factors.gamma)?;
    let mut total = factors.alpha * o_task;
    if factors.beta > 0.0 {
        total += factors.beta * o_logic;
    }
    if factors.gamma > 0.0 {
        total -= factors.gamma * l_cro;
    }
    Ok(total)
}

/// Expected energy gap of one atom: sum over its groundings of
/// w (E[truth | atom true] - E[truth | atom false]).
fn expected_gap(model: &BiLevelModel, assignment: &AtomAssignment, atom: AtomId) -> Result<f64> {
    let graph = &model.mln;
    let mut gap = 0.0;
    for &gi in graph.rules_of_atom(atom) {
        let g = &graph.ground_rules[gi];
        let w = model.weights.get(g.rule_index);
        let lay = layout(graph, gi)?;
        if let Some(i) = lay.free.iter().position(|&a| a == atom) {
            let up = expected_truth_forced(&lay, assignment.as_slice(), &[(i, true)]);
            let down = expected_truth_forced(&lay, assignment.as_slice(), &[(i, false)]);
            gap += w * (up - down);
        }
    }
    Ok(gap)
}

/// One ordered coordinate sweep of mean-field updates. Every unobserved,
/// unfrozen atom is set to sigma(expected energy gap), the per-coordinate
/// ELBO maximizer. Returns the largest absolute score change.
pub fn mean_field_pass(
    model: &BiLevelModel,
    assignment: &mut AtomAssignment,
    frozen: &[bool],
) -> Result<f64> {
    let graph = &model.mln;
    let mut max_delta: f64 = 0.0;
    for atom in 0..graph.atoms.len() {
        if graph.atoms[atom].observed.is_some() || frozen.get(atom).copied().unwrap_or(false) {
            continue;
        }
        let gap = expected_gap(model, assignment, atom)?;
        let new = sigmoid(gap);
        let old = assignment.get(atom);
        assignment.set(graph, atom, new)?;
        max_delta = max_delta.max((new - old).abs());
    }
    Ok(max_delta)
}

/// [`mean_field_pass`] with the bridge alignment term kept in each update:
/// a bridged atom's target becomes sigma(gap + d(-phi_b)/dq), so the node
/// label pulls the posterior with at most one logit of force per bridge
/// while a confident rule gap can still override it. Non-bridged atoms
/// update exactly as in the plain pass.
pub fn mean_field_pass_bridged(
    model: &BiLevelModel,
    assignment: &mut AtomAssignment,
    frozen: &[bool],
) -> Result<f64> {
    let graph = &model.mln;
    let mut max_delta: f64 = 0.0;
    for atom in 0..graph.atoms.len() {
        if graph.atoms[atom].observed.is_some() || frozen.get(atom).copied().unwrap_or(false) {
            continue;
        }
        let mut gap = expected_gap(model, assignment, atom)?;
        for edge in &model.bridges {
            if edge.atom != atom {
                continue;
            }
            let phi = bridge_potential(model, edge.node, assignment)?;
            if phi > 0.0 {
                let y = model.nodes[edge.node].label.distribution[edge.slot];
                gap += (y - assignment.get(atom)) / phi;
            }
        }
        let new = sigmoid(gap);
        let old = assignment.get(atom);
        assignment.set(graph, atom, new)?;
        max_delta = max_delta.max((new - old).abs());
    }
    Ok(max_delta)
}

/// Exact conditional of each node's label block given the current scores of
/// everything else. The bridged slots are read as one categorical variable:
/// each one-hot configuration e_s carries energy gap_s - phi_b(y, e_s), the
/// model's own energy at that labeling, and the block posterior is the
/// softmax over configurations. Bridged atom scores are overwritten with the
/// posterior; observed atoms and nodes without bridges are left alone.
pub fn label_block_conditional(
    model: &BiLevelModel,
    assignment: &mut AtomAssignment,
) -> Result<()> {
    for node in 0..model.nodes.len() {
        let pairs: Vec<(usize, AtomId)> = model.bridged_slots(node).collect();
        if pairs.is_empty() {
            continue;
        }
        let y = &model.nodes[node].label.distribution;
        let mut energies = Vec::with_capacity(pairs.len());
        for &(slot, atom) in &pairs {
            let gap = expected_gap(model, assignment, atom)?;
            let mut sq = 0.0;
            for &(other, _) in &pairs {
                let target = if other == slot { 1.0 } else { 0.0 };
                let d = y[other] - target;
                sq += d * d;
            }
            energies.push(gap - sq.sqrt());
        }
        let peak = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mass: Vec<f64> = energies.iter().map(|e| (e - peak).exp()).collect();
        let z: f64 = mass.iter().sum();
        for (&(_, atom), m) in pairs.iter().zip(&mass) {
            if model.mln.atoms[atom].observed.is_none() {
                assignment.set(&model.mln, atom, m / z)?;
            }
        }
    }
    Ok(())
}

/// Replaces each bridged slot of a node's distribution with the bridged
/// atom's current score, then renormalizes; unbridged nodes pass through.
pub fn revise_labels(model: &BiLevelModel, assignment: &AtomAssignment) -> Vec<PseudoLabel> {
    model
        .nodes
        .iter()
        .enumerate()
        .map(|(n, node)| {
            let pairs: Vec<(usize, AtomId)> = model.bridged_slots(n).collect();
            if pairs.is_empty() {
                return node.label.clone();
            }
            let mut dist = node.label.distribution.clone();
            for (slot, atom) in pairs {
                dist[slot] = assignment.get(atom);
            }
            let sum: f64 = dist.iter().sum();
            if sum > 0.0 {
                for v in &mut dist {
                    *v /= sum;
                }
            } else {
                let uniform = 1.0 / dist.len() as f64;
                dist.iter_mut().for_each(|v| *v = uniform);
            }
            PseudoLabel {
                hard: argmax(&dist),
                distribution: dist,
            }
        })
        .collect()
}
