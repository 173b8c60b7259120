//! Markov-logic math over a ground graph: weighted rule potentials, the
//! exact partition function on small graphs, blanket conditionals, the
//! pseudo-log-likelihood, and its analytic weight gradient for the M-step.

use thiserror::Error;

use crate::ground::{AtomId, MlnGraph};

/// Exact enumeration is limited to this many unobserved atoms.
pub const MAX_EXACT_ATOMS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlnError {
    #[error("{count} unobserved atoms exceed the exact-enumeration limit {max}")]
    TooManyUnobserved { count: usize, max: usize },
    #[error("score {value} outside [0, 1]")]
    Domain { value: f64 },
    #[error("assignment length {got} does not match atom count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("observed atom {key} cannot take score {value}")]
    ObservedPinned { key: String, value: f64 },
    #[error("weight vector length {got} does not match rule count {expected}")]
    WeightLength { got: usize, expected: usize },
    #[error("non-finite weight {value}")]
    NonFiniteWeight { value: f64 },
    #[error("non-finite gradient in M-step")]
    NonFiniteGradient,
    #[error("rule index {index} out of range for {count} rules")]
    UnknownRule { index: usize, count: usize },
    #[error("atom id {id} out of range for {count} atoms")]
    UnknownAtomId { id: usize, count: usize },
}

pub type Result<T> = std::result::Result<T, MlnError>;

/// One weight per source rule, in rule-list order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    /// All-ones initialization for `n` rules.
    pub fn ones(n: usize) -> Self {
        WeightVector {
            weights: vec![1.0; n],
        }
    }

    pub fn from_vec(weights: Vec<f64>) -> Result<Self> {
        for &w in &weights {
            if !w.is_finite() {
                return Err(MlnError::NonFiniteWeight { value: w });
            }
        }
        Ok(WeightVector { weights })
    }

    pub fn get(&self, rule_index: usize) -> f64 {
        self.weights[rule_index]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Soft-truth score per ground atom, indexed by atom id. Observed atoms are
/// pinned to their Boolean value.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomAssignment {
    scores: Vec<f64>,
}

impl AtomAssignment {
    /// Builds an assignment from per-atom scores, pinning observed atoms.
    pub fn new(graph: &MlnGraph, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != graph.atoms.len() {
            return Err(MlnError::LengthMismatch {
                got: scores.len(),
                expected: graph.atoms.len(),
            });
        }
        let mut out = Vec::with_capacity(scores.len());
        for (atom, &s) in graph.atoms.iter().zip(&scores) {
            if !(0.0..=1.0).contains(&s) || !s.is_finite() {
                return Err(MlnError::Domain { value: s });
            }
            match atom.observed {
                Some(truth) => {
                    let pinned = f64::from(truth);
                    if (s - pinned).abs() > 1e-9 {
                        return Err(MlnError::ObservedPinned {
                            key: atom.key.clone(),
                            value: s,
                        });
                    }
                    out.push(pinned);
                }
                None => out.push(s),
            }
        }
        Ok(AtomAssignment { scores: out })
    }

    /// Assignment taken from the graph's current atom scores; observed atoms
    /// use their Boolean value.
    pub fn from_graph(graph: &MlnGraph) -> Self {
        let scores = graph
            .atoms
            .iter()
            .map(|a| match a.observed {
                Some(truth) => f64::from(truth),
                None => a.score,
            })
            .collect();
        AtomAssignment { scores }
    }

    pub fn get(&self, atom: AtomId) -> f64 {
        self.scores[atom]
    }

    /// Updates one unobserved atom's score.
    pub fn set(&mut self, graph: &MlnGraph, atom: AtomId, score: f64) -> Result<()> {
        if atom >= self.scores.len() {
            return Err(MlnError::UnknownAtomId {
                id: atom,
                count: self.scores.len(),
            });
        }
        if !(0.0..=1.0).contains(&score) || !score.is_finite() {
            return Err(MlnError::Domain { value: score });
        }
        if graph.atoms[atom].observed.is_some() {
            return Err(MlnError::ObservedPinned {
                key: graph.atoms[atom].key.clone(),
                value: score,
            });
        }
        self.scores[atom] = score;
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x), overflow-safe.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_weights(graph: &MlnGraph, weights: &WeightVector) -> Result<()> {
    let max_rule = graph
        .ground_rules
        .iter()
        .map(|gr| gr.rule_index + 1)
        .max()
        .unwrap_or(0);
    if weights.len() < max_rule {
        return Err(MlnError::WeightLength {
            got: weights.len(),
            expected: max_rule,
        });
    }
    Ok(())
}

fn truth_from_scores(graph: &MlnGraph, ground_rule: usize, scores: &[f64]) -> f64 {
    let gr = &graph.ground_rules[ground_rule];
    let body_sum: f64 = gr.body.iter().map(|&a| scores[a]).sum();
    let conj = (body_sum - (gr.body.len() as f64 - 1.0)).max(0.0).min(1.0);
    let head_sum: f64 = gr.head.iter().map(|&a| scores[a]).sum();
    let disj = head_sum.min(1.0).max(0.0);
    (1.0 - conj + disj).min(1.0)
}

/// Soft truth of one ground rule under an assignment.
pub fn ground_rule_truth(graph: &MlnGraph, ground_rule: usize, assignment: &AtomAssignment) -> f64 {
    truth_from_scores(graph, ground_rule, &assignment.scores)
}

/// Potential of one source rule: sum of soft truths over its groundings. At
/// Boolean assignments this is the count of satisfied groundings.
pub fn rule_potential(
    graph: &MlnGraph,
    rule_index: usize,
    assignment: &AtomAssignment,
) -> f64 {
    (0..graph.ground_rules.len())
        .filter(|&g| graph.ground_rules[g].rule_index == rule_index)
        .map(|g| ground_rule_truth(graph, g, assignment))
        .sum()
}

/// Log of the unnormalized joint: sum over rules of w_r times the rule
/// potential.
pub fn log_joint_unnormalized(
    graph: &MlnGraph,
    weights: &WeightVector,
    assignment: &AtomAssignment,
) -> Result<f64> {
    check_weights(graph, weights)?;
    let mut total = 0.0;
    for g in 0..graph.ground_rules.len() {
        let w = weights.get(graph.ground_rules[g].rule_index);
        total += w * ground_rule_truth(graph, g, assignment);
    }
    Ok(total)
}

/// Log partition function by enumeration over the Boolean completions of the
/// unobserved atoms (observed atoms stay pinned). Limited to
/// [`MAX_EXACT_ATOMS`] unobserved atoms.
pub fn partition_exact(graph: &MlnGraph, weights: &WeightVector) -> Result<f64> {
    check_weights(graph, weights)?;
    let free: Vec<AtomId> = (0..graph.atoms.len())
        .filter(|&a| graph.atoms[a].observed.is_none())
        .collect();
    if free.len() > MAX_EXACT_ATOMS {
        return Err(MlnError::TooManyUnobserved {
            count: free.len(),
            max: MAX_EXACT_ATOMS,
        });
    }
    let mut scores: Vec<f64> = graph
        .atoms
        .iter()
        .map(|a| match a.observed {
            Some(truth) => f64::from(truth),
            None => 0.0,
        })
        .collect();
    let mut energies = Vec::with_capacity(1usize << free.len());
    for mask in 0u64..(1u64 << free.len()) {
        for (bit, &a) in free.iter().enumerate() {
            scores[a] = f64::from(mask >> bit & 1 == 1);
        }
        let assignment = AtomAssignment {
            scores: scores.clone(),
        };
        energies.push(log_joint_unnormalized(graph, weights, &assignment)?);
    }
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(0.0); // empty graph: single configuration with energy 0
    }
    let sum: f64 = energies.iter().map(|e| (e - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Soft truths of one ground rule with `atom` forced to 1 and to 0, all other
/// atoms read from `scores`. Single pass, no mutation.
fn truth_updown(graph: &MlnGraph, ground_rule: usize, atom: AtomId, scores: &[f64]) -> (f64, f64) {
    let gr = &graph.ground_rules[ground_rule];
    let mut body_excl = 0.0;
    let mut body_hits = 0.0;
    for &a in &gr.body {
        if a == atom {
            body_hits += 1.0;
        } else {
            body_excl += scores[a];
        }
    }
    let mut head_excl = 0.0;
    let mut head_hits = 0.0;
    for &a in &gr.head {
        if a == atom {
            head_hits += 1.0;
        } else {
            head_excl += scores[a];
        }
    }
    let slack = gr.body.len() as f64 - 1.0;
    let eval = |v: f64| {
        let conj = (body_excl + body_hits * v - slack).max(0.0).min(1.0);
        let disj = (head_excl + head_hits * v).min(1.0).max(0.0);
        (1.0 - conj + disj).min(1.0)
    };
    (eval(1.0), eval(0.0))
}

/// Local energy difference of `atom`: sum over its ground rules of
/// w * (truth with the atom at 1 minus truth with the atom at 0), all other
/// atoms held at `assignment`.
fn energy_gap(
    graph: &MlnGraph,
    weights: &WeightVector,
    atom: AtomId,
    assignment: &AtomAssignment,
) -> f64 {
    let mut gap = 0.0;
    for &g in graph.rules_of_atom(atom) {
        let w = weights.get(graph.ground_rules[g].rule_index);
        let (up, down) = truth_updown(graph, g, atom, &assignment.scores);
        gap += w * (up - down);
    }
    gap
}

/// Conditional P(atom = 1 | Markov blanket at `assignment`), computed in the
/// log domain as a sigmoid of the local energy difference.
pub fn conditional(
    graph: &MlnGraph,
    weights: &WeightVector,
    atom: AtomId,
    assignment: &AtomAssignment,
) -> Result<f64> {
    if atom >= graph.atoms.len() {
        return Err(MlnError::UnknownAtomId {
            id: atom,
            count: graph.atoms.len(),
        });
    }
    check_weights(graph, weights)?;
    Ok(sigmoid(energy_gap(graph, weights, atom, assignment)))
}

/// Pseudo-log-likelihood: per-atom expected log conditional, with the atom's
/// own value weighted by its score in `q_scores` and the blanket held at
/// `q_scores`. Always non-positive.
pub fn pseudo_log_likelihood(
    graph: &MlnGraph,
    weights: &WeightVector,
    q_scores: &AtomAssignment,
) -> Result<f64> {
    check_weights(graph, weights)?;
    let mut total = 0.0;
    for atom in 0..graph.atoms.len() {
        let gap = energy_gap(graph, weights, atom, q_scores);
        let q = q_scores.get(atom);
        // q*log sigma(gap) + (1-q)*log(1 - sigma(gap)) = q*gap - log(1+e^gap)
        total += q * gap - log1p_exp(gap);
    }
    Ok(total)
}

/// Analytic gradient of [`pseudo_log_likelihood`] with respect to each rule
/// weight. Atom i contributes (q_i - sigma_i) times the summed truth
/// difference of rule r's groundings that touch it; when that difference is
/// one per connecting rule, the contribution reduces to q_i - P(A_i | MB).
pub fn weight_gradient(
    graph: &MlnGraph,
    weights: &WeightVector,
    q_scores: &AtomAssignment,
) -> Result<Vec<f64>> {
    check_weights(graph, weights)?;
    let mut grad = vec![0.0; weights.len()];
    for atom in 0..graph.atoms.len() {
        let gap = energy_gap(graph, weights, atom, q_scores);
        let residual = q_scores.get(atom) - sigmoid(gap);
        for &g in graph.rules_of_atom(atom) {
            let rule = graph.ground_rules[g].rule_index;
            let (up, down) = truth_updown(graph, g, atom, &q_scores.scores);
            grad[rule] += residual * (up - down);
        }
    }
    Ok(grad)
}

/// Result of an M-step: updated weights and the pseudo-log-likelihood after
/// each accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome {
    pub weights: WeightVector,
    pub pll_trace: Vec<f64>,
}

/// Gradient ascent on the summed pseudo-log-likelihood of several graphs,
/// with monotone backtracking (learning-rate halving, at most 5 halvings per
/// step). A step that still decreases the objective after the halvings is
/// rejected.
pub fn m_step_batch(
    problems: &[(&MlnGraph, &AtomAssignment)],
    weights: &WeightVector,
    lr: f64,
    steps: usize,
) -> Result<MStepOutcome> {
    let total_pll = |w: &WeightVector| -> Result<f64> {
        let mut total = 0.0;
        for (graph, q) in problems {
            total += pseudo_log_likelihood(graph, w, q)?;
        }
        Ok(total)
    };
    let mut current = weights.clone();
    let mut current_pll = total_pll(&current)?;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut grad = vec![0.0; current.len()];
        for (graph, q) in problems {
            for (slot, g) in grad.iter_mut().zip(weight_gradient(graph, &current, q)?) {
                *slot += g;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(MlnError::NonFiniteGradient);
        }
        let mut step_lr = lr;
        let mut accepted = false;
        for _ in 0..=5 {
            let candidate = WeightVector::from_vec(
                current
                    .as_slice()
                    .iter()
                    .zip(&grad)
                    .map(|(w, g)| w + step_lr * g)
                    .collect(),
            )?;
            let pll = total_pll(&candidate)?;
            if pll >= current_pll {
                current = candidate;
                current_pll = pll;
                accepted = true;
                break;
            }
            step_lr *= 0.5;
        }
        trace.push(current_pll);
        if !accepted {
            break;
        }
    }
    Ok(MStepOutcome {
        weights: current,
        pll_trace: trace,
    })
}

/// Single-graph wrapper around [`m_step_batch`].
pub fn m_step(
    graph: &MlnGraph,
    weights: &WeightVector,
    q_scores: &AtomAssignment,
    lr: f64,
    steps: usize,
) -> Result<MStepOutcome> {
    m_step_batch(&[(graph, q_scores)], weights, lr, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground::{ground_rules, ConstantTable, ValueDomains};
    use crate::logic::parse_rules;

    const TOL: f64 = 1e-12;

    fn chain_graph(weight: f64) -> MlnGraph {
        let src = format!("pred b/1 latent\npred h/1 latent\nimp: b(x) => h(x) :: {weight}\n");
        let set = parse_rules(&src).unwrap();
        ground_rules(&set, &ConstantTable::of_size(1), &ValueDomains::default(), 1000).unwrap()
    }

    fn r1_graph() -> MlnGraph {
        let src = "\
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred leopard/1
R1: likecat(x) & tawny(x) & spot(x) => leopard(x) :: 2.0
";
        let set = parse_rules(src).unwrap();
        ground_rules(&set, &ConstantTable::of_size(1), &ValueDomains::default(), 1000).unwrap()
    }

    #[test]
    fn partition_trivial_cases() {
        let empty = MlnGraph::default();
        assert_eq!(partition_exact(&empty, &WeightVector::ones(0)).unwrap(), 0.0);

        // One free atom, no rules touching it: log 2.
        let src = "pred p/1 latent\npred q/1 latent\np(x) => q(x) :: 0.0\n";
        let set = parse_rules(src).unwrap();
        let graph =
            ground_rules(&set, &ConstantTable::of_size(1), &ValueDomains::default(), 1000)
                .unwrap();
        let z = partition_exact(&graph, &WeightVector::from_vec(vec![0.0]).unwrap()).unwrap();
        assert!((z - (4.0f64).ln()).abs() < TOL); // two free atoms at weight 0

        let graph = chain_graph(1.0);
        let z = partition_exact(&graph, &WeightVector::ones(1)).unwrap();
        // Configurations (0,0), (0,1), (1,1) satisfy the rule; (1,0) does not.
        let expected = (3.0 * 1.0f64.exp() + 1.0).ln();
        assert!((z - expected).abs() < TOL);
    }

    #[test]
    fn conditional_hand_values() {
        let graph = r1_graph();
        let head = graph.atom_id("leopard(c0)").unwrap();
        let mut scores = vec![1.0; graph.atoms.len()];
        scores[head] = 0.5;
        let assignment = AtomAssignment::new(&graph, scores).unwrap();
        let p = conditional(&graph, &WeightVector::from_vec(vec![2.0]).unwrap(), head, &assignment)
            .unwrap();
        let expected = 2.0f64.exp() / (2.0f64.exp() + 1.0); // 0.8807970779778823
        assert!((p - expected).abs() < TOL);
        assert!((p - 0.8807970779778823).abs() < TOL);
    }

    #[test]
    fn conditional_isolated_atom_is_half() {
        let graph = chain_graph(0.0);
        let assignment = AtomAssignment::from_graph(&graph);
        for atom in 0..graph.atoms.len() {
            let p = conditional(&graph, &WeightVector::ones(1), atom, &assignment).unwrap();
            // Weight 1 but the rule exists; use zero weights for true isolation.
            let p0 =
                conditional(&graph, &WeightVector::from_vec(vec![0.0]).unwrap(), atom, &assignment)
                    .unwrap();
            assert!((p0 - 0.5).abs() < TOL);
            assert!(p.is_finite());
        }
    }

    #[test]
    fn pll_isolated_atom() {
        let graph = chain_graph(0.0);
        let mut scores = vec![0.0; graph.atoms.len()];
        scores[0] = 1.0;
        let q = AtomAssignment::new(&graph, scores).unwrap();
        let pll =
            pseudo_log_likelihood(&graph, &WeightVector::from_vec(vec![0.0]).unwrap(), &q).unwrap();
        // Two atoms, each an isolated coin: 2 * log 0.5.
        assert!((pll - 2.0 * 0.5f64.ln()).abs() < TOL);
        assert!(pll <= 0.0);
    }

    #[test]
    fn gradient_zero_when_conditionals_match_targets() {
        let graph = chain_graph(0.0);
        let scores = vec![0.5; graph.atoms.len()];
        let q = AtomAssignment::new(&graph, scores).unwrap();
        let grad =
            weight_gradient(&graph, &WeightVector::from_vec(vec![0.0]).unwrap(), &q).unwrap();
        for g in grad {
            assert!(g.abs() < TOL);
        }
    }

    #[test]
    fn gradient_observed_head_hand_value() {
        let mut graph = r1_graph();
        for atom in 0..graph.atoms.len() {
            graph.atoms[atom].observed = Some(true);
        }
        let q = AtomAssignment::from_graph(&graph);
        let w = WeightVector::from_vec(vec![2.0]).unwrap();
        let grad = weight_gradient(&graph, &w, &q).unwrap();
        // Only the head atom has a nonzero truth difference; its residual is
        // 1 - sigma(2) = 0.1192029220221175.
        let expected = 1.0 - 2.0f64.exp() / (2.0f64.exp() + 1.0);
        assert!((grad[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let graph = r1_graph();
        let scores: Vec<f64> = (0..graph.atoms.len())
            .map(|i| 0.15 + 0.17 * i as f64)
            .collect();
        let q = AtomAssignment::new(&graph, scores).unwrap();
        let w = WeightVector::from_vec(vec![0.7]).unwrap();
        let grad = weight_gradient(&graph, &w, &q).unwrap();
        let eps = 1e-5;
        let up = pseudo_log_likelihood(
            &graph,
            &WeightVector::from_vec(vec![0.7 + eps]).unwrap(),
            &q,
        )
        .unwrap();
        let down = pseudo_log_likelihood(
            &graph,
            &WeightVector::from_vec(vec![0.7 - eps]).unwrap(),
            &q,
        )
        .unwrap();
        let fd = (up - down) / (2.0 * eps);
        let rel = (grad[0] - fd).abs() / grad[0].abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-4, "analytic {} vs fd {}", grad[0], fd);
    }

    #[test]
    fn m_step_monotone_and_guarded() {
        let mut graph = r1_graph();
        for atom in 0..graph.atoms.len() {
            graph.atoms[atom].observed = Some(true);
        }
        let q = AtomAssignment::from_graph(&graph);
        let outcome = m_step(&graph, &WeightVector::ones(1), &q, 0.5, 10).unwrap();
        for pair in outcome.pll_trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12);
        }
        assert!(outcome.weights.get(0) > 1.0); // satisfied rule gains weight
    }

    #[test]
    fn updown_truths_match_reevaluation() {
        use rand::Rng;
        use rand::SeedableRng;
        let src = "\
pred a/1 latent
pred b/1 latent
pred c/1 latent
R1: a(x) & b(x) => c(x) :: 1.0
R2: a(x) & c(x) => a(x) :: 1.0
R3: b(x) => a(x) | c(x) :: 1.0
";
        let set = parse_rules(src).unwrap();
        let graph =
            ground_rules(&set, &ConstantTable::of_size(3), &ValueDomains::default(), 1000)
                .unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(41);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..graph.atoms.len()).map(|_| rng.gen()).collect();
            for atom in 0..graph.atoms.len() {
                for &g in graph.rules_of_atom(atom) {
                    let (up, down) = truth_updown(&graph, g, atom, &scores);
                    let mut probe = scores.clone();
                    probe[atom] = 1.0;
                    let ref_up = truth_from_scores(&graph, g, &probe);
                    probe[atom] = 0.0;
                    let ref_down = truth_from_scores(&graph, g, &probe);
                    assert!((up - ref_up).abs() < TOL);
                    assert!((down - ref_down).abs() < TOL);
                }
            }
        }
    }

    #[test]
    fn observed_pin_enforced() {
        let mut graph = chain_graph(1.0);
        graph.atoms[0].observed = Some(true);
        let err = AtomAssignment::new(&graph, vec![0.3, 0.5]).unwrap_err();
        assert!(matches!(err, MlnError::ObservedPinned { .. }));
        let mut a = AtomAssignment::from_graph(&graph);
        assert!(a.set(&graph, 0, 0.7).is_err());
        assert!(a.set(&graph, 1, 0.7).is_ok());
    }

    #[test]
    fn partition_respects_atom_limit() {
        let mut src = String::from("pred p/1 latent\npred q/1 latent\n");
        src.push_str("p(x) => q(x)\n");
        let set = parse_rules(&src).unwrap();
        let graph =
            ground_rules(&set, &ConstantTable::of_size(11), &ValueDomains::default(), 10_000)
                .unwrap();
        assert_eq!(graph.atoms.len(), 22);
        assert!(matches!(
            partition_exact(&graph, &WeightVector::ones(1)),
            Err(MlnError::TooManyUnobserved { count: 22, .. })
        ));
    }
}
