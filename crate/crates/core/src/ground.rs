//! Grounding of first-order rules over a constant table and per-predicate
//! value domains, producing the ground-atom graph the MLN operates on.
//!
//! Entity variables are bound injectively in first-appearance order: the
//! k-th variable receives a constant index strictly greater than the
//! (k-1)-th. One binding therefore corresponds to one ordered choice of
//! distinct constants, which matches how data items supply their entities.
//! Value variables range over the full domain of their predicate.

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::logic::{EntityTerm, Rule, RuleSet, ValueTerm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundError {
    #[error("projected ground-atom count {projected} exceeds cap {cap}")]
    CapExceeded { projected: u128, cap: usize },
    #[error("predicate {predicate} has no value domain")]
    MissingDomain { predicate: String },
    #[error("value variable {variable} in rule {rule} has an empty domain")]
    EmptyDomain { rule: String, variable: String },
    #[error("entity constant @{index} outside table of size {size}")]
    UnknownConstant { index: usize, size: usize },
    #[error("atom {key} is not in the graph")]
    UnknownAtom { key: String },
}

pub type Result<T> = std::result::Result<T, GroundError>;

/// Ordered table of entity constants; a constant is referenced by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstantTable {
    pub names: Vec<String>,
}

impl ConstantTable {
    pub fn new(names: Vec<String>) -> Self {
        ConstantTable { names }
    }

    /// Table of `n` constants named `c0`, `c1`, ...
    pub fn of_size(n: usize) -> Self {
        ConstantTable {
            names: (0..n).map(|i| format!("c{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Inclusive integer range of admissible values per value-typed predicate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValueDomains {
    ranges: std::collections::BTreeMap<String, (i64, i64)>,
}

impl ValueDomains {
    pub fn set(&mut self, predicate: impl Into<String>, lo: i64, hi: i64) {
        self.ranges.insert(predicate.into(), (lo, hi));
    }

    pub fn get(&self, predicate: &str) -> Option<(i64, i64)> {
        self.ranges.get(predicate).copied()
    }

    /// Number of values in a predicate's domain.
    pub fn size(&self, predicate: &str) -> Option<usize> {
        self.get(predicate).map(|(lo, hi)| (hi - lo + 1).max(0) as usize)
    }

    /// All (predicate, range) entries in sorted predicate order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, (i64, i64))> {
        self.ranges.iter().map(|(name, range)| (name.as_str(), *range))
    }
}

pub type AtomId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundAtom {
    /// Canonical key, e.g. `digit(c0;3)` or `leopard(c1)`.
    pub key: String,
    pub predicate: String,
    pub entity_args: Vec<usize>,
    pub value_args: Vec<i64>,
    /// Boolean truth when fixed by data; `None` for free atoms.
    pub observed: Option<bool>,
    /// Current soft-truth score in [0, 1].
    pub score: f64,
}

pub fn atom_key(predicate: &str, entity_args: &[usize], value_args: &[i64]) -> String {
    let entities: Vec<String> = entity_args.iter().map(|c| format!("c{c}")).collect();
    if value_args.is_empty() {
        format!("{predicate}({})", entities.join(","))
    } else {
        let values: Vec<String> = value_args.iter().map(|v| v.to_string()).collect();
        format!("{predicate}({};{})", entities.join(","), values.join(","))
    }
}

/// One variable assignment used to instantiate a rule.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Binding {
    pub entity_map: std::collections::BTreeMap<String, usize>,
    pub value_map: std::collections::BTreeMap<String, i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundRule {
    /// Index into the source ruleset's rule list.
    pub rule_index: usize,
    pub rule_id: String,
    pub weight: f64,
    pub body: Vec<AtomId>,
    pub head: Vec<AtomId>,
    pub binding: Binding,
}

/// Ground-atom graph: deduplicated atoms, ground rules, and the co-occurrence
/// adjacency that defines Markov blankets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MlnGraph {
    pub atoms: Vec<GroundAtom>,
    pub ground_rules: Vec<GroundRule>,
    pub constants: ConstantTable,
    adjacency: Vec<Vec<AtomId>>,
    atom_rules: Vec<Vec<usize>>,
    key_index: HashMap<String, AtomId>,
}

impl MlnGraph {
    pub fn atom_id(&self, key: &str) -> Option<AtomId> {
        self.key_index.get(key).copied()
    }

    /// Ground-rule indices whose body or head contains `atom`.
    pub fn rules_of_atom(&self, atom: AtomId) -> &[usize] {
        &self.atom_rules[atom]
    }

    /// Markov blanket: atoms co-occurring with `atom` in at least one ground
    /// rule, sorted by id.
    pub fn markov_blanket(&self, atom: AtomId) -> Result<&[AtomId]> {
        self.adjacency
            .get(atom)
            .map(|v| v.as_slice())
            .ok_or(GroundError::UnknownAtom {
                key: format!("#{atom}"),
            })
    }

    /// Line-delimited dump: one atom per line, then one ground rule per line.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        for atom in &self.atoms {
            out.push_str("atom ");
            out.push_str(&atom.key);
            match atom.observed {
                Some(true) => out.push_str(" observed=1"),
                Some(false) => out.push_str(" observed=0"),
                None => {}
            }
            out.push('\n');
        }
        for gr in &self.ground_rules {
            let body: Vec<&str> = gr.body.iter().map(|&a| self.atoms[a].key.as_str()).collect();
            let head: Vec<&str> = gr.head.iter().map(|&a| self.atoms[a].key.as_str()).collect();
            out.push_str(&format!(
                "rule {}: {} => {}\n",
                gr.rule_id,
                body.join(" & "),
                head.join(" | ")
            ));
        }
        out
    }

    fn insert_atom(&mut self, atom: GroundAtom) -> AtomId {
        if let Some(&id) = self.key_index.get(&atom.key) {
            return id;
        }
        let id = self.atoms.len();
        self.key_index.insert(atom.key.clone(), id);
        self.atoms.push(atom);
        id
    }

    fn finish(&mut self) {
        let n = self.atoms.len();
        let mut adj: Vec<BTreeSet<AtomId>> = vec![BTreeSet::new(); n];
        let mut atom_rules: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (gi, gr) in self.ground_rules.iter().enumerate() {
            let members: Vec<AtomId> = gr.body.iter().chain(gr.head.iter()).copied().collect();
            for &a in &members {
                if atom_rules[a].last() != Some(&gi) {
                    atom_rules[a].push(gi);
                }
                for &b in &members {
                    if a != b {
                        adj[a].insert(b);
                    }
                }
            }
        }
        self.adjacency = adj.into_iter().map(|s| s.into_iter().collect()).collect();
        self.atom_rules = atom_rules;
    }
}

/// Per-rule value-variable domains: intersection of the domains of every
/// predicate where the variable fills a plain value slot.
fn value_var_domains(
    rule: &Rule,
    domains: &ValueDomains,
) -> Result<Vec<(String, i64, i64)>> {
    let mut out: Vec<(String, i64, i64)> = Vec::new();
    for atom in rule.body.iter().chain(rule.head.iter()) {
        for term in &atom.value_terms {
            if let ValueTerm::Variable(v) = term {
                let (lo, hi) =
                    domains
                        .get(&atom.predicate)
                        .ok_or_else(|| GroundError::MissingDomain {
                            predicate: atom.predicate.clone(),
                        })?;
                match out.iter_mut().find(|(name, _, _)| name == v) {
                    Some((_, clo, chi)) => {
                        *clo = (*clo).max(lo);
                        *chi = (*chi).min(hi);
                    }
                    None => out.push((v.clone(), lo, hi)),
                }
            }
        }
    }
    for (name, lo, hi) in &out {
        if lo > hi {
            return Err(GroundError::EmptyDomain {
                rule: rule.id.clone(),
                variable: name.clone(),
            });
        }
    }
    Ok(out)
}

fn combinations(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let mut result: u128 = 1;
    for i in 0..k {
        result = result.saturating_mul(n - i) / (i + 1);
    }
    result
}

/// Projected ground-atom count before deduplication, used for the cap check.
fn projected_atoms(rule: &Rule, n_constants: usize, domains: &ValueDomains) -> Result<u128> {
    let v = rule.entity_variables().len() as u128;
    let mut bindings = combinations(n_constants as u128, v);
    for (_, lo, hi) in value_var_domains(rule, domains)? {
        bindings = bindings.saturating_mul((hi - lo + 1) as u128);
    }
    let atoms = (rule.body.len() + rule.head.len()) as u128;
    Ok(bindings.saturating_mul(atoms))
}

fn instantiate_atom(
    atom: &crate::logic::Atom,
    binding: &Binding,
    table_size: usize,
) -> Result<(String, Vec<usize>, Vec<i64>)> {
    let mut entity_args = Vec::with_capacity(atom.entity_terms.len());
    for term in &atom.entity_terms {
        let idx = match term {
            EntityTerm::Variable(v) => binding.entity_map[v],
            EntityTerm::Constant(c) => {
                if *c >= table_size {
                    return Err(GroundError::UnknownConstant {
                        index: *c,
                        size: table_size,
                    });
                }
                *c
            }
        };
        entity_args.push(idx);
    }
    let mut value_args = Vec::with_capacity(atom.value_terms.len());
    for term in &atom.value_terms {
        let v = match term {
            ValueTerm::Variable(v) => binding.value_map[v],
            ValueTerm::Literal(n) => *n,
            // Expression inputs are body-bound by construction.
            ValueTerm::Expr(e) => e.eval(&|name| binding.value_map.get(name).copied()).unwrap(),
        };
        value_args.push(v);
    }
    Ok((atom_key(&atom.predicate, &entity_args, &value_args), entity_args, value_args))
}

/// Grounds every rule in `ruleset` over `constants`, deduplicating atoms and
/// ground rules. Fails before materialization when the projected atom count
/// exceeds `cap`.
pub fn ground_rules(
    ruleset: &RuleSet,
    constants: &ConstantTable,
    domains: &ValueDomains,
    cap: usize,
) -> Result<MlnGraph> {
    let mut projected: u128 = 0;
    for rule in &ruleset.rules {
        projected = projected.saturating_add(projected_atoms(rule, constants.len(), domains)?);
    }
    if projected > cap as u128 {
        return Err(GroundError::CapExceeded { projected, cap });
    }

    let mut graph = MlnGraph {
        constants: constants.clone(),
        ..MlnGraph::default()
    };
    let mut seen_rules: HashSet<(usize, Vec<AtomId>, Vec<AtomId>)> = HashSet::new();

    for (rule_index, rule) in ruleset.rules.iter().enumerate() {
        let evars: Vec<String> = rule
            .entity_variables()
            .into_iter()
            .map(str::to_owned)
            .collect();
        let vdoms = value_var_domains(rule, domains)?;
        if evars.len() > constants.len() {
            continue;
        }

        // Strictly increasing constant-index tuples for the entity variables.
        let mut combo: Vec<usize> = (0..evars.len()).collect();
        loop {
            let mut binding = Binding::default();
            for (var, &c) in evars.iter().zip(&combo) {
                binding.entity_map.insert(var.clone(), c);
            }
            // Cartesian product over value-variable domains via an odometer.
            let mut values: Vec<i64> = vdoms.iter().map(|&(_, lo, _)| lo).collect();
            loop {
                for ((name, _, _), &v) in vdoms.iter().zip(&values) {
                    binding.value_map.insert(name.clone(), v);
                }
                let ground_one =
                    |graph: &mut MlnGraph, atom: &crate::logic::Atom| -> Result<AtomId> {
                        let (key, entity_args, value_args) =
                            instantiate_atom(atom, &binding, constants.len())?;
                        Ok(graph.insert_atom(GroundAtom {
                            key,
                            predicate: atom.predicate.clone(),
                            entity_args,
                            value_args,
                            observed: None,
                            score: 0.5,
                        }))
                    };
                let mut body_ids = Vec::with_capacity(rule.body.len());
                for atom in &rule.body {
                    body_ids.push(ground_one(&mut graph, atom)?);
                }
                let mut head_ids = Vec::with_capacity(rule.head.len());
                for atom in &rule.head {
                    head_ids.push(ground_one(&mut graph, atom)?);
                }
                if seen_rules.insert((rule_index, body_ids.clone(), head_ids.clone())) {
                    graph.ground_rules.push(GroundRule {
                        rule_index,
                        rule_id: rule.id.clone(),
                        weight: rule.weight,
                        body: body_ids,
                        head: head_ids,
                        binding: binding.clone(),
                    });
                }
                // Advance the value odometer.
                let mut advanced = false;
                for pos in (0..vdoms.len()).rev() {
                    if values[pos] < vdoms[pos].2 {
                        values[pos] += 1;
                        for j in pos + 1..vdoms.len() {
                            values[j] = vdoms[j].1;
                        }
                        advanced = true;
                        break;
                    }
                }
                if !advanced {
                    break;
                }
            }
            // Advance the entity combination (strictly increasing indices).
            if evars.is_empty() {
                break;
            }
            let n = constants.len();
            let k = evars.len();
            let mut advanced = false;
            for pos in (0..k).rev() {
                if combo[pos] < n - (k - pos) {
                    combo[pos] += 1;
                    for j in pos + 1..k {
                        combo[j] = combo[j - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
    }

    graph.finish();
    Ok(graph)
}

/// A predicted label used to select the rules worth grounding.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelRef {
    Predicate(String),
    Value(i64),
}

/// Keeps the rules that mention at least one of `labels`, either as a
/// predicate name or as a value literal. Order is preserved; predicate
/// declarations are kept untouched.
pub fn select_relevant_rules(ruleset: &RuleSet, labels: &[LabelRef]) -> RuleSet {
    let mentions = |rule: &Rule| {
        rule.body.iter().chain(rule.head.iter()).any(|atom| {
            labels.iter().any(|label| match label {
                LabelRef::Predicate(name) => atom.predicate == *name,
                LabelRef::Value(v) => atom
                    .value_terms
                    .iter()
                    .any(|t| matches!(t, ValueTerm::Literal(n) if n == v)),
            })
        })
    };
    RuleSet {
        predicates: ruleset.predicates.clone(),
        rules: ruleset.rules.iter().filter(|r| mentions(r)).cloned().collect(),
    }
}
