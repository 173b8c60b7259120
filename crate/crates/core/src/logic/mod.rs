//! Rule language core: predicate declarations, atoms, rules, and the
//! Lukasiewicz soft-truth operators used everywhere downstream.
//!
//! Soft truths live in [0, 1]. Inputs outside that interval by more than
//! [`DOMAIN_SLACK`] are rejected; smaller excursions are clamped.

mod parse;

pub use parse::parse_rules;

use thiserror::Error;

/// Tolerance for soft-truth domain checks.
pub const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogicError {
    #[error("soft truth {value} outside [0, 1]")]
    Domain { value: f64 },
    #[error("no score for atom {atom}")]
    MissingScore { atom: String },
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: predicate {name} is not declared")]
    UndeclaredPredicate { name: String, line: usize },
    #[error("line {line}: {predicate} expects {expected_entity}+{expected_value} arguments, got {got_entity}+{got_value}")]
    ArityMismatch {
        predicate: String,
        line: usize,
        expected_entity: usize,
        expected_value: usize,
        got_entity: usize,
        got_value: usize,
    },
    #[error("line {line}: duplicate rule id {id}")]
    DuplicateRuleId { id: String, line: usize },
    #[error("line {line}: duplicate predicate {name}")]
    DuplicatePredicate { name: String, line: usize },
    #[error("line {line}: predicate {name} must have at least one argument")]
    ZeroArity { name: String, line: usize },
    #[error("rule {rule}: head value variable {variable} is not bound by the body")]
    UnboundValueVariable { rule: String, variable: String },
    #[error("rule {rule}: invalid value expression: {msg}")]
    InvalidValueExpr { rule: String, msg: String },
}

pub type Result<T> = std::result::Result<T, LogicError>;

/// Whether a predicate's ground atoms receive labels from data (observed)
/// or are scored only by the concept network (latent).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredicateKind {
    Observed,
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateDecl {
    pub name: String,
    pub entity_arity: usize,
    pub value_arity: usize,
    pub kind: PredicateKind,
}

/// Entity slot of an atom: a variable to be bound during grounding, or a
/// direct index into a constant table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntityTerm {
    Variable(String),
    Constant(usize),
}

/// Integer-linear expression over value variables, written
/// `c1*v1 + c2*v2 + offset -> out` in rule source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueExpr {
    pub coeffs: Vec<(i64, String)>,
    pub offset: i64,
    pub output: String,
}

impl ValueExpr {
    /// Evaluates the expression under `lookup`, which resolves each input
    /// variable to its bound integer value.
    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<i64>) -> Option<i64> {
        let mut total = self.offset;
        for (coeff, var) in &self.coeffs {
            total += coeff * lookup(var)?;
        }
        Some(total)
    }
}

/// Value slot of an atom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueTerm {
    Variable(String),
    Literal(i64),
    Expr(ValueExpr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub predicate: String,
    pub entity_terms: Vec<EntityTerm>,
    pub value_terms: Vec<ValueTerm>,
}

impl Atom {
    /// Source-syntax rendering, e.g. `digit(x; d1)` or `addition(; 3)`.
    pub fn render(&self) -> String {
        let entities: Vec<String> = self
            .entity_terms
            .iter()
            .map(|t| match t {
                EntityTerm::Variable(v) => v.clone(),
                EntityTerm::Constant(c) => format!("@{c}"),
            })
            .collect();
        let mut out = format!("{}({}", self.predicate, entities.join(", "));
        if !self.value_terms.is_empty() {
            let values: Vec<String> = self
                .value_terms
                .iter()
                .map(|t| match t {
                    ValueTerm::Variable(v) => v.clone(),
                    ValueTerm::Literal(n) => n.to_string(),
                    ValueTerm::Expr(e) => {
                        let mut parts: Vec<String> = e
                            .coeffs
                            .iter()
                            .map(|(c, v)| format!("{c}*{v}"))
                            .collect();
                        if e.offset != 0 {
                            parts.push(e.offset.to_string());
                        }
                        format!("{} -> {}", parts.join(" + "), e.output)
                    }
                })
                .collect();
            out.push_str("; ");
            out.push_str(&values.join(", "));
        }
        out.push(')');
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub id: String,
    pub body: Vec<Atom>,
    pub head: Vec<Atom>,
    pub weight: f64,
}

impl Rule {
    /// Source-syntax rendering including id and weight.
    pub fn render(&self) -> String {
        let body: Vec<String> = self.body.iter().map(Atom::render).collect();
        let head: Vec<String> = self.head.iter().map(Atom::render).collect();
        format!(
            "{}: {} => {} :: {}",
            self.id,
            body.join(" & "),
            head.join(" | "),
            self.weight
        )
    }

    /// Entity variables in order of first appearance, body before head.
    pub fn entity_variables(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for atom in self.body.iter().chain(self.head.iter()) {
            for term in &atom.entity_terms {
                if let EntityTerm::Variable(v) = term {
                    if !seen.contains(&v.as_str()) {
                        seen.push(v);
                    }
                }
            }
        }
        seen
    }

    /// Value variables in order of first appearance, body before head.
    /// Expression inputs count as appearances; expression outputs do not.
    pub fn value_variables(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for atom in self.body.iter().chain(self.head.iter()) {
            for term in &atom.value_terms {
                match term {
                    ValueTerm::Variable(v) => {
                        if !seen.contains(&v.as_str()) {
                            seen.push(v);
                        }
                    }
                    ValueTerm::Expr(e) => {
                        for (_, v) in &e.coeffs {
                            if !seen.contains(&v.as_str()) {
                                seen.push(v);
                            }
                        }
                    }
                    ValueTerm::Literal(_) => {}
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleSet {
    pub predicates: Vec<PredicateDecl>,
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn predicate(&self, name: &str) -> Option<&PredicateDecl> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn rule(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    /// Canonical source rendering; `parse_rules(render(..))` round-trips to a
    /// structurally equal set.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.predicates {
            out.push_str(&format!("pred {}/{}", p.name, p.entity_arity));
            if p.value_arity > 0 {
                out.push_str(&format!("+{}", p.value_arity));
            }
            if p.kind == PredicateKind::Latent {
                out.push_str(" latent");
            }
            out.push('\n');
        }
        for r in &self.rules {
            out.push_str(&r.render());
            out.push('\n');
        }
        out
    }
}

fn check_truth(value: f64) -> Result<f64> {
    if !value.is_finite() || value < -DOMAIN_SLACK || value > 1.0 + DOMAIN_SLACK {
        return Err(LogicError::Domain { value });
    }
    Ok(value.clamp(0.0, 1.0))
}

/// Lukasiewicz conjunction max(0, a + b - 1).
pub fn luk_and(a: f64, b: f64) -> Result<f64> {
    let (a, b) = (check_truth(a)?, check_truth(b)?);
    Ok((a + b - 1.0).max(0.0))
}

/// Lukasiewicz disjunction min(1, a + b).
pub fn luk_or(a: f64, b: f64) -> Result<f64> {
    let (a, b) = (check_truth(a)?, check_truth(b)?);
    Ok((a + b).min(1.0))
}

/// Lukasiewicz implication min(1, 1 - a + b).
pub fn luk_implies(a: f64, b: f64) -> Result<f64> {
    let (a, b) = (check_truth(a)?, check_truth(b)?);
    Ok((1.0 - a + b).min(1.0))
}

/// Lukasiewicz negation 1 - a.
pub fn luk_not(a: f64) -> Result<f64> {
    Ok(1.0 - check_truth(a)?)
}

/// N-ary conjunction max(0, sum - (n - 1)); 1 for an empty slice.
pub fn conjunction(scores: &[f64]) -> f64 {
    let sum: f64 = scores.iter().sum();
    (sum - (scores.len() as f64 - 1.0)).max(0.0).min(1.0)
}

/// N-ary disjunction min(1, sum); 0 for an empty slice.
pub fn disjunction(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>().min(1.0).max(0.0)
}

/// Soft truth of `body => head` with conjunctive body and disjunctive head:
/// min(1, 1 - conj(body) + disj(head)).
pub fn implication(body: &[f64], head: &[f64]) -> f64 {
    (1.0 - conjunction(body) + disjunction(head)).min(1.0)
}

/// Soft truth of one rule instance under a per-atom score lookup. The lookup
/// receives each body and head atom; a `None` yields a missing-score error
/// naming the atom.
pub fn rule_soft_truth(rule: &Rule, scores: &dyn Fn(&Atom) -> Option<f64>) -> Result<f64> {
    let mut body = Vec::with_capacity(rule.body.len());
    for atom in &rule.body {
        let s = scores(atom).ok_or_else(|| LogicError::MissingScore {
            atom: atom.render(),
        })?;
        body.push(check_truth(s)?);
    }
    let mut head = Vec::with_capacity(rule.head.len());
    for atom in &rule.head {
        let s = scores(atom).ok_or_else(|| LogicError::MissingScore {
            atom: atom.render(),
        })?;
        head.push(check_truth(s)?);
    }
    Ok(implication(&body, &head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXACT: f64 = 1e-12;

    #[test]
    fn lukasiewicz_hand_values() {
        assert!((luk_and(0.7, 0.6).unwrap() - 0.3).abs() < EXACT);
        assert!((luk_and(0.2, 0.3).unwrap() - 0.0).abs() < EXACT);
        assert!((luk_or(0.3, 0.5).unwrap() - 0.8).abs() < EXACT);
        assert!((luk_or(0.8, 0.9).unwrap() - 1.0).abs() < EXACT);
        assert!((luk_implies(0.7, 0.5).unwrap() - 0.8).abs() < EXACT);
        assert!((luk_implies(0.3, 0.9).unwrap() - 1.0).abs() < EXACT);
        assert!((luk_not(0.25).unwrap() - 0.75).abs() < EXACT);
    }

    #[test]
    fn boolean_truth_tables() {
        // At {0, 1} inputs the operators agree with classical logic.
        for a in [0.0, 1.0] {
            for b in [0.0, 1.0] {
                let (ab, bb) = (a > 0.5, b > 0.5);
                assert_eq!(luk_and(a, b).unwrap(), f64::from(ab && bb));
                assert_eq!(luk_or(a, b).unwrap(), f64::from(ab || bb));
                assert_eq!(luk_implies(a, b).unwrap(), f64::from(!ab || bb));
            }
            assert_eq!(luk_not(a).unwrap(), 1.0 - a);
        }
    }

    #[test]
    fn domain_violations_rejected() {
        assert!(matches!(luk_and(1.2, 0.5), Err(LogicError::Domain { .. })));
        assert!(matches!(luk_or(-0.1, 0.5), Err(LogicError::Domain { .. })));
        assert!(matches!(luk_not(f64::NAN), Err(LogicError::Domain { .. })));
        // Within slack the input is clamped instead.
        assert_eq!(luk_not(1.0 + 5e-10).unwrap(), 0.0);
        assert_eq!(luk_and(-5e-10, 1.0).unwrap(), 0.0);
    }

    fn sample_rule() -> Rule {
        Rule {
            id: "r0".into(),
            body: vec![
                Atom {
                    predicate: "p".into(),
                    entity_terms: vec![EntityTerm::Variable("x".into())],
                    value_terms: vec![],
                },
                Atom {
                    predicate: "q".into(),
                    entity_terms: vec![EntityTerm::Variable("x".into())],
                    value_terms: vec![],
                },
            ],
            head: vec![Atom {
                predicate: "h".into(),
                entity_terms: vec![EntityTerm::Variable("x".into())],
                value_terms: vec![],
            }],
            weight: 1.0,
        }
    }

    #[test]
    fn rule_soft_truth_hand_value() {
        let rule = sample_rule();
        let truth = rule_soft_truth(&rule, &|atom: &Atom| match atom.predicate.as_str() {
            "p" => Some(0.9),
            "q" => Some(0.8),
            "h" => Some(0.5),
            _ => None,
        })
        .unwrap();
        assert!((truth - 0.8).abs() < EXACT);
    }

    #[test]
    fn rule_soft_truth_missing_score_names_atom() {
        let rule = sample_rule();
        let err = rule_soft_truth(&rule, &|atom: &Atom| {
            (atom.predicate != "q").then_some(1.0)
        })
        .unwrap_err();
        assert_eq!(
            err,
            LogicError::MissingScore {
                atom: "q(x)".into()
            }
        );
    }

    #[test]
    fn value_expr_eval() {
        let expr = ValueExpr {
            coeffs: vec![(10, "d1".into()), (1, "d2".into())],
            offset: 0,
            output: "z".into(),
        };
        let v = expr
            .eval(&|name| match name {
                "d1" => Some(3),
                "d2" => Some(7),
                _ => None,
            })
            .unwrap();
        assert_eq!(v, 37);
        assert_eq!(expr.eval(&|_| None), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2500))]

        #[test]
        fn operators_stay_in_unit_interval(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            for v in [
                luk_and(a, b).unwrap(),
                luk_or(a, b).unwrap(),
                luk_implies(a, b).unwrap(),
                luk_not(a).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn operators_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, d in 0.0f64..=0.5) {
            let a2 = (a + d).min(1.0);
            prop_assert!(luk_and(a2, b).unwrap() >= luk_and(a, b).unwrap());
            prop_assert!(luk_or(a2, b).unwrap() >= luk_or(a, b).unwrap());
            // Implication is antitone in the antecedent, monotone in the consequent.
            prop_assert!(luk_implies(a2, b).unwrap() <= luk_implies(a, b).unwrap());
            prop_assert!(luk_implies(b, a2).unwrap() >= luk_implies(b, a).unwrap());
        }

        #[test]
        fn de_morgan_and_involution(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let lhs = luk_not(luk_and(a, b).unwrap()).unwrap();
            let rhs = luk_or(luk_not(a).unwrap(), luk_not(b).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!((luk_not(luk_not(a).unwrap()).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn rule_truth_monotone_in_scores(
            b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0, h in 0.0f64..=1.0, d in 0.0f64..=0.5
        ) {
            let up = |x: f64| (x + d).min(1.0);
            let base = implication(&[b1, b2], &[h]);
            prop_assert!(implication(&[up(b1), b2], &[h]) <= base + 1e-12);
            prop_assert!(implication(&[b1, b2], &[up(h)]) + 1e-12 >= base);
        }
    }
}
