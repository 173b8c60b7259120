//! Line-oriented parser for the rule language.
//!
//! ```text
//! decl  := "pred" name "/" entity_arity ["+" value_arity] ["latent"]
//! rule  := [id ":"] atom ("&" atom)* "=>" atom ("|" atom)* ["::" weight]
//! atom  := name "(" entity_terms [";" value_terms] ")"
//! vexpr := int "*" var ("+" int "*" var)* ["+" int] "->" var
//! ```
//!
//! `#` starts a comment; blank lines are skipped. Entity constants are
//! written `@idx` (an index into the run's constant table).

use super::{
    Atom, EntityTerm, LogicError, PredicateDecl, PredicateKind, Result, Rule, RuleSet, ValueExpr,
    ValueTerm,
};

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Ident(String),
    Number(String),
    Slash,
    Plus,
    Star,
    Comma,
    Semi,
    LParen,
    RParen,
    Colon,
    DoubleColon,
    Amp,
    Pipe,
    Implies,
    Arrow,
    At,
}

impl TokKind {
    fn describe(&self) -> String {
        match self {
            TokKind::Ident(s) => format!("identifier `{s}`"),
            TokKind::Number(s) => format!("number `{s}`"),
            TokKind::Slash => "`/`".into(),
            TokKind::Plus => "`+`".into(),
            TokKind::Star => "`*`".into(),
            TokKind::Comma => "`,`".into(),
            TokKind::Semi => "`;`".into(),
            TokKind::LParen => "`(`".into(),
            TokKind::RParen => "`)`".into(),
            TokKind::Colon => "`:`".into(),
            TokKind::DoubleColon => "`::`".into(),
            TokKind::Amp => "`&`".into(),
            TokKind::Pipe => "`|`".into(),
            TokKind::Implies => "`=>`".into(),
            TokKind::Arrow => "`->`".into(),
            TokKind::At => "`@`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> LogicError {
    LogicError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

fn lex_line(text: &str, line: usize) -> Result<Vec<Tok>> {
    let chars: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let col = i + 1;
        let c = chars[i];
        match c {
            '#' => break,
            c if c.is_whitespace() => {
                i += 1;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                toks.push(Tok {
                    kind: TokKind::Ident(word),
                    line,
                    col,
                });
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '+' || chars[i] == '-')
                            && matches!(chars[i - 1], 'e' | 'E')))
                {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                toks.push(Tok {
                    kind: TokKind::Number(word),
                    line,
                    col,
                });
            }
            '-' => {
                if chars.get(i + 1) == Some(&'>') {
                    toks.push(Tok {
                        kind: TokKind::Arrow,
                        line,
                        col,
                    });
                    i += 2;
                } else if chars.get(i + 1).is_some_and(|c| c.is_ascii_digit()) {
                    let start = i;
                    i += 1;
                    while i < chars.len()
                        && (chars[i].is_ascii_digit()
                            || chars[i] == '.'
                            || chars[i] == 'e'
                            || chars[i] == 'E'
                            || ((chars[i] == '+' || chars[i] == '-')
                                && matches!(chars[i - 1], 'e' | 'E')))
                    {
                        i += 1;
                    }
                    let word: String = chars[start..i].iter().collect();
                    toks.push(Tok {
                        kind: TokKind::Number(word),
                        line,
                        col,
                    });
                } else {
                    return Err(syntax(line, col, "stray `-`"));
                }
            }
            '=' => {
                if chars.get(i + 1) == Some(&'>') {
                    toks.push(Tok {
                        kind: TokKind::Implies,
                        line,
                        col,
                    });
                    i += 2;
                } else {
                    return Err(syntax(line, col, "expected `=>`"));
                }
            }
            ':' => {
                if chars.get(i + 1) == Some(&':') {
                    toks.push(Tok {
                        kind: TokKind::DoubleColon,
                        line,
                        col,
                    });
                    i += 2;
                } else {
                    toks.push(Tok {
                        kind: TokKind::Colon,
                        line,
                        col,
                    });
                    i += 1;
                }
            }
            _ => {
                let kind = match c {
                    '/' => TokKind::Slash,
                    '+' => TokKind::Plus,
                    '*' => TokKind::Star,
                    ',' => TokKind::Comma,
                    ';' => TokKind::Semi,
                    '(' => TokKind::LParen,
                    ')' => TokKind::RParen,
                    '&' => TokKind::Amp,
                    '|' => TokKind::Pipe,
                    '@' => TokKind::At,
                    other => return Err(syntax(line, col, format!("unexpected character `{other}`"))),
                };
                toks.push(Tok { kind, line, col });
                i += 1;
            }
        }
    }
    Ok(toks)
}

struct Cursor {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
    end_col: usize,
}

impl Cursor {
    fn new(toks: Vec<Tok>, line: usize, end_col: usize) -> Self {
        Cursor {
            toks,
            pos: 0,
            line,
            end_col,
        }
    }

    fn peek(&self) -> Option<&TokKind> {
        self.toks.get(self.pos).map(|t| &t.kind)
    }

    fn peek_at(&self, offset: usize) -> Option<&TokKind> {
        self.toks.get(self.pos + offset).map(|t| &t.kind)
    }

    fn here(&self) -> (usize, usize) {
        match self.toks.get(self.pos) {
            Some(t) => (t.line, t.col),
            None => (self.line, self.end_col),
        }
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, kind: &TokKind) -> Result<Tok> {
        let (line, col) = self.here();
        match self.next() {
            Some(t) if t.kind == *kind => Ok(t),
            Some(t) => Err(syntax(
                line,
                col,
                format!("expected {}, found {}", kind.describe(), t.kind.describe()),
            )),
            None => Err(syntax(
                line,
                col,
                format!("expected {}, found end of line", kind.describe()),
            )),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, usize, usize)> {
        let (line, col) = self.here();
        match self.next() {
            Some(Tok {
                kind: TokKind::Ident(s),
                line,
                col,
            }) => Ok((s, line, col)),
            Some(t) => Err(syntax(
                line,
                col,
                format!("expected {what}, found {}", t.kind.describe()),
            )),
            None => Err(syntax(line, col, format!("expected {what}, found end of line"))),
        }
    }

    fn expect_number(&mut self, what: &str) -> Result<(String, usize, usize)> {
        let (line, col) = self.here();
        match self.next() {
            Some(Tok {
                kind: TokKind::Number(s),
                line,
                col,
            }) => Ok((s, line, col)),
            Some(t) => Err(syntax(
                line,
                col,
                format!("expected {what}, found {}", t.kind.describe()),
            )),
            None => Err(syntax(line, col, format!("expected {what}, found end of line"))),
        }
    }

    fn expect_end(&self) -> Result<()> {
        if let Some(t) = self.toks.get(self.pos) {
            return Err(syntax(
                t.line,
                t.col,
                format!("unexpected {} after end of statement", t.kind.describe()),
            ));
        }
        Ok(())
    }
}

fn parse_usize(raw: &str, line: usize, col: usize, what: &str) -> Result<usize> {
    raw.parse::<usize>()
        .map_err(|_| syntax(line, col, format!("invalid {what} `{raw}`")))
}

fn parse_i64(raw: &str, line: usize, col: usize) -> Result<i64> {
    raw.parse::<i64>()
        .map_err(|_| syntax(line, col, format!("invalid integer `{raw}`")))
}

fn parse_decl(cur: &mut Cursor) -> Result<PredicateDecl> {
    let (name, nline, ncol) = cur.expect_ident("predicate name")?;
    cur.expect(&TokKind::Slash)?;
    let (raw, line, col) = cur.expect_number("entity arity")?;
    let entity_arity = parse_usize(&raw, line, col, "entity arity")?;
    let mut value_arity = 0;
    if cur.peek() == Some(&TokKind::Plus) {
        cur.next();
        let (raw, line, col) = cur.expect_number("value arity")?;
        value_arity = parse_usize(&raw, line, col, "value arity")?;
    }
    let mut kind = PredicateKind::Observed;
    if let Some(TokKind::Ident(word)) = cur.peek() {
        if word == "latent" {
            cur.next();
            kind = PredicateKind::Latent;
        }
    }
    cur.expect_end()?;
    if entity_arity + value_arity == 0 {
        return Err(LogicError::ZeroArity {
            name,
            line: nline,
        });
    }
    let _ = ncol;
    Ok(PredicateDecl {
        name,
        entity_arity,
        value_arity,
        kind,
    })
}

fn parse_value_term(cur: &mut Cursor) -> Result<ValueTerm> {
    match cur.peek() {
        Some(TokKind::Ident(_)) => {
            let (name, _, _) = cur.expect_ident("value variable")?;
            Ok(ValueTerm::Variable(name))
        }
        Some(TokKind::Number(_)) => {
            // A number starts either a literal or a linear expression.
            let (raw, line, col) = cur.expect_number("value")?;
            if cur.peek() == Some(&TokKind::Star) {
                parse_value_expr(cur, parse_i64(&raw, line, col)?)
            } else if matches!(cur.peek(), Some(TokKind::Plus) | Some(TokKind::Arrow)) {
                let (line, col) = cur.here();
                Err(syntax(line, col, "value expression must start with `int * var`"))
            } else {
                Ok(ValueTerm::Literal(parse_i64(&raw, line, col)?))
            }
        }
        _ => {
            let (line, col) = cur.here();
            Err(syntax(line, col, "expected value term"))
        }
    }
}

fn parse_value_expr(cur: &mut Cursor, first_coeff: i64) -> Result<ValueTerm> {
    cur.expect(&TokKind::Star)?;
    let (var, _, _) = cur.expect_ident("value variable")?;
    let mut coeffs = vec![(first_coeff, var)];
    let mut offset = 0i64;
    while cur.peek() == Some(&TokKind::Plus) {
        cur.next();
        let (raw, line, col) = cur.expect_number("coefficient or offset")?;
        let n = parse_i64(&raw, line, col)?;
        if cur.peek() == Some(&TokKind::Star) {
            cur.next();
            let (var, _, _) = cur.expect_ident("value variable")?;
            coeffs.push((n, var));
        } else {
            // Trailing integer is the offset; the arrow must follow.
            offset = n;
            break;
        }
    }
    cur.expect(&TokKind::Arrow)?;
    let (output, _, _) = cur.expect_ident("output variable")?;
    Ok(ValueTerm::Expr(ValueExpr {
        coeffs,
        offset,
        output,
    }))
}

fn parse_atom(cur: &mut Cursor) -> Result<(Atom, usize)> {
    let (predicate, line, _) = cur.expect_ident("predicate name")?;
    cur.expect(&TokKind::LParen)?;
    let mut entity_terms = Vec::new();
    let mut value_terms = Vec::new();
    // Entity section runs until `;` or `)`.
    if !matches!(cur.peek(), Some(TokKind::RParen) | Some(TokKind::Semi)) {
        loop {
            match cur.peek() {
                Some(TokKind::Ident(_)) => {
                    let (name, _, _) = cur.expect_ident("entity term")?;
                    entity_terms.push(EntityTerm::Variable(name));
                }
                Some(TokKind::At) => {
                    cur.next();
                    let (raw, line, col) = cur.expect_number("constant index")?;
                    entity_terms.push(EntityTerm::Constant(parse_usize(
                        &raw, line, col, "constant index",
                    )?));
                }
                _ => {
                    let (line, col) = cur.here();
                    return Err(syntax(line, col, "expected entity term"));
                }
            }
            if cur.peek() == Some(&TokKind::Comma) {
                cur.next();
            } else {
                break;
            }
        }
    }
    if cur.peek() == Some(&TokKind::Semi) {
        cur.next();
        loop {
            value_terms.push(parse_value_term(cur)?);
            if cur.peek() == Some(&TokKind::Comma) {
                cur.next();
            } else {
                break;
            }
        }
    }
    cur.expect(&TokKind::RParen)?;
    Ok((
        Atom {
            predicate,
            entity_terms,
            value_terms,
        },
        line,
    ))
}

fn parse_rule(cur: &mut Cursor, default_id: String) -> Result<(Rule, usize)> {
    let line = cur.here().0;
    let mut id = default_id;
    if matches!(cur.peek(), Some(TokKind::Ident(_))) && cur.peek_at(1) == Some(&TokKind::Colon) {
        let (explicit, _, _) = cur.expect_ident("rule id")?;
        cur.next(); // colon
        id = explicit;
    }
    let mut body = Vec::new();
    loop {
        body.push(parse_atom(cur)?.0);
        if cur.peek() == Some(&TokKind::Amp) {
            cur.next();
        } else {
            break;
        }
    }
    cur.expect(&TokKind::Implies)?;
    let mut head = Vec::new();
    loop {
        head.push(parse_atom(cur)?.0);
        if cur.peek() == Some(&TokKind::Pipe) {
            cur.next();
        } else {
            break;
        }
    }
    let mut weight = 1.0;
    if cur.peek() == Some(&TokKind::DoubleColon) {
        cur.next();
        let (raw, wline, wcol) = cur.expect_number("weight")?;
        weight = raw
            .parse::<f64>()
            .map_err(|_| syntax(wline, wcol, format!("invalid weight `{raw}`")))?;
        if !weight.is_finite() {
            return Err(syntax(wline, wcol, format!("non-finite weight `{raw}`")));
        }
    }
    cur.expect_end()?;
    Ok((
        Rule {
            id,
            body,
            head,
            weight,
        },
        line,
    ))
}

fn check_rule_semantics(rule: &Rule, line: usize, set: &RuleSet) -> Result<()> {
    for atom in rule.body.iter().chain(rule.head.iter()) {
        let decl = set.predicate(&atom.predicate).ok_or_else(|| {
            LogicError::UndeclaredPredicate {
                name: atom.predicate.clone(),
                line,
            }
        })?;
        if atom.entity_terms.len() != decl.entity_arity
            || atom.value_terms.len() != decl.value_arity
        {
            return Err(LogicError::ArityMismatch {
                predicate: atom.predicate.clone(),
                line,
                expected_entity: decl.entity_arity,
                expected_value: decl.value_arity,
                got_entity: atom.entity_terms.len(),
                got_value: atom.value_terms.len(),
            });
        }
    }
    // Plain value variables bound by the body.
    let mut bound: Vec<&str> = Vec::new();
    for atom in &rule.body {
        for term in &atom.value_terms {
            if let ValueTerm::Variable(v) = term {
                if !bound.contains(&v.as_str()) {
                    bound.push(v);
                }
            }
        }
    }
    let check_expr = |expr: &ValueExpr| -> Result<()> {
        if expr.coeffs.is_empty() {
            return Err(LogicError::InvalidValueExpr {
                rule: rule.id.clone(),
                msg: "no coefficient terms".into(),
            });
        }
        let mut names: Vec<&str> = expr.coeffs.iter().map(|(_, v)| v.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != expr.coeffs.len() {
            return Err(LogicError::InvalidValueExpr {
                rule: rule.id.clone(),
                msg: "repeated input variable".into(),
            });
        }
        for (_, v) in &expr.coeffs {
            if !bound.contains(&v.as_str()) {
                return Err(LogicError::UnboundValueVariable {
                    rule: rule.id.clone(),
                    variable: v.clone(),
                });
            }
        }
        Ok(())
    };
    for atom in &rule.body {
        for term in &atom.value_terms {
            if let ValueTerm::Expr(e) = term {
                check_expr(e)?;
            }
        }
    }
    for atom in &rule.head {
        for term in &atom.value_terms {
            match term {
                ValueTerm::Variable(v) => {
                    if !bound.contains(&v.as_str()) {
                        return Err(LogicError::UnboundValueVariable {
                            rule: rule.id.clone(),
                            variable: v.clone(),
                        });
                    }
                }
                ValueTerm::Expr(e) => check_expr(e)?,
                ValueTerm::Literal(_) => {}
            }
        }
    }
    Ok(())
}

/// Parses a rule file into a [`RuleSet`]. Declarations must precede the rules
/// that use them. Rules without an explicit id are assigned `r0`, `r1`, ... by
/// position.
pub fn parse_rules(src: &str) -> Result<RuleSet> {
    let mut set = RuleSet::default();
    let mut rule_lines: Vec<usize> = Vec::new();
    for (idx, text) in src.lines().enumerate() {
        let line = idx + 1;
        let toks = lex_line(text, line)?;
        if toks.is_empty() {
            continue;
        }
        let end_col = text.chars().count() + 1;
        let mut cur = Cursor::new(toks, line, end_col);
        let is_decl = matches!(cur.peek(), Some(TokKind::Ident(w)) if w == "pred");
        if is_decl {
            cur.next();
            let decl = parse_decl(&mut cur)?;
            if set.predicate(&decl.name).is_some() {
                return Err(LogicError::DuplicatePredicate {
                    name: decl.name,
                    line,
                });
            }
            set.predicates.push(decl);
        } else {
            let default_id = format!("r{}", set.rules.len());
            let (rule, line) = parse_rule(&mut cur, default_id)?;
            if set.rule(&rule.id).is_some() {
                return Err(LogicError::DuplicateRuleId {
                    id: rule.id,
                    line,
                });
            }
            set.rules.push(rule);
            rule_lines.push(line);
        }
    }
    for (rule, line) in set.rules.iter().zip(&rule_lines) {
        check_rule_semantics(rule, *line, &set)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ATTR_SRC: &str = "\
# zero-shot attribute rules
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred horselike/1 latent
pred white_black/1 latent
pred stripe/1 latent
pred leopard/1
pred zebra/1
R1: likecat(x) & tawny(x) & spot(x) => leopard(x)
R2: horselike(x) & white_black(x) & stripe(x) => zebra(x) :: 2.0
";

    #[test]
    fn parses_attribute_rules() {
        let set = parse_rules(ATTR_SRC).unwrap();
        assert_eq!(set.predicates.len(), 8);
        assert_eq!(set.rules.len(), 2);
        let r1 = set.rule("R1").unwrap();
        assert_eq!(r1.body.len(), 3);
        assert_eq!(r1.head.len(), 1);
        assert_eq!(r1.weight, 1.0); // default weight
        assert_eq!(set.rule("R2").unwrap().weight, 2.0);
        assert_eq!(set.predicate("likecat").unwrap().kind, PredicateKind::Latent);
        assert_eq!(set.predicate("leopard").unwrap().kind, PredicateKind::Observed);
    }

    #[test]
    fn parses_digit_addition_rule() {
        let src = "\
pred digit/1+1 latent
pred addition/0+1
add: digit(x; d1) & digit(y; d2) => addition(; 1*d1 + 1*d2 -> z)
";
        let set = parse_rules(src).unwrap();
        let rule = set.rule("add").unwrap();
        assert_eq!(rule.entity_variables(), vec!["x", "y"]);
        assert_eq!(rule.value_variables(), vec!["d1", "d2"]);
        match &rule.head[0].value_terms[0] {
            ValueTerm::Expr(e) => {
                assert_eq!(e.coeffs, vec![(1, "d1".into()), (1, "d2".into())]);
                assert_eq!(e.offset, 0);
                assert_eq!(e.output, "z");
            }
            other => panic!("expected expression, got {other:?}"),
        }
    }

    #[test]
    fn auto_ids_assigned_by_position() {
        let src = "\
pred p/1 latent
pred q/1
p(x) => q(x)
p(x) & p(y) => q(x)
";
        let set = parse_rules(src).unwrap();
        assert_eq!(set.rules[0].id, "r0");
        assert_eq!(set.rules[1].id, "r1");
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_rules("pred p/1\np(x => p(x)\n").unwrap_err();
        match err {
            LogicError::Syntax { line, col, .. } => {
                assert_eq!(line, 2);
                assert_eq!(col, 5); // the `=>` where `)` was expected
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn undeclared_predicate_rejected() {
        let err = parse_rules("pred p/1\np(x) => q(x)\n").unwrap_err();
        assert!(matches!(
            err,
            LogicError::UndeclaredPredicate { ref name, line: 2 } if name == "q"
        ));
    }

    #[test]
    fn arity_mismatch_rejected() {
        let err = parse_rules("pred p/1\npred q/2\np(x, y) => q(x, y)\n").unwrap_err();
        assert!(matches!(
            err,
            LogicError::ArityMismatch { ref predicate, got_entity: 2, expected_entity: 1, .. }
                if predicate == "p"
        ));
    }

    #[test]
    fn duplicate_rule_id_rejected() {
        let src = "pred p/1\npred q/1\nR: p(x) => q(x)\nR: q(x) => p(x)\n";
        assert!(matches!(
            parse_rules(src).unwrap_err(),
            LogicError::DuplicateRuleId { .. }
        ));
    }

    #[test]
    fn duplicate_predicate_rejected() {
        assert!(matches!(
            parse_rules("pred p/1\npred p/2\n").unwrap_err(),
            LogicError::DuplicatePredicate { .. }
        ));
    }

    #[test]
    fn unbound_head_value_variable_rejected() {
        let src = "pred digit/1+1 latent\npred addition/0+1\ndigit(x; d1) => addition(; d9)\n";
        assert!(matches!(
            parse_rules(src).unwrap_err(),
            LogicError::UnboundValueVariable { ref variable, .. } if variable == "d9"
        ));
    }

    #[test]
    fn zero_arity_predicate_rejected() {
        assert!(matches!(
            parse_rules("pred nothing/0\n").unwrap_err(),
            LogicError::ZeroArity { .. }
        ));
    }

    #[test]
    fn entity_constants_and_literals() {
        let src = "pred digit/1+1 latent\npred addition/0+1\ndigit(@0; 3) => addition(; 7)\n";
        let set = parse_rules(src).unwrap();
        let rule = &set.rules[0];
        assert_eq!(rule.body[0].entity_terms[0], EntityTerm::Constant(0));
        assert_eq!(rule.body[0].value_terms[0], ValueTerm::Literal(3));
        assert_eq!(rule.head[0].value_terms[0], ValueTerm::Literal(7));
    }

    #[test]
    fn render_round_trips() {
        for src in [
            ATTR_SRC,
            "pred digit/1+1 latent\npred addition/0+1\nadd: digit(x; d1) & digit(y; d2) => addition(; 10*d1 + 1*d2 + 5 -> z) :: 0.25\n",
        ] {
            let set = parse_rules(src).unwrap();
            let rendered = set.render();
            let reparsed = parse_rules(&rendered).unwrap();
            assert_eq!(set, reparsed);
        }
    }

    prop_compose! {
        fn arb_ruleset()(
            n_preds in 1usize..5,
            n_rules in 1usize..4,
            latent_mask in proptest::collection::vec(any::<bool>(), 5),
            weights in proptest::collection::vec(0.01f64..4.0, 4),
            picks in proptest::collection::vec(proptest::collection::vec(0usize..5, 1..4), 4),
        ) -> RuleSet {
            let predicates: Vec<PredicateDecl> = (0..n_preds)
                .map(|i| PredicateDecl {
                    name: format!("p{i}"),
                    entity_arity: 1,
                    value_arity: 0,
                    kind: if latent_mask[i] { PredicateKind::Latent } else { PredicateKind::Observed },
                })
                .collect();
            let unary = |i: usize| Atom {
                predicate: format!("p{}", i % n_preds),
                entity_terms: vec![EntityTerm::Variable("x".into())],
                value_terms: vec![],
            };
            let rules = (0..n_rules)
                .map(|r| Rule {
                    id: format!("g{r}"),
                    body: picks[r].iter().map(|&i| unary(i)).collect(),
                    head: vec![unary(r)],
                    weight: weights[r],
                })
                .collect();
            RuleSet { predicates, rules }
        }
    }

    proptest! {
        #[test]
        fn random_rulesets_round_trip(set in arb_ruleset()) {
            let reparsed = parse_rules(&set.render()).unwrap();
            prop_assert_eq!(set, reparsed);
        }
    }
}
