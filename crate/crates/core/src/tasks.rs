//! Synthetic task packs and metrics.
//!
//! Two desk-scale tasks: glyph digit addition (pairs or four-glyph
//! multi-digit items, weakly supervised with sum labels only) and attribute
//! zero-shot classification (noisy attribute-indicator vectors whose classes
//! are defined by rules). Dataset files are line-delimited
//! `split \t label \t base64(bytes)` records. Generation derives one RNG
//! stream per item, so datasets are bit-reproducible per seed and items
//! could be produced in parallel.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::ground::ValueDomains;
use crate::logic::{parse_rules, LogicError, PredicateKind, RuleSet};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error("line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error("line {line}: expected {expected} bytes, got {got}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("unsupported digit count {0} (1 or 2)")]
    UnsupportedDigits(usize),
    #[error("noise {0} outside [0, 0.5]")]
    NoiseOutOfRange(f64),
    #[error("class rule {rule} is malformed: {msg}")]
    MalformedClassRule { rule: String, msg: String },
    #[error("uncoverable test class {class}: attribute {attribute} appears in no train rule")]
    UncoverableTestClass { class: String, attribute: String },
    #[error("cannot reserve {wanted} test classes from {total} class rules")]
    SplitTooLarge { wanted: usize, total: usize },
    #[error("empty dataset")]
    Empty,
    #[error("{preds} predictions against {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
}

pub type Result<T> = std::result::Result<T, TaskError>;

/// Task-level supervision: a digit sum or a class name. Never a digit list;
/// per-digit labels are unexpressible here, which is the weak-supervision
/// guarantee.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskLabel {
    Sum(i64),
    Class(String),
}

impl std::fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskLabel::Sum(v) => write!(f, "{v}"),
            TaskLabel::Class(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One item: a label and one byte grid per entity (8x8 glyphs for digits, a
/// single attribute-indicator vector for the attribute task).
#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub split: Split,
    pub label: TaskLabel,
    pub grids: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<DataItem>,
    /// Bytes per entity grid.
    pub input_dim: usize,
    pub entities_per_item: usize,
}

impl Dataset {
    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &DataItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    /// Retags every item, e.g. to turn a freshly generated set into test
    /// data.
    pub fn with_split(mut self, split: Split) -> Self {
        for item in &mut self.items {
            item.split = split;
        }
        self
    }

    /// Per-entity inputs as f64 vectors, in item order.
    pub fn inputs(&self, item: &DataItem) -> Vec<Vec<f64>> {
        item.grids
            .iter()
            .map(|g| g.iter().map(|&b| b as f64).collect())
            .collect()
    }
}

/// The ordered label universe a classifier head is built over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelSpace {
    /// Sums lo..=hi in order.
    Sums { lo: i64, hi: i64 },
    /// Class names in the stored order.
    Classes(Vec<String>),
}

impl LabelSpace {
    pub fn len(&self) -> usize {
        match self {
            LabelSpace::Sums { lo, hi } => (hi - lo + 1).max(0) as usize,
            LabelSpace::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, label: &TaskLabel) -> Option<usize> {
        match (self, label) {
            (LabelSpace::Sums { lo, hi }, TaskLabel::Sum(v)) if v >= lo && v <= hi => {
                Some((v - lo) as usize)
            }
            (LabelSpace::Classes(c), TaskLabel::Class(name)) => {
                c.iter().position(|x| x == name)
            }
            _ => None,
        }
    }

    pub fn label_at(&self, index: usize) -> TaskLabel {
        match self {
            LabelSpace::Sums { lo, .. } => TaskLabel::Sum(lo + index as i64),
            LabelSpace::Classes(c) => TaskLabel::Class(c[index].clone()),
        }
    }
}

/// 8x8 binary glyph templates for the digits 0-9.
pub const DIGIT_GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..",
        "........",
    ],
    [
        "...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..",
        "........",
    ],
    [
        "..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".######.",
        "........",
    ],
    [
        "..####..", ".#....#.", "......#.", "...###..", "......#.", ".#....#.", "..####..",
        "........",
    ],
    [
        "....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..",
        "........",
    ],
    [
        ".#####..", ".#......", ".####...", ".....#..", "......#.", ".#....#.", "..####..",
        "........",
    ],
    [
        "..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..",
        "........",
    ],
    [
        ".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....",
        "........",
    ],
    [
        "..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..",
        "........",
    ],
    [
        "..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "..####..",
        "........",
    ],
];

/// Noiseless 64-byte template of one digit.
pub fn glyph_template(digit: usize) -> Vec<u8> {
    DIGIT_GLYPHS[digit]
        .iter()
        .flat_map(|row| row.bytes().map(|b| u8::from(b == b'#')))
        .collect()
}

fn item_rng(seed: u64, item: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(item);
    rng
}

fn noisy_glyph(digit: usize, noise: f64, rng: &mut ChaCha12Rng) -> Vec<u8> {
    let mut grid = glyph_template(digit);
    if noise > 0.0 {
        for px in &mut grid {
            if rng.gen_bool(noise) {
                *px ^= 1;
            }
        }
    }
    grid
}

fn check_noise(noise: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&noise) || !noise.is_finite() {
        return Err(TaskError::NoiseOutOfRange(noise));
    }
    Ok(())
}

/// Pairs of noisy digit glyphs labeled with their sum only.
pub fn gen_digit_dataset(seed: u64, n_pairs: usize, glyph_noise: f64) -> Result<Dataset> {
    check_noise(glyph_noise)?;
    let mut items = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let mut rng = item_rng(seed, i as u64);
        let d1 = rng.gen_range(0..10usize);
        let d2 = rng.gen_range(0..10usize);
        let grids = vec![
            noisy_glyph(d1, glyph_noise, &mut rng),
            noisy_glyph(d2, glyph_noise, &mut rng),
        ];
        items.push(DataItem {
            split: Split::Train,
            label: TaskLabel::Sum((d1 + d2) as i64),
            grids,
        });
    }
    Ok(Dataset {
        items,
        input_dim: 64,
        entities_per_item: 2,
    })
}

/// Four-glyph items for two-digit addition: glyphs (a,b,c,d) labeled
/// 10a+b + 10c+d.
pub fn gen_multi_digit_dataset(seed: u64, n_items: usize, glyph_noise: f64) -> Result<Dataset> {
    check_noise(glyph_noise)?;
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let mut rng = item_rng(seed, i as u64);
        let digits: Vec<usize> = (0..4).map(|_| rng.gen_range(0..10usize)).collect();
        let grids = digits
            .iter()
            .map(|&d| noisy_glyph(d, glyph_noise, &mut rng))
            .collect();
        let sum =
            10 * digits[0] as i64 + digits[1] as i64 + 10 * digits[2] as i64 + digits[3] as i64;
        items.push(DataItem {
            split: Split::Train,
            label: TaskLabel::Sum(sum),
            grids,
        });
    }
    Ok(Dataset {
        items,
        input_dim: 64,
        entities_per_item: 4,
    })
}

/// The addition ruleset for 1- or 2-digit numbers.
pub fn make_addition_rules(num_digits: usize) -> Result<RuleSet> {
    let src = match num_digits {
        1 => "pred digit/1+1 latent\npred addition/0+1\n\
              add: digit(x; d1) & digit(y; d2) => addition(; 1*d1 + 1*d2 -> z)\n",
        2 => "pred digit/1+1 latent\npred addition/0+1\n\
              add2: digit(x1; d1) & digit(x2; d2) & digit(x3; d3) & digit(x4; d4) \
              => addition(; 10*d1 + 1*d2 + 10*d3 + 1*d4 -> z)\n",
        n => return Err(TaskError::UnsupportedDigits(n)),
    };
    Ok(parse_rules(src)?)
}

/// Value domains for the addition rules: digits 0-9 and sums up to the
/// task's maximum.
pub fn digit_domains(num_digits: usize) -> Result<ValueDomains> {
    let hi = match num_digits {
        1 => 18,
        2 => 198,
        n => return Err(TaskError::UnsupportedDigits(n)),
    };
    let mut domains = ValueDomains::default();
    domains.set("digit", 0, 9);
    domains.set("addition", 0, hi);
    Ok(domains)
}

/// Latent unary predicates of a class ruleset, in declaration order; these
/// index the attribute-vector coordinates.
pub fn attribute_names(rules: &RuleSet) -> Vec<String> {
    rules
        .predicates
        .iter()
        .filter(|p| p.kind == PredicateKind::Latent && p.entity_arity == 1 && p.value_arity == 0)
        .map(|p| p.name.clone())
        .collect()
}

fn class_of_rule(rules: &RuleSet, index: usize) -> Result<(String, Vec<String>)> {
    let rule = &rules.rules[index];
    if rule.head.len() != 1 || !rule.head[0].value_terms.is_empty() {
        return Err(TaskError::MalformedClassRule {
            rule: rule.id.clone(),
            msg: "head must be a single class atom".into(),
        });
    }
    let class = rule.head[0].predicate.clone();
    let mut attrs = Vec::new();
    for atom in &rule.body {
        let decl = rules.predicate(&atom.predicate);
        let ok = decl.map_or(false, |d| {
            d.kind == PredicateKind::Latent && d.entity_arity == 1 && d.value_arity == 0
        });
        if !ok {
            return Err(TaskError::MalformedClassRule {
                rule: rule.id.clone(),
                msg: format!("body atom {} is not a unary attribute", atom.predicate),
            });
        }
        attrs.push(atom.predicate.clone());
    }
    Ok((class, attrs))
}

/// Zero-shot class split: which rule heads train and which are held out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSplit {
    pub train_classes: Vec<String>,
    pub test_classes: Vec<String>,
}

/// Reserves up to `n_test_classes` classes for the test split, scanning
/// rules from the end and holding a class out only while every attribute in
/// its body still occurs in some remaining train rule.
pub fn attribute_split(rules: &RuleSet, n_test_classes: usize) -> Result<AttributeSplit> {
    let parsed: Vec<(String, Vec<String>)> = (0..rules.rules.len())
        .map(|i| class_of_rule(rules, i))
        .collect::<Result<_>>()?;
    if n_test_classes >= parsed.len() {
        return Err(TaskError::SplitTooLarge {
            wanted: n_test_classes,
            total: parsed.len(),
        });
    }
    let mut is_test = vec![false; parsed.len()];
    let mut reserved = 0;
    for i in (0..parsed.len()).rev() {
        if reserved == n_test_classes {
            break;
        }
        let covered = parsed[i].1.iter().all(|attr| {
            parsed
                .iter()
                .enumerate()
                .any(|(j, (_, attrs))| j != i && !is_test[j] && attrs.contains(attr))
        });
        if covered {
            is_test[i] = true;
            reserved += 1;
        }
    }
    if reserved < n_test_classes {
        // Every remaining candidate holds some attribute hostage; report the
        // first offender for diagnosis.
        for i in (0..parsed.len()).rev() {
            if is_test[i] {
                continue;
            }
            if let Some(attr) = parsed[i].1.iter().find(|attr| {
                !parsed
                    .iter()
                    .enumerate()
                    .any(|(j, (_, attrs))| j != i && !is_test[j] && attrs.contains(*attr))
            }) {
                return Err(TaskError::UncoverableTestClass {
                    class: parsed[i].0.clone(),
                    attribute: attr.clone(),
                });
            }
        }
        return Err(TaskError::SplitTooLarge {
            wanted: n_test_classes,
            total: parsed.len(),
        });
    }
    Ok(AttributeSplit {
        train_classes: parsed
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| !t)
            .map(|((c, _), _)| c.clone())
            .collect(),
        test_classes: parsed
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t)
            .map(|((c, _), _)| c.clone())
            .collect(),
    })
}

/// Noisy attribute-indicator vectors per class rule. Test items come only
/// from the held-out classes, none of which appear in the train split.
pub fn gen_attribute_dataset(
    seed: u64,
    n_per_class: usize,
    noise: f64,
    rules: &RuleSet,
    n_test_classes: usize,
) -> Result<Dataset> {
    check_noise(noise)?;
    let names = attribute_names(rules);
    let split = attribute_split(rules, n_test_classes)?;
    let mut items = Vec::new();
    let mut stream = 0u64;
    for i in 0..rules.rules.len() {
        let (class, attrs) = class_of_rule(rules, i)?;
        let tag = if split.test_classes.contains(&class) {
            Split::Test
        } else {
            Split::Train
        };
        for _ in 0..n_per_class {
            let mut rng = item_rng(seed, stream);
            stream += 1;
            let mut vector = vec![0u8; names.len()];
            for attr in &attrs {
                let idx = names.iter().position(|n| n == attr).unwrap();
                vector[idx] = 1;
            }
            if noise > 0.0 {
                for px in &mut vector {
                    if rng.gen_bool(noise) {
                        *px ^= 1;
                    }
                }
            }
            items.push(DataItem {
                split: tag,
                label: TaskLabel::Class(class.clone()),
                grids: vec![vector],
            });
        }
    }
    Ok(Dataset {
        items,
        input_dim: names.len(),
        entities_per_item: 1,
    })
}

/// Classification counts; `fn_` is the false-negative count (trailing
/// underscore dodges the keyword).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub acc: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> Result<Self> {
        let denom = tp + tn + fp + fn_;
        if denom == 0 {
            return Err(TaskError::Empty);
        }
        Ok(Metrics {
            tp,
            tn,
            fp,
            fn_,
            acc: (tp + tn) as f64 / denom as f64,
        })
    }
}

/// Accuracy over predictions. With exactly two distinct labels the counts
/// are one-vs-rest against the greater label as positive; with more, the
/// exact-match encoding puts correct predictions in tp and wrong ones in
/// fn_, so acc is the fraction correct in both cases.
pub fn accuracy(preds: &[TaskLabel], labels: &[TaskLabel]) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(TaskError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(TaskError::Empty);
    }
    let classes: BTreeSet<&TaskLabel> = preds.iter().chain(labels).collect();
    if classes.len() <= 2 {
        let positive = classes.iter().next_back().unwrap();
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for (p, y) in preds.iter().zip(labels) {
            match (p == *positive, y == *positive) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        Metrics::from_counts(tp, tn, fp, fn_)
    } else {
        let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        Metrics::from_counts(correct, 0, 0, preds.len() - correct)
    }
}

/// One-vs-rest counts per distinct label, sorted by label.
pub fn per_class_counts(preds: &[TaskLabel], labels: &[TaskLabel]) -> Vec<(TaskLabel, Metrics)> {
    let classes: BTreeSet<&TaskLabel> = preds.iter().chain(labels).collect();
    classes
        .into_iter()
        .map(|c| {
            let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
            for (p, y) in preds.iter().zip(labels) {
                match (p == c, y == c) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                }
            }
            (c.clone(), Metrics::from_counts(tp, tn, fp, fn_).unwrap())
        })
        .collect()
}

/// Writes `split \t label \t base64(grid bytes)` lines; entity grids are
/// concatenated before encoding.
pub fn save_dataset(dataset: &Dataset, out: &mut dyn Write) -> Result<()> {
    for item in &dataset.items {
        let bytes: Vec<u8> = item.grids.concat();
        writeln!(
            out,
            "{}\t{}\t{}",
            item.split.tag(),
            item.label,
            BASE64.encode(bytes)
        )?;
    }
    Ok(())
}

/// Loads records, validating that every item carries
/// `entities_per_item * input_dim` bytes.
pub fn load_dataset(
    input: &mut dyn BufRead,
    input_dim: usize,
    entities_per_item: usize,
) -> Result<Dataset> {
    let mut items = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (split, label, blob) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(l), Some(b)) => (s, l, b),
            _ => {
                return Err(TaskError::BadRecord {
                    line: lineno,
                    msg: "expected 3 tab-separated fields".into(),
                })
            }
        };
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(TaskError::BadRecord {
                    line: lineno,
                    msg: format!("unknown split {other}"),
                })
            }
        };
        let label = match label.parse::<i64>() {
            Ok(v) => TaskLabel::Sum(v),
            Err(_) => TaskLabel::Class(label.to_string()),
        };
        let bytes = BASE64.decode(blob).map_err(|e| TaskError::BadRecord {
            line: lineno,
            msg: format!("bad base64: {e}"),
        })?;
        let expected = input_dim * entities_per_item;
        if bytes.len() != expected {
            return Err(TaskError::DimensionMismatch {
                line: lineno,
                expected,
                got: bytes.len(),
            });
        }
        let grids = bytes.chunks(input_dim).map(<[u8]>::to_vec).collect();
        items.push(DataItem {
            split,
            label,
            grids,
        });
    }
    if items.is_empty() {
        return Err(TaskError::Empty);
    }
    Ok(Dataset {
        items,
        input_dim,
        entities_per_item,
    })
}
