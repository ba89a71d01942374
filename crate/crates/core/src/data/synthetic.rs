//! Desk-scale synthetic code-classification tasks.
//!
//! `paren3` emits small Python-like functions carrying exactly one defect:
//! a missing closing bracket (class 0), an unindented body line (class 1)
//! or a deleted `:`/`=`/`,` (class 2). `swapbug2` emits arithmetic
//! assignments whose operands appear in alphabetical order; class 1 swaps two
//! adjacent operands. Both generators are deterministic in their seed and
//! keep the three splits disjoint.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Example, RawDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Paren3,
    Swapbug2,
}

impl TaskKind {
    pub fn num_classes(self) -> usize {
        match self {
            TaskKind::Paren3 => 3,
            TaskKind::Swapbug2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Paren3 => "paren3",
            TaskKind::Swapbug2 => "swapbug2",
        }
    }

    fn min_raw_len(self) -> usize {
        match self {
            TaskKind::Paren3 => 28,
            TaskKind::Swapbug2 => 16,
        }
    }
}

fn default_max_raw_len() -> usize {
    60
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default = "default_max_raw_len")]
    pub max_raw_len: usize,
}

impl SyntheticTaskSpec {
    pub fn new(kind: TaskKind, train: usize, valid: usize, test: usize, seed: u64) -> Self {
        Self { kind, train, valid, test, seed, max_raw_len: default_max_raw_len() }
    }
}

/// Generates the three labelled splits described by `spec`.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<RawDataset> {
    let c = spec.kind.num_classes();
    for (name, n) in [("train", spec.train), ("valid", spec.valid), ("test", spec.test)] {
        if n < 10 * c {
            return Err(Error::Input(format!(
                "{} {name} split of {n} samples is below the minimum of {}",
                spec.kind.name(),
                10 * c
            )));
        }
    }
    if spec.max_raw_len < spec.kind.min_raw_len() {
        return Err(Error::Input(format!(
            "max_raw_len {} is too short for {} (minimum {})",
            spec.max_raw_len,
            spec.kind.name(),
            spec.kind.min_raw_len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut split = |n: usize| -> Result<Vec<Example>> {
        let labels = split_labels(spec.kind, n, &mut rng);
        labels.into_iter().map(|label| unique_sample(spec.kind, label, spec.max_raw_len, &mut rng, &mut seen)).collect()
    };
    Ok(RawDataset { train: split(spec.train)?, valid: split(spec.valid)?, test: split(spec.test)? })
}

/// Unlabelled pretraining corpus drawn from the same generator.
pub fn synthetic_corpus(kind: TaskKind, n: usize, seed: u64, max_raw_len: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = kind.num_classes();
    (0..n).map(|_| sample(kind, rng.random_range(0..c), max_raw_len, &mut rng)).collect()
}

fn split_labels(kind: TaskKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = match kind {
        TaskKind::Paren3 => (0..n).map(|i| i % 3).collect(),
        TaskKind::Swapbug2 => {
            let positives = ((n as f64) * 0.1).round() as usize;
            (0..n).map(|i| usize::from(i < positives)).collect()
        }
    };
    labels.shuffle(rng);
    labels
}

fn unique_sample(
    kind: TaskKind,
    label: usize,
    max_raw_len: usize,
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<String>,
) -> Result<Example> {
    for _ in 0..10_000 {
        let text = sample(kind, label, max_raw_len, rng);
        if seen.insert(text.clone()) {
            return Ok(Example { text, label });
        }
    }
    Err(Error::Input(format!("could not draw enough distinct {} samples", kind.name())))
}

fn sample(kind: TaskKind, label: usize, max_raw_len: usize, rng: &mut ChaCha8Rng) -> String {
    match kind {
        TaskKind::Paren3 => paren3_sample(label, max_raw_len, rng),
        TaskKind::Swapbug2 => swapbug2_sample(label, max_raw_len, rng),
    }
}

// ── paren3 ─────────────────────────────────────────────────────────────

const VARS: &[&str] = &["a", "b", "n", "x", "y", "acc", "val", "tmp"];
const FUNCS: &[&str] = &["f", "g", "run", "step", "calc", "load"];

#[derive(Clone, Debug)]
struct Line {
    indent: usize,
    text: String,
}

fn render(lines: &[Line]) -> String {
    lines.iter().map(|l| format!("{}{}", " ".repeat(l.indent), l.text)).collect::<Vec<_>>().join("\n")
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn atom(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.7) {
        pick(rng, VARS).to_owned()
    } else {
        rng.random_range(0..100).to_string()
    }
}

fn expr(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..5) {
        0 => atom(rng),
        1 => format!("{}({})", pick(rng, FUNCS), atom(rng)),
        2 => format!("{}({}, {})", pick(rng, FUNCS), atom(rng), atom(rng)),
        3 => format!("[{}, {}]", atom(rng), atom(rng)),
        _ => format!("{} + {}", pick(rng, VARS), atom(rng)),
    }
}

fn statement(rng: &mut ChaCha8Rng, indent: usize) -> Vec<Line> {
    let simple = |rng: &mut ChaCha8Rng| match rng.random_range(0..3) {
        0 => format!("return {}", expr(rng)),
        1 => format!("{}({})", pick(rng, FUNCS), atom(rng)),
        _ => format!("{} = {}", pick(rng, VARS), expr(rng)),
    };
    match rng.random_range(0..5) {
        0 => vec![
            Line { indent, text: format!("if {} > {}:", pick(rng, VARS), rng.random_range(0..10)) },
            Line { indent: indent + 4, text: simple(rng) },
        ],
        1 => vec![
            Line { indent, text: format!("for {} in range({}):", pick(rng, VARS), rng.random_range(1..10)) },
            Line { indent: indent + 4, text: simple(rng) },
        ],
        _ => vec![Line { indent, text: simple(rng) }],
    }
}

fn paren3_program(max_len: usize, rng: &mut ChaCha8Rng) -> Vec<Line> {
    loop {
        let mut lines = vec![Line {
            indent: 0,
            text: format!("def {}({}, {}):", pick(rng, FUNCS), pick(rng, VARS), pick(rng, VARS)),
        }];
        for _ in 0..8 {
            let stmt = statement(rng, 4);
            let mut candidate = lines.clone();
            candidate.extend(stmt);
            if render(&candidate).len() <= max_len {
                lines = candidate;
            }
        }
        if lines.len() > 1 {
            return lines;
        }
    }
}

fn paren3_sample(label: usize, max_raw_len: usize, rng: &mut ChaCha8Rng) -> String {
    let mut lines = paren3_program(max_raw_len, rng);
    match label {
        0 => delete_one_of(&render(&lines), &[')', ']'], rng),
        1 => {
            // a body line loses its indentation
            let body: Vec<usize> = (0..lines.len()).filter(|&i| lines[i].indent > 0).collect();
            let i = *body.choose(rng).expect("programs always have a body");
            lines[i].indent = 0;
            render(&lines)
        }
        _ => delete_one_of(&render(&lines), &[':', '=', ','], rng),
    }
}

fn delete_one_of(text: &str, chars: &[char], rng: &mut ChaCha8Rng) -> String {
    let positions: Vec<usize> = text.char_indices().filter(|(_, c)| chars.contains(c)).map(|(i, _)| i).collect();
    let at = *positions.choose(rng).expect("program contains the target characters");
    let mut out = text.to_owned();
    out.remove(at);
    out
}

// ── swapbug2 ───────────────────────────────────────────────────────────

const OPS: &[&str] = &["+", "-", "*", "/"];

fn swap_expr(operands: &[char], top: bool, rng: &mut ChaCha8Rng) -> String {
    if operands.len() == 1 {
        return operands[0].to_string();
    }
    let mid = rng.random_range(1..operands.len());
    let left = swap_expr(&operands[..mid], false, rng);
    let right = swap_expr(&operands[mid..], false, rng);
    let e = format!("{left} {} {right}", pick(rng, OPS));
    if !top && rng.random_bool(0.4) {
        format!("({e})")
    } else {
        e
    }
}

fn swapbug2_sample(label: usize, max_raw_len: usize, rng: &mut ChaCha8Rng) -> String {
    loop {
        let k = rng.random_range(3..=6);
        let mut letters: Vec<char> =
            ('a'..='z').filter(|&c| c != 'r').collect::<Vec<_>>().choose_multiple(rng, k).copied().collect();
        letters.sort_unstable();
        let mut text = format!("r = {}", swap_expr(&letters, true, rng));
        if label == 1 {
            let at = rng.random_range(0..k - 1);
            text = swap_adjacent_operands(&text, at);
        }
        if text.len() <= max_raw_len {
            return text;
        }
    }
}

/// Exchanges the operands at positions `k` and `k + 1` (in reading order)
/// of a swapbug expression.
pub fn swap_adjacent_operands(text: &str, k: usize) -> String {
    let rhs_start = text.find('=').map_or(0, |i| i + 1);
    let pos: Vec<usize> =
        text.char_indices().filter(|&(i, c)| i >= rhs_start && c.is_ascii_lowercase()).map(|(i, _)| i).collect();
    let mut bytes = text.as_bytes().to_vec();
    if k + 1 < pos.len() {
        bytes.swap(pos[k], pos[k + 1]);
    }
    String::from_utf8(bytes).expect("operands are ascii")
}

/// Grammar check for swapbug expressions: `ident = expr` with
/// `expr := term (op term)*` and `term := letter | "(" expr ")"`.
/// Returns the operands in reading order when the text is well formed.
pub fn parse_swapbug(text: &str) -> Option<Vec<char>> {
    let rest = text.strip_prefix("r = ")?;
    let chars: Vec<char> = rest.chars().collect();
    let mut operands = Vec::new();
    let end = parse_expr(&chars, 0, &mut operands)?;
    (end == chars.len()).then_some(operands)
}

fn parse_expr(s: &[char], mut i: usize, out: &mut Vec<char>) -> Option<usize> {
    i = parse_term(s, i, out)?;
    while i + 2 < s.len() && s[i] == ' ' && OPS.iter().any(|op| op.starts_with(s[i + 1])) && s[i + 2] == ' ' {
        i = parse_term(s, i + 3, out)?;
    }
    Some(i)
}

fn parse_term(s: &[char], i: usize, out: &mut Vec<char>) -> Option<usize> {
    match s.get(i)? {
        '(' => {
            let j = parse_expr(s, i + 1, out)?;
            (s.get(j) == Some(&')')).then_some(j + 1)
        }
        c if c.is_ascii_lowercase() => {
            out.push(*c);
            Some(i + 1)
        }
        _ => None,
    }
}

/// Label the generator assigns to a swapbug text, if it parses.
pub fn swapbug_label(text: &str) -> Option<usize> {
    let ops = parse_swapbug(text)?;
    Some(usize::from(!ops.windows(2).all(|w| w[0] < w[1])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn freqs(xs: &[Example], c: usize) -> Vec<f64> {
        let mut n = vec![0.0; c];
        xs.iter().for_each(|e| n[e.label] += 1.0);
        n.iter().map(|v| v / xs.len() as f64).collect()
    }

    #[test]
    fn paren3_balanced_classes() {
        let ds = gen_synthetic(&SyntheticTaskSpec::new(TaskKind::Paren3, 300, 60, 60, 1)).unwrap();
        assert_eq!((ds.train.len(), ds.valid.len(), ds.test.len()), (300, 60, 60));
        for f in freqs(&ds.train, 3) {
            assert!((f - 1.0 / 3.0).abs() <= 0.05, "{f}");
        }
    }

    #[test]
    fn paren3_defects_match_labels() {
        let ds = gen_synthetic(&SyntheticTaskSpec::new(TaskKind::Paren3, 300, 60, 60, 2)).unwrap();
        for ex in &ds.train {
            assert!(ex.text.len() <= 60);
            let opens = ex.text.matches(['(', '[']).count();
            let closes = ex.text.matches([')', ']']).count();
            let bad_indent = ex.text.lines().skip(1).any(|l| !l.starts_with(' '));
            match ex.label {
                0 => assert!(opens == closes + 1 && !bad_indent, "{}", ex.text),
                1 => assert!(opens == closes && bad_indent, "{}", ex.text),
                _ => assert!(opens == closes && !bad_indent, "{}", ex.text),
            }
        }
    }

    #[test]
    fn swapbug2_is_ninety_ten_and_parses() {
        let ds = gen_synthetic(&SyntheticTaskSpec::new(TaskKind::Swapbug2, 200, 50, 50, 3)).unwrap();
        let f = freqs(&ds.train, 2);
        assert!((f[1] - 0.1).abs() < 1e-9);
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            assert_eq!(swapbug_label(&ex.text), Some(ex.label), "{}", ex.text);
        }
    }

    #[test]
    fn swapping_a_clean_sample_flips_its_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let text = swapbug2_sample(0, 60, &mut rng);
            assert_eq!(swapbug_label(&text), Some(0));
            let k = parse_swapbug(&text).unwrap().len();
            let swapped = swap_adjacent_operands(&text, rng.random_range(0..k - 1));
            assert_eq!(swapbug_label(&swapped), Some(1), "{text} -> {swapped}");
        }
    }

    #[test]
    fn grammar_rejects_unbalanced() {
        assert!(parse_swapbug("r = (a + b").is_none());
        assert!(parse_swapbug("r = a + b)").is_none());
        assert!(parse_swapbug("r = a +").is_none());
        assert_eq!(parse_swapbug("r = (a + b) * c"), Some(vec!['a', 'b', 'c']));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let spec = SyntheticTaskSpec::new(TaskKind::Paren3, 90, 30, 30, 5);
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a, gen_synthetic(&spec).unwrap());
        let mut all: Vec<&str> = a.train.iter().chain(&a.valid).chain(&a.test).map(|e| e.text.as_str()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn too_small_split_is_rejected() {
        assert!(gen_synthetic(&SyntheticTaskSpec::new(TaskKind::Paren3, 29, 30, 30, 0)).is_err());
    }
}
