//! Anatomical position phrases in referring expressions.
//!
//! A closed grammar recognizes lung position phrases such as
//! `upper left lung`, `bilateral lung` or `lower left and lower right lung`
//! and maps them onto six cells: `{upper, middle, lower} x {left, right}`.
//! The same module perturbs (PosAug) and mixes those phrases, and computes
//! the Jaccard affinity between position labels.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Replacement token used by the dropout branch of PosAug.
pub const UNK_POS: &str = "[UNK_POS]";
/// Location-agnostic replacement used by the fuzzing branch of PosAug.
pub const FUZZ_PHRASE: &str = "a region of the lung";

pub const ROW_NAMES: [&str; 3] = ["upper", "middle", "lower"];
pub const COL_NAMES: [&str; 2] = ["left", "right"];

/// Grid cell `(row, col)` containing pixel `(y, x)`. Row bands are
/// `[0, H/3)`, `[H/3, 2H/3)`, `[2H/3, H)` (integer division); columns split
/// at `W/2`, the left half being "left".
pub fn cell_of(y: usize, x: usize, height: usize, width: usize) -> (usize, usize) {
    let row = if y < height / 3 {
        0
    } else if y < 2 * height / 3 {
        1
    } else {
        2
    };
    (row, usize::from(x >= width / 2))
}

/// Six-cell position label. Bit `row * 2 + col` is set when the cell
/// `(row, col)` is referenced; rows are upper/middle/lower, columns
/// left/right.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct PositionLabel(u8);

impl PositionLabel {
    pub const EMPTY: PositionLabel = PositionLabel(0);
    pub const ALL: PositionLabel = PositionLabel(0b11_1111);

    pub fn from_mask(mask: u8) -> Self {
        PositionLabel(mask & 0b11_1111)
    }

    /// Builds a label from a 6-element 0/1 vector.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "position label needs 6 bits, got {}",
                bits.len()
            )));
        }
        let mut mask = 0u8;
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => mask |= 1 << i,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "position label bit must be 0 or 1, got {other}"
                    )))
                }
            }
        }
        Ok(PositionLabel(mask))
    }

    pub fn cell(row: usize, col: usize) -> Self {
        assert!(row < 3 && col < 2, "cell ({row}, {col}) out of range");
        PositionLabel(1 << (row * 2 + col))
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    pub fn bits(self) -> [u8; 6] {
        std::array::from_fn(|i| (self.0 >> i) & 1)
    }

    pub fn contains(self, row: usize, col: usize) -> bool {
        self.0 & (1 << (row * 2 + col)) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn union(self, other: Self) -> Self {
        PositionLabel(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        PositionLabel(self.0 & other.0)
    }

    /// Columns touched by the label: bit 0 = left, bit 1 = right.
    pub fn columns(self) -> u8 {
        let mut cols = 0u8;
        for row in 0..3 {
            for col in 0..2 {
                if self.contains(row, col) {
                    cols |= 1 << col;
                }
            }
        }
        cols
    }

    /// Active `(row, col)` cells in index order.
    pub fn cells(self) -> impl Iterator<Item = (usize, usize)> {
        (0..6)
            .filter(move |i| self.0 & (1 << i) != 0)
            .map(|i| (i / 2, i % 2))
    }
}

impl fmt::Debug for PositionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PositionLabel({:?})", self.bits())
    }
}

/// A located position phrase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionSpan {
    /// Byte offset of the first character.
    pub start: usize,
    /// Byte offset one past the last character.
    pub end: usize,
    pub cells: PositionLabel,
    pub surface: String,
}

/// Caption text plus its parsed position spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferringExpression {
    pub text: String,
    pub spans: Vec<PositionSpan>,
    pub label: PositionLabel,
}

impl ReferringExpression {
    pub fn parse(text: &str) -> Self {
        parse_positions(text)
    }

    pub fn first_span(&self) -> Option<&PositionSpan> {
        self.spans.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokKind {
    Word,
    Comma,
    Break,
}

#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    kind: TokKind,
    start: usize,
    end: usize,
    text: &'a str,
}

fn lex(text: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c.is_alphanumeric() || c == '_' {
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = iter.peek() {
                if d.is_alphanumeric() || d == '_' {
                    end = j + d.len_utf8();
                    iter.next();
                } else {
                    break;
                }
            }
            toks.push(Tok {
                kind: TokKind::Word,
                start: i,
                end,
                text: &text[i..end],
            });
        } else if c == ',' {
            toks.push(Tok {
                kind: TokKind::Comma,
                start: i,
                end: i + 1,
                text: ",",
            });
        } else if !c.is_whitespace() {
            let end = i + c.len_utf8();
            toks.push(Tok {
                kind: TokKind::Break,
                start: i,
                end,
                text: &text[i..end],
            });
        }
    }
    toks
}

fn is_word(tok: Option<&Tok<'_>>, word: &str) -> bool {
    matches!(tok, Some(t) if t.kind == TokKind::Word && t.text.eq_ignore_ascii_case(word))
}

/// `[upper|middle|lower|all] (left|right|bilateral)` starting at `i`.
fn parse_term(toks: &[Tok<'_>], i: usize) -> Option<(PositionLabel, usize)> {
    let mut rows: u8 = 0b111;
    let mut j = i;
    if let Some(t) = toks.get(j).filter(|t| t.kind == TokKind::Word) {
        let w = t.text.to_ascii_lowercase();
        match w.as_str() {
            "upper" => rows = 0b001,
            "middle" => rows = 0b010,
            "lower" => rows = 0b100,
            "all" => rows = 0b111,
            _ => {}
        }
        if matches!(w.as_str(), "upper" | "middle" | "lower" | "all") {
            j += 1;
        }
    }
    let t = toks.get(j).filter(|t| t.kind == TokKind::Word)?;
    let cols: u8 = match t.text.to_ascii_lowercase().as_str() {
        "left" => 0b01,
        "right" => 0b10,
        "bilateral" => 0b11,
        _ => return None,
    };
    let mut mask = 0u8;
    for row in 0..3 {
        for col in 0..2 {
            if rows & (1 << row) != 0 && cols & (1 << col) != 0 {
                mask |= 1 << (row * 2 + col);
            }
        }
    }
    Some((PositionLabel(mask), j + 1))
}

/// A conjunction of terms joined by `and` / `,`, closed by `lung`. Terms
/// after the last `lung` are not part of the span.
fn parse_chain(toks: &[Tok<'_>], k: usize) -> Option<(PositionLabel, usize, usize)> {
    let mut committed = PositionLabel::EMPTY;
    let mut pending = PositionLabel::EMPTY;
    let mut closed: Option<usize> = None;
    let mut i = k;
    while let Some((cells, next)) = parse_term(toks, i) {
        pending = pending.union(cells);
        i = next;
        if is_word(toks.get(i), "lung") {
            committed = committed.union(pending);
            pending = PositionLabel::EMPTY;
            i += 1;
            closed = Some(i);
        }
        match toks.get(i) {
            Some(t) if t.kind == TokKind::Comma => {
                i += 1;
                if is_word(toks.get(i), "and") {
                    i += 1;
                }
            }
            _ if is_word(toks.get(i), "and") => i += 1,
            _ => break,
        }
    }
    closed.map(|next| (committed, toks[k].start, next))
}

/// Locates every position phrase in `text`. Matching is case-insensitive;
/// text without a recognizable phrase yields no spans and an empty label.
pub fn parse_positions(text: &str) -> ReferringExpression {
    let toks = lex(text);
    let mut spans = Vec::new();
    let mut k = 0;
    while k < toks.len() {
        match parse_chain(&toks, k) {
            Some((cells, start, next)) => {
                let end = toks[next - 1].end;
                spans.push(PositionSpan {
                    start,
                    end,
                    cells,
                    surface: text[start..end].to_string(),
                });
                k = next;
            }
            None => k += 1,
        }
    }
    let label = spans
        .iter()
        .fold(PositionLabel::EMPTY, |acc, s| acc.union(s.cells));
    ReferringExpression {
        text: text.to_string(),
        spans,
        label,
    }
}

fn replace_spans(expr: &ReferringExpression, replacement: &str) -> String {
    let mut out = String::with_capacity(expr.text.len());
    let mut cursor = 0;
    for span in &expr.spans {
        out.push_str(&expr.text[cursor..span.start]);
        out.push_str(replacement);
        cursor = span.end;
    }
    out.push_str(&expr.text[cursor..]);
    out
}

/// Which PosAug edit was applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosAugEdit {
    Unchanged,
    Dropout,
    Fuzz,
}

/// Position-aware text augmentation. One branch draw per expression: with
/// probability `rho` every span becomes [`UNK_POS`], otherwise every span
/// becomes [`FUZZ_PHRASE`]. Expressions without spans are returned as-is
/// and consume no randomness.
pub fn posaug<R: Rng + ?Sized>(
    expr: &ReferringExpression,
    rho: f64,
    rng: &mut R,
) -> ReferringExpression {
    posaug_with_edit(expr, rho, rng).0
}

pub fn posaug_with_edit<R: Rng + ?Sized>(
    expr: &ReferringExpression,
    rho: f64,
    rng: &mut R,
) -> (ReferringExpression, PosAugEdit) {
    if expr.spans.is_empty() {
        return (expr.clone(), PosAugEdit::Unchanged);
    }
    let draw: f64 = rng.gen();
    let (replacement, edit) = if draw < rho {
        (UNK_POS, PosAugEdit::Dropout)
    } else {
        (FUZZ_PHRASE, PosAugEdit::Fuzz)
    };
    (parse_positions(&replace_spans(expr, replacement)), edit)
}

/// Replaces the first span of `expr` by `"<pos_i> and <pos_j>"`. When the
/// donor phrase equals the existing one the expression is left unchanged.
pub fn span_mix(expr: &ReferringExpression, pos_j: &str) -> Result<ReferringExpression> {
    let first = expr.spans.first().ok_or_else(|| {
        Error::InvalidArgument(format!("no position phrase to mix in {:?}", expr.text))
    })?;
    if first.surface == pos_j {
        return Ok(expr.clone());
    }
    let mut text = String::with_capacity(expr.text.len() + pos_j.len() + 5);
    text.push_str(&expr.text[..first.start]);
    text.push_str(&first.surface);
    text.push_str(" and ");
    text.push_str(pos_j);
    text.push_str(&expr.text[first.end..]);
    Ok(parse_positions(&text))
}

/// `|a ∩ b| / |a ∪ b|`, with two empty labels scoring 0.
pub fn jaccard_affinity(a: PositionLabel, b: PositionLabel) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Symmetric `B x B` matrix of Jaccard affinities with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl AffinityMatrix {
    /// Builds a matrix from raw row-major values; used for hand-specified
    /// affinities in tests and experiments.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Shape(format!(
                "affinity matrix {size}x{size} needs {} values",
                size * size
            )));
        }
        Ok(Self { size, values })
    }

    pub fn identity(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            values[i * size + i] = 1.0;
        }
        Self { size, values }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn affinity_matrix(labels: &[PositionLabel]) -> AffinityMatrix {
    let b = labels.len();
    let mut values = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            values[i * b + j] = if i == j {
                1.0
            } else {
                jaccard_affinity(labels[i], labels[j])
            };
        }
    }
    AffinityMatrix { size: b, values }
}

/// Both labels non-empty and their left/right column sets disjoint.
pub fn laterality_conflict(a: PositionLabel, b: PositionLabel) -> bool {
    !a.is_empty() && !b.is_empty() && a.columns() & b.columns() == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lbl(bits: [u8; 6]) -> PositionLabel {
        PositionLabel::from_bits(&bits).unwrap()
    }

    #[test]
    fn parses_the_conjunction_with_a_shared_lung() {
        let e = parse_positions("bilateral pulmonary infection, lower left and lower right lung");
        assert_eq!(e.label, lbl([0, 0, 0, 0, 1, 1]));
        assert_eq!(e.spans.len(), 1);
        assert_eq!(e.spans[0].surface, "lower left and lower right lung");
    }

    #[test]
    fn parses_single_cell() {
        let e = parse_positions("upper left lung");
        assert_eq!(e.label, lbl([1, 0, 0, 0, 0, 0]));
        assert_eq!(e.spans[0].start, 0);
        assert_eq!(e.spans[0].end, 15);
    }

    #[test]
    fn no_phrase_gives_empty_label() {
        let e = parse_positions("infection present");
        assert!(e.spans.is_empty());
        assert_eq!(e.label.bits(), [0; 6]);
    }

    #[test]
    fn bilateral_and_missing_rows() {
        assert_eq!(parse_positions("bilateral lung").label, PositionLabel::ALL);
        assert_eq!(parse_positions("left lung").label, lbl([1, 0, 1, 0, 1, 0]));
        assert_eq!(
            parse_positions("all right lung").label,
            lbl([0, 1, 0, 1, 0, 1])
        );
        assert_eq!(
            parse_positions("middle bilateral lung").label,
            lbl([0, 0, 1, 1, 0, 0])
        );
        assert_eq!(
            parse_positions("Upper LEFT Lung").label,
            lbl([1, 0, 0, 0, 0, 0])
        );
    }

    #[test]
    fn comma_conjunction_and_dangling_terms() {
        let e = parse_positions("upper left lung, lower right lung");
        assert_eq!(e.spans.len(), 1);
        assert_eq!(e.label, lbl([1, 0, 0, 0, 0, 1]));
        // "and lower right" is never closed by "lung".
        let e = parse_positions("upper left lung and lower right");
        assert_eq!(e.spans[0].surface, "upper left lung");
        assert_eq!(e.label, lbl([1, 0, 0, 0, 0, 0]));
        let e = parse_positions("bilateral infection");
        assert!(e.spans.is_empty());
    }

    #[test]
    fn separate_phrases_give_separate_spans() {
        let e = parse_positions("upper left lung with nodules in the lower right lung");
        assert_eq!(e.spans.len(), 2);
        assert_eq!(e.label, lbl([1, 0, 0, 0, 0, 1]));
        assert!(e.spans[0].end <= e.spans[1].start);
    }

    #[test]
    fn posaug_forced_branches() {
        let e = parse_positions("upper left lung");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(posaug(&e, 1.0, &mut rng).text, "[UNK_POS]");
        assert_eq!(posaug(&e, 0.0, &mut rng).text, "a region of the lung");
        let plain = parse_positions("no infection");
        assert_eq!(posaug(&plain, 0.5, &mut rng), plain);
    }

    #[test]
    fn posaug_leaves_context_intact() {
        let e = parse_positions("mild infection, upper left lung.");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = posaug(&e, 1.0, &mut rng);
        assert_eq!(out.text, "mild infection, [UNK_POS].");
        assert!(out.spans.is_empty());
    }

    #[test]
    fn span_mix_examples() {
        let e = span_mix(&parse_positions("upper left lung"), "lower right lung").unwrap();
        assert_eq!(e.text, "upper left lung and lower right lung");
        assert_eq!(e.label, lbl([1, 0, 0, 0, 0, 1]));

        let same = parse_positions("lower left lung");
        assert_eq!(span_mix(&same, "lower left lung").unwrap(), same);

        let e = span_mix(&parse_positions("left lung"), "upper right lung").unwrap();
        assert_eq!(e.text, "left lung and upper right lung");
        assert_eq!(e.label, lbl([1, 1, 1, 0, 1, 0]));

        assert!(span_mix(&parse_positions("no infection"), "upper left lung").is_err());
    }

    #[test]
    fn jaccard_examples() {
        let a = lbl([1, 0, 0, 0, 0, 0]);
        assert_eq!(jaccard_affinity(a, a), 1.0);
        assert_eq!(jaccard_affinity(a, lbl([1, 0, 1, 0, 0, 0])), 0.5);
        assert_eq!(jaccard_affinity(a, lbl([0, 1, 0, 0, 0, 0])), 0.0);
        assert_eq!(
            jaccard_affinity(PositionLabel::EMPTY, PositionLabel::EMPTY),
            0.0
        );
    }

    #[test]
    fn affinity_examples() {
        let ul = lbl([1, 0, 0, 0, 0, 0]);
        assert_eq!(affinity_matrix(&[PositionLabel::EMPTY]).values(), &[1.0]);
        assert_eq!(
            affinity_matrix(&[ul, lbl([0, 0, 0, 1, 0, 0])]).values(),
            &[1.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(
            affinity_matrix(&[ul, lbl([1, 0, 1, 0, 0, 0])]).values(),
            &[1.0, 0.5, 0.5, 1.0]
        );
        let empties = affinity_matrix(&[PositionLabel::EMPTY, PositionLabel::EMPTY]);
        assert_eq!(empties.values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn laterality_examples() {
        let left = parse_positions("left lung").label;
        let right = parse_positions("upper right lung").label;
        let both = parse_positions("lower bilateral lung").label;
        assert!(laterality_conflict(left, right));
        assert!(!laterality_conflict(left, both));
        assert!(!laterality_conflict(PositionLabel::EMPTY, right));
        // vertical zones never block mixing
        assert!(!laterality_conflict(
            parse_positions("upper left lung").label,
            parse_positions("lower left lung").label
        ));
    }

    #[test]
    fn from_bits_validates() {
        assert!(PositionLabel::from_bits(&[0, 1, 2, 0, 0, 0]).is_err());
        assert!(PositionLabel::from_bits(&[0, 1]).is_err());
    }

    fn phrase_strategy() -> impl Strategy<Value = String> {
        let row = prop::sample::select(vec!["", "upper ", "middle ", "lower ", "all "]);
        let col = prop::sample::select(vec!["left", "right", "bilateral"]);
        prop::collection::vec((row, col), 1..4).prop_map(|terms| {
            let parts: Vec<String> = terms.iter().map(|(r, c)| format!("{r}{c}")).collect();
            format!("{} lung", parts.join(" and "))
        })
    }

    proptest! {
        #[test]
        fn parser_is_deterministic(text in "[a-z ,]{0,40}") {
            prop_assert_eq!(parse_positions(&text), parse_positions(&text));
        }

        #[test]
        fn spans_are_sorted_and_disjoint(text in "(upper |lower |left |right |lung|and |, |x ){0,12}") {
            let e = parse_positions(&text);
            for w in e.spans.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for s in &e.spans {
                prop_assert!(s.start < s.end && s.end <= text.len());
                prop_assert_eq!(&text[s.start..s.end], s.surface.as_str());
            }
            let union = e.spans.iter().fold(PositionLabel::EMPTY, |a, s| a.union(s.cells));
            prop_assert_eq!(union, e.label);
        }

        #[test]
        fn posaug_only_touches_spans(prefix in "[a-z ]{0,10}", phrase in phrase_strategy(),
                                     suffix in "[a-z .]{0,10}", seed in any::<u64>()) {
            let text = format!("{prefix}, {phrase}; {suffix}");
            let e = parse_positions(&text);
            prop_assume!(e.spans.len() == 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = posaug(&e, 0.5, &mut rng);
            let s = &e.spans[0];
            prop_assert!(out.text.starts_with(&text[..s.start]));
            prop_assert!(out.text.ends_with(&text[s.end..]));
        }

        #[test]
        fn span_mix_label_is_union(a in phrase_strategy(), b in phrase_strategy()) {
            let e = parse_positions(&a);
            let mixed = span_mix(&e, &b).unwrap();
            let expect = e.spans[0].cells.union(parse_positions(&b).label);
            prop_assert_eq!(mixed.label, expect);
        }

        #[test]
        fn affinity_is_symmetric_with_unit_diagonal(masks in prop::collection::vec(0u8..64, 1..12)) {
            let labels: Vec<_> = masks.into_iter().map(PositionLabel::from_mask).collect();
            let a = affinity_matrix(&labels);
            for i in 0..labels.len() {
                prop_assert_eq!(a.get(i, i), 1.0);
                for j in 0..labels.len() {
                    prop_assert_eq!(a.get(i, j), a.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&a.get(i, j)));
                }
            }
        }
    }
}
