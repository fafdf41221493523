//! Model formulas in Wilkinson-style notation.
//!
//! Supported grammar: `response ~ rhs` where the right-hand side is a sum of
//! `1`, `0`, main effects `A`, interactions `A:B`, crossings `A*B`
//! (expanding to `A + B + A:B`) and random-effects terms `(inner | group)` or
//! `(inner || group)`. The double bar marks a term whose components are
//! estimated without correlation parameters.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ParseError;

/// One model term: a main effect (one name) or an interaction (several).
///
/// Names are kept sorted and unique so that `A:B` and `B:A` compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Term(Vec<String>);

impl Term {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        Term(set.into_iter().collect())
    }

    pub fn main(name: impl Into<String>) -> Self {
        Term(vec![name.into()])
    }

    pub fn factors(&self) -> &[String] {
        &self.0
    }

    /// Interaction order: 1 for a main effect, 2 for a two-way interaction, ...
    pub fn order(&self) -> usize {
        self.0.len()
    }

    /// True when every factor of `self` also appears in `other`.
    pub fn is_contained_in(&self, other: &Term) -> bool {
        self.0.iter().all(|n| other.0.contains(n))
    }

    fn union(&self, other: &Term) -> Term {
        Term::new(self.0.iter().chain(other.0.iter()).cloned())
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(":"))
    }
}

/// A variance component of a random-effects term, before contrast expansion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Intercept,
    Effect(Term),
}

impl Component {
    pub fn order(&self) -> usize {
        match self {
            Component::Intercept => 0,
            Component::Effect(t) => t.order(),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Intercept => f.write_str("1"),
            Component::Effect(t) => t.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomTerm {
    pub intercept: bool,
    pub terms: Vec<Term>,
    pub group: String,
    pub correlated: bool,
}

impl RandomTerm {
    pub fn components(&self) -> Vec<Component> {
        let mut out = Vec::with_capacity(self.terms.len() + 1);
        if self.intercept {
            out.push(Component::Intercept);
        }
        out.extend(self.terms.iter().cloned().map(Component::Effect));
        out
    }

    /// Builds a term from components in the order given.
    pub fn from_components(
        components: &[Component],
        group: impl Into<String>,
        correlated: bool,
    ) -> Self {
        let mut intercept = false;
        let mut terms = Vec::new();
        for c in components {
            match c {
                Component::Intercept => intercept = true,
                Component::Effect(t) => {
                    if !terms.contains(t) {
                        terms.push(t.clone());
                    }
                }
            }
        }
        RandomTerm {
            intercept,
            terms,
            group: group.into(),
            correlated,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.intercept && self.terms.is_empty()
    }

    fn inner_key(&self) -> (bool, BTreeSet<Term>) {
        (self.intercept, self.terms.iter().cloned().collect())
    }
}

impl fmt::Display for RandomTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        write_sum(f, self.intercept, &self.terms)?;
        let bar = if self.correlated { "|" } else { "||" };
        write!(f, " {} {})", bar, self.group)
    }
}

/// Parsed model formula.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaAst {
    pub response: String,
    pub intercept: bool,
    pub fixed: Vec<Term>,
    pub random: Vec<RandomTerm>,
}

impl FormulaAst {
    /// Grouping factors in order of first appearance.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.random {
            if !out.contains(&r.group) {
                out.push(r.group.clone());
            }
        }
        out
    }

    /// All variance components per grouping factor, in term order.
    pub fn components_of(&self, group: &str) -> Vec<Component> {
        self.random
            .iter()
            .filter(|r| r.group == group)
            .flat_map(|r| r.components())
            .collect()
    }

    /// Every factor or covariate name used anywhere in the formula.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for t in &self.fixed {
            out.extend(t.factors().iter().cloned());
        }
        for r in &self.random {
            for t in &r.terms {
                out.extend(t.factors().iter().cloned());
            }
        }
        out
    }
}

impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ ", self.response)?;
        write_sum(f, self.intercept, &self.fixed)?;
        for r in &self.random {
            write!(f, " + {}", r)?;
        }
        Ok(())
    }
}

fn write_sum(f: &mut fmt::Formatter<'_>, intercept: bool, terms: &[Term]) -> fmt::Result {
    f.write_str(if intercept { "1" } else { "0" })?;
    for t in terms {
        write!(f, " + {}", t)?;
    }
    Ok(())
}

/// Canonical text for a formula.
pub fn format_formula(ast: &FormulaAst) -> String {
    ast.to_string()
}

/// Sets every random term to the zero-correlation form.
pub fn zcp_transform(ast: &FormulaAst) -> FormulaAst {
    let mut out = ast.clone();
    for r in &mut out.random {
        r.correlated = false;
    }
    out
}

pub fn parse_formula(text: &str) -> Result<FormulaAst, ParseError> {
    let tokens = tokenize(text)?;
    Parser {
        text,
        tokens,
        pos: 0,
    }
    .formula()
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    One,
    Zero,
    Tilde,
    Plus,
    Colon,
    Star,
    LParen,
    RParen,
    Bar,
    DoubleBar,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Name(n) => format!("name `{}`", n),
            Tok::One => "`1`".into(),
            Tok::Zero => "`0`".into(),
            Tok::Tilde => "`~`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Star => "`*`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Bar => "`|`".into(),
            Tok::DoubleBar => "`||`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let err = |position: usize, message: String| ParseError {
        text: text.to_string(),
        position,
        message,
    };
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '~' => out.push((Tok::Tilde, start)),
            '+' => out.push((Tok::Plus, start)),
            ':' => out.push((Tok::Colon, start)),
            '*' => out.push((Tok::Star, start)),
            '(' => out.push((Tok::LParen, start)),
            ')' => out.push((Tok::RParen, start)),
            '|' => {
                if bytes.get(i + 1) == Some(&b'|') {
                    out.push((Tok::DoubleBar, start));
                    i += 1;
                } else {
                    out.push((Tok::Bar, start));
                }
            }
            _ if c.is_ascii_digit() => {
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                match &text[start..i] {
                    "1" => out.push((Tok::One, start)),
                    "0" => out.push((Tok::Zero, start)),
                    other => {
                        return Err(err(start, format!("unexpected literal `{}`", other)));
                    }
                }
                continue;
            }
            _ if c.is_ascii_alphabetic() || c == '_' || c == '.' => {
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_alphanumeric() || d == '_' || d == '.' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push((Tok::Name(text[start..i].to_string()), start));
                continue;
            }
            _ => {
                // Report the character, not a byte, for non-ASCII input.
                let ch = text[start..].chars().next().unwrap_or(c);
                return Err(err(start, format!("unexpected character `{}`", ch)));
            }
        }
        i += 1;
    }
    out.push((Tok::End, text.len()));
    Ok(out)
}

struct Parser<'a> {
    text: &'a str,
    tokens: Vec<(Tok, usize)>,
    pos: usize,
}

/// Right-hand-side sum before intercept resolution.
#[derive(Default)]
struct Sum {
    intercept: Option<bool>,
    terms: Vec<Term>,
    random: Vec<RandomTerm>,
}

impl Sum {
    fn push_term(&mut self, t: Term) {
        if !self.terms.contains(&t) {
            self.terms.push(t);
        }
    }
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].0
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.tokens[self.pos].0.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, position: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            text: self.text.to_string(),
            position,
            message: message.into(),
        }
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        self.error(
            self.offset(),
            format!("expected {}, found {}", expected, self.peek().describe()),
        )
    }

    fn formula(&mut self) -> Result<FormulaAst, ParseError> {
        let response = match self.bump() {
            Tok::Name(n) => n,
            _ => {
                self.pos = 0;
                return Err(self.unexpected("response name"));
            }
        };
        if *self.peek() != Tok::Tilde {
            return Err(self.unexpected("`~`"));
        }
        self.bump();
        let sum = self.sum(true)?;
        if *self.peek() != Tok::End {
            if *self.peek() == Tok::Tilde {
                return Err(self.error(self.offset(), "formula must contain exactly one `~`"));
            }
            if *self.peek() == Tok::RParen {
                return Err(self.error(self.offset(), "unbalanced parentheses: stray `)`"));
            }
            return Err(self.unexpected("`+` or end of formula"));
        }
        Ok(FormulaAst {
            response,
            intercept: sum.intercept.unwrap_or(true),
            fixed: sum.terms,
            random: sum.random,
        })
    }

    fn sum(&mut self, allow_random: bool) -> Result<Sum, ParseError> {
        let mut sum = Sum::default();
        loop {
            self.summand(&mut sum, allow_random)?;
            if *self.peek() == Tok::Plus {
                self.bump();
            } else {
                break;
            }
        }
        Ok(sum)
    }

    fn summand(&mut self, sum: &mut Sum, allow_random: bool) -> Result<(), ParseError> {
        match self.peek().clone() {
            Tok::One => {
                self.bump();
                sum.intercept = Some(true);
            }
            Tok::Zero => {
                self.bump();
                sum.intercept = Some(false);
            }
            Tok::Name(_) => {
                for t in self.product()? {
                    sum.push_term(t);
                }
            }
            Tok::LParen if allow_random => {
                let open = self.offset();
                self.bump();
                let term = self.random_term(open)?;
                let key = term.inner_key();
                if sum
                    .random
                    .iter()
                    .any(|r| r.group == term.group && r.inner_key() == key)
                {
                    return Err(self.error(
                        open,
                        format!("duplicate random-effects term for group `{}`", term.group),
                    ));
                }
                sum.random.push(term);
            }
            Tok::LParen => {
                return Err(self.error(self.offset(), "nested parentheses are not supported"));
            }
            _ => return Err(self.unexpected("term")),
        }
        Ok(())
    }

    fn random_term(&mut self, open: usize) -> Result<RandomTerm, ParseError> {
        if matches!(self.peek(), Tok::Bar | Tok::DoubleBar) {
            return Err(self.error(self.offset(), "empty random-effects expression"));
        }
        let inner = self.sum(false)?;
        let correlated = match self.peek() {
            Tok::Bar => true,
            Tok::DoubleBar => false,
            Tok::End => {
                return Err(self.error(open, "unbalanced parentheses: `(` is never closed"));
            }
            _ => return Err(self.unexpected("`|` or `||`")),
        };
        self.bump();
        let group = match self.peek().clone() {
            Tok::Name(n) => {
                self.bump();
                n
            }
            Tok::RParen | Tok::End => {
                return Err(self.error(self.offset(), "empty random-effects group"));
            }
            _ => return Err(self.unexpected("grouping factor name")),
        };
        match self.peek() {
            Tok::RParen => {
                self.bump();
            }
            Tok::End => {
                return Err(self.error(open, "unbalanced parentheses: `(` is never closed"));
            }
            _ => return Err(self.unexpected("`)`")),
        }
        let term = RandomTerm {
            intercept: inner.intercept.unwrap_or(true),
            terms: inner.terms,
            group,
            correlated,
        };
        if term.is_empty() {
            return Err(self.error(open, "random-effects term has no components"));
        }
        Ok(term)
    }

    /// `inter ('*' inter)*`, expanded into all crossings.
    fn product(&mut self) -> Result<Vec<Term>, ParseError> {
        let mut factors = vec![self.interaction()?];
        while *self.peek() == Tok::Star {
            self.bump();
            factors.push(self.interaction()?);
        }
        let mut out: Vec<Term> = Vec::new();
        // Subsets by size, then by position, so `A*B*C` yields A, B, C, A:B, ...
        let k = factors.len();
        let mut subsets: Vec<u32> = (1u32..(1 << k)).collect();
        subsets.sort_by_key(|m| {
            let idx: Vec<usize> = (0..k).filter(|i| m & (1 << i) != 0).collect();
            (idx.len(), idx)
        });
        for mask in subsets {
            let mut t: Option<Term> = None;
            for (i, f) in factors.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    t = Some(match t {
                        None => f.clone(),
                        Some(acc) => acc.union(f),
                    });
                }
            }
            let t = t.expect("non-empty subset");
            if !out.contains(&t) {
                out.push(t);
            }
        }
        Ok(out)
    }

    fn interaction(&mut self) -> Result<Term, ParseError> {
        let mut names = vec![self.name()?];
        while *self.peek() == Tok::Colon {
            self.bump();
            names.push(self.name()?);
        }
        Ok(Term::new(names))
    }

    fn name(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Name(n) => {
                self.bump();
                Ok(n)
            }
            _ => Err(self.unexpected("variable name")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(names: &[&str]) -> Term {
        Term::new(names.iter().copied())
    }

    #[test]
    fn intercept_and_random_intercept() {
        let f = parse_formula("Y ~ 1 + A + (1|Subject)").unwrap();
        assert_eq!(f.response, "Y");
        assert!(f.intercept);
        assert_eq!(f.fixed, vec![t(&["A"])]);
        assert_eq!(
            f.random,
            vec![RandomTerm {
                intercept: true,
                terms: vec![],
                group: "Subject".into(),
                correlated: true
            }]
        );
    }

    #[test]
    fn vector_valued_and_double_bar() {
        let f = parse_formula("Y ~ 1 + A + (1+A|Subject)").unwrap();
        assert_eq!(f.random[0].terms, vec![t(&["A"])]);
        assert!(f.random[0].correlated);
        let g = parse_formula("Y ~ 1 + A + (1+A||Subject)").unwrap();
        assert_eq!(g.random[0].terms, vec![t(&["A"])]);
        assert!(!g.random[0].correlated);
    }

    #[test]
    fn star_expands_to_main_effects_and_interactions() {
        let f = parse_formula("Y ~ S*P*C").unwrap();
        let got: Vec<String> = f.fixed.iter().map(|x| x.to_string()).collect();
        assert_eq!(got, ["S", "P", "C", "P:S", "C:S", "C:P", "C:P:S"]);
        let g = parse_formula("Y ~ A*B").unwrap();
        assert_eq!(g.fixed, vec![t(&["A"]), t(&["B"]), t(&["A", "B"])]);
    }

    #[test]
    fn zero_suppresses_intercept() {
        let f = parse_formula("Y ~ 0 + A + (0 + A | S)").unwrap();
        assert!(!f.intercept);
        assert!(!f.random[0].intercept);
    }

    #[test]
    fn format_is_canonical() {
        let f = parse_formula("Y~1+A+(1|S)").unwrap();
        assert_eq!(format_formula(&f), "Y ~ 1 + A + (1 | S)");
        let g = parse_formula("Y~A+(1+A||S)").unwrap();
        assert!(format_formula(&g).contains("||"));
        let h = parse_formula("Y ~ S:P").unwrap();
        assert_eq!(format_formula(&h), "Y ~ 1 + P:S");
        assert_eq!(h.fixed[0], t(&["S", "P"]));
    }

    #[test]
    fn zcp_sets_uncorrelated_and_is_idempotent() {
        let f = parse_formula("Y ~ 1 + A + (1+A|S) + (1|I)").unwrap();
        let z = zcp_transform(&f);
        assert_eq!(format_formula(&z), "Y ~ 1 + A + (1 + A || S) + (1 || I)");
        assert_eq!(zcp_transform(&z), z);
        assert_eq!(z.fixed, f.fixed);
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let e = parse_formula("Y ~ 1 + A + (1|)").unwrap_err();
        assert!(e.message.contains("empty random-effects group"), "{}", e);
        assert_eq!(e.position, 15);

        let e = parse_formula("Y ~ 1 + (1|S").unwrap_err();
        assert!(e.message.contains("unbalanced"), "{}", e);
        assert_eq!(e.position, 8);

        let e = parse_formula("Y ~ 1 + A)").unwrap_err();
        assert!(e.message.contains("unbalanced"), "{}", e);

        let e = parse_formula("Y ~ A ~ B").unwrap_err();
        assert!(e.message.contains("exactly one"), "{}", e);

        let e = parse_formula("Y 1 + A").unwrap_err();
        assert_eq!(e.position, 2);

        let e = parse_formula("Y ~ 1 + $").unwrap_err();
        assert_eq!(e.position, 8);
        assert_eq!(e.caret().lines().nth(1).unwrap(), "        ^");

        assert!(parse_formula("Y ~ (0|S)").is_err());
        assert!(parse_formula("Y ~ 1 + (1|S) + (1|S)").is_err());
        assert!(parse_formula("Y ~ 2 + A").is_err());
    }

    #[test]
    fn duplicate_fixed_terms_collapse() {
        let f = parse_formula("Y ~ A + A + A:B + B:A").unwrap();
        assert_eq!(f.fixed, vec![t(&["A"]), t(&["A", "B"])]);
    }

    fn arb_name() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["A", "B", "C", "load", "x.1", "Cond_2"]).prop_map(String::from)
    }

    fn arb_term() -> impl Strategy<Value = Term> {
        prop::collection::btree_set(arb_name(), 1..4).prop_map(Term::new)
    }

    fn arb_terms() -> impl Strategy<Value = Vec<Term>> {
        prop::collection::vec(arb_term(), 0..5).prop_map(|v| {
            let mut out: Vec<Term> = Vec::new();
            for t in v {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
            out
        })
    }

    fn arb_random() -> impl Strategy<Value = RandomTerm> {
        (
            any::<bool>(),
            arb_terms(),
            prop::sample::select(vec!["Subject", "Item", "g"]),
            any::<bool>(),
        )
            .prop_map(|(intercept, terms, group, correlated)| RandomTerm {
                intercept: intercept || terms.is_empty(),
                terms,
                group: group.to_string(),
                correlated,
            })
    }

    prop_compose! {
        fn arb_formula()(
            intercept in any::<bool>(),
            fixed in arb_terms(),
            random in prop::collection::vec(arb_random(), 0..4),
        ) -> FormulaAst {
            let mut uniq: Vec<RandomTerm> = Vec::new();
            for r in random {
                if !uniq.iter().any(|u| u.group == r.group && u.inner_key() == r.inner_key()) {
                    uniq.push(r);
                }
            }
            FormulaAst { response: "Y".into(), intercept, fixed, random: uniq }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn parse_format_round_trip(ast in arb_formula()) {
            let text = format_formula(&ast);
            let back = parse_formula(&text).unwrap();
            prop_assert_eq!(back, ast);
        }

        #[test]
        fn zcp_idempotent_and_keeps_components(ast in arb_formula()) {
            let z = zcp_transform(&ast);
            prop_assert_eq!(zcp_transform(&z), z.clone());
            for g in ast.groups() {
                prop_assert_eq!(ast.components_of(&g), z.components_of(&g));
            }
        }
    }
}
