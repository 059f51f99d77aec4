//! Model formula mini-language.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! formula := ident "~" term ("+" term)*
//! term    := ident
//!          | "s(" ident ["," "k=" int] ")"
//!          | "te(" ident ("," ident)* ["," "d=c(" int ("," int)* ")"] ["," "k=c(" int ("," int)* ")"] ")"
//! ```
//!
//! `family`, `offset` and `data` are not formula clauses; they are supplied
//! separately (see [`ModelSpec::family`] and [`ModelSpec::offset_rule`]).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default marginal basis dimension for a 1-D anisotropy group.
pub const DEFAULT_K_1D: usize = 10;
/// Default per-axis basis dimension for a 2-D anisotropy group.
pub const DEFAULT_K_2D: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    NegBin,
    Poisson,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::NegBin => f.write_str("nb"),
            Family::Poisson => f.write_str("poisson"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OffsetRule {
    /// `log(popsize / 1e5 / 12)`: monthly exposure in units of 100,000 person-years.
    PersonYears100k,
    None,
    Column(String),
}

impl fmt::Display for OffsetRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OffsetRule::PersonYears100k => f.write_str("person-years"),
            OffsetRule::None => f.write_str("none"),
            OffsetRule::Column(c) => write!(f, "column:{c}"),
        }
    }
}

impl std::str::FromStr for OffsetRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "person-years" => Ok(OffsetRule::PersonYears100k),
            "none" => Ok(OffsetRule::None),
            _ => match s.strip_prefix("column:") {
                Some(name) if is_identifier(name) => Ok(OffsetRule::Column(name.to_string())),
                _ => Err(format!(
                    "invalid offset rule `{s}` (expected person-years, none or column:NAME)"
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmoothKind {
    S,
    TE,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub kind: SmoothKind,
    pub variables: Vec<String>,
    /// Sizes of the anisotropy groups, in variable order.
    pub d_groups: Vec<usize>,
    /// One basis dimension per group (per axis for 2-D groups).
    pub basis_dims: Vec<usize>,
}

impl SmoothTerm {
    /// `s(var)` with the default basis dimension.
    pub fn s(var: &str) -> Self {
        SmoothTerm {
            kind: SmoothKind::S,
            variables: vec![var.to_string()],
            d_groups: vec![1],
            basis_dims: vec![DEFAULT_K_1D],
        }
    }

    /// `te(vars..., d=c(d...))` with default basis dimensions.
    pub fn te(vars: &[&str], d_groups: &[usize]) -> Self {
        SmoothTerm {
            kind: SmoothKind::TE,
            variables: vars.iter().map(|v| v.to_string()).collect(),
            d_groups: d_groups.to_vec(),
            basis_dims: default_dims(d_groups),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.d_groups.len()
    }

    /// Variables of each anisotropy group.
    pub fn groups(&self) -> Vec<&[String]> {
        let mut out = Vec::with_capacity(self.d_groups.len());
        let mut start = 0;
        for &d in &self.d_groups {
            out.push(&self.variables[start..start + d]);
            start += d;
        }
        out
    }

    /// Human-readable label, e.g. `te(latitude,longitude,time)`.
    pub fn label(&self) -> String {
        let name = match self.kind {
            SmoothKind::S => "s",
            SmoothKind::TE => "te",
        };
        format!("{name}({})", self.variables.join(","))
    }

    fn validate(&self) -> Result<(), String> {
        if self.variables.is_empty() {
            return Err("smooth term without variables".into());
        }
        if self.d_groups.iter().any(|&d| d == 0) {
            return Err("d entries must be positive".into());
        }
        let total: usize = self.d_groups.iter().sum();
        if total != self.variables.len() {
            return Err(format!(
                "d=c(...) sums to {total} but the term has {} variables",
                self.variables.len()
            ));
        }
        if self.kind == SmoothKind::S && (self.variables.len() != 1 || self.d_groups != [1]) {
            return Err("s() takes exactly one variable".into());
        }
        if self.basis_dims.len() != self.d_groups.len() {
            return Err(format!(
                "k=c(...) has {} entries but the term has {} d-groups",
                self.basis_dims.len(),
                self.d_groups.len()
            ));
        }
        for (&d, &k) in self.d_groups.iter().zip(&self.basis_dims) {
            let min = if d == 1 { 3 } else { 4 };
            if k < min {
                return Err(format!(
                    "basis dimension {k} too small for a {d}-D group (minimum {min})"
                ));
            }
        }
        let distinct: BTreeSet<&String> = self.variables.iter().collect();
        if distinct.len() != self.variables.len() {
            return Err("variable repeated within a term".into());
        }
        Ok(())
    }
}

fn default_dims(d_groups: &[usize]) -> Vec<usize> {
    d_groups
        .iter()
        .map(|&d| if d == 1 { DEFAULT_K_1D } else { DEFAULT_K_2D })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub parametric_terms: Vec<String>,
    pub smooth_terms: Vec<SmoothTerm>,
    pub family: Family,
    pub offset_rule: OffsetRule,
}

impl ModelSpec {
    /// Every covariate the linear predictor depends on, in term order, without repeats.
    pub fn covariates(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let all = self
            .parametric_terms
            .iter()
            .chain(self.smooth_terms.iter().flat_map(|t| t.variables.iter()));
        for v in all {
            if seen.insert(v.clone()) {
                out.push(v.clone());
            }
        }
        out
    }

    /// Total number of smoothing parameters (one per anisotropy group).
    pub fn num_smoothing_params(&self) -> usize {
        self.smooth_terms.iter().map(SmoothTerm::num_groups).sum()
    }

    /// Variable sets of all terms; parametric terms are singletons.
    pub(crate) fn term_variable_sets(&self) -> Vec<BTreeSet<&str>> {
        self.parametric_terms
            .iter()
            .map(|p| std::iter::once(p.as_str()).collect())
            .chain(
                self.smooth_terms
                    .iter()
                    .map(|t| t.variables.iter().map(String::as_str).collect()),
            )
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax(String),
    Semantic(String),
    UnknownClause(String),
    EmptyTermList,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}", self.describe())]
pub struct ParseError {
    /// Byte offset into the formula text.
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl ParseError {
    fn describe(&self) -> String {
        match &self.kind {
            ParseErrorKind::Syntax(m) => format!("syntax error at byte {}: {m}", self.offset),
            ParseErrorKind::Semantic(m) => format!("invalid term at byte {}: {m}", self.offset),
            ParseErrorKind::UnknownClause(c) => {
                format!("unknown clause `{c}` at byte {}", self.offset)
            }
            ParseErrorKind::EmptyTermList => format!(
                "syntax error at byte {}: expected at least one term after `~`",
                self.offset
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(usize),
    Tilde,
    Plus,
    LParen,
    RParen,
    Comma,
    Eq,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(n) => write!(f, "`{n}`"),
            Tok::Tilde => f.write_str("`~`"),
            Tok::Plus => f.write_str("`+`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Eq => f.write_str("`=`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if !b.is_ascii() {
            return Err(ParseError {
                offset: i,
                kind: ParseErrorKind::Syntax("non-ASCII byte".into()),
            });
        }
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match b {
            b'~' => Tok::Tilde,
            b'+' => Tok::Plus,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'=' => Tok::Eq,
            b'0'..=b'9' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let n = text[start..i].parse::<usize>().map_err(|_| ParseError {
                    offset: start,
                    kind: ParseErrorKind::Syntax("integer out of range".into()),
                })?;
                out.push((start, Tok::Int(n)));
                continue;
            }
            b if b.is_ascii_alphabetic() || b == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
                continue;
            }
            other => {
                return Err(ParseError {
                    offset: start,
                    kind: ParseErrorKind::Syntax(format!(
                        "unexpected character `{}`",
                        other as char
                    )),
                })
            }
        };
        out.push((start, tok));
        i += 1;
    }
    out.push((text.len(), Tok::Eof));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn syntax<T>(&self, expected: &str) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.offset(),
            kind: ParseErrorKind::Syntax(format!("expected {expected}, found {}", self.peek())),
        })
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            self.syntax(&tok.to_string())
        }
    }

    fn ident(&mut self) -> Result<(usize, String), ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let off = self.offset();
                self.bump();
                Ok((off, s))
            }
            _ => self.syntax("identifier"),
        }
    }

    fn int(&mut self) -> Result<usize, ParseError> {
        match *self.peek() {
            Tok::Int(n) => {
                self.bump();
                Ok(n)
            }
            _ => self.syntax("integer"),
        }
    }

    /// `c(int, int, ...)`
    fn int_vector(&mut self) -> Result<Vec<usize>, ParseError> {
        match self.peek() {
            Tok::Ident(c) if c == "c" => {
                self.bump();
            }
            _ => return self.syntax("`c(`"),
        }
        self.expect(Tok::LParen)?;
        let mut v = vec![self.int()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            v.push(self.int()?);
        }
        self.expect(Tok::RParen)?;
        Ok(v)
    }

    fn formula(&mut self) -> Result<ModelSpec, ParseError> {
        let (_, response) = self.ident()?;
        self.expect(Tok::Tilde)?;
        if *self.peek() == Tok::Eof {
            return Err(ParseError {
                offset: self.offset(),
                kind: ParseErrorKind::EmptyTermList,
            });
        }
        let mut spec = ModelSpec {
            response,
            parametric_terms: Vec::new(),
            smooth_terms: Vec::new(),
            family: Family::NegBin,
            offset_rule: OffsetRule::PersonYears100k,
        };
        let mut seen_sets: Vec<BTreeSet<String>> = Vec::new();
        loop {
            let term_offset = self.offset();
            let term = self.term()?;
            let semantic = |m: String| ParseError {
                offset: term_offset,
                kind: ParseErrorKind::Semantic(m),
            };
            let vars: BTreeSet<String> = match &term {
                Term::Parametric(name) => std::iter::once(name.clone()).collect(),
                Term::Smooth(t) => t.variables.iter().cloned().collect(),
            };
            if vars.contains(&spec.response) {
                return Err(semantic(format!(
                    "response `{}` used as a covariate",
                    spec.response
                )));
            }
            if seen_sets.contains(&vars) {
                return Err(semantic("duplicate term".into()));
            }
            seen_sets.push(vars);
            match term {
                Term::Parametric(name) => spec.parametric_terms.push(name),
                Term::Smooth(t) => {
                    t.validate().map_err(semantic)?;
                    spec.smooth_terms.push(t);
                }
            }
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                }
                Tok::Eof => break,
                _ => return self.syntax("`+` or end of input"),
            }
        }
        Ok(spec)
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        let (_, name) = self.ident()?;
        let kind = match (name.as_str(), self.peek()) {
            ("s", Tok::LParen) => SmoothKind::S,
            ("te", Tok::LParen) => SmoothKind::TE,
            (_, Tok::LParen) => {
                return Err(ParseError {
                    offset: self.toks[self.pos - 1].0,
                    kind: ParseErrorKind::Syntax(format!(
                        "unknown smooth constructor `{name}` (expected s or te)"
                    )),
                })
            }
            _ => return Ok(Term::Parametric(name)),
        };
        self.bump();
        let mut variables = vec![self.ident()?.1];
        let mut d_groups: Option<Vec<usize>> = None;
        let mut basis_dims: Option<Vec<usize>> = None;
        while *self.peek() == Tok::Comma {
            self.bump();
            let (off, ident) = self.ident()?;
            if *self.peek() != Tok::Eq {
                if d_groups.is_some() || basis_dims.is_some() {
                    return self.syntax("`=` (variables must precede clauses)");
                }
                variables.push(ident);
                continue;
            }
            self.bump();
            let dup = |what: &str| ParseError {
                offset: off,
                kind: ParseErrorKind::Semantic(format!("clause `{what}` given twice")),
            };
            match (kind, ident.as_str()) {
                (SmoothKind::TE, "d") => {
                    if d_groups.is_some() {
                        return Err(dup("d"));
                    }
                    d_groups = Some(self.int_vector()?);
                }
                (SmoothKind::TE, "k") => {
                    if basis_dims.is_some() {
                        return Err(dup("k"));
                    }
                    basis_dims = Some(self.int_vector()?);
                }
                (SmoothKind::S, "k") => {
                    if basis_dims.is_some() {
                        return Err(dup("k"));
                    }
                    basis_dims = Some(vec![self.int()?]);
                }
                _ => {
                    return Err(ParseError {
                        offset: off,
                        kind: ParseErrorKind::UnknownClause(ident),
                    })
                }
            }
        }
        self.expect(Tok::RParen)?;
        let d_groups = d_groups.unwrap_or_else(|| vec![1; variables.len()]);
        let basis_dims = basis_dims.unwrap_or_else(|| default_dims(&d_groups));
        Ok(Term::Smooth(SmoothTerm {
            kind,
            variables,
            d_groups,
            basis_dims,
        }))
    }
}

enum Term {
    Parametric(String),
    Smooth(SmoothTerm),
}

/// Parse a formula such as `deaths ~ s(median_age) + te(covariate, date, d=c(1,1))`.
///
/// The returned spec uses the negative-binomial family and the person-years
/// offset; callers override both from their own configuration.
pub fn parse_formula(text: &str) -> Result<ModelSpec, ParseError> {
    let toks = tokenize(text)?;
    let mut parser = Parser { toks, pos: 0 };
    parser.formula()
}

/// Canonical formula text. Default `k` is omitted; `te` always spells out `d`.
pub fn format_spec(spec: &ModelSpec) -> String {
    let mut terms: Vec<String> = spec.parametric_terms.clone();
    for t in &spec.smooth_terms {
        let defaults = default_dims(&t.d_groups);
        let mut s = match t.kind {
            SmoothKind::S => format!("s({}", t.variables[0]),
            SmoothKind::TE => format!(
                "te({},d=c({})",
                t.variables.join(","),
                join_ints(&t.d_groups)
            ),
        };
        if t.basis_dims != defaults {
            match t.kind {
                SmoothKind::S => s.push_str(&format!(",k={}", t.basis_dims[0])),
                SmoothKind::TE => s.push_str(&format!(",k=c({})", join_ints(&t.basis_dims))),
            }
        }
        s.push(')');
        terms.push(s);
    }
    format!("{} ~ {}", spec.response, terms.join(" + "))
}

fn join_ints(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn application_one_formula() {
        let spec = parse_formula("deaths ~ s(median_age) + te(covariate, date, d=c(1,1))").unwrap();
        assert_eq!(spec.response, "deaths");
        assert!(spec.parametric_terms.is_empty());
        assert_eq!(
            spec.smooth_terms,
            vec![SmoothTerm::s("median_age"), SmoothTerm::te(&["covariate", "date"], &[1, 1])]
        );
        assert_eq!(spec.family, Family::NegBin);
        assert_eq!(spec.offset_rule, OffsetRule::PersonYears100k);
    }

    #[test]
    fn three_way_tensor() {
        let spec = parse_formula("deaths ~ te(date, ICEraceinc, median_age, d=c(1,1,1))").unwrap();
        let t = &spec.smooth_terms[0];
        assert_eq!(t.kind, SmoothKind::TE);
        assert_eq!(t.d_groups, vec![1, 1, 1]);
        assert_eq!(t.basis_dims, vec![10, 10, 10]);
    }

    #[test]
    fn spatial_group() {
        let spec = parse_formula("deaths ~ te(latitude, longitude, time, d=c(2,1))").unwrap();
        let t = &spec.smooth_terms[0];
        assert_eq!(t.d_groups, vec![2, 1]);
        assert_eq!(t.basis_dims, vec![5, 10]);
        let groups = t.groups();
        assert_eq!(groups[0], ["latitude".to_string(), "longitude".to_string()]);
        assert_eq!(groups[1], ["time".to_string()]);
        assert_eq!(spec.num_smoothing_params(), 2);
    }

    #[test]
    fn empty_rhs_is_positioned() {
        let err = parse_formula("y ~").unwrap_err();
        assert_eq!(err.offset, 3);
        assert_eq!(err.kind, ParseErrorKind::EmptyTermList);
        assert!(err.to_string().contains("byte 3"));
    }

    #[test]
    fn d_must_cover_variables() {
        let err = parse_formula("y ~ te(a, b, c, d=c(1,1))").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::Semantic(_)));
        assert_eq!(err.offset, 4);
    }

    #[test]
    fn unknown_clause() {
        let err = parse_formula("y ~ te(a, b, bs=c(1,1))").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownClause("bs".into()));
        assert_eq!(err.offset, 13);
        let err = parse_formula("y ~ s(a, d=c(1))").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownClause("d".into()));
    }

    #[test]
    fn explicit_k() {
        let spec = parse_formula("y ~ s(x, k=6) + te(lat,lon,t,d=c(2,1),k=c(4,8))").unwrap();
        assert_eq!(spec.smooth_terms[0].basis_dims, vec![6]);
        assert_eq!(spec.smooth_terms[1].basis_dims, vec![4, 8]);
        let err = parse_formula("y ~ s(x, k=2)").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::Semantic(_)));
        let err = parse_formula("y ~ te(a,b,d=c(2),k=c(3))").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::Semantic(_)));
    }

    #[test]
    fn te_without_d_defaults_to_ones() {
        let spec = parse_formula("y ~ te(a,b)").unwrap();
        assert_eq!(spec.smooth_terms[0].d_groups, vec![1, 1]);
    }

    #[test]
    fn duplicate_terms_rejected() {
        let err = parse_formula("y ~ te(a,b) + te(b,a)").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::Semantic(_)));
        assert_eq!(err.offset, 14);
        assert!(parse_formula("y ~ x + x").is_err());
        assert!(parse_formula("y ~ s(y)").is_err());
        assert!(parse_formula("y ~ te(a,a)").is_err());
    }

    #[test]
    fn parametric_and_errors() {
        let spec = parse_formula("  y~x+ s(z)").unwrap();
        assert_eq!(spec.parametric_terms, vec!["x".to_string()]);
        assert!(parse_formula("y ~ foo(x)").is_err());
        assert_eq!(parse_formula("y ~ x +").unwrap_err().offset, 7);
        assert_eq!(parse_formula("y ~ x $").unwrap_err().offset, 6);
        assert!(parse_formula("y ~ s(x").is_err());
        assert!(parse_formula("y ~ s(x, k=c(4))").is_err());
        assert!(parse_formula("~ x").is_err());
        assert_eq!(parse_formula("y ~ é").unwrap_err().offset, 4);
    }

    #[test]
    fn formats_canonically() {
        let spec = parse_formula("deaths ~ s(median_age) + te(covariate, date, d=c(1,1))").unwrap();
        assert_eq!(
            format_spec(&spec),
            "deaths ~ s(median_age) + te(covariate,date,d=c(1,1))"
        );
        let spec = parse_formula("y ~ s(x)").unwrap();
        assert_eq!(format_spec(&spec), "y ~ s(x)");
        let spec = parse_formula("deaths ~ te(date, ICEraceinc, median_age, d=c(1,1,1))").unwrap();
        assert_eq!(
            format_spec(&spec),
            "deaths ~ te(date,ICEraceinc,median_age,d=c(1,1,1))"
        );
    }

    #[test]
    fn offset_rule_from_str() {
        assert_eq!("person-years".parse(), Ok(OffsetRule::PersonYears100k));
        assert_eq!("none".parse(), Ok(OffsetRule::None));
        assert_eq!("column:expo".parse(), Ok(OffsetRule::Column("expo".into())));
        assert!("column:".parse::<OffsetRule>().is_err());
        assert!("bogus".parse::<OffsetRule>().is_err());
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,6}".prop_filter("reserved", |s| s != "s" && s != "te" && s != "c")
    }

    fn term() -> impl Strategy<Value = SmoothTerm> {
        let s = (ident(), prop::option::of(3usize..20)).prop_map(|(v, k)| {
            let mut t = SmoothTerm::s(&v);
            if let Some(k) = k {
                t.basis_dims = vec![k];
            }
            t
        });
        let te = prop::collection::vec((1usize..=2, any::<bool>(), 4usize..9), 1..4).prop_flat_map(
            |groups| {
                let nvars: usize = groups.iter().map(|g| g.0).sum();
                prop::collection::btree_set(ident(), nvars).prop_map(move |vars| {
                    let d: Vec<usize> = groups.iter().map(|g| g.0).collect();
                    let mut t = SmoothTerm {
                        kind: SmoothKind::TE,
                        variables: vars.into_iter().collect(),
                        d_groups: d.clone(),
                        basis_dims: default_dims(&d),
                    };
                    if groups.iter().any(|g| g.1) {
                        t.basis_dims = groups.iter().map(|g| g.2).collect();
                    }
                    t
                })
            },
        );
        prop_oneof![s, te]
    }

    prop_compose! {
        fn spec()(
            params in prop::collection::btree_set(ident(), 0..3),
            smooths in prop::collection::vec(term(), 0..4),
        ) -> ModelSpec {
            let mut used: BTreeSet<BTreeSet<String>> =
                params.iter().map(|p| std::iter::once(p.clone()).collect()).collect();
            let smooths: Vec<SmoothTerm> = smooths
                .into_iter()
                .filter(|t| used.insert(t.variables.iter().cloned().collect()))
                .collect();
            let mut parametric: Vec<String> = params.into_iter().collect();
            if parametric.is_empty() && smooths.is_empty() {
                parametric.push("x".into());
            }
            ModelSpec {
                response: "resp_var".into(),
                parametric_terms: parametric,
                smooth_terms: smooths,
                family: Family::NegBin,
                offset_rule: OffsetRule::PersonYears100k,
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip(s in spec()) {
            let text = format_spec(&s);
            let back = parse_formula(&text).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn parser_is_total(text in "[ -~]{0,512}") {
            match parse_formula(&text) {
                Ok(spec) => {
                    for t in &spec.smooth_terms {
                        prop_assert_eq!(t.d_groups.iter().sum::<usize>(), t.variables.len());
                    }
                }
                Err(e) => prop_assert!(e.offset <= text.len()),
            }
        }

        #[test]
        fn parser_total_on_formula_like_noise(
            parts in prop::collection::vec(
                prop_oneof![
                    Just("y"), Just("~"), Just("+"), Just("s("), Just("te("), Just(")"),
                    Just(","), Just("d=c("), Just("k="), Just("1"), Just("2"), Just("x"), Just(" "),
                ],
                0..64,
            )
        ) {
            let text: String = parts.concat();
            if let Err(e) = parse_formula(&text) {
                prop_assert!(e.offset <= text.len());
            }
        }
    }

    #[test]
    fn parser_total_on_large_input() {
        let mut text = String::from("y ~ x");
        while text.len() < 64 * 1024 {
            text.push_str(" + te(a,b");
        }
        assert!(parse_formula(&text).is_err());
        let big: String = "(".repeat(64 * 1024);
        assert!(parse_formula(&big).is_err());
    }
}
