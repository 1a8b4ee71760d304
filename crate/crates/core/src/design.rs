//! Mixed-effects formulas and design matrices.
//!
//! Supported syntax: `a + b`, interactions `a:b`, crossing `a * b`
//! (`a + b + a:b`), `1` and `0` for the intercept, and random terms
//! `(expr | group)` with a single grouping factor. Categorical variables use
//! treatment coding against their first declared level.

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("categorical variable `{0}` has a single level and cannot be contrasted")]
    SingleLevel(String),
    #[error("grouping variable `{0}` must be categorical")]
    NumericGroup(String),
    #[error("column `{name}` has {got} rows, expected {expected}")]
    RowCount {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("value `{value}` of `{name}` is not a declared level")]
    UnknownLevel { name: String, value: String },
    #[error("numeric column `{0}` has zero variance and cannot be standardized")]
    ZeroVariance(String),
    #[error("numeric column `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("duplicate column `{0}` in metadata")]
    DuplicateColumn(String),
}

/// Interaction of one or more variables; the empty term is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term(pub Vec<String>);

impl Term {
    pub fn intercept() -> Self {
        Term(Vec::new())
    }

    pub fn is_intercept(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            write!(f, "1")
        } else {
            write!(f, "{}", self.0.join(":"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomTerm {
    pub terms: Vec<Term>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Formula {
    /// Population-level terms, intercept first when present.
    pub fixed: Vec<Term>,
    pub random: Vec<RandomTerm>,
}

impl Formula {
    pub fn has_intercept(&self) -> bool {
        self.fixed.first().is_some_and(Term::is_intercept)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    One,
    Zero,
    Plus,
    Star,
    Colon,
    Open,
    Close,
    Bar,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, DesignError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let tok = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '+' => Tok::Plus,
            '*' => Tok::Star,
            ':' => Tok::Colon,
            '(' => Tok::Open,
            ')' => Tok::Close,
            '|' => Tok::Bar,
            c if c.is_ascii_digit() => {
                let mut j = i;
                while j < chars.len() && chars[j].1.is_ascii_digit() {
                    j += 1;
                }
                let digits: String = chars[i..j].iter().map(|p| p.1).collect();
                i = j;
                match digits.as_str() {
                    "0" => out.push((pos, Tok::Zero)),
                    "1" => out.push((pos, Tok::One)),
                    _ => {
                        return Err(DesignError::Syntax {
                            pos,
                            msg: format!("only 0 and 1 are allowed as constants, found {digits}"),
                        })
                    }
                }
                continue;
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut j = i;
                while j < chars.len()
                    && (chars[j].1.is_alphanumeric() || chars[j].1 == '_' || chars[j].1 == '.')
                {
                    j += 1;
                }
                let name: String = chars[i..j].iter().map(|p| p.1).collect();
                i = j;
                out.push((pos, Tok::Ident(name)));
                continue;
            }
            other => {
                return Err(DesignError::Syntax {
                    pos,
                    msg: format!("unknown operator `{other}`"),
                });
            }
        };
        out.push((pos, tok));
        i += 1;
    }
    Ok(out)
}

/// Parsed sum: the set of terms plus an explicit intercept request.
#[derive(Debug, Clone, Default)]
struct TermSet {
    terms: Vec<Term>,
    intercept: Option<bool>,
    random: Vec<RandomTerm>,
}

impl TermSet {
    fn push(&mut self, t: Term) {
        if !self.terms.contains(&t) {
            self.terms.push(t);
        }
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    i: usize,
    end: usize,
    /// First-appearance order of variable names, used to canonicalise terms.
    order: HashMap<String, usize>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|t| &t.1)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.i).map_or(self.end, |t| t.0)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, DesignError> {
        Err(DesignError::Syntax {
            pos: self.pos(),
            msg: msg.into(),
        })
    }

    fn canonical(&self, mut vars: Vec<String>) -> Term {
        vars.sort_by_key(|v| self.order[v]);
        vars.dedup();
        Term(vars)
    }

    fn sum(&mut self, allow_random: bool) -> Result<TermSet, DesignError> {
        let mut set = TermSet::default();
        loop {
            self.product(&mut set, allow_random)?;
            if self.peek() == Some(&Tok::Plus) {
                self.i += 1;
            } else {
                return Ok(set);
            }
        }
    }

    fn product(&mut self, set: &mut TermSet, allow_random: bool) -> Result<(), DesignError> {
        let first = self.interaction(set, allow_random)?;
        let mut acc: Vec<Term> = match first {
            Some(t) => t,
            None => {
                if self.peek() == Some(&Tok::Star) {
                    return self.err("`*` needs variable operands");
                }
                return Ok(());
            }
        };
        while self.peek() == Some(&Tok::Star) {
            self.i += 1;
            let rhs = match self.interaction(set, false)? {
                Some(t) => t,
                None => return self.err("`*` needs variable operands"),
            };
            let mut crossed = acc.clone();
            for t in &rhs {
                if !crossed.contains(t) {
                    crossed.push(t.clone());
                }
            }
            for a in &acc {
                for b in &rhs {
                    let t = self.canonical(a.0.iter().chain(&b.0).cloned().collect());
                    if !crossed.contains(&t) {
                        crossed.push(t);
                    }
                }
            }
            acc = crossed;
        }
        for t in acc {
            set.push(t);
        }
        Ok(())
    }

    /// `atom (':' atom)*`. Returns `None` for constants and random terms,
    /// which are recorded on `set` directly.
    fn interaction(
        &mut self,
        set: &mut TermSet,
        allow_random: bool,
    ) -> Result<Option<Vec<Term>>, DesignError> {
        let mut acc = match self.atom(set, allow_random)? {
            Some(t) => t,
            None => {
                if self.peek() == Some(&Tok::Colon) {
                    return self.err("`:` needs variable operands");
                }
                return Ok(None);
            }
        };
        while self.peek() == Some(&Tok::Colon) {
            self.i += 1;
            let rhs = match self.atom(set, false)? {
                Some(t) => t,
                None => return self.err("`:` needs variable operands"),
            };
            let mut next = Vec::new();
            for a in &acc {
                for b in &rhs {
                    let t = self.canonical(a.0.iter().chain(&b.0).cloned().collect());
                    if !next.contains(&t) {
                        next.push(t);
                    }
                }
            }
            acc = next;
        }
        Ok(Some(acc))
    }

    fn atom(
        &mut self,
        set: &mut TermSet,
        allow_random: bool,
    ) -> Result<Option<Vec<Term>>, DesignError> {
        match self.peek().cloned() {
            Some(Tok::Ident(name)) => {
                self.i += 1;
                let n = self.order.len();
                self.order.entry(name.clone()).or_insert(n);
                Ok(Some(vec![Term(vec![name])]))
            }
            Some(Tok::One) => {
                self.i += 1;
                set.intercept = Some(true);
                Ok(None)
            }
            Some(Tok::Zero) => {
                self.i += 1;
                set.intercept = Some(false);
                Ok(None)
            }
            Some(Tok::Open) => {
                self.i += 1;
                let inner = self.sum(false)?;
                match self.peek().cloned() {
                    Some(Tok::Bar) => {
                        if !allow_random {
                            return self.err("random terms are only allowed at the top level");
                        }
                        self.i += 1;
                        let group = match self.peek().cloned() {
                            Some(Tok::Ident(g)) => g,
                            _ => return self.err("expected a grouping variable after `|`"),
                        };
                        self.i += 1;
                        if self.peek() != Some(&Tok::Close) {
                            return self.err("expected `)` after the grouping variable");
                        }
                        self.i += 1;
                        let terms = finish_terms(inner.terms, inner.intercept.unwrap_or(true));
                        if terms.is_empty() {
                            return self.err("random term has no columns");
                        }
                        set.random.push(RandomTerm { terms, group });
                        Ok(None)
                    }
                    Some(Tok::Close) => {
                        self.i += 1;
                        if inner.intercept.is_some() || !inner.random.is_empty() {
                            return self.err("constants are not allowed inside parentheses");
                        }
                        Ok(Some(inner.terms))
                    }
                    _ => self.err("expected `)` or `|`"),
                }
            }
            Some(t) => self.err(format!("unexpected {t:?}")),
            None => self.err("unexpected end of formula"),
        }
    }
}

/// Intercept, then terms by degree, keeping first appearance within a degree.
fn finish_terms(terms: Vec<Term>, intercept: bool) -> Vec<Term> {
    let mut t: Vec<Term> = terms.into_iter().filter(|t| !t.is_intercept()).collect();
    t.sort_by_key(Term::degree);
    if intercept {
        t.insert(0, Term::intercept());
    }
    t
}

pub fn parse_formula(text: &str) -> Result<Formula, DesignError> {
    let toks = tokenize(text)?;
    if toks.is_empty() {
        return Err(DesignError::Syntax {
            pos: 0,
            msg: "empty formula".into(),
        });
    }
    let mut p = Parser {
        toks,
        i: 0,
        end: text.len(),
        order: HashMap::new(),
    };
    let set = p.sum(true)?;
    if p.i < p.toks.len() {
        return p.err("unexpected trailing input");
    }
    Ok(Formula {
        fixed: finish_terms(set.terms, set.intercept.unwrap_or(true)),
        random: set.random,
    })
}

impl std::str::FromStr for Formula {
    type Err = DesignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_formula(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Categorical {
        levels: Vec<String>,
        codes: Vec<usize>,
    },
    Numeric {
        values: Vec<f64>,
        standardize: bool,
    },
}

/// Observation metadata with one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTable {
    rows: usize,
    columns: Vec<(String, Column)>,
}

impl MetaTable {
    pub fn new(rows: usize) -> Self {
        Self {
            rows,
            columns: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn check(&self, name: &str, len: usize) -> Result<(), DesignError> {
        if self.columns.iter().any(|(n, _)| n == name) {
            return Err(DesignError::DuplicateColumn(name.into()));
        }
        if len != self.rows {
            return Err(DesignError::RowCount {
                name: name.into(),
                got: len,
                expected: self.rows,
            });
        }
        Ok(())
    }

    /// Categorical column. `levels` gives the declared order; by default
    /// levels are taken in order of first appearance.
    pub fn add_categorical<S: AsRef<str>>(
        &mut self,
        name: &str,
        values: &[S],
        levels: Option<Vec<String>>,
    ) -> Result<&mut Self, DesignError> {
        self.check(name, values.len())?;
        let levels = levels.unwrap_or_else(|| {
            let mut seen: Vec<String> = Vec::new();
            for v in values {
                if !seen.iter().any(|s| s == v.as_ref()) {
                    seen.push(v.as_ref().to_string());
                }
            }
            seen
        });
        let codes = values
            .iter()
            .map(|v| {
                levels.iter().position(|l| l == v.as_ref()).ok_or_else(|| {
                    DesignError::UnknownLevel {
                        name: name.into(),
                        value: v.as_ref().into(),
                    }
                })
            })
            .collect::<Result<_, _>>()?;
        self.columns
            .push((name.into(), Column::Categorical { levels, codes }));
        Ok(self)
    }

    pub fn add_numeric(
        &mut self,
        name: &str,
        values: &[f64],
        standardize: bool,
    ) -> Result<&mut Self, DesignError> {
        self.check(name, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DesignError::NonFinite(name.into()));
        }
        self.columns.push((
            name.into(),
            Column::Numeric {
                values: values.to_vec(),
                standardize,
            },
        ));
        Ok(self)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }
}

/// Mean and sample standard deviation used to standardize a numeric column.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Group-level block: `levels.len() * terms.len()` columns of `Z` (or `U`)
/// starting at `offset`, with column `offset + level * T + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomBlock {
    pub group: String,
    pub levels: Vec<String>,
    pub term_names: Vec<String>,
    pub offset: usize,
    /// Group level of each observation.
    pub codes: Vec<usize>,
}

impl RandomBlock {
    pub fn width(&self) -> usize {
        self.terms() * self.levels.len()
    }

    pub fn terms(&self) -> usize {
        self.term_names.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSet {
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z: DMatrix<f64>,
    pub z_names: Vec<String>,
    pub z_blocks: Vec<RandomBlock>,
    pub w: DMatrix<f64>,
    pub w_names: Vec<String>,
    pub u: DMatrix<f64>,
    pub u_names: Vec<String>,
    pub u_blocks: Vec<RandomBlock>,
    pub standardization: Vec<Standardization>,
}

impl DesignSet {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

/// Named columns for one term evaluated on every row.
fn term_columns(
    meta: &MetaTable,
    term: &Term,
    stats: &mut Vec<Standardization>,
) -> Result<Vec<(String, Vec<f64>)>, DesignError> {
    let n = meta.rows;
    let mut cols: Vec<(String, Vec<f64>)> = vec![(String::new(), vec![1.0; n])];
    for var in &term.0 {
        let col = meta
            .column(var)
            .ok_or_else(|| DesignError::UnknownVariable(var.clone()))?;
        let factors: Vec<(String, Vec<f64>)> = match col {
            Column::Categorical { levels, codes } => {
                if levels.len() < 2 {
                    return Err(DesignError::SingleLevel(var.clone()));
                }
                (1..levels.len())
                    .map(|l| {
                        (
                            format!("{var}[{}]", levels[l]),
                            codes.iter().map(|&c| f64::from(c == l)).collect(),
                        )
                    })
                    .collect()
            }
            Column::Numeric {
                values,
                standardize,
            } => {
                let v = if *standardize {
                    let s = standardize_stats(var, values)?;
                    let out = values.iter().map(|x| (x - s.mean) / s.sd).collect();
                    if !stats.iter().any(|e| e.name == *var) {
                        stats.push(s);
                    }
                    out
                } else {
                    values.clone()
                };
                vec![(var.clone(), v)]
            }
        };
        let mut next = Vec::with_capacity(cols.len() * factors.len());
        for (name, vals) in &cols {
            for (fname, fvals) in &factors {
                let joined = if name.is_empty() {
                    fname.clone()
                } else {
                    format!("{name}:{fname}")
                };
                next.push((joined, vals.iter().zip(fvals).map(|(a, b)| a * b).collect()));
            }
        }
        cols = next;
    }
    if term.is_intercept() {
        cols[0].0 = "Intercept".into();
    }
    Ok(cols)
}

fn standardize_stats(name: &str, values: &[f64]) -> Result<Standardization, DesignError> {
    let n = values.len();
    if n < 2 {
        return Err(DesignError::ZeroVariance(name.into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(DesignError::ZeroVariance(name.into()));
    }
    Ok(Standardization {
        name: name.into(),
        mean,
        sd: var.sqrt(),
    })
}

fn fixed_matrix(
    meta: &MetaTable,
    terms: &[Term],
    stats: &mut Vec<Standardization>,
) -> Result<(DMatrix<f64>, Vec<String>), DesignError> {
    let mut names = Vec::new();
    let mut data = Vec::new();
    for t in terms {
        for (name, col) in term_columns(meta, t, stats)? {
            names.push(name);
            data.push(col);
        }
    }
    let m = DMatrix::from_fn(meta.rows, names.len(), |i, j| data[j][i]);
    Ok((m, names))
}

type RandomParts = (DMatrix<f64>, Vec<String>, Vec<RandomBlock>);

fn random_matrix(
    meta: &MetaTable,
    random: &[RandomTerm],
    stats: &mut Vec<Standardization>,
) -> Result<RandomParts, DesignError> {
    let n = meta.rows;
    let mut names = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    let mut blocks = Vec::new();
    for r in random {
        let (levels, codes) = match meta.column(&r.group) {
            Some(Column::Categorical { levels, codes }) => (levels.clone(), codes.clone()),
            Some(Column::Numeric { .. }) => return Err(DesignError::NumericGroup(r.group.clone())),
            None => return Err(DesignError::UnknownVariable(r.group.clone())),
        };
        let mut cols = Vec::new();
        for t in &r.terms {
            cols.extend(term_columns(meta, t, stats)?);
        }
        let offset = names.len();
        for (l, level) in levels.iter().enumerate() {
            for (cname, cvals) in &cols {
                names.push(format!("{}[{}]:{}", r.group, level, cname));
                data.push(
                    (0..n)
                        .map(|i| if codes[i] == l { cvals[i] } else { 0.0 })
                        .collect(),
                );
            }
        }
        blocks.push(RandomBlock {
            group: r.group.clone(),
            levels,
            term_names: cols.into_iter().map(|c| c.0).collect(),
            offset,
            codes,
        });
    }
    let m = DMatrix::from_fn(n, names.len(), |i, j| data[j][i]);
    Ok((m, names, blocks))
}

/// Design matrices for the mean formula (`X`, `Z`) and the log-scale
/// formula (`W`, `U`).
pub fn build_design(
    meta: &MetaTable,
    f_mean: &Formula,
    f_scale: &Formula,
) -> Result<DesignSet, DesignError> {
    let mut stats = Vec::new();
    let (x, x_names) = fixed_matrix(meta, &f_mean.fixed, &mut stats)?;
    let (z, z_names, z_blocks) = random_matrix(meta, &f_mean.random, &mut stats)?;
    let (w, w_names) = fixed_matrix(meta, &f_scale.fixed, &mut stats)?;
    let (u, u_names, u_blocks) = random_matrix(meta, &f_scale.random, &mut stats)?;
    Ok(DesignSet {
        x,
        x_names,
        z,
        z_names,
        z_blocks,
        w,
        w_names,
        u,
        u_names,
        u_blocks,
        standardization: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(ts: &[Term]) -> Vec<String> {
        ts.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn parses_the_mixed_model() {
        let f = parse_formula("reg * meal + (reg + meal | subj)").unwrap();
        assert_eq!(names(&f.fixed), ["1", "reg", "meal", "reg:meal"]);
        assert_eq!(f.random.len(), 1);
        assert_eq!(names(&f.random[0].terms), ["1", "reg", "meal"]);
        assert_eq!(f.random[0].group, "subj");
    }

    #[test]
    fn constants_and_duplicates() {
        assert_eq!(names(&parse_formula("1").unwrap().fixed), ["1"]);
        assert_eq!(names(&parse_formula("a + a").unwrap().fixed), ["1", "a"]);
        assert_eq!(names(&parse_formula("0 + a").unwrap().fixed), ["a"]);
        assert_eq!(
            names(&parse_formula("a:b + b:a").unwrap().fixed),
            ["1", "a:b"]
        );
        assert_eq!(
            names(&parse_formula("a*b*c").unwrap().fixed),
            ["1", "a", "b", "c", "a:b", "a:c", "b:c", "a:b:c"]
        );
        assert_eq!(
            names(&parse_formula("a:b*c").unwrap().fixed),
            ["1", "c", "a:b", "a:b:c"]
        );
        assert_eq!(
            names(&parse_formula("(a + b):c").unwrap().fixed),
            ["1", "a:c", "b:c"]
        );
        let f = parse_formula("reg * meal + nchan").unwrap();
        assert_eq!(names(&f.fixed), ["1", "reg", "meal", "nchan", "reg:meal"]);
        assert!(f.random.is_empty());
        assert_eq!(
            names(&parse_formula("a + (0 + a | g)").unwrap().random[0].terms),
            ["a"]
        );
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match parse_formula("a + $b") {
            Err(DesignError::Syntax { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_formula("a +"),
            Err(DesignError::Syntax { pos: 3, .. })
        ));
        assert!(parse_formula("(a | )").is_err());
        assert!(parse_formula("a * (b | g)").is_err());
        assert!(parse_formula("a 2").is_err());
        assert!(parse_formula("").is_err());
        assert!(parse_formula("a b").is_err());
    }

    fn meta_2x2(subjects: &[&str]) -> MetaTable {
        let mut subj = Vec::new();
        let mut reg = Vec::new();
        let mut meal = Vec::new();
        for s in subjects {
            for r in ["descending", "sigmoid"] {
                for m in ["0", "1"] {
                    subj.push(*s);
                    reg.push(r);
                    meal.push(m);
                }
            }
        }
        let n = subj.len();
        let mut t = MetaTable::new(n);
        t.add_categorical("subj", &subj, None).unwrap();
        t.add_categorical(
            "reg",
            &reg,
            Some(vec!["descending".into(), "sigmoid".into()]),
        )
        .unwrap();
        t.add_categorical("meal", &meal, Some(vec!["0".into(), "1".into()]))
            .unwrap();
        let nchan: Vec<f64> = (0..n).map(|i| (10 + (i * 7) % 9) as f64).collect();
        t.add_numeric("nchan", &nchan, true).unwrap();
        t
    }

    #[test]
    fn two_by_two_design_columns() {
        let meta = meta_2x2(&["S01", "S02", "S03"]);
        let fm = parse_formula("reg * meal + (reg + meal | subj)").unwrap();
        let fs = parse_formula("reg * meal + nchan").unwrap();
        let d = build_design(&meta, &fm, &fs).unwrap();
        assert_eq!(
            d.x_names,
            [
                "Intercept",
                "reg[sigmoid]",
                "meal[1]",
                "reg[sigmoid]:meal[1]"
            ]
        );
        assert_eq!(
            d.w_names,
            [
                "Intercept",
                "reg[sigmoid]",
                "meal[1]",
                "nchan",
                "reg[sigmoid]:meal[1]"
            ]
        );
        assert_eq!(d.u.ncols(), 0);
        assert_eq!(d.z.ncols(), 9);
        assert_eq!(d.z_names[4], "subj[S02]:reg[sigmoid]");
        // hand-built Z: row for (subject s, reg r, meal m)
        for i in 0..d.n() {
            let s = i / 4;
            let r = ((i / 2) % 2) as f64;
            let m = (i % 2) as f64;
            assert_eq!(
                d.x.row(i).iter().copied().collect::<Vec<_>>(),
                [1.0, r, m, r * m]
            );
            for j in 0..9 {
                let expect = if j / 3 == s { [1.0, r, m][j % 3] } else { 0.0 };
                assert_eq!(d.z[(i, j)], expect, "cell ({i}, {j})");
            }
        }
        let col = d.w.column(3);
        let mean = col.sum() / d.n() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.n() - 1) as f64;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        assert_eq!(d.standardization[0].name, "nchan");
    }

    #[test]
    fn eleven_subjects_give_thirty_three_columns() {
        let subjects: Vec<String> = (1..=11).map(|i| format!("S{i:02}")).collect();
        let refs: Vec<&str> = subjects.iter().map(String::as_str).collect();
        let meta = meta_2x2(&refs);
        let fm = parse_formula("reg * meal + (reg + meal | subj)").unwrap();
        let d = build_design(&meta, &fm, &parse_formula("1").unwrap()).unwrap();
        assert_eq!(d.z.ncols(), 33);
        for (i, &code) in d.z_blocks[0].codes.iter().enumerate() {
            for j in 0..33 {
                if j / 3 != code {
                    assert_eq!(d.z[(i, j)], 0.0);
                }
            }
        }
        assert_eq!(d.w.ncols(), 1);
    }

    #[test]
    fn intercept_only_and_errors() {
        let mut t = MetaTable::new(3);
        t.add_categorical("g", &["a", "a", "a"], None).unwrap();
        let d = build_design(
            &t,
            &parse_formula("1").unwrap(),
            &parse_formula("1").unwrap(),
        )
        .unwrap();
        assert_eq!(d.x, DMatrix::from_element(3, 1, 1.0));
        assert_eq!(
            build_design(
                &t,
                &parse_formula("g").unwrap(),
                &parse_formula("1").unwrap()
            ),
            Err(DesignError::SingleLevel("g".into()))
        );
        assert_eq!(
            build_design(
                &t,
                &parse_formula("h").unwrap(),
                &parse_formula("1").unwrap()
            ),
            Err(DesignError::UnknownVariable("h".into()))
        );
        assert!(t.add_numeric("x", &[1.0, 2.0], false).is_err());
        assert!(t
            .add_categorical("k", &["a", "b", "c"], Some(vec!["a".into(), "b".into()]))
            .is_err());
    }

    #[test]
    fn rebuilding_is_deterministic() {
        let meta = meta_2x2(&["S01", "S02"]);
        let fm = parse_formula("reg * meal + (reg + meal | subj)").unwrap();
        let fs = parse_formula("reg * meal + nchan").unwrap();
        assert_eq!(
            build_design(&meta, &fm, &fs).unwrap(),
            build_design(&meta, &fm, &fs).unwrap()
        );
    }
}
