//! Candidate-function libraries.
//!
//! A term is a monomial over named features, e.g. `x²·u_xx`, with `1` the
//! empty product and `√x` the power one half. Names parse back into terms,
//! so a library can be written in a config file as a list of strings.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub feature: String,
    pub power: f64,
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.power;
        if p == 1.0 {
            write!(f, "{}", self.feature)
        } else if p == 0.5 {
            write!(f, "√{}", self.feature)
        } else if p == 2.0 {
            write!(f, "{}²", self.feature)
        } else if p == 3.0 {
            write!(f, "{}³", self.feature)
        } else {
            write!(f, "{}^{}", self.feature, p)
        }
    }
}

/// A monomial candidate term.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    factors: Vec<Factor>,
}

impl Term {
    pub fn constant() -> Self {
        Self { factors: Vec::new() }
    }

    pub fn new(factors: Vec<Factor>) -> Self {
        Self { factors }
    }

    pub fn feature(name: &str) -> Self {
        Self::new(vec![Factor { feature: name.to_string(), power: 1.0 }])
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    pub fn uses(&self, feature: &str) -> bool {
        self.factors.iter().any(|f| f.feature == feature)
    }

    /// Parses `1`, `x`, `x²`, `x^2`, `√x`, `sqrt(x)`, and products joined by
    /// `·` or `*`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "1" {
            return Ok(Self::constant());
        }
        let mut factors = Vec::new();
        for raw in s.split(['·', '*']) {
            let raw = raw.trim();
            if raw.is_empty() {
                return invalid(format!("empty factor in term `{s}`"));
            }
            factors.push(parse_factor(raw)?);
        }
        Ok(Self { factors })
    }

    /// Value of the term at one sample; `None` names a missing feature.
    pub fn eval(&self, lookup: impl Fn(&str) -> Option<f64>) -> Option<f64> {
        self.factors
            .iter()
            .try_fold(1.0, |acc, f| lookup(&f.feature).map(|v| acc * pow(v, f.power)))
    }

    /// Partial derivative of the term with respect to one feature.
    pub fn partial(&self, feature: &str, lookup: impl Fn(&str) -> Option<f64>) -> Option<f64> {
        let values: Vec<f64> = self.factors.iter().map(|f| lookup(&f.feature)).collect::<Option<_>>()?;
        let mut total = 0.0;
        for (k, fk) in self.factors.iter().enumerate() {
            if fk.feature != feature {
                continue;
            }
            let mut d = fk.power * pow(values[k], fk.power - 1.0);
            for (j, fj) in self.factors.iter().enumerate() {
                if j != k {
                    d *= pow(values[j], fj.power);
                }
            }
            total += d;
        }
        Some(total)
    }

    fn eval_row(&self, cols: &[&[f64]], row: usize) -> f64 {
        self.factors
            .iter()
            .zip(cols)
            .fold(1.0, |acc, (f, col)| acc * pow(col[row], f.power))
    }
}

fn pow(v: f64, p: f64) -> f64 {
    if p == 1.0 {
        v
    } else if p == 2.0 {
        v * v
    } else if p == 0.5 {
        v.sqrt()
    } else if p.fract() == 0.0 {
        v.powi(p as i32)
    } else {
        v.powf(p)
    }
}

fn parse_factor(raw: &str) -> Result<Factor> {
    if let Some(rest) = raw.strip_prefix('√') {
        return Ok(Factor { feature: rest.to_string(), power: 0.5 });
    }
    if let Some(inner) = raw.strip_prefix("sqrt(").and_then(|r| r.strip_suffix(')')) {
        return Ok(Factor { feature: inner.to_string(), power: 0.5 });
    }
    for (suffix, p) in [("²", 2.0), ("³", 3.0)] {
        if let Some(base) = raw.strip_suffix(suffix) {
            return Ok(Factor { feature: base.to_string(), power: p });
        }
    }
    if let Some((base, p)) = raw.split_once('^') {
        let power: f64 = p
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad exponent in `{raw}`")))?;
        return Ok(Factor { feature: base.to_string(), power });
    }
    if raw.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return Ok(Factor { feature: raw.to_string(), power: 1.0 });
    }
    invalid(format!("cannot parse factor `{raw}`"))
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return write!(f, "1");
        }
        for (i, factor) in self.factors.iter().enumerate() {
            if i > 0 {
                write!(f, "·")?;
            }
            write!(f, "{factor}")?;
        }
        Ok(())
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Term::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// An ordered list of uniquely named terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Term>", into = "Vec<Term>")]
pub struct LibrarySpec {
    terms: Vec<Term>,
}

impl TryFrom<Vec<Term>> for LibrarySpec {
    type Error = Error;
    fn try_from(terms: Vec<Term>) -> Result<Self> {
        Self::new(terms)
    }
}

impl From<LibrarySpec> for Vec<Term> {
    fn from(spec: LibrarySpec) -> Self {
        spec.terms
    }
}

impl LibrarySpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &terms {
            if !seen.insert(t.name()) {
                return invalid(format!("duplicate library term `{t}`"));
            }
        }
        Ok(Self { terms })
    }

    pub fn parse(names: &[&str]) -> Result<Self> {
        Self::new(names.iter().map(|n| Term::parse(n)).collect::<Result<_>>()?)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(Term::name).collect()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Evaluates every term at a single sample given as feature lookups.
    pub fn eval_point(&self, lookup: impl Fn(&str) -> Option<f64>) -> Result<Vec<f64>> {
        self.terms
            .iter()
            .map(|t| {
                t.factors().iter().try_fold(1.0, |acc, f| {
                    lookup(&f.feature)
                        .map(|v| acc * pow(v, f.power))
                        .ok_or_else(|| Error::InvalidParameter(format!("unknown feature `{}`", f.feature)))
                })
            })
            .collect()
    }
}

/// Named, equally long feature columns.
#[derive(Debug, Clone, Default)]
pub struct Features {
    cols: BTreeMap<String, Vec<f64>>,
    len: Option<usize>,
}

impl Features {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        match self.len {
            Some(n) if n != values.len() => {
                return invalid(format!(
                    "feature `{name}` has {} rows, expected {n}",
                    values.len()
                ))
            }
            _ => self.len = Some(values.len()),
        }
        self.cols.insert(name.to_string(), values);
        Ok(())
    }

    pub fn with(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.insert(name, values)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.cols.get(name).map(Vec::as_slice)
    }

    pub fn n_rows(&self) -> usize {
        self.len.unwrap_or(0)
    }
}

/// Dense evaluated library: one row per sample, one column per term.
#[derive(Debug, Clone, PartialEq)]
pub struct LibraryMatrix {
    pub data: DMatrix<f64>,
    pub names: Vec<String>,
}

impl LibraryMatrix {
    pub fn new(data: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if data.ncols() != names.len() {
            return invalid("column count does not match names");
        }
        if let Some((k, _)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (row, col) = (k % data.nrows(), k / data.nrows());
            return Err(Error::NonFinite { term: names[col].clone(), row });
        }
        Ok(Self { data, names })
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.data.ncols()
    }

    /// Multiplies every row by a per-row factor, e.g. Δt_i or ΔB_i.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.n_rows() {
            return invalid("row factor length mismatch");
        }
        let mut data = self.data.clone();
        for (mut row, &f) in data.row_iter_mut().zip(factors) {
            row *= f;
        }
        Self::new(data, self.names.clone())
    }

    /// Side-by-side concatenation `[self | other]`.
    pub fn hstack(&self, other: &LibraryMatrix) -> Result<Self> {
        if self.n_rows() != other.n_rows() {
            return invalid("hstack row mismatch");
        }
        let mut data = DMatrix::zeros(self.n_rows(), self.n_cols() + other.n_cols());
        data.columns_mut(0, self.n_cols()).copy_from(&self.data);
        data.columns_mut(self.n_cols(), other.n_cols()).copy_from(&other.data);
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        Ok(Self { data, names })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(rows),
            names: self.names.clone(),
        }
    }
}

/// Evaluates each term row-wise on the features.
pub fn build_library(spec: &LibrarySpec, features: &Features) -> Result<LibraryMatrix> {
    let n = features.n_rows();
    let mut data = DMatrix::zeros(n, spec.len());
    for (j, term) in spec.terms().iter().enumerate() {
        let cols: Vec<&[f64]> = term
            .factors()
            .iter()
            .map(|f| {
                features
                    .get(&f.feature)
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown feature `{}` in term `{term}`", f.feature)))
            })
            .collect::<Result<_>>()?;
        for i in 0..n {
            let v = term.eval_row(&cols, i);
            if !v.is_finite() {
                return Err(Error::NonFinite { term: term.name(), row: i });
            }
            data[(i, j)] = v;
        }
    }
    Ok(LibraryMatrix { data, names: spec.names() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_derivatives_of_monomials() {
        let t = Term::parse("x²·u_xx").unwrap();
        let look = |f: &str| match f {
            "x" => Some(3.0),
            "u_xx" => Some(0.5),
            _ => None,
        };
        assert_eq!(t.eval(look), Some(4.5));
        assert_eq!(t.partial("x", look), Some(3.0));
        assert_eq!(t.partial("u_xx", look), Some(9.0));
        assert_eq!(t.partial("u", look), Some(0.0));
        assert_eq!(Term::constant().partial("x", look), Some(0.0));
        assert_eq!(Term::parse("u").unwrap().eval(look), None);
    }

    #[test]
    fn polynomial_library() {
        let spec = LibrarySpec::parse(&["1", "x", "x²"]).unwrap();
        let f = Features::new().with("x", vec![1.0, 2.0]).unwrap();
        let m = build_library(&spec, &f).unwrap();
        assert_eq!(m.data, DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 1.0, 2.0, 4.0]));
        assert_eq!(m.names, vec!["1", "x", "x²"]);
    }

    #[test]
    fn empty_spec_gives_zero_columns() {
        let spec = LibrarySpec::new(vec![]).unwrap();
        let f = Features::new().with("x", vec![1.0, 2.0, 3.0]).unwrap();
        let m = build_library(&spec, &f).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (3, 0));
    }

    #[test]
    fn product_term_is_elementwise() {
        let spec = LibrarySpec::parse(&["x·u_x", "x^2*u_xx", "sqrt(x)"]).unwrap();
        assert_eq!(spec.names(), vec!["x·u_x", "x²·u_xx", "√x"]);
        let f = Features::new()
            .with("x", vec![1.5, 4.0])
            .unwrap()
            .with("u_x", vec![0.2, 0.7])
            .unwrap()
            .with("u_xx", vec![3.0, -1.0])
            .unwrap();
        let m = build_library(&spec, &f).unwrap();
        assert_eq!(m.data[(0, 0)], 1.5 * 0.2);
        assert_eq!(m.data[(1, 1)], 16.0 * -1.0);
        assert_eq!(m.data[(1, 2)], 2.0);
    }

    #[test]
    fn non_finite_names_term_and_row() {
        let spec = LibrarySpec::parse(&["x", "√x"]).unwrap();
        let f = Features::new().with("x", vec![1.0, -4.0]).unwrap();
        match build_library(&spec, &f) {
            Err(Error::NonFinite { term, row }) => {
                assert_eq!(term, "√x");
                assert_eq!(row, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(LibrarySpec::parse(&["x", "x^1"]).is_err());
    }

    #[test]
    fn spec_serializes_as_names() {
        let spec = LibrarySpec::parse(&["1", "x²·u_xx"]).unwrap();
        let js = serde_json::to_string(&spec).unwrap();
        assert_eq!(js, r#"["1","x²·u_xx"]"#);
        let back: LibrarySpec = serde_json::from_str(&js).unwrap();
        assert_eq!(back, spec);
    }
}
