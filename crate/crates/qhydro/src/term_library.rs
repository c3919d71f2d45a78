//! Symbolic candidate terms, their (P, T) signatures, and their evaluation
//! into library columns.
//!
//! Terms have a compact text form used in configs, JSON output and rendered
//! equations: `u`, `u_xx`, `u^2*u_x`, `(x-500)^2*u`, `sin(2pi/3*u)*u_x`,
//! `dlog(rho)`, `K[|q|^2.5]u`, and `1` for the constant.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_store::{Dataset, Grid, Parity, C64};
use crate::par::{self, Exec};
use crate::preprocess::{self, DerivativeSpec, Scheme};
use crate::sparse_regress::Design;
use crate::spectral::SpectralAxis;

/// Largest library `generate_terms` will build.
pub const MAX_TERMS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    AbsQPow(f64),
    Q2,
    Q4,
    LogQ,
    Q2LogQ,
    Q4LogQ,
}

impl Kernel {
    fn rank(&self) -> (u8, f64) {
        match *self {
            Kernel::AbsQPow(mu) => (0, mu),
            Kernel::Q2 => (1, 0.0),
            Kernel::Q4 => (2, 0.0),
            Kernel::LogQ => (3, 0.0),
            Kernel::Q2LogQ => (4, 0.0),
            Kernel::Q4LogQ => (5, 0.0),
        }
    }

    /// Multiplier at wavenumber `q`; the `q = 0` mode is zero for every kernel.
    pub fn symbol(&self, q: f64) -> f64 {
        let a = q.abs();
        if a == 0.0 {
            return 0.0;
        }
        match *self {
            Kernel::AbsQPow(mu) => a.powf(mu),
            Kernel::Q2 => q * q,
            Kernel::Q4 => q.powi(4),
            Kernel::LogQ => a.ln(),
            Kernel::Q2LogQ => q * q * a.ln(),
            Kernel::Q4LogQ => q.powi(4) * a.ln(),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::AbsQPow(mu) => write!(f, "|q|^{mu}"),
            Kernel::Q2 => f.write_str("q^2"),
            Kernel::Q4 => f.write_str("q^4"),
            Kernel::LogQ => f.write_str("log|q|"),
            Kernel::Q2LogQ => f.write_str("q^2*log|q|"),
            Kernel::Q4LogQ => f.write_str("q^4*log|q|"),
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Kernel> {
        Ok(match s.trim() {
            "q^2" => Kernel::Q2,
            "q^4" => Kernel::Q4,
            "log|q|" => Kernel::LogQ,
            "q^2*log|q|" => Kernel::Q2LogQ,
            "q^4*log|q|" => Kernel::Q4LogQ,
            other => {
                let mu = other
                    .strip_prefix("|q|^")
                    .and_then(|m| m.parse::<f64>().ok())
                    .filter(|m| m.is_finite() && *m > 0.0)
                    .ok_or_else(|| Error::config(format!("unknown kernel {other:?}")))?;
                Kernel::AbsQPow(mu)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    /// `(∂x^deriv field)^exp`
    FieldPower {
        field: String,
        deriv: u32,
        exp: u32,
    },
    /// `(x - offset)^exp`
    SpatialMonomial {
        offset: f64,
        exp: u32,
    },
    /// `sin(2π·field/period)`
    SpecialSin {
        field: String,
        period: u32,
    },
    /// `(log field)_x`, evaluated as `field_x/field`
    LogDeriv {
        field: String,
    },
    Nonlocal {
        kernel: Kernel,
        field: String,
    },
}

impl Factor {
    fn category(&self) -> u8 {
        match self {
            Factor::SpatialMonomial { .. } => 0,
            Factor::SpecialSin { .. } => 1,
            Factor::FieldPower { .. } => 2,
            Factor::LogDeriv { .. } => 3,
            Factor::Nonlocal { .. } => 4,
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            Factor::FieldPower { field, .. }
            | Factor::SpecialSin { field, .. }
            | Factor::LogDeriv { field }
            | Factor::Nonlocal { field, .. } => Some(field),
            Factor::SpatialMonomial { .. } => None,
        }
    }

    fn degree(&self) -> u32 {
        match self {
            Factor::FieldPower { exp, .. } => *exp,
            Factor::SpatialMonomial { .. } => 0,
            _ => 1,
        }
    }
}

impl Eq for Factor {}

impl Ord for Factor {
    fn cmp(&self, other: &Self) -> Ordering {
        use Factor::*;
        self.category()
            .cmp(&other.category())
            .then_with(|| match (self, other) {
                (SpatialMonomial { offset: a, exp: e }, SpatialMonomial { offset: b, exp: f }) => {
                    a.total_cmp(b).then(e.cmp(f))
                }
                (
                    SpecialSin {
                        field: a,
                        period: p,
                    },
                    SpecialSin {
                        field: b,
                        period: r,
                    },
                ) => a.cmp(b).then(p.cmp(r)),
                (
                    FieldPower {
                        field: a,
                        deriv: d,
                        exp: e,
                    },
                    FieldPower {
                        field: b,
                        deriv: g,
                        exp: f,
                    },
                ) => a.cmp(b).then(d.cmp(g)).then(e.cmp(f)),
                (LogDeriv { field: a }, LogDeriv { field: b }) => a.cmp(b),
                (
                    Nonlocal {
                        kernel: k,
                        field: a,
                    },
                    Nonlocal {
                        kernel: l,
                        field: b,
                    },
                ) => {
                    let (rk, mk) = k.rank();
                    let (rl, ml) = l.rank();
                    rk.cmp(&rl).then(mk.total_cmp(&ml)).then(a.cmp(b))
                }
                _ => Ordering::Equal,
            })
    }
}

impl PartialOrd for Factor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn fmt_offset(offset: f64) -> String {
    if offset == 0.0 {
        "x".into()
    } else if offset > 0.0 {
        format!("(x-{offset})")
    } else {
        format!("(x+{})", -offset)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pow = |e: u32| {
            if e == 1 {
                String::new()
            } else {
                format!("^{e}")
            }
        };
        match self {
            Factor::FieldPower { field, deriv, exp } => {
                if *deriv == 0 {
                    write!(f, "{field}{}", pow(*exp))
                } else {
                    write!(f, "{field}_{}{}", "x".repeat(*deriv as usize), pow(*exp))
                }
            }
            Factor::SpatialMonomial { offset, exp } => {
                write!(f, "{}{}", fmt_offset(*offset), pow(*exp))
            }
            Factor::SpecialSin { field, period } => write!(f, "sin(2pi/{period}*{field})"),
            Factor::LogDeriv { field } => write!(f, "dlog({field})"),
            Factor::Nonlocal { kernel, field } => write!(f, "K[{kernel}]{field}"),
        }
    }
}

/// A product of factors in canonical order; the empty product is `1`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Term {
    factors: Vec<Factor>,
}

fn check_field_name(name: &str) -> Result<()> {
    let mut c = name.chars();
    let ok = matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic())
        && c.all(|ch| ch.is_ascii_alphanumeric());
    if !ok || name == "x" {
        return Err(Error::config(format!(
            "{name:?} cannot be used in terms: names are a letter followed by letters or digits, and not x"
        )));
    }
    Ok(())
}

impl Term {
    pub fn constant() -> Term {
        Term { factors: vec![] }
    }

    /// Canonicalises: merges equal bases, drops zero exponents, sorts.
    pub fn new(factors: Vec<Factor>) -> Result<Term> {
        let mut powers: BTreeMap<(String, u32), u32> = BTreeMap::new();
        let mut monomials: Vec<(f64, u32)> = vec![];
        let mut rest = vec![];
        for f in factors {
            if let Some(name) = f.field() {
                check_field_name(name)?;
            }
            match f {
                Factor::FieldPower { exp: 0, .. } | Factor::SpatialMonomial { exp: 0, .. } => {}
                Factor::FieldPower { field, deriv, exp } => {
                    if deriv > 4 {
                        return Err(Error::config(format!("derivative order {deriv} above 4")));
                    }
                    *powers.entry((field, deriv)).or_default() += exp;
                }
                Factor::SpatialMonomial { offset, exp } => {
                    if !offset.is_finite() {
                        return Err(Error::config("spatial offset must be finite"));
                    }
                    match monomials.iter_mut().find(|(o, _)| *o == offset) {
                        Some(m) => m.1 += exp,
                        None => monomials.push((offset, exp)),
                    }
                }
                Factor::SpecialSin { period: 0, .. } => {
                    return Err(Error::config("sin period must be at least 1"));
                }
                other => rest.push(other),
            }
        }
        let mut out: Vec<Factor> = powers
            .into_iter()
            .map(|((field, deriv), exp)| Factor::FieldPower { field, deriv, exp })
            .chain(
                monomials
                    .into_iter()
                    .map(|(offset, exp)| Factor::SpatialMonomial { offset, exp }),
            )
            .chain(rest)
            .collect();
        out.sort();
        let nonlocal = out
            .iter()
            .filter(|f| matches!(f, Factor::Nonlocal { .. }))
            .count();
        if nonlocal > 1 || (nonlocal == 1 && out.len() != 1) {
            return Err(Error::config(
                "a nonlocal kernel term carries exactly one field and nothing else",
            ));
        }
        Ok(Term { factors: out })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_constant(&self) -> bool {
        self.factors.is_empty()
    }

    /// Total field degree, counting each derivative factor by its exponent.
    pub fn degree(&self) -> u32 {
        self.factors.iter().map(Factor::degree).sum()
    }

    pub fn fields(&self) -> BTreeSet<&str> {
        self.factors.iter().filter_map(Factor::field).collect()
    }

    /// Highest spatial derivative order the term needs, counting `dlog` as one.
    pub fn max_deriv(&self) -> u32 {
        self.factors
            .iter()
            .map(|f| match f {
                Factor::FieldPower { deriv, .. } => *deriv,
                Factor::LogDeriv { .. } => 1,
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn nonlocal(&self) -> Option<(Kernel, &str)> {
        match self.factors.as_slice() {
            [Factor::Nonlocal { kernel, field }] => Some((*kernel, field)),
            _ => None,
        }
    }

    pub fn mul(&self, other: &Term) -> Result<Term> {
        Term::new(self.factors.iter().chain(&other.factors).cloned().collect())
    }

    fn graded_cmp(&self, other: &Term) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.cmp(other))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return f.write_str("1");
        }
        for (i, factor) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            write!(f, "{factor}")?;
        }
        Ok(())
    }
}

fn split_top_level(s: &str) -> Result<Vec<&str>> {
    let mut depth = 0i32;
    let mut parts = vec![];
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            '*' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 {
            return Err(Error::config(format!("unbalanced brackets in {s:?}")));
        }
    }
    if depth != 0 {
        return Err(Error::config(format!("unbalanced brackets in {s:?}")));
    }
    parts.push(&s[start..]);
    Ok(parts)
}

fn parse_exp(s: &str, whole: &str) -> Result<u32> {
    if s.is_empty() {
        return Ok(1);
    }
    s.strip_prefix('^')
        .and_then(|e| e.parse::<u32>().ok())
        .filter(|e| *e >= 1)
        .ok_or_else(|| Error::config(format!("bad exponent in {whole:?}")))
}

fn parse_factor(tok: &str) -> Result<Factor> {
    let bad = || Error::config(format!("cannot parse term factor {tok:?}"));
    if let Some(rest) = tok.strip_prefix("K[") {
        let close = rest.rfind(']').ok_or_else(bad)?;
        let kernel: Kernel = rest[..close].parse()?;
        let field = rest[close + 1..].to_string();
        check_field_name(&field)?;
        return Ok(Factor::Nonlocal { kernel, field });
    }
    if let Some(rest) = tok.strip_prefix("sin(2pi/") {
        let inner = rest.strip_suffix(')').ok_or_else(bad)?;
        let (p, field) = inner.split_once('*').ok_or_else(bad)?;
        let period = p.parse::<u32>().map_err(|_| bad())?;
        return Ok(Factor::SpecialSin {
            field: field.to_string(),
            period,
        });
    }
    if let Some(rest) = tok.strip_prefix("dlog(") {
        let field = rest.strip_suffix(')').ok_or_else(bad)?;
        return Ok(Factor::LogDeriv {
            field: field.to_string(),
        });
    }
    // `rho_x/rho` is another spelling of `dlog(rho)`.
    if let Some((num, den)) = tok.split_once('/') {
        if num.strip_suffix("_x") == Some(den) {
            check_field_name(den)?;
            return Ok(Factor::LogDeriv {
                field: den.to_string(),
            });
        }
        return Err(bad());
    }
    if let Some(rest) = tok.strip_prefix("(x") {
        let close = rest.find(')').ok_or_else(bad)?;
        let inner = &rest[..close];
        let offset = if let Some(v) = inner.strip_prefix('-') {
            v.parse::<f64>().map_err(|_| bad())?
        } else if let Some(v) = inner.strip_prefix('+') {
            -v.parse::<f64>().map_err(|_| bad())?
        } else {
            return Err(bad());
        };
        return Ok(Factor::SpatialMonomial {
            offset,
            exp: parse_exp(&rest[close + 1..], tok)?,
        });
    }
    if tok == "x" || tok.starts_with("x^") {
        return Ok(Factor::SpatialMonomial {
            offset: 0.0,
            exp: parse_exp(&tok[1..], tok)?,
        });
    }
    let (base, exp) = match tok.find('^') {
        Some(i) => (&tok[..i], parse_exp(&tok[i..], tok)?),
        None => (tok, 1),
    };
    let (field, deriv) = match base.split_once('_') {
        Some((f, d)) if !d.is_empty() && d.chars().all(|c| c == 'x') => (f, d.len() as u32),
        Some(_) => return Err(bad()),
        None => (base, 0),
    };
    check_field_name(field)?;
    Ok(Factor::FieldPower {
        field: field.to_string(),
        deriv,
        exp,
    })
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Term> {
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if s == "1" {
            return Ok(Term::constant());
        }
        if s.is_empty() {
            return Err(Error::config("empty term"));
        }
        let factors = split_top_level(&s)?
            .into_iter()
            .map(parse_factor)
            .collect::<Result<Vec<_>>>()?;
        Term::new(factors)
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Term, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One component of a (P, T) signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
    /// Mixed or unspecified; as a filter component it accepts anything.
    Any,
}

impl Sign {
    pub fn from_int(v: i64) -> Result<Sign> {
        match v {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            0 => Ok(Sign::Any),
            other => Err(Error::config(format!(
                "signature entries are -1, 0 or 1, got {other}"
            ))),
        }
    }

    pub fn to_int(self) -> i64 {
        match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
            Sign::Any => 0,
        }
    }

    fn of(p: Parity) -> Sign {
        match p {
            Parity::Even => Sign::Plus,
            Parity::Odd => Sign::Minus,
        }
    }

    fn mul(self, other: Sign) -> Sign {
        match (self, other) {
            (Sign::Any, _) | (_, Sign::Any) => Sign::Any,
            (a, b) if a == b => Sign::Plus,
            _ => Sign::Minus,
        }
    }

    fn pow(self, e: u32) -> Sign {
        (0..e).fold(Sign::Plus, |acc, _| acc.mul(self))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    pub p: Sign,
    pub t: Sign,
}

impl std::ops::Mul for Signature {
    type Output = Signature;

    fn mul(self, o: Signature) -> Signature {
        Signature {
            p: self.p.mul(o.p),
            t: self.t.mul(o.t),
        }
    }
}

impl Signature {
    pub const ANY: Signature = Signature {
        p: Sign::Any,
        t: Sign::Any,
    };

    pub fn new(p: i64, t: i64) -> Result<Signature> {
        Ok(Signature {
            p: Sign::from_int(p)?,
            t: Sign::from_int(t)?,
        })
    }

    /// Whether a term with signature `self` passes a filter asking for `want`.
    pub fn admits(self, want: Signature) -> bool {
        let ok = |have: Sign, w: Sign| w == Sign::Any || have == w;
        ok(self.p, want.p) && ok(self.t, want.t)
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: Sign| match v {
            Sign::Plus => "+",
            Sign::Minus => "-",
            Sign::Any => "0",
        };
        write!(f, "({},{})", s(self.p), s(self.t))
    }
}

/// Parities of each field, keyed by name.
pub type FieldParities = BTreeMap<String, (Option<Parity>, Option<Parity>)>;

pub fn parities_of(ds: &Dataset) -> FieldParities {
    ds.fields()
        .iter()
        .map(|f| (f.name().to_string(), (f.p_parity, f.t_parity)))
        .collect()
}

fn field_sign(parities: &FieldParities, name: &str) -> Result<Signature> {
    match parities.get(name) {
        Some((Some(p), Some(t))) => Ok(Signature {
            p: Sign::of(*p),
            t: Sign::of(*t),
        }),
        _ => Err(Error::config(format!("field {name} has no P/T parity set"))),
    }
}

pub fn signature(term: &Term, parities: &FieldParities) -> Result<Signature> {
    let mut sig = Signature {
        p: Sign::Plus,
        t: Sign::Plus,
    };
    for f in term.factors() {
        let s = match f {
            Factor::FieldPower { field, deriv, exp } => {
                let fs = field_sign(parities, field)?;
                let p = fs.p.mul(if deriv % 2 == 1 {
                    Sign::Minus
                } else {
                    Sign::Plus
                });
                Signature {
                    p: p.pow(*exp),
                    t: fs.t.pow(*exp),
                }
            }
            Factor::SpatialMonomial { exp, .. } => Signature {
                p: if exp % 2 == 1 {
                    Sign::Minus
                } else {
                    Sign::Plus
                },
                t: Sign::Plus,
            },
            Factor::SpecialSin { field, .. } | Factor::Nonlocal { field, .. } => {
                field_sign(parities, field)?
            }
            Factor::LogDeriv { field } => {
                field_sign(parities, field)?;
                Signature {
                    p: Sign::Minus,
                    t: Sign::Plus,
                }
            }
        };
        sig = sig * s;
    }
    Ok(sig)
}

/// Signature the right-hand side must carry for `∂t target`: the time
/// derivative flips T.
pub fn target_signature(target: &str, parities: &FieldParities) -> Result<Signature> {
    let s = field_sign(parities, target)?;
    Ok(Signature {
        p: s.p,
        t: s.t.mul(Sign::Minus),
    })
}

/// Ordered, duplicate-free candidate terms for `∂t target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub target: String,
    terms: Vec<Term>,
}

impl Library {
    pub fn new(target: &str, terms: Vec<Term>) -> Result<Library> {
        check_field_name(target)?;
        if terms.is_empty() {
            return Err(Error::config("library has no terms"));
        }
        let mut seen = BTreeSet::new();
        for t in &terms {
            if !seen.insert(t.clone()) {
                return Err(Error::config(format!("duplicate term {t} in library")));
            }
        }
        Ok(Library {
            target: target.to_string(),
            terms,
        })
    }

    pub fn from_strs<S: AsRef<str>>(target: &str, terms: &[S]) -> Result<Library> {
        let parsed = terms
            .iter()
            .map(|s| s.as_ref().parse())
            .collect::<Result<Vec<Term>>>()?;
        Library::new(target, parsed)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(Term::to_string).collect()
    }

    pub fn position(&self, term: &str) -> Option<usize> {
        let t: Term = term.parse().ok()?;
        self.terms.iter().position(|x| *x == t)
    }

    /// Appends terms not already present.
    pub fn extended(mut self, extra: impl IntoIterator<Item = Term>) -> Library {
        for t in extra {
            if !self.terms.contains(&t) {
                self.terms.push(t);
            }
        }
        self
    }
}

pub fn filter_by_signature(
    lib: &Library,
    want: Signature,
    parities: &FieldParities,
) -> Result<Library> {
    let mut kept = vec![];
    for t in lib.terms() {
        if want == Signature::ANY || signature(t, parities)?.admits(want) {
            kept.push(t.clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::config(format!(
            "signature filter {want} removed every term; widen the library or relax the filter"
        )));
    }
    Ok(Library {
        target: lib.target.clone(),
        terms: kept,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldBudget {
    pub name: String,
    pub max_power: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialExtra {
    pub offset: f64,
    pub max_power: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinExtra {
    pub field: String,
    #[serde(default = "default_max_period")]
    pub max_period: u32,
}

fn default_max_period() -> u32 {
    10
}

/// Budget for [`generate_terms`].
///
/// The core set is every field monomial within the power budget, times at
/// most one linear derivative factor `∂x^n f` (`1 ≤ n ≤ max_dx`, `f` any field
/// with a nonzero budget). Extras add `dlog(f)` times the monomials free of
/// `f`, bare and field-multiplied powers of `(x - offset)`, `sin(2π f/P)·f_x`
/// for `P = 1..=max_period`, and kernel terms `K[k] f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub fields: Vec<FieldBudget>,
    pub max_dx: u32,
    #[serde(default = "yes")]
    pub constant: bool,
    #[serde(default)]
    pub log_deriv: Vec<String>,
    #[serde(default)]
    pub spatial: Option<SpatialExtra>,
    #[serde(default)]
    pub special_sin: Option<SinExtra>,
    #[serde(default)]
    pub nonlocal: Vec<Kernel>,
}

fn yes() -> bool {
    true
}

pub fn generate_terms(target: &str, spec: &GenerateSpec) -> Result<Library> {
    if spec.max_dx > 4 {
        return Err(Error::config(format!("max_dx {} above 4", spec.max_dx)));
    }
    for b in &spec.fields {
        check_field_name(&b.name)?;
    }
    let estimate: u64 = spec
        .fields
        .iter()
        .map(|b| b.max_power as u64 + 1)
        .product::<u64>()
        * (1 + spec.max_dx as u64 * spec.fields.len() as u64)
        * (1 + spec.log_deriv.len() as u64);
    if estimate > 4 * MAX_TERMS as u64 {
        return Err(Error::config(format!(
            "budget would produce about {estimate} terms, above the {MAX_TERMS} limit"
        )));
    }
    let mut monomials: Vec<Term> = vec![Term::constant()];
    for b in &spec.fields {
        let mut next = vec![];
        for m in &monomials {
            for p in 0..=b.max_power {
                next.push(m.mul(&Term::new(vec![Factor::FieldPower {
                    field: b.name.clone(),
                    deriv: 0,
                    exp: p,
                }])?)?);
            }
        }
        monomials = next;
    }
    let mut derivs = vec![Term::constant()];
    for b in spec.fields.iter().filter(|b| b.max_power > 0) {
        for n in 1..=spec.max_dx {
            derivs.push(Term::new(vec![Factor::FieldPower {
                field: b.name.clone(),
                deriv: n,
                exp: 1,
            }])?);
        }
    }
    let mut set = BTreeSet::new();
    for m in &monomials {
        for d in &derivs {
            set.insert(m.mul(d)?);
        }
    }
    for f in &spec.log_deriv {
        let ld = Term::new(vec![Factor::LogDeriv { field: f.clone() }])?;
        for m in monomials
            .iter()
            .filter(|m| !m.fields().contains(f.as_str()))
        {
            set.insert(m.mul(&ld)?);
        }
    }
    if let Some(sp) = &spec.spatial {
        for k in 1..=sp.max_power {
            let xm = Term::new(vec![Factor::SpatialMonomial {
                offset: sp.offset,
                exp: k,
            }])?;
            set.insert(xm.clone());
            for b in spec.fields.iter().filter(|b| b.max_power > 0) {
                set.insert(xm.mul(&Term::new(vec![Factor::FieldPower {
                    field: b.name.clone(),
                    deriv: 0,
                    exp: 1,
                }])?)?);
            }
        }
    }
    if let Some(s) = &spec.special_sin {
        for p in 1..=s.max_period {
            set.insert(Term::new(vec![
                Factor::SpecialSin {
                    field: s.field.clone(),
                    period: p,
                },
                Factor::FieldPower {
                    field: s.field.clone(),
                    deriv: 1,
                    exp: 1,
                },
            ])?);
        }
    }
    for k in &spec.nonlocal {
        for b in spec.fields.iter().filter(|b| b.max_power > 0) {
            set.insert(Term::new(vec![Factor::Nonlocal {
                kernel: *k,
                field: b.name.clone(),
            }])?);
        }
    }
    if !spec.constant {
        set.remove(&Term::constant());
    }
    if set.len() > MAX_TERMS {
        return Err(Error::config(format!(
            "budget produces {} terms, above the {MAX_TERMS} limit",
            set.len()
        )));
    }
    let mut terms: Vec<Term> = set.into_iter().collect();
    terms.sort_by(Term::graded_cmp);
    Library::new(target, terms)
}

/// Numerical library for one regression.
#[derive(Clone, Debug)]
pub struct Evaluated {
    pub design: Design,
    /// `(time index, space index)` of each row.
    pub rows: Vec<(usize, usize)>,
    pub names: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub scheme: Scheme,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            scheme: Scheme::Central2,
        }
    }
}

/// Cells where the target time derivative and every spatial stencil of the
/// library are valid.
pub fn library_mask(lib: &Library, grid: &Grid, opts: EvalOptions) -> Array2<bool> {
    let mut specs = vec![DerivativeSpec::time(1)];
    let order = lib.terms().iter().map(Term::max_deriv).max().unwrap_or(0);
    if order > 0 {
        specs.push(DerivativeSpec::space(order, opts.scheme));
    }
    preprocess::trim_mask(grid, &specs)
}

/// Evaluates the library on `ds`. Rows are the cells where `mask` (if given)
/// and [`library_mask`] both hold, in row-major order.
pub fn evaluate(
    lib: &Library,
    ds: &Dataset,
    mask: Option<&Array2<bool>>,
    opts: EvalOptions,
) -> Result<Evaluated> {
    evaluate_with(lib, ds, mask, opts, Exec::default())
}

pub fn evaluate_with(
    lib: &Library,
    ds: &Dataset,
    mask: Option<&Array2<bool>>,
    opts: EvalOptions,
    exec: Exec,
) -> Result<Evaluated> {
    let grid = &ds.grid;
    let mut used: BTreeSet<&str> = lib.terms().iter().flat_map(|t| t.fields()).collect();
    used.insert(&lib.target);
    for name in &used {
        ds.field(name)?;
    }
    let complex = used
        .iter()
        .any(|n| ds.field(n).map(|f| f.is_complex()).unwrap_or(false));
    if lib.terms().iter().any(|t| t.nonlocal().is_some()) && !grid.periodic_x {
        return Err(Error::config("nonlocal kernel terms need a periodic grid"));
    }
    let mut m = library_mask(lib, grid, opts);
    if let Some(user) = mask {
        if user.dim() != m.dim() {
            return Err(Error::data(format!(
                "mask is {:?} but the grid is {:?}",
                user.dim(),
                m.dim()
            )));
        }
        m.zip_mut_with(user, |a, b| *a = *a && *b);
    }
    let rows: Vec<(usize, usize)> = m
        .indexed_iter()
        .filter(|(_, v)| **v)
        .map(|(ix, _)| ix)
        .collect();
    if rows.is_empty() {
        return Err(Error::data("mask leaves no rows to regress on"));
    }

    // every derivative and kernel image any term needs, computed once
    let mut needed: BTreeSet<(String, u32)> = BTreeSet::new();
    let mut kernels: Vec<(Kernel, String)> = vec![];
    for t in lib.terms() {
        for f in t.factors() {
            match f {
                Factor::FieldPower { field, deriv, .. } => {
                    needed.insert((field.clone(), *deriv));
                }
                Factor::LogDeriv { field } => {
                    needed.insert((field.clone(), 0));
                    needed.insert((field.clone(), 1));
                }
                Factor::SpecialSin { field, .. } => {
                    needed.insert((field.clone(), 0));
                }
                Factor::Nonlocal { kernel, field } => {
                    if !kernels.iter().any(|(k, f)| k == kernel && f == field) {
                        kernels.push((*kernel, field.clone()));
                    }
                }
                Factor::SpatialMonomial { .. } => {}
            }
        }
    }
    let mut derivs: HashMap<(String, u32), Array2<C64>> = HashMap::new();
    for (name, order) in needed {
        let v = ds.field(&name)?.values();
        let d = if order == 0 {
            v.clone()
        } else {
            preprocess::derivative_with(v, grid, DerivativeSpec::space(order, opts.scheme), exec)?
        };
        derivs.insert((name, order), d);
    }
    let mut kernel_images: Vec<((Kernel, String), Array2<C64>)> = vec![];
    for (k, name) in kernels {
        let axis = SpectralAxis::new(grid.nx, grid.dx);
        let symbol: Vec<C64> = axis
            .q()
            .iter()
            .map(|&q| C64::new(k.symbol(q), 0.0))
            .collect();
        let v = ds.field(&name)?.values();
        let mut out = Array2::zeros(v.dim());
        for i in 0..grid.nt {
            let mut buf = v.row(i).to_vec();
            axis.apply_multiplier(&mut buf, &symbol);
            for (j, b) in buf.into_iter().enumerate() {
                out[[i, j]] = b;
            }
        }
        kernel_images.push(((k, name), out));
    }
    let target_t = preprocess::derivative_with(
        ds.field(&lib.target)?.values(),
        grid,
        DerivativeSpec::time(1),
        exec,
    )?;

    let columns = par::map_range(exec, lib.len(), |c| -> Result<Vec<C64>> {
        let term = &lib.terms()[c];
        let mut col = vec![C64::new(1.0, 0.0); rows.len()];
        for f in term.factors() {
            match f {
                Factor::FieldPower { field, deriv, exp } => {
                    let a = &derivs[&(field.clone(), *deriv)];
                    for (v, &(i, j)) in col.iter_mut().zip(&rows) {
                        *v *= a[[i, j]].powu(*exp);
                    }
                }
                Factor::SpatialMonomial { offset, exp } => {
                    for (v, &(_, j)) in col.iter_mut().zip(&rows) {
                        *v *= (grid.x(j) - offset).powi(*exp as i32);
                    }
                }
                Factor::SpecialSin { field, period } => {
                    let a = &derivs[&(field.clone(), 0)];
                    let w = 2.0 * std::f64::consts::PI / *period as f64;
                    for (v, &(i, j)) in col.iter_mut().zip(&rows) {
                        *v *= (a[[i, j]] * w).sin();
                    }
                }
                Factor::LogDeriv { field } => {
                    let a = &derivs[&(field.clone(), 0)];
                    let ax = &derivs[&(field.clone(), 1)];
                    for (v, &(i, j)) in col.iter_mut().zip(&rows) {
                        *v *= ax[[i, j]] / a[[i, j]];
                    }
                }
                Factor::Nonlocal { kernel, field } => {
                    let a = &kernel_images
                        .iter()
                        .find(|((k, n), _)| k == kernel && n == field)
                        .expect("kernel image prepared")
                        .1;
                    for (v, &(i, j)) in col.iter_mut().zip(&rows) {
                        *v *= a[[i, j]];
                    }
                }
            }
        }
        if let Some(pos) = col
            .iter()
            .position(|v| !(v.re.is_finite() && v.im.is_finite()))
        {
            let (i, j) = rows[pos];
            return Err(Error::numerical(format!(
                "term {term} is not finite at row {i}, column {j}"
            )));
        }
        Ok(col)
    });
    let columns = columns.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    let design = if complex {
        let theta = DMatrix::from_fn(n, lib.len(), |r, c| columns[c][r]);
        let y = DVector::from_fn(n, |r, _| target_t[rows[r]]);
        Design::Complex { theta, y }
    } else {
        let theta = DMatrix::from_fn(n, lib.len(), |r, c| columns[c][r].re);
        let y = DVector::from_fn(n, |r, _| target_t[rows[r]].re);
        Design::Real { theta, y }
    };
    Ok(Evaluated {
        design,
        rows,
        names: lib.names(),
    })
}

/// Formats with four significant digits, plain decimal notation.
pub fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mut e = x.abs().log10().floor() as i32;
    if (x.abs() / 10f64.powi(e)).max(1.0) >= 9.9995 {
        e += 1;
    }
    if e >= 3 {
        let scale = 10f64.powi(e - 3);
        format!("{}", (x / scale).round() * scale)
    } else {
        format!("{:.*}", (3 - e) as usize, x)
    }
}

/// Renders `∂t target = Σ ξ_j term_j` with every term moved to the left.
/// When all kept coefficients are imaginary to within 1e-6 the equation is
/// multiplied through by `i`.
pub fn render(target: &str, terms: &[Term], coefficients: &[C64]) -> String {
    let kept: Vec<(&Term, C64)> = terms
        .iter()
        .zip(coefficients)
        .filter(|(_, c)| c.norm() >= 1e-12)
        .map(|(t, c)| (t, *c))
        .collect();
    if kept.is_empty() {
        return format!("{target}_t = 0");
    }
    let imaginary =
        kept.iter().all(|(_, c)| c.re.abs() <= 1e-6) && kept.iter().any(|(_, c)| c.im != 0.0);
    let real = kept.iter().all(|(_, c)| c.im == 0.0);
    let mut out = if imaginary {
        format!("i*{target}_t")
    } else {
        format!("{target}_t")
    };
    for (t, c) in kept {
        let (sign, body) = if imaginary || real {
            let v = if imaginary { c.im } else { -c.re };
            (if v < 0.0 { "-" } else { "+" }, sig4(v.abs()))
        } else {
            let v = -c;
            let im = if v.im < 0.0 {
                format!("-{}i", sig4(-v.im))
            } else {
                format!("+{}i", sig4(v.im))
            };
            ("+", format!("({}{im})", sig4(v.re)))
        };
        if t.is_constant() {
            out.push_str(&format!(" {sign} {body}"));
        } else {
            out.push_str(&format!(" {sign} {body}*{t}"));
        }
    }
    out.push_str(" = 0");
    out
}
