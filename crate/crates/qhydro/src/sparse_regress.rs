//! L0-penalised sparse regression over library columns.
//!
//! The objective of a subset `S` is `‖y − Θ_S ξ‖₂ + λ0·|S|` with the
//! unsquared norm. Every solver first compresses `[Θ | y]` to its
//! `(M+1)×(M+1)` triangular factor, so subset fits cost `O(M²)` no matter how
//! many rows the library has. With `λ2 > 0` the subset fits use the ridge
//! system `[R_S; √λ2·I] ξ ≈ [r_y; 0]`; the returned coefficients are always
//! refitted by plain least squares on the chosen subset.

use std::cmp::Ordering;

use nalgebra::{ComplexField, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_store::C64;
use crate::par::{self, Exec};

/// Library matrix and target, real or complex.
#[derive(Clone, Debug, PartialEq)]
pub enum Design {
    Real {
        theta: DMatrix<f64>,
        y: DVector<f64>,
    },
    Complex {
        theta: DMatrix<C64>,
        y: DVector<C64>,
    },
}

impl Design {
    pub fn nrows(&self) -> usize {
        match self {
            Design::Real { theta, .. } => theta.nrows(),
            Design::Complex { theta, .. } => theta.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Design::Real { theta, .. } => theta.ncols(),
            Design::Complex { theta, .. } => theta.ncols(),
        }
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Design::Complex { .. })
    }

    pub fn target_norm(&self) -> f64 {
        match self {
            Design::Real { y, .. } => y.norm(),
            Design::Complex { y, .. } => y.norm(),
        }
    }

    /// Rows `idx` only.
    pub fn select_rows(&self, idx: &[usize]) -> Design {
        match self {
            Design::Real { theta, y } => Design::Real {
                theta: theta.select_rows(idx),
                y: y.select_rows(idx),
            },
            Design::Complex { theta, y } => Design::Complex {
                theta: theta.select_rows(idx),
                y: y.select_rows(idx),
            },
        }
    }

    /// Columns `cols` only.
    pub fn select_columns(&self, cols: &[usize]) -> Design {
        match self {
            Design::Real { theta, y } => Design::Real {
                theta: theta.select_columns(cols),
                y: y.clone(),
            },
            Design::Complex { theta, y } => Design::Complex {
                theta: theta.select_columns(cols),
                y: y.clone(),
            },
        }
    }

    /// `‖y − Θξ‖₂` for a full-length coefficient vector.
    pub fn residual(&self, xi: &[C64]) -> f64 {
        match self {
            Design::Real { theta, y } => {
                let x = DVector::from_iterator(xi.len(), xi.iter().map(|c| c.re));
                (y - theta * x).norm()
            }
            Design::Complex { theta, y } => {
                let x = DVector::from_column_slice(xi);
                (y - theta * x).norm()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    pub design: Design,
    pub names: Vec<String>,
    pub lambda0: f64,
    pub lambda2: f64,
    pub normalize_columns: bool,
}

impl RegressionProblem {
    pub fn new(design: Design, names: Vec<String>) -> RegressionProblem {
        RegressionProblem {
            design,
            names,
            lambda0: 0.0,
            lambda2: 0.0,
            normalize_columns: true,
        }
    }

    pub fn with_lambda0(mut self, l: f64) -> Self {
        self.lambda0 = l;
        self
    }

    pub fn with_lambda2(mut self, l: f64) -> Self {
        self.lambda2 = l;
        self
    }

    pub fn with_normalization(mut self, on: bool) -> Self {
        self.normalize_columns = on;
        self
    }

    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }

    fn validate(&self) -> Result<()> {
        let m = self.design.ncols();
        if m == 0 {
            return Err(Error::config(
                "regression needs at least one library column",
            ));
        }
        if self.names.len() != m {
            return Err(Error::config(format!(
                "{} names for {m} columns",
                self.names.len()
            )));
        }
        if !(self.lambda0 >= 0.0)
            || !(self.lambda2 >= 0.0)
            || !self.lambda0.is_finite()
            || !self.lambda2.is_finite()
        {
            return Err(Error::config(
                "lambda0 and lambda2 must be finite and non-negative",
            ));
        }
        if self.design.nrows() == 0 {
            return Err(Error::data("regression has no rows"));
        }
        Ok(())
    }
}

/// A sparse model: coefficients are zero outside `active`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveredPDE {
    pub active: Vec<usize>,
    pub coefficients: Vec<C64>,
    pub residual: f64,
    pub objective: f64,
    pub lambda0: f64,
    pub flags: Vec<String>,
}

impl DiscoveredPDE {
    pub fn coefficient(&self, j: usize) -> C64 {
        self.coefficients[j]
    }

    pub fn record(&self, names: &[String]) -> PdeRecord {
        PdeRecord {
            lambda0: self.lambda0,
            active_terms: self.active.iter().map(|&j| names[j].clone()).collect(),
            coefficients: self
                .active
                .iter()
                .map(|&j| [self.coefficients[j].re, self.coefficients[j].im])
                .collect(),
            residual: self.residual,
            objective: self.objective,
            flags: self.flags.clone(),
        }
    }
}

/// JSON form of a [`DiscoveredPDE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeRecord {
    pub lambda0: f64,
    pub active_terms: Vec<String>,
    pub coefficients: Vec<[f64; 2]>,
    pub residual: f64,
    pub objective: f64,
    pub flags: Vec<String>,
}

trait Scalar: ComplexField<RealField = f64> + Copy + Send + Sync {
    fn to_c64(self) -> C64;
}

impl Scalar for f64 {
    fn to_c64(self) -> C64 {
        C64::new(self, 0.0)
    }
}

impl Scalar for C64 {
    fn to_c64(self) -> C64 {
        self
    }
}

const RANK_TOL: f64 = 1e-12;
const CHUNK: usize = 4096;

/// `[R_Θ | r_y]` of the normalised design plus the scale factors.
#[derive(Clone, Debug)]
struct Compressed<T: Scalar> {
    m: usize,
    /// `(M+1)×(M+1)` upper-triangular factor of `[Θ/n | y]`
    r: DMatrix<T>,
    norms: Vec<f64>,
    lambda2: f64,
}

fn qr_r<T: Scalar>(block: DMatrix<T>, width: usize) -> DMatrix<T> {
    let r = block.qr().r();
    // pad short blocks so every factor is width×width
    let mut out = DMatrix::<T>::zeros(width, width);
    out.view_mut((0, 0), (r.nrows(), width)).copy_from(&r);
    out
}

impl<T: Scalar> Compressed<T> {
    fn new(
        theta: &DMatrix<T>,
        y: &DVector<T>,
        normalize: bool,
        lambda2: f64,
        exec: Exec,
    ) -> Compressed<T> {
        let (n, m) = theta.shape();
        let norms: Vec<f64> = (0..m)
            .map(|j| {
                let v = theta.column(j).norm();
                if normalize && v > 0.0 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        let chunks = n.div_ceil(CHUNK);
        let parts = par::map_range(exec, chunks, |c| {
            let r0 = c * CHUNK;
            let rows = CHUNK.min(n - r0);
            let block = DMatrix::from_fn(rows, m + 1, |i, j| {
                if j < m {
                    theta[(r0 + i, j)].unscale(norms[j])
                } else {
                    y[r0 + i]
                }
            });
            qr_r(block, m + 1)
        });
        let mut acc: Option<DMatrix<T>> = None;
        for p in parts {
            acc = Some(match acc {
                None => p,
                Some(a) => {
                    let mut stacked = DMatrix::<T>::zeros(2 * (m + 1), m + 1);
                    stacked.view_mut((0, 0), (m + 1, m + 1)).copy_from(&a);
                    stacked.view_mut((m + 1, 0), (m + 1, m + 1)).copy_from(&p);
                    qr_r(stacked, m + 1)
                }
            });
        }
        Compressed {
            m,
            r: acc.expect("at least one row"),
            norms,
            lambda2,
        }
    }

    fn dim(&self) -> usize {
        if self.lambda2 > 0.0 {
            2 * self.m + 1
        } else {
            self.m + 1
        }
    }

    /// Column `j` of the (possibly ridge-augmented) compressed system.
    fn column(&self, j: usize) -> DVector<T> {
        let mut v = DVector::<T>::zeros(self.dim());
        v.rows_mut(0, self.m + 1).copy_from(&self.r.column(j));
        if self.lambda2 > 0.0 {
            v[self.m + 1 + j] = T::from_real(self.lambda2.sqrt());
        }
        v
    }

    fn target(&self) -> DVector<T> {
        let mut v = DVector::<T>::zeros(self.dim());
        v.rows_mut(0, self.m + 1).copy_from(&self.r.column(self.m));
        v
    }

    fn y_norm(&self) -> f64 {
        self.r.column(self.m).norm()
    }

    /// Residual of the (ridge) fit on `subset`, or `None` when the columns are
    /// numerically dependent.
    fn subset_residual(&self, subset: &[usize]) -> Option<f64> {
        if subset.is_empty() {
            return Some(self.y_norm());
        }
        let mut basis = Basis::new(self.target());
        for &j in subset {
            basis = basis.push(self.column(j))?;
        }
        Some(basis.residual())
    }

    /// Least squares on the normalised columns of `subset` with ridge
    /// weight `lambda2`; `None` if rank deficient.
    fn solve(&self, subset: &[usize], lambda2: f64) -> Option<Vec<T>> {
        let k = subset.len();
        if k == 0 {
            return Some(vec![]);
        }
        let extra = if lambda2 > 0.0 { k } else { 0 };
        let rows = self.m + 1 + extra;
        let mut a = DMatrix::<T>::zeros(rows, k);
        let mut b = DVector::<T>::zeros(rows);
        for (c, &j) in subset.iter().enumerate() {
            a.view_mut((0, c), (self.m + 1, 1))
                .copy_from(&self.r.column(j));
            if extra > 0 {
                a[(self.m + 1 + c, c)] = T::from_real(lambda2.sqrt());
            }
        }
        b.rows_mut(0, self.m + 1).copy_from(&self.r.column(self.m));
        solve_qr(a, b)
    }

    /// Plain least-squares refit on `subset`, falling back to ridge when
    /// the columns are dependent. Coefficients are in raw column units.
    fn refit(&self, subset: &[usize], lambda0: f64) -> DiscoveredPDE {
        let mut flags = vec![];
        let xi_n = match self.solve(subset, 0.0) {
            Some(x) => x,
            None => {
                flags.push("ridge_refit".to_string());
                self.solve(subset, self.lambda2.max(1e-12))
                    .expect("ridge system has full rank")
            }
        };
        let mut coefficients = vec![C64::new(0.0, 0.0); self.m];
        let mut fit = self.r.column(self.m).clone_owned();
        for (c, &j) in subset.iter().enumerate() {
            coefficients[j] = xi_n[c].to_c64() / self.norms[j];
            fit -= self.r.column(j) * xi_n[c];
        }
        let residual = fit.norm();
        DiscoveredPDE {
            active: subset.to_vec(),
            coefficients,
            residual,
            objective: residual + lambda0 * subset.len() as f64,
            lambda0,
            flags,
        }
    }
}

fn solve_qr<T: Scalar>(a: DMatrix<T>, b: DVector<T>) -> Option<Vec<T>> {
    let k = a.ncols();
    let qr = a.qr();
    let r = qr.r();
    let scale = (0..k).map(|i| r[(i, i)].modulus()).fold(0.0, f64::max);
    if scale == 0.0 || (0..k).any(|i| r[(i, i)].modulus() <= RANK_TOL * scale) {
        return None;
    }
    let mut qtb = b;
    qr.q_tr_mul(&mut qtb);
    let rhs = qtb.rows(0, k).clone_owned();
    let x = r.solve_upper_triangular(&rhs)?;
    Some(x.iter().copied().collect())
}

/// Orthonormal basis of the chosen columns and the target's residual.
#[derive(Clone)]
struct Basis<T: Scalar> {
    q: Vec<DVector<T>>,
    r: DVector<T>,
}

impl<T: Scalar> Basis<T> {
    fn new(target: DVector<T>) -> Self {
        Basis {
            q: vec![],
            r: target,
        }
    }

    fn push(&self, col: DVector<T>) -> Option<Basis<T>> {
        let scale = col.norm();
        if scale == 0.0 {
            return None;
        }
        let mut w = col;
        for _ in 0..2 {
            for q in &self.q {
                let c = q.dotc(&w);
                w.axpy(-c, q, T::one());
            }
        }
        let nw = w.norm();
        if nw <= RANK_TOL * scale {
            return None;
        }
        w.unscale_mut(nw);
        let c = w.dotc(&self.r);
        let mut r = self.r.clone();
        r.axpy(-c, &w, T::one());
        let mut q = self.q.clone();
        q.push(w);
        Some(Basis { q, r })
    }

    fn residual(&self) -> f64 {
        self.r.norm()
    }
}

/// `(residual, subset)` ordering: smaller residual, then smaller set, then
/// lexicographically smaller indices.
fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Less) => true,
        Some(Ordering::Greater) => false,
        _ => (a.1.len(), a.1) < (b.1.len(), b.1),
    }
}

/// Best subset of each size.
#[derive(Clone, Debug)]
struct PerSize(Vec<Option<(f64, Vec<usize>)>>);

impl PerSize {
    fn new(m: usize) -> Self {
        PerSize(vec![None; m + 1])
    }

    fn offer(&mut self, res: f64, subset: &[usize]) {
        let slot = &mut self.0[subset.len()];
        let replace = match slot {
            None => true,
            Some((r, s)) => better((res, subset), (*r, s)),
        };
        if replace {
            *slot = Some((res, subset.to_vec()));
        }
    }

    fn merge(&mut self, other: PerSize) {
        for (res, s) in other.0.into_iter().flatten() {
            self.offer(res, &s);
        }
    }

    /// Minimiser of `residual + λ0·k` with ties to the smaller `k`.
    fn pick(&self, lambda0: f64) -> &[usize] {
        let mut best: Option<(f64, &[usize])> = None;
        for (res, s) in self.0.iter().flatten() {
            let obj = res + lambda0 * s.len() as f64;
            if best.is_none_or(|(b, bs)| {
                obj < b || (obj == b && (s.len(), s.as_slice()) < (bs.len(), bs))
            }) {
                best = Some((obj, s));
            }
        }
        best.map(|(_, s)| s).unwrap_or(&[])
    }
}

pub const BRUTE_FORCE_MAX_TERMS: usize = 25;

fn enumerate<T: Scalar>(c: &Compressed<T>, exec: Exec) -> PerSize {
    let m = c.m;
    let cols: Vec<DVector<T>> = (0..m).map(|j| c.column(j)).collect();
    let p = m.min(6);
    let tasks = par::map_range(exec, 1 << p, |pattern| {
        let mut best = PerSize::new(m);
        let mut basis = Basis::new(c.target());
        let mut subset = vec![];
        for (j, col) in cols.iter().enumerate().take(p) {
            if pattern & (1 << j) != 0 {
                match basis.push(col.clone()) {
                    Some(b) => basis = b,
                    None => return best,
                }
                subset.push(j);
            }
        }
        dfs(&cols, p, &basis, &mut subset, &mut best);
        best
    });
    let mut all = PerSize::new(m);
    for t in tasks {
        all.merge(t);
    }
    all
}

fn dfs<T: Scalar>(
    cols: &[DVector<T>],
    start: usize,
    basis: &Basis<T>,
    subset: &mut Vec<usize>,
    best: &mut PerSize,
) {
    best.offer(basis.residual(), subset);
    for j in start..cols.len() {
        if let Some(b) = basis.push(cols[j].clone()) {
            subset.push(j);
            dfs(cols, j + 1, &b, subset, best);
            subset.pop();
        }
    }
}

enum Prepared {
    Real(Compressed<f64>),
    Complex(Compressed<C64>),
}

macro_rules! with_compressed {
    ($p:expr, $c:ident => $body:expr) => {
        match $p {
            Prepared::Real($c) => $body,
            Prepared::Complex($c) => $body,
        }
    };
}

impl Prepared {
    fn new(problem: &RegressionProblem, exec: Exec) -> Result<Prepared> {
        problem.validate()?;
        let (n, l2, norm) = (
            problem.design.nrows(),
            problem.lambda2,
            problem.normalize_columns,
        );
        let _ = n;
        Ok(match &problem.design {
            Design::Real { theta, y } => Prepared::Real(Compressed::new(theta, y, norm, l2, exec)),
            Design::Complex { theta, y } => {
                Prepared::Complex(Compressed::new(theta, y, norm, l2, exec))
            }
        })
    }

    fn m(&self) -> usize {
        with_compressed!(self, c => c.m)
    }

    fn subset_residual(&self, s: &[usize]) -> Option<f64> {
        with_compressed!(self, c => c.subset_residual(s))
    }

    fn refit(&self, s: &[usize], lambda0: f64, rows: usize) -> Result<DiscoveredPDE> {
        if s.len() > rows {
            return Err(Error::data(format!(
                "{} active terms but only {rows} rows",
                s.len()
            )));
        }
        Ok(with_compressed!(self, c => c.refit(s, lambda0)))
    }

    fn enumerate(&self, exec: Exec) -> Result<PerSize> {
        let m = self.m();
        if m > BRUTE_FORCE_MAX_TERMS {
            return Err(Error::config(format!(
                "brute force is limited to {BRUTE_FORCE_MAX_TERMS} terms, the library has {m}; use cross_entropy"
            )));
        }
        Ok(with_compressed!(self, c => enumerate(c, exec)))
    }

    /// Normalised ridge coefficients on `s`.
    fn ridge(&self, s: &[usize], lambda2: f64) -> Option<Vec<C64>> {
        with_compressed!(self, c => c.solve(s, lambda2).map(|v| v.into_iter().map(Scalar::to_c64).collect()))
    }
}

/// Coefficients minimising `‖y − Θ_S ξ‖² + λ2‖ξ‖²` in raw column units,
/// solved by QR of the (augmented) restricted matrix.
pub fn least_squares(design: &Design, subset: &[usize], lambda2: f64) -> Result<Vec<C64>> {
    if subset.is_empty() {
        return Err(Error::config("least squares needs a nonempty subset"));
    }
    if subset.len() > design.nrows() + if lambda2 > 0.0 { subset.len() } else { 0 } {
        return Err(Error::data(format!(
            "{} unknowns but {} rows",
            subset.len(),
            design.nrows()
        )));
    }
    fn go<T: Scalar>(theta: &DMatrix<T>, y: &DVector<T>, s: &[usize], l2: f64) -> Option<Vec<C64>> {
        let n = theta.nrows();
        let k = s.len();
        let extra = if l2 > 0.0 { k } else { 0 };
        let mut a = DMatrix::<T>::zeros(n + extra, k);
        let mut b = DVector::<T>::zeros(n + extra);
        for (c, &j) in s.iter().enumerate() {
            a.view_mut((0, c), (n, 1)).copy_from(&theta.column(j));
            if extra > 0 {
                a[(n + c, c)] = T::from_real(l2.sqrt());
            }
        }
        b.rows_mut(0, n).copy_from(y);
        solve_qr(a, b).map(|v| v.into_iter().map(Scalar::to_c64).collect())
    }
    let out = match design {
        Design::Real { theta, y } => go(theta, y, subset, lambda2),
        Design::Complex { theta, y } => go(theta, y, subset, lambda2),
    };
    out.ok_or_else(|| {
        Error::numerical("restricted library is rank deficient; a small ridge weight such as lambda2 = 1e-12 fixes this")
    })
}

/// Exact minimiser of the objective over all `2^M` subsets.
pub fn brute_force(problem: &RegressionProblem) -> Result<DiscoveredPDE> {
    brute_force_with(problem, Exec::default())
}

pub fn brute_force_with(problem: &RegressionProblem, exec: Exec) -> Result<DiscoveredPDE> {
    let prep = Prepared::new(problem, exec)?;
    let best = prep.enumerate(exec)?;
    let s = best.pick(problem.lambda0).to_vec();
    prep.refit(&s, problem.lambda0, problem.design.nrows())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Probabilities `exp(W_i)/Σ exp(W_j)`, at most one expected term per draw.
    Softmax,
    /// Independent probabilities `1/(1 + exp(−W_i))`.
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemHyper {
    pub batch_size: usize,
    pub num_rollouts: usize,
    pub elite_frac: f64,
    pub niter: usize,
    pub sigma0: f64,
    pub seed: u64,
    pub policy: Policy,
}

impl Default for CemHyper {
    fn default() -> Self {
        CemHyper {
            batch_size: 100,
            num_rollouts: 100,
            elite_frac: 0.01,
            niter: 20,
            sigma0: 1.0,
            seed: 0,
            policy: Policy::Softmax,
        }
    }
}

fn probabilities(w: &[f64], policy: Policy) -> Vec<f64> {
    match policy {
        Policy::Softmax => {
            let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = w.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        Policy::Sigmoid => w.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
    }
}

#[derive(Clone, Debug)]
struct Draw {
    objective: f64,
    subset: Vec<usize>,
}

impl Draw {
    fn beats(&self, other: &Draw) -> bool {
        better(
            (self.objective, &self.subset),
            (other.objective, &other.subset),
        )
    }
}

fn rollouts(
    prep: &Prepared,
    w: &[f64],
    hyper: &CemHyper,
    lambda0: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Draw> {
    let p = probabilities(w, hyper.policy);
    let mut best: Option<Draw> = None;
    for _ in 0..hyper.num_rollouts {
        let subset: Vec<usize> = p
            .iter()
            .enumerate()
            .filter_map(|(i, &pi)| (rng.random::<f64>() < pi).then_some(i))
            .collect();
        let Some(res) = prep.subset_residual(&subset) else {
            continue;
        };
        let d = Draw {
            objective: res + lambda0 * subset.len() as f64,
            subset,
        };
        if best.as_ref().is_none_or(|b| d.beats(b)) {
            best = Some(d);
        }
    }
    best
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Cross-entropy search over subsets. Reports the best subset seen in any
/// rollout; bit-reproducible for a fixed seed on both execution paths.
pub fn cross_entropy(problem: &RegressionProblem, hyper: &CemHyper) -> Result<DiscoveredPDE> {
    cross_entropy_with(problem, hyper, Exec::default())
}

pub fn cross_entropy_with(
    problem: &RegressionProblem,
    hyper: &CemHyper,
    exec: Exec,
) -> Result<DiscoveredPDE> {
    if hyper.batch_size == 0
        || hyper.num_rollouts == 0
        || !(hyper.elite_frac > 0.0 && hyper.elite_frac <= 1.0)
    {
        return Err(Error::config(
            "cross_entropy needs batch_size, num_rollouts > 0 and elite_frac in (0, 1]",
        ));
    }
    let prep = Prepared::new(problem, exec)?;
    let m = prep.m();
    let lambda0 = problem.lambda0;
    let mut w = vec![0.0; m];
    let mut sigma = vec![hyper.sigma0; m];
    let empty = Draw {
        objective: prep.subset_residual(&[]).unwrap_or(f64::INFINITY),
        subset: vec![],
    };
    let mut best_ever = empty;
    let n_elite =
        ((hyper.elite_frac * hyper.batch_size as f64).round() as usize).clamp(1, hyper.batch_size);
    let streams = hyper.batch_size as u64 + 1;
    for iter in 0..hyper.niter {
        let members = par::map_range(exec, hyper.batch_size, |b| {
            let mut rng = stream_rng(hyper.seed, iter as u64 * streams + b as u64);
            let wb: Vec<f64> = (0..m)
                .map(|i| w[i] + sigma[i] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let draw = rollouts(&prep, &wb, hyper, lambda0, &mut rng);
            (wb, draw)
        });
        let mut order: Vec<usize> = (0..members.len()).collect();
        let loss = |b: usize| members[b].1.as_ref().map_or(f64::INFINITY, |d| d.objective);
        order.sort_by(|&a, &b| loss(a).total_cmp(&loss(b)).then(a.cmp(&b)));
        for (_, d) in &members {
            if let Some(d) = d {
                if d.beats(&best_ever) {
                    best_ever = d.clone();
                }
            }
        }
        let elite = &order[..n_elite];
        for i in 0..m {
            let mean = elite.iter().map(|&b| members[b].0[i]).sum::<f64>() / n_elite as f64;
            let var = elite
                .iter()
                .map(|&b| (members[b].0[i] - mean).powi(2))
                .sum::<f64>()
                / n_elite as f64;
            w[i] = mean;
            sigma[i] = var.sqrt();
        }
    }
    let mut rng = stream_rng(
        hyper.seed,
        hyper.niter as u64 * streams + hyper.batch_size as u64,
    );
    if let Some(d) = rollouts(&prep, &w, hyper, lambda0, &mut rng) {
        if d.beats(&best_ever) {
            best_ever = d;
        }
    }
    prep.refit(&best_ever.subset, lambda0, problem.design.nrows())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StridgeOptions {
    /// Thresholds on normalised coefficients; empty means an automatic
    /// geometric grid spanning six decades below the largest coefficient.
    pub tolerances: Vec<f64>,
    pub max_iter: usize,
}

impl Default for StridgeOptions {
    fn default() -> Self {
        StridgeOptions {
            tolerances: vec![],
            max_iter: 25,
        }
    }
}

/// Sequential thresholded ridge regression scanned over a tolerance grid.
pub fn stridge(problem: &RegressionProblem, opts: &StridgeOptions) -> Result<DiscoveredPDE> {
    let prep = Prepared::new(problem, Exec::default())?;
    let m = prep.m();
    let all: Vec<usize> = (0..m).collect();
    let l2 = problem.lambda2.max(1e-12);
    let full = prep
        .ridge(&all, l2)
        .ok_or_else(|| Error::numerical("ridge system on the full library failed"))?;
    let tols = if opts.tolerances.is_empty() {
        let top = full.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let mut t: Vec<f64> = (0..=30)
            .map(|k| top * 10f64.powf(-6.0 + 6.0 * k as f64 / 30.0))
            .collect();
        t.insert(0, 0.0);
        t
    } else {
        opts.tolerances.clone()
    };
    let mut best: Option<Draw> = None;
    for tol in tols {
        let mut active = all.clone();
        let mut xi = full.clone();
        for _ in 0..opts.max_iter {
            let keep: Vec<usize> = active
                .iter()
                .zip(&xi)
                .filter(|(_, c)| c.norm() >= tol)
                .map(|(j, _)| *j)
                .collect();
            if keep == active {
                break;
            }
            active = keep;
            if active.is_empty() {
                break;
            }
            xi = prep
                .ridge(&active, l2)
                .ok_or_else(|| Error::numerical("ridge solve failed"))?;
        }
        let Some(res) = prep.subset_residual(&active) else {
            continue;
        };
        let d = Draw {
            objective: res + problem.lambda0 * active.len() as f64,
            subset: active,
        };
        if best.as_ref().is_none_or(|b| d.beats(b)) {
            best = Some(d);
        }
    }
    let best = best.ok_or_else(|| Error::numerical("no tolerance gave a full-rank active set"))?;
    prep.refit(&best.subset, problem.lambda0, problem.design.nrows())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Solver {
    BruteForce,
    CrossEntropy {
        #[serde(default)]
        hyper: CemHyper,
    },
    Stridge {
        #[serde(default)]
        options: StridgeOptions,
    },
}

pub fn solve(problem: &RegressionProblem, solver: &Solver) -> Result<DiscoveredPDE> {
    match solver {
        Solver::BruteForce => brute_force(problem),
        Solver::CrossEntropy { hyper } => cross_entropy(problem, hyper),
        Solver::Stridge { options } => stridge(problem, options),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontierEntry {
    pub lambda0: f64,
    pub pde: DiscoveredPDE,
}

/// Distinct models along a descending λ0 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Frontier {
    pub entries: Vec<FrontierEntry>,
}

impl Frontier {
    pub fn records(&self, names: &[String]) -> Vec<PdeRecord> {
        self.entries.iter().map(|e| e.pde.record(names)).collect()
    }

    /// Entry with exactly `k` active terms, if the scan produced one.
    pub fn with_terms(&self, k: usize) -> Option<&FrontierEntry> {
        self.entries.iter().find(|e| e.pde.active.len() == k)
    }
}

/// `n` logarithmic points per decade from `hi` down to `lo`, inclusive.
pub fn lambda_grid(hi: f64, lo: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let n = (decades * per_decade as f64).round() as usize;
    (0..=n)
        .map(|k| hi * 10f64.powf(-(k as f64) / per_decade as f64))
        .collect()
}

pub const OVERFIT_DROP: f64 = 0.01;

/// One model per λ0, adjacent repeats merged (the entry keeps its largest
/// λ0). Entries improving the residual of the previous entry by less than
/// 1% carry the `potential_overfit` flag.
pub fn frontier_scan(
    problem: &RegressionProblem,
    lambdas: &[f64],
    solver: &Solver,
) -> Result<Frontier> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::config("lambda0 grid must be nonempty and positive"));
    }
    if lambdas.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::config(
            "lambda0 grid must be sorted in descending order",
        ));
    }
    let exec = Exec::default();
    let pdes: Vec<DiscoveredPDE> = match solver {
        Solver::BruteForce => {
            let prep = Prepared::new(problem, exec)?;
            let best = prep.enumerate(exec)?;
            lambdas
                .iter()
                .map(|&l| prep.refit(best.pick(l), l, problem.design.nrows()))
                .collect::<Result<_>>()?
        }
        _ => lambdas
            .iter()
            .map(|&l| solve(&problem.clone().with_lambda0(l), solver))
            .collect::<Result<_>>()?,
    };
    let mut entries: Vec<FrontierEntry> = vec![];
    for (l, pde) in lambdas.iter().zip(pdes) {
        if entries.last().is_some_and(|e| e.pde.active == pde.active) {
            continue;
        }
        let mut pde = pde;
        if let Some(prev) = entries.last() {
            if prev.pde.residual - pde.residual < OVERFIT_DROP * prev.pde.residual {
                pde.flags.push("potential_overfit".into());
            }
        }
        entries.push(FrontierEntry { lambda0: *l, pde });
    }
    Ok(Frontier { entries })
}

/// Element-wise standard deviation of the coefficients over `k_batches`
/// random equal row batches.
pub fn batch_uncertainty(
    problem: &RegressionProblem,
    active: &[usize],
    k_batches: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = problem.design.nrows();
    if active.is_empty() || k_batches < 2 {
        return Err(Error::config(
            "batch uncertainty needs an active set and at least two batches",
        ));
    }
    if n < 10 * active.len() || n / k_batches < active.len() {
        return Err(Error::data(format!(
            "{n} rows are too few for {} coefficients in {k_batches} batches",
            active.len()
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let size = n / k_batches;
    let sub = problem.design.select_columns(active);
    let all: Vec<usize> = (0..active.len()).collect();
    let fits = par::map_range(Exec::default(), k_batches, |b| {
        let mut rows = idx[b * size..(b + 1) * size].to_vec();
        rows.sort_unstable();
        least_squares(&sub.select_rows(&rows), &all, problem.lambda2)
    });
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..active.len())
        .map(|c| {
            let mean = fits.iter().map(|f| f[c]).sum::<C64>() / k_batches as f64;
            (fits.iter().map(|f| (f[c] - mean).norm_sqr()).sum::<f64>() / k_batches as f64).sqrt()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MuRefinement {
    pub mu: f64,
    pub pde: DiscoveredPDE,
    pub non_unimodal: bool,
    pub iterations: usize,
}

const MU_TOL: f64 = 1e-3;
const MU_SAMPLES: usize = 81;
const MU_STARTS: usize = 9;

/// Infinite where the set is numerically dependent, e.g. where `|q|^μ`
/// coincides with a fixed `q²` column.
fn fixed_set_residual(problem: &RegressionProblem, active: &[usize]) -> Result<f64> {
    let prep = Prepared::new(problem, Exec::default())?;
    let fit = prep.refit(active, 0.0, problem.design.nrows())?;
    Ok(if fit.flags.iter().any(|f| f == "ridge_refit") {
        f64::INFINITY
    } else {
        fit.residual
    })
}

fn golden<F: FnMut(f64) -> Result<f64>>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Alternates sparse selection at fixed μ with a golden-section search of
/// the fixed-set residual over μ, until μ moves by less than 1e-3.
///
/// `build(μ)` must return the regression problem with the `|q|^μ` column at
/// index `kernel`. The first selection is the lowest-objective one among 9
/// evenly spaced μ in the bracket. Before each line search the residual is
/// sampled at 81 points of the bracket; more than one local minimum stops
/// the iteration at the best sample with `non_unimodal` set.
pub fn refine_mu<F>(
    build: F,
    kernel: usize,
    bracket: (f64, f64),
    solver: &Solver,
) -> Result<MuRefinement>
where
    F: Fn(f64) -> Result<RegressionProblem> + Sync,
{
    let (lo, hi) = bracket;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!("bad mu bracket ({lo}, {hi})")));
    }
    let starts: Vec<f64> = (0..MU_STARTS)
        .map(|k| lo + (hi - lo) * k as f64 / (MU_STARTS - 1) as f64)
        .collect();
    // prefer starts whose selection uses the kernel at all
    let mut mu = starts[0];
    let mut best_start = (true, f64::INFINITY);
    for &m in &starts {
        let pde = solve(&build(m)?, solver)?;
        let key = (!pde.active.contains(&kernel), pde.objective);
        if (!key.0 && best_start.0) || (key.0 == best_start.0 && key.1 < best_start.1) {
            best_start = key;
            mu = m;
        }
    }
    for iteration in 1..=20 {
        let pde = solve(&build(mu)?, solver)?;
        if !pde.active.contains(&kernel) {
            let mut pde = pde;
            pde.flags.push("kernel_not_selected".into());
            return Ok(MuRefinement {
                mu,
                pde,
                non_unimodal: false,
                iterations: iteration,
            });
        }
        let active = pde.active.clone();
        let grid: Vec<f64> = (0..MU_SAMPLES)
            .map(|k| lo + (hi - lo) * k as f64 / (MU_SAMPLES - 1) as f64)
            .collect();
        let samples = par::map_range(Exec::default(), MU_SAMPLES, |k| {
            fixed_set_residual(&build(grid[k])?, &active)
        });
        let samples = samples.into_iter().collect::<Result<Vec<f64>>>()?;
        let finite: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
        let minima = (0..finite.len())
            .filter(|&k| {
                let left = k == 0 || finite[k] < finite[k - 1];
                let right = k == finite.len() - 1 || finite[k] < finite[k + 1];
                left && right
            })
            .count();
        let kbest = (0..MU_SAMPLES)
            .min_by(|&a, &b| samples[a].total_cmp(&samples[b]))
            .expect("samples");
        if minima > 1 {
            let mu_best = grid[kbest];
            let mut pde = solve(&build(mu_best)?, solver)?;
            pde.flags.push("non_unimodal".into());
            return Ok(MuRefinement {
                mu: mu_best,
                pde,
                non_unimodal: true,
                iterations: iteration,
            });
        }
        let a = grid[kbest.saturating_sub(1)];
        let b = grid[(kbest + 1).min(MU_SAMPLES - 1)];
        let next = golden(|m| fixed_set_residual(&build(m)?, &active), a, b, MU_TOL)?;
        let moved = (next - mu).abs();
        mu = next;
        if moved < MU_TOL {
            let pde = solve(&build(mu)?, solver)?;
            return Ok(MuRefinement {
                mu,
                pde,
                non_unimodal: false,
                iterations: iteration,
            });
        }
    }
    let pde = solve(&build(mu)?, solver)?;
    let mut pde = pde;
    pde.flags.push("mu_not_converged".into());
    Ok(MuRefinement {
        mu,
        pde,
        non_unimodal: false,
        iterations: 20,
    })
}
