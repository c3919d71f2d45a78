//! Forward integration of discovered PDEs by the method of lines with
//! classic RK4, plus error metrics against reference data.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_store::{Dataset, Field, Grid, C64};
use crate::preprocess::{self, Scheme, DEFAULT_RHO_FLOOR};
use crate::sparse_regress::DiscoveredPDE;
use crate::spectral::SpectralAxis;
use crate::term_library::{Factor, Kernel, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeBoundary {
    Periodic,
    /// Cells within one stencil half-width of either edge keep their initial
    /// data values.
    Clamped,
}

/// `∂t unknown_e = Σ c·term` for each unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct PdeSystem {
    unknowns: Vec<String>,
    rhs: Vec<Vec<(C64, Term)>>,
    pub boundary: PdeBoundary,
}

impl PdeSystem {
    pub fn new(
        unknowns: Vec<String>,
        rhs: Vec<Vec<(C64, Term)>>,
        boundary: PdeBoundary,
    ) -> Result<PdeSystem> {
        if unknowns.is_empty() || unknowns.len() > 2 {
            return Err(Error::config(format!(
                "a PDE system has 1 or 2 unknowns, got {}",
                unknowns.len()
            )));
        }
        if rhs.len() != unknowns.len() {
            return Err(Error::config("one right-hand side per unknown is required"));
        }
        if unknowns.iter().collect::<BTreeSet<_>>().len() != unknowns.len() {
            return Err(Error::config("unknowns must be distinct"));
        }
        for (c, t) in rhs.iter().flatten() {
            if !(c.re.is_finite() && c.im.is_finite()) {
                return Err(Error::config(format!("coefficient of {t} is not finite")));
            }
            if let Some(f) = t
                .fields()
                .into_iter()
                .find(|f| !unknowns.iter().any(|u| u == f))
            {
                return Err(Error::config(format!(
                    "term {t} uses {f}, which is not an unknown of the system"
                )));
            }
            if t.nonlocal().is_some() && boundary != PdeBoundary::Periodic {
                return Err(Error::config(format!(
                    "nonlocal term {t} needs a periodic boundary"
                )));
            }
        }
        Ok(PdeSystem {
            unknowns,
            rhs,
            boundary,
        })
    }

    /// Builds the system from regression results, one per unknown.
    pub fn from_discovered(
        equations: &[(&str, &[Term], &DiscoveredPDE)],
        boundary: PdeBoundary,
    ) -> Result<PdeSystem> {
        let unknowns = equations.iter().map(|(u, _, _)| u.to_string()).collect();
        let rhs = equations
            .iter()
            .map(|(_, terms, pde)| {
                pde.active
                    .iter()
                    .map(|&j| (pde.coefficients[j], terms[j].clone()))
                    .collect()
            })
            .collect();
        PdeSystem::new(unknowns, rhs, boundary)
    }

    /// Parses `(unknown, [(coefficient, term)])` pairs.
    pub fn from_strs(
        equations: &[(&str, &[(C64, &str)])],
        boundary: PdeBoundary,
    ) -> Result<PdeSystem> {
        let unknowns = equations.iter().map(|(u, _)| u.to_string()).collect();
        let rhs = equations
            .iter()
            .map(|(_, terms)| {
                terms
                    .iter()
                    .map(|(c, t)| Ok((*c, t.parse::<Term>()?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        PdeSystem::new(unknowns, rhs, boundary)
    }

    pub fn unknowns(&self) -> &[String] {
        &self.unknowns
    }

    pub fn rhs(&self) -> &[Vec<(C64, Term)>] {
        &self.rhs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    pub scheme: Scheme,
    pub safety: f64,
    /// Halt once `max|∂x u|` exceeds this multiple of its initial value.
    pub blowup_factor: f64,
    pub rho_floor: f64,
    /// Upper bound on the internal step on top of the stability estimate.
    pub max_internal_dt: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            scheme: Scheme::Spectral,
            safety: 0.5,
            blowup_factor: 50.0,
            rho_floor: DEFAULT_RHO_FLOOR,
            max_internal_dt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldErrors {
    pub name: String,
    pub max_abs: f64,
    pub rms: f64,
    /// Max-abs error of each time row over its masked cells.
    pub per_time: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fields: Vec<FieldErrors>,
}

impl Comparison {
    pub fn field(&self, name: &str) -> Option<&FieldErrors> {
        self.fields.iter().find(|f| f.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    /// Rows at or after `valid_rows` repeat the last valid state.
    pub solution: Dataset,
    pub blowup_time: Option<f64>,
    pub valid_rows: usize,
    pub steps: usize,
    pub min_internal_dt: f64,
    /// Present when the initial dataset lives on the output grid.
    pub errors: Option<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldErrorSummary {
    pub name: String,
    pub max_abs: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub blowup_time: Option<f64>,
    pub valid_rows: usize,
    pub steps: usize,
    pub min_internal_dt: f64,
    pub errors: Vec<FieldErrorSummary>,
}

impl SolveReport {
    pub fn summary(&self) -> SolveSummary {
        SolveSummary {
            blowup_time: self.blowup_time,
            valid_rows: self.valid_rows,
            steps: self.steps,
            min_internal_dt: self.min_internal_dt,
            errors: self
                .errors
                .iter()
                .flat_map(|c| &c.fields)
                .map(|f| FieldErrorSummary {
                    name: f.name.clone(),
                    max_abs: f.max_abs,
                    rms: f.rms,
                })
                .collect(),
        }
    }
}

/// Precomputed inputs of one term factor.
enum Slot {
    Deriv {
        unknown: usize,
        order: u32,
    },
    Kernel {
        unknown: usize,
        symbol: Vec<C64>,
        max: f64,
    },
}

enum Op {
    Pow { slot: usize, exp: u32 },
    Spatial { values: Vec<f64> },
    Sin { slot: usize, w: f64 },
    LogDeriv { value: usize, grad: usize },
}

struct CompiledTerm {
    coef: C64,
    ops: Vec<Op>,
}

struct Integrator<'a> {
    nx: usize,
    dx: f64,
    periodic: bool,
    scheme: Scheme,
    floor: f64,
    axis: Option<SpectralAxis>,
    slots: Vec<Slot>,
    terms: Vec<Vec<CompiledTerm>>,
    frozen: usize,
    _system: &'a PdeSystem,
}

fn symbol_max(order: u32, scheme: Scheme, dx: f64) -> f64 {
    match scheme {
        Scheme::Spectral => (std::f64::consts::PI / dx).powi(order as i32),
        Scheme::Central2 => {
            let c = [1.0, 1.0, 4.0, 2.6, 16.0][order as usize];
            c / dx.powi(order as i32)
        }
    }
}

/// Stability limit of RK4 on the imaginary and negative real axes, rounded down.
const RK4_REACH: f64 = 2.5;

impl<'a> Integrator<'a> {
    fn new(system: &'a PdeSystem, grid: &Grid, opts: &SolveOptions) -> Result<Self> {
        let periodic = system.boundary == PdeBoundary::Periodic;
        if opts.scheme == Scheme::Spectral && !periodic {
            return Err(Error::config(
                "spectral derivatives need a periodic boundary",
            ));
        }
        let needs_fft = opts.scheme == Scheme::Spectral
            || system
                .rhs
                .iter()
                .flatten()
                .any(|(_, t)| t.nonlocal().is_some());
        let axis = needs_fft.then(|| SpectralAxis::new(grid.nx, grid.dx));
        let mut slots: Vec<Slot> = vec![];
        let deriv_slot = |slots: &mut Vec<Slot>, unknown: usize, order: u32| -> usize {
            if let Some(p) = slots
                .iter()
                .position(|s| matches!(s, Slot::Deriv { unknown: u, order: o } if *u == unknown && *o == order))
            {
                return p;
            }
            slots.push(Slot::Deriv { unknown, order });
            slots.len() - 1
        };
        let index = |f: &str| {
            system
                .unknowns
                .iter()
                .position(|u| u == f)
                .expect("validated")
        };
        let mut max_order = 0;
        let mut terms = vec![];
        for eq in &system.rhs {
            let mut compiled = vec![];
            for (coef, term) in eq {
                let mut ops = vec![];
                for f in term.factors() {
                    match f {
                        Factor::FieldPower { field, deriv, exp } => {
                            max_order = max_order.max(*deriv);
                            ops.push(Op::Pow {
                                slot: deriv_slot(&mut slots, index(field), *deriv),
                                exp: *exp,
                            });
                        }
                        Factor::SpatialMonomial { offset, exp } => ops.push(Op::Spatial {
                            values: (0..grid.nx)
                                .map(|j| (grid.x(j) - offset).powi(*exp as i32))
                                .collect(),
                        }),
                        Factor::SpecialSin { field, period } => ops.push(Op::Sin {
                            slot: deriv_slot(&mut slots, index(field), 0),
                            w: 2.0 * std::f64::consts::PI / *period as f64,
                        }),
                        Factor::LogDeriv { field } => {
                            max_order = max_order.max(1);
                            ops.push(Op::LogDeriv {
                                value: deriv_slot(&mut slots, index(field), 0),
                                grad: deriv_slot(&mut slots, index(field), 1),
                            })
                        }
                        Factor::Nonlocal { kernel, field } => {
                            let ax = axis.as_ref().expect("fft axis for kernels");
                            let symbol: Vec<C64> = ax
                                .q()
                                .iter()
                                .map(|&q| C64::new(kernel.symbol(q), 0.0))
                                .collect();
                            let max = symbol.iter().map(|s| s.norm()).fold(0.0, f64::max);
                            slots.push(Slot::Kernel {
                                unknown: index(field),
                                symbol,
                                max,
                            });
                            ops.push(Op::Pow {
                                slot: slots.len() - 1,
                                exp: 1,
                            });
                            let _: &Kernel = kernel;
                        }
                    }
                }
                compiled.push(CompiledTerm { coef: *coef, ops });
            }
            terms.push(compiled);
        }
        let frozen = if periodic {
            0
        } else {
            (max_order as usize).div_ceil(2).max(1)
        };
        if !periodic && grid.nx <= 2 * frozen {
            return Err(Error::data("grid too narrow for the clamped boundary"));
        }
        Ok(Integrator {
            nx: grid.nx,
            dx: grid.dx,
            periodic,
            scheme: opts.scheme,
            floor: opts.rho_floor,
            axis,
            slots,
            terms,
            frozen,
            _system: system,
        })
    }

    fn fill_slots(&self, state: &[Vec<C64>]) -> Vec<Vec<C64>> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Deriv { unknown, order: 0 } => state[*unknown].clone(),
                Slot::Deriv { unknown, order } => match self.scheme {
                    Scheme::Central2 => {
                        preprocess::central_line(&state[*unknown], *order, self.dx, self.periodic)
                    }
                    Scheme::Spectral => {
                        let ax = self.axis.as_ref().expect("spectral axis");
                        let mut buf = state[*unknown].clone();
                        ax.apply_multiplier(&mut buf, &ax.derivative_symbol(*order));
                        buf
                    }
                },
                Slot::Kernel {
                    unknown, symbol, ..
                } => {
                    let mut buf = state[*unknown].clone();
                    self.axis
                        .as_ref()
                        .expect("fft axis")
                        .apply_multiplier(&mut buf, symbol);
                    buf
                }
            })
            .collect()
    }

    fn op_value(&self, op: &Op, slots: &[Vec<C64>], j: usize) -> C64 {
        match op {
            Op::Pow { slot, exp } => slots[*slot][j].powu(*exp),
            Op::Spatial { values } => C64::new(values[j], 0.0),
            Op::Sin { slot, w } => (slots[*slot][j] * *w).sin(),
            Op::LogDeriv { value, grad } => {
                let v = slots[*value][j];
                let v = if v.norm() < self.floor {
                    C64::new(self.floor, 0.0)
                } else {
                    v
                };
                slots[*grad][j] / v
            }
        }
    }

    fn rhs(&self, state: &[Vec<C64>]) -> Vec<Vec<C64>> {
        let slots = self.fill_slots(state);
        self.terms
            .iter()
            .map(|eq| {
                let mut out = vec![C64::new(0.0, 0.0); self.nx];
                for t in eq {
                    for (j, o) in out.iter_mut().enumerate() {
                        let mut v = t.coef;
                        for op in &t.ops {
                            v *= self.op_value(op, &slots, j);
                        }
                        *o += v;
                    }
                }
                for o in out.iter_mut().take(self.frozen) {
                    *o = C64::new(0.0, 0.0);
                }
                for o in out.iter_mut().skip(self.nx - self.frozen) {
                    *o = C64::new(0.0, 0.0);
                }
                out
            })
            .collect()
    }

    /// Leading spatial order of an op and its symbol bound.
    fn op_reach(&self, op: &Op) -> Option<(u32, f64)> {
        match op {
            Op::Pow { slot, .. } => match &self.slots[*slot] {
                Slot::Deriv { order, .. } => {
                    Some((*order, symbol_max(*order, self.scheme, self.dx)))
                }
                Slot::Kernel { max, .. } => Some((0, *max)),
            },
            Op::LogDeriv { .. } => Some((1, symbol_max(1, self.scheme, self.dx))),
            _ => None,
        }
    }

    /// `(speed, diffusion, spectral radius)` estimates for the current state.
    fn rates(&self, state: &[Vec<C64>]) -> (f64, f64, f64) {
        let slots = self.fill_slots(state);
        let (mut speed, mut diffusion, mut radius) = (0.0f64, 0.0f64, 0.0f64);
        for eq in &self.terms {
            for t in eq {
                // linearise about the factor with the highest spatial order
                let lead = t
                    .ops
                    .iter()
                    .enumerate()
                    .filter_map(|(i, op)| self.op_reach(op).map(|r| (i, r)))
                    .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.1 .1.total_cmp(&b.1 .1)));
                let Some((li, (order, reach))) = lead else {
                    continue;
                };
                let mut mag = 0.0f64;
                for j in 0..self.nx {
                    let mut v = t.coef.norm();
                    for (i, op) in t.ops.iter().enumerate() {
                        if i == li {
                            v *= match op {
                                Op::Pow { slot, exp } => {
                                    *exp as f64 * slots[*slot][j].norm().powi(*exp as i32 - 1)
                                }
                                Op::LogDeriv { value, .. } => {
                                    1.0 / slots[*value][j].norm().max(self.floor)
                                }
                                _ => 1.0,
                            };
                        } else {
                            v *= self.op_value(op, &slots, j).norm();
                        }
                    }
                    mag = mag.max(v);
                }
                radius += mag * reach;
                match order {
                    1 => speed += mag,
                    2 => diffusion += mag,
                    _ => {}
                }
            }
        }
        (speed, diffusion, radius)
    }

    fn internal_dt(&self, state: &[Vec<C64>], dt: f64, opts: &SolveOptions) -> f64 {
        let (speed, diffusion, radius) = self.rates(state);
        let mut h = dt;
        if speed > 0.0 {
            h = h.min(opts.safety * self.dx / speed);
        }
        if diffusion > 0.0 {
            h = h.min(opts.safety * self.dx * self.dx / diffusion);
        }
        if radius > 0.0 {
            h = h.min(opts.safety * RK4_REACH / radius);
        }
        if let Some(m) = opts.max_internal_dt {
            h = h.min(m);
        }
        h
    }

    fn gradient(&self, state: &[Vec<C64>]) -> f64 {
        state
            .iter()
            .map(|u| {
                let d = preprocess::central_line(u, 1, self.dx, self.periodic);
                let lo = if self.periodic { 0 } else { 1 };
                d[lo..self.nx - lo]
                    .iter()
                    .map(|v| v.norm())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    fn rk4(&self, state: &[Vec<C64>], h: f64) -> Vec<Vec<C64>> {
        let axpy = |a: &[Vec<C64>], k: &[Vec<C64>], s: f64| -> Vec<Vec<C64>> {
            a.iter()
                .zip(k)
                .map(|(u, d)| u.iter().zip(d).map(|(x, y)| x + y * s).collect())
                .collect()
        };
        let k1 = self.rhs(state);
        let k2 = self.rhs(&axpy(state, &k1, h / 2.0));
        let k3 = self.rhs(&axpy(state, &k2, h / 2.0));
        let k4 = self.rhs(&axpy(state, &k3, h));
        state
            .iter()
            .enumerate()
            .map(|(e, u)| {
                (0..self.nx)
                    .map(|j| {
                        u[j] + (k1[e][j] + k2[e][j] * 2.0 + k3[e][j] * 2.0 + k4[e][j]) * (h / 6.0)
                    })
                    .collect()
            })
            .collect()
    }
}

fn finite(state: &[Vec<C64>]) -> bool {
    state
        .iter()
        .flatten()
        .all(|v| v.re.is_finite() && v.im.is_finite())
}

/// Integrates `system` from the first time row of `init` over `grid`.
pub fn solve(
    system: &PdeSystem,
    init: &Dataset,
    grid: &Grid,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    grid.validate()?;
    if init.grid.nx != grid.nx || (init.grid.dx - grid.dx).abs() > 1e-12 * grid.dx {
        return Err(Error::data(format!(
            "initial data has {} cells of width {} but the solve grid has {} of width {}",
            init.grid.nx, init.grid.dx, grid.nx, grid.dx
        )));
    }
    if !(opts.safety > 0.0) || !(opts.blowup_factor > 1.0) || !(opts.rho_floor > 0.0) {
        return Err(Error::config(
            "safety and rho_floor must be positive and blowup_factor above 1",
        ));
    }
    let mut fields = vec![];
    for u in &system.unknowns {
        let f = init.field(u)?;
        let row: Vec<C64> = f.values().row(0).to_vec();
        if !finite(std::slice::from_ref(&row)) {
            return Err(Error::data(format!("initial slice of {u} is not finite")));
        }
        fields.push((f, row));
    }
    let integ = Integrator::new(system, grid, opts)?;
    let complex_rhs = system.rhs.iter().flatten().any(|(c, _)| c.im != 0.0);
    let mut state: Vec<Vec<C64>> = fields.iter().map(|(_, r)| r.clone()).collect();
    let mut rows: Vec<Vec<Vec<C64>>> = vec![state.clone()];
    let g0 = integ.gradient(&state);
    let mut blowup_time = None;
    let mut steps = 0;
    let mut min_dt = f64::INFINITY;
    'outer: for k in 1..grid.nt {
        let h = integ.internal_dt(&state, grid.dt, opts);
        let n = ((grid.dt / h) - 1e-9).ceil().max(1.0) as usize;
        let h = grid.dt / n as f64;
        min_dt = min_dt.min(h);
        for s in 0..n {
            let next = integ.rk4(&state, h);
            steps += 1;
            if !finite(&next) {
                let t_good = grid.t(k - 1) + s as f64 * h;
                if k == 1 {
                    return Err(Error::numerical(format!(
                        "solution became non-finite; last good time {t_good}"
                    )));
                }
                blowup_time = Some(t_good);
                break 'outer;
            }
            state = next;
        }
        if g0 > 0.0 && integ.gradient(&state) > opts.blowup_factor * g0 {
            blowup_time = Some(grid.t(k));
            break;
        }
        rows.push(state.clone());
    }
    let valid_rows = rows.len();
    let last = rows.last().expect("initial row").clone();
    let mut out_grid = grid.clone();
    out_grid.periodic_x = system.boundary == PdeBoundary::Periodic;
    let mut solution = Dataset::new(out_grid)?;
    for (e, (src, _)) in fields.iter().enumerate() {
        let values = Array2::from_shape_fn((grid.nt, grid.nx), |(i, j)| {
            rows.get(i).unwrap_or(&last)[e][j]
        });
        let f = if src.is_complex() || complex_rhs {
            Field::new_complex(src.name(), values)?
        } else {
            Field::new_real(src.name(), values.mapv(|v| v.re))?
        };
        solution.add_field(f.with_parity(src.p_parity, src.t_parity))?;
    }
    solution.meta.insert("source".into(), "pde_forward".into());
    if let Some(t) = blowup_time {
        solution.meta.insert("blowup_time".into(), t.to_string());
    }
    let errors = if init.grid.matches(grid) {
        let mask = Array2::from_shape_fn((grid.nt, grid.nx), |(i, _)| i < valid_rows);
        Some(compare(&solution, init, Some(&mask))?)
    } else {
        None
    };
    Ok(SolveReport {
        solution,
        blowup_time,
        valid_rows,
        steps,
        min_internal_dt: min_dt,
        errors,
    })
}

/// Error metrics of every solution field also present in `reference`.
pub fn compare(
    solution: &Dataset,
    reference: &Dataset,
    mask: Option<&Array2<bool>>,
) -> Result<Comparison> {
    let (a, b) = (&solution.grid, &reference.grid);
    if a.nt != b.nt
        || a.nx != b.nx
        || (a.dt - b.dt).abs() > 1e-12 * a.dt
        || (a.dx - b.dx).abs() > 1e-12 * a.dx
    {
        return Err(Error::data(format!(
            "cannot compare a {}x{} grid (dt {}, dx {}) with a {}x{} grid (dt {}, dx {})",
            a.nt, a.nx, a.dt, a.dx, b.nt, b.nx, b.dt, b.dx
        )));
    }
    if let Some(m) = mask {
        if m.dim() != (a.nt, a.nx) {
            return Err(Error::data(format!(
                "mask is {:?} but the grid is {}x{}",
                m.dim(),
                a.nt,
                a.nx
            )));
        }
    }
    let mut fields = vec![];
    for f in solution.fields() {
        let Ok(r) = reference.field(f.name()) else {
            continue;
        };
        let (mut max_abs, mut sq, mut count) = (0.0f64, 0.0, 0usize);
        let mut per_time = vec![0.0f64; a.nt];
        for ((i, j), v) in f.values().indexed_iter() {
            if mask.is_some_and(|m| !m[[i, j]]) {
                continue;
            }
            let d = (v - r.values()[[i, j]]).norm();
            max_abs = max_abs.max(d);
            per_time[i] = per_time[i].max(d);
            sq += d * d;
            count += 1;
        }
        let rms = if count > 0 {
            (sq / count as f64).sqrt()
        } else {
            0.0
        };
        fields.push(FieldErrors {
            name: f.name().to_string(),
            max_abs,
            rms,
            per_time,
        });
    }
    if fields.is_empty() {
        return Err(Error::data("solution and reference share no field names"));
    }
    Ok(Comparison { fields })
}
