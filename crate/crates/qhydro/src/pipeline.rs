//! Config-driven stages: simulate, preprocess, learn, frontier, validate.
//!
//! [`RunConfig`] is the single serialized description of a run. Every field
//! has a default and unknown keys are rejected, so a config file only needs
//! to spell out what differs from the defaults.

use std::path::PathBuf;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_store::{Dataset, Field, Grid, C64};
use crate::par::Exec;
use crate::pde_forward::{self, PdeBoundary, PdeSystem, SolveOptions, SolveReport};
use crate::preprocess::{self, Scheme, SmootherSpec, DEFAULT_RHO_FLOOR};
use crate::quantum_sim::{
    self, Boundary, Coupling, FermionModel, Filling, MagnonModel, WavePacket,
};
use crate::sparse_regress::{
    self, DiscoveredPDE, Frontier, MuRefinement, PdeRecord, RegressionProblem, Solver,
};
use crate::term_library::{
    self, EvalOptions, Evaluated, Factor, GenerateSpec, Kernel, Library, Term,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub equations: Vec<EquationConfig>,
    pub regress: RegressConfig,
    pub frontier: FrontierConfig,
    pub validate: ValidateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            preprocess: PreprocessConfig::default(),
            equations: vec![EquationConfig::default()],
            regress: RegressConfig::default(),
            frontier: FrontierConfig::default(),
            validate: ValidateConfig::default(),
        }
    }
}

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Fermion(FermionConfig),
    DomainWall(DomainWallConfig),
    Magnon(MagnonConfig),
    /// Synthetic data from a known PDE.
    Forward(ForwardConfig),
    Ingest(IngestConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Magnon(MagnonConfig::default())
    }
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Fermion(_) => "fermion",
            ModelConfig::DomainWall(_) => "domain_wall",
            ModelConfig::Magnon(_) => "magnon",
            ModelConfig::Forward(_) => "forward",
            ModelConfig::Ingest(_) => "ingest",
        }
    }
}

fn time_grid(nt: usize, t_max: f64, nx: usize, dx: f64) -> Result<Grid> {
    if nt < 3 || !(t_max > 0.0) || !t_max.is_finite() {
        return Err(Error::config(format!(
            "need nt >= 3 and t_max > 0, got nt = {nt}, t_max = {t_max}"
        )));
    }
    Grid::new(nt, nx, t_max / (nt - 1) as f64, dx)
}

/// Ground state of `h + V` with a Gaussian `V`, quenched to `V = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FermionConfig {
    pub l: usize,
    pub j1: f64,
    pub j2: f64,
    pub boundary: Boundary,
    pub v0: f64,
    pub sigma: f64,
    /// Centre of the potential; the chain midpoint when absent.
    pub x0: Option<f64>,
    pub filling: Filling,
    pub t_max: f64,
    pub nt: usize,
}

impl Default for FermionConfig {
    fn default() -> Self {
        FermionConfig {
            l: 1000,
            j1: 0.5,
            j2: 0.0,
            boundary: Boundary::Periodic,
            v0: -0.1,
            sigma: 200.0,
            x0: None,
            filling: Filling::Count(101),
            t_max: 300.0,
            nt: 1000,
        }
    }
}

impl FermionConfig {
    pub fn model(&self) -> FermionModel {
        let x0 = self.x0.unwrap_or(self.l as f64 / 2.0);
        FermionModel {
            l: self.l,
            j1: self.j1,
            j2: self.j2,
            boundary: self.boundary,
            potential: quantum_sim::gaussian_potential(self.l, self.v0, x0, self.sigma),
            filling: self.filling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainWallConfig {
    pub l: usize,
    pub j1: f64,
    pub boundary: Boundary,
    pub t_max: f64,
    pub nt: usize,
}

impl Default for DomainWallConfig {
    fn default() -> Self {
        DomainWallConfig {
            l: 2000,
            j1: 0.5,
            boundary: Boundary::Open,
            t_max: 900.0,
            nt: 451,
        }
    }
}

/// Parabolic field `B0·(x - center)²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapConfig {
    pub b0: f64,
    pub center: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MagnonConfig {
    pub l: usize,
    pub j: f64,
    pub delta: f64,
    pub coupling: Coupling,
    pub boundary: Boundary,
    pub trap: Option<TrapConfig>,
    pub packet: WavePacket,
    pub t_max: f64,
    pub nt: usize,
}

impl Default for MagnonConfig {
    fn default() -> Self {
        MagnonConfig {
            l: 100,
            j: -1.0,
            delta: -0.5,
            coupling: Coupling::NearestNeighbour,
            boundary: Boundary::Periodic,
            trap: None,
            packet: WavePacket {
                amplitude: 1.0,
                x0: 50.0,
                sigma: 5.0,
                k0: 0.0,
            },
            t_max: 19.99,
            nt: 2000,
        }
    }
}

impl MagnonConfig {
    pub fn model(&self) -> MagnonModel {
        let field = match self.trap {
            Some(t) => (0..self.l)
                .map(|i| t.b0 * (i as f64 - t.center).powi(2))
                .collect(),
            None => vec![],
        };
        MagnonModel {
            l: self.l,
            j: self.j,
            delta: self.delta,
            field,
            coupling: self.coupling,
            boundary: self.boundary,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    /// `offset + amplitude·sin(2π·periods·x/(nx·dx))`
    Sine {
        offset: f64,
        amplitude: f64,
        periods: u32,
    },
    /// `amplitude·tanh((x - center)/width)`
    Wall {
        center: f64,
        width: f64,
        amplitude: f64,
    },
}

impl Profile {
    fn sample(&self, x: f64, length: f64) -> f64 {
        match *self {
            Profile::Sine {
                offset,
                amplitude,
                periods,
            } => {
                offset
                    + amplitude * (2.0 * std::f64::consts::PI * periods as f64 * x / length).sin()
            }
            Profile::Wall {
                center,
                width,
                amplitude,
            } => amplitude * ((x - center) / width).tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhsTerm {
    pub coefficient: f64,
    pub term: Term,
}

/// `∂t field = Σ coefficient·term` integrated from `initial`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardConfig {
    pub field: String,
    pub nx: usize,
    pub dx: f64,
    pub boundary: PdeBoundary,
    pub initial: Profile,
    pub rhs: Vec<RhsTerm>,
    pub solve: SolveOptions,
    pub t_max: f64,
    pub nt: usize,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            field: "u".into(),
            nx: 256,
            dx: 1.0,
            boundary: PdeBoundary::Periodic,
            initial: Profile::Sine {
                offset: 0.0,
                amplitude: 1.0,
                periods: 1,
            },
            rhs: vec![
                RhsTerm {
                    coefficient: -0.24,
                    term: "u*u_x".parse().expect("term"),
                },
                RhsTerm {
                    coefficient: 1.9,
                    term: "u_xx".parse().expect("term"),
                },
            ],
            solve: SolveOptions::default(),
            t_max: 200.0,
            nt: 401,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Sidecar JSON written by [`Dataset::save`].
    pub path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stride {
    pub t: usize,
    pub x: usize,
}

impl Default for Stride {
    fn default() -> Self {
        Stride { t: 1, x: 1 }
    }
}

/// Coordinate bounds; absent bounds leave that side open.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
}

impl WindowConfig {
    fn is_open(&self) -> bool {
        self.t_min.is_none() && self.t_max.is_none() && self.x_min.is_none() && self.x_max.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityConfig {
    pub density: String,
    /// Replace the reconstructed velocity on the first valid row with zero,
    /// as for a quench from rest.
    pub zero_initial: bool,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        VelocityConfig {
            density: "rho".into(),
            zero_initial: false,
        }
    }
}

/// Applied in field order: stride, smoothing, window, time resampling,
/// velocity reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub stride: Stride,
    pub smooth: Option<SmootherSpec>,
    pub window: WindowConfig,
    pub resample_nt: Option<usize>,
    pub velocity: Option<VelocityConfig>,
    /// Cells where a field named `rho` falls below this are left out.
    pub rho_floor: f64,
    pub scheme: Scheme,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            stride: Stride::default(),
            smooth: None,
            window: WindowConfig::default(),
            resample_nt: None,
            velocity: None,
            rho_floor: DEFAULT_RHO_FLOOR,
            scheme: Scheme::Central2,
        }
    }
}

/// One regression `∂t target = Σ ξ·term`. The library is `terms` followed
/// by whatever `generate` produces, deduplicated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquationConfig {
    pub target: String,
    pub terms: Vec<Term>,
    pub generate: Option<GenerateSpec>,
    pub symmetry_filter: bool,
    /// Overrides `regress.lambda0` for this equation.
    pub lambda0: Option<f64>,
    /// Refine the exponent of the single `K[|q|^mu]` term over this bracket.
    pub mu_bracket: Option<[f64; 2]>,
}

impl Default for EquationConfig {
    fn default() -> Self {
        EquationConfig {
            target: "u".into(),
            terms: vec![],
            generate: Some(GenerateSpec {
                fields: vec![term_library::FieldBudget {
                    name: "u".into(),
                    max_power: 1,
                }],
                max_dx: 4,
                constant: true,
                log_deriv: vec![],
                spatial: None,
                special_sin: None,
                nonlocal: vec![],
            }),
            symmetry_filter: false,
            lambda0: None,
            mu_bracket: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressConfig {
    pub solver: Solver,
    pub lambda0: f64,
    pub lambda2: f64,
    pub normalize_columns: bool,
    /// Row batches for the coefficient spread; 0 skips it.
    pub uncertainty_batches: usize,
    pub seed: u64,
}

impl Default for RegressConfig {
    fn default() -> Self {
        RegressConfig {
            solver: Solver::BruteForce,
            lambda0: 1e-3,
            lambda2: 0.0,
            normalize_columns: true,
            uncertainty_batches: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontierConfig {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub per_decade: usize,
}

impl Default for FrontierConfig {
    fn default() -> Self {
        FrontierConfig {
            lambda_max: 1.0,
            lambda_min: 1e-7,
            per_decade: 8,
        }
    }
}

impl FrontierConfig {
    pub fn lambdas(&self) -> Result<Vec<f64>> {
        if !(self.lambda_max > 0.0 && self.lambda_min > 0.0 && self.lambda_max >= self.lambda_min) {
            return Err(Error::config(format!(
                "frontier needs 0 < lambda_min <= lambda_max, got {} and {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if self.per_decade == 0 {
            return Err(Error::config("frontier per_decade must be at least 1"));
        }
        Ok(sparse_regress::lambda_grid(
            self.lambda_max,
            self.lambda_min,
            self.per_decade,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub boundary: PdeBoundary,
    pub solve: SolveOptions,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            boundary: PdeBoundary::Periodic,
            solve: SolveOptions::default(),
        }
    }
}

impl RunConfig {
    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        match &self.model {
            ModelConfig::Fermion(f) => {
                f.model().validate()?;
                time_grid(f.nt, f.t_max, f.l, 1.0)?;
            }
            ModelConfig::DomainWall(d) => {
                time_grid(d.nt, d.t_max, d.l, 1.0)?;
            }
            ModelConfig::Magnon(m) => {
                m.model().validate()?;
                time_grid(m.nt, m.t_max, m.l, 1.0)?;
            }
            ModelConfig::Forward(f) => {
                time_grid(f.nt, f.t_max, f.nx, f.dx)?;
                forward_system(f)?;
            }
            ModelConfig::Ingest(_) => {}
        }
        let p = &self.preprocess;
        if p.stride.t == 0 || p.stride.x == 0 {
            return Err(Error::config("strides must be at least 1"));
        }
        if let Some(sm) = &p.smooth {
            sm.validate(usize::MAX)?;
        }
        if !(p.rho_floor >= 0.0) {
            return Err(Error::config("rho_floor must be non-negative"));
        }
        if self.equations.is_empty() {
            return Err(Error::config("at least one equation is required"));
        }
        for eq in &self.equations {
            let lib = eq.library()?;
            if let Some([lo, hi]) = eq.mu_bracket {
                if !(lo > 0.0 && lo < hi) {
                    return Err(Error::config(format!(
                        "mu bracket [{lo}, {hi}] must satisfy 0 < lo < hi"
                    )));
                }
                mu_column(&lib)?;
            }
            let l0 = eq.lambda0.unwrap_or(self.regress.lambda0);
            if !(l0 >= 0.0) || !l0.is_finite() {
                return Err(Error::config(format!(
                    "lambda0 must be finite and non-negative, got {l0}"
                )));
            }
        }
        if !(self.regress.lambda2 >= 0.0) || !self.regress.lambda2.is_finite() {
            return Err(Error::config("lambda2 must be finite and non-negative"));
        }
        self.frontier.lambdas()?;
        Ok(())
    }
}

impl EquationConfig {
    /// The library before any symmetry filtering.
    pub fn library(&self) -> Result<Library> {
        let mut terms = self.terms.clone();
        if let Some(spec) = &self.generate {
            for t in term_library::generate_terms(&self.target, spec)?.terms() {
                if !terms.contains(t) {
                    terms.push(t.clone());
                }
            }
        }
        if terms.is_empty() {
            return Err(Error::config(format!(
                "library for {}_t is empty",
                self.target
            )));
        }
        Library::new(&self.target, terms)
    }
}

fn mu_column(lib: &Library) -> Result<usize> {
    let hits: Vec<usize> = lib
        .terms()
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t.nonlocal(), Some((Kernel::AbsQPow(_), _))))
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Ok(*one),
        _ => Err(Error::config(format!(
            "mu refinement needs exactly one K[|q|^mu] term, found {}",
            hits.len()
        ))),
    }
}

fn with_mu(lib: &Library, col: usize, mu: f64) -> Result<Library> {
    let mut terms = lib.terms().to_vec();
    let field = match terms[col].factors() {
        [Factor::Nonlocal { field, .. }] => field.clone(),
        _ => {
            return Err(Error::config(format!(
                "term {} must be a bare kernel term",
                terms[col]
            )))
        }
    };
    terms[col] = Term::new(vec![Factor::Nonlocal {
        kernel: Kernel::AbsQPow(mu),
        field,
    }])?;
    Library::new(&lib.target, terms)
}

fn forward_system(f: &ForwardConfig) -> Result<PdeSystem> {
    let rhs = f
        .rhs
        .iter()
        .map(|r| (C64::new(r.coefficient, 0.0), r.term.clone()))
        .collect();
    PdeSystem::new(vec![f.field.clone()], vec![rhs], f.boundary)
}

/// Produces the raw dataset the config describes.
pub fn simulate(cfg: &RunConfig) -> Result<Dataset> {
    let exec = Exec::default();
    let mut ds = match &cfg.model {
        ModelConfig::Fermion(f) => {
            let model = f.model();
            let grid = time_grid(f.nt, f.t_max, f.l, 1.0)?;
            let phi0 = quantum_sim::fermion_ground_state(&model)?;
            quantum_sim::fermion_evolve_with(&model, &grid, &phi0, exec)?
        }
        ModelConfig::DomainWall(d) => {
            let model = FermionModel {
                l: d.l,
                j1: d.j1,
                j2: 0.0,
                boundary: d.boundary,
                potential: vec![],
                filling: Filling::Count(d.l / 2),
            };
            let grid = time_grid(d.nt, d.t_max, d.l, 1.0)?;
            quantum_sim::fermion_domain_wall_with(&model, &grid, exec)?
        }
        ModelConfig::Magnon(m) => {
            let grid = time_grid(m.nt, m.t_max, m.l, 1.0)?;
            quantum_sim::magnon_evolve(&m.model(), &grid, &m.packet)?
        }
        ModelConfig::Forward(f) => {
            let grid =
                time_grid(f.nt, f.t_max, f.nx, f.dx)?.periodic(f.boundary == PdeBoundary::Periodic);
            let length = f.nx as f64 * f.dx;
            let u0 = Array2::from_shape_fn((3, f.nx), |(_, j)| f.initial.sample(grid.x(j), length));
            let mut g0 = grid.clone();
            g0.nt = 3;
            let init = Dataset::new(g0)?.with_field(Field::new_real(&f.field, u0)?)?;
            let report = pde_forward::solve(&forward_system(f)?, &init, &grid, &f.solve)?;
            if let Some(tb) = report.blowup_time {
                return Err(Error::numerical(format!(
                    "synthetic solve blew up at t = {tb}"
                )));
            }
            let mut ds = report.solution;
            ds.meta.insert("model".into(), "forward".into());
            ds
        }
        ModelConfig::Ingest(i) => {
            let path = i
                .path
                .as_ref()
                .ok_or_else(|| Error::data("ingest model needs a dataset path"))?;
            if !path.with_extension("json").exists() && !path.exists() {
                return Err(Error::data(format!(
                    "dataset {} does not exist",
                    path.display()
                )));
            }
            Dataset::load(path)?
        }
    };
    ds.meta
        .entry("model".into())
        .or_insert_with(|| cfg.model.kind().into());
    Ok(ds)
}

/// Keeps every `t`-th time sample and `x`-th site.
pub fn subsample(ds: &Dataset, stride: Stride) -> Result<Dataset> {
    if stride.t == 0 || stride.x == 0 {
        return Err(Error::config("strides must be at least 1"));
    }
    if stride == Stride::default() {
        return Ok(ds.clone());
    }
    let g = &ds.grid;
    let nt = g.nt.div_ceil(stride.t);
    let nx = g.nx.div_ceil(stride.x);
    let grid = Grid::new(nt, nx, g.dt * stride.t as f64, g.dx * stride.x as f64)?
        .with_origin(g.t0, g.x0)
        .periodic(g.periodic_x && g.nx.is_multiple_of(stride.x));
    let mut out = Dataset::new(grid)?;
    out.meta = ds.meta.clone();
    for f in ds.fields() {
        let v = f.values().slice(s![..;stride.t, ..;stride.x]).to_owned();
        let nf = if f.is_complex() {
            Field::new_complex(f.name(), v)?
        } else {
            Field::new_real(f.name(), v.mapv(|c| c.re))?
        };
        out.add_field(nf.with_parity(f.p_parity, f.t_parity))?;
    }
    Ok(out)
}

/// Dataset ready for regression plus the cells allowed into it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ds: Dataset,
    pub mask: Option<Array2<bool>>,
}

pub fn prepare(cfg: &PreprocessConfig, raw: &Dataset) -> Result<Prepared> {
    let mut ds = subsample(raw, cfg.stride)?;
    if let Some(sm) = &cfg.smooth {
        ds = preprocess::smooth_dataset(&ds, sm)?;
    }
    if !cfg.window.is_open() {
        let g = &ds.grid;
        let w = cfg.window;
        ds = ds.window_coords(
            w.t_min.unwrap_or(g.t(0)),
            w.t_max.unwrap_or(g.t(g.nt - 1)),
            w.x_min.unwrap_or(g.x(0)),
            w.x_max.unwrap_or(g.x(g.nx - 1)),
        )?;
    }
    if let Some(n) = cfg.resample_nt {
        ds = preprocess::resample_time(&ds, n)?;
    }
    let mut mask: Option<Array2<bool>> = None;
    if let Some(vc) = &cfg.velocity {
        let mut rec =
            preprocess::velocity_from_density(ds.field(&vc.density)?, &ds.grid, cfg.rho_floor)?;
        if vc.zero_initial {
            if let Some(&i) = preprocess::valid_rows(&rec.mask).first() {
                let mut v = rec.v.real_part();
                v.row_mut(i).fill(0.0);
                rec.v = Field::new_real("v", v)?.with_parity(rec.v.p_parity, rec.v.t_parity);
            }
        }
        ds.put_field(rec.v)?;
        mask = Some(rec.mask);
    }
    if let Ok(rho) = ds.field("rho") {
        let floor = rho.values().mapv(|r| r.re >= cfg.rho_floor);
        mask = Some(match mask {
            Some(mut m) => {
                m.zip_mut_with(&floor, |a, b| *a = *a && *b);
                m
            }
            None => floor,
        });
    }
    Ok(Prepared { ds, mask })
}

/// Library for `eq` as regressed, after the optional symmetry filter.
pub fn build_library(eq: &EquationConfig, ds: &Dataset) -> Result<Library> {
    let lib = eq.library()?;
    if !eq.symmetry_filter {
        return Ok(lib);
    }
    let parities = term_library::parities_of(ds);
    let want = term_library::target_signature(&eq.target, &parities)?;
    term_library::filter_by_signature(&lib, want, &parities)
}

fn problem(
    cfg: &RunConfig,
    eq: &EquationConfig,
    lib: &Library,
    prepared: &Prepared,
) -> Result<(Evaluated, RegressionProblem)> {
    let opts = EvalOptions {
        scheme: cfg.preprocess.scheme,
    };
    let ev = term_library::evaluate(lib, &prepared.ds, prepared.mask.as_ref(), opts)?;
    let pr = RegressionProblem::new(ev.design.clone(), ev.names.clone())
        .with_lambda0(eq.lambda0.unwrap_or(cfg.regress.lambda0))
        .with_lambda2(cfg.regress.lambda2)
        .with_normalization(cfg.regress.normalize_columns);
    Ok((ev, pr))
}

/// Outcome of one regression.
#[derive(Clone, Debug)]
pub struct Learned {
    pub target: String,
    /// With the refined exponent substituted when `mu` is present.
    pub library: Library,
    pub pde: DiscoveredPDE,
    pub mu: Option<MuRefinement>,
    pub uncertainty: Option<Vec<f64>>,
    pub rows: usize,
}

impl Learned {
    pub fn rendered(&self) -> String {
        term_library::render(&self.target, self.library.terms(), &self.pde.coefficients)
    }

    /// Coefficient of `term` (canonical spelling), zero when inactive.
    pub fn coefficient(&self, term: &str) -> Option<C64> {
        let j = self.library.position(term)?;
        Some(self.pde.coefficients[j])
    }

    pub fn active_terms(&self) -> Vec<String> {
        let names = self.library.names();
        self.pde.active.iter().map(|&j| names[j].clone()).collect()
    }

    pub fn record(&self) -> LearnedRecord {
        let mut pde = self.pde.record(&self.library.names());
        if let Some(m) = &self.mu {
            for f in &m.pde.flags {
                if !pde.flags.contains(f) {
                    pde.flags.push(f.clone());
                }
            }
        }
        let uncertainty = self.uncertainty.clone();
        LearnedRecord {
            target: self.target.clone(),
            equation: self.rendered(),
            library: self.library.names(),
            rows: self.rows,
            mu: self.mu.as_ref().map(|m| m.mu),
            uncertainty,
            pde,
        }
    }

    /// Right-hand side as `(coefficient, term)` pairs.
    pub fn rhs(&self) -> Vec<(C64, Term)> {
        self.pde
            .active
            .iter()
            .map(|&j| (self.pde.coefficients[j], self.library.terms()[j].clone()))
            .collect()
    }
}

/// JSON form of [`Learned`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnedRecord {
    pub target: String,
    pub equation: String,
    pub library: Vec<String>,
    pub rows: usize,
    pub mu: Option<f64>,
    pub uncertainty: Option<Vec<f64>>,
    pub pde: PdeRecord,
}

impl LearnedRecord {
    pub fn rhs(&self) -> Result<Vec<(C64, Term)>> {
        self.pde
            .active_terms
            .iter()
            .zip(&self.pde.coefficients)
            .map(|(t, c)| Ok((C64::new(c[0], c[1]), t.parse::<Term>()?)))
            .collect()
    }
}

pub fn learn_equation(
    cfg: &RunConfig,
    eq: &EquationConfig,
    prepared: &Prepared,
) -> Result<Learned> {
    let lib = build_library(eq, &prepared.ds)?;
    let solver = &cfg.regress.solver;
    let (library, pde, mu, pr, rows) = match eq.mu_bracket {
        None => {
            let (ev, pr) = problem(cfg, eq, &lib, prepared)?;
            let pde = sparse_regress::solve(&pr, solver)?;
            (lib, pde, None, pr, ev.rows.len())
        }
        Some([lo, hi]) => {
            let col = mu_column(&lib)?;
            let build = |mu: f64| -> Result<RegressionProblem> {
                let l = with_mu(&lib, col, mu)?;
                Ok(problem(cfg, eq, &l, prepared)?.1)
            };
            let refined = sparse_regress::refine_mu(build, col, (lo, hi), solver)?;
            let library = with_mu(&lib, col, refined.mu)?;
            let (ev, pr) = problem(cfg, eq, &library, prepared)?;
            (
                library,
                refined.pde.clone(),
                Some(refined),
                pr,
                ev.rows.len(),
            )
        }
    };
    let uncertainty = if cfg.regress.uncertainty_batches > 0 && !pde.active.is_empty() {
        Some(sparse_regress::batch_uncertainty(
            &pr,
            &pde.active,
            cfg.regress.uncertainty_batches,
            cfg.regress.seed,
        )?)
    } else {
        None
    };
    Ok(Learned {
        target: eq.target.clone(),
        library,
        pde,
        mu,
        uncertainty,
        rows,
    })
}

pub fn learn(cfg: &RunConfig, prepared: &Prepared) -> Result<Vec<Learned>> {
    cfg.equations
        .iter()
        .map(|eq| learn_equation(cfg, eq, prepared))
        .collect()
}

#[derive(Clone, Debug)]
pub struct FrontierResult {
    pub target: String,
    pub library: Library,
    pub frontier: Frontier,
}

impl FrontierResult {
    pub fn records(&self) -> Vec<PdeRecord> {
        self.frontier.records(&self.library.names())
    }

    /// Fixed-width table, one row per distinct model.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{}_t\n{:>10}  {:>3}  {:>12}  {:>12}  equation\n",
            self.target, "lambda0", "k", "residual", "objective"
        );
        for e in &self.frontier.entries {
            let eqn = term_library::render(&self.target, self.library.terms(), &e.pde.coefficients);
            let flag = if e.pde.flags.is_empty() {
                String::new()
            } else {
                format!("  [{}]", e.pde.flags.join(","))
            };
            out.push_str(&format!(
                "{:>10.3e}  {:>3}  {:>12.5e}  {:>12.5e}  {eqn}{flag}\n",
                e.lambda0,
                e.pde.active.len(),
                e.pde.residual,
                e.pde.objective
            ));
        }
        out
    }
}

pub fn frontier(cfg: &RunConfig, prepared: &Prepared) -> Result<Vec<FrontierResult>> {
    let lambdas = cfg.frontier.lambdas()?;
    cfg.equations
        .iter()
        .map(|eq| {
            let library = build_library(eq, &prepared.ds)?;
            let (_, pr) = problem(cfg, eq, &library, prepared)?;
            let frontier = sparse_regress::frontier_scan(&pr, &lambdas, &cfg.regress.solver)?;
            Ok(FrontierResult {
                target: eq.target.clone(),
                library,
                frontier,
            })
        })
        .collect()
}

/// Solves `equations` from the first time slice of the prepared data and
/// compares against it.
pub fn validate(
    cfg: &RunConfig,
    prepared: &Prepared,
    equations: &[(String, Vec<(C64, Term)>)],
) -> Result<SolveReport> {
    let unknowns = equations.iter().map(|(u, _)| u.clone()).collect();
    let rhs = equations.iter().map(|(_, r)| r.clone()).collect();
    let system = PdeSystem::new(unknowns, rhs, cfg.validate.boundary)?;
    let mut report = pde_forward::solve(
        &system,
        &prepared.ds,
        &prepared.ds.grid,
        &cfg.validate.solve,
    )?;
    if prepared.mask.is_some() {
        report.errors = Some(pde_forward::compare(
            &report.solution,
            &prepared.ds,
            prepared.mask.as_ref(),
        )?);
    }
    Ok(report)
}

pub fn learned_rhs(learned: &[Learned]) -> Vec<(String, Vec<(C64, Term)>)> {
    learned
        .iter()
        .map(|l| (l.target.clone(), l.rhs()))
        .collect()
}

/// Human-readable summary of what a command would do.
pub fn plan(cfg: &RunConfig, command: &str) -> Result<String> {
    let mut out = format!("command: {command}\nmodel: {}\n", cfg.model.kind());
    let p = &cfg.preprocess;
    out.push_str(&format!(
        "preprocess: stride ({}, {}), smooth {}, window {}, scheme {:?}\n",
        p.stride.t,
        p.stride.x,
        p.smooth
            .map(|s| format!("{s:?}"))
            .unwrap_or_else(|| "off".into()),
        if p.window.is_open() {
            "full".into()
        } else {
            format!("{:?}", p.window)
        },
        p.scheme
    ));
    if command != "simulate" {
        for eq in &cfg.equations {
            let lib = eq.library()?;
            out.push_str(&format!(
                "equation {}_t: {} candidate terms{}, lambda0 {}\n",
                eq.target,
                lib.len(),
                if eq.symmetry_filter {
                    " before symmetry filter"
                } else {
                    ""
                },
                eq.lambda0.unwrap_or(cfg.regress.lambda0)
            ));
        }
        out.push_str(&format!(
            "solver: {}\n",
            serde_json::to_string(&cfg.regress.solver).expect("solver serializes")
        ));
    }
    if command == "frontier" {
        let l = cfg.frontier.lambdas()?;
        out.push_str(&format!(
            "frontier: {} lambda0 values from {:e} to {:e}\n",
            l.len(),
            l[0],
            l[l.len() - 1]
        ));
    }
    Ok(out)
}
