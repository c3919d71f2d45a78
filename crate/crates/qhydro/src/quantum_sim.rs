//! Exact lattice dynamics that produce training data.
//!
//! Free fermions (J1–J2 tight binding) are propagated as an `L×N` orbital
//! matrix through the post-quench eigenbasis. On a ring that eigenbasis is
//! the plane waves, so propagation is a pair of FFTs per orbital; open chains
//! use a dense symmetric eigendecomposition. Single-magnon amplitudes follow
//! a linear differential-difference equation integrated with RK4.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_store::{Dataset, Field, Grid, Parity, C64};
use crate::par::{self, Exec};
use crate::spectral::SpectralAxis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filling {
    Count(usize),
    ChemicalPotential(f64),
}

/// Tight-binding chain `h = -J1 Σ_nn - J2 Σ_nnn + V`. The potential only
/// acts before the quench at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FermionModel {
    pub l: usize,
    pub j1: f64,
    pub j2: f64,
    pub boundary: Boundary,
    pub potential: Vec<f64>,
    pub filling: Filling,
}

impl FermionModel {
    pub fn validate(&self) -> Result<()> {
        if self.l < 4 {
            return Err(Error::config(format!(
                "fermion chain needs L >= 4, got {}",
                self.l
            )));
        }
        if self.j2 != 0.0 && self.l < 6 {
            return Err(Error::config(format!(
                "next-nearest-neighbour hopping needs L >= 6, got {}",
                self.l
            )));
        }
        if self.j1 == 0.0 || !self.j1.is_finite() || !self.j2.is_finite() {
            return Err(Error::config("J1 must be finite and nonzero"));
        }
        if !self.potential.is_empty() && self.potential.len() != self.l {
            return Err(Error::config(format!(
                "potential has {} entries for L = {}",
                self.potential.len(),
                self.l
            )));
        }
        if self.potential.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("potential must be finite"));
        }
        if let Filling::Count(n) = self.filling {
            if n == 0 || n > self.l {
                return Err(Error::config(format!(
                    "particle number {n} outside 1..={}",
                    self.l
                )));
            }
        }
        Ok(())
    }

    /// Effective band mass `1/(2·J1)`.
    pub fn mass(&self) -> f64 {
        1.0 / (2.0 * self.j1)
    }

    pub fn hamiltonian(&self, with_potential: bool) -> DMatrix<f64> {
        let l = self.l;
        let mut h = DMatrix::zeros(l, l);
        let mut hop = |a: usize, b: usize, amp: f64| {
            h[(a, b)] -= amp;
            h[(b, a)] -= amp;
        };
        for i in 0..l {
            for (d, amp) in [(1usize, self.j1), (2, self.j2)] {
                if amp == 0.0 {
                    continue;
                }
                match self.boundary {
                    Boundary::Periodic => hop(i, (i + d) % l, amp),
                    Boundary::Open if i + d < l => hop(i, i + d, amp),
                    Boundary::Open => {}
                }
            }
        }
        if with_potential {
            for (i, v) in self.potential.iter().enumerate() {
                h[(i, i)] += v;
            }
        }
        h
    }

    /// Single-particle band on the ring, `-2J1 cos q - 2J2 cos 2q`.
    pub fn band(&self, q: f64) -> f64 {
        -2.0 * self.j1 * q.cos() - 2.0 * self.j2 * (2.0 * q).cos()
    }
}

/// `V0·exp(-(i - x0)²/σ²)` on sites `0..l`.
pub fn gaussian_potential(l: usize, v0: f64, x0: f64, sigma: f64) -> Vec<f64> {
    (0..l)
        .map(|i| {
            let d = i as f64 - x0;
            v0 * (-d * d / (sigma * sigma)).exp()
        })
        .collect()
}

fn sorted_eigen(h: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |i, c| {
        eig.eigenvectors[(i, order[c])]
    });
    (values, vectors)
}

/// Lowest `N` eigenvectors of the pre-quench Hamiltonian as an `L×N` matrix.
pub fn fermion_ground_state(model: &FermionModel) -> Result<DMatrix<C64>> {
    model.validate()?;
    let (e, u) = sorted_eigen(model.hamiltonian(true));
    let n = match model.filling {
        Filling::Count(n) => n,
        Filling::ChemicalPotential(mu) => e.iter().filter(|&&x| x < mu).count(),
    };
    if n == 0 {
        return Err(Error::config("chemical potential lies below the band"));
    }
    if n < model.l && e[n] - e[n - 1] < 1e-12 {
        return Err(Error::numerical(format!(
            "degenerate Fermi level: levels {} and {} differ by {:.3e}",
            n - 1,
            n,
            e[n] - e[n - 1]
        )));
    }
    Ok(DMatrix::from_fn(model.l, n, |i, k| {
        C64::new(u[(i, k)], 0.0)
    }))
}

/// `G_ab = ⟨c_b† c_a⟩ = (Φ Φ†)_ab`.
pub fn correlation_matrix(phi: &DMatrix<C64>) -> DMatrix<C64> {
    phi * phi.adjoint()
}

fn check_lattice_grid(grid: &Grid, l: usize) -> Result<()> {
    grid.validate()?;
    if grid.nx != l {
        return Err(Error::config(format!(
            "grid has nx = {} but the chain has L = {l}",
            grid.nx
        )));
    }
    if (grid.dx - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!(
            "lattice grids use dx = 1, got {}",
            grid.dx
        )));
    }
    Ok(())
}

enum Propagator {
    Ring {
        axis: SpectralAxis,
        phase: Vec<f64>,
    },
    Dense {
        energies: Vec<f64>,
        basis: DMatrix<C64>,
    },
}

impl Propagator {
    fn new(model: &FermionModel) -> Propagator {
        match model.boundary {
            Boundary::Periodic => {
                let axis = SpectralAxis::new(model.l, 1.0);
                let phase = axis.q().iter().map(|&q| model.band(q)).collect();
                Propagator::Ring { axis, phase }
            }
            Boundary::Open => {
                let (e, u) = sorted_eigen(model.hamiltonian(false));
                Propagator::Dense {
                    energies: e,
                    basis: u.map(|v| C64::new(v, 0.0)),
                }
            }
        }
    }

    /// Orbitals in the propagator's eigenbasis.
    fn to_modes(&self, phi: &DMatrix<C64>) -> DMatrix<C64> {
        match self {
            Propagator::Ring { axis, .. } => {
                let mut out = phi.clone();
                for mut col in out.column_iter_mut() {
                    axis.forward(col.as_mut_slice());
                }
                out
            }
            Propagator::Dense { basis, .. } => basis.adjoint() * phi,
        }
    }

    fn at(&self, modes: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
        match self {
            Propagator::Ring { axis, phase } => {
                let mut out = modes.clone();
                for mut col in out.column_iter_mut() {
                    for (v, e) in col.iter_mut().zip(phase) {
                        *v *= C64::from_polar(1.0, -e * t);
                    }
                    axis.inverse(col.as_mut_slice());
                }
                out
            }
            Propagator::Dense { energies, basis } => {
                let mut c = modes.clone();
                for (k, mut row) in c.row_iter_mut().enumerate() {
                    row *= C64::from_polar(1.0, -energies[k] * t);
                }
                basis * c
            }
        }
    }
}

/// Density and site-centred current of an orbital matrix. The current at
/// site `i` is the mean of the two cut currents adjacent to `i`, so it sits
/// on the same points as the density.
pub fn density_and_current(model: &FermionModel, phi: &DMatrix<C64>) -> (Vec<f64>, Vec<f64>) {
    let l = model.l;
    let rho = (0..l)
        .map(|i| phi.row(i).iter().map(|v| v.norm_sqr()).sum())
        .collect();
    let cut = cut_currents(model, phi);
    let current = (0..l).map(|i| 0.5 * (cut[i] + cut[i + 1])).collect();
    (rho, current)
}

/// Particle flow across the cut left of each site, `L + 1` entries.
/// Entry `i` collects every bond joining a site `< i` to a site `>= i`, so
/// `dρ_i/dt = cut[i] - cut[i + 1]`.
pub fn cut_currents(model: &FermionModel, phi: &DMatrix<C64>) -> Vec<f64> {
    let l = model.l;
    let periodic = model.boundary == Boundary::Periodic;
    // z(i, d) = <c_i^† c_{i-d}>
    let z = |i: usize, d: usize| -> Option<C64> {
        if i >= l && !periodic {
            return None;
        }
        let a = i % l;
        let b = if a >= d {
            a - d
        } else if periodic {
            a + l - d
        } else {
            return None;
        };
        Some(
            phi.row(b)
                .iter()
                .zip(phi.row(a).iter())
                .map(|(x, y)| x * y.conj())
                .sum(),
        )
    };
    let im = |v: Option<C64>| v.map_or(0.0, |c| c.im);
    (0..=l)
        .map(|i| {
            if !periodic && (i == 0 || i == l) {
                return 0.0;
            }
            let mut j = -2.0 * model.j1 * im(z(i, 1));
            if model.j2 != 0.0 {
                j -= 2.0 * model.j2 * im(z(i, 2));
                j -= 2.0 * model.j2 * im(z(i + 1, 2));
            }
            j
        })
        .collect()
}

/// Quench dynamics from `phi0` under the potential-free Hamiltonian.
/// Returns `rho` and `v = j/rho` sampled on `grid`.
pub fn fermion_evolve(model: &FermionModel, grid: &Grid, phi0: &DMatrix<C64>) -> Result<Dataset> {
    fermion_evolve_with(model, grid, phi0, Exec::default())
}

pub fn fermion_evolve_with(
    model: &FermionModel,
    grid: &Grid,
    phi0: &DMatrix<C64>,
    exec: Exec,
) -> Result<Dataset> {
    model.validate()?;
    check_lattice_grid(grid, model.l)?;
    if phi0.nrows() != model.l {
        return Err(Error::config(format!(
            "orbital matrix has {} rows for L = {}",
            phi0.nrows(),
            model.l
        )));
    }
    let n_particles = phi0.norm_squared();
    let prop = Propagator::new(model);
    let modes = prop.to_modes(phi0);
    let slices = par::map_range(exec, grid.nt, |i| {
        let phi = prop.at(&modes, grid.t(i));
        density_and_current(model, &phi)
    });
    let mut rho = Array2::<f64>::zeros((grid.nt, grid.nx));
    let mut vel = Array2::<f64>::zeros((grid.nt, grid.nx));
    for (i, (r, j)) in slices.into_iter().enumerate() {
        let total: f64 = r.iter().sum();
        if (total - n_particles).abs() > 1e-9 * n_particles.max(1.0) {
            return Err(Error::numerical(format!(
                "particle number drifted from {n_particles} to {total} at t = {}",
                grid.t(i)
            )));
        }
        for x in 0..grid.nx {
            if r[x] < 1e-12 {
                return Err(Error::numerical(format!(
                    "density {:.3e} below 1e-12 at t = {}, site {x}; velocity undefined",
                    r[x],
                    grid.t(i)
                )));
            }
            rho[[i, x]] = r[x];
            vel[[i, x]] = j[x] / r[x];
        }
    }
    let mut ds = Dataset::new(grid.clone().periodic(model.boundary == Boundary::Periodic))?;
    ds.add_field(Field::new_real("rho", rho)?.with_parity(Some(Parity::Even), Some(Parity::Even)))?;
    ds.add_field(Field::new_real("v", vel)?.with_parity(Some(Parity::Odd), Some(Parity::Odd)))?;
    ds.meta.insert("model".into(), "fermion".into());
    ds.meta.insert("L".into(), model.l.to_string());
    ds.meta.insert("N".into(), phi0.ncols().to_string());
    ds.meta.insert("J1".into(), model.j1.to_string());
    ds.meta.insert("J2".into(), model.j2.to_string());
    Ok(ds)
}

/// Melting of a step: sites `L/2..L` filled at `t = 0`, free J1 evolution.
/// Returns `u = rho - 1/2`.
///
/// The initial orbitals are site vectors, so the evolved density is a sum of
/// squared propagator entries. The ring propagator is one inverse FFT; the
/// open chain reuses it through the image construction on a ring of
/// `2(L+1)` sites.
pub fn fermion_domain_wall(model: &FermionModel, grid: &Grid) -> Result<Dataset> {
    fermion_domain_wall_with(model, grid, Exec::default())
}

pub fn fermion_domain_wall_with(model: &FermionModel, grid: &Grid, exec: Exec) -> Result<Dataset> {
    if model.j2 != 0.0 {
        return Err(Error::config("domain-wall melting requires J2 = 0"));
    }
    if !model.l.is_multiple_of(2) {
        return Err(Error::config(format!(
            "domain wall needs an even chain, got L = {}",
            model.l
        )));
    }
    let l = model.l;
    if l < 4 || model.j1 == 0.0 {
        return Err(Error::config("domain wall needs L >= 4 and J1 != 0"));
    }
    check_lattice_grid(grid, l)?;
    let ring = match model.boundary {
        Boundary::Periodic => l,
        Boundary::Open => 2 * (l + 1),
    };
    let axis = SpectralAxis::new(ring, 1.0);
    let phase: Vec<f64> = (0..ring)
        .map(|m| -2.0 * model.j1 * (2.0 * PI * m as f64 / ring as f64).cos())
        .collect();
    let slices = par::map_range(exec, grid.nt, |i| {
        let t = grid.t(i);
        let mut g: Vec<C64> = phase.iter().map(|e| C64::from_polar(1.0, -e * t)).collect();
        axis.inverse(&mut g);
        let w = |a: usize, b: usize| -> C64 {
            match model.boundary {
                Boundary::Periodic => g[(a + ring - b) % ring],
                Boundary::Open => {
                    let (sa, sb) = (a + 1, b + 1);
                    g[(sa + ring - sb) % ring] - g[(sa + sb) % ring]
                }
            }
        };
        (0..l)
            .map(|a| (l / 2..l).map(|b| w(a, b).norm_sqr()).sum::<f64>() - 0.5)
            .collect::<Vec<f64>>()
    });
    let mut u = Array2::<f64>::zeros((grid.nt, l));
    for (i, row) in slices.into_iter().enumerate() {
        for (x, v) in row.into_iter().enumerate() {
            u[[i, x]] = v;
        }
    }
    let mut ds = Dataset::new(grid.clone().periodic(model.boundary == Boundary::Periodic))?;
    ds.add_field(Field::new_real("u", u)?.with_parity(Some(Parity::Odd), Some(Parity::Even)))?;
    ds.meta.insert("model".into(), "domain_wall".into());
    ds.meta.insert("L".into(), l.to_string());
    ds.meta.insert("J1".into(), model.j1.to_string());
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    NearestNeighbour,
    LongRange { alpha: f64 },
}

/// Single-magnon sector of an XXZ chain in a site-dependent field.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnonModel {
    pub l: usize,
    pub j: f64,
    pub delta: f64,
    pub field: Vec<f64>,
    pub coupling: Coupling,
    pub boundary: Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavePacket {
    pub amplitude: f64,
    pub x0: f64,
    pub sigma: f64,
    #[serde(default)]
    pub k0: f64,
}

impl WavePacket {
    /// `A·exp(-(x - x0)²/σ² + i k0 x)/sqrt(π σ²)`.
    pub fn sample(&self, x: f64) -> C64 {
        let d = x - self.x0;
        let env = self.amplitude * (-d * d / (self.sigma * self.sigma)).exp()
            / (PI * self.sigma * self.sigma).sqrt();
        C64::from_polar(env, self.k0 * x)
    }
}

impl MagnonModel {
    pub fn validate(&self) -> Result<()> {
        if self.l < 4 {
            return Err(Error::config(format!(
                "magnon chain needs L >= 4, got {}",
                self.l
            )));
        }
        if !self.field.is_empty() && self.field.len() != self.l {
            return Err(Error::config(format!(
                "field has {} entries for L = {}",
                self.field.len(),
                self.l
            )));
        }
        if let Coupling::LongRange { alpha } = self.coupling {
            if !(alpha > 1.0) {
                return Err(Error::config(format!(
                    "long-range exponent must exceed 1, got {alpha}"
                )));
            }
        }
        if !(self.j.is_finite() && self.delta.is_finite())
            || self.field.iter().any(|b| !b.is_finite())
        {
            return Err(Error::config("magnon couplings must be finite"));
        }
        Ok(())
    }

    fn distance(&self, a: usize, b: usize) -> usize {
        let d = a.abs_diff(b);
        match self.boundary {
            Boundary::Periodic => d.min(self.l - d),
            Boundary::Open => d,
        }
    }

    /// Matrix `H` of `i ∂t u = H u`.
    ///
    /// Nearest neighbour: `(J/2)(u_{i+1} + u_{i-1}) - Δ u_i - B_i u_i`.
    /// Long range: `-(J/2) Σ_j u_j/d^α + (Δ/2) u_i Σ_j 1/d^α - B_i u_i`.
    pub fn hamiltonian(&self) -> DMatrix<f64> {
        let l = self.l;
        let mut h = DMatrix::zeros(l, l);
        match self.coupling {
            Coupling::NearestNeighbour => {
                for i in 0..l {
                    h[(i, i)] -= self.delta;
                    let right = match self.boundary {
                        Boundary::Periodic => Some((i + 1) % l),
                        Boundary::Open => (i + 1 < l).then_some(i + 1),
                    };
                    if let Some(r) = right {
                        h[(i, r)] += 0.5 * self.j;
                        h[(r, i)] += 0.5 * self.j;
                    }
                }
            }
            Coupling::LongRange { alpha } => {
                for i in 0..l {
                    let mut diag = 0.0;
                    for k in 0..l {
                        if k == i {
                            continue;
                        }
                        let w = (self.distance(i, k) as f64).powf(-alpha);
                        h[(i, k)] = -0.5 * self.j * w;
                        diag += w;
                    }
                    h[(i, i)] = 0.5 * self.delta * diag;
                }
            }
        }
        for (i, b) in self.field.iter().enumerate() {
            h[(i, i)] -= b;
        }
        h
    }
}

/// Integrates the magnon amplitude with RK4 and samples it on `grid`.
/// The internal step is `min(dt, 0.05/‖H‖)` with `‖H‖` the max row sum.
pub fn magnon_evolve(model: &MagnonModel, grid: &Grid, packet: &WavePacket) -> Result<Dataset> {
    model.validate()?;
    check_lattice_grid(grid, model.l)?;
    if !(packet.sigma > 1.0) {
        return Err(Error::config(format!(
            "packet width must exceed one site, got {}",
            packet.sigma
        )));
    }
    let h = model.hamiltonian();
    let norm = (0..model.l)
        .map(|i| h.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let h_max = if norm > 0.0 { 0.05 / norm } else { grid.dt };
    let substeps = (grid.dt / h_max).ceil().max(1.0) as usize;
    let step = grid.dt / substeps as f64;
    let hc = h.map(|v| C64::new(v, 0.0));
    let rhs =
        |u: &nalgebra::DVector<C64>| -> nalgebra::DVector<C64> { (&hc * u) * C64::new(0.0, -1.0) };

    let mut u = nalgebra::DVector::from_fn(model.l, |i, _| packet.sample(grid.x(i)));
    // advance from t = 0 to the first sample time
    let lead = grid.t0;
    if lead < 0.0 {
        return Err(Error::config("magnon grids start at t0 >= 0"));
    }
    let rk4 = |u: &mut nalgebra::DVector<C64>, h: f64| {
        let k1 = rhs(u);
        let k2 = rhs(&(&*u + &k1 * C64::new(0.5 * h, 0.0)));
        let k3 = rhs(&(&*u + &k2 * C64::new(0.5 * h, 0.0)));
        let k4 = rhs(&(&*u + &k3 * C64::new(h, 0.0)));
        *u +=
            (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0);
    };
    if lead > 0.0 {
        let n = (lead / h_max).ceil().max(1.0) as usize;
        for _ in 0..n {
            rk4(&mut u, lead / n as f64);
        }
    }
    let mut out = Array2::<C64>::zeros((grid.nt, grid.nx));
    for i in 0..grid.nt {
        if i > 0 {
            for _ in 0..substeps {
                rk4(&mut u, step);
            }
        }
        for x in 0..grid.nx {
            out[[i, x]] = u[x];
        }
    }
    let mut ds = Dataset::new(grid.clone().periodic(model.boundary == Boundary::Periodic))?;
    ds.add_field(
        Field::new_complex("u", out)?.with_parity(Some(Parity::Even), Some(Parity::Even)),
    )?;
    ds.meta.insert("model".into(), "magnon".into());
    ds.meta.insert("L".into(), model.l.to_string());
    ds.meta.insert("J".into(), model.j.to_string());
    ds.meta.insert("Delta".into(), model.delta.to_string());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn exp_minus_i(h: &DMatrix<f64>, t: f64) -> DMatrix<C64> {
        let eig = SymmetricEigen::new(h.clone());
        let u = eig.eigenvectors.map(|v| C64::new(v, 0.0));
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| C64::from_polar(1.0, -e * t)));
        &u * d * u.adjoint()
    }

    fn chain(l: usize, boundary: Boundary, n: usize) -> FermionModel {
        FermionModel {
            l,
            j1: 0.5,
            j2: 0.0,
            boundary,
            potential: vec![],
            filling: Filling::Count(n),
        }
    }

    #[test]
    fn half_filled_ring_is_uniform_and_static() {
        let model = chain(10, Boundary::Periodic, 5);
        let phi = fermion_ground_state(&model).unwrap();
        let grid = Grid::new(4, 10, 0.7, 1.0).unwrap();
        let ds = fermion_evolve(&model, &grid, &phi).unwrap();
        for v in ds.field("rho").unwrap().values() {
            assert_abs_diff_eq!(v.re, 0.5, epsilon = 1e-10);
        }
        for v in ds.field("v").unwrap().values() {
            assert_abs_diff_eq!(v.re, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn open_chain_density_matches_sine_modes() {
        let l = 8;
        let model = chain(l, Boundary::Open, 3);
        let phi = fermion_ground_state(&model).unwrap();
        let g = correlation_matrix(&phi);
        for s in 1..=l {
            let expect: f64 = (1..=3)
                .map(|k| {
                    let a = (PI * k as f64 * s as f64 / (l + 1) as f64).sin();
                    2.0 / (l + 1) as f64 * a * a
                })
                .sum();
            assert_abs_diff_eq!(g[(s - 1, s - 1)].re, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_fermi_level_is_an_error() {
        let model = chain(8, Boundary::Periodic, 4);
        let err = fermion_ground_state(&model).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn small_or_inconsistent_models_rejected() {
        assert!(chain(3, Boundary::Open, 1).validate().is_err());
        let mut m = chain(5, Boundary::Open, 1);
        m.j2 = 0.1;
        assert!(m.validate().is_err());
        m.l = 6;
        assert!(m.validate().is_ok());
    }

    /// Two fermions on ten sites: propagate the 45-dimensional many-body
    /// state directly and compare ⟨c_b† c_a⟩ with the orbital route.
    #[test]
    fn orbital_evolution_matches_two_particle_many_body() {
        let l = 10;
        for boundary in [Boundary::Periodic, Boundary::Open] {
            let model = FermionModel {
                l,
                j1: 0.7,
                j2: -0.2,
                boundary,
                potential: (0..l).map(|i| 0.3 * (i as f64 * 0.9).sin()).collect(),
                filling: Filling::Count(2),
            };
            let phi0 = fermion_ground_state(&model).unwrap();
            let h1 = model.hamiltonian(false);
            let pairs: Vec<(usize, usize)> = (0..l)
                .flat_map(|a| (a + 1..l).map(move |b| (a, b)))
                .collect();
            assert_eq!(pairs.len(), 45);
            let index = |a: usize, b: usize| {
                pairs
                    .iter()
                    .position(|&p| p == (a.min(b), a.max(b)))
                    .unwrap()
            };
            // c†_p c_q acting on c†_a c†_b |0> with a < b
            let mut hm = DMatrix::<f64>::zeros(45, 45);
            for (col, &(a, b)) in pairs.iter().enumerate() {
                for p in 0..l {
                    for q in 0..l {
                        let amp = h1[(p, q)];
                        if amp == 0.0 {
                            continue;
                        }
                        if q == a && p != b {
                            let sign = if p < b { 1.0 } else { -1.0 };
                            hm[(index(p, b), col)] += sign * amp;
                        }
                        if q == b && p != a {
                            let sign = if p > a { 1.0 } else { -1.0 };
                            hm[(index(a, p), col)] += sign * amp;
                        }
                    }
                }
            }
            let mut psi0 = nalgebra::DVector::<C64>::zeros(45);
            for (col, &(a, b)) in pairs.iter().enumerate() {
                psi0[col] = phi0[(a, 0)] * phi0[(b, 1)] - phi0[(b, 0)] * phi0[(a, 1)];
            }
            let prop = Propagator::new(&model);
            let modes = prop.to_modes(&phi0);
            for step in 0..5 {
                let t = 0.37 * step as f64;
                let psi = exp_minus_i(&hm, t) * &psi0;
                let g = correlation_matrix(&prop.at(&modes, t));
                for x in 0..l {
                    for y in 0..l {
                        // <c_y† c_x>
                        let mut acc = C64::new(0.0, 0.0);
                        for (col, &(a, b)) in pairs.iter().enumerate() {
                            for (from, other) in [(a, b), (b, a)] {
                                if from != x {
                                    continue;
                                }
                                if y != other {
                                    let s_in = if from < other { 1.0 } else { -1.0 };
                                    let s_out = if y < other { 1.0 } else { -1.0 };
                                    acc += psi[index(y, other)].conj() * psi[col] * (s_in * s_out);
                                } else if x == y {
                                    acc += psi[col].conj() * psi[col];
                                }
                            }
                        }
                        assert_abs_diff_eq!(g[(x, y)].re, acc.re, epsilon = 1e-10);
                        assert_abs_diff_eq!(g[(x, y)].im, acc.im, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn current_obeys_lattice_continuity() {
        let l = 24;
        for boundary in [Boundary::Periodic, Boundary::Open] {
            let model = FermionModel {
                l,
                j1: 0.5,
                j2: -0.125,
                boundary,
                potential: gaussian_potential(l, -0.3, 12.0, 3.0),
                filling: Filling::Count(7),
            };
            let phi0 = fermion_ground_state(&model).unwrap();
            let prop = Propagator::new(&model);
            let modes = prop.to_modes(&phi0);
            let (t, h) = (2.0, 1e-4);
            let (r_plus, _) = density_and_current(&model, &prop.at(&modes, t + h));
            let (r_minus, _) = density_and_current(&model, &prop.at(&modes, t - h));
            let cut = cut_currents(&model, &prop.at(&modes, t));
            for i in 0..l {
                let drho = (r_plus[i] - r_minus[i]) / (2.0 * h);
                assert_abs_diff_eq!(drho, cut[i] - cut[i + 1], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn domain_wall_matches_dense_projector_evolution() {
        for boundary in [Boundary::Open, Boundary::Periodic] {
            let l = 12;
            let model = chain(l, boundary, 1);
            let grid = Grid::new(4, l, 0.9, 1.0).unwrap();
            let ds = fermion_domain_wall(&model, &grid).unwrap();
            let u = ds.field("u").unwrap().real_part();
            let h = model.hamiltonian(false);
            for i in 0..grid.nt {
                let w = exp_minus_i(&h, grid.t(i));
                let mut g0 = DMatrix::<C64>::zeros(l, l);
                for s in l / 2..l {
                    g0[(s, s)] = C64::new(1.0, 0.0);
                }
                let g = &w * g0 * w.adjoint();
                for x in 0..l {
                    assert_abs_diff_eq!(u[[i, x]], g[(x, x)].re - 0.5, epsilon = 1e-12);
                }
                assert_abs_diff_eq!(u.row(i).sum(), 0.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn domain_wall_profile_is_antisymmetric() {
        let l = 40;
        let model = chain(l, Boundary::Open, 1);
        let grid = Grid::new(5, l, 2.0, 1.0).unwrap();
        let u = fermion_domain_wall(&model, &grid)
            .unwrap()
            .field("u")
            .unwrap()
            .real_part();
        for i in 0..5 {
            for x in 0..l {
                assert_abs_diff_eq!(u[[i, x]], -u[[i, l - 1 - x]], epsilon = 1e-12);
            }
        }
        assert!(fermion_domain_wall(
            &chain(41, Boundary::Open, 1),
            &Grid::new(5, 41, 1.0, 1.0).unwrap()
        )
        .is_err());
    }

    fn magnon(l: usize, coupling: Coupling, boundary: Boundary) -> MagnonModel {
        MagnonModel {
            l,
            j: -1.0,
            delta: -0.5,
            field: vec![],
            coupling,
            boundary,
        }
    }

    #[test]
    fn magnon_rk4_matches_matrix_exponential() {
        for coupling in [
            Coupling::NearestNeighbour,
            Coupling::LongRange { alpha: 2.5 },
        ] {
            for boundary in [Boundary::Periodic, Boundary::Open] {
                let mut model = magnon(6, coupling, boundary);
                model.field = vec![0.0, 0.1, 0.0, -0.2, 0.05, 0.0];
                let grid = Grid::new(6, 6, 0.2, 1.0).unwrap();
                let packet = WavePacket {
                    amplitude: 1.0,
                    x0: 2.5,
                    sigma: 1.5,
                    k0: 0.4,
                };
                let ds = magnon_evolve(&model, &grid, &packet).unwrap();
                let u = ds.field("u").unwrap().values();
                let u0 = nalgebra::DVector::from_fn(6, |i, _| packet.sample(i as f64));
                for i in 0..grid.nt {
                    let exact = exp_minus_i(&model.hamiltonian(), grid.t(i)) * &u0;
                    for x in 0..6 {
                        assert!(
                            (u[[i, x]] - exact[x]).norm() < 1e-9,
                            "{coupling:?} {boundary:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn magnon_parameter_errors() {
        let grid = Grid::new(5, 10, 0.1, 1.0).unwrap();
        let packet = WavePacket {
            amplitude: 1.0,
            x0: 5.0,
            sigma: 2.0,
            k0: 0.0,
        };
        let lr = magnon(10, Coupling::LongRange { alpha: 1.0 }, Boundary::Periodic);
        assert!(magnon_evolve(&lr, &grid, &packet).is_err());
        let nn = magnon(10, Coupling::NearestNeighbour, Boundary::Periodic);
        let narrow = WavePacket {
            sigma: 1.0,
            ..packet
        };
        assert!(magnon_evolve(&nn, &grid, &narrow).is_err());
        assert!(magnon_evolve(&nn, &Grid::new(5, 12, 0.1, 1.0).unwrap(), &packet).is_err());
    }

    #[test]
    fn isotropic_point_has_no_onsite_term() {
        let mut m = magnon(8, Coupling::NearestNeighbour, Boundary::Periodic);
        m.delta = m.j;
        let h = m.hamiltonian();
        // row sums of H equal J - Δ, the coefficient of the bare u term
        for i in 0..8 {
            assert_abs_diff_eq!(h.row(i).sum(), 0.0, epsilon = 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn magnon_norm_conserved_and_reversible(k0 in -1.0f64..1.0, x0 in 10.0f64..20.0, lr in any::<bool>()) {
            let coupling = if lr { Coupling::LongRange { alpha: 3.0 } } else { Coupling::NearestNeighbour };
            let model = magnon(30, coupling, Boundary::Periodic);
            let grid = Grid::new(40, 30, 0.05, 1.0).unwrap();
            let packet = WavePacket { amplitude: 1.0, x0, sigma: 3.0, k0 };
            let u = magnon_evolve(&model, &grid, &packet).unwrap().field("u").unwrap().values().clone();
            let n0: f64 = u.row(0).iter().map(|v| v.norm_sqr()).sum();
            let n1: f64 = u.row(39).iter().map(|v| v.norm_sqr()).sum();
            prop_assert!((n1 - n0).abs() < 1e-8 * n0);
            // the Hamiltonian is real, so evolving conj(u(T)) forward undoes the motion
            let h = model.hamiltonian().map(|v| C64::new(v, 0.0));
            let mut back = nalgebra::DVector::from_fn(30, |x, _| u[[39, x]].conj());
            let steps = 40 * 39;
            let dt = grid.dt * 39.0 / steps as f64;
            for _ in 0..steps {
                let f = |w: &nalgebra::DVector<C64>| (&h * w) * C64::new(0.0, -1.0);
                let k1 = f(&back);
                let k2 = f(&(&back + &k1 * C64::new(dt / 2.0, 0.0)));
                let k3 = f(&(&back + &k2 * C64::new(dt / 2.0, 0.0)));
                let k4 = f(&(&back + &k3 * C64::new(dt, 0.0)));
                back += (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0);
            }
            for x in 0..30 {
                prop_assert!((back[x].conj() - u[[0, x]]).norm() < 1e-7);
            }
        }

        #[test]
        fn fermion_number_conserved(n in 1usize..6, v0 in -0.5f64..0.5, j2 in -0.2f64..0.2) {
            let model = FermionModel {
                l: 12,
                j1: 0.5,
                j2,
                boundary: Boundary::Periodic,
                potential: gaussian_potential(12, v0, 6.0, 2.5),
                filling: Filling::Count(n),
            };
            let phi0 = match fermion_ground_state(&model) {
                Ok(p) => p,
                Err(_) => return Ok(()),
            };
            let grid = Grid::new(6, 12, 1.3, 1.0).unwrap();
            if let Ok(ds) = fermion_evolve(&model, &grid, &phi0) {
                let rho = ds.field("rho").unwrap().real_part();
                for i in 0..6 {
                    prop_assert!((rho.row(i).sum() - n as f64).abs() < 1e-9);
                }
            }
        }
    }
}
