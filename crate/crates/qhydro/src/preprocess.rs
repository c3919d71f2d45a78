//! Finite-difference and spectral derivatives, spatial smoothing, temporal
//! resampling and velocity reconstruction from a density.
//!
//! All operators work on the raw `nt×nx` arrays. Cells where a stencil would
//! leave a non-periodic grid are filled with zero; [`trim_mask`] says which
//! cells are trustworthy.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1, Axis as NdAxis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_store::{Dataset, Field, Grid, Parity, C64};
use crate::par::{self, Exec};
use crate::spectral::SpectralAxis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Time,
    Space,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Central2,
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivativeSpec {
    pub axis: Axis,
    pub order: u32,
    pub scheme: Scheme,
}

impl DerivativeSpec {
    pub fn space(order: u32, scheme: Scheme) -> Self {
        DerivativeSpec {
            axis: Axis::Space,
            order,
            scheme,
        }
    }

    pub fn time(order: u32) -> Self {
        DerivativeSpec {
            axis: Axis::Time,
            order,
            scheme: Scheme::Central2,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(1..=4).contains(&self.order) {
            return Err(Error::config(format!(
                "derivative order {} outside 1..=4",
                self.order
            )));
        }
        if self.scheme == Scheme::Spectral {
            if self.axis == Axis::Time {
                return Err(Error::config("spectral derivatives are spatial only"));
            }
            if !grid.periodic_x {
                return Err(Error::config("spectral derivatives need a periodic grid"));
            }
        }
        Ok(())
    }

    /// Cells lost at each non-periodic edge.
    pub fn half_width(&self) -> usize {
        match self.scheme {
            Scheme::Spectral => 0,
            Scheme::Central2 => self.order.div_ceil(2) as usize,
        }
    }
}

/// Symmetric stencils: the order-1 and order-2 central differences, with
/// orders 3 and 4 obtained by composing them.
fn central_stencil(order: u32) -> &'static [f64] {
    match order {
        1 => &[-0.5, 0.0, 0.5],
        2 => &[1.0, -2.0, 1.0],
        3 => &[-0.5, 1.0, 0.0, -1.0, 0.5],
        4 => &[1.0, -4.0, 6.0, -4.0, 1.0],
        _ => unreachable!("order checked by validate"),
    }
}

fn apply_stencil(line: ArrayView1<C64>, stencil: &[f64], scale: f64, periodic: bool) -> Vec<C64> {
    let n = line.len();
    let h = stencil.len() / 2;
    (0..n)
        .map(|i| {
            if !periodic && (i < h || i + h >= n) {
                return C64::new(0.0, 0.0);
            }
            let mut acc = C64::new(0.0, 0.0);
            for (k, w) in stencil.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let j = (i + n + k - h) % n;
                acc += line[j] * *w;
            }
            acc * scale
        })
        .collect()
}

/// Central-difference spatial derivative of one row.
pub(crate) fn central_line(line: &[C64], order: u32, dx: f64, periodic: bool) -> Vec<C64> {
    apply_stencil(
        ArrayView1::from(line),
        central_stencil(order),
        dx.powi(-(order as i32)),
        periodic,
    )
}

/// Derivative of a raw `nt×nx` array.
pub fn derivative(values: &Array2<C64>, grid: &Grid, spec: DerivativeSpec) -> Result<Array2<C64>> {
    derivative_with(values, grid, spec, Exec::default())
}

pub fn derivative_with(
    values: &Array2<C64>,
    grid: &Grid,
    spec: DerivativeSpec,
    exec: Exec,
) -> Result<Array2<C64>> {
    spec.validate(grid)?;
    let (nt, nx) = values.dim();
    let mut out = Array2::<C64>::zeros((nt, nx));
    match (spec.axis, spec.scheme) {
        (Axis::Space, Scheme::Spectral) => {
            let axis = SpectralAxis::new(nx, grid.dx);
            let symbol = axis.derivative_symbol(spec.order);
            let rows = par::map_range(exec, nt, |i| {
                let mut buf = values.row(i).to_vec();
                axis.apply_multiplier(&mut buf, &symbol);
                buf
            });
            for (i, r) in rows.into_iter().enumerate() {
                out.row_mut(i).assign(&ArrayView1::from(&r));
            }
        }
        (Axis::Space, Scheme::Central2) => {
            let scale = grid.dx.powi(-(spec.order as i32));
            let stencil = central_stencil(spec.order);
            let rows = par::map_range(exec, nt, |i| {
                apply_stencil(values.row(i), stencil, scale, grid.periodic_x)
            });
            for (i, r) in rows.into_iter().enumerate() {
                out.row_mut(i).assign(&ArrayView1::from(&r));
            }
        }
        (Axis::Time, _) => {
            let scale = grid.dt.powi(-(spec.order as i32));
            let stencil = central_stencil(spec.order);
            let cols = par::map_range(exec, nx, |j| {
                apply_stencil(values.column(j), stencil, scale, false)
            });
            for (j, c) in cols.into_iter().enumerate() {
                out.column_mut(j).assign(&ArrayView1::from(&c));
            }
        }
    }
    Ok(out)
}

/// Field-level wrapper around [`derivative`]. The result is named
/// `<name>_<axis letter × order>` and inherits the parity flip of the
/// derivative.
pub fn differentiate(f: &Field, grid: &Grid, spec: DerivativeSpec) -> Result<Field> {
    if f.nt() != grid.nt || f.nx() != grid.nx {
        return Err(Error::data(format!(
            "field {} is {}x{} but the grid is {}x{}",
            f.name(),
            f.nt(),
            f.nx(),
            grid.nt,
            grid.nx
        )));
    }
    let d = derivative(f.values(), grid, spec)?;
    let letter = match spec.axis {
        Axis::Time => "t",
        Axis::Space => "x",
    };
    let name = format!("{}_{}", f.name(), letter.repeat(spec.order as usize));
    let flip = |p: Option<Parity>, flips: bool| {
        p.map(|p| {
            if flips && spec.order % 2 == 1 {
                p.flip()
            } else {
                p
            }
        })
    };
    let (p, t) = (
        flip(f.p_parity, spec.axis == Axis::Space),
        flip(f.t_parity, spec.axis == Axis::Time),
    );
    let field = if f.is_complex() {
        Field::new_complex(&name, d)?
    } else {
        Field::new_real(&name, d.mapv(|v| v.re))?
    };
    Ok(field.with_parity(p, t))
}

/// `true` where every stencil in `specs` fits inside the grid.
pub fn trim_mask(grid: &Grid, specs: &[DerivativeSpec]) -> Array2<bool> {
    let mut ht = 0;
    let mut hx = 0;
    for s in specs {
        match s.axis {
            Axis::Time => ht = ht.max(s.half_width()),
            Axis::Space if !grid.periodic_x => hx = hx.max(s.half_width()),
            Axis::Space => {}
        }
    }
    Array2::from_shape_fn((grid.nt, grid.nx), |(i, j)| {
        i >= ht && i + ht < grid.nt && j >= hx && j + hx < grid.nx
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SmootherSpec {
    Gaussian { sigma: f64 },
    SavitzkyGolay { window: usize, order: usize },
}

impl SmootherSpec {
    pub fn validate(&self, nx: usize) -> Result<()> {
        match *self {
            SmootherSpec::Gaussian { sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::config(format!(
                        "gaussian sigma must be positive, got {sigma}"
                    )));
                }
                let len = 2 * (4.0 * sigma).ceil() as usize + 1;
                if len > nx {
                    return Err(Error::config(format!(
                        "gaussian kernel spans {len} points but nx = {nx}"
                    )));
                }
            }
            SmootherSpec::SavitzkyGolay { window, order } => {
                if window % 2 == 0 {
                    return Err(Error::config(format!(
                        "Savitzky-Golay window must be odd, got {window}"
                    )));
                }
                if window < order + 2 {
                    return Err(Error::config(format!(
                        "Savitzky-Golay window {window} too short for order {order}"
                    )));
                }
                if window > nx {
                    return Err(Error::config(format!(
                        "window {window} longer than nx = {nx}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Least-squares polynomial weights: row `s` evaluates the fitted
/// polynomial at offset `s` within the window.
fn savgol_weights(window: usize, order: usize) -> DMatrix<f64> {
    let h = (window / 2) as f64;
    let a = DMatrix::from_fn(window, order + 1, |i, k| (i as f64 - h).powi(k as i32));
    let pinv = (a.transpose() * &a)
        .try_inverse()
        .expect("Vandermonde normal matrix is invertible for window > order")
        * a.transpose();
    a * pinv
}

fn smooth_line(
    line: ArrayView1<C64>,
    spec: &SmootherSpec,
    periodic: bool,
    sg: Option<&DMatrix<f64>>,
) -> Vec<C64> {
    let n = line.len();
    match *spec {
        SmootherSpec::Gaussian { sigma } => {
            let h = (4.0 * sigma).ceil() as isize;
            let w: Vec<f64> = (-h..=h)
                .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
                .collect();
            (0..n as isize)
                .map(|i| {
                    let mut acc = C64::new(0.0, 0.0);
                    let mut norm = 0.0;
                    for d in -h..=h {
                        let j = i + d;
                        let j = if periodic {
                            j.rem_euclid(n as isize)
                        } else if j < 0 || j >= n as isize {
                            continue;
                        } else {
                            j
                        };
                        let wk = w[(d + h) as usize];
                        acc += line[j as usize] * wk;
                        norm += wk;
                    }
                    acc / norm
                })
                .collect()
        }
        SmootherSpec::SavitzkyGolay { window, .. } => {
            let sg = sg.expect("weights prepared for Savitzky-Golay");
            let h = window / 2;
            let centre = sg.row(h);
            (0..n)
                .map(|i| {
                    let (start, row) = if periodic || (i >= h && i + h < n) {
                        ((i + n - h) % n, centre)
                    } else if i < h {
                        (0, sg.row(i))
                    } else {
                        (n - window, sg.row(i + window - n))
                    };
                    let mut acc = C64::new(0.0, 0.0);
                    for (k, w) in row.iter().enumerate() {
                        acc += line[(start + k) % n] * *w;
                    }
                    acc
                })
                .collect()
        }
    }
}

/// Smooths every time slice along x. Non-periodic edges renormalise the
/// truncated Gaussian and fit the Savitzky-Golay polynomial on the first or
/// last full window.
pub fn smooth_values(
    values: &Array2<C64>,
    periodic: bool,
    spec: &SmootherSpec,
) -> Result<Array2<C64>> {
    let (nt, nx) = values.dim();
    spec.validate(nx)?;
    let sg = match *spec {
        SmootherSpec::SavitzkyGolay { window, order } => Some(savgol_weights(window, order)),
        SmootherSpec::Gaussian { .. } => None,
    };
    let rows = par::map_range(Exec::default(), nt, |i| {
        smooth_line(values.row(i), spec, periodic, sg.as_ref())
    });
    let mut out = Array2::zeros((nt, nx));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&ArrayView1::from(&r));
    }
    Ok(out)
}

pub fn smooth(f: &Field, periodic: bool, spec: &SmootherSpec) -> Result<Field> {
    let v = smooth_values(f.values(), periodic, spec)?;
    let out = if f.is_complex() {
        Field::new_complex(f.name(), v)?
    } else {
        Field::new_real(f.name(), v.mapv(|c| c.re))?
    };
    Ok(out.with_parity(f.p_parity, f.t_parity))
}

/// Smooths every field of a dataset.
pub fn smooth_dataset(ds: &Dataset, spec: &SmootherSpec) -> Result<Dataset> {
    let mut out = Dataset::new(ds.grid.clone())?;
    out.meta = ds.meta.clone();
    for f in ds.fields() {
        out.add_field(smooth(f, ds.grid.periodic_x, spec)?)?;
    }
    Ok(out)
}

/// Second derivatives of the not-a-knot cubic spline through equally
/// spaced samples.
fn spline_moments(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let r: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 || i == n - 1 {
                0.0
            } else {
                6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h)
            }
        })
        .collect();
    // Not-a-knot gives M0 = 2M1 - M2 and M_{n-1} = 2M_{n-2} - M_{n-3}; inserting
    // them reduces rows 1 and n-2 to 6·M = r and leaves a tridiagonal system.
    let m = n - 2;
    let (mut sub, mut diag, mut sup, mut rhs) = (
        vec![0.0; m],
        vec![4.0; m],
        vec![0.0; m],
        r[1..n - 1].to_vec(),
    );
    for k in 0..m {
        if k == 0 || k == m - 1 {
            diag[k] = 6.0;
        } else {
            sub[k] = 1.0;
            sup[k] = 1.0;
        }
    }
    for k in 1..m {
        let w = sub[k] / diag[k - 1];
        diag[k] -= w * sup[k - 1];
        rhs[k] -= w * rhs[k - 1];
    }
    let mut inner = vec![0.0; m];
    inner[m - 1] = rhs[m - 1] / diag[m - 1];
    for k in (0..m - 1).rev() {
        inner[k] = (rhs[k] - sup[k] * inner[k + 1]) / diag[k];
    }
    let mut out = vec![0.0; n];
    out[1..n - 1].copy_from_slice(&inner);
    out[0] = 2.0 * out[1] - out[2];
    out[n - 1] = 2.0 * out[n - 2] - out[n - 3];
    out
}

fn spline_eval(y: &[f64], moments: &[f64], h: f64, s: f64) -> f64 {
    let n = y.len();
    let i = ((s / h).floor() as usize).min(n - 2);
    let a = (i as f64 + 1.0) * h - s;
    let b = s - i as f64 * h;
    moments[i] * a * a * a / (6.0 * h)
        + moments[i + 1] * b * b * b / (6.0 * h)
        + (y[i] / h - moments[i] * h / 6.0) * a
        + (y[i + 1] / h - moments[i + 1] * h / 6.0) * b
}

/// Cubic-spline resampling of every field onto `new_nt` equally spaced
/// times covering the same interval.
pub fn resample_time(ds: &Dataset, new_nt: usize) -> Result<Dataset> {
    let g = &ds.grid;
    if new_nt < 3 {
        return Err(Error::config(format!(
            "resampling needs new_nt >= 3, got {new_nt}"
        )));
    }
    if g.nt < 4 {
        return Err(Error::data(format!(
            "cubic resampling needs at least 4 time samples, got {}",
            g.nt
        )));
    }
    if new_nt == g.nt {
        return Ok(ds.clone());
    }
    let span = g.dt * (g.nt - 1) as f64;
    let new_dt = span / (new_nt - 1) as f64;
    let mut grid = g.clone();
    grid.nt = new_nt;
    grid.dt = new_dt;
    let mut out = Dataset::new(grid)?;
    out.meta = ds.meta.clone();
    for f in ds.fields() {
        let cols = par::map_range(Exec::default(), g.nx, |j| {
            let col = f.values().column(j);
            let parts: Vec<Vec<f64>> = [
                col.iter().map(|c| c.re).collect(),
                col.iter().map(|c| c.im).collect(),
            ]
            .into_iter()
            .map(|y: Vec<f64>| {
                let m = spline_moments(&y, g.dt);
                (0..new_nt)
                    .map(|k| spline_eval(&y, &m, g.dt, k as f64 * new_dt))
                    .collect()
            })
            .collect();
            (0..new_nt)
                .map(|k| C64::new(parts[0][k], parts[1][k]))
                .collect::<Vec<_>>()
        });
        let mut vals = Array2::zeros((new_nt, g.nx));
        for (j, c) in cols.into_iter().enumerate() {
            vals.column_mut(j).assign(&ArrayView1::from(&c));
        }
        let nf = if f.is_complex() {
            Field::new_complex(f.name(), vals)?
        } else {
            Field::new_real(f.name(), vals.mapv(|c| c.re))?
        };
        out.add_field(nf.with_parity(f.p_parity, f.t_parity))?;
    }
    Ok(out)
}

pub const DEFAULT_RHO_FLOOR: f64 = 1e-6;

/// Velocity recovered from a density through the continuity equation.
#[derive(Clone, Debug)]
pub struct VelocityReconstruction {
    pub v: Field,
    pub mask: Array2<bool>,
}

/// `v = -(1/ρ) ∫ ∂tρ dx` with the integral accumulated by the trapezoid rule
/// from the left edge. Rows without a central time derivative and cells
/// below `rho_floor` are masked out and hold zero.
pub fn velocity_from_density(
    rho: &Field,
    grid: &Grid,
    rho_floor: f64,
) -> Result<VelocityReconstruction> {
    if rho.is_complex() {
        return Err(Error::data(format!("density {} must be real", rho.name())));
    }
    let rt = derivative(rho.values(), grid, DerivativeSpec::time(1))?;
    let mut mask = trim_mask(grid, &[DerivativeSpec::time(1)]);
    let (nt, nx) = (grid.nt, grid.nx);
    let mut v = Array2::<f64>::zeros((nt, nx));
    for i in 0..nt {
        let mut acc = 0.0;
        for j in 0..nx {
            if j > 0 {
                acc += 0.5 * (rt[[i, j - 1]].re + rt[[i, j]].re) * grid.dx;
            }
            let r = rho.values()[[i, j]].re;
            if r < rho_floor {
                mask[[i, j]] = false;
            } else if mask[[i, j]] {
                v[[i, j]] = -acc / r;
            }
        }
    }
    let v = Field::new_real("v", v)?.with_parity(Some(Parity::Odd), Some(Parity::Odd));
    Ok(VelocityReconstruction { v, mask })
}

/// Mean over all cells where `mask` holds.
pub fn masked_rms(a: &Array2<f64>, mask: &Array2<bool>) -> f64 {
    let (s, n) = a
        .iter()
        .zip(mask.iter())
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Row indices kept by `mask` along time, for callers needing a contiguous
/// valid window.
pub fn valid_rows(mask: &Array2<bool>) -> Vec<usize> {
    mask.axis_iter(NdAxis(0))
        .enumerate()
        .filter(|(_, r)| r.iter().any(|m| *m))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn real(a: Array2<f64>) -> Array2<C64> {
        a.mapv(|v| C64::new(v, 0.0))
    }

    #[test]
    fn constant_has_zero_derivative() {
        let grid = Grid::new(5, 9, 0.1, 0.3).unwrap();
        let v = real(Array2::from_elem((5, 9), 2.5));
        for order in 1..=4 {
            for axis in [Axis::Time, Axis::Space] {
                let d = derivative(
                    &v,
                    &grid,
                    DerivativeSpec {
                        axis,
                        order,
                        scheme: Scheme::Central2,
                    },
                )
                .unwrap();
                assert!(d.iter().all(|c| c.norm() < 1e-9));
            }
        }
    }

    #[test]
    fn spectral_second_derivative_of_sine() {
        let nx = 64;
        let lx = 12.0;
        let grid = Grid::new(3, nx, 1.0, lx / nx as f64)
            .unwrap()
            .periodic(true);
        let k = 2.0 * PI / lx;
        let v = real(Array2::from_shape_fn((3, nx), |(_, j)| {
            (k * grid.x(j)).sin()
        }));
        let d = derivative(&v, &grid, DerivativeSpec::space(2, Scheme::Spectral)).unwrap();
        for j in 0..nx {
            assert_abs_diff_eq!(
                d[[1, j]].re,
                -k * k * (k * grid.x(j)).sin(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn spectral_rejects_open_grid_and_time_axis() {
        let grid = Grid::new(3, 8, 1.0, 1.0).unwrap();
        let v = Array2::zeros((3, 8));
        assert!(derivative(&v, &grid, DerivativeSpec::space(1, Scheme::Spectral)).is_err());
        let p = grid.clone().periodic(true);
        let bad = DerivativeSpec {
            axis: Axis::Time,
            order: 1,
            scheme: Scheme::Spectral,
        };
        assert!(derivative(&v, &p, bad).is_err());
        assert!(derivative(&v, &p, DerivativeSpec::space(5, Scheme::Central2)).is_err());
    }

    fn cubic_error(nx: usize, order: u32) -> f64 {
        let dx = 1.0 / nx as f64;
        let grid = Grid::new(3, nx, 1.0, dx).unwrap();
        let f = |x: f64| (1.3 * x).sin() + x * x * x;
        let exact = |x: f64| match order {
            1 => 1.3 * (1.3 * x).cos() + 3.0 * x * x,
            2 => -1.69 * (1.3 * x).sin() + 6.0 * x,
            3 => -2.197 * (1.3 * x).cos() + 6.0,
            _ => 2.8561 * (1.3 * x).sin(),
        };
        let v = real(Array2::from_shape_fn((3, nx), |(_, j)| f(grid.x(j))));
        let d = derivative(&v, &grid, DerivativeSpec::space(order, Scheme::Central2)).unwrap();
        let h = DerivativeSpec::space(order, Scheme::Central2).half_width();
        (h..nx - h)
            .map(|j| (d[[0, j]].re - exact(grid.x(j))).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn central_differences_are_second_order() {
        for order in 1..=4 {
            let e1 = cubic_error(40, order);
            let e2 = cubic_error(80, order);
            let slope = (e1 / e2).log2();
            assert!((slope - 2.0).abs() < 0.15, "order {order}: slope {slope}");
        }
    }

    #[test]
    fn trim_mask_widths() {
        let grid = Grid::new(10, 12, 0.1, 0.1).unwrap();
        let m = trim_mask(&grid, &[DerivativeSpec::time(2)]);
        assert!(m.row(0).iter().all(|v| !v) && m.row(9).iter().all(|v| !v));
        assert!(m.row(1).iter().all(|v| *v));
        let m3 = trim_mask(&grid, &[DerivativeSpec::space(3, Scheme::Central2)]);
        assert!(!m3[[4, 1]] && m3[[4, 2]] && m3[[4, 9]] && !m3[[4, 10]]);
        let both = trim_mask(
            &grid,
            &[
                DerivativeSpec::time(2),
                DerivativeSpec::space(3, Scheme::Central2),
            ],
        );
        let and = Array2::from_shape_fn((10, 12), |(i, j)| m[[i, j]] && m3[[i, j]]);
        assert_eq!(both, and);
        let p = grid.clone().periodic(true);
        let ms = trim_mask(
            &p,
            &[
                DerivativeSpec::time(1),
                DerivativeSpec::space(4, Scheme::Spectral),
            ],
        );
        assert!(ms.row(0).iter().all(|v| !v));
        assert!(ms.row(5).iter().all(|v| *v));
    }

    #[test]
    fn smoothers_fix_constants_and_reject_long_windows() {
        let v = real(Array2::from_elem((3, 30), 1.7));
        for spec in [
            SmootherSpec::Gaussian { sigma: 2.0 },
            SmootherSpec::SavitzkyGolay {
                window: 11,
                order: 2,
            },
        ] {
            for periodic in [false, true] {
                let s = smooth_values(&v, periodic, &spec).unwrap();
                assert!(s.iter().all(|c| (c.re - 1.7).abs() < 1e-12));
            }
        }
        assert!(smooth_values(
            &v,
            false,
            &SmootherSpec::SavitzkyGolay {
                window: 31,
                order: 2
            }
        )
        .is_err());
        assert!(smooth_values(
            &v,
            false,
            &SmootherSpec::SavitzkyGolay {
                window: 4,
                order: 2
            }
        )
        .is_err());
        assert!(smooth_values(
            &v,
            false,
            &SmootherSpec::SavitzkyGolay {
                window: 3,
                order: 2
            }
        )
        .is_err());
        assert!(smooth_values(&v, false, &SmootherSpec::Gaussian { sigma: 4.0 }).is_err());
    }

    #[test]
    fn savgol_reproduces_quadratics_everywhere() {
        let nx = 50;
        let v = real(Array2::from_shape_fn((2, nx), |(_, j)| {
            let x = j as f64;
            0.3 * x * x - 2.0 * x + 1.0
        }));
        let s = smooth_values(
            &v,
            false,
            &SmootherSpec::SavitzkyGolay {
                window: 41,
                order: 2,
            },
        )
        .unwrap();
        for j in 0..nx {
            assert_abs_diff_eq!(s[[0, j]].re, v[[0, j]].re, epsilon = 1e-8);
        }
    }

    #[test]
    fn gaussian_suppresses_high_frequencies() {
        use rand::{Rng, SeedableRng};
        let nx = 1000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v = real(Array2::from_shape_fn((1, nx), |_| {
            rng.random::<f64>() - 0.5
        }));
        // σ_x = 2.5e-2 of the system size
        let sigma = 0.025 * nx as f64;
        let s = smooth_values(&v, true, &SmootherSpec::Gaussian { sigma }).unwrap();
        let axis = SpectralAxis::new(nx, 1.0);
        let power = |a: &Array2<C64>| {
            let mut buf = a.row(0).to_vec();
            axis.forward(&mut buf);
            buf
        };
        let (p0, p1) = (power(&v), power(&s));
        let cutoff = 1.0 / sigma;
        let band = |p: &[C64]| -> f64 {
            axis.q()
                .iter()
                .zip(p)
                .filter(|(q, _)| q.abs() > 2.0 * cutoff)
                .map(|(_, c)| c.norm_sqr())
                .sum()
        };
        assert!(band(&p0) > 100.0 * band(&p1));
    }

    #[test]
    fn resample_reproduces_cubics_and_samples() {
        let grid = Grid::new(7, 5, 0.5, 1.0).unwrap();
        let f = |t: f64, x: f64| 0.2 * t * t * t - t * t + x * t + 3.0;
        let v = Array2::from_shape_fn((7, 5), |(i, j)| f(grid.t(i), grid.x(j)));
        let ds = Dataset::new(grid.clone())
            .unwrap()
            .with_field(Field::new_real("u", v).unwrap())
            .unwrap();
        let r = resample_time(&ds, 200).unwrap();
        let u = r.field("u").unwrap().real_part();
        for i in 0..200 {
            for j in 0..5 {
                assert_abs_diff_eq!(u[[i, j]], f(r.grid.t(i), grid.x(j)), epsilon = 1e-9);
            }
        }
        let same = resample_time(&ds, 7).unwrap();
        assert_eq!(
            same.field("u").unwrap().values(),
            ds.field("u").unwrap().values()
        );
        let twice = resample_time(&ds, 13).unwrap();
        for i in 0..7 {
            assert_abs_diff_eq!(
                twice.field("u").unwrap().values()[[2 * i, 3]].re,
                f(grid.t(i), 3.0),
                epsilon = 1e-12
            );
        }
        let short = Dataset::new(Grid::new(3, 5, 1.0, 1.0).unwrap()).unwrap();
        assert!(resample_time(&short, 10).is_err());
    }

    #[test]
    fn stationary_density_has_zero_velocity() {
        let grid = Grid::new(6, 20, 0.1, 1.0).unwrap();
        let rho = Field::new_real(
            "rho",
            Array2::from_shape_fn((6, 20), |(_, j)| 1.0 + 0.1 * j as f64),
        )
        .unwrap();
        let rec = velocity_from_density(&rho, &grid, DEFAULT_RHO_FLOOR).unwrap();
        assert!(rec.v.values().iter().all(|c| c.norm() < 1e-12));
        assert!(!rec.mask[[0, 3]] && rec.mask[[1, 3]]);
    }

    #[test]
    fn translating_profile_recovers_its_speed() {
        let c = 0.7;
        let grid = Grid::new(40, 400, 0.05, 0.1).unwrap();
        let prof = |x: f64| 0.2 + (-(x - 15.0) * (x - 15.0) / 4.0).exp();
        let rho = Field::new_real(
            "rho",
            Array2::from_shape_fn((40, 400), |(i, j)| prof(grid.x(j) - c * grid.t(i))),
        )
        .unwrap();
        let rec = velocity_from_density(&rho, &grid, DEFAULT_RHO_FLOOR).unwrap();
        // ∂tρ = -c ρ_x, so v = c (ρ - ρ(left edge))/ρ
        for i in 1..39 {
            for j in 0..400 {
                let r = prof(grid.x(j) - c * grid.t(i));
                let expect = c * (r - prof(grid.x(0) - c * grid.t(i))) / r;
                assert_abs_diff_eq!(rec.v.values()[[i, j]].re, expect, epsilon = 2e-3);
            }
        }
    }

    #[test]
    fn vacuum_is_masked_not_divided() {
        let grid = Grid::new(5, 10, 0.1, 1.0).unwrap();
        let rho = Field::new_real(
            "rho",
            Array2::from_shape_fn(
                (5, 10),
                |(i, j)| if j < 3 { 0.0 } else { 0.5 + 0.01 * i as f64 },
            ),
        )
        .unwrap();
        let rec = velocity_from_density(&rho, &grid, DEFAULT_RHO_FLOOR).unwrap();
        assert!(!rec.mask[[2, 1]]);
        assert!(rec.v.values().iter().all(|c| c.re.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn derivative_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            seed in 0u64..1000,
            order in 1u32..=4,
            spectral in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let grid = Grid::new(6, 16, 0.2, 0.5).unwrap().periodic(true);
            let f = Array2::from_shape_fn((6, 16), |_| C64::new(rng.random(), rng.random()));
            let g = Array2::from_shape_fn((6, 16), |_| C64::new(rng.random(), 0.0));
            let scheme = if spectral { Scheme::Spectral } else { Scheme::Central2 };
            let spec = DerivativeSpec::space(order, scheme);
            let lhs = derivative(&(&f * a + &g * b), &grid, spec).unwrap();
            let rhs = derivative(&f, &grid, spec).unwrap() * a + derivative(&g, &grid, spec).unwrap() * b;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).norm() < 1e-9 * (1.0 + y.norm()));
            }
        }

        #[test]
        fn smoothing_is_linear(a in -2.0f64..2.0, seed in 0u64..1000, sg in any::<bool>(), periodic in any::<bool>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = Array2::from_shape_fn((2, 40), |_| C64::new(rng.random(), 0.0));
            let g = Array2::from_shape_fn((2, 40), |_| C64::new(rng.random(), 0.0));
            let spec = if sg { SmootherSpec::SavitzkyGolay { window: 9, order: 3 } } else { SmootherSpec::Gaussian { sigma: 1.5 } };
            let lhs = smooth_values(&(&f * a + &g), periodic, &spec).unwrap();
            let rhs = smooth_values(&f, periodic, &spec).unwrap() * a + smooth_values(&g, periodic, &spec).unwrap();
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).norm() < 1e-12);
            }
        }
    }
}
