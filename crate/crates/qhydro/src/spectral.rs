//! FFT plumbing shared by spectral derivatives, nonlocal kernels and the
//! translation-invariant fermion propagator.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse plans for one axis length plus its angular wavenumbers.
#[derive(Clone)]
pub struct SpectralAxis {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    q: Vec<f64>,
}

impl SpectralAxis {
    pub fn new(n: usize, spacing: f64) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let q = wavenumbers(n, spacing);
        SpectralAxis { n, fwd, inv, q }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Angular wavenumbers in FFT order: `2π m / (n·spacing)`, `m` symmetric.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.fwd.process(buf);
    }

    /// Unnormalised inverse transform.
    pub fn inverse_raw(&self, buf: &mut [Complex64]) {
        self.inv.process(buf);
    }

    /// Inverse transform including the `1/n` factor.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.inv.process(buf);
        let s = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    /// Applies a diagonal Fourier multiplier in place.
    pub fn apply_multiplier(&self, buf: &mut [Complex64], symbol: &[Complex64]) {
        self.forward(buf);
        for (v, s) in buf.iter_mut().zip(symbol) {
            *v *= *s;
        }
        self.inverse(buf);
    }

    /// Symbol of `∂^order`, i.e. `(iq)^order`. For odd orders on an even
    /// grid the Nyquist mode has no consistent sign and is dropped.
    pub fn derivative_symbol(&self, order: u32) -> Vec<Complex64> {
        let i = Complex64::new(0.0, 1.0);
        let nyquist = if self.n.is_multiple_of(2) {
            Some(self.n / 2)
        } else {
            None
        };
        self.q
            .iter()
            .enumerate()
            .map(|(m, &q)| {
                if order % 2 == 1 && Some(m) == nyquist {
                    Complex64::new(0.0, 0.0)
                } else {
                    (i * q).powu(order)
                }
            })
            .collect()
    }
}

pub fn wavenumbers(n: usize, spacing: f64) -> Vec<f64> {
    let scale = 2.0 * PI / (n as f64 * spacing);
    (0..n)
        .map(|m| {
            let k = if m <= n / 2 {
                m as f64
            } else {
                m as f64 - n as f64
            };
            k * scale
        })
        .collect()
}
