//! Periodic uniform grids on a flat torus with spectral differentiation,
//! quadrature, and trigonometric interpolation.
//!
//! A grid has `n` (even) nodes `x_j = −L/2 + jL/n` on a period-`L` torus.
//! Derivatives act through dense circulant differentiation matrices: for
//! `n ≤ 256` per dimension the dense form is simple, exact to compose (the
//! order-2 matrix is literally the square of the order-1 matrix), and mixes
//! cleanly with diagonal coefficient factors in separated operators.
//! Quadrature is the trapezoidal rule, which on a periodic grid has uniform
//! weights `L/n` and integrates trigonometric polynomials of degree `< n`
//! exactly.

use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{CoreError, Result};

/// Shared handle to an immutable grid; tensors and operators hold these.
pub type GridRef = Arc<PeriodicGrid1D>;

/// Uniform periodic grid on `[−L/2, L/2)` with `n` even nodes.
#[derive(Debug)]
pub struct PeriodicGrid1D {
    n: usize,
    l: f64,
    nodes: Array1<f64>,
    d1: OnceLock<Arc<Array2<f64>>>,
    d2: OnceLock<Arc<Array2<f64>>>,
}

impl PartialEq for PeriodicGrid1D {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.l == other.l
    }
}

impl PeriodicGrid1D {
    /// Build a grid with nodes `x_j = −L/2 + jL/n`. Requires even `n ≥ 8`
    /// and `L > 0`.
    pub fn new(n: usize, l: f64) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(CoreError::InvalidGrid(format!(
                "point count must be even and at least 8, got {n}"
            )));
        }
        if !(l > 0.0) || !l.is_finite() {
            return Err(CoreError::InvalidGrid(format!(
                "domain length must be positive and finite, got {l}"
            )));
        }
        let h = l / n as f64;
        let nodes = Array1::from_iter((0..n).map(|j| -l / 2.0 + j as f64 * h));
        Ok(Self {
            n,
            l,
            nodes,
            d1: OnceLock::new(),
            d2: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.l
    }

    pub fn nodes(&self) -> ArrayView1<'_, f64> {
        self.nodes.view()
    }

    /// Uniform trapezoidal quadrature weight `L/n`.
    pub fn weight(&self) -> f64 {
        self.l / self.n as f64
    }

    /// Wrap a point into the fundamental domain `[−L/2, L/2)`.
    pub fn wrap(&self, x: f64) -> f64 {
        let y = x - self.l * ((x + self.l / 2.0) / self.l).floor();
        // Guard against `x + L/2` rounding exactly onto the upper boundary.
        if y >= self.l / 2.0 {
            y - self.l
        } else {
            y
        }
    }

    /// Dense first-derivative matrix of the trigonometric interpolant:
    /// the classical antisymmetric circulant with entries
    /// `(2π/L)·(−1)^{j−k}·cot((j−k)π/n)/2` off the diagonal.
    pub fn diff1(&self) -> Arc<Array2<f64>> {
        self.d1
            .get_or_init(|| {
                let n = self.n;
                let scale = 2.0 * std::f64::consts::PI / self.l;
                let mut m = Array2::zeros((n, n));
                for j in 0..n {
                    for k in 0..n {
                        if j != k {
                            let diff = j as isize - k as isize;
                            let sign = if diff % 2 == 0 { 1.0 } else { -1.0 };
                            let angle = diff as f64 * std::f64::consts::PI / n as f64;
                            m[[j, k]] = scale * 0.5 * sign / angle.tan();
                        }
                    }
                }
                Arc::new(m)
            })
            .clone()
    }

    /// Dense second-derivative matrix, constructed as `D1·D1` so the
    /// order-2 operator is exactly the square of the order-1 operator.
    pub fn diff2(&self) -> Arc<Array2<f64>> {
        self.d2
            .get_or_init(|| {
                let d1 = self.diff1();
                Arc::new(d1.dot(&*d1))
            })
            .clone()
    }

    /// Differentiation matrix of the requested order (1 or 2).
    pub fn diff_matrix(&self, order: u8) -> Result<Arc<Array2<f64>>> {
        match order {
            1 => Ok(self.diff1()),
            2 => Ok(self.diff2()),
            other => Err(CoreError::InvalidGrid(format!(
                "derivative order must be 1 or 2, got {other}"
            ))),
        }
    }

    /// Values of the `n` cardinal interpolation functions at `point`.
    ///
    /// The cardinal function for even `n` is the periodic sinc
    /// `S(s) = sin(nθ)·cos(θ)/(n·sin(θ))` with `θ = πs/L`, which is 1 at
    /// `s = 0`, vanishes at all other nodes, and reproduces every
    /// trigonometric polynomial of degree `< n/2` exactly (with the Nyquist
    /// cosine treated symmetrically).
    pub fn cardinal_weights(&self, point: f64) -> Array1<f64> {
        let mut w = Array1::zeros(self.n);
        for j in 0..self.n {
            let s = self.wrap(point - self.nodes[j]);
            let theta = std::f64::consts::PI * s / self.l;
            let sin_t = theta.sin();
            w[j] = if sin_t == 0.0 {
                // θ = 0 exactly: node coincidence.
                1.0
            } else {
                (self.n as f64 * theta).sin() * theta.cos() / (self.n as f64 * sin_t)
            };
        }
        w
    }
}

/// Construct a shared grid handle.
pub fn make_grid(n: usize, l: f64) -> Result<GridRef> {
    Ok(Arc::new(PeriodicGrid1D::new(n, l)?))
}

/// A dense spectral differentiation matrix bound to its grid.
#[derive(Debug, Clone)]
pub struct SpectralDiff {
    pub grid: GridRef,
    pub order: u8,
    pub matrix: Arc<Array2<f64>>,
}

impl SpectralDiff {
    pub fn new(grid: &GridRef, order: u8) -> Result<Self> {
        Ok(Self {
            grid: grid.clone(),
            order,
            matrix: grid.diff_matrix(order)?,
        })
    }
}

/// Apply a spectral differentiation matrix to nodal values.
pub fn diff_apply(d: &SpectralDiff, values: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if values.len() != d.grid.n() {
        return Err(CoreError::DimensionMismatch(format!(
            "diff_apply: expected {} values, got {}",
            d.grid.n(),
            values.len()
        )));
    }
    Ok(d.matrix.dot(&values))
}

/// Evaluate the degree-`< n/2` trigonometric interpolant of `values` at an
/// arbitrary point (wrapped into the period).
pub fn trig_eval(grid: &PeriodicGrid1D, values: ArrayView1<'_, f64>, point: f64) -> Result<f64> {
    if values.len() != grid.n() {
        return Err(CoreError::DimensionMismatch(format!(
            "trig_eval: expected {} values, got {}",
            grid.n(),
            values.len()
        )));
    }
    Ok(grid.cardinal_weights(point).dot(&values))
}
