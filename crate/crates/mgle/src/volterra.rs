//! Linear Volterra integral equations of the second kind on uniform time
//! grids, discretized with the composite trapezoid rule and an implicit
//! diagonal solve. Second-order accurate for continuous data.

use num_complex::Complex64;

use crate::error::{MgleError, Result};

/// Uniform time grid t_k = t0 + k dt, k = 0..count-1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, count: usize) -> Self {
        assert!(dt > 0.0, "dt must be positive");
        assert!(count >= 2, "grid needs at least two nodes");
        Self { t0, dt, count }
    }

    /// Grid starting at zero covering [0, t_max].
    pub fn from_span(t_max: f64, dt: f64) -> Self {
        assert!(t_max > 0.0 && dt > 0.0);
        let count = (t_max / dt).round() as usize + 1;
        Self::new(0.0, dt, count.max(2))
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|k| self.node(k))
    }

    pub fn t_max(&self) -> f64 {
        self.node(self.count - 1)
    }

    /// Index of a grid-commensurate time, or an error naming the nearest node.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let raw = (t - self.t0) / self.dt;
        let k = raw.round();
        if (raw - k).abs() > 1e-9 * (1.0 + raw.abs()) || k < 0.0 || k as usize >= self.count {
            return Err(MgleError::OffGrid {
                t,
                nearest: self.t0 + k.clamp(0.0, (self.count - 1) as f64) * self.dt,
            });
        }
        Ok(k as usize)
    }

    fn matches(&self, other: &TimeGrid) -> Result<()> {
        if (self.t0 - other.t0).abs() > 1e-12
            || (self.dt - other.dt).abs() > 1e-12 * self.dt
            || self.count != other.count
        {
            return Err(MgleError::GridMismatch {
                detail: format!("{self:?} vs {other:?}"),
            });
        }
        Ok(())
    }

    fn require_zero_origin(&self) -> Result<()> {
        if self.t0.abs() > 1e-12 {
            return Err(MgleError::NonzeroOrigin { t0: self.t0 });
        }
        Ok(())
    }
}

/// Complex-valued function sampled on a grid.
#[derive(Debug, Clone)]
pub struct Series {
    pub grid: TimeGrid,
    pub values: Vec<Complex64>,
}

impl Series {
    pub fn new(grid: TimeGrid, values: Vec<Complex64>) -> Self {
        assert_eq!(values.len(), grid.count, "series length must match grid");
        Self { grid, values }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> Complex64) -> Self {
        let values = grid.nodes().map(f).collect();
        Self { grid, values }
    }

    pub fn constant(grid: TimeGrid, value: Complex64) -> Self {
        Self {
            values: vec![value; grid.count],
            grid,
        }
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self::constant(grid, Complex64::new(0.0, 0.0))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Series) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Lower-triangular two-time field V(t_k, t_j), k >= j, packed row-wise.
#[derive(Debug, Clone)]
pub struct TwoTimeField {
    pub grid: TimeGrid,
    values: Vec<Complex64>,
}

impl TwoTimeField {
    pub fn zeros(grid: TimeGrid) -> Self {
        let n = grid.count;
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); n * (n + 1) / 2],
        }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let mut field = Self::zeros(grid);
        for k in 0..grid.count {
            for j in 0..=k {
                field.set(k, j, f(grid.node(k), grid.node(j)));
            }
        }
        field
    }

    #[inline]
    fn offset(k: usize, j: usize) -> usize {
        debug_assert!(j <= k, "two-time field is lower triangular");
        k * (k + 1) / 2 + j
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> Complex64 {
        self.values[Self::offset(k, j)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, j: usize, value: Complex64) {
        self.values[Self::offset(k, j)] = value;
    }

    /// Row at fixed t_k as a series over s in [t0, t_k].
    pub fn row(&self, k: usize) -> Series {
        let grid = TimeGrid::new(self.grid.t0, self.grid.dt, (k + 1).max(2));
        let mut values: Vec<Complex64> = (0..=k).map(|j| self.get(k, j)).collect();
        if values.len() == 1 {
            values.push(values[0]);
        }
        Series::new(grid, values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Solve K(t) = g(t) - int_0^t K(t-s) h(s) ds by trapezoidal marching.
///
/// K(0) = g(0) and for n >= 1:
/// K(t_n) (1 + (dt/2) h(0)) = g(t_n) - dt [ K(0) h(t_n) / 2
///                            + sum_{j=1}^{n-1} K(t_{n-j}) h(t_j) ].
pub fn solve_convolution(g: &Series, h: &Series) -> Result<Series> {
    g.grid.matches(&h.grid)?;
    g.grid.require_zero_origin()?;
    let n = g.grid.count;
    let dt = g.grid.dt;
    let march = Complex64::new(1.0, 0.0) + h.values[0] * (dt / 2.0);
    if march.norm() < 1e-10 {
        return Err(MgleError::NearSingularMarch {
            factor_name: "1 + (dt/2) h(0)",
            value: march.norm(),
        });
    }
    let mut k = vec![Complex64::new(0.0, 0.0); n];
    k[0] = g.values[0];
    for i in 1..n {
        let mut acc = k[0] * h.values[i] * 0.5;
        for j in 1..i {
            acc += k[i - j] * h.values[j];
        }
        k[i] = (g.values[i] - acc * dt) / march;
    }
    Ok(Series::new(g.grid, k))
}

/// Trapezoid evaluation of (K * C)(t_n) = int_0^{t_n} K(t_n - s) C(s) ds
/// at every node; the value at t = 0 is 0.
pub fn convolve(kernel: &Series, c: &Series) -> Result<Series> {
    kernel.grid.matches(&c.grid)?;
    kernel.grid.require_zero_origin()?;
    let n = kernel.grid.count;
    let dt = kernel.grid.dt;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for i in 1..n {
        let mut acc = kernel.values[i] * c.values[0] * 0.5
            + kernel.values[0] * c.values[i] * 0.5;
        for j in 1..i {
            acc += kernel.values[i - j] * c.values[j];
        }
        out[i] = acc * dt;
    }
    Ok(Series::new(kernel.grid, out))
}

/// Simpson-rule evaluation of the same convolution, used as an independent
/// quadrature when verifying extracted kernels. Falls back to the 3/8 rule
/// on the trailing interval block for odd interval counts and to the
/// trapezoid rule on a single interval.
pub fn convolve_simpson(kernel: &Series, c: &Series) -> Result<Series> {
    kernel.grid.matches(&c.grid)?;
    kernel.grid.require_zero_origin()?;
    let n = kernel.grid.count;
    let dt = kernel.grid.dt;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    let term = |i: usize, j: usize| kernel.values[i - j] * c.values[j];
    for i in 1..n {
        out[i] = quad_weights(i)
            .iter()
            .enumerate()
            .map(|(j, w)| term(i, j) * *w)
            .sum::<Complex64>()
            * dt;
    }
    Ok(Series::new(kernel.grid, out))
}

/// Quadrature rule selector for verification-side integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrature {
    Trapezoid,
    Simpson,
}

/// Node weights for integrating over m intervals with the selected rule
/// (multiply by dt).
pub fn quadrature_weights(quad: Quadrature, m: usize) -> Vec<f64> {
    match quad {
        Quadrature::Trapezoid => {
            let mut w = vec![1.0; m + 1];
            w[0] = 0.5;
            w[m] = 0.5;
            w
        }
        Quadrature::Simpson => quad_weights(m),
    }
}

/// Composite Simpson weights over m intervals (m+1 nodes), with a 3/8 tail
/// for odd m > 1 and trapezoid weights for m = 1.
fn quad_weights(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.5, 0.5];
    }
    let mut w = vec![0.0f64; m + 1];
    let simpson_intervals = if m % 2 == 0 { m } else { m - 3 };
    let mut idx = 0;
    while idx + 2 <= simpson_intervals {
        w[idx] += 1.0 / 3.0;
        w[idx + 1] += 4.0 / 3.0;
        w[idx + 2] += 1.0 / 3.0;
        idx += 2;
    }
    if m % 2 == 1 {
        // Newton-Cotes 3/8 rule over the last three intervals.
        let base = m - 3;
        w[base] += 3.0 / 8.0;
        w[base + 1] += 9.0 / 8.0;
        w[base + 2] += 9.0 / 8.0;
        w[base + 3] += 3.0 / 8.0;
    }
    w
}

/// Solve the two-time equation K(t,s) = -G(t,s) + int_s^t K(t,r) H(r,s) dr
/// for every row t = t_k, marching s downward from the diagonal.
pub fn solve_two_time(g: &TwoTimeField, h: &TwoTimeField) -> Result<TwoTimeField> {
    g.grid.matches(&h.grid)?;
    let mut k = TwoTimeField::zeros(g.grid);
    for row in 0..g.grid.count {
        solve_two_time_row(g, h, row, &mut k)?;
    }
    Ok(k)
}

/// Single row of the two-time solve; returns K(t_k, s) for s in [t0, t_k].
pub fn solve_two_time_row_series(
    g: &TwoTimeField,
    h: &TwoTimeField,
    row: usize,
) -> Result<Series> {
    g.grid.matches(&h.grid)?;
    let mut k = TwoTimeField::zeros(g.grid);
    solve_two_time_row(g, h, row, &mut k)?;
    Ok(k.row(row))
}

fn solve_two_time_row(
    g: &TwoTimeField,
    h: &TwoTimeField,
    row: usize,
    k: &mut TwoTimeField,
) -> Result<()> {
    let dt = g.grid.dt;
    k.set(row, row, -g.get(row, row));
    for j in (0..row).rev() {
        let march = Complex64::new(1.0, 0.0) - h.get(j, j) * (dt / 2.0);
        if march.norm() < 1e-10 {
            return Err(MgleError::NearSingularMarch {
                factor_name: "1 - (dt/2) H(s,s)",
                value: march.norm(),
            });
        }
        let mut acc = k.get(row, row) * h.get(row, j) * 0.5;
        for m in (j + 1)..row {
            acc += k.get(row, m) * h.get(m, j);
        }
        k.set(row, j, (-g.get(row, j) + acc * dt) / march);
    }
    Ok(())
}
