//! Leapfrog integrator for `u_tt = u_xx + F(u)` on a uniform 1D grid.
//!
//! The time step always equals the grid spacing (CFL number one). With that
//! choice the update for interior nodes collapses to
//!
//! ```text
//! U[i]^{n+1} = U[i+1]^n + U[i-1]^n - U[i]^{n-1} + dt^2 F(U[i]^n)
//! ```
//!
//! which propagates the linear part exactly along characteristics.

use thiserror::Error;

/// Default cap on `|U|` before a slice is flagged as overflowed.
pub const DEFAULT_OVERFLOW_GUARD: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("exponent must satisfy p > 1, got {0}")]
    InvalidExponent(f64),
    #[error("u^p undefined for u = {u} with non-integer p = {p}")]
    Domain { u: f64, p: f64 },
    #[error("slice has {got} values, grid expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("slices are not consecutive: prev n = {prev}, curr n = {curr}")]
    NotConsecutive { prev: u64, curr: u64 },
    #[error("boundary values must be given iff the grid is Dirichlet")]
    BoundaryMismatch,
    #[error("level overflowed; refusing to step")]
    Overflowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Topology {
    /// Node `n_cells` is identified with node 0.
    Periodic,
    /// End nodes carry prescribed boundary values.
    Dirichlet,
}

/// Uniform grid. The time step is the spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    n_cells: usize,
    spacing: f64,
    x_left: f64,
    topology: Topology,
}

impl GridSpec {
    pub fn new(
        n_cells: usize,
        spacing: f64,
        x_left: f64,
        topology: Topology,
    ) -> Result<Self, SolverError> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(SolverError::InvalidGrid(format!(
                "spacing must be positive, got {spacing}"
            )));
        }
        // A Dirichlet child spawned from a one-cell window with 1/lambda = 2
        // has two cells and one free node; anything smaller has none.
        let min_cells = match topology {
            Topology::Periodic => 3,
            Topology::Dirichlet => 2,
        };
        if n_cells < min_cells {
            return Err(SolverError::InvalidGrid(format!(
                "{topology:?} grid needs at least {min_cells} cells, got {n_cells}"
            )));
        }
        if !x_left.is_finite() {
            return Err(SolverError::InvalidGrid("x_left must be finite".into()));
        }
        Ok(Self {
            n_cells,
            spacing,
            x_left,
            topology,
        })
    }

    /// Base grid on the unit interval, `spacing = 1 / n_cells`.
    pub fn unit(n_cells: usize, topology: Topology) -> Result<Self, SolverError> {
        Self::new(n_cells, 1.0 / n_cells as f64, 0.0, topology)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dt(&self) -> f64 {
        self.spacing
    }

    pub fn x_left(&self) -> f64 {
        self.x_left
    }

    pub fn x_right(&self) -> f64 {
        self.x_left + self.n_cells as f64 * self.spacing
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    /// Number of stored values per slice.
    pub fn node_count(&self) -> usize {
        match self.topology {
            Topology::Periodic => self.n_cells,
            Topology::Dirichlet => self.n_cells + 1,
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_left + i as f64 * self.spacing
    }

    /// Coordinates of every stored node.
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.node_count()).map(|i| self.x(i)).collect()
    }

    /// Samples `f` at every stored node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.node_count()).map(|i| f(self.x(i))).collect()
    }

    fn check_len(&self, values: &[f64]) -> Result<(), SolverError> {
        if values.len() != self.node_count() {
            return Err(SolverError::LengthMismatch {
                expected: self.node_count(),
                got: values.len(),
            });
        }
        Ok(())
    }
}

/// Grid values at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSlice {
    pub values: Vec<f64>,
    pub time_index: u64,
    pub time: f64,
    pub overflowed: bool,
}

impl FieldSlice {
    pub fn new(values: Vec<f64>, time_index: u64, time: f64) -> Self {
        Self {
            values,
            time_index,
            time,
            overflowed: false,
        }
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn abs_max(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn flag_overflow(&mut self, guard: f64) {
        self.overflowed = self
            .values
            .iter()
            .any(|v| !v.is_finite() || v.abs() > guard);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Power { p: f64, int_p: Option<i32> },
    Zero,
}

/// The source term `F`. Only the power law `F(u) = u^p` is supported; the
/// zero source exists so linear properties of the scheme can be checked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nonlinearity {
    kind: Kind,
}

impl Nonlinearity {
    pub fn power(p: f64) -> Result<Self, SolverError> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(SolverError::InvalidExponent(p));
        }
        let int_p = (p.fract() == 0.0 && p <= i32::MAX as f64).then_some(p as i32);
        Ok(Self {
            kind: Kind::Power { p, int_p },
        })
    }

    /// `F = 0`.
    pub fn zero() -> Self {
        Self { kind: Kind::Zero }
    }

    pub fn exponent(&self) -> Option<f64> {
        match self.kind {
            Kind::Power { p, .. } => Some(p),
            Kind::Zero => None,
        }
    }

    /// `F(u)`. Integer exponents use a plain integer power, so negative
    /// arguments are fine there; fractional exponents reject `u < 0`.
    pub fn eval(&self, u: f64) -> Result<f64, SolverError> {
        match self.kind {
            Kind::Zero => Ok(0.0),
            Kind::Power { int_p: Some(n), .. } => Ok(u.powi(n)),
            Kind::Power { p, int_p: None } => {
                if u < 0.0 {
                    Err(SolverError::Domain { u, p })
                } else {
                    Ok(u.powf(p))
                }
            }
        }
    }
}

/// `f_eval`: free-function form of [`Nonlinearity::eval`].
pub fn f_eval(nl: &Nonlinearity, u: f64) -> Result<f64, SolverError> {
    nl.eval(u)
}

/// Builds `U^0` and `U^1` from sampled `u0`, `u1`.
///
/// `U^1 = u0 + dt u1 + (dt^2 / 2 dx^2)(u0[i+1] - 2 u0[i] + u0[i-1]) + (dt^2/2) F(u0)`.
/// Dirichlet grids take their `U^1` end values from `boundary_at_1`.
pub fn init_slices(
    grid: &GridSpec,
    nl: &Nonlinearity,
    u0: &[f64],
    u1: &[f64],
    boundary_at_1: Option<(f64, f64)>,
) -> Result<(FieldSlice, FieldSlice), SolverError> {
    grid.check_len(u0)?;
    grid.check_len(u1)?;
    let dt = grid.dt();
    let ratio = 0.5 * (dt / grid.spacing()).powi(2);
    let n = u0.len();
    let mut next = vec![0.0; n];
    match (grid.topology(), boundary_at_1) {
        (Topology::Periodic, None) => {
            for i in 0..n {
                let l = u0[(i + n - 1) % n];
                let r = u0[(i + 1) % n];
                next[i] = u0[i]
                    + dt * u1[i]
                    + ratio * (r - 2.0 * u0[i] + l)
                    + 0.5 * dt * dt * nl.eval(u0[i])?;
            }
        }
        (Topology::Dirichlet, Some((left, right))) => {
            for i in 1..n - 1 {
                next[i] = u0[i]
                    + dt * u1[i]
                    + ratio * (u0[i + 1] - 2.0 * u0[i] + u0[i - 1])
                    + 0.5 * dt * dt * nl.eval(u0[i])?;
            }
            next[0] = left;
            next[n - 1] = right;
        }
        _ => return Err(SolverError::BoundaryMismatch),
    }
    let s0 = FieldSlice::new(u0.to_vec(), 0, 0.0);
    let s1 = FieldSlice::new(next, 1, dt);
    Ok((s0, s1))
}

/// One leapfrog step. The result is flagged `overflowed` when any value is
/// non-finite or exceeds `guard` in magnitude.
pub fn step(
    grid: &GridSpec,
    nl: &Nonlinearity,
    prev: &FieldSlice,
    curr: &FieldSlice,
    boundary: Option<(f64, f64)>,
    guard: f64,
) -> Result<FieldSlice, SolverError> {
    check_pair(grid, prev, curr, boundary)?;
    if prev.overflowed || curr.overflowed {
        return Err(SolverError::Overflowed);
    }
    let values = advance_values(grid, nl, &prev.values, &curr.values, boundary, None)?;
    let mut next = FieldSlice::new(values, curr.time_index + 1, next_time(grid, curr));
    next.flag_overflow(guard);
    Ok(next)
}

/// Node-wise freeze-and-flag variant of [`step`] used on the base level.
///
/// A node is tainted when its new value leaves the guard or when any value in
/// its stencil is tainted; tainted nodes keep their previous value. Taint thus
/// spreads one cell per step, which is the dependence cone at CFL one.
pub fn step_frozen(
    grid: &GridSpec,
    nl: &Nonlinearity,
    prev: &FieldSlice,
    curr: &FieldSlice,
    boundary: Option<(f64, f64)>,
    guard: f64,
    taint: &mut [bool],
) -> Result<FieldSlice, SolverError> {
    check_pair(grid, prev, curr, boundary)?;
    if taint.len() != grid.node_count() {
        return Err(SolverError::LengthMismatch {
            expected: grid.node_count(),
            got: taint.len(),
        });
    }
    let values = advance_values(grid, nl, &prev.values, &curr.values, boundary, Some(taint))?;
    let mut out = values;
    for (v, (t, old)) in out.iter_mut().zip(taint.iter_mut().zip(&curr.values)) {
        if *t || !v.is_finite() || v.abs() > guard {
            *t = true;
            *v = *old;
        }
    }
    Ok(FieldSlice::new(
        out,
        curr.time_index + 1,
        next_time(grid, curr),
    ))
}

fn next_time(grid: &GridSpec, curr: &FieldSlice) -> f64 {
    (curr.time_index + 1) as f64 * grid.dt()
}

fn check_pair(
    grid: &GridSpec,
    prev: &FieldSlice,
    curr: &FieldSlice,
    boundary: Option<(f64, f64)>,
) -> Result<(), SolverError> {
    grid.check_len(&prev.values)?;
    grid.check_len(&curr.values)?;
    if prev.time_index + 1 != curr.time_index {
        return Err(SolverError::NotConsecutive {
            prev: prev.time_index,
            curr: curr.time_index,
        });
    }
    match (grid.topology(), boundary) {
        (Topology::Periodic, None) | (Topology::Dirichlet, Some(_)) => Ok(()),
        _ => Err(SolverError::BoundaryMismatch),
    }
}

// Taint (when given) is read before the update and widened in place: a node
// whose stencil touches a tainted node becomes tainted.
fn advance_values(
    grid: &GridSpec,
    nl: &Nonlinearity,
    prev: &[f64],
    curr: &[f64],
    boundary: Option<(f64, f64)>,
    taint: Option<&mut [bool]>,
) -> Result<Vec<f64>, SolverError> {
    let n = curr.len();
    let dt2 = grid.dt() * grid.dt();
    let periodic = grid.topology() == Topology::Periodic;
    let old_taint: Option<Vec<bool>> = taint.as_ref().map(|t| t.to_vec());
    let mut next = vec![0.0; n];
    let (lo, hi) = if periodic { (0, n) } else { (1, n - 1) };
    for i in lo..hi {
        let (l, r) = if periodic {
            ((i + n - 1) % n, (i + 1) % n)
        } else {
            (i - 1, i + 1)
        };
        if let Some(t) = &old_taint {
            if t[l] || t[i] || t[r] {
                next[i] = curr[i];
                continue;
            }
        }
        next[i] = curr[r] + curr[l] - prev[i] + dt2 * nl.eval(curr[i])?;
    }
    if let Some((left, right)) = boundary {
        next[0] = left;
        next[n - 1] = right;
    }
    if let (Some(t), Some(old)) = (taint, old_taint) {
        for i in lo..hi {
            let (l, r) = if periodic {
                ((i + n - 1) % n, (i + 1) % n)
            } else {
                (i - 1, i + 1)
            };
            t[i] = old[l] || old[i] || old[r];
        }
        if !periodic {
            // Boundary data does not depend on the interior.
            t[0] = old[0];
            t[n - 1] = old[n - 1];
        }
    }
    Ok(next)
}
