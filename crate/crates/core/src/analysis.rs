//! Exact solutions, error norms, blow-up curves, rate fits and the discrete
//! comparison lemmas used as test oracles.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rescale::{block_ranges, BlowupEstimate, Hierarchy, NormSample, RescaleError, Status};
use crate::solver::{init_slices, step, FieldSlice, GridSpec, Nonlinearity, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("({x}, {t}) is at or beyond the blow-up curve")]
    Domain { x: f64, t: f64 },
    #[error("need at least {need} samples in the fit window, found {found}")]
    InsufficientData { need: usize, found: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Rescale(#[from] RescaleError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `u(x, t) = mu_d (T - t + d x)^{-2/(p-1)}`, which blows up along
/// `t = T + d x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactSolutionEx1 {
    pub p: f64,
    pub t_blowup: f64,
    pub d: f64,
}

impl ExactSolutionEx1 {
    pub fn new(p: f64, t_blowup: f64, d: f64) -> Result<Self, AnalysisError> {
        if !(p > 1.0) {
            return Err(AnalysisError::Parameter(format!(
                "p must exceed 1, got {p}"
            )));
        }
        if !(0.0..1.0).contains(&d) {
            return Err(AnalysisError::Parameter(format!(
                "d must lie in [0, 1), got {d}"
            )));
        }
        Ok(Self { p, t_blowup, d })
    }

    pub fn mu_d(&self) -> f64 {
        let p = self.p;
        (2.0 * (1.0 - self.d * self.d) * (p + 1.0) / ((p - 1.0) * (p - 1.0))).powf(1.0 / (p - 1.0))
    }

    pub fn blowup_time(&self, x: f64) -> f64 {
        self.t_blowup + self.d * x
    }

    fn gap(&self, x: f64, t: f64) -> Result<f64, AnalysisError> {
        let s = self.blowup_time(x) - t;
        if s > 0.0 {
            Ok(s)
        } else {
            Err(AnalysisError::Domain { x, t })
        }
    }

    pub fn eval(&self, x: f64, t: f64) -> Result<f64, AnalysisError> {
        let s = self.gap(x, t)?;
        Ok(self.mu_d() * s.powf(2.0 / (1.0 - self.p)))
    }

    pub fn time_derivative(&self, x: f64, t: f64) -> Result<f64, AnalysisError> {
        let s = self.gap(x, t)?;
        let a = 2.0 / (self.p - 1.0);
        Ok(a * self.mu_d() * s.powf(2.0 / (1.0 - self.p) - 1.0))
    }
}

/// `(l2, linf)` with `l2 = sqrt(dx * sum U_i^2)`.
pub fn discrete_norms(values: &[f64], spacing: f64) -> (f64, f64) {
    let sum: f64 = values.iter().map(|v| v * v).sum();
    let linf = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    ((spacing * sum).sqrt(), linf)
}

pub fn slice_norms(slice: &FieldSlice, spacing: f64) -> (f64, f64) {
    discrete_norms(&slice.values, spacing)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    #[serde(rename = "I")]
    pub i: usize,
    pub rel_l2: f64,
    pub rel_linf: f64,
    pub eval_time: f64,
}

/// Relative errors of `numerical` against `exact`, both sampled on the same
/// nodes.
pub fn relative_errors(numerical: &[f64], exact: &[f64], spacing: f64) -> (f64, f64) {
    let diff: Vec<f64> = numerical.iter().zip(exact).map(|(a, b)| a - b).collect();
    let (dl2, dinf) = discrete_norms(&diff, spacing);
    let (el2, einf) = discrete_norms(exact, spacing);
    (ratio(dl2, el2), ratio(dinf, einf))
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Errors of the assembled multiscale solution at the base-grid nodes.
/// The hierarchy must have been run with history recording on.
pub fn error_report(
    h: &Hierarchy,
    sol: &ExactSolutionEx1,
    eval_time: f64,
) -> Result<ErrorReport, AnalysisError> {
    let grid = &h.levels[0].grid;
    let xs = grid.nodes();
    let mut num = Vec::with_capacity(xs.len());
    let mut ex = Vec::with_capacity(xs.len());
    for &x in &xs {
        ex.push(sol.eval(x, eval_time)?);
        num.push(h.assemble(x, eval_time)?);
    }
    let (rel_l2, rel_linf) = relative_errors(&num, &ex, grid.spacing());
    Ok(ErrorReport {
        i: grid.n_cells(),
        rel_l2,
        rel_linf,
        eval_time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub block: usize,
    pub x_mid: f64,
    pub t_j: f64,
    pub depth: usize,
    pub status: Status,
}

/// One point per block at the block midpoint. Blocks that did not converge
/// keep their status so callers can flag them.
pub fn blowup_curve(
    estimates: &[BlowupEstimate],
    grid: &GridSpec,
    j_blocks: usize,
) -> Result<Vec<CurvePoint>, AnalysisError> {
    let ranges = block_ranges(grid, j_blocks)?;
    if estimates.len() != ranges.len() {
        return Err(AnalysisError::Parameter(format!(
            "{} estimates for {} blocks",
            estimates.len(),
            ranges.len()
        )));
    }
    let mut sorted = estimates.to_vec();
    sorted.sort_by_key(|e| e.block);
    Ok(sorted
        .iter()
        .zip(&ranges)
        .map(|(e, &(a, b))| CurvePoint {
            block: e.block,
            x_mid: 0.5 * (grid.x(a) + grid.x(b)),
            t_j: e.t_blowup,
            depth: e.depth_used,
            status: e.status,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub fit_window: (f64, f64),
    pub residual: f64,
    pub samples: usize,
}

pub const MIN_FIT_SAMPLES: usize = 10;

/// Least-squares slope of `ln ||U||` against `ln(1/(T - t))` over the last
/// decade of `1/(T - t)` reached by the trace.
pub fn rate_fit(trace: &[(f64, f64)], t_est: f64) -> Result<RateFit, AnalysisError> {
    let pts: Vec<(f64, f64, f64)> = trace
        .iter()
        .filter(|(t, n)| *t < t_est && *n > 0.0 && n.is_finite())
        .map(|&(t, n)| (t, -(t_est - t).ln(), n.ln()))
        .collect();
    let top = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = top - std::f64::consts::LN_10;
    let win: Vec<&(f64, f64, f64)> = pts.iter().filter(|p| p.1 >= lo).collect();
    if win.len() < MIN_FIT_SAMPLES {
        return Err(AnalysisError::InsufficientData {
            need: MIN_FIT_SAMPLES,
            found: win.len(),
        });
    }
    let n = win.len() as f64;
    let mx = win.iter().map(|p| p.1).sum::<f64>() / n;
    let my = win.iter().map(|p| p.2).sum::<f64>() / n;
    let sxx: f64 = win.iter().map(|p| (p.1 - mx).powi(2)).sum();
    let sxy: f64 = win.iter().map(|p| (p.1 - mx) * (p.2 - my)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::InsufficientData {
            need: MIN_FIT_SAMPLES,
            found: 1,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = win
        .iter()
        .map(|p| (p.2 - intercept - slope * p.1).powi(2))
        .sum();
    let t0 = win.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let t1 = win.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(RateFit {
        slope,
        intercept,
        fit_window: (t0, t1),
        residual: (ss / n).sqrt(),
        samples: win.len(),
    })
}

/// Trace samples closer to the estimated blow-up time than this many base
/// steps are dropped before fitting.
pub const RATE_CUTOFF_STEPS: f64 = 4.0;

/// `rate_fit` on the L2 trace of a run, truncated at
/// `t_est - t < RATE_CUTOFF_STEPS * dt_base`.
pub fn rate_fit_trace(
    trace: &[NormSample],
    t_est: f64,
    dt_base: f64,
) -> Result<RateFit, AnalysisError> {
    if !t_est.is_finite() {
        return Err(AnalysisError::Parameter("no blow-up time estimate".into()));
    }
    let cut = t_est - RATE_CUTOFF_STEPS * dt_base;
    let pts: Vec<(f64, f64)> = trace
        .iter()
        .filter(|s| s.t <= cut)
        .map(|s| (s.t, s.l2))
        .collect();
    rate_fit(&pts, t_est)
}

/// Relative slack used by the lemma checks.
pub const LEMMA_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum LemmaVerdict {
    Pass,
    /// First violation found, as `(n, i, value)`.
    Fail {
        n: usize,
        i: usize,
        value: f64,
    },
    /// The inputs do not meet the lemma's hypotheses; nothing was checked.
    Abstain {
        reason: String,
    },
}

impl LemmaVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, LemmaVerdict::Pass)
    }
}

/// Recorded solution of a Dirichlet problem: `slices[n][i]` at `t = n dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletRun {
    pub grid: GridSpec,
    pub p: f64,
    pub slices: Vec<Vec<f64>>,
}

impl DirichletRun {
    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }
}

/// Steps a Dirichlet problem `steps` times and keeps every slice.
pub fn record_dirichlet(
    grid: &GridSpec,
    p: f64,
    u0: &[f64],
    u1: &[f64],
    boundary: &dyn Fn(f64) -> (f64, f64),
    steps: usize,
) -> Result<DirichletRun, AnalysisError> {
    let nl = Nonlinearity::power(p)?;
    let dt = grid.dt();
    let (mut prev, mut curr) = init_slices(grid, &nl, u0, u1, Some(boundary(dt)))?;
    let mut slices = vec![prev.values.clone(), curr.values.clone()];
    for n in 2..=steps {
        let next = step(
            grid,
            &nl,
            &prev,
            &curr,
            Some(boundary(n as f64 * dt)),
            f64::INFINITY,
        )?;
        slices.push(next.values.clone());
        prev = std::mem::replace(&mut curr, next);
    }
    slices.truncate(steps + 1);
    Ok(DirichletRun {
        grid: grid.clone(),
        p,
        slices,
    })
}

/// Example 1 restricted to `[a, b]` with exact Dirichlet data, run for
/// `steps` steps.
pub fn example1_window_run(
    sol: &ExactSolutionEx1,
    a: f64,
    b: f64,
    n_cells: usize,
    steps: usize,
) -> Result<DirichletRun, AnalysisError> {
    let grid = GridSpec::new(
        n_cells,
        (b - a) / n_cells as f64,
        a,
        crate::solver::Topology::Dirichlet,
    )?;
    let u0 = sample(&grid, |x| sol.eval(x, 0.0))?;
    let u1 = sample(&grid, |x| sol.time_derivative(x, 0.0))?;
    let s = *sol;
    let g = move |t: f64| {
        (
            s.eval(a, t).unwrap_or(f64::INFINITY),
            s.eval(b, t).unwrap_or(f64::INFINITY),
        )
    };
    record_dirichlet(&grid, sol.p, &u0, &u1, &g, steps)
}

fn sample(
    grid: &GridSpec,
    f: impl Fn(f64) -> Result<f64, AnalysisError>,
) -> Result<Vec<f64>, AnalysisError> {
    grid.nodes().into_iter().map(f).collect()
}

fn second_difference(v: &[f64], dx: f64) -> Vec<f64> {
    (1..v.len() - 1)
        .map(|i| (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (dx * dx))
        .collect()
}

fn magnitude(rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .flatten()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE)
}

/// Convexity in space is preserved: `Z_i^n = (V_i^n)_{x xbar} >= 0`.
/// Node indices in the verdict refer to the run's grid.
pub fn lemma1_oracle(run: &DirichletRun) -> LemmaVerdict {
    let dx = run.grid.spacing();
    if run.slices.len() < 2 || run.slices[0].len() < 3 {
        return LemmaVerdict::Abstain {
            reason: "run too short".into(),
        };
    }
    let z: Vec<Vec<f64>> = run
        .slices
        .iter()
        .map(|v| second_difference(v, dx))
        .collect();
    let tol = LEMMA_RTOL * magnitude(&z);
    if let Some(j) = z[0].iter().position(|&v| v < -tol) {
        return LemmaVerdict::Abstain {
            reason: format!("Z^0 is negative at node {}", j + 1),
        };
    }
    // Z^1_i >= (Z^0_{i+1} + Z^0_{i-1}) / 2 wherever both neighbors are interior.
    for j in 1..z[0].len().saturating_sub(1) {
        if z[1][j] < 0.5 * (z[0][j + 1] + z[0][j - 1]) - tol {
            return LemmaVerdict::Abstain {
                reason: format!("Z^1 starting condition fails at node {}", j + 1),
            };
        }
    }
    for (n, row) in z.iter().enumerate() {
        if let Some(j) = row.iter().position(|&v| v < -tol) {
            return LemmaVerdict::Fail {
                n,
                i: j + 1,
                value: row[j],
            };
        }
    }
    LemmaVerdict::Pass
}

/// Growth bounds at every interior node, with forward differences in time:
/// `(V^n)_t >= sqrt(2/(p+1) (V^n)^{p+1} + K)` and
/// `V^n >= V^0 + n dt sqrt(2/(p+1) (V^0)^{p+1} + K)`.
pub fn lemma2_oracle(run: &DirichletRun) -> LemmaVerdict {
    match lemma1_oracle(run) {
        LemmaVerdict::Pass => {}
        LemmaVerdict::Fail { n, i, .. } => {
            return LemmaVerdict::Abstain {
                reason: format!("spatial convexity fails at n = {n}, i = {i}"),
            }
        }
        other => return other,
    }
    let dt = run.dt();
    let p = run.p;
    let c = 2.0 / (p + 1.0);
    let rows = &run.slices;
    let nodes = rows[0].len();
    let last = rows.len() - 1;
    let tol = LEMMA_RTOL * magnitude(rows);
    for i in 1..nodes - 1 {
        let v0 = rows[0][i];
        if v0 < 0.0 {
            return LemmaVerdict::Abstain {
                reason: format!("negative initial value at node {i}"),
            };
        }
        let vt0 = (rows[1][i] - v0) / dt;
        let k = vt0 * vt0 - c * v0.powf(p + 1.0);
        let rate0 = (c * v0.powf(p + 1.0) + k).max(0.0).sqrt();
        for n in 0..=last {
            let v = rows[n][i];
            if v < v0 + n as f64 * dt * rate0 - tol * (1.0 + n as f64) {
                return LemmaVerdict::Fail { n, i, value: v };
            }
            if n < last {
                let vt = (rows[n + 1][i] - v) / dt;
                let rhs = (c * v.max(0.0).powf(p + 1.0) + k).max(0.0).sqrt();
                let slack = LEMMA_RTOL * (vt.abs() + rhs) + tol / dt;
                if vt < rhs - slack {
                    return LemmaVerdict::Fail { n, i, value: vt };
                }
            }
        }
    }
    LemmaVerdict::Pass
}

/// Inputs to the discrete maximum principle: `theta[n][i]` and the
/// coefficients `b[n][i] >= 0`, on a grid with `dt = dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma3Instance {
    pub dt: f64,
    pub theta: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Interior slack used to build the rows, `slack[n][i]` for `n >= 2`.
    pub slack: Vec<Vec<f64>>,
}

/// Which points the nonnegativity conclusion is checked on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lemma3Scope {
    /// Points whose backward characteristics reach the first two rows
    /// without touching the boundary columns.
    Cone,
    Full,
}

impl Lemma3Instance {
    pub fn rows(&self) -> usize {
        self.theta.len()
    }

    pub fn nodes(&self) -> usize {
        self.theta.first().map_or(0, Vec::len)
    }

    /// Left side of the interior inequality at `(n, i)`, times `dt^2`.
    pub fn interior_residual(&self, n: usize, i: usize) -> f64 {
        let t = &self.theta;
        t[n][i] - 2.0 * t[n - 1][i] + t[n - 2][i]
            - (t[n - 1][i + 1] - 2.0 * t[n - 1][i] + t[n - 1][i - 1])
            - self.dt * self.dt * self.b[n - 1][i] * t[n - 1][i]
    }

    /// Rebuilds interior rows from the first two rows, the boundary columns
    /// and the stored slack.
    pub fn rebuild(&mut self) {
        let dt2 = self.dt * self.dt;
        let ni = self.nodes();
        for n in 2..self.rows() {
            for i in 1..ni - 1 {
                let t = &self.theta;
                let v = t[n - 1][i + 1] + t[n - 1][i - 1] - t[n - 2][i]
                    + dt2 * self.b[n - 1][i] * t[n - 1][i]
                    + self.slack[n][i];
                self.theta[n][i] = v;
            }
        }
    }

    /// Random instance meeting every hypothesis; slack and coefficients are
    /// strictly positive so that a sign flip is always a real violation.
    pub fn generate<R: Rng>(rng: &mut R, nodes: usize, rows: usize) -> Self {
        let nodes = nodes.max(3);
        let rows = rows.max(3);
        let dt = 1.0 / (nodes - 1) as f64;
        let mut theta = vec![vec![0.0; nodes]; rows];
        for i in 0..nodes {
            theta[0][i] = rng.gen_range(0.0..1.0);
        }
        for i in 0..nodes {
            let floor = if i + 1 < nodes { theta[0][i + 1] } else { 0.0 };
            theta[1][i] = floor + rng.gen_range(0.0..1.0);
        }
        for row in theta.iter_mut().skip(2) {
            row[0] = rng.gen_range(0.0..1.0);
            row[nodes - 1] = rng.gen_range(0.0..1.0);
        }
        let b = (0..rows)
            .map(|_| (0..nodes).map(|_| rng.gen_range(0.0..4.0)).collect())
            .collect();
        let mut slack = vec![vec![0.0; nodes]; rows];
        for row in slack.iter_mut().skip(2) {
            for s in row.iter_mut().take(nodes - 1).skip(1) {
                *s = rng.gen_range(0.05..1.0);
            }
        }
        let mut inst = Self {
            dt,
            theta,
            b,
            slack,
        };
        inst.rebuild();
        inst
    }

    /// Copy with the sign of one interior slack flipped.
    pub fn flip_slack(&self, n: usize, i: usize) -> Self {
        let mut out = self.clone();
        out.slack[n][i] = -out.slack[n][i];
        out.rebuild();
        out
    }
}

fn in_cone(n: usize, i: usize, nodes: usize) -> bool {
    n <= 1 || (i + 1 >= n && i + n < nodes)
}

/// Checks the hypotheses, then `theta >= 0` over `scope`.
pub fn lemma3_oracle(inst: &Lemma3Instance, scope: Lemma3Scope) -> LemmaVerdict {
    let rows = inst.rows();
    let nodes = inst.nodes();
    if rows < 2 || nodes < 3 || inst.b.len() < rows || inst.theta.iter().any(|r| r.len() != nodes) {
        return LemmaVerdict::Abstain {
            reason: "malformed instance".into(),
        };
    }
    let tol = LEMMA_RTOL * magnitude(&inst.theta);
    let abstain = |reason: String| LemmaVerdict::Abstain { reason };
    if let Some((n, i)) = inst
        .b
        .iter()
        .enumerate()
        .flat_map(|(n, r)| r.iter().enumerate().map(move |(i, v)| (n, i, *v)))
        .find(|t| t.2 < 0.0)
        .map(|t| (t.0, t.1))
    {
        return abstain(format!("b is negative at n = {n}, i = {i}"));
    }
    for n in 0..rows {
        if inst.theta[n][0] < -tol || inst.theta[n][nodes - 1] < -tol {
            return abstain(format!("boundary value negative at n = {n}"));
        }
    }
    for n in 0..2 {
        if let Some(i) = inst.theta[n].iter().position(|&v| v < -tol) {
            return abstain(format!("starting row {n} negative at i = {i}"));
        }
    }
    for i in 0..nodes - 1 {
        if inst.theta[1][i] - inst.theta[0][i + 1] < -tol {
            return abstain(format!("theta^1_{i} < theta^0_{}", i + 1));
        }
    }
    for n in 2..rows {
        for i in 1..nodes - 1 {
            if inst.interior_residual(n, i) < -tol {
                return abstain(format!("interior inequality fails at n = {n}, i = {i}"));
            }
        }
    }
    for n in 0..rows {
        for i in 0..nodes {
            if scope == Lemma3Scope::Cone && !in_cone(n, i, nodes) {
                continue;
            }
            let v = inst.theta[n][i];
            if v < -tol {
                return LemmaVerdict::Fail { n, i, value: v };
            }
        }
    }
    LemmaVerdict::Pass
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ex1() -> ExactSolutionEx1 {
        ExactSolutionEx1::new(2.0, 0.5, 0.1).unwrap()
    }

    #[test]
    fn exact_values() {
        let s = ex1();
        assert_relative_eq!(s.mu_d(), 5.94, max_relative = 1e-14);
        assert_relative_eq!(s.eval(0.0, 0.0).unwrap(), 23.76, max_relative = 1e-14);
        assert_relative_eq!(s.eval(1.0, 0.0).unwrap(), 16.5, max_relative = 1e-14);
        let s3 = ExactSolutionEx1::new(3.0, 0.5, 0.0).unwrap();
        assert_relative_eq!(s3.mu_d(), 2f64.sqrt(), max_relative = 1e-14);
        assert!(matches!(
            s.eval(0.0, 0.5),
            Err(AnalysisError::Domain { .. })
        ));
        assert!(s.eval(1.0, 0.55).is_ok());
    }

    #[test]
    fn time_derivative_matches_difference() {
        let s = ex1();
        let h = 1e-6;
        let fd = (s.eval(0.3, 0.2 + h).unwrap() - s.eval(0.3, 0.2 - h).unwrap()) / (2.0 * h);
        assert_relative_eq!(
            s.time_derivative(0.3, 0.2).unwrap(),
            fd,
            max_relative = 1e-8
        );
    }

    #[test]
    fn norms() {
        assert_eq!(discrete_norms(&[0.0; 4], 0.25), (0.0, 0.0));
        let (l2, li) = discrete_norms(&[3.0, -4.0], 0.5);
        assert_eq!(li, 4.0);
        assert_relative_eq!(l2, 12.5f64.sqrt(), max_relative = 1e-15);
        let (l2, li) = discrete_norms(&[-2.5; 8], 1.0 / 8.0);
        assert_relative_eq!(l2, 2.5, max_relative = 1e-15);
        assert_eq!(li, 2.5);
    }

    #[test]
    fn self_comparison_is_zero() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(relative_errors(&v, &v, 0.5), (0.0, 0.0));
    }

    #[test]
    fn exact_power_laws_fit_exactly() {
        for (e, t_end) in [(2.0, 0.5), (1.0, 0.25)] {
            let trace: Vec<(f64, f64)> = (0..400)
                .map(|n| {
                    let t = t_end * (1.0 - 0.98f64.powi(n));
                    (t, (t_end - t).powf(-e))
                })
                .collect();
            let fit = rate_fit(&trace, t_end).unwrap();
            assert_relative_eq!(fit.slope, e, max_relative = 1e-10);
            assert!(fit.residual < 1e-10);
            assert!(fit.samples >= MIN_FIT_SAMPLES);
        }
    }

    #[test]
    fn short_trace_is_rejected() {
        let trace: Vec<(f64, f64)> = (0..5).map(|n| (0.1 * n as f64, 1.0 + n as f64)).collect();
        assert!(matches!(
            rate_fit(&trace, 1.0),
            Err(AnalysisError::InsufficientData { .. })
        ));
    }

    #[test]
    fn lemma3_zero_and_generated() {
        let z = Lemma3Instance {
            dt: 0.1,
            theta: vec![vec![0.0; 6]; 6],
            b: vec![vec![0.0; 6]; 6],
            slack: vec![vec![0.0; 6]; 6],
        };
        assert!(lemma3_oracle(&z, Lemma3Scope::Full).passed());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = Lemma3Instance::generate(&mut rng, 12, 10);
        assert!(lemma3_oracle(&inst, Lemma3Scope::Cone).passed());
        let bad = inst.flip_slack(4, 5);
        assert!(!lemma3_oracle(&bad, Lemma3Scope::Cone).passed());
    }

    #[test]
    fn lemma3_negative_boundary_abstains() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inst = Lemma3Instance::generate(&mut rng, 8, 6);
        inst.theta[3][0] = -1.0;
        assert!(matches!(
            lemma3_oracle(&inst, Lemma3Scope::Cone),
            LemmaVerdict::Abstain { .. }
        ));
    }

    #[test]
    fn lemma1_gate_and_zero() {
        let grid = GridSpec::unit(8, crate::solver::Topology::Dirichlet).unwrap();
        let zero = vec![0.0; 9];
        let run = record_dirichlet(&grid, 2.0, &zero, &zero, &|_| (0.0, 0.0), 20).unwrap();
        assert!(lemma1_oracle(&run).passed());
        assert!(lemma2_oracle(&run).passed());
        let bump = grid.sample(|x| (std::f64::consts::PI * x).sin());
        let run = record_dirichlet(&grid, 2.0, &bump, &zero, &|_| (0.0, 0.0), 4).unwrap();
        assert!(matches!(lemma1_oracle(&run), LemmaVerdict::Abstain { .. }));
    }
}
