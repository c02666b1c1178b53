//! Hierarchy of zoomed sub-problems.
//!
//! Level `k` lives on its own coordinates `(xi, tau)` with
//! `x = lambda^k xi` and `t = t_{k-1} + lambda^k tau`, and stores
//! `lambda^{2k/(p-1)} u`. Every level uses the same grid spacing, so a child
//! covering `w` parent cells has `w / lambda` cells of its own.
//!
//! Stepping is demand driven: the deepest level is advanced, and before a
//! level can step it asks its parent to advance until the parent's two live
//! slices bracket the time where the boundary values are needed. A level of
//! depth `k - j` therefore advances about `lambda^j` times as often as level
//! `k`, and the parent always moves first.

use std::fmt;
use std::mem;
use std::ops::RangeInclusive;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp::{
    eval_at_pos, select_window_in, threshold_crossing_in, time_slice, InterpError, SpaceTimePatch,
    Window,
};
use crate::solver::{
    init_slices, step, step_frozen, FieldSlice, GridSpec, Nonlinearity, SolverError, Topology,
    DEFAULT_OVERFLOW_GUARD,
};

/// Boundary values `(left, right)` of the base level at time `t`.
pub type BoundaryFn = Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>;

// Time comparisons use this fraction of a step.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RescaleError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("level {level} holds no data at local time {time}")]
    Bracket { level: usize, time: f64 },
    #[error("boundary feed for level {level} reads a frozen parent node")]
    FeedTainted { level: usize },
    #[error("level {0} overflowed")]
    Overflow(usize),
    #[error("level {0} reached the step limit")]
    Stalled(usize),
    #[error("history for level {0} was not recorded")]
    NoHistory(usize),
    #[error("point (x = {x}, t = {t}) lies outside every level")]
    OutOfRange { x: f64, t: f64 },
}

/// `1 / lambda`, kept as an integer so child nodes align with parent nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ScaleFactor(u32);

impl ScaleFactor {
    /// `m = 1` is accepted here for plumbing tests; configurations need `m >= 2`.
    pub fn new(m: u32) -> Result<Self, RescaleError> {
        if m == 0 {
            return Err(RescaleError::Config("1/lambda must be positive".into()));
        }
        Ok(Self(m))
    }

    pub fn inverse(&self) -> u32 {
        self.0
    }

    pub fn lambda(&self) -> f64 {
        1.0 / self.0 as f64
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.0)
    }
}

impl From<ScaleFactor> for String {
    fn from(s: ScaleFactor) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for ScaleFactor {
    type Error = RescaleError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for ScaleFactor {
    type Err = RescaleError;

    /// Accepts `1/m`, or a decimal whose reciprocal is an integer.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || RescaleError::Config(format!("lambda must look like 1/m, got {s:?}"));
        if let Some((num, den)) = s.split_once('/') {
            if num.trim() != "1" {
                return Err(bad());
            }
            let m: u32 = den.trim().parse().map_err(|_| bad())?;
            return Self::new(m);
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(bad());
        }
        let m = (1.0 / v).round();
        if (m * v - 1.0).abs() > 1e-12 {
            return Err(bad());
        }
        Self::new(m as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// `M = lambda^{-2/(p-1)} max|u0|`.
    FromInitialData,
    Explicit(f64),
}

impl ThresholdRule {
    pub fn resolve(&self, p: f64, lambda: ScaleFactor, u0_max: f64) -> f64 {
        match *self {
            ThresholdRule::FromInitialData => lambda.lambda().powf(-2.0 / (p - 1.0)) * u0_max,
            ThresholdRule::Explicit(m) => m,
        }
    }
}

/// How a child's second starting slice is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildStart {
    /// `phi + lambda^{a+1}(U(tau* + dt) - U(tau*))
    ///  + lambda^{a+2}((U[l+1] - 2U[l] + U[l-1]) / 2 + dt^2 F(U) / 2)`,
    /// with `U` the parent interpolant at the child nodes.
    Literal,
    /// `lambda^a U(tau* + lambda dt)`: the parent interpolant at the child's
    /// first step, the same rule the boundary feed uses at the edges.
    Interpolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleConfig {
    pub p: f64,
    pub lambda: ScaleFactor,
    pub threshold: ThresholdRule,
    /// Block count `J` for per-block runs; `None` means a single global run.
    pub blocks: Option<usize>,
    pub k_max: usize,
    pub overflow_guard: f64,
    /// Extra parent cells added on each side of a detected window.
    pub pad_cells: usize,
    pub child_start: ChildStart,
    /// Write finer-level values back into their parents after each step.
    pub inject: bool,
    pub tail_tol: f64,
    pub max_steps_per_level: u64,
    #[serde(skip)]
    pub record_history: bool,
    #[serde(skip)]
    pub record_trace: bool,
}

impl RescaleConfig {
    pub fn new(p: f64, lambda: ScaleFactor) -> Self {
        Self {
            p,
            lambda,
            threshold: ThresholdRule::FromInitialData,
            blocks: None,
            k_max: 40,
            overflow_guard: DEFAULT_OVERFLOW_GUARD,
            pad_cells: 0,
            child_start: ChildStart::Literal,
            inject: true,
            tail_tol: 1e-12,
            max_steps_per_level: 1_000_000,
            record_history: false,
            record_trace: false,
        }
    }

    /// Scaling exponent `2 / (p - 1)`.
    pub fn alpha(&self) -> f64 {
        2.0 / (self.p - 1.0)
    }

    pub fn nonlinearity(&self) -> Result<Nonlinearity, RescaleError> {
        Ok(Nonlinearity::power(self.p)?)
    }

    pub fn validate(&self) -> Result<(), RescaleError> {
        self.nonlinearity()?;
        if self.lambda.inverse() < 2 {
            return Err(RescaleError::Config("1/lambda must be at least 2".into()));
        }
        if let ThresholdRule::Explicit(m) = self.threshold {
            if !(m > 0.0) || !m.is_finite() {
                return Err(RescaleError::Config(format!(
                    "threshold must be positive, got {m}"
                )));
            }
        }
        if !(self.overflow_guard > 0.0) {
            return Err(RescaleError::Config(
                "overflow guard must be positive".into(),
            ));
        }
        if !(self.tail_tol >= 0.0) {
            return Err(RescaleError::Config(
                "tail tolerance must be nonnegative".into(),
            ));
        }
        if self.blocks == Some(0) {
            return Err(RescaleError::Config("block count must be positive".into()));
        }
        Ok(())
    }
}

/// Where a level sits inside its parent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParentLink {
    pub window: Window,
    /// Parent-clock time at which the level was created.
    pub tau_star: f64,
}

#[derive(Debug, Clone)]
pub struct LevelState {
    pub k: usize,
    pub grid: GridSpec,
    pub prev: FieldSlice,
    pub curr: FieldSlice,
    pub link: Option<ParentLink>,
    /// Physical time of local time zero (`t_{k-1}`).
    pub start_time: f64,
    /// `lambda^k`.
    pub scale: f64,
    /// Whether each end of the level coincides with a physical boundary.
    pub physical_edges: (bool, bool),
    pub overflowed: bool,
    /// Frozen-node mask; only the base level keeps one.
    pub taint: Option<Vec<bool>>,
    /// Every slice older than `prev`, indexed by time index.
    pub history: Option<Vec<FieldSlice>>,
    pub spawn_max: f64,
}

impl LevelState {
    pub fn steps(&self) -> u64 {
        self.curr.time_index
    }

    pub fn patch(&self) -> SpaceTimePatch<'_> {
        SpaceTimePatch {
            grid: &self.grid,
            lo: &self.prev,
            hi: &self.curr,
        }
    }

    fn is_tainted(&self, i: usize) -> bool {
        self.taint.as_ref().map_or(false, |t| t[i])
    }

    fn slice(&self, n: u64) -> Option<&FieldSlice> {
        if n == self.prev.time_index {
            Some(&self.prev)
        } else if n == self.curr.time_index {
            Some(&self.curr)
        } else {
            self.history.as_ref().and_then(|h| h.get(n as usize))
        }
    }

    /// Bilinear value at fractional node position `pos`, local time `tau`.
    pub fn value_at(&self, pos: f64, tau: f64) -> Result<f64, RescaleError> {
        let h = self.grid.dt();
        let last = self.curr.time_index.saturating_sub(1);
        let n = ((tau / h).floor().max(0.0) as u64).min(last);
        let lo = self.slice(n).ok_or(RescaleError::NoHistory(self.k))?;
        let hi = self.slice(n + 1).ok_or(RescaleError::NoHistory(self.k))?;
        let patch = SpaceTimePatch::new(&self.grid, lo, hi)?;
        Ok(eval_at_pos(&patch, pos, tau)?)
    }

    fn rotate(&mut self, next: FieldSlice) {
        let old = mem::replace(&mut self.prev, mem::replace(&mut self.curr, next));
        if let Some(h) = self.history.as_mut() {
            h.push(old);
        }
    }
}

/// Base-level problem: grid, sampled initial data and optional Dirichlet data.
#[derive(Clone)]
pub struct BaseProblem {
    pub grid: GridSpec,
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    pub boundary: Option<BoundaryFn>,
}

impl fmt::Debug for BaseProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BaseProblem")
            .field("grid", &self.grid)
            .field("u0_max", &self.u0_max())
            .field("dirichlet", &self.boundary.is_some())
            .finish()
    }
}

impl BaseProblem {
    pub fn new(
        grid: GridSpec,
        u0: Vec<f64>,
        u1: Vec<f64>,
        boundary: Option<BoundaryFn>,
    ) -> Result<Self, RescaleError> {
        let n = grid.node_count();
        if u0.len() != n || u1.len() != n {
            return Err(SolverError::LengthMismatch {
                expected: n,
                got: u0.len().min(u1.len()),
            }
            .into());
        }
        if (grid.topology() == Topology::Dirichlet) != boundary.is_some() {
            return Err(SolverError::BoundaryMismatch.into());
        }
        Ok(Self {
            grid,
            u0,
            u1,
            boundary,
        })
    }

    pub fn u0_max(&self) -> f64 {
        self.u0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Level 0 with the two starting slices.
    pub fn base_level(&self, cfg: &RescaleConfig) -> Result<LevelState, RescaleError> {
        let nl = cfg.nonlinearity()?;
        let h = self.grid.dt();
        let b1 = self.boundary.as_ref().map(|g| g(h));
        let (prev, curr) = init_slices(&self.grid, &nl, &self.u0, &self.u1, b1)?;
        let dirichlet = self.grid.topology() == Topology::Dirichlet;
        Ok(LevelState {
            k: 0,
            spawn_max: prev.max(),
            grid: self.grid.clone(),
            prev,
            curr,
            link: None,
            start_time: 0.0,
            scale: 1.0,
            physical_edges: (dirichlet, dirichlet),
            overflowed: false,
            taint: Some(vec![false; self.grid.node_count()]),
            history: cfg.record_history.then(Vec::new),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Converged,
    DepthExhausted,
    Degenerate,
    Overflowed,
    Contaminated,
    Stalled,
    Failed,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Running => "running",
            Status::Converged => "converged",
            Status::DepthExhausted => "depth_exhausted",
            Status::Degenerate => "degenerate",
            Status::Overflowed => "overflowed",
            Status::Contaminated => "contaminated",
            Status::Stalled => "stalled",
            Status::Failed => "failed",
        };
        f.write_str(s)
    }
}

/// One threshold crossing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRecord {
    pub k: usize,
    pub tau_star: f64,
    /// `lambda^k tau_star`.
    pub scaled: f64,
    /// Physical crossing time `t_k`.
    pub t_k: f64,
    pub window: Option<Window>,
}

/// Deepest-level norms after one step, mapped back to physical scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSample {
    pub t: f64,
    pub l2: f64,
    pub linf: f64,
    pub level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowupEstimate {
    pub block: usize,
    pub t_blowup: f64,
    pub depth_used: usize,
    pub tail_bound: f64,
    pub status: Status,
}

/// Stack of levels for one block (block 0 is the whole domain).
#[derive(Clone)]
pub struct Hierarchy {
    pub block: usize,
    pub range: (usize, usize),
    pub levels: Vec<LevelState>,
    pub taus: Vec<TauRecord>,
    pub status: Status,
    pub trace: Vec<NormSample>,
    pub error: Option<String>,
    threshold: f64,
    nl: Nonlinearity,
    cfg: RescaleConfig,
    boundary: Option<BoundaryFn>,
}

impl fmt::Debug for Hierarchy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hierarchy")
            .field("block", &self.block)
            .field("range", &self.range)
            .field("depth", &self.levels.len())
            .field("status", &self.status)
            .field("taus", &self.taus.len())
            .finish()
    }
}

impl Hierarchy {
    pub fn new(
        problem: &BaseProblem,
        base: LevelState,
        cfg: &RescaleConfig,
        block: usize,
        range: (usize, usize),
    ) -> Result<Self, RescaleError> {
        cfg.validate()?;
        if range.0 > range.1 || range.1 >= base.grid.node_count() {
            return Err(RescaleError::Config(format!("bad node range {range:?}")));
        }
        let threshold = cfg.threshold.resolve(cfg.p, cfg.lambda, problem.u0_max());
        Ok(Self {
            block,
            range,
            levels: vec![base],
            taus: Vec::new(),
            status: Status::Running,
            trace: Vec::new(),
            error: None,
            threshold,
            nl: cfg.nonlinearity()?,
            cfg: cfg.clone(),
            boundary: problem.boundary.clone(),
        })
    }

    /// Whole-domain hierarchy.
    pub fn global(problem: &BaseProblem, cfg: &RescaleConfig) -> Result<Self, RescaleError> {
        let base = problem.base_level(cfg)?;
        let last = base.grid.node_count() - 1;
        Self::new(problem, base, cfg, 0, (0, last))
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn config(&self) -> &RescaleConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    fn alpha(&self) -> f64 {
        self.cfg.alpha()
    }

    fn lam(&self) -> f64 {
        self.cfg.lambda.lambda()
    }

    /// Runs until a stopping rule fires.
    pub fn run(&mut self) -> BlowupEstimate {
        while self.status == Status::Running {
            if let Err(e) = self.advance() {
                self.fail(e);
            }
        }
        self.estimate()
    }

    /// One step of the deepest level, then crossing detection and spawning.
    /// Returns the crossing time when a crossing was found.
    pub fn advance(&mut self) -> Result<Option<f64>, RescaleError> {
        if self.status != Status::Running {
            return Ok(None);
        }
        let k = self.depth();
        self.step_level(k)?;
        if k == 0 && self.range_tainted() {
            self.status = Status::Contaminated;
            return Ok(None);
        }
        let range = self.search_range(k);
        let lvl = &self.levels[k];
        let Some(tau) = threshold_crossing_in(&lvl.patch(), self.threshold, range) else {
            return Ok(None);
        };
        self.on_crossing(k, tau)?;
        Ok(Some(tau))
    }

    pub fn estimate(&self) -> BlowupEstimate {
        let last = self.taus.last();
        BlowupEstimate {
            block: self.block,
            t_blowup: last.map_or(f64::NAN, |r| r.t_k),
            depth_used: last.map_or(0, |r| r.k),
            tail_bound: last.map_or(f64::NAN, |r| r.scaled),
            status: self.status,
        }
    }

    fn fail(&mut self, e: RescaleError) {
        self.status = match &e {
            RescaleError::Overflow(_)
            | RescaleError::FeedTainted { .. }
            | RescaleError::Solver(SolverError::Overflowed) => Status::Overflowed,
            RescaleError::Interp(InterpError::Degenerate { .. }) => Status::Degenerate,
            RescaleError::Stalled(_) => Status::Stalled,
            _ => Status::Failed,
        };
        self.error = Some(e.to_string());
    }

    fn search_range(&self, k: usize) -> RangeInclusive<usize> {
        if k == 0 {
            self.range.0..=self.range.1
        } else {
            0..=self.levels[k].grid.node_count() - 1
        }
    }

    fn range_tainted(&self) -> bool {
        let base = &self.levels[0];
        (self.range.0..=self.range.1).any(|i| base.is_tainted(i))
    }

    fn on_crossing(&mut self, k: usize, tau: f64) -> Result<(), RescaleError> {
        let lvl = &self.levels[k];
        let scaled = lvl.scale * tau;
        let t_k = lvl.start_time + scaled;
        let values = time_slice(&lvl.patch(), tau)?;
        let window = select_window_in(
            &lvl.grid,
            &values,
            self.threshold,
            self.search_range(k),
            self.cfg.pad_cells,
        );
        self.taus.push(TauRecord {
            k,
            tau_star: tau,
            scaled,
            t_k,
            window: window.as_ref().ok().copied(),
        });
        if scaled < self.cfg.tail_tol {
            self.status = Status::Converged;
            return Ok(());
        }
        if k >= self.cfg.k_max {
            self.status = Status::DepthExhausted;
            return Ok(());
        }
        let window = window?;
        let look = self.lookahead(k)?;
        let mut child = spawn_level(&self.levels[k], &look, &window, tau, &self.cfg)?;
        if child.physical_edges.0 || child.physical_edges.1 {
            let h = child.grid.dt();
            let (l, r) = self.physical_feed(&child, h);
            let last = child.curr.values.len() - 1;
            if child.physical_edges.0 {
                child.curr.values[0] = l;
            }
            if child.physical_edges.1 {
                child.curr.values[last] = r;
            }
        }
        if self.cfg.record_history {
            child.history = Some(Vec::new());
        }
        self.levels.push(child);
        Ok(())
    }

    // Physical boundary values expressed on `level` at local time `tau`.
    fn physical_feed(&self, level: &LevelState, tau: f64) -> (f64, f64) {
        match &self.boundary {
            Some(g) => {
                let (l, r) = g(level.start_time + level.scale * tau);
                let s = level.scale.powf(self.alpha());
                (s * l, s * r)
            }
            None => (f64::NAN, f64::NAN),
        }
    }

    /// Advances level `k` until its live slices reach local time `t`.
    pub fn ensure_bracket(&mut self, k: usize, t: f64) -> Result<(), RescaleError> {
        let eps = TIME_EPS * self.levels[k].grid.dt();
        while self.levels[k].curr.time < t - eps {
            self.step_level(k)?;
        }
        if self.levels[k].prev.time > t + eps {
            return Err(RescaleError::Bracket { level: k, time: t });
        }
        Ok(())
    }

    fn boundary_for(&mut self, k: usize, tau: f64) -> Result<Option<(f64, f64)>, RescaleError> {
        if k == 0 {
            return Ok(self.boundary.as_ref().map(|g| g(tau)));
        }
        let link = self.levels[k]
            .link
            .expect("child level without parent link");
        let tp = link.tau_star + self.lam() * tau;
        self.ensure_bracket(k - 1, tp)?;
        let child = &self.levels[k];
        let parent = &self.levels[k - 1];
        let (phys_l, phys_r) = child.physical_edges;
        let (gl, gr) = if phys_l || phys_r {
            self.physical_feed(child, tau)
        } else {
            (f64::NAN, f64::NAN)
        };
        let s = self.lam().powf(self.alpha());
        let l = if phys_l {
            gl
        } else {
            s * parent_edge_value(parent, link.window.i_minus, tp, k)?
        };
        let r = if phys_r {
            gr
        } else {
            s * parent_edge_value(parent, link.window.i_plus, tp, k)?
        };
        Ok(Some((l, r)))
    }

    // Next slice of level `k` without committing it.
    fn lookahead(&mut self, k: usize) -> Result<FieldSlice, RescaleError> {
        let h = self.levels[k].grid.dt();
        let t_next = (self.levels[k].curr.time_index + 1) as f64 * h;
        let bnd = self.boundary_for(k, t_next)?;
        let lvl = &self.levels[k];
        let guard = self.cfg.overflow_guard;
        match &lvl.taint {
            Some(taint) => {
                let mut t = taint.clone();
                Ok(step_frozen(
                    &lvl.grid, &self.nl, &lvl.prev, &lvl.curr, bnd, guard, &mut t,
                )?)
            }
            None => {
                let s = step(&lvl.grid, &self.nl, &lvl.prev, &lvl.curr, bnd, guard)?;
                if s.overflowed {
                    return Err(RescaleError::Overflow(k));
                }
                Ok(s)
            }
        }
    }

    /// One step of level `k`, stepping ancestors first as needed, followed by
    /// injection into the parent.
    pub fn step_level(&mut self, k: usize) -> Result<(), RescaleError> {
        {
            let lvl = &self.levels[k];
            if lvl.overflowed {
                return Err(RescaleError::Overflow(k));
            }
            if lvl.curr.time_index >= self.cfg.max_steps_per_level {
                return Err(RescaleError::Stalled(k));
            }
        }
        let h = self.levels[k].grid.dt();
        let t_next = (self.levels[k].curr.time_index + 1) as f64 * h;
        let bnd = self.boundary_for(k, t_next)?;
        let guard = self.cfg.overflow_guard;
        let nl = self.nl;
        let lvl = &mut self.levels[k];
        let next = match lvl.taint.as_mut() {
            Some(taint) => step_frozen(&lvl.grid, &nl, &lvl.prev, &lvl.curr, bnd, guard, taint)?,
            None => {
                let s = step(&lvl.grid, &nl, &lvl.prev, &lvl.curr, bnd, guard)?;
                if s.overflowed {
                    lvl.overflowed = true;
                    return Err(RescaleError::Overflow(k));
                }
                s
            }
        };
        lvl.rotate(next);
        if k >= 1 && self.cfg.inject {
            let (parents, rest) = self.levels.split_at_mut(k);
            inject_to_parent(
                &rest[0],
                &mut parents[k - 1],
                self.cfg.lambda,
                self.cfg.alpha(),
                &nl,
            );
        }
        if self.cfg.record_trace && k == self.depth() {
            let sample = norm_sample(&self.levels[k], self.alpha());
            self.trace.push(sample);
        }
        Ok(())
    }

    /// Multiscale value at physical `(x, t)` read from the deepest level that
    /// covers the point. Needs `record_history` for times before the live
    /// slices.
    pub fn assemble(&self, x: f64, t: f64) -> Result<f64, RescaleError> {
        assemble(self, x, t)
    }
}

fn norm_sample(level: &LevelState, alpha: f64) -> NormSample {
    let h = level.grid.spacing();
    let s = level.scale.powf(-alpha);
    let sum: f64 = level.curr.values.iter().map(|v| v * v).sum();
    let linf = level
        .curr
        .values
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    NormSample {
        t: level.start_time + level.scale * level.curr.time,
        l2: s * (h * sum).sqrt(),
        linf: s * linf,
        level: level.k,
    }
}

fn parent_edge_value(
    parent: &LevelState,
    node: usize,
    tau: f64,
    child_k: usize,
) -> Result<f64, RescaleError> {
    if parent.is_tainted(node) {
        return Err(RescaleError::FeedTainted { level: child_k });
    }
    let patch = parent.patch();
    if !patch.contains_time(tau) {
        return Err(RescaleError::Bracket {
            level: parent.k,
            time: tau,
        });
    }
    let n = parent.grid.node_count();
    Ok(patch.node_at(node % n, tau)?)
}

/// Builds the child level for `window` at parent time `tau_star`.
///
/// `lookahead` is the parent's next slice after `curr`; it supplies the parent
/// values at `tau_star + dt` needed for the second starting slice.
pub fn spawn_level(
    parent: &LevelState,
    lookahead: &FieldSlice,
    window: &Window,
    tau_star: f64,
    cfg: &RescaleConfig,
) -> Result<LevelState, RescaleError> {
    let nl = cfg.nonlinearity()?;
    let m = cfg.lambda.inverse() as usize;
    let lam = cfg.lambda.lambda();
    let a = cfg.alpha();
    let h = parent.grid.spacing();
    if window.i_plus <= window.i_minus || window.i_plus > parent.grid.n_cells() {
        return Err(InterpError::Degenerate {
            node: window.i_minus,
        }
        .into());
    }
    let n_nodes = parent.grid.node_count();
    if (window.i_minus..=window.i_plus).any(|i| parent.is_tainted(i % n_nodes)) {
        return Err(RescaleError::FeedTainted {
            level: parent.k + 1,
        });
    }
    let n_child = m * window.cells();
    let x_left = m as f64 * (parent.grid.x_left() + window.i_minus as f64 * h);
    let grid = GridSpec::new(n_child, h, x_left, Topology::Dirichlet)?;

    let now = SpaceTimePatch::new(&parent.grid, &parent.prev, &parent.curr)?;
    let next = SpaceTimePatch::new(&parent.grid, &parent.curr, lookahead)?;
    let pos = |l: usize| window.i_minus as f64 + l as f64 / m as f64;
    let sample = |patch: &SpaceTimePatch, t: f64| -> Result<Vec<f64>, RescaleError> {
        (0..=n_child)
            .map(|l| eval_at_pos(patch, pos(l), t).map_err(RescaleError::from))
            .collect()
    };
    let u_now = sample(&now, tau_star)?;

    let s0 = lam.powf(a);
    let s1 = lam.powf(a + 1.0);
    let s2 = lam.powf(a + 2.0);
    let phi: Vec<f64> = u_now.iter().map(|u| s0 * u).collect();
    // Edge values of the second slice come from the boundary feed at the
    // child's first step.
    let t_feed = tau_star + lam * h;
    let feed_patch = if now.contains_time(t_feed) {
        &now
    } else {
        &next
    };
    let mut big_phi = sample(feed_patch, t_feed)?;
    for v in big_phi.iter_mut() {
        *v *= s0;
    }
    if cfg.child_start == ChildStart::Literal {
        let u_next = sample(&next, tau_star + h)?;
        for l in 1..n_child {
            let lap = 0.5 * (u_now[l + 1] - 2.0 * u_now[l] + u_now[l - 1]);
            let src = 0.5 * h * h * nl.eval(u_now[l])?;
            big_phi[l] = s0 * u_now[l] + s1 * (u_next[l] - u_now[l]) + s2 * (lap + src);
        }
    }

    let prev = FieldSlice::new(phi, 0, 0.0);
    let curr = FieldSlice::new(big_phi, 1, h);
    let (pl, pr) = parent.physical_edges;
    Ok(LevelState {
        k: parent.k + 1,
        spawn_max: prev.max(),
        grid,
        prev,
        curr,
        link: Some(ParentLink {
            window: *window,
            tau_star,
        }),
        start_time: parent.start_time + parent.scale * tau_star,
        scale: parent.scale * lam,
        physical_edges: (
            pl && window.i_minus == 0,
            pr && window.i_plus == parent.grid.n_cells(),
        ),
        overflowed: false,
        taint: None,
        history: None,
    })
}

/// Dirichlet values for child step `n`, read from the parent at the frozen
/// window edges and scaled by `lambda^{2/(p-1)}`.
pub fn boundary_feed(
    parent: &LevelState,
    child: &LevelState,
    n: u64,
    cfg: &RescaleConfig,
) -> Result<(f64, f64), RescaleError> {
    let link = child
        .link
        .ok_or_else(|| RescaleError::Config("level has no parent".into()))?;
    let lam = cfg.lambda.lambda();
    let tp = link.tau_star + lam * n as f64 * child.grid.dt();
    let s = lam.powf(cfg.alpha());
    let l = parent_edge_value(parent, link.window.i_minus, tp, child.k)?;
    let r = parent_edge_value(parent, link.window.i_plus, tp, child.k)?;
    Ok((s * l, s * r))
}

/// Overwrites parent nodes strictly inside the child's window with the
/// child's values, for each live parent slice whose time falls in the
/// child's most recent step. Returns the number of values written.
///
/// When the slice written is the parent's `prev`, its `curr` was already
/// computed from the old values. The update is linear in the older slice, so
/// `curr` is corrected by the exact difference the new values would have
/// made; otherwise the two live slices stop being a leapfrog pair and the
/// mismatch seeds an odd-even mode.
pub fn inject_to_parent(
    child: &LevelState,
    parent: &mut LevelState,
    lambda: ScaleFactor,
    alpha: f64,
    nl: &Nonlinearity,
) -> usize {
    let Some(link) = child.link else {
        return 0;
    };
    if child.overflowed {
        return 0;
    }
    let m = lambda.inverse() as usize;
    let lam = lambda.lambda();
    let h = child.grid.dt();
    let eps = TIME_EPS * h;
    let lo = link.tau_star + lam * child.prev.time;
    let hi = link.tau_star + lam * child.curr.time;
    let up = lam.powf(-alpha);
    let w = link.window;
    let grid = &parent.grid;
    let n = grid.node_count();
    let periodic = grid.topology() == Topology::Periodic;
    let LevelState {
        prev, curr, taint, ..
    } = parent;
    let frozen = |j: usize| taint.as_ref().map_or(false, |t| t[j]);
    let mut written = 0;
    for is_prev in [true, false] {
        let slice: &mut FieldSlice = if is_prev { prev } else { curr };
        let ts = slice.time;
        if !(ts > lo + eps && ts <= hi + eps) {
            continue;
        }
        let th = (((ts - link.tau_star) / lam - child.prev.time) / h).clamp(0.0, 1.0);
        let mut delta = vec![0.0; n];
        for j in w.i_minus + 1..w.i_plus {
            if frozen(j) {
                continue;
            }
            let l = m * (j - w.i_minus);
            let a = child.prev.values[l];
            let b = child.curr.values[l];
            let v = up * if th == 1.0 { b } else { a + th * (b - a) };
            delta[j] = v - slice.values[j];
            slice.values[j] = v;
            written += 1;
        }
        if is_prev {
            correct_successor(&*prev, curr, &delta, w, grid.dt(), periodic, nl, &frozen);
        }
    }
    written
}

// Adds to `next` the change that `delta` applied to `base` makes in one
// leapfrog step.
#[allow(clippy::too_many_arguments)]
fn correct_successor(
    base: &FieldSlice,
    next: &mut FieldSlice,
    delta: &[f64],
    w: Window,
    dt: f64,
    periodic: bool,
    nl: &Nonlinearity,
    frozen: &dyn Fn(usize) -> bool,
) {
    let n = delta.len();
    let lo = w.i_minus;
    let hi = (w.i_plus).min(n - 1 + usize::from(periodic));
    for j in lo..=hi {
        let j = j % n;
        if !periodic && (j == 0 || j == n - 1) {
            continue;
        }
        if frozen(j) {
            continue;
        }
        let l = delta[(j + n - 1) % n];
        let r = delta[(j + 1) % n];
        let d = delta[j];
        if l == 0.0 && r == 0.0 && d == 0.0 {
            continue;
        }
        let mut change = l + r;
        if d != 0.0 {
            let new = base.values[j];
            let old = new - d;
            if let (Ok(a), Ok(b)) = (nl.eval(new), nl.eval(old)) {
                change += dt * dt * (a - b);
            }
        }
        next.values[j] += change;
    }
}

/// Multiscale value at physical `(x, t)`.
pub fn assemble(h: &Hierarchy, x: f64, t: f64) -> Result<f64, RescaleError> {
    let a = h.alpha();
    for lvl in h.levels.iter().rev() {
        let dt = lvl.grid.dt();
        let eps = TIME_EPS * dt;
        let tau = (t - lvl.start_time) / lvl.scale;
        if tau < -eps || tau > lvl.curr.time + eps {
            continue;
        }
        let pos = (x / lvl.scale - lvl.grid.x_left()) / lvl.grid.spacing();
        let cells = lvl.grid.n_cells() as f64;
        let pos_eps = 1e-9;
        let inside = if lvl.k == 0 {
            pos >= -pos_eps && pos <= cells + pos_eps
        } else {
            pos > pos_eps && pos < cells - pos_eps
        };
        if !inside {
            continue;
        }
        let v = lvl.value_at(pos, tau.clamp(0.0, lvl.curr.time))?;
        return Ok(lvl.scale.powf(-a) * v);
    }
    Err(RescaleError::OutOfRange { x, t })
}

/// Closed-form limit of `tau*_k`:
/// `M^{(1-p)/2} mu^{(p-1)/2} (1/lambda - 1)` with
/// `mu = (2(p+1)/(p-1)^2)^{1/(p-1)}`.
pub fn tau_limit(cfg: &RescaleConfig, u0_max: f64) -> f64 {
    let p = cfg.p;
    let m = cfg.threshold.resolve(p, cfg.lambda, u0_max);
    let mu = profile_constant(p);
    m.powf(0.5 * (1.0 - p)) * mu.powf(0.5 * (p - 1.0)) * (cfg.lambda.inverse() as f64 - 1.0)
}

/// `mu = (2(p+1)/(p-1)^2)^{1/(p-1)}`.
pub fn profile_constant(p: f64) -> f64 {
    (2.0 * (p + 1.0) / ((p - 1.0) * (p - 1.0))).powf(1.0 / (p - 1.0))
}

/// Node ranges of the blocks: block 1 is `[0, J]`, block `j > 1` is
/// `[(j-1)J + 1, jJ]`. On a periodic grid the last block stops at `I - 1`.
pub fn block_ranges(grid: &GridSpec, j_blocks: usize) -> Result<Vec<(usize, usize)>, RescaleError> {
    let i = grid.n_cells();
    if j_blocks == 0 || j_blocks * j_blocks != i {
        return Err(RescaleError::Config(format!(
            "block count {j_blocks} does not satisfy J^2 = I = {i}"
        )));
    }
    let last = grid.node_count() - 1;
    Ok((1..=j_blocks)
        .map(|j| {
            let lo = if j == 1 { 0 } else { (j - 1) * j_blocks + 1 };
            (lo, (j * j_blocks).min(last))
        })
        .collect())
}

/// Runs one block from a copy of the shared base level.
pub fn run_block(
    problem: &BaseProblem,
    base: &LevelState,
    cfg: &RescaleConfig,
    block: usize,
    range: (usize, usize),
) -> Result<(Hierarchy, BlowupEstimate), RescaleError> {
    let mut h = Hierarchy::new(problem, base.clone(), cfg, block, range)?;
    let est = h.run();
    Ok((h, est))
}

/// Runs every block in parallel; results come back in block order.
pub fn run_blocks(
    problem: &BaseProblem,
    cfg: &RescaleConfig,
    j_blocks: usize,
) -> Result<Vec<(Hierarchy, BlowupEstimate)>, RescaleError> {
    let ranges = block_ranges(&problem.grid, j_blocks)?;
    let base = problem.base_level(cfg)?;
    ranges
        .par_iter()
        .enumerate()
        .map(|(idx, r)| run_block(problem, &base, cfg, idx + 1, *r))
        .collect()
}

/// Whole-domain run (reported as block 0).
pub fn run_global(
    problem: &BaseProblem,
    cfg: &RescaleConfig,
) -> Result<(Hierarchy, BlowupEstimate), RescaleError> {
    let mut h = Hierarchy::global(problem, cfg)?;
    let est = h.run();
    Ok((h, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::Monotonicity;
    use std::f64::consts::PI;

    fn lam2() -> ScaleFactor {
        ScaleFactor::new(2).unwrap()
    }

    fn example2(n: usize) -> BaseProblem {
        let g = GridSpec::unit(n, Topology::Periodic).unwrap();
        let u0 = g.sample(|x| 100.0 * (1.0 - (2.0 * PI * x).cos()));
        let u1 = g.sample(|x| 10.0 * (2.0 * PI * x).sin());
        BaseProblem::new(g, u0, u1, None).unwrap()
    }

    #[test]
    fn parses_lambda() {
        assert_eq!("1/2".parse::<ScaleFactor>().unwrap().inverse(), 2);
        assert_eq!("0.25".parse::<ScaleFactor>().unwrap().inverse(), 4);
        assert!("2/3".parse::<ScaleFactor>().is_err());
        assert!("0.3".parse::<ScaleFactor>().is_err());
        assert_eq!(lam2().to_string(), "1/2");
    }

    #[test]
    fn threshold_from_data() {
        let m = ThresholdRule::FromInitialData.resolve(2.0, lam2(), 200.0);
        assert!((m - 800.0).abs() < 1e-12);
        let m = ThresholdRule::FromInitialData.resolve(3.0, lam2(), 31.25);
        assert!((m - 62.5).abs() < 1e-12);
    }

    #[test]
    fn tau_limit_example2() {
        let cfg = RescaleConfig::new(2.0, lam2());
        assert!((profile_constant(2.0) - 6.0).abs() < 1e-12);
        assert!((tau_limit(&cfg, 200.0) - (6.0_f64 / 800.0).sqrt()).abs() < 1e-15);
        assert!((profile_constant(3.0) - 2f64.sqrt()).abs() < 1e-12);
        let mut c1 = cfg.clone();
        c1.lambda = ScaleFactor::new(1).unwrap();
        assert_eq!(tau_limit(&c1, 200.0), 0.0);
    }

    #[test]
    fn block_partition() {
        let g = GridSpec::unit(16, Topology::Dirichlet).unwrap();
        let r = block_ranges(&g, 4).unwrap();
        assert_eq!(r, vec![(0, 4), (5, 8), (9, 12), (13, 16)]);
        let g = GridSpec::unit(16, Topology::Periodic).unwrap();
        assert_eq!(block_ranges(&g, 4).unwrap()[3], (13, 15));
        assert!(block_ranges(&g, 3).is_err());
    }

    #[test]
    fn single_level_advance_is_one_step() {
        let prob = example2(100);
        let cfg = RescaleConfig::new(2.0, lam2());
        let mut h = Hierarchy::global(&prob, &cfg).unwrap();
        let base = h.levels[0].clone();
        h.advance().unwrap();
        let nl = Nonlinearity::power(2.0).unwrap();
        let want = step(&base.grid, &nl, &base.prev, &base.curr, None, 1e12).unwrap();
        assert_eq!(h.levels[0].curr.values, want.values);
        assert_eq!(h.levels[0].steps(), 2);
    }

    #[test]
    fn identity_scale_samples_parent() {
        let g = GridSpec::unit(10, Topology::Periodic).unwrap();
        let dt = g.dt();
        let prev = FieldSlice::new(g.sample(|x| x * (1.0 - x)), 3, 3.0 * dt);
        let curr = FieldSlice::new(g.sample(|x| 2.0 * x * (1.0 - x)), 4, 4.0 * dt);
        let look = FieldSlice::new(g.sample(|x| 3.0 * x * (1.0 - x)), 5, 5.0 * dt);
        let parent = LevelState {
            k: 0,
            grid: g.clone(),
            spawn_max: 0.0,
            prev: prev.clone(),
            curr: curr.clone(),
            link: None,
            start_time: 0.0,
            scale: 1.0,
            physical_edges: (false, false),
            overflowed: false,
            taint: None,
            history: None,
        };
        let mut cfg = RescaleConfig::new(2.0, lam2());
        cfg.lambda = ScaleFactor::new(1).unwrap();
        let w = Window {
            i_minus: 3,
            i_plus: 6,
            classification: Monotonicity::Interior,
        };
        let tau = 3.5 * dt;
        let child = spawn_level(&parent, &look, &w, tau, &cfg).unwrap();
        assert_eq!(child.grid.n_cells(), 3);
        for l in 0..=3 {
            let i = 3 + l;
            let want = 0.5 * (prev.values[i] + curr.values[i]);
            assert!((child.prev.values[l] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn injection_scales_back_and_is_idempotent() {
        let prob = example2(100);
        let mut cfg = RescaleConfig::new(2.0, lam2());
        cfg.k_max = 3;
        let mut h = Hierarchy::global(&prob, &cfg).unwrap();
        while h.depth() < 1 {
            h.advance().unwrap();
        }
        for _ in 0..3 {
            h.advance().unwrap();
        }
        let (parents, rest) = h.levels.split_at_mut(1);
        let before = (parents[0].prev.clone(), parents[0].curr.clone());
        inject_to_parent(
            &rest[0],
            &mut parents[0],
            lam2(),
            2.0,
            &Nonlinearity::power(2.0).unwrap(),
        );
        let once = (parents[0].prev.clone(), parents[0].curr.clone());
        inject_to_parent(
            &rest[0],
            &mut parents[0],
            lam2(),
            2.0,
            &Nonlinearity::power(2.0).unwrap(),
        );
        assert_eq!(once.0, parents[0].prev);
        assert_eq!(once.1, parents[0].curr);
        assert_eq!(before, once);
    }

    #[test]
    fn injected_value_is_child_times_four() {
        let g = GridSpec::unit(8, Topology::Periodic).unwrap();
        let h = g.dt();
        let mk = |vals: Vec<f64>, n: u64| FieldSlice::new(vals, n, n as f64 * h);
        let mut parent = LevelState {
            k: 0,
            grid: g.clone(),
            spawn_max: 0.0,
            prev: mk(vec![1.0; 8], 2),
            curr: mk(vec![1.0; 8], 3),
            link: None,
            start_time: 0.0,
            scale: 1.0,
            physical_edges: (false, false),
            overflowed: false,
            taint: None,
            history: None,
        };
        let cg = GridSpec::new(4, h, 6.0 * h, Topology::Dirichlet).unwrap();
        let child = LevelState {
            k: 1,
            grid: cg,
            spawn_max: 0.0,
            prev: mk(vec![0.0, 0.0, 200.0, 0.0, 0.0], 1),
            curr: mk(vec![0.0, 0.0, 200.0, 0.0, 0.0], 2),
            link: Some(ParentLink {
                window: Window {
                    i_minus: 3,
                    i_plus: 5,
                    classification: Monotonicity::Interior,
                },
                tau_star: 2.0 * h,
            }),
            start_time: 2.0 * h,
            scale: 0.5,
            physical_edges: (false, false),
            overflowed: false,
            taint: None,
            history: None,
        };
        // Child step 2 ends at parent time 3h, the parent's curr slice.
        assert_eq!(
            inject_to_parent(&child, &mut parent, lam2(), 2.0, &Nonlinearity::zero()),
            1
        );
        assert_eq!(parent.curr.values[4], 800.0);
        assert_eq!(parent.prev.values[4], 1.0);
        assert_eq!(parent.curr.values[3], 1.0);
    }

    #[test]
    fn spawn_contraction_example2() {
        let prob = example2(100);
        let mut cfg = RescaleConfig::new(2.0, lam2());
        cfg.k_max = 6;
        let mut h = Hierarchy::global(&prob, &cfg).unwrap();
        h.run();
        assert!(h.levels.len() >= 6);
        for lvl in &h.levels[1..] {
            assert!(
                (lvl.spawn_max - 200.0).abs() <= 1e-10 * 800.0,
                "{}",
                lvl.spawn_max
            );
        }
    }

    #[test]
    fn clocks_increase() {
        let prob = example2(100);
        let mut cfg = RescaleConfig::new(2.0, lam2());
        cfg.k_max = 12;
        let (h, est) = run_global(&prob, &cfg).unwrap();
        assert_eq!(est.status, Status::DepthExhausted);
        assert_eq!(h.taus.len(), 13);
        for w in h.taus.windows(2) {
            assert!(w[1].t_k > w[0].t_k);
            assert!(w[1].tau_star > 0.0);
        }
        assert_eq!(est.t_blowup, h.taus.last().unwrap().t_k);
    }

    #[test]
    fn boundary_feed_at_spawn_matches_phi() {
        let prob = example2(100);
        let cfg = RescaleConfig::new(2.0, lam2());
        let mut h = Hierarchy::global(&prob, &cfg).unwrap();
        while h.depth() < 1 {
            h.advance().unwrap();
        }
        let child = &h.levels[1];
        let (l, r) = boundary_feed(&h.levels[0], child, 0, &cfg).unwrap();
        let last = child.prev.values.len() - 1;
        assert!((l - child.prev.values[0]).abs() < 1e-12 * l.abs());
        assert!((r - child.prev.values[last]).abs() < 1e-12 * r.abs());
    }
}
