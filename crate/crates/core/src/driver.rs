//! The `run`, `study` and `verify-lemmas` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    blowup_curve, error_report, example1_window_run, lemma1_oracle, lemma2_oracle, lemma3_oracle,
    rate_fit_trace, AnalysisError, CurvePoint, ErrorReport, ExactSolutionEx1, Lemma3Instance,
    Lemma3Scope, LemmaVerdict, RateFit,
};
use crate::manifest::{ConfigError, RunManifest};
use crate::output::{
    write_csv, write_json, Cell, BLOWUP_CURVE_HEADER, CONVERGENCE_HEADER, ERROR_TABLE_HEADER,
    NORM_TRACE_HEADER, SNAPSHOTS_HEADER, TAU_SERIES_HEADER,
};
use crate::presets::build_problem;
use crate::rescale::{
    run_blocks, run_global, tau_limit, BlowupEstimate, Hierarchy, RescaleError, Status, TauRecord,
};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Check(String),
}

impl From<RescaleError> for DriverError {
    fn from(e: RescaleError) -> Self {
        match e {
            RescaleError::Config(msg) => DriverError::Config(ConfigError::Invalid(msg)),
            other => DriverError::Numerical(other.to_string()),
        }
    }
}

impl From<AnalysisError> for DriverError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Parameter(msg) => DriverError::Config(ConfigError::Invalid(msg)),
            other => DriverError::Numerical(other.to_string()),
        }
    }
}

// Problem setup: bad parameters or an unreadable init file.
impl From<anyhow::Error> for DriverError {
    fn from(e: anyhow::Error) -> Self {
        DriverError::Config(ConfigError::Invalid(format!("{e:#}")))
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub message: String,
}

impl DriverError {
    pub fn kind(&self) -> &'static str {
        match self {
            DriverError::Config(_) => "config",
            DriverError::Numerical(_) => "numerical",
            DriverError::Io { .. } => "io",
            DriverError::Check(_) => "check_failed",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            kind: self.kind(),
            message: self.to_string(),
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> DriverError {
    let context = context.into();
    move |source| DriverError::Io { context, source }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub block: usize,
    /// Base-grid node range of the block.
    pub range: (usize, usize),
    pub x_mid: Option<f64>,
    pub status: String,
    pub t_blowup: f64,
    pub depth: usize,
    pub tail_bound: f64,
    pub message: Option<String>,
    pub rate_fit: Option<RateFit>,
    pub rate_fit_note: Option<String>,
    pub tau_series: Vec<TauRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeSummary {
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "J")]
    pub j: Option<usize>,
    pub threshold: f64,
    pub tau_limit: f64,
    pub global: RunSummary,
    pub blocks: Vec<RunSummary>,
    pub error: Option<ErrorReport>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    command: &'static str,
    config: &'a RunManifest,
    runs: &'a [SizeSummary],
}

/// Everything computed for one grid size.
pub struct SizeResult {
    pub summary: SizeSummary,
    pub global: Hierarchy,
    pub blocks: Vec<Hierarchy>,
    pub curve: Vec<CurvePoint>,
}

fn summarize(h: &Hierarchy, est: &BlowupEstimate, dt_base: f64, x_mid: Option<f64>) -> RunSummary {
    let (rate_fit, rate_fit_note) = match rate_fit_trace(&h.trace, est.t_blowup, dt_base) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    RunSummary {
        block: h.block,
        range: h.range,
        x_mid,
        status: est.status.to_string(),
        t_blowup: est.t_blowup,
        depth: est.depth_used,
        tail_bound: est.tail_bound,
        message: h.error.clone(),
        rate_fit,
        rate_fit_note,
        tau_series: h.taus.clone(),
    }
}

/// Runs the global hierarchy and, when requested, the blocks for size `n`.
pub fn compute_size(
    m: &RunManifest,
    n: usize,
    with_error: bool,
) -> Result<SizeResult, DriverError> {
    let setup = build_problem(m.preset, m.cfg.p, n, (m.t_blowup, m.d), m.init.as_deref())?;
    let prob = setup.problem;
    let mut cfg = m.cfg.clone();
    cfg.record_trace = true;
    let want_error = with_error && setup.exact.is_some();
    cfg.record_history = want_error || m.emit.solution_snapshots;
    let (global, gest) = run_global(&prob, &cfg)?;
    let dt = prob.grid.dt();

    let error = match (&setup.exact, want_error) {
        (Some(sol), true) => Some(eval_error(&global, sol, m.eval_time)?),
        _ => None,
    };

    let j = m.blocks_for(n);
    let (blocks, curve, block_sums) = match j {
        Some(j) => {
            let mut bcfg = cfg.clone();
            bcfg.record_history = false;
            bcfg.blocks = Some(j);
            let res = run_blocks(&prob, &bcfg, j)?;
            let ests: Vec<BlowupEstimate> = res.iter().map(|r| r.1).collect();
            let curve = blowup_curve(&ests, &prob.grid, j)?;
            let sums = res
                .iter()
                .zip(&curve)
                .map(|((h, e), c)| summarize(h, e, dt, Some(c.x_mid)))
                .collect();
            (res.into_iter().map(|r| r.0).collect(), curve, sums)
        }
        None => (Vec::new(), Vec::new(), Vec::new()),
    };

    let summary = SizeSummary {
        i: n,
        j,
        threshold: global.threshold(),
        tau_limit: tau_limit(&cfg, prob.u0_max()),
        global: summarize(&global, &gest, dt, None),
        blocks: block_sums,
        error,
    };
    Ok(SizeResult {
        summary,
        global,
        blocks,
        curve,
    })
}

fn eval_error(h: &Hierarchy, sol: &ExactSolutionEx1, t: f64) -> Result<ErrorReport, DriverError> {
    error_report(h, sol, t).map_err(|e| {
        DriverError::Numerical(format!(
            "no error table at t = {t}: {e} (run status {})",
            h.status
        ))
    })
}

fn tau_rows(res: &SizeResult) -> Vec<Vec<Cell>> {
    std::iter::once(&res.global)
        .chain(&res.blocks)
        .flat_map(|h| {
            h.taus.iter().map(move |r| {
                vec![
                    h.block.into(),
                    r.k.into(),
                    r.tau_star.into(),
                    r.scaled.into(),
                    r.t_k.into(),
                ]
            })
        })
        .collect()
}

fn curve_rows(curve: &[CurvePoint]) -> Vec<Vec<Cell>> {
    curve
        .iter()
        .map(|c| {
            vec![
                c.block.into(),
                c.x_mid.into(),
                c.t_j.into(),
                c.depth.into(),
                c.status.to_string().into(),
            ]
        })
        .collect()
}

fn error_rows(reports: &[ErrorReport]) -> Vec<Vec<Cell>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.i.into(),
                r.rel_l2.into(),
                r.rel_linf.into(),
                r.eval_time.into(),
            ]
        })
        .collect()
}

/// The trace of the block that blows up first, preferring blocks whose run
/// ended normally, or of the global run when there are no blocks.
fn trace_source(res: &SizeResult) -> &Hierarchy {
    let t_end = |h: &Hierarchy| h.taus.last().map_or(f64::INFINITY, |t| t.t_k);
    let normal = |h: &Hierarchy| matches!(h.status, Status::Converged | Status::DepthExhausted);
    let earliest = |only_normal: bool| {
        res.blocks
            .iter()
            .filter(|h| t_end(h).is_finite() && (!only_normal || normal(h)))
            .min_by(|a, b| t_end(a).total_cmp(&t_end(b)).then(a.block.cmp(&b.block)))
    };
    earliest(true)
        .or_else(|| earliest(false))
        .unwrap_or(&res.global)
}

fn trace_rows(h: &Hierarchy) -> Vec<Vec<Cell>> {
    h.trace
        .iter()
        .map(|s| vec![s.t.into(), s.l2.into(), s.linf.into(), s.level.into()])
        .collect()
}

const SNAPSHOT_SLICES: usize = 64;

fn snapshot_rows(h: &Hierarchy, stride: usize) -> Vec<Vec<Cell>> {
    let a = h.config().alpha();
    let mut rows = Vec::new();
    for lvl in &h.levels {
        let mut slices: Vec<_> = lvl.history.iter().flatten().collect();
        slices.push(&lvl.prev);
        slices.push(&lvl.curr);
        let step = if stride > 0 {
            stride
        } else {
            slices.len().div_ceil(SNAPSHOT_SLICES).max(1)
        };
        let s = lvl.scale.powf(-a);
        let last = slices.len() - 1;
        for (n, sl) in slices.iter().enumerate() {
            if n % step != 0 && n != last {
                continue;
            }
            let t = lvl.start_time + lvl.scale * sl.time;
            for (i, v) in sl.values.iter().enumerate() {
                rows.push(vec![
                    lvl.k.into(),
                    sl.time_index.into(),
                    (lvl.scale * lvl.grid.x(i)).into(),
                    t.into(),
                    (s * v).into(),
                ]);
            }
        }
    }
    rows
}

fn write_size_files(m: &RunManifest, res: &SizeResult, dir: &Path) -> Result<(), DriverError> {
    let csv = |name: &str, header: &[&str], rows: Vec<Vec<Cell>>| {
        let path = dir.join(name);
        write_csv(&path, header, &rows).map_err(io_err(path.display().to_string()))
    };
    if m.emit.tau_series {
        csv("tau_series.csv", &TAU_SERIES_HEADER, tau_rows(res))?;
    }
    if m.emit.blowup_curve && !res.curve.is_empty() {
        csv(
            "blowup_curve.csv",
            &BLOWUP_CURVE_HEADER,
            curve_rows(&res.curve),
        )?;
    }
    if m.emit.error_table {
        if let Some(r) = res.summary.error {
            csv("error_table.csv", &ERROR_TABLE_HEADER, error_rows(&[r]))?;
        }
    }
    if m.emit.norm_trace {
        csv(
            "norm_trace.csv",
            &NORM_TRACE_HEADER,
            trace_rows(trace_source(res)),
        )?;
    }
    if m.emit.solution_snapshots {
        csv(
            "snapshots.csv",
            &SNAPSHOTS_HEADER,
            snapshot_rows(&res.global, m.snapshot_stride),
        )?;
    }
    Ok(())
}

fn size_dir(m: &RunManifest, n: usize) -> PathBuf {
    if m.sizes.len() > 1 {
        m.output_dir.join(format!("I_{n}"))
    } else {
        m.output_dir.clone()
    }
}

fn make_dir(dir: &Path) -> Result<(), DriverError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))
}

pub struct RunOutcome {
    pub sizes: Vec<SizeSummary>,
    pub curves: Vec<Vec<CurvePoint>>,
}

/// Executes a manifest and writes its files.
pub fn run(m: &RunManifest) -> Result<RunOutcome, DriverError> {
    make_dir(&m.output_dir)?;
    let results: Vec<SizeResult> = m
        .sizes
        .par_iter()
        .map(|&n| compute_size(m, n, m.emit.error_table))
        .collect::<Result<_, _>>()?;
    for res in &results {
        let dir = size_dir(m, res.summary.i);
        make_dir(&dir)?;
        write_size_files(m, res, &dir)?;
    }
    let sizes: Vec<SizeSummary> = results.iter().map(|r| r.summary.clone()).collect();
    let path = m.output_dir.join("summary.json");
    write_json(
        &path,
        &Summary {
            command: "run",
            config: m,
            runs: &sizes,
        },
    )
    .map_err(io_err(path.display().to_string()))?;
    Ok(RunOutcome {
        sizes,
        curves: results.into_iter().map(|r| r.curve).collect(),
    })
}

/// Orders below this are flagged in a convergence study.
pub const MIN_ORDER: f64 = 1.5;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OrderRow {
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "I_next")]
    pub i_next: usize,
    pub order_l2: f64,
    pub order_linf: f64,
    /// Refinement factor between the two sizes.
    pub ratio: f64,
    pub below_threshold: bool,
}

#[derive(Debug, Serialize)]
pub struct StudyOutcome {
    pub errors: Vec<ErrorReport>,
    pub orders: Vec<OrderRow>,
}

#[derive(Serialize)]
struct StudySummary<'a> {
    command: &'static str,
    config: &'a RunManifest,
    errors: &'a [ErrorReport],
    orders: &'a [OrderRow],
    min_order: f64,
}

/// Sizes must form a geometric progression with an integer ratio above one.
pub fn check_progression(sizes: &[usize]) -> Result<usize, ConfigError> {
    if sizes.len() < 3 {
        return Err(ConfigError::Invalid(format!(
            "a convergence study needs at least 3 grid sizes, got {}",
            sizes.len()
        )));
    }
    let r = sizes[1] / sizes[0];
    let ok = r >= 2 && sizes.windows(2).all(|w| w[1] == w[0] * r);
    if !ok {
        return Err(ConfigError::Invalid(format!(
            "grid sizes {sizes:?} are not a geometric progression"
        )));
    }
    Ok(r)
}

pub fn observed_orders(errors: &[ErrorReport], ratio: usize) -> Vec<OrderRow> {
    let lr = (ratio as f64).ln();
    errors
        .windows(2)
        .map(|w| {
            let o2 = (w[0].rel_l2 / w[1].rel_l2).ln() / lr;
            let oi = (w[0].rel_linf / w[1].rel_linf).ln() / lr;
            OrderRow {
                i: w[0].i,
                i_next: w[1].i,
                order_l2: o2,
                order_linf: oi,
                ratio: ratio as f64,
                // NaN orders are flagged too
                below_threshold: !(o2 >= MIN_ORDER && oi >= MIN_ORDER),
            }
        })
        .collect()
}

/// Error table and observed orders over a sequence of refinements.
pub fn study(m: &RunManifest) -> Result<StudyOutcome, DriverError> {
    let ratio = check_progression(&m.sizes)?;
    if m.preset != crate::presets::Preset::Example1 {
        return Err(
            ConfigError::Invalid("a convergence study needs the example1 preset".into()).into(),
        );
    }
    make_dir(&m.output_dir)?;
    let mut sm = m.clone();
    sm.blocks = crate::manifest::BlockMode::None;
    sm.emit.solution_snapshots = false;
    let errors: Vec<ErrorReport> = m
        .sizes
        .par_iter()
        .map(|&n| {
            let res = compute_size(&sm, n, true)?;
            res.summary
                .error
                .ok_or_else(|| DriverError::Numerical(format!("no error table for I = {n}")))
        })
        .collect::<Result<_, _>>()?;
    let orders = observed_orders(&errors, ratio);

    let path = m.output_dir.join("error_table.csv");
    write_csv(&path, &ERROR_TABLE_HEADER, &error_rows(&errors))
        .map_err(io_err(path.display().to_string()))?;
    let rows: Vec<Vec<Cell>> = orders
        .iter()
        .map(|o| {
            vec![
                o.i.into(),
                o.i_next.into(),
                o.order_l2.into(),
                o.order_linf.into(),
                o.ratio.into(),
                o.below_threshold.to_string().into(),
            ]
        })
        .collect();
    let path = m.output_dir.join("convergence.csv");
    write_csv(&path, &CONVERGENCE_HEADER, &rows).map_err(io_err(path.display().to_string()))?;
    let path = m.output_dir.join("summary.json");
    write_json(
        &path,
        &StudySummary {
            command: "study",
            config: m,
            errors: &errors,
            orders: &orders,
            min_order: MIN_ORDER,
        },
    )
    .map_err(io_err(path.display().to_string()))?;
    Ok(StudyOutcome { errors, orders })
}

/// Sizes and depth of the generated comparison instances.
pub const LEMMA3_NODES: usize = 12;
pub const LEMMA3_ROWS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct WindowCheck {
    pub p: f64,
    #[serde(rename = "I")]
    pub i: usize,
    pub window: (f64, f64),
    pub steps: usize,
    pub lemma1: String,
    pub lemma2: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaOutcome {
    pub seed: u64,
    pub cases: usize,
    pub lemma3_passed: usize,
    pub lemma3_failures: Vec<String>,
    pub mutations: usize,
    pub mutations_detected: usize,
    pub windows: Vec<WindowCheck>,
    pub elapsed_s: f64,
}

impl LemmaOutcome {
    pub fn all_passed(&self) -> bool {
        self.lemma3_passed == self.cases
            && self.mutations_detected == self.mutations
            && self.windows.iter().all(|w| w.passed)
    }
}

fn verdict_text(v: &LemmaVerdict) -> String {
    match v {
        LemmaVerdict::Pass => "pass".into(),
        LemmaVerdict::Fail { n, i, value } => format!("fail at n = {n}, i = {i} ({value:e})"),
        LemmaVerdict::Abstain { reason } => format!("abstain: {reason}"),
    }
}

/// Windows of the Example 1 solution used for the convexity and growth checks.
pub const LEMMA_WINDOWS: [(f64, f64); 3] = [(0.0, 1.0), (0.25, 0.5), (0.0, 0.1)];

/// Steps covering `frac` of the time left before blow-up at the window's
/// left edge.
fn window_steps(sol: &ExactSolutionEx1, a: f64, b: f64, n: usize, frac: f64) -> usize {
    let dx = (b - a) / n as f64;
    (frac * sol.blowup_time(a) / dx).floor() as usize
}

/// Randomized comparison instances, sign mutations and Example 1 windows.
pub fn verify_lemmas(seed: u64, cases: usize) -> Result<LemmaOutcome, DriverError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut failures = Vec::new();
    let mut mutations = 0;
    let mut detected = 0;
    for c in 0..cases {
        let inst = Lemma3Instance::generate(&mut rng, LEMMA3_NODES, LEMMA3_ROWS);
        let v = lemma3_oracle(&inst, Lemma3Scope::Cone);
        if v.passed() {
            passed += 1;
        } else if failures.len() < 10 {
            failures.push(format!("case {c}: {}", verdict_text(&v)));
        }
        for n in 2..inst.rows() {
            for i in 1..inst.nodes() - 1 {
                mutations += 1;
                if !lemma3_oracle(&inst.flip_slack(n, i), Lemma3Scope::Cone).passed() {
                    detected += 1;
                }
            }
        }
    }

    let mut checks = Vec::new();
    for p in [2.0, 3.0] {
        let sol = ExactSolutionEx1::new(p, crate::presets::EX1_T, crate::presets::EX1_D)?;
        for n in [64, 256] {
            for (a, b) in LEMMA_WINDOWS {
                checks.push((p, sol, n, a, b));
            }
        }
    }
    let windows = checks
        .par_iter()
        .map(|&(p, sol, n, a, b)| -> Result<WindowCheck, DriverError> {
            let steps = window_steps(&sol, a, b, n, 0.9);
            let run = example1_window_run(&sol, a, b, n, steps)?;
            let l1 = lemma1_oracle(&run);
            let l2 = lemma2_oracle(&run);
            Ok(WindowCheck {
                p,
                i: n,
                window: (a, b),
                steps,
                passed: l1.passed() && l2.passed(),
                lemma1: verdict_text(&l1),
                lemma2: verdict_text(&l2),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(LemmaOutcome {
        seed,
        cases,
        lemma3_passed: passed,
        lemma3_failures: failures,
        mutations,
        mutations_detected: detected,
        windows,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
