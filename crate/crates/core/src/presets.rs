//! Initial-boundary data for the built-in experiments.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::ExactSolutionEx1;
use crate::rescale::{BaseProblem, BoundaryFn, RescaleConfig, ScaleFactor};
use crate::solver::{GridSpec, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Dirichlet problem on `[0, 1]` with a known blow-up curve `T + d x`.
    Example1,
    /// `u0 = 100 (1 - cos 2 pi x)`, `u1 = 10 sin 2 pi x`, periodic.
    Example2,
    /// `u0 = 10 (2 - cos 2 pi x - cos 4 pi x)`, `u1 = 0`, periodic.
    Example3,
    /// Periodic data read from a CSV file with columns `x, u0, u1`.
    Custom,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Example1 => "example1",
            Preset::Example2 => "example2",
            Preset::Example3 => "example3",
            Preset::Custom => "custom",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "example1" | "ex1" | "1" => Ok(Preset::Example1),
            "example2" | "ex2" | "2" => Ok(Preset::Example2),
            "example3" | "ex3" | "3" => Ok(Preset::Example3),
            "custom" => Ok(Preset::Custom),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

/// Example 1 parameters.
pub const EX1_T: f64 = 0.5;
pub const EX1_D: f64 = 0.1;

/// Comparison time for the Example 1 error table.
///
/// Fixed times for `p = 2` and `p = 3` with the default `T`; other cases use
/// `0.8 T`.
pub fn default_eval_time(p: f64, t_blowup: f64) -> f64 {
    if p == 2.0 && t_blowup == EX1_T {
        15.0 / 32.0
    } else if p == 3.0 && t_blowup == EX1_T {
        31.0 / 64.0
    } else {
        0.8 * t_blowup
    }
}

impl Preset {
    pub fn default_p(&self) -> f64 {
        match self {
            Preset::Example3 => 3.0,
            _ => 2.0,
        }
    }

    pub fn default_sizes(&self) -> Vec<usize> {
        match self {
            Preset::Example2 => vec![100],
            _ => vec![256],
        }
    }

    /// Whether the preset computes a blow-up curve by default.
    pub fn default_blocks(&self) -> bool {
        matches!(self, Preset::Example1 | Preset::Example3)
    }

    /// Engine settings used unless overridden.
    pub fn default_config(&self, p: f64) -> RescaleConfig {
        let mut cfg = RescaleConfig::new(p, ScaleFactor::new(2).expect("2 is a valid factor"));
        if *self == Preset::Example2 {
            // The tau* series is followed to k = 40, so no early stop, and a
            // wider window keeps the series flat on fine grids.
            cfg.tail_tol = 0.0;
            cfg.pad_cells = 12;
        }
        cfg
    }
}

/// Initial data, with the exact solution when one is known.
pub struct ProblemSetup {
    pub problem: BaseProblem,
    pub exact: Option<ExactSolutionEx1>,
}

pub fn build_problem(
    preset: Preset,
    p: f64,
    n_cells: usize,
    ex1: (f64, f64),
    init_file: Option<&Path>,
) -> anyhow::Result<ProblemSetup> {
    match preset {
        Preset::Example1 => {
            let sol = ExactSolutionEx1::new(p, ex1.0, ex1.1)?;
            let grid = GridSpec::unit(n_cells, Topology::Dirichlet)?;
            let u0 = grid
                .nodes()
                .into_iter()
                .map(|x| sol.eval(x, 0.0))
                .collect::<Result<Vec<_>, _>>()?;
            let u1 = grid
                .nodes()
                .into_iter()
                .map(|x| sol.time_derivative(x, 0.0))
                .collect::<Result<Vec<_>, _>>()?;
            let g: BoundaryFn = Arc::new(move |t| {
                (
                    sol.eval(0.0, t).unwrap_or(f64::INFINITY),
                    sol.eval(1.0, t).unwrap_or(f64::INFINITY),
                )
            });
            Ok(ProblemSetup {
                problem: BaseProblem::new(grid, u0, u1, Some(g))?,
                exact: Some(sol),
            })
        }
        Preset::Example2 => periodic(
            n_cells,
            |x| 100.0 * (1.0 - (2.0 * PI * x).cos()),
            |x| 10.0 * (2.0 * PI * x).sin(),
        ),
        Preset::Example3 => periodic(
            n_cells,
            |x| 10.0 * (2.0 - (2.0 * PI * x).cos() - (4.0 * PI * x).cos()),
            |_| 0.0,
        ),
        Preset::Custom => {
            let path =
                init_file.ok_or_else(|| anyhow::anyhow!("the custom preset needs an init file"))?;
            let (xs, u0, u1) = read_init(path)?;
            let (a, b) = interpolate_init(&xs, &u0, &u1, n_cells)?;
            let grid = GridSpec::unit(n_cells, Topology::Periodic)?;
            Ok(ProblemSetup {
                problem: BaseProblem::new(grid, a, b, None)?,
                exact: None,
            })
        }
    }
}

fn periodic(
    n_cells: usize,
    u0: impl Fn(f64) -> f64,
    u1: impl Fn(f64) -> f64,
) -> anyhow::Result<ProblemSetup> {
    let grid = GridSpec::unit(n_cells, Topology::Periodic)?;
    let a = grid.sample(u0);
    let b = grid.sample(u1);
    Ok(ProblemSetup {
        problem: BaseProblem::new(grid, a, b, None)?,
        exact: None,
    })
}

#[derive(Debug, Deserialize)]
struct InitRow {
    x: f64,
    u0: f64,
    u1: f64,
}

fn read_init(path: &Path) -> anyhow::Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows: Vec<InitRow> = rdr.deserialize().collect::<Result<_, _>>()?;
    rows.sort_by(|a, b| a.x.total_cmp(&b.x));
    if rows.len() < 2 {
        anyhow::bail!("{} holds fewer than two samples", path.display());
    }
    Ok((
        rows.iter().map(|r| r.x).collect(),
        rows.iter().map(|r| r.u0).collect(),
        rows.iter().map(|r| r.u1).collect(),
    ))
}

// Periodic piecewise-linear resampling onto the unit grid.
fn interpolate_init(
    xs: &[f64],
    u0: &[f64],
    u1: &[f64],
    n_cells: usize,
) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    if xs.iter().any(|x| !(0.0..=1.0).contains(x)) {
        anyhow::bail!("init samples must lie in [0, 1]");
    }
    let at = |vals: &[f64], x: f64| -> f64 {
        let n = xs.len();
        let k = xs.partition_point(|&v| v <= x);
        let (xa, va, xb, vb) = if k == 0 {
            (xs[n - 1] - 1.0, vals[n - 1], xs[0], vals[0])
        } else if k == n {
            (xs[n - 1], vals[n - 1], xs[0] + 1.0, vals[0])
        } else {
            (xs[k - 1], vals[k - 1], xs[k], vals[k])
        };
        if xb == xa {
            va
        } else {
            va + (vb - va) * (x - xa) / (xb - xa)
        }
    };
    let h = 1.0 / n_cells as f64;
    let a = (0..n_cells).map(|i| at(u0, i as f64 * h)).collect();
    let b = (0..n_cells).map(|i| at(u1, i as f64 * h)).collect();
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in [
            Preset::Example1,
            Preset::Example2,
            Preset::Example3,
            Preset::Custom,
        ] {
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn example2_threshold_is_800() {
        let s = build_problem(Preset::Example2, 2.0, 100, (EX1_T, EX1_D), None).unwrap();
        let cfg = Preset::Example2.default_config(2.0);
        let m = cfg.threshold.resolve(2.0, cfg.lambda, s.problem.u0_max());
        assert!((m - 800.0).abs() < 1e-9);
    }

    #[test]
    fn example1_data_matches_exact() {
        let s = build_problem(Preset::Example1, 2.0, 64, (EX1_T, EX1_D), None).unwrap();
        assert!((s.problem.u0[0] - 23.76).abs() < 1e-12);
        assert!((s.problem.u0[64] - 16.5).abs() < 1e-12);
    }

    #[test]
    fn custom_resampling_is_exact_on_nodes() {
        let xs = [0.0, 0.25, 0.5, 0.75];
        let u0 = [1.0, 2.0, 3.0, 4.0];
        let (a, _) = interpolate_init(&xs, &u0, &u0, 8).unwrap();
        assert_eq!(a, vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 2.5]);
    }
}
