//! Space-time bilinear interpolation, threshold crossing and window choice.
//!
//! Internally positions are fractional node indices (`pos = (x - x_left) / dx`)
//! so that child grids, whose nodes sit at `i_minus + l / m` on the parent,
//! map onto the parent without round-off in the coordinate transform.

use std::ops::RangeInclusive;

use thiserror::Error;

use crate::solver::{FieldSlice, GridSpec, Topology};

/// Relative tolerance used when asking whether a value reached the threshold.
pub const THRESHOLD_RTOL: f64 = 1e-12;

// Slack (in units of dx or dt) accepted at the edges of a patch.
const EDGE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("point (x = {x}, t = {t}) lies outside the patch")]
    OutOfDomain { x: f64, t: f64 },
    #[error("slices must be one step apart")]
    NotAdjacent,
    #[error("slice has {got} values, grid expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no node reaches the threshold {0}")]
    NoCrossing(f64),
    #[error("window around node {node} does not fit in the level")]
    Degenerate { node: usize },
    #[error("empty node range")]
    EmptyRange,
}

/// Two consecutive slices of one level.
#[derive(Debug, Clone, Copy)]
pub struct SpaceTimePatch<'a> {
    pub grid: &'a GridSpec,
    pub lo: &'a FieldSlice,
    pub hi: &'a FieldSlice,
}

impl<'a> SpaceTimePatch<'a> {
    pub fn new(
        grid: &'a GridSpec,
        lo: &'a FieldSlice,
        hi: &'a FieldSlice,
    ) -> Result<Self, InterpError> {
        for s in [lo, hi] {
            if s.values.len() != grid.node_count() {
                return Err(InterpError::LengthMismatch {
                    expected: grid.node_count(),
                    got: s.values.len(),
                });
            }
        }
        if lo.time_index + 1 != hi.time_index {
            return Err(InterpError::NotAdjacent);
        }
        Ok(Self { grid, lo, hi })
    }

    pub fn t_lo(&self) -> f64 {
        self.lo.time
    }

    pub fn t_hi(&self) -> f64 {
        self.hi.time
    }

    /// Whether `t` lies in the patch's time span, up to a tiny slack.
    pub fn contains_time(&self, t: f64) -> bool {
        let slack = EDGE_SLACK * self.grid.dt();
        t >= self.t_lo() - slack && t <= self.t_hi() + slack
    }

    fn theta(&self, t: f64) -> Result<f64, InterpError> {
        if !self.contains_time(t) {
            return Err(InterpError::OutOfDomain { x: f64::NAN, t });
        }
        Ok(((t - self.t_lo()) / self.grid.dt()).clamp(0.0, 1.0))
    }

    /// Value at node `i`, linear in time.
    pub fn node_at(&self, i: usize, t: f64) -> Result<f64, InterpError> {
        let th = self.theta(t)?;
        Ok(lerp(self.lo.values[i], self.hi.values[i], th))
    }
}

fn lerp(a: f64, b: f64, th: f64) -> f64 {
    // Exact at both ends.
    if th == 0.0 {
        a
    } else if th == 1.0 {
        b
    } else {
        a + th * (b - a)
    }
}

/// Bilinear value at physical `(x, t)`.
pub fn bilinear_eval(patch: &SpaceTimePatch, x: f64, t: f64) -> Result<f64, InterpError> {
    let pos = (x - patch.grid.x_left()) / patch.grid.spacing();
    eval_at_pos(patch, pos, t).map_err(|_| InterpError::OutOfDomain { x, t })
}

/// Bilinear value at fractional node position `pos` and time `t`.
pub fn eval_at_pos(patch: &SpaceTimePatch, pos: f64, t: f64) -> Result<f64, InterpError> {
    let th = patch.theta(t)?;
    let (i, w) = locate(patch.grid, pos).ok_or(InterpError::OutOfDomain { x: pos, t })?;
    let n = patch.grid.node_count();
    let j = if w == 0.0 { i } else { (i + 1) % n };
    let at = |s: &FieldSlice| lerp(s.values[i], s.values[j], w);
    Ok(lerp(at(patch.lo), at(patch.hi), th))
}

// Left node and weight of the right node for a fractional position.
fn locate(grid: &GridSpec, pos: f64) -> Option<(usize, f64)> {
    let cells = grid.n_cells() as f64;
    let mut pos = pos;
    match grid.topology() {
        Topology::Periodic => {
            pos = pos.rem_euclid(cells);
            if pos >= cells {
                pos = 0.0;
            }
        }
        Topology::Dirichlet => {
            if pos < -EDGE_SLACK || pos > cells + EDGE_SLACK {
                return None;
            }
            pos = pos.clamp(0.0, cells);
        }
    }
    let i = pos.floor();
    let w = pos - i;
    let i = i as usize;
    if i == grid.n_cells() {
        // Right end of a Dirichlet grid.
        return Some((i, 0.0));
    }
    Some((i, w))
}

/// Nodal values at time `t`, linear in time.
pub fn time_slice(patch: &SpaceTimePatch, t: f64) -> Result<Vec<f64>, InterpError> {
    let th = patch.theta(t)?;
    Ok(patch
        .lo
        .values
        .iter()
        .zip(&patch.hi.values)
        .map(|(a, b)| lerp(*a, *b, th))
        .collect())
}

/// Earliest time in the patch at which some node's time-linear interpolant
/// reaches `m`, over all nodes.
pub fn threshold_crossing(patch: &SpaceTimePatch, m: f64) -> Option<f64> {
    let last = patch.grid.node_count() - 1;
    threshold_crossing_in(patch, m, 0..=last)
}

/// [`threshold_crossing`] restricted to a node range.
pub fn threshold_crossing_in(
    patch: &SpaceTimePatch,
    m: f64,
    range: RangeInclusive<usize>,
) -> Option<f64> {
    let dt = patch.grid.dt();
    let t0 = patch.t_lo();
    let mut best: Option<f64> = None;
    for i in range {
        let a = patch.lo.values[i];
        let b = patch.hi.values[i];
        let t = if a >= m {
            t0
        } else if b >= m {
            t0 + dt * ((m - a) / (b - a)).clamp(0.0, 1.0)
        } else {
            continue;
        };
        best = Some(best.map_or(t, |bt| bt.min(t)));
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Monotonicity {
    Increasing,
    Decreasing,
    Interior,
}

/// Node interval `[i_minus, i_plus]` handed to the next level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Window {
    pub i_minus: usize,
    pub i_plus: usize,
    pub classification: Monotonicity,
}

impl Window {
    pub fn cells(&self) -> usize {
        self.i_plus - self.i_minus
    }
}

/// Chooses the window around the largest value over the whole slice.
pub fn select_window(
    grid: &GridSpec,
    values: &[f64],
    m: f64,
    pad_cells: usize,
) -> Result<Window, InterpError> {
    select_window_in(
        grid,
        values,
        m,
        0..=values.len().saturating_sub(1),
        pad_cells,
    )
}

/// Chooses the window around the largest value in `range`.
///
/// Neighbours are read from the whole level (wrapping on periodic grids) so a
/// maximum at the edge of a block still sees both sides. A missing neighbour
/// (end of a Dirichlet grid) places no constraint.
pub fn select_window_in(
    grid: &GridSpec,
    values: &[f64],
    m: f64,
    range: RangeInclusive<usize>,
    pad_cells: usize,
) -> Result<Window, InterpError> {
    if values.len() != grid.node_count() {
        return Err(InterpError::LengthMismatch {
            expected: grid.node_count(),
            got: values.len(),
        });
    }
    let mut arg: Option<usize> = None;
    for i in range {
        if arg.map_or(true, |a| values[i] > values[a]) {
            arg = Some(i);
        }
    }
    let i = arg.ok_or(InterpError::EmptyRange)?;
    let top = values[i];
    if top < m * (1.0 - THRESHOLD_RTOL) {
        return Err(InterpError::NoCrossing(m));
    }

    let n = values.len();
    let periodic = grid.topology() == Topology::Periodic;
    let left = if periodic {
        Some(values[(i + n - 1) % n])
    } else {
        i.checked_sub(1).map(|l| values[l])
    };
    let right = if periodic {
        Some(values[(i + 1) % n])
    } else {
        values.get(i + 1).copied()
    };
    let rises_in = left.map_or(true, |l| l < top);
    let rises_out = right.map_or(true, |r| top < r);
    let falls_in = left.map_or(true, |l| l > top);
    let falls_out = right.map_or(true, |r| top > r);

    let ii = i as i64;
    let (classification, lo, hi) = if rises_in && rises_out {
        (Monotonicity::Increasing, ii - 1, ii)
    } else if falls_in && falls_out {
        (Monotonicity::Decreasing, ii, ii + 1)
    } else {
        (Monotonicity::Interior, ii - 1, ii + 1)
    };

    let cells = grid.n_cells() as i64;
    // On a periodic grid node 0 is also node n_cells.
    let (lo, hi) = if periodic && lo < 0 && hi <= 0 {
        (lo + cells, hi + cells)
    } else {
        (lo, hi)
    };
    if lo < 0 || hi > cells {
        return Err(InterpError::Degenerate { node: i });
    }
    let pad = pad_cells as i64;
    Ok(Window {
        i_minus: (lo - pad).max(0) as usize,
        i_plus: (hi + pad).min(cells) as usize,
        classification,
    })
}
