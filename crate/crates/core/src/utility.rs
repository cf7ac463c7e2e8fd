//! Visibility raycasting on the estimated grid, per-cell utilities, pose
//! utility, optimal-heading search with frustum-overlap exclusion and path
//! utility aggregation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, walk_cells, wrap_angle, Cell, Point2, Pose2};
use crate::grid_map::OccupancyGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    /// Plain cell entropy.
    U1,
    /// Entropy plus an obstacle bonus.
    U2,
    /// Distance-to-goal weighted blend of re-observation and exploration, plus the obstacle bonus.
    U3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityMode {
    pub kind: UtilityKind,
    /// Obstacle bonus.
    pub kappa1: f64,
    pub p_thr: f64,
    /// Lower clamp of the exploration/re-observation weight.
    pub d_l: f64,
    /// Upper clamp of the exploration/re-observation weight.
    pub d_h: f64,
}

impl UtilityMode {
    pub fn new(kind: UtilityKind) -> Self {
        Self {
            kind,
            kappa1: 1.0,
            p_thr: 0.7,
            d_l: 0.2,
            d_h: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d_l > 0.0 && self.d_h < 1.0 && self.d_l < self.d_h && self.kappa1 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "utility needs 0 < d_l < d_h < 1 and kappa1 >= 0 (got d_l={}, d_h={}, kappa1={})",
                self.d_l, self.d_h, self.kappa1
            )))
        }
    }
}

impl Default for UtilityMode {
    fn default() -> Self {
        Self::new(UtilityKind::U1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    WeightedAverage,
    WeightedSum,
    /// Utility of the optimized goal waypoint only.
    GoalOnly,
    /// Plain sum over waypoints at path-tangent headings, no overlap exclusion.
    Interpolated,
}

/// Camera and search parameters shared by every visibility query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    /// Horizontal field of view (rad).
    pub fov: f64,
    /// Maximum sensing distance (m).
    pub d_thr: f64,
    pub n_headings: usize,
    /// Distance discount of the path aggregation.
    pub rho: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            fov: 69.4f64.to_radians(),
            d_thr: 4.0,
            n_headings: 16,
            rho: 0.25,
        }
    }
}

impl ViewConfig {
    pub fn heading(&self, k: usize) -> f64 {
        wrap_angle(2.0 * PI * k as f64 / self.n_headings as f64)
    }
}

/// Dense set of grid cell indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSet {
    bits: Vec<bool>,
    len: usize,
}

impl CellSet {
    pub fn new(n_cells: usize) -> Self {
        Self {
            bits: vec![false; n_cells],
            len: 0,
        }
    }

    pub fn for_grid(grid: &OccupancyGrid) -> Self {
        Self::new(grid.len())
    }

    #[inline]
    pub fn contains(&self, i: u32) -> bool {
        self.bits.get(i as usize).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, i: u32) -> bool {
        let slot = &mut self.bits[i as usize];
        if *slot {
            false
        } else {
            *slot = true;
            self.len += 1;
            true
        }
    }

    pub fn extend(&mut self, cells: &[u32]) {
        for &c in cells {
            self.insert(c);
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.bits.iter_mut().for_each(|b| *b = false);
        self.len = 0;
    }
}

/// Exploration/re-observation weight `j = max(d_l, min(d_h, d_l · ‖x − x_G‖))`.
pub fn j_weight(dist_to_goal: f64, d_l: f64, d_h: f64) -> f64 {
    d_l.max(d_h.min(d_l * dist_to_goal))
}

/// Utility of one cell seen from `query` (for u3, relative to `goal`).
pub fn cell_utility(
    grid: &OccupancyGrid,
    c: Cell,
    mode: &UtilityMode,
    query: Point2,
    goal: Option<Point2>,
) -> Result<f64> {
    let j = match (mode.kind, goal) {
        (UtilityKind::U3, None) => return Err(Error::MissingGoal),
        (UtilityKind::U3, Some(g)) => j_weight(query.distance(&g), mode.d_l, mode.d_h),
        _ => 0.0,
    };
    Ok(cell_utility_with(grid, grid.index(c), mode, j))
}

#[inline]
fn cell_utility_with(grid: &OccupancyGrid, i: usize, mode: &UtilityMode, j: f64) -> f64 {
    let c = grid.cell_at_index(i);
    let e = grid.cell_entropy_at(c);
    let bonus = || {
        if grid.probability(c) >= mode.p_thr {
            mode.kappa1
        } else {
            0.0
        }
    };
    match mode.kind {
        UtilityKind::U1 => e,
        UtilityKind::U2 => e + bonus(),
        UtilityKind::U3 => {
            let lambda = if grid.is_explored(c) { j } else { 1.0 - j };
            lambda * e + bonus()
        }
    }
}

/// Every cell within `d_thr` of a position that has an unoccluded line of
/// sight to it, with its bearing. One disc serves all headings.
#[derive(Debug, Clone)]
pub struct ViewDisc {
    pub position: Point2,
    cells: Vec<(u32, f64)>,
}

impl ViewDisc {
    pub fn new(grid: &OccupancyGrid, position: Point2, d_thr: f64) -> Self {
        let Some(origin) = grid.cell_of(position) else {
            return Self {
                position,
                cells: Vec::new(),
            };
        };
        let res = grid.resolution();
        let r = (d_thr / res).ceil() as i32 + 1;
        let side = (2 * r + 1) as usize;
        let local =
            |c: Cell| ((c.y - origin.y + r) as usize) * side + (c.x - origin.x + r) as usize;
        let mut occluder = vec![false; side * side];
        for y in origin.y - r..=origin.y + r {
            for x in origin.x - r..=origin.x + r {
                let c = Cell::new(x, y);
                if grid.in_bounds(c) && grid.is_occluder(c) {
                    occluder[local(c)] = true;
                }
            }
        }
        let mut cells = Vec::new();
        for y in origin.y - r..=origin.y + r {
            for x in origin.x - r..=origin.x + r {
                let c = Cell::new(x, y);
                if c == origin || !grid.in_bounds(c) {
                    continue;
                }
                let center = grid.cell_center(c);
                if position.distance(&center) > d_thr {
                    continue;
                }
                let clear = walk_cells(origin, c)
                    .filter(|m| *m != origin && *m != c)
                    .all(|m| !occluder[local(m)]);
                if clear {
                    cells.push((grid.index(c) as u32, position.bearing_to(&center)));
                }
            }
        }
        Self { position, cells }
    }

    /// Cells inside the wedge centered on `theta`, minus `excluded`, in index order.
    pub fn wedge(&self, theta: f64, fov: f64, excluded: Option<&CellSet>) -> Vec<u32> {
        let half = fov / 2.0 + 1e-9;
        let mut v: Vec<u32> = self
            .cells
            .iter()
            .filter(|(i, b)| {
                angle_diff(*b, theta).abs() <= half && !excluded.is_some_and(|e| e.contains(*i))
            })
            .map(|(i, _)| *i)
            .collect();
        v.sort_unstable();
        v
    }
}

/// Cells visible from `pose`: within range, inside the FOV wedge and not
/// occluded by cells with `p_o > 0.7`. Unknown cells are transparent.
pub fn visible_cells(
    grid: &OccupancyGrid,
    pose: &Pose2,
    view: &ViewConfig,
    excluded: Option<&CellSet>,
) -> Vec<u32> {
    ViewDisc::new(grid, pose.position(), view.d_thr).wedge(pose.theta, view.fov, excluded)
}

fn sum_utility(
    grid: &OccupancyGrid,
    cells: &[u32],
    mode: &UtilityMode,
    query: Point2,
    goal: Option<Point2>,
) -> Result<f64> {
    let j = match (mode.kind, goal) {
        (UtilityKind::U3, None) => return Err(Error::MissingGoal),
        (UtilityKind::U3, Some(g)) => j_weight(query.distance(&g), mode.d_l, mode.d_h),
        _ => 0.0,
    };
    Ok(cells
        .iter()
        .map(|&i| cell_utility_with(grid, i as usize, mode, j))
        .sum())
}

pub fn pose_utility(
    grid: &OccupancyGrid,
    pose: &Pose2,
    mode: &UtilityMode,
    view: &ViewConfig,
    goal: Option<Point2>,
    excluded: Option<&CellSet>,
) -> Result<f64> {
    let cells = visible_cells(grid, pose, view, excluded);
    sum_utility(grid, &cells, mode, pose.position(), goal)
}

/// Result of the heading search at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadingChoice {
    pub theta: f64,
    pub index: usize,
    pub utility: f64,
    /// Cells counted by the winning heading.
    pub covered: Vec<u32>,
}

/// Exhaustive search over `n_headings` evenly spaced headings. Ties go to
/// the smallest heading index.
pub fn optimal_heading(
    grid: &OccupancyGrid,
    position: Point2,
    mode: &UtilityMode,
    view: &ViewConfig,
    goal: Option<Point2>,
    excluded: Option<&CellSet>,
) -> Result<HeadingChoice> {
    let disc = ViewDisc::new(grid, position, view.d_thr);
    optimal_heading_in(grid, &disc, mode, view, goal, excluded)
}

pub fn optimal_heading_in(
    grid: &OccupancyGrid,
    disc: &ViewDisc,
    mode: &UtilityMode,
    view: &ViewConfig,
    goal: Option<Point2>,
    excluded: Option<&CellSet>,
) -> Result<HeadingChoice> {
    let mut best: Option<HeadingChoice> = None;
    for k in 0..view.n_headings.max(1) {
        let theta = view.heading(k);
        let covered = disc.wedge(theta, view.fov, excluded);
        let utility = sum_utility(grid, &covered, mode, disc.position, goal)?;
        if best.as_ref().is_none_or(|b| utility > b.utility) {
            best = Some(HeadingChoice {
                theta,
                index: k,
                utility,
                covered,
            });
        }
    }
    Ok(best.expect("at least one heading"))
}

/// A path waypoint. `d` is the arc length from the robot along the path.
#[derive(Debug, Clone, PartialEq)]
pub struct Waypoint {
    pub pos: Point2,
    pub theta: f64,
    pub d: f64,
    pub utility: f64,
    pub covered: Vec<u32>,
}

impl Waypoint {
    pub fn at(pos: Point2, d: f64) -> Self {
        Self {
            pos,
            theta: 0.0,
            d,
            utility: 0.0,
            covered: Vec::new(),
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.pos.x, self.pos.y, self.theta)
    }
}

/// Combines per-waypoint utilities `us` at path distances `ds`.
pub fn aggregate(us: &[f64], ds: &[f64], aggregation: Aggregation, rho: f64) -> f64 {
    match aggregation {
        Aggregation::WeightedAverage | Aggregation::WeightedSum => {
            let mut num = 0.0;
            let mut den = 0.0;
            for (u, d) in us.iter().zip(ds) {
                let k = (-rho * d).exp();
                num += k * u;
                den += k;
            }
            match aggregation {
                Aggregation::WeightedSum => num,
                _ if den > 0.0 => num / den,
                _ => 0.0,
            }
        }
        Aggregation::GoalOnly => us.last().copied().unwrap_or(0.0),
        Aggregation::Interpolated => us.iter().sum(),
    }
}

/// Per-waypoint utilities at the waypoints' stored headings under an
/// aggregation's overlap rule, with the covered set of each waypoint.
pub fn waypoint_utilities(
    waypoints: &[Waypoint],
    grid: &OccupancyGrid,
    mode: &UtilityMode,
    aggregation: Aggregation,
    view: &ViewConfig,
    goal: Option<Point2>,
) -> Result<Vec<(f64, Vec<u32>)>> {
    let mut out = Vec::with_capacity(waypoints.len());
    match aggregation {
        Aggregation::WeightedAverage | Aggregation::WeightedSum => {
            let mut excluded = CellSet::for_grid(grid);
            for w in waypoints {
                let cells = visible_cells(grid, &w.pose(), view, Some(&excluded));
                let u = sum_utility(grid, &cells, mode, w.pos, goal)?;
                excluded.extend(&cells);
                out.push((u, cells));
            }
        }
        Aggregation::GoalOnly | Aggregation::Interpolated => {
            for w in waypoints {
                let cells = visible_cells(grid, &w.pose(), view, None);
                let u = sum_utility(grid, &cells, mode, w.pos, goal)?;
                out.push((u, cells));
            }
        }
    }
    Ok(out)
}

/// Path utility from the waypoints' stored headings and distances.
pub fn path_utility(
    waypoints: &[Waypoint],
    grid: &OccupancyGrid,
    mode: &UtilityMode,
    aggregation: Aggregation,
    view: &ViewConfig,
    goal: Option<Point2>,
) -> Result<f64> {
    let us: Vec<f64> = if aggregation == Aggregation::GoalOnly {
        match waypoints.last() {
            Some(w) => vec![pose_utility(grid, &w.pose(), mode, view, goal, None)?],
            None => Vec::new(),
        }
    } else {
        waypoint_utilities(waypoints, grid, mode, aggregation, view, goal)?
            .into_iter()
            .map(|(u, _)| u)
            .collect()
    };
    let ds: Vec<f64> = waypoints.iter().map(|w| w.d).collect();
    let ds = if aggregation == Aggregation::GoalOnly {
        &ds[ds.len().saturating_sub(1)..]
    } else {
        &ds[..]
    };
    Ok(aggregate(&us, ds, aggregation, view.rho))
}

/// Heading of the path tangent at each waypoint: the direction from the
/// previous waypoint (the first uses the direction to the second). A lone
/// waypoint keeps `current`.
pub fn tangent_headings(points: &[Point2], current: f64) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let (a, b) = match (i, n) {
                (_, 1) => return current,
                (0, _) => (points[0], points[1]),
                _ => (points[i - 1], points[i]),
            };
            if a.distance(&b) < 1e-12 {
                current
            } else {
                a.bearing_to(&b)
            }
        })
        .collect()
}
