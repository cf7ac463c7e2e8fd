//! Frontier extraction and clustering, candidate goals with a reachability
//! fallback, and the policy used when no candidate is left.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Cell, Point2, Pose2};
use crate::grid_map::{CellClass, OccupancyGrid};
use crate::planner::CostMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierConfig {
    pub robot_radius: f64,
    /// Candidates closer than this many cells to the previous goal are dropped.
    pub goal_merge_cells: f64,
}

impl Default for FrontierConfig {
    fn default() -> Self {
        Self {
            robot_radius: 0.2,
            goal_merge_cells: 2.0,
        }
    }
}

impl FrontierConfig {
    /// Smallest cluster wide enough for the robot: `ceil(diameter / resolution)`.
    pub fn min_cluster_cells(&self, resolution: f64) -> usize {
        ((2.0 * self.robot_radius / resolution) - 1e-9).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierCluster {
    /// Member cells in row-major order.
    pub cells: Vec<Cell>,
    pub centroid: Point2,
}

const EIGHT: [(i32, i32); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

/// Frontier cells: free, 8-adjacent to an unknown cell, and with no
/// occupied cell within the robot radius.
pub fn frontier_mask(grid: &OccupancyGrid, config: &FrontierConfig) -> Vec<bool> {
    let res = grid.resolution();
    let r = (config.robot_radius / res).ceil() as i32;
    let near_obstacle: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| (*dx as f64).hypot(*dy as f64) * res <= config.robot_radius + 1e-9)
        .collect();
    let mut mask = vec![false; grid.len()];
    for (i, m) in mask.iter_mut().enumerate() {
        if grid.class_at(i) != CellClass::Free {
            continue;
        }
        let c = grid.cell_at_index(i);
        let borders_unknown = EIGHT.iter().any(|(dx, dy)| {
            let n = Cell::new(c.x + dx, c.y + dy);
            grid.in_bounds(n) && grid.class(n) == CellClass::Unknown
        });
        if !borders_unknown {
            continue;
        }
        let clear = near_obstacle.iter().all(|(dx, dy)| {
            let n = Cell::new(c.x + dx, c.y + dy);
            !grid.in_bounds(n) || grid.class(n) != CellClass::Occupied
        });
        *m = clear;
    }
    mask
}

/// Groups frontier cells into 8-connected clusters and drops clusters too
/// small for the robot. Clusters are ordered by distance of their centroid
/// to `robot`, ties by their first cell.
pub fn extract_frontiers(
    grid: &OccupancyGrid,
    robot: Point2,
    config: &FrontierConfig,
) -> Vec<FrontierCluster> {
    let mask = frontier_mask(grid, config);
    let min_cells = config.min_cluster_cells(grid.resolution());
    let mut label = vec![false; mask.len()];
    let mut clusters = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] {
            continue;
        }
        label[start] = true;
        let mut queue = VecDeque::from([grid.cell_at_index(start)]);
        let mut cells = Vec::new();
        while let Some(c) = queue.pop_front() {
            cells.push(c);
            for (dx, dy) in EIGHT {
                let n = Cell::new(c.x + dx, c.y + dy);
                if grid.in_bounds(n) {
                    let ni = grid.index(n);
                    if mask[ni] && !label[ni] {
                        label[ni] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        if cells.len() < min_cells {
            continue;
        }
        cells.sort_unstable_by_key(|c| (c.y, c.x));
        let (sx, sy) = cells.iter().fold((0.0, 0.0), |(sx, sy), c| {
            let p = grid.cell_center(*c);
            (sx + p.x, sy + p.y)
        });
        let n = cells.len() as f64;
        clusters.push(FrontierCluster {
            cells,
            centroid: Point2::new(sx / n, sy / n),
        });
    }
    clusters.sort_by(|a, b| {
        robot
            .distance(&a.centroid)
            .total_cmp(&robot.distance(&b.centroid))
            .then_with(|| (a.cells[0].y, a.cells[0].x).cmp(&(b.cells[0].y, b.cells[0].x)))
    });
    clusters
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateGoal {
    pub cluster: usize,
    pub cell: Cell,
    pub position: Point2,
}

/// One goal per cluster: the centroid when it is a known free cell the
/// robot can reach, otherwise the reachable member cell nearest to the
/// centroid (breadth-first over rings around it). Candidates near
/// `previous_goal` are discarded.
pub fn candidate_goals(
    clusters: &[FrontierCluster],
    grid: &OccupancyGrid,
    map: &CostMap,
    robot: Point2,
    previous_goal: Option<Point2>,
    config: &FrontierConfig,
) -> Vec<CandidateGoal> {
    let Some(start) = map.nearest_unblocked(map.cell_of(robot), 6) else {
        return Vec::new();
    };
    let reachable = map.reachable_from(start);
    let ok = |c: Cell| grid.in_bounds(c) && reachable[grid.index(c)];
    let merge = config.goal_merge_cells * grid.resolution();
    let mut out = Vec::new();
    for (k, cluster) in clusters.iter().enumerate() {
        let centroid_cell = grid.cell_of_unchecked(cluster.centroid);
        let chosen = if ok(centroid_cell) && grid.class(centroid_cell) == CellClass::Free {
            Some(centroid_cell)
        } else {
            cluster
                .cells
                .iter()
                .filter(|c| ok(**c))
                .min_by_key(|c| {
                    let dx = (c.x - centroid_cell.x) as i64;
                    let dy = (c.y - centroid_cell.y) as i64;
                    (dx.abs().max(dy.abs()), dx * dx + dy * dy, c.y, c.x)
                })
                .copied()
        };
        let Some(cell) = chosen else { continue };
        let position = grid.cell_center(cell);
        if previous_goal.is_some_and(|g| g.distance(&position) <= merge + 1e-9) {
            continue;
        }
        out.push(CandidateGoal {
            cluster: k,
            cell,
            position,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FallbackAction {
    RotateInPlace360,
    /// Re-plan towards a previously visited graph node.
    GoTo {
        node: usize,
        pose: Pose2,
    },
}

/// Picks the no-frontier behavior: a full rotation when the graph is empty,
/// otherwise a uniformly random prior node.
pub fn fallback_action(nodes: &[Pose2], rng: &mut impl Rng) -> FallbackAction {
    if nodes.is_empty() {
        FallbackAction::RotateInPlace360
    } else {
        let node = rng.random_range(0..nodes.len());
        FallbackAction::GoTo {
            node,
            pose: nodes[node],
        }
    }
}
