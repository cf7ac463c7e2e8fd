//! A* on the estimated grid, waypoint reduction and first-level path
//! activeness: per-waypoint heading optimization with overlap chaining and
//! best-candidate selection.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Cell, Point2, Pose2};
use crate::grid_map::{CellClass, OccupancyGrid};
use crate::utility::{
    aggregate, optimal_heading, path_utility, tangent_headings, waypoint_utilities, Aggregation,
    CellSet, UtilityMode, ViewConfig, Waypoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub robot_radius: f64,
    /// Cost multiplier for stepping into unknown cells.
    pub unknown_cost: f64,
    /// Maximum arc length between consecutive waypoints (m).
    pub waypoint_spacing: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            robot_radius: 0.2,
            unknown_cost: 1.2,
            waypoint_spacing: 1.0,
        }
    }
}

impl PlannerConfig {
    /// Obstacles are inflated by the robot radius plus one cell.
    pub fn inflation_radius(&self, resolution: f64) -> f64 {
        self.robot_radius + resolution
    }

    /// Step costs in integer units: (straight known, straight unknown).
    /// Known cells cost 5 units per cell; unknown ones `5 · unknown_cost`.
    fn unit_costs(&self) -> (i64, i64) {
        (5, (5.0 * self.unknown_cost).round() as i64)
    }
}

/// Exact path cost `a + b·√2` in units of `resolution / 5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Cost {
    pub a: i64,
    pub b: i64,
}

impl Cost {
    pub fn value(&self) -> f64 {
        self.a as f64 + self.b as f64 * std::f64::consts::SQRT_2
    }

    pub fn meters(&self, resolution: f64) -> f64 {
        self.value() * resolution / 5.0
    }

    fn add(self, o: Cost) -> Cost {
        Cost {
            a: self.a + o.a,
            b: self.b + o.b,
        }
    }
}

impl Ord for Cost {
    fn cmp(&self, o: &Self) -> Ordering {
        // Sign of (a1 - a2) + (b1 - b2)·√2, decided in integers.
        let da = self.a - o.a;
        let db = self.b - o.b;
        let sign = |x: i64| x.signum();
        match (sign(da), sign(db)) {
            (0, s) | (s, 0) => s.cmp(&0),
            (1, 1) => Ordering::Greater,
            (-1, -1) => Ordering::Less,
            // Opposite signs: compare da² with 2·db².
            (sa, _) => {
                let lhs = da as i128 * da as i128;
                let rhs = 2 * db as i128 * db as i128;
                if sa > 0 {
                    lhs.cmp(&rhs)
                } else {
                    rhs.cmp(&lhs)
                }
            }
        }
    }
}

impl PartialOrd for Cost {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

const NEIGHBOURS: [(i32, i32); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

/// Planning view of the grid: inflated obstacles and unknown cells.
#[derive(Debug, Clone)]
pub struct CostMap {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Point2,
    blocked: Vec<bool>,
    unknown: Vec<bool>,
    straight: (i64, i64),
}

impl CostMap {
    pub fn build(grid: &OccupancyGrid, config: &PlannerConfig) -> Self {
        let (w, h) = (grid.width(), grid.height());
        let res = grid.resolution();
        let radius = config.inflation_radius(res);
        let r = (radius / res).ceil() as i32;
        let offsets: Vec<(i32, i32)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| ((*dx as f64).hypot(*dy as f64)) * res <= radius + 1e-9)
            .collect();
        let mut blocked = vec![false; w * h];
        let mut unknown = vec![false; w * h];
        for i in 0..w * h {
            match grid.class_at(i) {
                CellClass::Unknown => unknown[i] = true,
                CellClass::Free => {}
                CellClass::Occupied => {
                    let c = grid.cell_at_index(i);
                    for (dx, dy) in &offsets {
                        let n = Cell::new(c.x + dx, c.y + dy);
                        if grid.in_bounds(n) {
                            blocked[grid.index(n)] = true;
                        }
                    }
                }
            }
        }
        Self {
            width: w,
            height: h,
            resolution: res,
            origin: grid.origin(),
            blocked,
            unknown,
            straight: config.unit_costs(),
        }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    #[inline]
    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    #[inline]
    fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    /// Out-of-bounds cells count as blocked.
    #[inline]
    pub fn is_blocked(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.blocked[self.index(c)]
    }

    pub fn cell_of(&self, p: Point2) -> Cell {
        Cell::new(
            ((p.x - self.origin.x) / self.resolution).floor() as i32,
            ((p.y - self.origin.y) / self.resolution).floor() as i32,
        )
    }

    pub fn cell_center(&self, c: Cell) -> Point2 {
        Point2::new(
            self.origin.x + (c.x as f64 + 0.5) * self.resolution,
            self.origin.y + (c.y as f64 + 0.5) * self.resolution,
        )
    }

    fn step_cost(&self, to: Cell, diagonal: bool) -> Cost {
        let unit = if self.unknown[self.index(to)] {
            self.straight.1
        } else {
            self.straight.0
        };
        if diagonal {
            Cost { a: 0, b: unit }
        } else {
            Cost { a: unit, b: 0 }
        }
    }

    /// Cells reachable from `start` through unblocked cells (8-connected).
    pub fn reachable_from(&self, start: Cell) -> Vec<bool> {
        let mut seen = vec![false; self.width * self.height];
        if self.is_blocked(start) {
            return seen;
        }
        let mut queue = VecDeque::from([start]);
        seen[self.index(start)] = true;
        while let Some(c) = queue.pop_front() {
            for (dx, dy) in NEIGHBOURS {
                let n = Cell::new(c.x + dx, c.y + dy);
                if !self.is_blocked(n) && !seen[self.index(n)] {
                    seen[self.index(n)] = true;
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    /// Closest unblocked cell to `c` by breadth-first rings (Chebyshev
    /// distance), ties by Euclidean distance then cell order.
    pub fn nearest_unblocked(&self, c: Cell, max_ring: i32) -> Option<Cell> {
        if !self.is_blocked(c) {
            return Some(c);
        }
        for r in 1..=max_ring {
            let mut best: Option<(i64, Cell)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs() != r && dy.abs() != r {
                        continue;
                    }
                    let n = Cell::new(c.x + dx, c.y + dy);
                    if self.is_blocked(n) {
                        continue;
                    }
                    let d2 = (dx * dx + dy * dy) as i64;
                    if best.is_none_or(|(bd, bc)| (d2, n) < (bd, bc)) {
                        best = Some((d2, n));
                    }
                }
            }
            if let Some((_, n)) = best {
                return Some(n);
            }
        }
        None
    }

    /// Exact minimum-cost path by Dijkstra, for cross-checking.
    pub fn dijkstra_cost(&self, start: Cell, goal: Cell) -> Option<Cost> {
        if self.is_blocked(start) || self.is_blocked(goal) {
            return None;
        }
        #[derive(PartialEq, Eq)]
        struct Item(Cost, Cell);
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.cmp(&self.0).then_with(|| o.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        let mut dist: Vec<Option<Cost>> = vec![None; self.width * self.height];
        let mut heap = BinaryHeap::from([Item(Cost::default(), start)]);
        dist[self.index(start)] = Some(Cost::default());
        while let Some(Item(d, c)) = heap.pop() {
            if dist[self.index(c)].is_some_and(|best| d > best) {
                continue;
            }
            if c == goal {
                return Some(d);
            }
            for (dx, dy) in NEIGHBOURS {
                let n = Cell::new(c.x + dx, c.y + dy);
                if self.is_blocked(n) {
                    continue;
                }
                let nd = d.add(self.step_cost(n, dx != 0 && dy != 0));
                let slot = &mut dist[self.index(n)];
                if slot.is_none_or(|old| nd < old) {
                    *slot = Some(nd);
                    heap.push(Item(nd, n));
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub cells: Vec<Cell>,
    pub cost: Cost,
}

/// 8-connected A* with an admissible Euclidean heuristic. Octile step
/// costs, scaled by `unknown_cost` when entering unknown cells. Costs are
/// tracked exactly so the result is optimal, not just near-optimal.
pub fn astar(map: &CostMap, start: Cell, goal: Cell) -> Result<GridPath> {
    if map.is_blocked(start) || map.is_blocked(goal) {
        return Err(Error::Unreachable);
    }
    #[derive(PartialEq)]
    struct Item {
        f: f64,
        h: f64,
        seq: u64,
        cell: Cell,
    }
    impl Eq for Item {}
    impl Ord for Item {
        fn cmp(&self, o: &Self) -> Ordering {
            o.f.total_cmp(&self.f)
                .then_with(|| o.h.total_cmp(&self.h))
                .then_with(|| o.seq.cmp(&self.seq))
        }
    }
    impl PartialOrd for Item {
        fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
            Some(self.cmp(o))
        }
    }
    let n = map.width * map.height;
    let h = |c: Cell| 5.0 * ((c.x - goal.x) as f64).hypot((c.y - goal.y) as f64);
    let mut g: Vec<Option<Cost>> = vec![None; n];
    let mut parent: Vec<u32> = vec![u32::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    g[map.index(start)] = Some(Cost::default());
    heap.push(Item {
        f: h(start),
        h: h(start),
        seq,
        cell: start,
    });
    while let Some(Item { cell, .. }) = heap.pop() {
        let ci = map.index(cell);
        if closed[ci] {
            continue;
        }
        closed[ci] = true;
        if cell == goal {
            let mut cells = vec![goal];
            let mut i = ci;
            while parent[i] != u32::MAX {
                i = parent[i] as usize;
                cells.push(Cell::new((i % map.width) as i32, (i / map.width) as i32));
            }
            cells.reverse();
            return Ok(GridPath {
                cells,
                cost: g[ci].expect("goal cost"),
            });
        }
        let gc = g[ci].expect("expanded cell has a cost");
        for (dx, dy) in NEIGHBOURS {
            let nb = Cell::new(cell.x + dx, cell.y + dy);
            if map.is_blocked(nb) {
                continue;
            }
            let ni = map.index(nb);
            let nd = gc.add(map.step_cost(nb, dx != 0 && dy != 0));
            if g[ni].is_none_or(|old| nd < old) {
                g[ni] = Some(nd);
                parent[ni] = ci as u32;
                // Reopen if a strictly better route turns up.
                closed[ni] = false;
                seq += 1;
                let hn = h(nb);
                heap.push(Item {
                    f: nd.value() + hn,
                    h: hn,
                    seq,
                    cell: nb,
                });
            }
        }
    }
    Err(Error::Unreachable)
}

/// Reduces a polyline to waypoints: the first point, then repeatedly the
/// last point whose arc length from the previous waypoint does not exceed
/// `spacing`, and finally the last point. `d` is the cumulative arc length.
pub fn reduce_to_waypoints(points: &[Point2], spacing: f64) -> Vec<Waypoint> {
    let Some(first) = points.first() else {
        return Vec::new();
    };
    let mut arc = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    arc.push(0.0);
    for w in points.windows(2) {
        acc += w[0].distance(&w[1]);
        arc.push(acc);
    }
    let mut out = vec![Waypoint::at(*first, 0.0)];
    let mut last = 0usize;
    while last + 1 < points.len() {
        let mut next = last + 1;
        while next + 1 < points.len() && arc[next + 1] - arc[last] <= spacing + 1e-9 {
            next += 1;
        }
        out.push(Waypoint::at(points[next], arc[next]));
        last = next;
    }
    out
}

/// What the first planning level does with headings and how paths are scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPlanMode {
    /// Optimize every waypoint's heading at plan time.
    pub first_level: bool,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPath {
    /// Index into the candidate list.
    pub candidate: usize,
    pub goal: Point2,
    pub waypoints: Vec<Waypoint>,
    pub utility: f64,
    /// Grid path length (m).
    pub length: f64,
}

/// The start cell for planning: the robot cell, or the nearest unblocked
/// one when the robot sits inside the inflation margin.
pub fn planning_start(map: &CostMap, position: Point2) -> Option<Cell> {
    map.nearest_unblocked(map.cell_of(position), 6)
}

/// Builds the waypoints and utility of one candidate path.
pub fn evaluate_path(
    grid: &OccupancyGrid,
    map: &CostMap,
    robot: &Pose2,
    start: Cell,
    goal: Cell,
    utility: &UtilityMode,
    view: &ViewConfig,
    mode: &PathPlanMode,
    spacing: f64,
) -> Result<(Vec<Waypoint>, f64, f64)> {
    let path = astar(map, start, goal)?;
    let mut points: Vec<Point2> = path.cells.iter().map(|c| map.cell_center(*c)).collect();
    points[0] = robot.position();
    let mut wps = reduce_to_waypoints(&points, spacing);
    let goal_pos = wps.last().expect("nonempty").pos;
    let goal_opt = Some(goal_pos);
    let positions: Vec<Point2> = wps.iter().map(|w| w.pos).collect();
    let tangents = tangent_headings(&positions, robot.theta);

    // Headings of all but the goal.
    let n = wps.len();
    if mode.first_level {
        let mut excluded = CellSet::for_grid(grid);
        for w in wps.iter_mut() {
            let h = optimal_heading(grid, w.pos, utility, view, goal_opt, Some(&excluded))?;
            excluded.extend(&h.covered);
            w.theta = h.theta;
        }
    } else {
        for (w, t) in wps.iter_mut().zip(&tangents) {
            w.theta = *t;
        }
    }
    if mode.aggregation == Aggregation::GoalOnly {
        let h = optimal_heading(grid, goal_pos, utility, view, goal_opt, None)?;
        wps[n - 1].theta = h.theta;
    }

    let scored = waypoint_utilities(&wps, grid, utility, mode.aggregation, view, goal_opt)?;
    for (w, (u, cells)) in wps.iter_mut().zip(scored) {
        w.utility = u;
        w.covered = cells;
    }
    let total = if mode.aggregation == Aggregation::GoalOnly {
        wps[n - 1].utility
    } else {
        let us: Vec<f64> = wps.iter().map(|w| w.utility).collect();
        let ds: Vec<f64> = wps.iter().map(|w| w.d).collect();
        aggregate(&us, &ds, mode.aggregation, view.rho)
    };
    Ok((wps, total, path.cost.meters(map.resolution())))
}

/// Plans a path to every candidate and returns the highest-utility one
/// (ties by candidate index).
pub fn plan_informative_path(
    grid: &OccupancyGrid,
    robot: &Pose2,
    candidates: &[Point2],
    utility: &UtilityMode,
    view: &ViewConfig,
    mode: &PathPlanMode,
    planner: &PlannerConfig,
) -> Result<PlannedPath> {
    let map = CostMap::build(grid, planner);
    let start = planning_start(&map, robot.position()).ok_or(Error::Unreachable)?;
    let mut best: Option<PlannedPath> = None;
    for (k, cand) in candidates.iter().enumerate() {
        let goal = map.cell_of(*cand);
        let Ok((waypoints, u, length)) = evaluate_path(
            grid,
            &map,
            robot,
            start,
            goal,
            utility,
            view,
            mode,
            planner.waypoint_spacing,
        ) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| u > b.utility) {
            let goal = waypoints.last().expect("nonempty").pos;
            best = Some(PlannedPath {
                candidate: k,
                goal,
                waypoints,
                utility: u,
                length,
            });
        }
    }
    best.ok_or(Error::Unreachable)
}

/// Recomputes the utility of a planned path from its waypoints.
pub fn replay_utility(
    path: &PlannedPath,
    grid: &OccupancyGrid,
    utility: &UtilityMode,
    view: &ViewConfig,
    mode: &PathPlanMode,
) -> Result<f64> {
    path_utility(
        &path.waypoints,
        grid,
        utility,
        mode.aggregation,
        view,
        Some(path.goal),
    )
}
