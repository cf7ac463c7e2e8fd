//! Receding-horizon path execution for the omnidirectional base, obstacle
//! prioritisation, next-waypoint heading refinement and the feature-aware
//! heading blend used while driving.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::walk_cells;
use crate::geometry::{angle_diff, wrap_angle, Point2, Pose2};
use crate::grid_map::OccupancyGrid;
use crate::utility::{optimal_heading, CellSet, HeadingChoice, UtilityMode, ViewConfig};
use crate::world_sim::RobotLimits;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// State weight on position error.
    pub q_pos: f64,
    /// State weight on heading error.
    pub q_theta: f64,
    /// Control effort weight (all three axes).
    pub r: f64,
    /// Obstacle proximity weight.
    pub q_obs: f64,
    pub max_obstacles: usize,
    pub max_iterations: usize,
    pub limits: RobotLimits,
    /// Initial weight of the clearance penalty; grows tenfold per control
    /// step while the predicted clearance is violated.
    pub clearance_penalty: f64,
    /// Consecutive control steps started inside `d_min` before recovery is requested.
    pub infeasible_patience: usize,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            q_pos: 5.0,
            q_theta: 2.0,
            r: 0.5,
            q_obs: 0.1,
            max_obstacles: 10,
            max_iterations: 30,
            limits: RobotLimits::default(),
            clearance_penalty: 100.0,
            infeasible_patience: 10,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        self.limits.validate()?;
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("nmpc needs horizon >= 1 and dt > 0".into()));
        }
        if !(self.q_pos > 0.0) || self.q_theta < 0.0 || self.r < 0.0 || self.q_obs < 0.0 {
            return Err(Error::Config(
                "nmpc weights must be nonnegative, q_pos > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleStatus {
    Dynamic,
    Static,
}

/// An obstacle vertex with its predicted positions over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleTrack {
    pub position: Point2,
    pub predicted: Vec<Point2>,
    pub status: ObstacleStatus,
}

impl ObstacleTrack {
    pub fn fixed(position: Point2, horizon: usize) -> Self {
        Self {
            position,
            predicted: vec![position; horizon],
            status: ObstacleStatus::Static,
        }
    }

    fn at(&self, n: usize) -> Point2 {
        self.predicted
            .get(n)
            .or(self.predicted.last())
            .copied()
            .unwrap_or(self.position)
    }
}

/// Keeps at most `max` tracks: dynamic ones first, then by ascending
/// distance to the predicted robot states (input order breaks ties).
pub fn obstacle_selection(
    tracks: &[ObstacleTrack],
    predicted: &[Pose2],
    max: usize,
) -> Vec<ObstacleTrack> {
    let dist = |t: &ObstacleTrack| -> f64 {
        if predicted.is_empty() {
            return 0.0;
        }
        predicted
            .iter()
            .enumerate()
            .map(|(n, s)| s.position().distance(&t.at(n)))
            .fold(f64::INFINITY, f64::min)
    };
    let mut keyed: Vec<(usize, bool, f64)> = tracks
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t.status == ObstacleStatus::Static, dist(t)))
        .collect();
    keyed.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    keyed
        .into_iter()
        .take(max)
        .map(|(i, _, _)| tracks[i].clone())
        .collect()
}

/// Clamps each axis to its bound, then scales the translational part so
/// that `hypot(u_x, u_y) <= v_tr_max` holds exactly.
pub fn project_control(u: [f64; 3], limits: &RobotLimits) -> [f64; 3] {
    let mut p = [
        u[0].clamp(-limits.u_max[0], limits.u_max[0]),
        u[1].clamp(-limits.u_max[1], limits.u_max[1]),
        u[2].clamp(-limits.u_max[2], limits.u_max[2]),
    ];
    let v = p[0].hypot(p[1]);
    if v > limits.v_tr_max {
        let mut s = limits.v_tr_max / v;
        loop {
            let (x, y) = (p[0] * s, p[1] * s);
            if x.hypot(y) <= limits.v_tr_max {
                p[0] = x;
                p[1] = y;
                break;
            }
            s *= 1.0 - 1e-12;
        }
    }
    p
}

fn step(x: [f64; 3], u: [f64; 3], dt: f64) -> [f64; 3] {
    let m = x[2] + 0.5 * u[2] * dt;
    let (s, c) = m.sin_cos();
    [
        x[0] + dt * (u[0] * c - u[1] * s),
        x[1] + dt * (u[0] * s + u[1] * c),
        x[2] + u[2] * dt,
    ]
}

/// Obstacle proximity term `h(d) = e^{0.1/d²} − 1` with its derivative.
fn proximity(d: f64) -> (f64, f64) {
    const FLOOR: f64 = 0.1;
    if d < FLOOR {
        return ((0.1 / (FLOOR * FLOOR)).exp() - 1.0, 0.0);
    }
    let e = (0.1 / (d * d)).exp();
    (e - 1.0, e * (-0.2 / (d * d * d)))
}

struct Problem<'a> {
    cfg: &'a NmpcConfig,
    x0: [f64; 3],
    target: [f64; 3],
    obstacles: &'a [ObstacleTrack],
    mu: f64,
}

impl Problem<'_> {
    fn rollout(&self, us: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(self.x0);
        for u in us {
            let x = *xs.last().expect("nonempty");
            xs.push(step(x, *u, self.cfg.dt));
        }
        xs
    }

    /// Stage cost of state `x` at horizon index `n` (1-based) and its gradient.
    fn stage(&self, x: &[f64; 3], n: usize) -> (f64, [f64; 3]) {
        let c = self.cfg;
        let (ex, ey) = (x[0] - self.target[0], x[1] - self.target[1]);
        let eth = x[2] - self.target[2];
        let mut cost = c.q_pos * (ex * ex + ey * ey) + c.q_theta * 2.0 * (1.0 - eth.cos());
        let mut g = [
            2.0 * c.q_pos * ex,
            2.0 * c.q_pos * ey,
            2.0 * c.q_theta * eth.sin(),
        ];
        let d_min = c.limits.d_min;
        for o in self.obstacles {
            let p = o.at(n.saturating_sub(1));
            let (dx, dy) = (x[0] - p.x, x[1] - p.y);
            let d = (dx * dx + dy * dy).sqrt();
            let (h, dh) = proximity(d);
            cost += c.q_obs * h * h;
            let mut dd = c.q_obs * 2.0 * h * dh;
            if d < d_min {
                let v = d_min - d;
                cost += self.mu * v * v;
                dd -= 2.0 * self.mu * v;
            }
            if d > 1e-9 {
                g[0] += dd * dx / d;
                g[1] += dd * dy / d;
            }
        }
        (cost, g)
    }

    fn cost(&self, us: &[[f64; 3]]) -> f64 {
        let xs = self.rollout(us);
        let r = self.cfg.r;
        let mut j = 0.0;
        for (n, x) in xs.iter().enumerate().skip(1) {
            j += self.stage(x, n).0;
        }
        for u in us {
            j += r * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
        }
        j
    }

    /// Cost and gradient with respect to every control, by the adjoint method.
    fn cost_grad(&self, us: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
        let dt = self.cfg.dt;
        let r = self.cfg.r;
        let xs = self.rollout(us);
        let n = us.len();
        let mut j = 0.0;
        let mut grad = vec![[0.0; 3]; n];
        let mut lam = [0.0; 3];
        for k in (0..n).rev() {
            let (c, g) = self.stage(&xs[k + 1], k + 1);
            j += c;
            for i in 0..3 {
                lam[i] += g[i];
            }
            let (x, u) = (xs[k], us[k]);
            let m = x[2] + 0.5 * u[2] * dt;
            let (s, cth) = m.sin_cos();
            let a = dt * (-u[0] * s - u[1] * cth);
            let b = dt * (u[0] * cth - u[1] * s);
            grad[k] = [
                2.0 * r * u[0] + lam[0] * dt * cth + lam[1] * dt * s,
                2.0 * r * u[1] - lam[0] * dt * s + lam[1] * dt * cth,
                2.0 * r * u[2] + lam[0] * a * 0.5 * dt + lam[1] * b * 0.5 * dt + lam[2] * dt,
            ];
            j += r * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
            // Propagate the adjoint back through the dynamics.
            lam = [lam[0], lam[1], lam[2] + a * lam[0] + b * lam[1]];
        }
        (j, grad)
    }
}

/// Outcome of one control step.
#[derive(Debug, Clone, PartialEq)]
pub enum NmpcOutput {
    Control {
        u: [f64; 3],
        /// Objective after each accepted iteration, starting with the warm start.
        cost_trace: Vec<f64>,
        /// Smallest predicted distance to a selected obstacle over the horizon.
        predicted_clearance: f64,
        infeasible_start: bool,
    },
    /// The robot has started inside the clearance margin for too long.
    Recovery,
}

/// Receding-horizon controller state: warm start and penalty schedule.
#[derive(Debug, Clone)]
pub struct Nmpc {
    pub config: NmpcConfig,
    warm: Vec<[f64; 3]>,
    predicted: Vec<Pose2>,
    mu: f64,
    infeasible_steps: usize,
}

impl Nmpc {
    pub fn new(config: NmpcConfig) -> Self {
        Self {
            warm: vec![[0.0; 3]; config.horizon],
            predicted: Vec::new(),
            mu: config.clearance_penalty,
            infeasible_steps: 0,
            config,
        }
    }

    /// Drops the warm start and penalty history.
    pub fn reset(&mut self) {
        *self = Self::new(self.config);
    }

    /// Robot states predicted by the last solution, used to rank obstacles.
    pub fn predicted_states(&self) -> &[Pose2] {
        &self.predicted
    }

    /// Solves one horizon from `state` towards `target` and returns the
    /// first control.
    pub fn step(&mut self, state: &Pose2, target: &Pose2, tracks: &[ObstacleTrack]) -> NmpcOutput {
        let cfg = self.config;
        let obstacles = obstacle_selection(tracks, &self.predicted, cfg.max_obstacles);
        let clearance_now = obstacles
            .iter()
            .map(|o| state.position().distance(&o.at(0)))
            .fold(f64::INFINITY, f64::min);
        let infeasible_start = clearance_now < cfg.limits.d_min;
        if infeasible_start {
            self.infeasible_steps += 1;
            if self.infeasible_steps > cfg.infeasible_patience {
                self.infeasible_steps = 0;
                return NmpcOutput::Recovery;
            }
        } else {
            self.infeasible_steps = 0;
        }
        // Express the target heading on the branch nearest the current heading.
        let target_theta = state.theta + angle_diff(target.theta, state.theta);
        let problem = Problem {
            cfg: &cfg,
            x0: [state.x, state.y, state.theta],
            target: [target.x, target.y, target_theta],
            obstacles: &obstacles,
            mu: self.mu,
        };

        // Warm start: previous solution shifted by one step, or a pursuit
        // guess if that is cheaper.
        let mut warm: Vec<[f64; 3]> = self.warm.iter().skip(1).copied().collect();
        warm.push(*self.warm.last().unwrap_or(&[0.0; 3]));
        warm.resize(cfg.horizon, [0.0; 3]);
        let goal = [target.x, target.y, target_theta];
        let mut us = warm;
        let mut best = problem.cost(&us);
        let mut guesses = vec![pursuit_guess(state, &goal, &cfg, 0.0)];
        if !obstacles.is_empty() {
            // Sidestep guesses break the symmetry of an obstacle dead ahead.
            guesses.push(pursuit_guess(state, &goal, &cfg, 1.0));
            guesses.push(pursuit_guess(state, &goal, &cfg, -1.0));
        }
        for g in guesses {
            let j = problem.cost(&g);
            if j < best {
                best = j;
                us = g;
            }
        }
        for u in us.iter_mut() {
            *u = project_control(*u, &cfg.limits);
        }

        let (mut j, mut g) = problem.cost_grad(&us);
        let mut trace = vec![j];
        let mut alpha = 0.1;
        for _ in 0..cfg.max_iterations {
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<[f64; 3]> = us
                    .iter()
                    .zip(&g)
                    .map(|(u, gu)| {
                        project_control(
                            [
                                u[0] - alpha * gu[0],
                                u[1] - alpha * gu[1],
                                u[2] - alpha * gu[2],
                            ],
                            &cfg.limits,
                        )
                    })
                    .collect();
                let decrease: f64 = us
                    .iter()
                    .zip(&cand)
                    .zip(&g)
                    .map(|((u, c), gu)| (0..3).map(|i| gu[i] * (u[i] - c[i])).sum::<f64>())
                    .sum();
                let jc = problem.cost(&cand);
                if jc <= j - 1e-4 * decrease && decrease > 0.0 {
                    us = cand;
                    let (nj, ng) = problem.cost_grad(&us);
                    j = nj;
                    g = ng;
                    trace.push(j);
                    accepted = true;
                    alpha *= 2.0;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }

        let xs = problem.rollout(&us);
        let predicted_clearance = obstacles
            .iter()
            .flat_map(|o| {
                xs.iter()
                    .enumerate()
                    .skip(1)
                    .map(move |(n, x)| Point2::new(x[0], x[1]).distance(&o.at(n - 1)))
            })
            .fold(f64::INFINITY, f64::min);
        if predicted_clearance < cfg.limits.d_min && !infeasible_start {
            self.mu = (self.mu * 10.0).min(1e6);
        } else if predicted_clearance >= cfg.limits.d_min {
            self.mu = cfg.clearance_penalty;
        }
        self.predicted = xs
            .iter()
            .skip(1)
            .map(|x| Pose2::new(x[0], x[1], wrap_angle(x[2])))
            .collect();
        let u = project_control(us[0], &cfg.limits);
        self.warm = us;
        NmpcOutput::Control {
            u,
            cost_trace: trace,
            predicted_clearance,
            infeasible_start,
        }
    }
}

/// Constant-gain pursuit of the target, used as an alternative initial
/// guess. A nonzero `side` adds a lateral push (left for +1) over the first
/// half of the horizon.
fn pursuit_guess(state: &Pose2, target: &[f64; 3], cfg: &NmpcConfig, side: f64) -> Vec<[f64; 3]> {
    let mut x = [state.x, state.y, state.theta];
    let mut us = Vec::with_capacity(cfg.horizon);
    for n in 0..cfg.horizon {
        let (mut dx, mut dy) = (target[0] - x[0], target[1] - x[1]);
        if side != 0.0 && n < cfg.horizon / 2 {
            let d = dx.hypot(dy).max(1e-9);
            let push = 0.5 * cfg.limits.v_tr_max;
            (dx, dy) = (dx - side * dy / d * push, dy + side * dx / d * push);
        }
        let (s, c) = x[2].sin_cos();
        let k = 1.5;
        let u = project_control(
            [
                k * (c * dx + s * dy),
                k * (-s * dx + c * dy),
                k * (target[2] - x[2]),
            ],
            &cfg.limits,
        );
        x = step(x, u, cfg.dt);
        us.push(u);
    }
    us
}

/// Second activeness level: re-optimizes the heading of the next waypoint
/// on the current map, excluding the cells already covered on this path.
pub fn refine_next_heading(
    grid: &OccupancyGrid,
    next: Point2,
    mode: &UtilityMode,
    view: &ViewConfig,
    goal: Option<Point2>,
    covered: &CellSet,
) -> Result<HeadingChoice> {
    optimal_heading(grid, next, mode, view, goal, Some(covered))
}

/// Heading at `from` that keeps the most of `features` in view (range,
/// FOV wedge and no occluding cell on the estimated grid). Falls back to
/// `current` when no feature is visible from any heading.
pub fn feature_heading(
    features: &[Point2],
    from: Point2,
    view: &ViewConfig,
    grid: &OccupancyGrid,
    current: f64,
) -> f64 {
    let origin = grid.cell_of(from);
    let visible: Vec<f64> = features
        .iter()
        .filter(|f| from.distance(f) <= view.d_thr)
        .filter(|f| {
            let (Some(o), Some(t)) = (origin, grid.cell_of(**f)) else {
                return false;
            };
            walk_cells(o, t)
                .filter(|m| *m != o && *m != t)
                .all(|m| !grid.is_occluder(m))
        })
        .map(|f| from.bearing_to(f))
        .collect();
    if visible.is_empty() {
        return current;
    }
    let half = view.fov / 2.0 + 1e-9;
    let mut best = (0usize, current);
    for k in 0..view.n_headings {
        let th = view.heading(k);
        let count = visible
            .iter()
            .filter(|b| angle_diff(**b, th).abs() <= half)
            .count();
        if count > best.0 {
            best = (count, th);
        }
    }
    best.1
}

/// Blend of the refined waypoint heading and the feature heading:
/// `γ = (θ̃·e^{κ2 d} + β·e^{κ3/d}) / (e^{κ2 d} + e^{κ3/d})`, evaluated with
/// `β` moved to the branch within π of `θ̃`.
pub fn blended_heading(theta_star: f64, beta: f64, d_t: f64, kappa2: f64, kappa3: f64) -> f64 {
    if !(d_t > 0.0) {
        return theta_star;
    }
    let beta = theta_star + angle_diff(beta, theta_star);
    // Log-domain weights so that tiny d_t does not underflow to 0/0.
    let la = kappa2 * d_t;
    let lb = kappa3 / d_t;
    let m = la.max(lb);
    let (wa, wb) = ((la - m).exp(), (lb - m).exp());
    wrap_angle((theta_star * wa + beta * wb) / (wa + wb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::UtilityKind;
    use crate::world_sim::step_kinematics;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn statics(points: &[Point2], n: usize) -> Vec<ObstacleTrack> {
        points.iter().map(|p| ObstacleTrack::fixed(*p, n)).collect()
    }

    #[test]
    fn fixed_point_gives_zero_control() {
        let mut c = Nmpc::new(NmpcConfig::default());
        let s = Pose2::new(1.0, 2.0, 0.3);
        match c.step(&s, &s, &[]) {
            NmpcOutput::Control { u, .. } => {
                assert!(u.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-3, "{u:?}")
            }
            NmpcOutput::Recovery => panic!(),
        }
    }

    #[test]
    fn reaches_target_one_meter_ahead() {
        let mut c = Nmpc::new(NmpcConfig::default());
        let mut s = Pose2::new(0.0, 0.0, 0.0);
        let target = Pose2::new(1.0, 0.0, 0.0);
        let mut reached = None;
        for k in 0..40 {
            let NmpcOutput::Control { u, .. } = c.step(&s, &target, &[]) else {
                panic!()
            };
            s = step_kinematics(&s, u, 0.1);
            if s.position().distance(&target.position()) <= 0.05 {
                reached = Some(k + 1);
                break;
            }
        }
        assert!(reached.is_some_and(|k| k as f64 * 0.1 <= 4.0), "{s:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = NmpcConfig::default();
        // The second set puts the rollout inside the clearance margin.
        for set in [
            [Point2::new(0.5, 0.45), Point2::new(0.4, -0.4)],
            [Point2::new(0.35, 0.15), Point2::new(0.6, -0.1)],
        ] {
            let obstacles = statics(&set, cfg.horizon);
            let p = Problem {
                cfg: &cfg,
                x0: [0.0, 0.0, 0.2],
                target: [1.0, 0.3, 1.0],
                obstacles: &obstacles,
                mu: 100.0,
            };
            let us: Vec<[f64; 3]> = (0..cfg.horizon)
                .map(|k| [0.3 + 0.01 * k as f64, -0.1, 0.2 - 0.02 * k as f64])
                .collect();
            let (j, g) = p.cost_grad(&us);
            assert!((j - p.cost(&us)).abs() < 1e-9 * j.abs().max(1.0));
            let h = 1e-5;
            for k in [0, 5, 19] {
                for i in 0..3 {
                    let mut plus = us.clone();
                    let mut minus = us.clone();
                    plus[k][i] += h;
                    minus[k][i] -= h;
                    let fd = (p.cost(&plus) - p.cost(&minus)) / (2.0 * h);
                    assert!(
                        (fd - g[k][i]).abs() <= 1e-4 * (1.0 + fd.abs()),
                        "k={k} i={i} fd={fd} an={}",
                        g[k][i]
                    );
                }
            }
        }
    }

    #[test]
    fn cost_is_monotone_within_a_step() {
        let mut c = Nmpc::new(NmpcConfig::default());
        let obstacles = statics(&[Point2::new(0.8, 0.05)], 20);
        let mut s = Pose2::new(0.0, 0.0, 0.0);
        for _ in 0..20 {
            let NmpcOutput::Control { u, cost_trace, .. } =
                c.step(&s, &Pose2::new(2.0, 0.0, 1.0), &obstacles)
            else {
                panic!()
            };
            for w in cost_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            s = step_kinematics(&s, u, 0.1);
        }
    }

    /// Drives through a slalom of posts and returns the minimum clearance.
    fn run_slalom() -> (f64, Pose2, Vec<[f64; 3]>) {
        let cfg = NmpcConfig::default();
        let posts = [
            Point2::new(1.0, 0.0),
            Point2::new(2.0, 0.35),
            Point2::new(3.0, -0.35),
            Point2::new(4.0, 0.0),
        ];
        let tracks = statics(&posts, cfg.horizon);
        let mut c = Nmpc::new(cfg);
        let mut s = Pose2::new(0.0, 0.0, 0.0);
        let target = Pose2::new(5.0, 0.0, 0.0);
        let mut min_clear = f64::INFINITY;
        let mut controls = Vec::new();
        for _ in 0..150 {
            let NmpcOutput::Control { u, .. } = c.step(&s, &target, &tracks) else {
                panic!("recovery")
            };
            controls.push(u);
            s = step_kinematics(&s, u, cfg.dt);
            for p in &posts {
                min_clear = min_clear.min(s.position().distance(p));
            }
        }
        (min_clear, s, controls)
    }

    #[test]
    fn slalom_keeps_clearance_and_limits() {
        let (clear, end, controls) = run_slalom();
        let lim = RobotLimits::default();
        assert!(clear >= lim.d_min - 0.1, "{clear}");
        assert!(
            end.position().distance(&Point2::new(5.0, 0.0)) < 0.2,
            "{end:?}"
        );
        for u in controls {
            for i in 0..3 {
                assert!(u[i].abs() <= lim.u_max[i]);
            }
            assert!(u[0].hypot(u[1]) <= lim.v_tr_max);
        }
    }

    #[test]
    fn obstacle_on_the_straight_line_is_avoided() {
        let cfg = NmpcConfig::default();
        let post = Point2::new(1.0, 0.0);
        let tracks = statics(&[post], cfg.horizon);
        let mut c = Nmpc::new(cfg);
        let mut s = Pose2::new(0.0, 0.0, 0.0);
        let mut min_clear = f64::INFINITY;
        for _ in 0..80 {
            let NmpcOutput::Control { u, .. } = c.step(&s, &Pose2::new(2.0, 0.0, 0.0), &tracks)
            else {
                panic!()
            };
            s = step_kinematics(&s, u, cfg.dt);
            min_clear = min_clear.min(s.position().distance(&post));
        }
        assert!(min_clear >= cfg.limits.d_min - 0.01, "{min_clear}");
        assert!(s.position().distance(&Point2::new(2.0, 0.0)) < 0.1, "{s:?}");
    }

    #[test]
    fn obstacle_selection_rules() {
        let n = 5;
        let predicted: Vec<Pose2> = (0..n)
            .map(|k| Pose2::new(k as f64 * 0.1, 0.0, 0.0))
            .collect();
        let mut tracks = Vec::new();
        for k in 0..3 {
            let mut t = ObstacleTrack::fixed(Point2::new(10.0 + k as f64, 0.0), n);
            t.status = ObstacleStatus::Dynamic;
            tracks.push(t);
        }
        for k in 0..12 {
            tracks.push(ObstacleTrack::fixed(
                Point2::new(0.0, 1.0 + k as f64 * 0.5),
                n,
            ));
        }
        let sel = obstacle_selection(&tracks, &predicted, 10);
        assert_eq!(sel.len(), 10);
        assert!(sel[..3].iter().all(|t| t.status == ObstacleStatus::Dynamic));
        for (k, t) in sel[3..].iter().enumerate() {
            assert_eq!(t.position, Point2::new(0.0, 1.0 + k as f64 * 0.5));
        }
        assert!(obstacle_selection(&[], &predicted, 10).is_empty());
        let a = ObstacleTrack::fixed(Point2::new(0.0, 1.0), n);
        let b = ObstacleTrack::fixed(Point2::new(0.0, -1.0), n);
        let sel = obstacle_selection(&[a.clone(), b.clone()], &predicted, 10);
        assert_eq!(sel, vec![a, b]);
    }

    #[test]
    fn blend_examples() {
        let (t, b) = (60f64.to_radians(), -60f64.to_radians());
        let g = blended_heading(t, b, 1.5, -6.0, -0.5);
        assert!((g.to_degrees() + 59.98).abs() < 0.02, "{}", g.to_degrees());
        assert!((blended_heading(t, b, 1e-6, -6.0, -0.5) - t).abs() < 1e-4);
        assert_eq!(blended_heading(t, b, 0.0, -6.0, -0.5), t);
        assert_eq!(blended_heading(t, b, -1.0, -6.0, -0.5), t);
        for d in [0.01, 0.3, 1.0, 5.0] {
            assert!((blended_heading(0.7, 0.7, d, -6.0, -0.5) - 0.7).abs() < 1e-12);
        }
        // Across ±π the blend takes the short way round.
        let g = blended_heading(170f64.to_radians(), -170f64.to_radians(), 0.3, -6.0, -0.5);
        assert!(g.abs() > 160f64.to_radians());
    }

    #[test]
    fn feature_heading_examples() {
        let g = OccupancyGrid::new(100, 100, 0.1, Point2::new(0.0, 0.0));
        let view = ViewConfig::default();
        let from = Point2::new(5.05, 5.05);
        let at = |deg: f64, r: f64| {
            let a = deg.to_radians();
            Point2::new(from.x + r * a.cos(), from.y + r * a.sin())
        };
        let cluster: Vec<Point2> = (0..6)
            .map(|k| at(28.0 + k as f64, 1.0 + 0.2 * k as f64))
            .collect();
        let beta = feature_heading(&cluster, from, &view, &g, 2.0);
        // All six fit in the wedge; the lowest such heading index wins.
        assert!(
            cluster
                .iter()
                .all(|f| angle_diff(from.bearing_to(f), beta).abs() <= view.fov / 2.0),
            "{beta}"
        );
        assert_eq!(beta, 0.0);
        assert_eq!(feature_heading(&[], from, &view, &g, 2.0), 2.0);
        let mut split: Vec<Point2> = (0..3).map(|k| at(k as f64, 1.5)).collect();
        split.extend((0..5).map(|k| at(180.0 + k as f64, 1.5)));
        let beta = feature_heading(&split, from, &view, &g, 0.0);
        assert!(angle_diff(beta, PI).abs() <= PI / 8.0 + 1e-9, "{beta}");
    }

    #[test]
    fn refinement_without_changes_matches_plan() {
        let g = OccupancyGrid::new(60, 60, 0.1, Point2::new(0.0, 0.0));
        let view = ViewConfig::default();
        let mode = UtilityMode::new(UtilityKind::U1);
        let covered = CellSet::for_grid(&g);
        let p = Point2::new(3.05, 3.05);
        let plan = optimal_heading(&g, p, &mode, &view, None, Some(&covered)).unwrap();
        let refined = refine_next_heading(&g, p, &mode, &view, None, &covered).unwrap();
        assert_eq!(plan.theta, refined.theta);
    }

    #[test]
    fn refinement_moves_off_a_discovered_wall() {
        let mut g = OccupancyGrid::new(80, 80, 0.1, Point2::new(0.0, 0.0));
        let view = ViewConfig::default();
        let mode = UtilityMode::new(UtilityKind::U1);
        let covered = CellSet::for_grid(&g);
        let p = Point2::new(4.05, 4.05);
        // Everything explored except a region to the east.
        for i in 0..g.len() {
            let c = g.cell_at_index(i);
            if c.x < 45 {
                g.apply_logodds(c, -3.0);
            }
        }
        let before = refine_next_heading(&g, p, &mode, &view, None, &covered).unwrap();
        assert!(angle_diff(before.theta, 0.0).abs() <= PI / 8.0 + 1e-9);
        // A wall appears right in front of the robot, hiding the east side.
        for y in 25..56 {
            let c = crate::geometry::Cell::new(43, y);
            g.apply_logodds(c, 7.0);
        }
        let after = refine_next_heading(&g, p, &mode, &view, None, &covered).unwrap();
        assert!(angle_diff(after.theta, before.theta).abs() > 1e-9);
        assert!(after.utility < before.utility);
    }

    proptest! {
        #[test]
        fn projection_is_exact(ux in -5.0f64..5.0, uy in -5.0f64..5.0, ut in -5.0f64..5.0) {
            let lim = RobotLimits::default();
            let p = project_control([ux, uy, ut], &lim);
            prop_assert!(p[0].abs() <= lim.u_max[0] && p[1].abs() <= lim.u_max[1] && p[2].abs() <= lim.u_max[2]);
            prop_assert!(p[0].hypot(p[1]) <= lim.v_tr_max);
        }

        #[test]
        fn blend_is_convex_on_branch(t in -PI..PI, b in -PI..PI, d in 1e-3f64..10.0) {
            let g = blended_heading(t, b, d, -6.0, -0.5);
            let bb = t + angle_diff(b, t);
            let (lo, hi) = if t <= bb { (t, bb) } else { (bb, t) };
            // Compare on the unwrapped branch around θ̃.
            let gg = t + angle_diff(g, t);
            prop_assert!(gg >= lo - 1e-9 && gg <= hi + 1e-9);
        }
    }
}
