//! One closed-loop exploration trial and its archived outputs.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{bucket_metrics, write_metrics_csv, MetricSample};
use super::MethodConfig;
use crate::config::TrialConfig;
use crate::controller::{blended_heading, feature_heading, Nmpc, NmpcOutput, ObstacleTrack};
use crate::error::{Error, Result};
use crate::fsm::{
    tick, Action, ControllerStatus, Event, EventLog, FsmState, RecoveryLevel, TickContext,
};
use crate::geometry::{angle_diff, Cell, Point2, Pose2};
use crate::grid_map::{CellClass, OccupancyGrid};
use crate::slam_proxy::PoseGraph;
use crate::utility::{visible_cells, Waypoint};
use crate::world_sim::{odometry_reading, wheel_rotation_increment, WorldModel};
use crate::worlds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    /// Builtin world name or path to a world sidecar.
    pub world: String,
    pub method: String,
    pub seed: u64,
    /// Sim seconds (before the long-run factor).
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialOutcome {
    Completed,
    Failed { reason: String },
}

/// Final numbers of one trial, all derivable from its metrics CSV and event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub world: String,
    pub method: String,
    pub seed: u64,
    pub duration: f64,
    pub outcome: TrialOutcome,
    pub final_bac: f64,
    pub final_ate_rmse: f64,
    pub final_normalized_entropy: f64,
    pub final_explored_area: f64,
    pub final_coverage: f64,
    pub final_path_length: f64,
    pub final_wheel_rotation: f64,
    pub closures: usize,
    pub loops_per_meter: f64,
    pub wheel_rotation_per_meter: f64,
    pub coverage_target: f64,
    /// Whether the coverage target was reached; if not, the two values
    /// below are the final ones.
    pub target_reached: bool,
    pub path_to_target: f64,
    pub entropy_at_target: f64,
    pub recoveries_easy: usize,
    pub recoveries_hard: usize,
    /// Closures after which the normalized entropy went up.
    pub closure_entropy_spikes: usize,
    pub refinements: usize,
    pub blended_steps: usize,
}

impl TrialSummary {
    pub fn failed(&self) -> bool {
        matches!(self.outcome, TrialOutcome::Failed { .. })
    }
}

pub struct TrialResult {
    pub spec: TrialSpec,
    pub config: TrialConfig,
    pub summary: TrialSummary,
    /// Per-step samples.
    pub raw: Vec<MetricSample>,
    /// Bucketed series as written to `metrics.csv`.
    pub rows: Vec<MetricSample>,
    pub events: EventLog,
    pub graph_dump: String,
    pub grid: OccupancyGrid,
}

impl TrialResult {
    /// Writes `metrics.csv`, `events.jsonl`, `summary.json`, `graph.txt`,
    /// `map.pgm` (+ `map.yaml`) and `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(&dir.join("metrics.csv"), &self.rows)?;
        self.events.write(&dir.join("events.jsonl"))?;
        let summary = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        std::fs::write(dir.join("summary.json"), summary + "\n")?;
        std::fs::write(dir.join("graph.txt"), &self.graph_dump)?;
        self.grid.write_pgm(&dir.join("map.pgm"))?;
        let mut cfg = String::from("# resolved trial configuration\n");
        cfg.push_str(&format!(
            "# world = {:?}, method = {:?}, seed = {}, duration = {}\n",
            self.spec.world, self.spec.method, self.spec.seed, self.summary.duration
        ));
        cfg.push_str(&self.config.to_toml_string());
        std::fs::write(dir.join("config.toml"), cfg)?;
        Ok(())
    }
}

/// Computes the summary from a bucketed series and the event log.
pub fn summarize(
    spec: &TrialSpec,
    duration: f64,
    outcome: TrialOutcome,
    rows: &[MetricSample],
    events: &[Event],
    coverage_target: f64,
) -> TrialSummary {
    let last = rows.last().copied().unwrap_or(MetricSample {
        t: 0.0,
        explored_area: 0.0,
        normalized_entropy: 1.0,
        bac: 0.0,
        coverage: 0.0,
        path_length: 0.0,
        wheel_rotation: 0.0,
        closures: 0,
        ate_rmse: 0.0,
        session: 0,
    });
    let hit = rows.iter().find(|r| r.coverage >= coverage_target);
    let per_m = |v: f64| {
        if last.path_length > 0.0 {
            v / last.path_length
        } else {
            0.0
        }
    };
    let count = |f: &dyn Fn(&Event) -> bool| events.iter().filter(|e| f(e)).count();
    TrialSummary {
        world: spec.world.clone(),
        method: spec.method.clone(),
        seed: spec.seed,
        duration,
        outcome,
        final_bac: last.bac,
        final_ate_rmse: last.ate_rmse,
        final_normalized_entropy: last.normalized_entropy,
        final_explored_area: last.explored_area,
        final_coverage: last.coverage,
        final_path_length: last.path_length,
        final_wheel_rotation: last.wheel_rotation,
        closures: last.closures,
        loops_per_meter: per_m(last.closures as f64),
        wheel_rotation_per_meter: per_m(last.wheel_rotation),
        coverage_target,
        target_reached: hit.is_some(),
        path_to_target: hit.unwrap_or(&last).path_length,
        entropy_at_target: hit.unwrap_or(&last).normalized_entropy,
        recoveries_easy: count(&|e| {
            matches!(
                e,
                Event::Recovery {
                    level: RecoveryLevel::Easy,
                    ..
                }
            )
        }),
        recoveries_hard: count(&|e| {
            matches!(
                e,
                Event::Recovery {
                    level: RecoveryLevel::Hard,
                    ..
                }
            )
        }),
        closure_entropy_spikes: count(
            &|e| matches!(e, Event::Closure { entropy_before, entropy_after, .. } if entropy_after > entropy_before),
        ),
        refinements: count(&|e| matches!(e, Event::Refine { .. })),
        blended_steps: count(&|e| matches!(e, Event::Heading { blended: true, .. })),
    }
}

/// Open-loop motions run outside the controller.
#[derive(Debug, Clone, Copy)]
enum Maneuver {
    /// Turn in place until `remaining` radians are done.
    Rotate { remaining: f64 },
    /// Rotate a full turn, then back away from the nearest obstacle.
    Retreat { rotate: f64, travel: f64 },
}

/// Obstacle points near the robot: occupied cells of the estimated map and
/// the short-range proximity ring (true surroundings expressed in the
/// estimated frame), thinned to the nearest point per bin.
fn obstacle_points(
    grid: &OccupancyGrid,
    world: &WorldModel,
    est: &Pose2,
    truth: &Pose2,
    cfg: &TrialConfig,
) -> Vec<Point2> {
    let mut bins: BTreeMap<(i64, i64), (f64, Point2)> = BTreeMap::new();
    let mut insert = |p: Point2| {
        let d = est.position().distance(&p);
        let key = (
            (p.x / cfg.obstacle_bin).floor() as i64,
            (p.y / cfg.obstacle_bin).floor() as i64,
        );
        let e = bins.entry(key).or_insert((d, p));
        if d < e.0 {
            *e = (d, p);
        }
    };
    let res = grid.resolution();
    let r = (cfg.obstacle_map_range / res).ceil() as i32;
    let c = grid.cell_of_unchecked(est.position());
    for y in c.y - r..=c.y + r {
        for x in c.x - r..=c.x + r {
            let cell = Cell::new(x, y);
            if grid.in_bounds(cell) && grid.class(cell) == CellClass::Occupied {
                let p = grid.cell_center(cell);
                if p.distance(&est.position()) <= cfg.obstacle_map_range {
                    insert(p);
                }
            }
        }
    }
    let r = (cfg.proximity_range / world.resolution()).ceil() as i32;
    let c = world.cell_of_unchecked(truth.position());
    for y in c.y - r..=c.y + r {
        for x in c.x - r..=c.x + r {
            let cell = Cell::new(x, y);
            if world.in_bounds(cell) && world.is_occupied(cell) {
                let p = world.cell_center(cell);
                if p.distance(&truth.position()) <= cfg.proximity_range {
                    insert(truth.transfer_point(est, p));
                }
            }
        }
    }
    bins.into_values().map(|(_, p)| p).collect()
}

struct Segment {
    waypoint: Waypoint,
    since: f64,
}

/// Runs one trial in memory. Configuration problems are errors; a robot
/// that collides or exhausts recovery yields a failed outcome.
pub fn run_trial(spec: &TrialSpec, cfg: &TrialConfig) -> Result<TrialResult> {
    cfg.validate()?;
    let method = MethodConfig::by_name(&spec.method)?;
    if !(spec.duration > 0.0) {
        return Err(Error::Config(format!(
            "duration must be positive (got {})",
            spec.duration
        )));
    }
    let mut world = worlds::load(&spec.world)?;
    let duration = if method.long_run {
        spec.duration * cfg.long_duration_factor
    } else {
        spec.duration
    };
    let gt = world.class_grid();
    let sensor = cfg.sensor();
    let view = cfg.view();
    let utility = cfg.utility(method.utility);
    let mode = method.plan_mode();
    let planner = cfg.planner();
    let frontier = cfg.frontier();
    let noise = cfg.noise();
    let wheels = cfg.wheels();
    let limits = cfg.limits();

    let mut grid = OccupancyGrid::with_params(
        world.width(),
        world.height(),
        world.resolution(),
        world.origin(),
        cfg.logodds(),
    );
    let mut graph = PoseGraph::new(cfg.slam(), world.start);
    let mut nmpc = Nmpc::new(cfg.nmpc());
    let mut fsm = FsmState::new(&grid);
    let mut log = EventLog::default();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let mut decision_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    decision_rng.set_stream(2);

    let mut raw = Vec::new();
    let mut path_length = 0.0;
    let mut wheel_rotation = 0.0;
    let mut outcome = TrialOutcome::Completed;
    let mut maneuver: Option<Maneuver> = None;
    let mut segment: Option<Segment> = None;
    let mut anchor = (0.0, graph.estimate());

    let sense = |world: &WorldModel,
                 grid: &mut OccupancyGrid,
                 graph: &mut PoseGraph,
                 t: f64,
                 log: &mut EventLog|
     -> Result<()> {
        let truth = world.true_pose;
        let scan = world.depth_scan(&truth, &sensor)?;
        let est = graph.estimate();
        if grid.cell_of(est.position()).is_some() {
            grid.update_from_scan(&est, &scan)?;
        }
        let features = world.visible_features(&truth, sensor.fov, sensor.max_range);
        if graph.observe(t, truth, &features, &scan).is_some() {
            if let Some(m) = graph.detect_loop_closure(t, &features) {
                let before = grid.map_entropy().normalized;
                let area_before = grid.explored_area();
                let r = graph.apply_closure(m, t)?;
                graph.rebuild(grid);
                log.push(Event::Closure {
                    t,
                    from: r.closure.from,
                    to: r.closure.to,
                    entropy_before: before,
                    entropy_after: grid.map_entropy().normalized,
                    explored_before: area_before,
                    explored_after: grid.explored_area(),
                    ate_before: r.ate_before,
                    ate_after: r.ate_after,
                    merged: r.merged_session,
                });
            }
        }
        Ok(())
    };
    let sample = |grid: &OccupancyGrid,
                  graph: &PoseGraph,
                  t: f64,
                  path_length: f64,
                  wheel_rotation: f64|
     -> Result<MetricSample> {
        Ok(MetricSample {
            t,
            explored_area: grid.explored_area(),
            normalized_entropy: grid.map_entropy().normalized,
            bac: grid.balanced_accuracy(&gt)?,
            coverage: grid.coverage(&gt)?,
            path_length,
            wheel_rotation,
            closures: graph.closures.len(),
            ate_rmse: graph.ate_rmse(),
            session: graph.session(),
        })
    };

    sense(&world, &mut grid, &mut graph, 0.0, &mut log)?;
    raw.push(sample(&grid, &graph, 0.0, 0.0, 0.0)?);

    let steps = (duration / cfg.dt).round() as usize;
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let est = graph.estimate();

        // Decide.
        if maneuver.is_none() {
            let nodes: Vec<Pose2> = graph
                .nodes
                .iter()
                .filter(|n| n.session == graph.session())
                .map(|n| n.pose)
                .collect();
            let ctx = TickContext {
                t,
                grid: &grid,
                robot: est,
                nodes: &nodes,
                levels: method.levels,
                utility,
                view,
                mode,
                planner,
                frontier,
            };
            match tick(&mut fsm, &ctx, &mut decision_rng, &mut log)? {
                Action::Idle => {}
                Action::Dispatch(w) => {
                    segment = Some(Segment {
                        waypoint: w,
                        since: t,
                    });
                    anchor = (t, est);
                }
                Action::Rotate360 => {
                    maneuver = Some(Maneuver::Rotate {
                        remaining: 2.0 * PI,
                    })
                }
                Action::Recover(RecoveryLevel::Easy) => {
                    segment = None;
                    maneuver = Some(Maneuver::Retreat {
                        rotate: 2.0 * PI,
                        travel: 1.0,
                    });
                }
                Action::Recover(RecoveryLevel::Hard) => {
                    segment = None;
                    graph.new_session();
                    grid.clear();
                    fsm.covered.clear();
                    nmpc.reset();
                    log.push(Event::Session {
                        t,
                        session: graph.session(),
                    });
                    maneuver = Some(Maneuver::Rotate {
                        remaining: 2.0 * PI,
                    });
                }
                Action::Failed => {
                    let reason = "recovery exhausted".to_string();
                    log.push(Event::Failed {
                        t,
                        reason: reason.clone(),
                    });
                    outcome = TrialOutcome::Failed { reason };
                    break;
                }
            }
        }

        // Control.
        let truth = world.true_pose;
        let mut u = [0.0; 3];
        if let Some(m) = maneuver {
            let w = limits.u_max[2];
            match m {
                Maneuver::Rotate { remaining } => {
                    let step = (w * cfg.dt).min(remaining);
                    u[2] = step / cfg.dt;
                    let left = remaining - step;
                    maneuver = (left > 1e-9).then_some(Maneuver::Rotate { remaining: left });
                    if maneuver.is_none() {
                        fsm.set_status(ControllerStatus::Waiting, t, &mut log);
                    }
                }
                Maneuver::Retreat { rotate, travel } if rotate > 1e-9 => {
                    let step = (w * cfg.dt).min(rotate);
                    u[2] = step / cfg.dt;
                    maneuver = Some(Maneuver::Retreat {
                        rotate: rotate - step,
                        travel,
                    });
                }
                Maneuver::Retreat { travel, .. } => {
                    let pts = obstacle_points(&grid, &world, &est, &truth, cfg);
                    let nearest = pts.iter().min_by(|a, b| {
                        est.position()
                            .distance(a)
                            .total_cmp(&est.position().distance(b))
                    });
                    let speed = 0.3;
                    maneuver = None;
                    if let Some(p) = nearest {
                        let (dx, dy) = (est.x - p.x, est.y - p.y);
                        let d = dx.hypot(dy).max(1e-9);
                        let (s, c) = est.theta.sin_cos();
                        let (wx, wy) = (dx / d * speed, dy / d * speed);
                        let body = [c * wx + s * wy, -s * wx + c * wy, 0.0];
                        let next = crate::world_sim::step_kinematics(&truth, body, cfg.dt);
                        if world
                            .nearest_obstacle(next.position(), limits.d_min * 0.5)
                            .is_none()
                            && travel > 1e-9
                        {
                            u = body;
                            maneuver = Some(Maneuver::Retreat {
                                rotate: 0.0,
                                travel: travel - cfg.dt,
                            });
                        }
                    }
                    if maneuver.is_none() {
                        fsm.set_status(ControllerStatus::Waiting, t, &mut log);
                    }
                }
            }
        } else if let (ControllerStatus::Operating, Some(seg)) = (fsm.status, segment.as_ref()) {
            let wp = &seg.waypoint;
            let d_t = est.position().distance(&wp.pos);
            let (target_theta, blended) = if method.levels.third {
                let feats: Vec<Point2> = graph
                    .latest_node()
                    .map(|n| {
                        n.features
                            .iter()
                            .filter_map(|id| world.features.get(*id as usize))
                            .map(|f| n.truth.transfer_point(&n.pose, f.pos))
                            .collect()
                    })
                    .unwrap_or_default();
                let beta = feature_heading(&feats, wp.pos, &view, &grid, est.theta);
                (
                    blended_heading(wp.theta, beta, d_t, cfg.kappa2, cfg.kappa3),
                    true,
                )
            } else {
                (wp.theta, false)
            };
            log.push(Event::Heading {
                t,
                target: target_theta,
                blended,
            });
            let tracks: Vec<ObstacleTrack> = obstacle_points(&grid, &world, &est, &truth, cfg)
                .into_iter()
                .map(|p| ObstacleTrack::fixed(p, cfg.horizon))
                .collect();
            match nmpc.step(&est, &Pose2::new(wp.pos.x, wp.pos.y, target_theta), &tracks) {
                NmpcOutput::Control { u: c, .. } => u = c,
                NmpcOutput::Recovery => {
                    segment = None;
                    fsm.set_status(ControllerStatus::Recovery, t, &mut log);
                }
            }
        }

        // Move.
        let prev = world.true_pose;
        match world.advance(u, cfg.dt) {
            Ok(_) => {}
            Err(Error::Collision(p)) => {
                log.push(Event::Collision { t, x: p.x, y: p.y });
                let reason = "collision".to_string();
                log.push(Event::Failed {
                    t,
                    reason: reason.clone(),
                });
                outcome = TrialOutcome::Failed { reason };
                break;
            }
            Err(e) => return Err(e),
        }
        let now = world.true_pose;
        path_length += prev.position().distance(&now.position());
        wheel_rotation += wheel_rotation_increment(u, cfg.dt, &wheels);
        let reading = odometry_reading(&prev.between(&now), &noise, &mut noise_rng);
        graph.integrate_odometry(&reading);
        let t_next = (k + 1) as f64 * cfg.dt;
        sense(&world, &mut grid, &mut graph, t_next, &mut log)?;

        // Arrival, timeout and stall checks.
        let est = graph.estimate();
        if fsm.status == ControllerStatus::Operating {
            if let Some(seg) = segment.as_ref() {
                let wp = &seg.waypoint;
                if est.position().distance(&wp.pos) <= cfg.reach_pos_tol
                    && angle_diff(est.theta, wp.theta).abs() <= cfg.reach_heading_tol
                {
                    let seen = if method.levels.second {
                        visible_cells(&grid, &est, &view, None)
                    } else {
                        Vec::new()
                    };
                    fsm.waypoint_reached(wp.pos, &seen, t_next, &mut log);
                    segment = None;
                } else if t_next - seg.since >= cfg.waypoint_timeout {
                    log.push(Event::Timeout { t: t_next });
                    fsm.abandon_path(t_next, &mut log);
                    segment = None;
                } else {
                    if est.position().distance(&anchor.1.position()) >= cfg.stuck_eps
                        || angle_diff(est.theta, anchor.1.theta).abs() >= 0.1
                    {
                        anchor = (t_next, est);
                    }
                    if t_next - anchor.0 >= cfg.stuck_window {
                        segment = None;
                        fsm.set_status(ControllerStatus::Recovery, t_next, &mut log);
                        anchor = (t_next, est);
                    }
                }
            }
        }
        raw.push(sample(&grid, &graph, t_next, path_length, wheel_rotation)?);
    }

    let rows = bucket_metrics(&raw, cfg.metrics_bin);
    let summary = summarize(
        spec,
        duration,
        outcome,
        &rows,
        &log.events,
        cfg.coverage_target,
    );
    Ok(TrialResult {
        spec: spec.clone(),
        config: cfg.clone(),
        summary,
        raw,
        rows,
        graph_dump: graph.dump(),
        events: log,
        grid,
    })
}

/// Runs trials on the rayon pool; results keep the input order.
pub fn run_trials(specs: &[TrialSpec], cfg: &TrialConfig) -> Vec<Result<TrialResult>> {
    specs.par_iter().map(|s| run_trial(s, cfg)).collect()
}
