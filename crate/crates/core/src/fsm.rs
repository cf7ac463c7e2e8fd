//! Decision layer: waypoint queue, planning on empty queue, next-heading
//! refinement at dispatch, fallbacks and recovery escalation, with a
//! line-delimited event log.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::refine_next_heading;
use crate::error::Result;
use crate::frontier::{
    candidate_goals, extract_frontiers, fallback_action, FallbackAction, FrontierConfig,
};
use crate::geometry::{Point2, Pose2};
use crate::grid_map::OccupancyGrid;
use crate::planner::{plan_informative_path, CostMap, PathPlanMode, PlannerConfig};
use crate::utility::{CellSet, UtilityMode, ViewConfig, Waypoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerStatus {
    Waiting,
    Operating,
    GoalReached,
    Recovery,
}

/// Which activeness levels a method enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Levels {
    /// Per-waypoint heading optimization at plan time.
    pub first: bool,
    /// Next-heading refinement at each dispatch.
    pub second: bool,
    /// Feature-aware heading blend while driving.
    pub third: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryLevel {
    Easy,
    Hard,
}

/// One record of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Status {
        t: f64,
        from: ControllerStatus,
        to: ControllerStatus,
    },
    Plan {
        t: f64,
        goal: [f64; 2],
        waypoints: usize,
        utility: f64,
        candidates: usize,
    },
    Fallback {
        t: f64,
        action: FallbackAction,
    },
    /// `from` is the previous waypoint of the same path (or the robot).
    Dispatch {
        t: f64,
        x: f64,
        y: f64,
        theta: f64,
        from: [f64; 2],
    },
    Refine {
        t: f64,
        planned: f64,
        refined: f64,
    },
    /// Per control step: the heading handed to the controller and whether
    /// it came from the feature blend.
    Heading {
        t: f64,
        target: f64,
        blended: bool,
    },
    Reached {
        t: f64,
        x: f64,
        y: f64,
    },
    Timeout {
        t: f64,
    },
    Recovery {
        t: f64,
        level: RecoveryLevel,
    },
    Session {
        t: f64,
        session: u32,
    },
    Closure {
        t: f64,
        from: usize,
        to: usize,
        entropy_before: f64,
        entropy_after: f64,
        explored_before: f64,
        explored_after: f64,
        ate_before: f64,
        ate_after: f64,
        merged: bool,
    },
    Collision {
        t: f64,
        x: f64,
        y: f64,
    },
    Failed {
        t: f64,
        reason: String,
    },
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("events serialize"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<Event>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| crate::error::Error::Format {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}

/// What the trial loop should do next.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Idle,
    Dispatch(Waypoint),
    Rotate360,
    Recover(RecoveryLevel),
    Failed,
}

#[derive(Debug, Clone)]
pub struct FsmState {
    pub status: ControllerStatus,
    pub queue: VecDeque<Waypoint>,
    pub previous_goal: Option<Point2>,
    /// Recovery attempts since the last waypoint arrival.
    pub escalation: u32,
    /// Cells seen from the waypoints reached on the current path.
    pub covered: CellSet,
    /// Goal of the current path.
    pub goal: Option<Point2>,
    /// Position of the waypoint dispatched last (start of the next segment).
    pub last_dispatch: Option<Point2>,
}

impl FsmState {
    pub fn new(grid: &OccupancyGrid) -> Self {
        Self {
            status: ControllerStatus::Waiting,
            queue: VecDeque::new(),
            previous_goal: None,
            escalation: 0,
            covered: CellSet::for_grid(grid),
            goal: None,
            last_dispatch: None,
        }
    }

    pub fn set_status(&mut self, to: ControllerStatus, t: f64, log: &mut EventLog) {
        if self.status != to {
            log.push(Event::Status {
                t,
                from: self.status,
                to,
            });
            self.status = to;
        }
    }

    /// Marks the current waypoint reached and records what was seen from it.
    pub fn waypoint_reached(&mut self, at: Point2, seen: &[u32], t: f64, log: &mut EventLog) {
        self.escalation = 0;
        self.covered.extend(seen);
        log.push(Event::Reached {
            t,
            x: at.x,
            y: at.y,
        });
        self.set_status(ControllerStatus::GoalReached, t, log);
    }

    /// Drops the current path so the next tick replans.
    pub fn abandon_path(&mut self, t: f64, log: &mut EventLog) {
        self.queue.clear();
        self.last_dispatch = None;
        self.set_status(ControllerStatus::Waiting, t, log);
    }
}

/// Everything the decision step reads.
pub struct TickContext<'a> {
    pub t: f64,
    pub grid: &'a OccupancyGrid,
    pub robot: Pose2,
    /// Poses of the graph nodes available as fallback destinations.
    pub nodes: &'a [Pose2],
    pub levels: Levels,
    pub utility: UtilityMode,
    pub view: ViewConfig,
    pub mode: PathPlanMode,
    pub planner: PlannerConfig,
    pub frontier: FrontierConfig,
}

/// One decision cycle.
pub fn tick(
    fsm: &mut FsmState,
    ctx: &TickContext,
    rng: &mut impl Rng,
    log: &mut EventLog,
) -> Result<Action> {
    match fsm.status {
        ControllerStatus::Operating => Ok(Action::Idle),
        ControllerStatus::Recovery => Ok(recovery(fsm, ctx.t, log)),
        ControllerStatus::Waiting | ControllerStatus::GoalReached => {
            if fsm.queue.is_empty() {
                fsm.covered.clear();
                fsm.last_dispatch = None;
                if !plan(fsm, ctx, rng, log)? {
                    return Ok(Action::Rotate360);
                }
            }
            dispatch(fsm, ctx, log)
        }
    }
}

/// Fills the queue from a new informative path. Returns false when the
/// only option left is a rotation in place.
fn plan(
    fsm: &mut FsmState,
    ctx: &TickContext,
    rng: &mut impl Rng,
    log: &mut EventLog,
) -> Result<bool> {
    let map = CostMap::build(ctx.grid, &ctx.planner);
    let clusters = extract_frontiers(ctx.grid, ctx.robot.position(), &ctx.frontier);
    let goals = candidate_goals(
        &clusters,
        ctx.grid,
        &map,
        ctx.robot.position(),
        fsm.previous_goal,
        &ctx.frontier,
    );
    let mut candidates: Vec<Point2> = goals.iter().map(|g| g.position).collect();
    if candidates.is_empty() {
        let action = fallback_action(ctx.nodes, rng);
        log.push(Event::Fallback { t: ctx.t, action });
        match action {
            FallbackAction::RotateInPlace360 => return Ok(false),
            FallbackAction::GoTo { pose, .. } => candidates.push(pose.position()),
        }
    }
    let Ok(path) = plan_informative_path(
        ctx.grid,
        &ctx.robot,
        &candidates,
        &ctx.utility,
        &ctx.view,
        &ctx.mode,
        &ctx.planner,
    ) else {
        // Nothing reachable: forget the previous goal so it may be retried.
        fsm.previous_goal = None;
        log.push(Event::Fallback {
            t: ctx.t,
            action: FallbackAction::RotateInPlace360,
        });
        return Ok(false);
    };
    log.push(Event::Plan {
        t: ctx.t,
        goal: [path.goal.x, path.goal.y],
        waypoints: path.waypoints.len(),
        utility: path.utility,
        candidates: candidates.len(),
    });
    let mut wps = path.waypoints;
    fsm.last_dispatch = Some(wps[0].pos);
    if wps.len() > 1 {
        // The first waypoint is the robot's own position.
        wps.remove(0);
    }
    fsm.goal = Some(path.goal);
    fsm.previous_goal = Some(path.goal);
    fsm.queue = wps.into();
    Ok(true)
}

fn dispatch(fsm: &mut FsmState, ctx: &TickContext, log: &mut EventLog) -> Result<Action> {
    let Some(mut wp) = fsm.queue.pop_front() else {
        return Ok(Action::Idle);
    };
    if ctx.levels.second {
        let refined = refine_next_heading(
            ctx.grid,
            wp.pos,
            &ctx.utility,
            &ctx.view,
            fsm.goal,
            &fsm.covered,
        )?;
        log.push(Event::Refine {
            t: ctx.t,
            planned: wp.theta,
            refined: refined.theta,
        });
        wp.theta = refined.theta;
    }
    let from = fsm.last_dispatch.unwrap_or(ctx.robot.position());
    log.push(Event::Dispatch {
        t: ctx.t,
        x: wp.pos.x,
        y: wp.pos.y,
        theta: wp.theta,
        from: [from.x, from.y],
    });
    fsm.last_dispatch = Some(wp.pos);
    fsm.set_status(ControllerStatus::Operating, ctx.t, log);
    Ok(Action::Dispatch(wp))
}

/// Escalates easy → hard → failed; a waypoint arrival resets the ladder.
pub fn recovery(fsm: &mut FsmState, t: f64, log: &mut EventLog) -> Action {
    fsm.queue.clear();
    fsm.last_dispatch = None;
    let action = match fsm.escalation {
        0 => Action::Recover(RecoveryLevel::Easy),
        1 => Action::Recover(RecoveryLevel::Hard),
        _ => Action::Failed,
    };
    fsm.escalation += 1;
    if let Action::Recover(level) = action {
        log.push(Event::Recovery { t, level });
        fsm.previous_goal = None;
    }
    action
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::{Aggregation, UtilityKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx<'a>(grid: &'a OccupancyGrid, nodes: &'a [Pose2], levels: Levels) -> TickContext<'a> {
        TickContext {
            t: 0.0,
            grid,
            robot: Pose2::new(1.05, 1.05, 0.0),
            nodes,
            levels,
            utility: UtilityMode::new(UtilityKind::U1),
            view: ViewConfig::default(),
            mode: PathPlanMode {
                first_level: true,
                aggregation: Aggregation::WeightedAverage,
            },
            planner: PlannerConfig::default(),
            frontier: FrontierConfig::default(),
        }
    }

    const ALL: Levels = Levels {
        first: true,
        second: true,
        third: true,
    };

    fn wp(x: f64, y: f64, theta: f64) -> Waypoint {
        let mut w = Waypoint::at(Point2::new(x, y), 0.0);
        w.theta = theta;
        w
    }

    /// Free room of 40×40 cells, left half explored.
    fn half_explored() -> OccupancyGrid {
        let mut g = OccupancyGrid::new(40, 40, 0.1, Point2::new(0.0, 0.0));
        for i in 0..g.len() {
            let c = g.cell_at_index(i);
            if c.x < 20 {
                g.apply_logodds(c, -2.0);
            }
        }
        g
    }

    #[test]
    fn goal_reached_pops_front_with_refinement() {
        let g = half_explored();
        let mut fsm = FsmState::new(&g);
        fsm.queue = vec![wp(1.5, 1.05, 0.3), wp(1.9, 1.05, 0.0)].into();
        fsm.status = ControllerStatus::GoalReached;
        let mut log = EventLog::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = tick(&mut fsm, &ctx(&g, &[], ALL), &mut rng, &mut log).unwrap();
        let Action::Dispatch(w) = a else {
            panic!("{a:?}")
        };
        assert_eq!(w.pos, Point2::new(1.5, 1.05));
        assert_eq!(fsm.queue.len(), 1);
        assert_eq!(fsm.queue[0].pos, Point2::new(1.9, 1.05));
        assert_eq!(fsm.status, ControllerStatus::Operating);
        let refines = log
            .events
            .iter()
            .filter(|e| matches!(e, Event::Refine { .. }))
            .count();
        assert_eq!(refines, 1);
    }

    #[test]
    fn without_second_level_plan_heading_passes_through() {
        let g = half_explored();
        let mut fsm = FsmState::new(&g);
        fsm.queue = vec![wp(1.5, 1.05, 0.3)].into();
        let mut log = EventLog::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let levels = Levels {
            first: true,
            second: false,
            third: false,
        };
        let Action::Dispatch(w) =
            tick(&mut fsm, &ctx(&g, &[], levels), &mut rng, &mut log).unwrap()
        else {
            panic!()
        };
        assert_eq!(w.theta, 0.3);
        assert!(!log.events.iter().any(|e| matches!(e, Event::Refine { .. })));
    }

    #[test]
    fn operating_does_nothing() {
        let g = half_explored();
        let mut fsm = FsmState::new(&g);
        fsm.status = ControllerStatus::Operating;
        fsm.queue = vec![wp(1.5, 1.05, 0.3)].into();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut log = EventLog::default();
        assert_eq!(
            tick(&mut fsm, &ctx(&g, &[], ALL), &mut rng, &mut log).unwrap(),
            Action::Idle
        );
        assert_eq!(fsm.queue.len(), 1);
        assert!(log.events.is_empty());
    }

    #[test]
    fn empty_queue_plans_towards_frontier() {
        let g = half_explored();
        let mut fsm = FsmState::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut log = EventLog::default();
        let a = tick(&mut fsm, &ctx(&g, &[], ALL), &mut rng, &mut log).unwrap();
        let Action::Dispatch(w) = a else {
            panic!("{a:?}")
        };
        // The first dispatched waypoint is not the robot position.
        assert!(w.pos.distance(&Point2::new(1.05, 1.05)) > 0.05);
        assert!(log.events.iter().any(|e| matches!(e, Event::Plan { .. })));
        assert!(fsm.goal.is_some());
    }

    #[test]
    fn no_frontier_and_no_nodes_rotates() {
        let mut g = OccupancyGrid::new(30, 30, 0.1, Point2::new(0.0, 0.0));
        for i in 0..g.len() {
            let c = g.cell_at_index(i);
            g.apply_logodds(c, -2.0);
        }
        let mut fsm = FsmState::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut log = EventLog::default();
        assert_eq!(
            tick(&mut fsm, &ctx(&g, &[], ALL), &mut rng, &mut log).unwrap(),
            Action::Rotate360
        );
        // With graph nodes it heads to one of them instead.
        let nodes = [Pose2::new(2.05, 2.05, 0.0)];
        let a = tick(&mut fsm, &ctx(&g, &nodes, ALL), &mut rng, &mut log).unwrap();
        assert!(matches!(a, Action::Dispatch(_)), "{a:?}");
    }

    #[test]
    fn recovery_escalates_then_fails_and_resets_on_arrival() {
        let g = half_explored();
        let mut fsm = FsmState::new(&g);
        let mut log = EventLog::default();
        fsm.status = ControllerStatus::Recovery;
        assert_eq!(
            recovery(&mut fsm, 0.0, &mut log),
            Action::Recover(RecoveryLevel::Easy)
        );
        assert_eq!(
            recovery(&mut fsm, 1.0, &mut log),
            Action::Recover(RecoveryLevel::Hard)
        );
        assert_eq!(recovery(&mut fsm, 2.0, &mut log), Action::Failed);
        fsm.escalation = 1;
        fsm.waypoint_reached(Point2::new(1.0, 1.0), &[], 3.0, &mut log);
        assert_eq!(fsm.escalation, 0);
        assert_eq!(
            recovery(&mut fsm, 4.0, &mut log),
            Action::Recover(RecoveryLevel::Easy)
        );
    }

    #[test]
    fn event_log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::default();
        log.push(Event::Dispatch {
            t: 0.1,
            x: 1.0,
            y: 2.0,
            theta: 0.5,
            from: [0.0, 0.0],
        });
        log.push(Event::Fallback {
            t: 0.2,
            action: FallbackAction::RotateInPlace360,
        });
        log.push(Event::Recovery {
            t: 0.3,
            level: RecoveryLevel::Hard,
        });
        let p = dir.path().join("events.jsonl");
        log.write(&p).unwrap();
        assert_eq!(EventLog::read(&p).unwrap(), log.events);
        assert!(log
            .to_jsonl()
            .lines()
            .next()
            .unwrap()
            .contains("\"event\":\"dispatch\""));
    }
}
