//! Stand-in for a graph-based visual SLAM backend: dead-reckoned pose
//! estimate, a graph of keyframe nodes with the feature ids they observed,
//! loop closures by feature overlap, and map rectification from the
//! keyframe scans along the corrected trajectory.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, wrap_angle, Point2, Pose2};
use crate::grid_map::OccupancyGrid;
use crate::world_sim::DepthScan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlamConfig {
    pub node_linear_spacing: f64,
    pub node_angular_spacing: f64,
    /// Shared feature ids needed for a closure.
    pub n_match: usize,
    /// Minimum age in seconds of a node before it can be matched.
    pub recency_window: f64,
    /// Fraction of the accumulated error removed by a closure.
    pub epsilon: f64,
    /// Keyframe scans kept for rectification.
    pub scan_buffer: usize,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            node_linear_spacing: 0.3,
            node_angular_spacing: 0.3,
            n_match: 8,
            recency_window: 10.0,
            epsilon: 0.8,
            scan_buffer: 2000,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.node_linear_spacing > 0.0 && self.node_angular_spacing > 0.0) {
            return Err(Error::Config("node spacings must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("closure epsilon must lie in [0, 1]".into()));
        }
        if self.n_match == 0 || self.recency_window < 0.0 {
            return Err(Error::Config(
                "n_match >= 1 and recency_window >= 0 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub session: u32,
    /// Sim time of creation, seconds.
    pub t: f64,
    /// Estimated pose, rewritten by closures.
    pub pose: Pose2,
    /// Ground-truth pose at creation (error bookkeeping only).
    pub truth: Pose2,
    /// Sorted ids of the features in view.
    pub features: Vec<u32>,
}

impl GraphNode {
    /// Estimate minus truth: `(dx, dy, dθ)` in the world frame.
    pub fn error(&self) -> [f64; 3] {
        pose_error(&self.pose, &self.truth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosureRecord {
    /// Node that triggered the closure.
    pub from: usize,
    /// Matched (older) node.
    pub to: usize,
    pub t: f64,
}

/// One per-step entry of the estimated and true trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub estimate: Pose2,
    pub truth: Pose2,
}

/// What a closure did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rectification {
    pub closure: ClosureRecord,
    /// Applied correction `(dx, dy, dθ)` on the current estimate.
    pub correction: [f64; 3],
    /// Scale applied to the nominal `ε`-contraction (1 unless that would raise ATE).
    pub scale: f64,
    pub ate_before: f64,
    pub ate_after: f64,
    /// The matched node belonged to a session that is now merged in.
    pub merged_session: bool,
}

struct BufferedScan {
    node: usize,
    scan: DepthScan,
}

fn pose_error(est: &Pose2, truth: &Pose2) -> [f64; 3] {
    [
        est.x - truth.x,
        est.y - truth.y,
        angle_diff(est.theta, truth.theta),
    ]
}

fn shifted(p: &Pose2, d: [f64; 3], w: f64) -> Pose2 {
    Pose2::new(
        p.x + w * d[0],
        p.y + w * d[1],
        wrap_angle(p.theta + w * d[2]),
    )
}

pub struct PoseGraph {
    pub config: SlamConfig,
    pub nodes: Vec<GraphNode>,
    /// Odometry links between consecutive nodes of a session.
    pub edges: Vec<(usize, usize)>,
    pub closures: Vec<ClosureRecord>,
    pub trajectory: Vec<TrajectorySample>,
    estimate: Pose2,
    session: u32,
    /// Session group id per session (merged sessions share a group).
    groups: Vec<u32>,
    last_node: Option<usize>,
    buffer: VecDeque<BufferedScan>,
    /// Per-session accumulation of scans evicted from the buffer.
    bases: Vec<Option<OccupancyGrid>>,
    /// Evicted before any base grid existed; folded in on the next rebuild.
    evicted: Vec<BufferedScan>,
}

impl PoseGraph {
    pub fn new(config: SlamConfig, start: Pose2) -> Self {
        Self {
            config,
            nodes: Vec::new(),
            edges: Vec::new(),
            closures: Vec::new(),
            trajectory: Vec::new(),
            estimate: start,
            session: 0,
            groups: vec![0],
            last_node: None,
            buffer: VecDeque::new(),
            bases: vec![None],
            evicted: Vec::new(),
        }
    }

    pub fn estimate(&self) -> Pose2 {
        self.estimate
    }

    pub fn session(&self) -> u32 {
        self.session
    }

    pub fn latest_node(&self) -> Option<&GraphNode> {
        self.last_node.map(|i| &self.nodes[i])
    }

    /// Composes the estimate with a body-frame odometry reading.
    pub fn integrate_odometry(&mut self, delta: &Pose2) -> Pose2 {
        self.estimate = self.estimate.compose(delta);
        self.estimate
    }

    /// Records the trajectory sample for time `t` and adds a keyframe node
    /// when the estimate has moved or turned enough since the last one.
    /// Returns the new node id, if any.
    pub fn observe(
        &mut self,
        t: f64,
        truth: Pose2,
        features: &[u32],
        scan: &DepthScan,
    ) -> Option<usize> {
        self.trajectory.push(TrajectorySample {
            t,
            estimate: self.estimate,
            truth,
        });
        let due = match self.last_node {
            None => true,
            Some(i) => {
                let last = &self.nodes[i].pose;
                last.position().distance(&self.estimate.position())
                    >= self.config.node_linear_spacing
                    || angle_diff(self.estimate.theta, last.theta).abs()
                        >= self.config.node_angular_spacing
            }
        };
        if !due {
            return None;
        }
        let id = self.nodes.len();
        let mut features = features.to_vec();
        features.sort_unstable();
        features.dedup();
        self.nodes.push(GraphNode {
            id,
            session: self.session,
            t,
            pose: self.estimate,
            truth,
            features,
        });
        if let Some(prev) = self.last_node {
            self.edges.push((prev, id));
        }
        self.last_node = Some(id);
        self.buffer.push_back(BufferedScan {
            node: id,
            scan: scan.clone(),
        });
        while self.buffer.len() > self.config.scan_buffer {
            let old = self.buffer.pop_front().expect("nonempty");
            let node = &self.nodes[old.node];
            match self.bases[node.session as usize].as_mut() {
                Some(base) => {
                    let _ = base.update_from_scan(&node.pose, &old.scan);
                }
                None => self.evicted.push(old),
            }
        }
        Some(id)
    }

    /// Oldest node at least `recency_window` old that shares `n_match`
    /// features with `features`.
    pub fn detect_loop_closure(&self, t: f64, features: &[u32]) -> Option<usize> {
        if features.len() < self.config.n_match {
            return None;
        }
        let current: BTreeSet<u32> = features.iter().copied().collect();
        self.nodes
            .iter()
            .filter(|n| t - n.t >= self.config.recency_window)
            .find(|n| {
                n.features.iter().filter(|f| current.contains(f)).count() >= self.config.n_match
            })
            .map(|n| n.id)
    }

    /// RMSE of estimated vs true positions over the recorded trajectory.
    pub fn ate_rmse(&self) -> f64 {
        if self.trajectory.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .trajectory
            .iter()
            .map(|s| {
                let d = s.estimate.position().distance(&s.truth.position());
                d * d
            })
            .sum();
        (sum / self.trajectory.len() as f64).sqrt()
    }

    /// Contracts the current error by `ε` toward the matched node's error.
    /// Samples and nodes recorded after the matched node are corrected by
    /// linear interpolation in time. The contraction is scaled down only if
    /// the full step would raise the trajectory RMSE.
    pub fn apply_closure(&mut self, matched: usize, t: f64) -> Result<Rectification> {
        let m = self
            .nodes
            .get(matched)
            .ok_or(Error::UnknownNode(matched))?
            .clone();
        let current = self.trajectory.last().copied().unwrap_or(TrajectorySample {
            t,
            estimate: self.estimate,
            truth: self.estimate,
        });
        let e_c = pose_error(&self.estimate, &current.truth);
        let e_m = m.error();
        let eps = self.config.epsilon;
        let delta = [
            -eps * (e_c[0] - e_m[0]),
            -eps * (e_c[1] - e_m[1]),
            -eps * angle_diff(e_c[2], e_m[2]),
        ];
        // The newest sample is the current pose and takes the full correction.
        let span = (current.t - m.t).max(1e-9);
        let weight = |ts: f64| ((ts - m.t) / span).clamp(0.0, 1.0);

        // RMSE after a scaled step is a quadratic in the scale; any scale in
        // [0, 2λ*] does not increase it.
        let (mut a, mut b) = (0.0, 0.0);
        for s in &self.trajectory {
            let w = weight(s.t);
            let ex = s.estimate.x - s.truth.x;
            let ey = s.estimate.y - s.truth.y;
            a += w * w * (delta[0] * delta[0] + delta[1] * delta[1]);
            b += w * (ex * delta[0] + ey * delta[1]);
        }
        let scale = if a <= 0.0 {
            1.0
        } else {
            (-2.0 * b / a).clamp(0.0, 1.0)
        };
        let ate_before = self.ate_rmse();
        let d = [scale * delta[0], scale * delta[1], scale * delta[2]];
        for s in self.trajectory.iter_mut() {
            let w = weight(s.t);
            if w > 0.0 {
                s.estimate = shifted(&s.estimate, d, w);
            }
        }
        for n in self.nodes.iter_mut() {
            let w = weight(n.t);
            if w > 0.0 && n.id != matched {
                n.pose = shifted(&n.pose, d, w);
            }
        }
        self.estimate = shifted(&self.estimate, d, 1.0);
        let ate_after = self.ate_rmse();

        let own = self.groups[self.session as usize];
        let other = self.groups[m.session as usize];
        let merged_session = own != other;
        if merged_session {
            for g in self.groups.iter_mut() {
                if *g == other {
                    *g = own;
                }
            }
        }
        let closure = ClosureRecord {
            from: self.last_node.unwrap_or(matched),
            to: matched,
            t,
        };
        self.closures.push(closure);
        Ok(Rectification {
            closure,
            correction: d,
            scale,
            ate_before,
            ate_after,
            merged_session,
        })
    }

    /// Starts a new mapping session anchored at the current estimate.
    pub fn new_session(&mut self) {
        self.session += 1;
        self.groups.push(self.session);
        self.bases.push(None);
        self.last_node = None;
    }

    fn active(&self, session: u32) -> bool {
        self.groups[session as usize] == self.groups[self.session as usize]
    }

    /// Rebuilds `grid` from the evicted-scan bases and the buffered keyframe
    /// scans of every session merged with the current one, each scan placed
    /// at its node's corrected pose.
    pub fn rebuild(&mut self, grid: &mut OccupancyGrid) {
        for b in self.bases.iter_mut() {
            if b.is_none() {
                let mut g = grid.clone();
                g.clear();
                *b = Some(g);
            }
        }
        for old in std::mem::take(&mut self.evicted) {
            let node = &self.nodes[old.node];
            if let Some(base) = self.bases[node.session as usize].as_mut() {
                let _ = base.update_from_scan(&node.pose, &old.scan);
            }
        }
        grid.clear();
        for (s, base) in self.bases.iter().enumerate() {
            if self.active(s as u32) {
                if let Some(base) = base {
                    grid.merge_from(base);
                }
            }
        }
        for b in &self.buffer {
            let node = &self.nodes[b.node];
            if self.active(node.session) {
                let _ = grid.update_from_scan(&node.pose, &b.scan);
            }
        }
        grid.resync_entropy();
    }

    /// Line-oriented dump: sessions, nodes, edges and closures.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# node id session t x y theta features...");
        for n in &self.nodes {
            let _ = write!(
                s,
                "node {} {} {:.3} {:.6} {:.6} {:.6}",
                n.id, n.session, n.t, n.pose.x, n.pose.y, n.pose.theta
            );
            for f in &n.features {
                let _ = write!(s, " {f}");
            }
            s.push('\n');
        }
        for (a, b) in &self.edges {
            let _ = writeln!(s, "edge {a} {b}");
        }
        for c in &self.closures {
            let _ = writeln!(s, "closure {} {} {:.3}", c.from, c.to, c.t);
        }
        for (i, g) in self.groups.iter().enumerate() {
            let _ = writeln!(s, "session {i} group {g}");
        }
        s
    }
}

/// Position error of the current estimate, meters.
pub fn position_error(estimate: &Pose2, truth: &Pose2) -> f64 {
    estimate.position().distance(&Point2::new(truth.x, truth.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world_sim::{odometry_reading, OdometryNoise};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_scan() -> DepthScan {
        DepthScan {
            angles: vec![],
            ranges: vec![],
            max_range: 4.0,
        }
    }

    /// Drives a square loop of side `side`, returning the graph.
    fn drive(noise: &OdometryNoise, seed: u64, steps: usize, step: Pose2) -> PoseGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PoseGraph::new(SlamConfig::default(), Pose2::new(0.0, 0.0, 0.0));
        let mut truth = Pose2::new(0.0, 0.0, 0.0);
        for k in 0..steps {
            let reading = odometry_reading(&step, noise, &mut rng);
            truth = truth.compose(&step);
            g.integrate_odometry(&reading);
            g.observe(k as f64 * 0.1, truth, &[], &empty_scan());
        }
        g
    }

    #[test]
    fn zero_noise_tracks_truth() {
        let g = drive(&OdometryNoise::zero(), 1, 500, Pose2::new(0.05, 0.0, 0.02));
        for s in &g.trajectory {
            assert!(position_error(&s.estimate, &s.truth) < 1e-9);
            assert!(angle_diff(s.estimate.theta, s.truth.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_bias_gives_linear_drift() {
        let b = 0.02;
        let noise = OdometryNoise {
            trans_bias: b,
            ..OdometryNoise::zero()
        };
        let g = drive(&noise, 1, 200, Pose2::new(0.05, 0.0, 0.0));
        let last = g.trajectory.last().unwrap();
        let l = last.truth.x;
        assert!((position_error(&last.estimate, &last.truth) - b * l).abs() < 1e-9);
    }

    #[test]
    fn seeded_runs_repeat() {
        let step = Pose2::new(0.05, 0.01, 0.03);
        let a = drive(&OdometryNoise::default(), 9, 300, step);
        let b = drive(&OdometryNoise::default(), 9, 300, step);
        assert_eq!(a.trajectory, b.trajectory);
        let c = drive(&OdometryNoise::default(), 10, 300, step);
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn nodes_respect_spacing() {
        let g = drive(&OdometryNoise::zero(), 1, 100, Pose2::new(0.05, 0.0, 0.0));
        for w in g.nodes.windows(2) {
            assert!((w[1].pose.x - w[0].pose.x) >= 0.3 - 1e-9);
        }
        assert_eq!(g.edges.len(), g.nodes.len() - 1);
    }

    fn ids(range: std::ops::Range<u32>) -> Vec<u32> {
        range.collect()
    }

    #[test]
    fn closure_detection_rules() {
        let mut g = PoseGraph::new(SlamConfig::default(), Pose2::new(0.0, 0.0, 0.0));
        g.observe(0.0, Pose2::new(0.0, 0.0, 0.0), &ids(0..10), &empty_scan());
        // Same view after a long loop.
        assert_eq!(g.detect_loop_closure(30.0, &ids(0..10)), Some(0));
        assert_eq!(g.detect_loop_closure(30.0, &ids(2..10)), Some(0));
        assert_eq!(g.detect_loop_closure(30.0, &ids(3..10)), None);
        // Opposite heading sees a disjoint wedge.
        assert_eq!(g.detect_loop_closure(30.0, &ids(20..30)), None);
        // Too recent.
        assert_eq!(g.detect_loop_closure(9.9, &ids(0..10)), None);
        // The oldest eligible node wins.
        g.integrate_odometry(&Pose2::new(1.0, 0.0, 0.0));
        g.observe(1.0, Pose2::new(1.0, 0.0, 0.0), &ids(0..10), &empty_scan());
        assert_eq!(g.detect_loop_closure(30.0, &ids(0..10)), Some(0));
    }

    fn drifted_graph(err: f64) -> PoseGraph {
        // Error grows linearly from 0 at the matched node to `err` now.
        let mut g = PoseGraph::new(SlamConfig::default(), Pose2::new(0.0, 0.0, 0.0));
        let n = 50;
        for k in 0..=n {
            let f = k as f64 / n as f64;
            let truth = Pose2::new(f * 5.0, 0.0, 0.0);
            g.estimate = Pose2::new(truth.x, err * f, 0.0);
            g.observe(k as f64 * 0.5, truth, &[], &empty_scan());
        }
        g
    }

    #[test]
    fn contraction_arithmetic() {
        for (eps, expect) in [(0.5, 0.1), (1.0, 0.0), (0.8, 0.04)] {
            let mut g = drifted_graph(0.2);
            g.config.epsilon = eps;
            let r = g.apply_closure(0, 25.0).unwrap();
            assert!((g.trajectory.last().unwrap().estimate.y - expect).abs() < 1e-12);
            assert_eq!(r.scale, 1.0);
            assert!(
                (g.estimate().y - expect).abs() < 1e-12,
                "{eps}: {}",
                g.estimate().y
            );
            assert!(r.ate_after <= r.ate_before);
            // Interpolated: the midpoint sample lost half the correction.
            let mid = &g.trajectory[25];
            assert!((mid.estimate.y - (0.1 - 0.1 * eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn rebuild_uses_corrected_keyframes() {
        let mut grid = OccupancyGrid::new(40, 40, 0.1, Point2::new(0.0, 0.0));
        let scan = DepthScan {
            angles: vec![0.0],
            ranges: vec![Some(1.0)],
            max_range: 4.0,
        };
        let mut g = PoseGraph::new(SlamConfig::default(), Pose2::new(1.05, 2.05, 0.0));
        g.observe(0.0, Pose2::new(1.05, 2.05, 0.0), &[], &scan);
        g.integrate_odometry(&Pose2::new(0.0, 0.5, 0.0));
        g.observe(20.0, Pose2::new(1.05, 2.35, 0.0), &[], &scan);
        g.config.epsilon = 1.0;
        g.apply_closure(0, 20.0).unwrap();
        g.rebuild(&mut grid);
        let hit = grid.cell_of(Point2::new(2.05, 2.35)).unwrap();
        assert!(grid.probability(hit) > 0.5);
        assert!((grid.map_entropy().total - grid.recompute_entropy_total()).abs() < 1e-9);
    }

    #[test]
    fn sessions_merge_on_cross_closure() {
        let mut grid = OccupancyGrid::new(40, 40, 0.1, Point2::new(0.0, 0.0));
        let scan = DepthScan {
            angles: vec![0.0],
            ranges: vec![Some(1.0)],
            max_range: 4.0,
        };
        let start = Pose2::new(1.05, 1.05, 0.0);
        let mut g = PoseGraph::new(SlamConfig::default(), start);
        g.observe(0.0, start, &ids(0..10), &scan);
        g.new_session();
        let p = Pose2::new(1.05, 3.05, 0.0);
        g.integrate_odometry(&start.between(&p));
        g.observe(15.0, p, &ids(50..60), &scan);
        g.rebuild(&mut grid);
        let old_hit = grid.cell_of(Point2::new(2.05, 1.05)).unwrap();
        assert!(!grid.is_explored(old_hit));
        let m = g.detect_loop_closure(16.0, &ids(0..10)).unwrap();
        assert!(g.apply_closure(m, 16.0).unwrap().merged_session);
        g.rebuild(&mut grid);
        assert!(grid.is_explored(old_hit));
        assert!(g.dump().contains("session 1 group 1"));
        assert!(g.dump().contains("session 0 group 1"));
    }

    #[test]
    fn evicted_scans_survive_in_base() {
        let mut grid = OccupancyGrid::new(40, 40, 0.1, Point2::new(0.0, 0.0));
        let scan = DepthScan {
            angles: vec![0.0],
            ranges: vec![Some(1.0)],
            max_range: 4.0,
        };
        let cfg = SlamConfig {
            scan_buffer: 2,
            ..SlamConfig::default()
        };
        let mut g = PoseGraph::new(cfg, Pose2::new(0.55, 0.55, 0.0));
        for k in 0..5 {
            let p = Pose2::new(0.55, 0.55 + 0.5 * k as f64, 0.0);
            g.estimate = p;
            g.observe(k as f64, p, &[], &scan);
        }
        g.rebuild(&mut grid);
        for k in 0..5 {
            let hit = grid
                .cell_of(Point2::new(1.55, 0.55 + 0.5 * k as f64))
                .unwrap();
            assert!(grid.probability(hit) > 0.5, "{k}");
        }
    }

    proptest! {
        #[test]
        fn closure_never_raises_ate(seed in 0u64..500, eps in 0.0f64..1.0, pick in 0usize..30) {
            let mut g = drive(&OdometryNoise::default(), seed, 400, Pose2::new(0.04, 0.0, 0.015));
            g.config.epsilon = eps;
            let m = pick.min(g.nodes.len() - 1);
            let r = g.apply_closure(m, 40.0).unwrap();
            prop_assert!(r.ate_after <= r.ate_before + 1e-12);
        }
    }
}
