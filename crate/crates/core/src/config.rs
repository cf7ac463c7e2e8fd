//! Flat `key = value` trial configuration (TOML syntax, no tables).
//!
//! Every key is optional; missing keys take the defaults below. The full
//! resolved configuration is written next to each trial's outputs as
//! `config.toml`. See `docs/config.md` for the key reference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::NmpcConfig;
use crate::error::{Error, Result};
use crate::frontier::FrontierConfig;
use crate::grid_map::LogOddsParams;
use crate::planner::PlannerConfig;
use crate::slam_proxy::SlamConfig;
use crate::utility::{UtilityKind, UtilityMode, ViewConfig};
use crate::world_sim::{OdometryNoise, RobotLimits, SensorConfig, WheelGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    /// Control and simulation step (s).
    pub dt: f64,

    pub robot_radius: f64,
    pub u_max_x: f64,
    pub u_max_y: f64,
    pub u_max_theta: f64,
    pub v_tr_max: f64,
    /// Minimum center-to-obstacle clearance (m).
    pub d_min: f64,
    pub wheel_radius: f64,
    pub base_radius: f64,

    pub sensor_fov_deg: f64,
    pub sensor_range: f64,
    pub sensor_rays: usize,

    pub logodds_hit: f64,
    pub logodds_miss: f64,
    pub logodds_clamp: f64,

    pub noise_trans_per_m: f64,
    pub noise_trans_per_rad: f64,
    pub noise_rot_per_m: f64,
    pub noise_rot_per_rad: f64,
    pub noise_trans_floor: f64,
    pub noise_rot_floor: f64,
    pub noise_trans_bias: f64,
    pub noise_rot_bias: f64,

    pub node_linear_spacing: f64,
    pub node_angular_spacing: f64,
    pub closure_min_shared: usize,
    pub closure_recency_window: f64,
    pub closure_epsilon: f64,
    pub scan_buffer: usize,

    pub kappa1: f64,
    pub p_thr: f64,
    pub d_l: f64,
    pub d_h: f64,
    /// Range of the utility visibility disc (m).
    pub view_range: f64,
    pub n_headings: usize,
    pub rho: f64,

    pub unknown_cost: f64,
    pub waypoint_spacing: f64,
    pub goal_merge_cells: f64,

    pub horizon: usize,
    pub q_pos: f64,
    pub q_theta: f64,
    pub r: f64,
    pub q_obs: f64,
    pub max_obstacles: usize,
    pub max_iterations: usize,
    pub clearance_penalty: f64,
    pub infeasible_patience: usize,
    pub kappa2: f64,
    pub kappa3: f64,
    pub reach_pos_tol: f64,
    pub reach_heading_tol: f64,
    /// Estimated-map obstacles considered by the controller (m).
    pub obstacle_map_range: f64,
    /// Short-range proximity sensing radius (m).
    pub proximity_range: f64,
    /// Obstacle points are thinned to one per bin of this size (m).
    pub obstacle_bin: f64,

    pub stuck_eps: f64,
    pub stuck_window: f64,
    pub waypoint_timeout: f64,

    pub metrics_bin: f64,
    pub coverage_target: f64,
    /// Duration multiplier of the long-run method.
    pub long_duration_factor: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        let noise = OdometryNoise::default();
        let slam = SlamConfig::default();
        let nmpc = NmpcConfig::default();
        Self {
            dt: 0.1,
            robot_radius: 0.2,
            u_max_x: 1.0,
            u_max_y: 1.0,
            u_max_theta: 1.0,
            v_tr_max: 1.0,
            d_min: 0.3,
            wheel_radius: 0.04,
            base_radius: 0.175,
            sensor_fov_deg: 69.4,
            sensor_range: 4.0,
            sensor_rays: 87,
            logodds_hit: 0.85,
            logodds_miss: -0.4,
            logodds_clamp: 3.5,
            noise_trans_per_m: noise.trans_per_m,
            noise_trans_per_rad: noise.trans_per_rad,
            noise_rot_per_m: noise.rot_per_m,
            noise_rot_per_rad: noise.rot_per_rad,
            noise_trans_floor: noise.trans_floor,
            noise_rot_floor: noise.rot_floor,
            noise_trans_bias: noise.trans_bias,
            noise_rot_bias: noise.rot_bias,
            node_linear_spacing: slam.node_linear_spacing,
            node_angular_spacing: slam.node_angular_spacing,
            closure_min_shared: slam.n_match,
            closure_recency_window: slam.recency_window,
            closure_epsilon: slam.epsilon,
            scan_buffer: slam.scan_buffer,
            kappa1: 1.0,
            p_thr: 0.7,
            d_l: 0.2,
            d_h: 0.8,
            view_range: 4.0,
            n_headings: 16,
            rho: 0.25,
            unknown_cost: 1.2,
            waypoint_spacing: 1.0,
            goal_merge_cells: 2.0,
            horizon: nmpc.horizon,
            q_pos: nmpc.q_pos,
            q_theta: nmpc.q_theta,
            r: nmpc.r,
            q_obs: nmpc.q_obs,
            max_obstacles: nmpc.max_obstacles,
            max_iterations: nmpc.max_iterations,
            clearance_penalty: nmpc.clearance_penalty,
            infeasible_patience: nmpc.infeasible_patience,
            kappa2: -6.0,
            kappa3: -0.5,
            reach_pos_tol: 0.15,
            reach_heading_tol: 0.15,
            obstacle_map_range: 2.0,
            proximity_range: 1.2,
            obstacle_bin: 0.3,
            stuck_eps: 0.05,
            stuck_window: 5.0,
            waypoint_timeout: 30.0,
            metrics_bin: 2.0,
            coverage_target: 0.85,
            long_duration_factor: 1.25,
        }
    }
}

impl TrialConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("robot_radius", self.robot_radius),
            ("sensor_fov_deg", self.sensor_fov_deg),
            ("sensor_range", self.sensor_range),
            ("view_range", self.view_range),
            ("waypoint_spacing", self.waypoint_spacing),
            ("reach_pos_tol", self.reach_pos_tol),
            ("reach_heading_tol", self.reach_heading_tol),
            ("metrics_bin", self.metrics_bin),
            ("stuck_window", self.stuck_window),
            ("waypoint_timeout", self.waypoint_timeout),
            ("obstacle_bin", self.obstacle_bin),
            ("wheel_radius", self.wheel_radius),
            ("base_radius", self.base_radius),
            ("long_duration_factor", self.long_duration_factor),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive (got {v})")));
            }
        }
        if self.sensor_rays == 0 || self.n_headings == 0 {
            return Err(Error::Config(
                "sensor_rays and n_headings must be at least 1".into(),
            ));
        }
        if !(self.kappa2 < 0.0 && self.kappa3 < 0.0) {
            return Err(Error::Config("kappa2 and kappa3 must be negative".into()));
        }
        if !(self.logodds_hit > 0.0 && self.logodds_miss < 0.0 && self.logodds_clamp > 0.0) {
            return Err(Error::Config(
                "log-odds needs hit > 0, miss < 0, clamp > 0".into(),
            ));
        }
        if !(self.unknown_cost >= 1.0) {
            return Err(Error::Config("unknown_cost must be at least 1".into()));
        }
        if !(self.coverage_target > 0.0 && self.coverage_target <= 1.0) {
            return Err(Error::Config("coverage_target must lie in (0, 1]".into()));
        }
        let noise = self.noise();
        let noise_terms = [
            noise.trans_per_m,
            noise.trans_per_rad,
            noise.rot_per_m,
            noise.rot_per_rad,
            noise.trans_floor,
            noise.rot_floor,
        ];
        if noise_terms.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(
                "odometry noise terms must be nonnegative".into(),
            ));
        }
        self.utility(UtilityKind::U1).validate()?;
        self.slam().validate()?;
        self.nmpc().validate()?;
        Ok(())
    }

    pub fn limits(&self) -> RobotLimits {
        RobotLimits {
            u_max: [self.u_max_x, self.u_max_y, self.u_max_theta],
            v_tr_max: self.v_tr_max,
            d_min: self.d_min,
        }
    }

    pub fn wheels(&self) -> WheelGeometry {
        WheelGeometry {
            wheel_radius: self.wheel_radius,
            base_radius: self.base_radius,
            ..WheelGeometry::default()
        }
    }

    pub fn sensor(&self) -> SensorConfig {
        SensorConfig {
            fov: self.sensor_fov_deg.to_radians(),
            max_range: self.sensor_range,
            n_rays: self.sensor_rays,
        }
    }

    pub fn logodds(&self) -> LogOddsParams {
        LogOddsParams {
            hit: self.logodds_hit,
            miss: self.logodds_miss,
            clamp: self.logodds_clamp,
        }
    }

    pub fn noise(&self) -> OdometryNoise {
        OdometryNoise {
            trans_per_m: self.noise_trans_per_m,
            trans_per_rad: self.noise_trans_per_rad,
            rot_per_m: self.noise_rot_per_m,
            rot_per_rad: self.noise_rot_per_rad,
            trans_floor: self.noise_trans_floor,
            rot_floor: self.noise_rot_floor,
            trans_bias: self.noise_trans_bias,
            rot_bias: self.noise_rot_bias,
        }
    }

    pub fn slam(&self) -> SlamConfig {
        SlamConfig {
            node_linear_spacing: self.node_linear_spacing,
            node_angular_spacing: self.node_angular_spacing,
            n_match: self.closure_min_shared,
            recency_window: self.closure_recency_window,
            epsilon: self.closure_epsilon,
            scan_buffer: self.scan_buffer,
        }
    }

    pub fn utility(&self, kind: UtilityKind) -> UtilityMode {
        UtilityMode {
            kind,
            kappa1: self.kappa1,
            p_thr: self.p_thr,
            d_l: self.d_l,
            d_h: self.d_h,
        }
    }

    pub fn view(&self) -> ViewConfig {
        ViewConfig {
            fov: self.sensor_fov_deg.to_radians(),
            d_thr: self.view_range,
            n_headings: self.n_headings,
            rho: self.rho,
        }
    }

    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            robot_radius: self.robot_radius,
            unknown_cost: self.unknown_cost,
            waypoint_spacing: self.waypoint_spacing,
        }
    }

    pub fn frontier(&self) -> FrontierConfig {
        FrontierConfig {
            robot_radius: self.robot_radius,
            goal_merge_cells: self.goal_merge_cells,
        }
    }

    pub fn nmpc(&self) -> NmpcConfig {
        NmpcConfig {
            horizon: self.horizon,
            dt: self.dt,
            q_pos: self.q_pos,
            q_theta: self.q_theta,
            r: self.r,
            q_obs: self.q_obs,
            max_obstacles: self.max_obstacles,
            max_iterations: self.max_iterations,
            limits: self.limits(),
            clearance_penalty: self.clearance_penalty,
            infeasible_patience: self.infeasible_patience,
        }
    }
}
