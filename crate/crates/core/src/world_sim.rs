//! Ground-truth environment, omnidirectional kinematics and simulated sensing.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, walk_cells, wrap_angle, Cell, Point2, Pose2};
use crate::grid_map::{CellClass, ClassGrid};

/// A depth scan: per-ray bearing relative to the sensor heading and the
/// first-hit distance (`None` when nothing is hit within `max_range`).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthScan {
    pub angles: Vec<f64>,
    pub ranges: Vec<Option<f64>>,
    pub max_range: f64,
}

impl DepthScan {
    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn rays(&self) -> impl Iterator<Item = (f64, Option<f64>)> + '_ {
        self.angles.iter().copied().zip(self.ranges.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Horizontal field of view, radians.
    pub fov: f64,
    pub max_range: f64,
    pub n_rays: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            fov: 69.4_f64.to_radians(),
            max_range: 4.0,
            n_rays: 87,
        }
    }
}

/// Velocity and clearance bounds of the platform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotLimits {
    /// Per-axis bounds on `(u_x, u_y, u_theta)`.
    pub u_max: [f64; 3],
    pub v_tr_max: f64,
    pub d_min: f64,
}

impl Default for RobotLimits {
    fn default() -> Self {
        Self {
            u_max: [1.0, 1.0, 1.0],
            v_tr_max: 1.0,
            d_min: 0.3,
        }
    }
}

impl RobotLimits {
    pub fn validate(&self) -> Result<()> {
        if self.u_max.iter().any(|v| *v <= 0.0) || self.v_tr_max <= 0.0 || self.d_min <= 0.0 {
            return Err(Error::Config(
                "robot limits must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Three-wheel omnidrive geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelGeometry {
    pub wheel_radius: f64,
    pub base_radius: f64,
    pub wheel_angles: [f64; 3],
}

impl Default for WheelGeometry {
    fn default() -> Self {
        Self {
            wheel_radius: 0.04,
            base_radius: 0.175,
            wheel_angles: [90f64.to_radians(), 210f64.to_radians(), 330f64.to_radians()],
        }
    }
}

/// Sum of absolute wheel angular displacements (rad) for body velocity `u` held over `dt`.
pub fn wheel_rotation_increment(u: [f64; 3], dt: f64, geometry: &WheelGeometry) -> f64 {
    geometry
        .wheel_angles
        .iter()
        .map(|a| {
            let speed = (-a.sin() * u[0] + a.cos() * u[1] + geometry.base_radius * u[2])
                / geometry.wheel_radius;
            speed.abs() * dt
        })
        .sum()
}

/// Integrates body-frame velocity `u = (u_x, u_y, u_theta)` over `dt` with the
/// midpoint rule. The heading is wrapped into `(-π, π]`.
pub fn step_kinematics(pose: &Pose2, u: [f64; 3], dt: f64) -> Pose2 {
    let mid = pose.theta + 0.5 * u[2] * dt;
    let (s, c) = mid.sin_cos();
    Pose2::new(
        pose.x + dt * (u[0] * c - u[1] * s),
        pose.y + dt * (u[0] * s + u[1] * c),
        wrap_angle(pose.theta + u[2] * dt),
    )
}

/// Odometry noise: per-axis Gaussian noise whose standard deviation grows
/// with the commanded motion, plus multiplicative scale biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryNoise {
    /// σ of translational noise per meter travelled.
    pub trans_per_m: f64,
    /// σ of translational noise per radian rotated.
    pub trans_per_rad: f64,
    /// σ of rotational noise per meter travelled.
    pub rot_per_m: f64,
    /// σ of rotational noise per radian rotated.
    pub rot_per_rad: f64,
    pub trans_floor: f64,
    pub rot_floor: f64,
    /// Fractional scale error on translation.
    pub trans_bias: f64,
    /// Fractional scale error on rotation.
    pub rot_bias: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            trans_per_m: 0.03,
            trans_per_rad: 0.005,
            rot_per_m: 0.01,
            rot_per_rad: 0.03,
            trans_floor: 1e-4,
            rot_floor: 1e-4,
            trans_bias: 0.01,
            rot_bias: 0.01,
        }
    }
}

impl OdometryNoise {
    pub fn zero() -> Self {
        Self {
            trans_per_m: 0.0,
            trans_per_rad: 0.0,
            rot_per_m: 0.0,
            rot_per_rad: 0.0,
            trans_floor: 0.0,
            rot_floor: 0.0,
            trans_bias: 0.0,
            rot_bias: 0.0,
        }
    }
}

/// Perturbs a true body-frame displacement. Always draws exactly three
/// normal samples so the random stream does not depend on the parameters.
pub fn odometry_reading(true_delta: &Pose2, noise: &OdometryNoise, rng: &mut impl Rng) -> Pose2 {
    let trans = true_delta.x.hypot(true_delta.y);
    let rot = true_delta.theta.abs();
    let sigma_t = noise.trans_per_m * trans + noise.trans_per_rad * rot + noise.trans_floor;
    let sigma_r = noise.rot_per_m * trans + noise.rot_per_rad * rot + noise.rot_floor;
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    let nt: f64 = rng.sample(StandardNormal);
    Pose2::new(
        true_delta.x * (1.0 + noise.trans_bias) + sigma_t * nx,
        true_delta.y * (1.0 + noise.trans_bias) + sigma_t * ny,
        true_delta.theta * (1.0 + noise.rot_bias) + sigma_r * nt,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: u32,
    pub pos: Point2,
}

/// How visual features are scattered along walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturePlacement {
    pub seed: u64,
    /// Features sampled per wall piece.
    pub per_segment: usize,
    /// Wall pieces are straight boundary runs cut to at most this length (m).
    pub segment_len: f64,
    /// Offset from the wall surface into free space (m).
    pub offset: f64,
}

impl Default for FeaturePlacement {
    fn default() -> Self {
        Self {
            seed: 7,
            per_segment: 4,
            segment_len: 1.0,
            offset: 0.1,
        }
    }
}

/// Ground-truth world: binary occupancy, hidden mask, features and the true robot pose.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub name: String,
    width: usize,
    height: usize,
    resolution: f64,
    origin: Point2,
    occupied: Vec<bool>,
    hidden: Vec<bool>,
    pub features: Vec<Feature>,
    pub start: Pose2,
    pub true_pose: Pose2,
}

impl WorldModel {
    /// Builds a world from an occupancy raster. Hidden cells are the union of
    /// `extra_hidden`, occupied cells with no free 4-neighbour and free cells
    /// not 4-connected to the start cell.
    pub fn new(
        name: impl Into<String>,
        width: usize,
        height: usize,
        resolution: f64,
        origin: Point2,
        occupied: Vec<bool>,
        extra_hidden: Option<Vec<bool>>,
        start: Pose2,
    ) -> Result<Self> {
        if occupied.len() != width * height {
            return Err(Error::Config("occupancy raster size mismatch".into()));
        }
        let mut w = Self {
            name: name.into(),
            width,
            height,
            resolution,
            origin,
            hidden: vec![false; width * height],
            occupied,
            features: Vec::new(),
            start,
            true_pose: start,
        };
        let sc = w
            .cell_of(start.position())
            .ok_or(Error::PoseOutsideGrid(start))?;
        if w.is_occupied(sc) {
            return Err(Error::Collision(start));
        }
        w.hidden = w.compute_hidden(sc);
        if let Some(extra) = extra_hidden {
            for (h, e) in w.hidden.iter_mut().zip(extra) {
                *h |= e;
            }
        }
        Ok(w)
    }

    fn compute_hidden(&self, start: Cell) -> Vec<bool> {
        let n = self.width * self.height;
        let mut reach = vec![false; n];
        let mut stack = vec![start];
        reach[self.index(start)] = true;
        while let Some(c) = stack.pop() {
            for nb in four_neighbours(c) {
                if self.in_bounds(nb) && !self.is_occupied(nb) {
                    let i = self.index(nb);
                    if !reach[i] {
                        reach[i] = true;
                        stack.push(nb);
                    }
                }
            }
        }
        (0..n)
            .map(|i| {
                let c = Cell::new((i % self.width) as i32, (i / self.width) as i32);
                if self.occupied[i] {
                    !four_neighbours(c)
                        .into_iter()
                        .any(|nb| self.in_bounds(nb) && reach[self.index(nb)])
                } else {
                    !reach[i]
                }
            })
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }

    #[inline]
    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    #[inline]
    fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    #[inline]
    pub fn cell_of_unchecked(&self, p: Point2) -> Cell {
        Cell::new(
            ((p.x - self.origin.x) / self.resolution).floor() as i32,
            ((p.y - self.origin.y) / self.resolution).floor() as i32,
        )
    }

    pub fn cell_of(&self, p: Point2) -> Option<Cell> {
        let c = self.cell_of_unchecked(p);
        self.in_bounds(c).then_some(c)
    }

    pub fn cell_center(&self, c: Cell) -> Point2 {
        Point2::new(
            self.origin.x + (c.x as f64 + 0.5) * self.resolution,
            self.origin.y + (c.y as f64 + 0.5) * self.resolution,
        )
    }

    /// Out-of-bounds cells count as occupied.
    #[inline]
    pub fn is_occupied(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.occupied[self.index(c)]
    }

    pub fn is_hidden(&self, c: Cell) -> bool {
        self.in_bounds(c) && self.hidden[self.index(c)]
    }

    pub fn occupied_raster(&self) -> &[bool] {
        &self.occupied
    }

    pub fn hidden_raster(&self) -> &[bool] {
        &self.hidden
    }

    pub fn is_free_point(&self, p: Point2) -> bool {
        !self.is_occupied(self.cell_of_unchecked(p))
    }

    /// Ground truth as a class grid (free / occupied, hidden cells as `None`).
    pub fn class_grid(&self) -> ClassGrid {
        let mut g = ClassGrid::new(self.width, self.height, self.resolution, None);
        for i in 0..self.occupied.len() {
            g.classes[i] = if self.hidden[i] {
                None
            } else if self.occupied[i] {
                Some(CellClass::Occupied)
            } else {
                Some(CellClass::Free)
            };
        }
        g
    }

    /// Advances the true pose; fails if it ends in an occupied cell.
    pub fn advance(&mut self, u: [f64; 3], dt: f64) -> Result<Pose2> {
        let next = step_kinematics(&self.true_pose, u, dt);
        if !self.is_free_point(next.position()) {
            return Err(Error::Collision(next));
        }
        self.true_pose = next;
        Ok(next)
    }

    /// Distance along a ray to the entry of the first occupied cell.
    pub fn cast_ray(&self, from: Point2, angle: f64, max_range: f64) -> Option<f64> {
        let (dy, dx) = angle.sin_cos();
        let res = self.resolution;
        let mut cell = self.cell_of_unchecked(from);
        let step_x = if dx > 0.0 { 1 } else { -1 };
        let step_y = if dy > 0.0 { 1 } else { -1 };
        let next_boundary =
            |c: i32, step: i32, o: f64| o + (c + if step > 0 { 1 } else { 0 }) as f64 * res;
        let mut t_max_x = if dx.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (next_boundary(cell.x, step_x, self.origin.x) - from.x) / dx
        };
        let mut t_max_y = if dy.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (next_boundary(cell.y, step_y, self.origin.y) - from.y) / dy
        };
        let t_dx = if dx.abs() < 1e-15 {
            f64::INFINITY
        } else {
            res / dx.abs()
        };
        let t_dy = if dy.abs() < 1e-15 {
            f64::INFINITY
        } else {
            res / dy.abs()
        };
        loop {
            let t_entry;
            if t_max_x < t_max_y {
                t_entry = t_max_x;
                t_max_x += t_dx;
                cell.x += step_x;
            } else {
                t_entry = t_max_y;
                t_max_y += t_dy;
                cell.y += step_y;
            }
            if t_entry > max_range {
                return None;
            }
            if !self.in_bounds(cell) {
                return None;
            }
            if self.occupied[self.index(cell)] {
                return Some(t_entry);
            }
        }
    }

    /// Simulated depth scan from `pose`: `n_rays` rays evenly spanning the FOV.
    pub fn depth_scan(&self, pose: &Pose2, sensor: &SensorConfig) -> Result<DepthScan> {
        if !self.is_free_point(pose.position()) {
            return Err(Error::Collision(*pose));
        }
        let n = sensor.n_rays.max(2);
        let spacing = sensor.fov / (n - 1) as f64;
        let angles: Vec<f64> = (0..n)
            .map(|i| -sensor.fov / 2.0 + spacing * i as f64)
            .collect();
        let ranges = angles
            .iter()
            .map(|rel| self.cast_ray(pose.position(), pose.theta + rel, sensor.max_range))
            .collect();
        Ok(DepthScan {
            angles,
            ranges,
            max_range: sensor.max_range,
        })
    }

    /// Line of sight between two cells through ground-truth occupancy
    /// (endpoints excluded).
    pub fn line_of_sight(&self, from: Cell, to: Cell) -> bool {
        walk_cells(from, to)
            .filter(|c| *c != from && *c != to)
            .all(|c| !self.is_occupied(c))
    }

    /// Feature ids within range, inside the FOV wedge and not occluded.
    pub fn visible_features(&self, pose: &Pose2, fov: f64, max_range: f64) -> Vec<u32> {
        let p = pose.position();
        let Some(from) = self.cell_of(p) else {
            return Vec::new();
        };
        self.features
            .iter()
            .filter(|f| {
                let d = p.distance(&f.pos);
                if d > max_range {
                    return false;
                }
                if d > 1e-9 && angle_diff(p.bearing_to(&f.pos), pose.theta).abs() > fov / 2.0 + 1e-9
                {
                    return false;
                }
                let to = self.cell_of_unchecked(f.pos);
                self.line_of_sight(from, to)
            })
            .map(|f| f.id)
            .collect()
    }

    /// Scatters features along wall surfaces. Boundary faces (an occupied
    /// cell side facing free space) are grouped into straight runs, cut into
    /// pieces of at most `segment_len`, and each piece receives
    /// `per_segment` features at uniform positions, offset into free space.
    pub fn place_features(&mut self, placement: &FeaturePlacement) {
        let mut rng = ChaCha8Rng::seed_from_u64(placement.seed);
        // (direction, line) -> sorted positions along the line
        let mut runs: BTreeMap<(u8, i32), Vec<i32>> = BTreeMap::new();
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                let c = Cell::new(x, y);
                if !self.is_occupied(c) || self.is_hidden(c) {
                    continue;
                }
                let dirs = [(0u8, 1, 0), (1, -1, 0), (2, 0, 1), (3, 0, -1)];
                for (d, ox, oy) in dirs {
                    let nb = Cell::new(x + ox, y + oy);
                    if self.in_bounds(nb) && !self.is_occupied(nb) && !self.is_hidden(nb) {
                        let (line, along) = if ox != 0 { (x, y) } else { (y, x) };
                        runs.entry((d, line)).or_default().push(along);
                    }
                }
            }
        }
        let max_piece = ((placement.segment_len / self.resolution).round() as usize).max(1);
        let mut features = Vec::new();
        for ((dir, line), mut along) in runs {
            along.sort_unstable();
            let mut pieces: Vec<Vec<i32>> = Vec::new();
            for a in along {
                match pieces.last_mut() {
                    Some(p) if *p.last().unwrap() + 1 == a && p.len() < max_piece => p.push(a),
                    _ => pieces.push(vec![a]),
                }
            }
            for piece in pieces {
                let lo = piece[0] as f64 * self.resolution;
                let len = piece.len() as f64 * self.resolution;
                for _ in 0..placement.per_segment {
                    let s = lo + rng.random::<f64>() * len;
                    let (px, py) = match dir {
                        0 => ((line + 1) as f64 * self.resolution + placement.offset, s),
                        1 => (line as f64 * self.resolution - placement.offset, s),
                        2 => (s, (line + 1) as f64 * self.resolution + placement.offset),
                        _ => (s, line as f64 * self.resolution - placement.offset),
                    };
                    let pos = Point2::new(self.origin.x + px, self.origin.y + py);
                    let c = self.cell_of_unchecked(pos);
                    if self.in_bounds(c) && !self.is_occupied(c) && !self.is_hidden(c) {
                        features.push(pos);
                    }
                }
            }
        }
        self.features = features
            .into_iter()
            .enumerate()
            .map(|(i, pos)| Feature { id: i as u32, pos })
            .collect();
    }

    /// Distance from `p` to the nearest occupied cell center, if any lies within `radius`.
    pub fn nearest_obstacle(&self, p: Point2, radius: f64) -> Option<f64> {
        let r = (radius / self.resolution).ceil() as i32 + 1;
        let c = self.cell_of_unchecked(p);
        let mut best: Option<f64> = None;
        for y in c.y - r..=c.y + r {
            for x in c.x - r..=c.x + r {
                let cc = Cell::new(x, y);
                if self.in_bounds(cc) && self.occupied[self.index(cc)] {
                    let d = p.distance(&self.cell_center(cc));
                    if d <= radius && best.is_none_or(|b| d < b) {
                        best = Some(d);
                    }
                }
            }
        }
        best
    }
}

pub(crate) fn four_neighbours(c: Cell) -> [Cell; 4] {
    [
        Cell::new(c.x + 1, c.y),
        Cell::new(c.x - 1, c.y),
        Cell::new(c.x, c.y + 1),
        Cell::new(c.x, c.y - 1),
    ]
}
