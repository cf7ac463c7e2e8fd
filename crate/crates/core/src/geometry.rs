//! Planar poses, angle helpers and exact grid line stepping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Planar pose `(x, y, theta)` in meters / radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Composes `self ⊕ delta` where `delta` is expressed in the body frame of `self`.
    pub fn compose(&self, delta: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * delta.x - s * delta.y,
            self.y + s * delta.x + c * delta.y,
            wrap_angle(self.theta + delta.theta),
        )
    }

    /// Relative transform `self⁻¹ ⊕ other`, i.e. `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2::new(
            c * dx + s * dy,
            -s * dx + c * dy,
            wrap_angle(other.theta - self.theta),
        )
    }

    /// Maps a world point seen from `self` into the frame anchored at `other`
    /// (same relative offset, different anchor pose).
    pub fn transfer_point(&self, other: &Pose2, p: Point2) -> Point2 {
        let rel = self.between(&Pose2::new(p.x, p.y, 0.0));
        let q = other.compose(&Pose2::new(rel.x, rel.y, 0.0));
        Point2::new(q.x, q.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn bearing_to(&self, other: &Point2) -> f64 {
        (other.y - self.y).atan2(other.x - self.x)
    }
}

/// Integer grid coordinate. `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Signed smallest difference `a - b` on the circle, in `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Visits every cell whose interior is crossed by the segment joining the
/// centers of `from` and `to`, in order, both endpoints included.
///
/// A segment that passes exactly through a cell corner steps diagonally and
/// does not visit the two side cells (it only touches their boundary).
/// Integer arithmetic keeps the traversal exact.
pub fn walk_cells(from: Cell, to: Cell) -> CellWalk {
    let dx = (to.x - from.x).abs() as i64;
    let dy = (to.y - from.y).abs() as i64;
    CellWalk {
        cur: from,
        sx: (to.x - from.x).signum(),
        sy: (to.y - from.y).signum(),
        dx,
        dy,
        ix: 0,
        iy: 0,
        started: false,
    }
}

/// Iterator returned by [`walk_cells`].
#[derive(Debug, Clone)]
pub struct CellWalk {
    cur: Cell,
    sx: i32,
    sy: i32,
    dx: i64,
    dy: i64,
    ix: i64,
    iy: i64,
    started: bool,
}

impl Iterator for CellWalk {
    type Item = Cell;

    fn next(&mut self) -> Option<Cell> {
        if !self.started {
            self.started = true;
            return Some(self.cur);
        }
        if self.ix >= self.dx && self.iy >= self.dy {
            return None;
        }
        // Compare the parametric distance to the next vertical vs. horizontal boundary.
        let decision = (1 + 2 * self.ix) * self.dy - (1 + 2 * self.iy) * self.dx;
        if decision == 0 {
            self.cur.x += self.sx;
            self.cur.y += self.sy;
            self.ix += 1;
            self.iy += 1;
        } else if decision < 0 {
            self.cur.x += self.sx;
            self.ix += 1;
        } else {
            self.cur.y += self.sy;
            self.iy += 1;
        }
        Some(self.cur)
    }
}
