use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::Pose2;

#[derive(Debug, Error)]
pub enum Error {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityDomain(f64),

    #[error("pose ({x:.3}, {y:.3}) is outside the grid", x = .0.x, y = .0.y)]
    PoseOutsideGrid(Pose2),

    #[error("grid dimensions differ: {0}x{1} @ {2} vs {3}x{4} @ {5}")]
    GridMismatch(usize, usize, f64, usize, usize, f64),

    #[error("collision: pose ({x:.3}, {y:.3}) lies in an occupied cell", x = .0.x, y = .0.y)]
    Collision(Pose2),

    #[error("goal unreachable")]
    Unreachable,

    #[error("no graph node with id {0}")]
    UnknownNode(usize),

    #[error("utility mode u3 needs a goal pose")]
    MissingGoal,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("unknown world `{0}`")]
    UnknownWorld(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
