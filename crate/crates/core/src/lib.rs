//! Desk-scale simulator for active visual SLAM exploration with an
//! omnidirectional robot: entropy-driven goal and heading selection,
//! receding-horizon path execution, a feature-overlap loop-closure model
//! and a seeded trial harness for method comparisons.

pub mod config;
pub mod controller;
pub mod error;
pub mod experiments;
pub mod frontier;
pub mod fsm;
pub mod geometry;
pub mod grid_map;
pub mod planner;
pub mod slam_proxy;
pub mod utility;
pub mod world_sim;
pub mod worlds;

pub use error::{Error, Result};
