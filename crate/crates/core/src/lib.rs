//! Contact-aware refinement, keypoint retargeting and shared-codebook
//! tokenization for dexterous-hand trajectories.
//!
//! - [`geometry`]: rigid transforms and pose trajectories
//! - [`handmodel`]: kinematic chains, forward kinematics, Jacobians
//! - [`pointcloud`]: oriented clouds, nearest-neighbor index, normals
//! - [`energy`] and [`refiner`]: the per-frame contact objective and its
//!   damped Gauss–Newton solve ([`solver`])
//! - [`retarget`]: keypoint inverse kinematics
//! - [`codebook`]: VQ codebook, coder nets, training and masking
//! - [`metrics`]: MPJPE, FPL, FOL, FID, diversity
//! - [`io`] and [`fixtures`]: file formats and synthetic demo data

pub mod codebook;
pub mod energy;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod handmodel;
pub mod io;
pub mod metrics;
pub mod pointcloud;
pub mod refiner;
pub mod retarget;
pub mod solver;

pub use error::{Error, Result};
pub use geometry::{RigidTransform, TargetPoseTrajectory};
pub use handmodel::{HandConfiguration, HandTrajectory, KinematicChain};
pub use pointcloud::{NeighborIndex, OrientedPointCloud};
