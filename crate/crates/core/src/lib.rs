//! Learn orbitally asymptotically stable 3D dynamical systems whose limit
//! cycle matches a closed curve sketched on a flat surface.
//!
//! A hand-designed base system with a circular limit cycle on the `y = 0`
//! plane is morphed by an invertible coupling network acting on the `(x, z)`
//! coordinates. Because the learned system is a change of coordinates of the
//! base system, it inherits its orbital stability.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! and the HTTP service live in the `cyclesketch` companion crate.
//!
//! Module map:
//!
//! - [`base`]: the base system, polar and Cartesian, and its limit cycle.
//! - [`inn`]: coupling blocks, the invertible map and its Jacobian.
//! - [`tape`]: reverse-mode differentiation over batched matrix primitives.
//! - [`train`]: Hausdorff loss, identity regularizer, ADAM and the training loop.
//! - [`projection`]: pinhole rays, surface intersection and shape normalization.
//! - [`rollout`]: pushforward dynamics, integration and tracking evaluation.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod base;
mod error;
pub mod inn;
mod math;
mod points;
pub mod projection;
pub mod rng;
pub mod rollout;
pub mod tape;
pub mod train;

pub use base::{BaseParams, State3, Velocity3};
pub use error::{Error, Result};
pub use points::{Point2, PointSet2, Region2};
pub use inn::{Activation, CouplingBlock, DiffeoParams, InnSpec, Jacobian3, SubnetSpec};
pub use projection::{CameraModel, ShapeTransform, SketchPoint, SurfacePlane};
pub use rollout::{IntegratorConfig, Method, Trajectory};
pub use train::{AdamConfig, TrainConfig, TrainReport};
