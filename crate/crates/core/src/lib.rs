//! Algorithms for edge-aware monocular SLAM.
//!
//! The crate is `no_std` (with `alloc`) so the math can run on targets
//! without an operating system; file formats, threading and the command line
//! live in the `edgeslam` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod geometry;

pub use geometry::{
    backproject, compose, euler_to_rotation, invert, project, rotation_to_euler, transform_point, CameraIntrinsics,
    GeometryError, Pixel, Point3, Pose,
};
pub mod ba;
pub mod depth;
pub mod ekf;
pub mod epipolar;
pub mod eval;
pub mod features;
pub mod image;
pub mod jet;
pub mod losses;
pub mod synthetic;
