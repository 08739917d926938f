//! Neural SDF + color fields on multi-resolution permutohedral hash encodings.
//!
//! The crate is organised bottom-up:
//!
//! * [`encoding`] — permutohedral and voxel hash encodings with analytic
//!   derivatives (parameter gradient, input Jacobian, double backward).
//! * [`nn`] — small dense networks with hand-written backprop and optional
//!   Lipschitz weight normalization.
//! * [`fields`] — the SDF field (with normals and geometric features) and the
//!   view-dependent color field, plus sphere initialization and coarse-to-fine
//!   level annealing.
//! * [`losses`] — RGB, Eikonal, curvature, Lipschitz and oriented-point SDF
//!   losses.
//! * [`render`] — occupancy-restricted ray sampling, SDF-to-weight conversion,
//!   volumetric compositing and inverted-sphere background blending.
//! * [`occupancy`] — Morton-ordered 128^3 occupancy grid with an EMA SDF.
//! * [`surface`] — sphere tracing, isosurface mesh extraction and Chamfer
//!   distance evaluation.
//! * [`trainer`] — the image-supervised two-phase optimization loop and the
//!   oriented-point 4D fit.
//! * [`scene`], [`config`], [`io`] — synthetic data, config files and on-disk
//!   formats used by the CLI.

pub mod config;
pub mod encoding;
pub mod error;
pub mod fields;
pub mod io;
pub mod losses;
pub mod math;
pub mod nn;
pub mod occupancy;
pub mod opt;
pub mod render;
pub mod scene;
pub mod surface;
pub mod trainer;

pub use error::{Error, Result};
