//! Rigid per-vertebra surface registration for longitudinal labeled CT
//! volumes.
//!
//! The pipeline ingests labeled voxel volumes (one integer label per
//! vertebra), reconstructs a triangulated surface per label, registers each
//! follow-up surface to its baseline counterpart with a Gaussian-mixture EM
//! solver, and scores the alignment with volumetric Dice overlap and surface
//! distance statistics.
//!
//! Modules follow the processing order:
//!
//! * [`volume`] — labeled voxel grids, world-space geometry, file I/O,
//!   nearest-neighbor mask resampling;
//! * [`mesh`] — marching-cubes surface extraction, quadric edge-collapse
//!   decimation, PLY I/O;
//! * [`registration`] — rigid (optionally scaled) point-set registration by
//!   EM over a Gaussian mixture;
//! * [`metrics`] — Dice overlap and symmetric surface-distance statistics;
//! * [`pipeline`] — per-vertebra orchestration of a baseline plus follow-up
//!   study, report files;
//! * [`synth`] — seeded synthetic phantoms and perturbed follow-ups with
//!   known ground-truth motion.
//!
//! The `examples/` directory holds one runnable example per capability; the
//! `spinereg` binary exposes the same operations as subcommands.

pub mod error;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod registration;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use mesh::{DecimationParams, TriangleMesh};
pub use metrics::{MetricsReport, SurfaceDistanceStats};
pub use registration::{GmmConfig, RegistrationResult, RigidTransform};
pub use volume::{BinaryMask, LabelVolume, VolumeGeometry};
