//! Radiance fields split across a Voronoi partition of space.
//!
//! A scene is represented by `N` small radiance heads, each owning one cell of
//! a learned Voronoi partition of space. Heads are trained in two phases (the
//! partition first, against a coarse scene-wide network, then the heads with
//! the partition frozen) and can be rendered either ray by ray or one cell at a
//! time, compositing the cell layers back to front.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod field;
pub mod geometry;
pub mod imagebuf;
pub mod render;
pub mod scene;
pub mod train;
pub mod voronoi;

pub use error::{DerfError, Result};
pub use field::{ArchitectureDescriptor, DerfModel, EvalMode};
pub use geometry::{Camera, NormalizationTransform, Ray, Vec3};
pub use imagebuf::FloatImage;
pub use scene::SceneDescription;
pub use voronoi::VoronoiDecomposition;
