//! Laminographic reconstruction toolkit.
//!
//! Synthetic interconnect phantoms are projected through an oblique-axis
//! parallel-beam geometry, reconstructed either by filtered backprojection or
//! by fitting an untrained convolutional generator through the physical
//! forward model, and compared with occupancy error, correlation and
//! missing-cone spectral metrics.

pub mod config;
pub mod dipnet;
pub mod error;
pub mod eval;
pub mod fbp;
pub mod fft;
pub mod geometry;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod preproc;
pub mod projector;
pub mod solver;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::LaminoGeometry;
pub use phantom::{generate_ic_phantom, occupancy_mask, PhantomSpec};
pub use projector::{back_project, forward_project, forward_project_all, Projection, ProjectionStack};
pub use volume::{BinaryVolume, Dims, Volume3D};
