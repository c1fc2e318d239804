//! Dynamic radiative Gaussian splatting for sparse-view X-ray reconstruction.
//!
//! A time-varying attenuation volume is represented by anisotropic 3D Gaussian
//! kernels whose per-kernel attenuation comes from a neural field (hash-grid
//! encodings + small MLP). Projections are rendered by additive splatting onto
//! a cone-beam detector, and the scene is optimized against sparse low-resolution
//! observations with optional high-resolution pseudo-label supervision.

pub mod adaptive;
mod bytes;
pub mod dnaf;
pub mod error;
pub mod geometry;
pub mod image;
pub mod optim;
pub mod phantom;
pub mod rasterizer;
pub mod scene;
pub mod supervision;
pub mod trainer;

pub use adaptive::*;
pub use dnaf::*;
pub use error::*;
pub use geometry::*;
pub use image::*;
pub use optim::*;
pub use phantom::*;
pub use rasterizer::*;
pub use scene::*;
pub use supervision::*;
pub use trainer::*;
