//! Retrieval-based 3D orientation estimation for unseen objects.
//!
//! A query image is scored against a database of rotation-labeled multi-scale
//! reference feature maps using confidence-weighted local similarity fusion;
//! the best-matching orientation is retrieved either by exhaustive greedy
//! search or by an anchor-seeded coarse-to-fine search over SO(3).

pub mod eval;
pub mod features;
pub mod fusion;
pub mod loss;
pub mod preproc;
pub mod refdb;
pub mod retrieval;
pub mod so3;

pub use so3::{geodesic_distance, fps_select, from_sixd, sample_rotations, Rotation, SixDRep};
