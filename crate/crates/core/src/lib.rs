//! Supervised 3D pre-training through variable dimension transform.
//!
//! Planar RGB images are read as single-channel depth-3 volumes, a
//! depth-preserving 3D residual backbone is trained on them, and the weights are
//! transplanted into ordinary 3D backbones for volumetric tasks. Baseline 2D to
//! 3D weight conversions (inflation, zero-pad extension, axial/coronal/sagittal
//! splitting) live next to the transplant.

pub mod adapt;
pub mod backbone;
pub mod checkpoint;
pub mod convert;
pub mod data;
pub mod error;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod vardim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Fingerprint, Layout};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use vardim::{from_pseudo3d, to_pseudo3d, window_intensity, IntensityWindow, PlanarImage, Volume};
