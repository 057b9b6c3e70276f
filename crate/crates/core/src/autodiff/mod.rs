//! Reverse-mode automatic differentiation over the op set the segmentation
//! network, the style recalibration layer and the losses need.

mod checkpoint;
mod gradcheck;
mod linalg;
mod params;
mod tape;

pub use checkpoint::{checkpoint_bytes, read_checkpoint, write_checkpoint, CheckpointError, MAGIC};
pub use gradcheck::finite_diff_check;
pub use params::{ParamStore, Parameter};
pub use tape::{conv_out_extent, Tape, Var, NORM_EPS, SPECTRAL_RESIDUE_TOL};

#[cfg(test)]
mod tests;
