//! Synthetic data, file formats and checkpoints.

pub mod annotations;
pub mod checkpoint;
pub mod dataset;
pub mod synth;
pub mod tensor_file;

use cfn_autograd::Tensor;

use crate::losseval::FrameLabels;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint, LoadReport};
pub use dataset::{read_split, write_split};
pub use synth::{generate, SynthSpec};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor, write_tensor_as, Dtype};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionClip {
    pub clip_id: String,
    /// `[C, T_raw, H, W]`
    pub features: Tensor,
    pub labels: FrameLabels,
    /// Input striding applied before the network.
    pub stride: usize,
}
