//! The Inception-ResNet network: graph construction, execution and
//! checkpoints.

mod checkpoint;
mod exec;
mod graph;
mod kernels;
mod scalar;

pub use checkpoint::{
    load_checkpoint, load_into, load_matching, save_checkpoint, Checkpoint, LoadReport, NamedTensor,
    TensorEntry, TensorRole, TrainingMeta, FORMAT_VERSION, MAGIC,
};
pub use exec::{init_parameters, ForwardPass, Gradients, Mode, Network};
pub use graph::{
    build_network, Layer, LayerKind, NetworkConfig, NetworkGraph, Padding, ParamRole, ParamSpec, Shape,
    Stage,
};
pub use scalar::Scalar;

pub(crate) use kernels::map_samples;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input {input}x{input} shrinks to {size} pixels in stage {stage}")]
    ShapeUnderflow { stage: String, input: usize, size: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot make {requested} of {total} parameterized layers trainable")]
    OutOfRange { requested: usize, total: usize },
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
