//! A small reverse-mode autodiff engine with the two classifier families,
//! Adam, training, search and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod search;
pub mod tensor;
pub mod train;

pub use adam::Adam;
pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, TrainMeta};
pub use graph::{softmax_row, Gradients, Graph, NodeId, ParamStore};
pub use model::{Architecture, Model, ModelConfig};
pub use search::{random_search, SearchOutcome, SearchRun, SearchSpace};
pub use tensor::{gemm, Real, Tensor};
pub use train::{predict_windows, train, train_with_history, EarlyStopping, TrainConfig, TrainOutcome};
