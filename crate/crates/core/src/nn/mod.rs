//! Feed-forward networks with exact backpropagation. Convolutions are
//! stored as `out_channels × (in_channels·kh·kw)` matrices so every layer
//! is a plain linear operator.

mod layers;
mod loss;
mod model;
mod optim;
mod spec;
mod train;

pub use loss::{backward_ce, mse, per_sample_cross_entropy, softmax_cross_entropy};
pub use model::{
    init_model, Checkpoint, GradientSet, Layer, LayerRecord, Model, Trace, Trainable,
    CHECKPOINT_FORMAT,
};
pub use optim::{sgd_step, Sgd};
pub use spec::{validate_stack, Activation, Conv2dSpec, LayerSpec};
pub use train::{epoch_batches, train, EpochLog, TrainConfig};
pub(crate) use train::default_momentum;
