//! Toy two-branch encoder-decoder, multi-view consistency losses, SGD
//! training and finite-difference gradient checks.

pub mod checkpoint;
pub mod consistency;
pub mod curriculum;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use consistency::{consistency_loss, ConsistencyLoss, ConsistencyMode, FrameGrads};
pub use curriculum::{curriculum_sampler, curriculum_window};
pub use loss::{cross_entropy_loss, cross_entropy_masked, label_pyramid, stochastic_pool_labels};
pub use net::{classify, classify_backward, toynet_backward, toynet_forward, ForwardPass, LayerKind, ToyNetConfig, ToyNetParams};
pub use optim::{sgd_step, sgd_update, SgdConfig, SgdState};
pub use train::{
    evaluate, fused_prediction, neighbor_grids, predict, sample_loss_and_grad, train, Frame,
    IterationLog, NeighborFrame, NetInput, PreparedNeighbor, PreparedSequence, SequenceSample, TrainConfig,
};
