//! A small convolutional network with activation capture, partial forward
//! passes and reverse-mode gradients with respect to block outputs.

pub mod checkpoint;
pub mod network;
pub mod ops;
pub mod scalar;
pub mod train;

pub use checkpoint::{load_model, load_network, save_model, save_network};
pub use network::{Activation, LayerId, ModelConfig, Network, Preset, Target, Trace};
pub use scalar::Scalar;
pub use train::{
    evaluate, train, train_with, EpochRecord, Evaluation, InMemorySet, TrainConfig, TrainedModel,
    TrainingLog, TrainingSet,
};
