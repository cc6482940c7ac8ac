//! Tensor primitives with forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod heads;
pub mod loss;
pub mod optim;

pub use activation::{relu, relu_grad, sigmoid, sigmoid_grad};
pub use batchnorm::{
    batchnorm, batchnorm_eval, batchnorm_train, batchnorm_train_grad, BatchNormCache, BatchNormGrads,
    BatchNormState, Mode,
};
pub use conv::{conv2d, conv2d_grad, conv2d_naive, ConvKernel};
pub use heads::{global_avg_pool, global_avg_pool_grad, upsample_nearest2x, upsample_nearest2x_grad, Linear};
pub use loss::{dice, dice_tensors, soft_dice_loss, softmax_cross_entropy};
pub use optim::{sgd_step, SgdConfig};
