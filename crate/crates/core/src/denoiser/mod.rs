//! The self-supervised denoiser: U-Net, cross-prediction loss, optimizer,
//! paired-patch dataset, training loop and frame-wise inference.

pub mod dataset;
pub mod infer;
pub mod loss;
pub mod optim;
pub mod train;
pub mod unet;

pub use dataset::{augment, build_pairs, Augment, PairedPatchSet, PatchPair};
pub use infer::{denoise_ensemble, denoise_frame};
pub use loss::{ha2ha_loss, total_loss};
pub use optim::{AdamW, AdamWConfig, Plateau};
pub use train::{format_loss_log, train, train_with, EpochRecord, TrainConfig, Trained};
pub use unet::{UNet, UNetConfig};
