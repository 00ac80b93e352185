//! Cluster-guided contrastive pretraining of the segmentation encoder.

mod augment;
mod loss;
mod model;
mod pretrain;
mod sampler;

pub use augment::{apply_augmentation, augment_pair, AugParams};
pub use loss::{
    cluster_contrastive_loss, contrastive_loss_on_tape, instance_discrimination_loss, instance_labels, positive_sets,
    Denominator, LossOptions,
};
pub use model::{EncoderModel, HeadConfig};
pub use pretrain::{pretrain, Mode, PretrainConfig, PretrainHistory};
pub use sampler::{epoch_batches, MAX_RESAMPLES};
