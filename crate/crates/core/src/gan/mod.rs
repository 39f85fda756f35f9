//! Paired (Pix2Pix) and unpaired (CycleGAN) healthy-to-disease translation.

pub mod arch;
pub mod checkpoint;
pub mod losses;
pub mod train;

pub use arch::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
pub use checkpoint::{Checkpoint, TrainState};
pub use losses::{
    cycle_consistency_loss, cycle_gan_loss, cycle_total_objective, pix2pix_gan_loss, pix2pix_l1_loss,
    pix2pix_total_loss, AdversarialMode,
};
pub use train::{
    epoch_means, history_csv, run_generator, train_cyclegan, train_pix2pix, translate, Direction, GanModel,
    GanTrainConfig, LossBreakdown,
};
