//! Second stage: a patch-wise conditional diffusion model that refines
//! coarse volumes, trained with randomly masked guidance patches and applied
//! from the centre patch outwards.

pub mod mask;
pub mod model;
pub mod traversal;

pub use mask::{
    make_y_prev, masked_diffusion_loss, sample_mask_kind, sample_training_mask, Mask, MaskKind,
    PARTIAL_KINDS,
};
pub use model::{
    check_pairs, draw_sample, load_refiner, new_refiner_unet, refine_volume, refine_volume_with,
    refiner_batch_loss, refiner_checkpoint, refiner_step, refiner_validation_loss, resume_refiner,
    train_refiner, PatchParams, Preconditioner, Refiner, RefinerSample, REFINER_IN_CHANNELS,
    REFINER_KIND,
};
pub use traversal::{plan_traversal, write_counts, PlanEntry, TraversalPlan};
