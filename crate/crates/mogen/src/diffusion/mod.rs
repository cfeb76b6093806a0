//! Diffusion machinery: schedules, the training objective, guidance
//! combination with adaptive weight updates, and the sampling loop.

mod guidance;
mod loss;
mod sampling;
mod schedule;

pub use guidance::{
    adaptive_fusion_update, fusion_gradient, fusion_loss, guided_prediction,
    normalize_residual_to, stability_bound, FusionConfig, FusionState,
};
pub use loss::{
    select_supervision_frames, supervised_loss, GeometryCtx, LossTerms, LossWeights, MotionTag,
    CONTACT_CLAMP, CONTACT_PROXIES,
};
pub use sampling::{fusion_anchors, sample_full, SampleOptions, SampleOutput, StepAnchors};
pub use schedule::{lerp_noise, p_sample_step, q_sample, NoiseSchedule, ScheduleKind};
