//! The full reverse-diffusion sampling loop with multi-branch guidance.

use super::guidance::{
    adaptive_fusion_update, guided_prediction, normalize_residual_to, FusionConfig, FusionState,
};
use super::schedule::{p_sample_step, NoiseSchedule};
use crate::branches::{active_sources, CondEnv, ConditionSource};
use crate::denoiser::{adapted_forward, mdm_forward, Checkpoint};
use crate::encoders::ConditionBundle;
use crate::error::{Error, Result};
use crate::math::{fill_gauss, Mat};
use crate::pose::{denormalize, MotionClip, FRAME_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub n_frames: usize,
    pub seed: u64,
    pub fusion: FusionConfig,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Denormalized generated motion.
    pub clip: MotionClip,
    /// Guidance weights after each denoising step (empty without fusion).
    pub lambda_history: Vec<Vec<f64>>,
}

/// The three kinds of per-step predictions: the base network alone, and
/// one prediction per active branch with only that branch's condition.
pub struct StepAnchors {
    pub uncond: Mat,
    /// Per active source: the single-condition prediction.
    pub preds: Vec<Mat>,
    /// preds[i] - uncond.
    pub residuals: Vec<Mat>,
}

/// Run the base pass and one single-condition pass per active branch.
pub fn fusion_anchors(
    x_t: &Mat,
    t: usize,
    schedule_len: usize,
    bundle: &ConditionBundle,
    ckpt: &Checkpoint,
    env: &CondEnv,
    sources: &[&'static dyn ConditionSource],
    static_feats: &[Option<Mat>],
) -> Result<StepAnchors> {
    let uncond = mdm_forward(
        x_t,
        t,
        schedule_len,
        &bundle.prompt,
        bundle.goal.as_ref(),
        &ckpt.mdm,
        &ckpt.config,
        None,
    )?;
    let mut preds = Vec::with_capacity(sources.len());
    let mut residuals = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let branch = ckpt
            .branch(src.name())
            .ok_or_else(|| Error::MissingCondition(format!("no trained branch '{}'", src.name())))?;
        let feats_storage;
        let feats: &Mat = match &static_feats[i] {
            Some(f) => f,
            None => {
                feats_storage = src.features(x_t, env, bundle)?;
                &feats_storage
            }
        };
        let pred = adapted_forward(
            x_t,
            t,
            schedule_len,
            &bundle.prompt,
            bundle.goal.as_ref(),
            &ckpt.mdm,
            &ckpt.config,
            branch,
            feats,
            None,
        )?;
        residuals.push(pred.sub(&uncond));
        preds.push(pred);
    }
    Ok(StepAnchors { uncond, preds, residuals })
}

/// Generate one motion clip.
///
/// Per step: anchor predictions, residual scale normalization, guided
/// combination, a guidance-weight update when two or more branches are
/// active (single-branch runs keep the fixed initial weight), then one
/// reverse-diffusion step. Deterministic for a given seed.
pub fn sample_full(
    bundle: &ConditionBundle,
    ckpt: &Checkpoint,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<SampleOutput> {
    let cfg = &ckpt.config;
    if bundle.prompt.len() != cfg.d_cond {
        return Err(Error::ShapeMismatch(format!(
            "prompt embedding has {} dims, model wants {}",
            bundle.prompt.len(),
            cfg.d_cond
        )));
    }
    if opts.n_frames == 0 || opts.n_frames > cfg.max_frames {
        return Err(Error::Config(format!(
            "n_frames {} outside 1..={}",
            opts.n_frames, cfg.max_frames
        )));
    }

    let sources = active_sources(bundle);
    for src in &sources {
        if ckpt.branch(src.name()).is_none() {
            return Err(Error::MissingCondition(format!(
                "bundle activates '{}' but the checkpoint has no such branch",
                src.name()
            )));
        }
    }
    let env = CondEnv::new(cfg.clone(), ckpt.stats.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.n_frames;
    let mut x = Mat::zeros(n, FRAME_DIM);
    fill_gauss(&mut rng, &mut x.data);

    // features that do not track the pose are computed once per run
    let static_feats: Vec<Option<Mat>> = sources
        .iter()
        .map(|src| {
            if src.depends_on_pose() {
                Ok(None)
            } else {
                src.features(&x, &env, bundle).map(Some)
            }
        })
        .collect::<Result<_>>()?;

    let use_fusion = sources.len() >= 2;
    let mut fusion = FusionState::new(sources.len(), &opts.fusion);
    let mut lambda_history = Vec::new();

    let mut noise = Mat::zeros(n, FRAME_DIM);
    for t in (0..schedule.steps()).rev() {
        let fused = if sources.is_empty() {
            mdm_forward(
                &x,
                t,
                schedule.steps(),
                &bundle.prompt,
                bundle.goal.as_ref(),
                &ckpt.mdm,
                cfg,
                None,
            )?
        } else {
            let mut anchors = fusion_anchors(
                &x,
                t,
                schedule.steps(),
                bundle,
                ckpt,
                &env,
                &sources,
                &static_feats,
            )?;
            // scale residuals onto their declared reference
            for i in 0..sources.len() {
                if let Some(ref_name) = sources[i].residual_reference() {
                    if let Some(j) = sources.iter().position(|s| s.name() == ref_name) {
                        anchors.residuals[i] =
                            normalize_residual_to(&anchors.residuals[i], &anchors.residuals[j]);
                    }
                }
            }
            let fused = guided_prediction(&anchors.uncond, &anchors.residuals, &fusion.lambdas)?;
            if use_fusion {
                adaptive_fusion_update(&fused, &anchors.preds, &anchors.residuals, &mut fusion)?;
                lambda_history.push(fusion.lambdas.clone());
            }
            fused
        };

        let step_noise = if t > 0 {
            fill_gauss(&mut rng, &mut noise.data);
            Some(&noise)
        } else {
            None
        };
        x = p_sample_step(&x, t, &fused, schedule, step_noise)?;
    }

    let mut normalized = MotionClip::from_mat(&x, cfg.fps);
    normalized.normalized = true;
    normalized.stats_id = Some(ckpt.stats.id());
    let clip = denormalize(&normalized, &ckpt.stats)?;
    Ok(SampleOutput { clip, lambda_history })
}
