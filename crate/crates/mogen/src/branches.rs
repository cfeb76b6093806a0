//! Adaptation-branch registry.
//!
//! Each conditioning variant implements [`ConditionSource`]: it declares
//! its name, when a bundle activates it, its encoder stack, and how to
//! turn the bundle plus the current noisy motion into per-frame encoder
//! inputs. The sampler and trainer look branches up by name, so new
//! condition types plug in without touching either.

use crate::denoiser::ModelConfig;
use crate::encoders::{
    audio_features, hconcat, interaction_features_matrix, text_features, ConditionBundle,
};
use crate::error::{Error, Result};
use crate::geometry::{bps_generate, bps_object_features, BasisPointSet};
use crate::math::Mat;
use crate::pose::{
    forward_kinematics, NormStats, PoseFrame, Skeleton, FRAME_DIM, JOINT_COUNT, STD_FLOOR,
};

/// Shared lookup data for feature computation.
pub struct CondEnv {
    pub cfg: ModelConfig,
    pub stats: NormStats,
    pub skeleton: Skeleton,
    pub bps: BasisPointSet,
}

impl CondEnv {
    pub fn new(cfg: ModelConfig, stats: NormStats) -> CondEnv {
        let bps = bps_generate(cfg.bps_seed, cfg.n_bps, 1.0);
        CondEnv { cfg, stats, skeleton: Skeleton::default_human(), bps }
    }
}

/// One interchangeable conditioning variant.
pub trait ConditionSource: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the bundle carries this source's inputs.
    fn active(&self, bundle: &ConditionBundle) -> bool;

    /// Layer widths of the branch encoder, ending at d_model.
    fn encoder_dims(&self, cfg: &ModelConfig) -> Vec<usize>;

    /// True when the features must be recomputed from the evolving noisy
    /// motion at every denoising step.
    fn depends_on_pose(&self) -> bool;

    /// Name of the source whose residual scale this source's residual is
    /// normalized to during fusion, when both are active.
    fn residual_reference(&self) -> Option<&'static str> {
        None
    }

    /// Per-frame raw encoder inputs (one row per frame of `x_t`).
    /// `x_t` is in normalized space.
    fn features(&self, x_t: &Mat, env: &CondEnv, bundle: &ConditionBundle) -> Result<Mat>;
}

/// Object-interaction conditioning: object-surface distances and
/// joint-proximity distances over a basis point set anchored to the
/// object, recomputed from the denormalized noisy pose each step.
pub struct InteractionSource;

/// Speech conditioning: log band energies plus RMS from the audio and
/// timed token embeddings from the transcript.
pub struct CospeechSource;

pub static SOURCES: [&dyn ConditionSource; 2] = [&InteractionSource, &CospeechSource];

pub fn source_by_name(name: &str) -> Option<&'static dyn ConditionSource> {
    SOURCES.iter().find(|s| s.name() == name).copied()
}

/// Sources the bundle activates, in registry order.
pub fn active_sources(bundle: &ConditionBundle) -> Vec<&'static dyn ConditionSource> {
    SOURCES.iter().filter(|s| s.active(bundle)).copied().collect()
}

impl ConditionSource for InteractionSource {
    fn name(&self) -> &'static str {
        "interaction"
    }

    fn active(&self, bundle: &ConditionBundle) -> bool {
        bundle.object.is_some()
    }

    fn encoder_dims(&self, cfg: &ModelConfig) -> Vec<usize> {
        vec![cfg.interaction_feat_dim(), cfg.merge_hidden, cfg.d_model]
    }

    fn depends_on_pose(&self) -> bool {
        true
    }

    fn features(&self, x_t: &Mat, env: &CondEnv, bundle: &ConditionBundle) -> Result<Mat> {
        let obj = bundle.object.as_ref().ok_or(Error::MissingObject)?;
        if x_t.cols != FRAME_DIM {
            return Err(Error::ShapeMismatch(format!(
                "noisy motion has {} dims, expected {FRAME_DIM}",
                x_t.cols
            )));
        }
        let obj_feats = bps_object_features(&env.bps, obj);
        let anchored = env.bps.anchored_to(obj);

        // denormalize and run kinematics per frame
        let stats = &env.stats;
        let mut joints_per_frame: Vec<[crate::math::Vec3; JOINT_COUNT]> =
            Vec::with_capacity(x_t.rows);
        let mut root = [0.0f64; 3];
        for r in 0..x_t.rows {
            let mut vals = [0.0f64; FRAME_DIM];
            for c in 0..FRAME_DIM {
                vals[c] = x_t.at(r, c) * stats.std[c].max(STD_FLOOR) + stats.mean[c];
            }
            let frame = PoseFrame::decode(&vals);
            for c in 0..3 {
                root[c] += frame.delta_trans[c];
            }
            joints_per_frame.push(forward_kinematics(&frame, &env.skeleton, root)?);
        }
        Ok(interaction_features_matrix(&joints_per_frame, &obj_feats, &anchored))
    }
}

impl ConditionSource for CospeechSource {
    fn name(&self) -> &'static str {
        "cospeech"
    }

    fn active(&self, bundle: &ConditionBundle) -> bool {
        bundle.speech.is_some()
    }

    fn encoder_dims(&self, cfg: &ModelConfig) -> Vec<usize> {
        vec![cfg.speech_feat_dim(), cfg.d_model]
    }

    fn depends_on_pose(&self) -> bool {
        false
    }

    fn residual_reference(&self) -> Option<&'static str> {
        Some("interaction")
    }

    fn features(&self, x_t: &Mat, env: &CondEnv, bundle: &ConditionBundle) -> Result<Mat> {
        let speech = bundle
            .speech
            .as_ref()
            .ok_or_else(|| Error::MissingCondition("cospeech".into()))?;
        let n = x_t.rows;
        let audio = audio_features(speech, env.cfg.fps, env.cfg.n_bands, n)?;
        let text = text_features(speech, env.cfg.d_txt, env.cfg.fps, n)?;
        Ok(hconcat(&audio, &text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;
    use crate::encoders::{SpeechInput, TimedToken};
    use crate::geometry::{ObjectGeometry, Primitive};
    use crate::pose::STAND_PELVIS_HEIGHT;

    fn env() -> CondEnv {
        let cfg = ModelConfig { n_bps: 8, n_bands: 4, d_txt: 4, ..ModelConfig::default() };
        CondEnv::new(cfg, NormStats::identity())
    }

    fn speech_bundle() -> ConditionBundle {
        let mut b = ConditionBundle::new(vec![0.0; 64]);
        b.speech = Some(SpeechInput {
            wave: Waveform { samples: vec![0.1; 8000], sample_rate: 8000 },
            transcript: vec![TimedToken { token: "hi".into(), start_s: 0.0, end_s: 1.0 }],
        });
        b
    }

    fn object_bundle() -> ConditionBundle {
        let mut b = ConditionBundle::new(vec![0.0; 64]);
        b.object = Some(
            ObjectGeometry::new(vec![Primitive::Box {
                center: [1.0, 0.0, 0.25],
                half_extents: [0.25, 0.25, 0.25],
                orientation: [1.0, 0.0, 0.0, 0.0],
            }])
            .unwrap(),
        );
        b
    }

    #[test]
    fn registry_lookup_and_activation() {
        assert!(source_by_name("interaction").is_some());
        assert!(source_by_name("cospeech").is_some());
        assert!(source_by_name("unknown").is_none());

        let b = speech_bundle();
        let active = active_sources(&b);
        assert_eq!(active.len(), 1);
        assert_eq!(active[0].name(), "cospeech");

        let mut both = object_bundle();
        both.speech = speech_bundle().speech;
        let active = active_sources(&both);
        assert_eq!(active.len(), 2);
        // registry order: interaction first
        assert_eq!(active[0].name(), "interaction");
        assert_eq!(active[1].name(), "cospeech");
    }

    #[test]
    fn interaction_features_follow_the_pose() {
        let env = env();
        let bundle = object_bundle();
        // standing still at two different spots
        let mut m = Mat::zeros(2, FRAME_DIM);
        let mut f0 = PoseFrame::rest();
        f0.delta_trans = [0.0, 0.0, STAND_PELVIS_HEIGHT];
        m.row_mut(0).copy_from_slice(&f0.encode());
        let mut f1 = PoseFrame::rest();
        f1.delta_trans = [0.5, 0.0, 0.0];
        m.row_mut(1).copy_from_slice(&f1.encode());

        let feats = InteractionSource.features(&m, &env, &bundle).unwrap();
        assert_eq!(feats.rows, 2);
        assert_eq!(feats.cols, 2 * env.cfg.n_bps);
        // object half identical, proximity half differs (body moved closer)
        assert_eq!(&feats.row(0)[..env.cfg.n_bps], &feats.row(1)[..env.cfg.n_bps]);
        assert_ne!(&feats.row(0)[env.cfg.n_bps..], &feats.row(1)[env.cfg.n_bps..]);
        // moving toward the object shrinks the minimum proximity feature
        let min0 = feats.row(0)[env.cfg.n_bps..].iter().cloned().fold(f64::INFINITY, f64::min);
        let min1 = feats.row(1)[env.cfg.n_bps..].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min1 < min0);
    }

    #[test]
    fn cospeech_features_are_pose_independent() {
        let env = env();
        let bundle = speech_bundle();
        let a = Mat::zeros(10, FRAME_DIM);
        let mut b = Mat::zeros(10, FRAME_DIM);
        for v in &mut b.data {
            *v = 0.35;
        }
        let fa = CospeechSource.features(&a, &env, &bundle).unwrap();
        let fb = CospeechSource.features(&b, &env, &bundle).unwrap();
        assert_eq!(fa.data, fb.data);
        assert_eq!(fa.cols, env.cfg.n_bands + 1 + env.cfg.d_txt);
        assert!(!CospeechSource.depends_on_pose());
        assert!(InteractionSource.depends_on_pose());
    }
}
