//! Corpus evaluation: sample a clip per held-out entry, score it against
//! the entry's scene, speech, and the ground-truth feature distribution,
//! and emit a machine-readable report. Also the naive splice baseline.

use super::{load_object, load_speech, motion_path, CorpusEntry, CorpusManifest};
use crate::config::RunConfig;
use crate::denoiser::Checkpoint;
use crate::diffusion::{sample_full, NoiseSchedule, SampleOptions};
use crate::encoders::{prompt_embed, ConditionBundle};
use crate::error::{Error, Result};
use crate::geometry::{penetration_ratio, penetration_value, BodyProxy};
use crate::metrics::{
    beat_consistency, diversity, fit_gaussian, frechet_gesture_distance, gesture_features,
    goal_reach_error, BeatConfig,
};
use crate::pose::{MotionClip, Skeleton, JOINT_COUNT, UPPER_BODY_JOINTS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FEATURE_WINDOW: usize = 32;
pub const FEATURE_STRIDE: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipReport {
    pub id: String,
    pub pen_value: Option<f64>,
    pub pen_ratio: Option<f64>,
    pub pos_err: Option<f64>,
    pub height_err: Option<f64>,
    pub orient_err: Option<f64>,
    pub beat_consistency: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_clips: usize,
    pub fgd: Option<f64>,
    pub diversity: f64,
    pub mean_pen_value: Option<f64>,
    pub mean_pen_ratio: Option<f64>,
    pub mean_pos_err: Option<f64>,
    pub mean_height_err: Option<f64>,
    pub mean_orient_err: Option<f64>,
    pub mean_beat_consistency: Option<f64>,
    pub per_clip: Vec<ClipReport>,
    pub config: RunConfig,
}

fn mean(vals: &[f64]) -> Option<f64> {
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Gesture features pooled over the ground-truth clips of one split.
pub fn corpus_gesture_features(
    manifest: &CorpusManifest,
    data_dir: &Path,
    split: &str,
    skeleton: &Skeleton,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for entry in manifest.split_entries(split) {
        let (clip, _) = crate::clipio::read_clip(&motion_path(data_dir, entry))?;
        out.extend(gesture_features(&clip, FEATURE_WINDOW, FEATURE_STRIDE, skeleton)?);
    }
    Ok(out)
}

/// Build the condition bundle an entry describes.
pub fn entry_bundle(
    entry: &CorpusEntry,
    data_dir: &Path,
    d_cond: usize,
) -> Result<ConditionBundle> {
    let mut bundle = ConditionBundle::new(prompt_embed(&entry.prompt, d_cond)?);
    bundle.goal = entry.goal;
    bundle.object = load_object(data_dir, entry)?;
    bundle.speech = load_speech(data_dir, entry)?;
    Ok(bundle)
}

/// Score one generated clip against its entry.
pub fn score_clip(
    clip: &MotionClip,
    entry: &CorpusEntry,
    data_dir: &Path,
    skeleton: &Skeleton,
    proxy: &BodyProxy,
) -> Result<ClipReport> {
    let mut report = ClipReport {
        id: entry.id.clone(),
        pen_value: None,
        pen_ratio: None,
        pos_err: None,
        height_err: None,
        orient_err: None,
        beat_consistency: None,
    };
    if let Some(obj) = load_object(data_dir, entry)? {
        report.pen_value = Some(penetration_value(clip, skeleton, proxy, &obj)?);
        report.pen_ratio = Some(penetration_ratio(clip, skeleton, proxy, &obj)?);
    }
    if let Some(goal) = &entry.goal {
        let (p, h, o) = goal_reach_error(clip, skeleton, goal)?;
        report.pos_err = Some(p);
        report.height_err = Some(h);
        report.orient_err = Some(o);
    }
    if let Some(speech) = load_speech(data_dir, entry)? {
        report.beat_consistency =
            Some(beat_consistency(clip, &speech, skeleton, &BeatConfig::default())?);
    }
    Ok(report)
}

/// Sample one clip per entry of the split and aggregate the metric
/// battery. Deterministic for a given seed.
pub fn evaluate_corpus(
    manifest: &CorpusManifest,
    data_dir: &Path,
    ckpt: &Checkpoint,
    run: &RunConfig,
    split: &str,
    seed: u64,
) -> Result<EvalReport> {
    if ckpt.stats.id() != manifest.stats_id {
        return Err(Error::StatsMismatch(format!(
            "checkpoint was trained with stats {}, manifest has {}",
            ckpt.stats.id(),
            manifest.stats_id
        )));
    }
    let entries: Vec<&CorpusEntry> = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(Error::DataMismatch(format!("split '{split}' has no entries")));
    }
    let skeleton = Skeleton::default_human();
    let proxy = BodyProxy::default_human();
    let schedule = NoiseSchedule::new(run.schedule.kind, run.schedule.steps)?;

    let generated: Vec<(MotionClip, ClipReport)> = entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| -> Result<_> {
            let bundle = entry_bundle(entry, data_dir, ckpt.config.d_cond)?;
            let opts = SampleOptions {
                n_frames: manifest.n_frames,
                seed: seed.wrapping_add(i as u64),
                fusion: run.fusion,
            };
            let out = sample_full(&bundle, ckpt, &schedule, &opts)?;
            let report = score_clip(&out.clip, entry, data_dir, &skeleton, &proxy)?;
            Ok((out.clip, report))
        })
        .collect::<Result<Vec<_>>>()?;

    // distribution metrics over generated vs ground-truth features
    let mut gen_feats = Vec::new();
    for (clip, _) in &generated {
        gen_feats.extend(gesture_features(clip, FEATURE_WINDOW, FEATURE_STRIDE, &skeleton)?);
    }
    let gt_feats = corpus_gesture_features(manifest, data_dir, split, &skeleton)?;
    let fgd = if gen_feats.len() >= 2 && gt_feats.len() >= 2 {
        Some(frechet_gesture_distance(&fit_gaussian(&gen_feats)?, &fit_gaussian(&gt_feats)?)?)
    } else {
        None
    };
    let div = diversity(&gen_feats, 2048, seed)?;

    let per_clip: Vec<ClipReport> = generated.into_iter().map(|(_, r)| r).collect();
    let collect = |f: &dyn Fn(&ClipReport) -> Option<f64>| -> Vec<f64> {
        per_clip.iter().filter_map(f).collect()
    };
    Ok(EvalReport {
        split: split.to_string(),
        n_clips: per_clip.len(),
        fgd,
        diversity: div,
        mean_pen_value: mean(&collect(&|r| r.pen_value)),
        mean_pen_ratio: mean(&collect(&|r| r.pen_ratio)),
        mean_pos_err: mean(&collect(&|r| r.pos_err)),
        mean_height_err: mean(&collect(&|r| r.height_err)),
        mean_orient_err: mean(&collect(&|r| r.orient_err)),
        mean_beat_consistency: mean(&collect(&|r| r.beat_consistency)),
        per_clip,
        config: run.clone(),
    })
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("split: {}  clips: {}\n", self.split, self.n_clips));
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        s.push_str(&format!(
            "aggregate  fgd={} diversity={:.4} pen_value={} pen_ratio={} pos={} height={} orient={} bc={}\n",
            fmt(self.fgd),
            self.diversity,
            fmt(self.mean_pen_value),
            fmt(self.mean_pen_ratio),
            fmt(self.mean_pos_err),
            fmt(self.mean_height_err),
            fmt(self.mean_orient_err),
            fmt(self.mean_beat_consistency),
        ));
        for r in &self.per_clip {
            s.push_str(&format!(
                "{:<14} pen_value={} pen_ratio={} pos={} height={} orient={} bc={}\n",
                r.id,
                fmt(r.pen_value),
                fmt(r.pen_ratio),
                fmt(r.pos_err),
                fmt(r.height_err),
                fmt(r.orient_err),
                fmt(r.beat_consistency),
            ));
        }
        s
    }
}

/// Splice the upper-body joint rotations of one clip onto the lower body
/// and root displacement of another.
pub fn concat_baseline(upper: &MotionClip, lower: &MotionClip) -> Result<MotionClip> {
    concat_baseline_with(upper, lower, &UPPER_BODY_JOINTS)
}

pub fn concat_baseline_with(
    upper: &MotionClip,
    lower: &MotionClip,
    upper_joints: &[usize],
) -> Result<MotionClip> {
    if upper.len() != lower.len() {
        return Err(Error::LengthMismatch(upper.len(), lower.len()));
    }
    if (upper.fps - lower.fps).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "fps mismatch: {} vs {}",
            upper.fps, lower.fps
        )));
    }
    if upper.normalized || lower.normalized {
        return Err(Error::NormalizedInput);
    }
    let mut out = lower.clone();
    for (k, frame) in out.frames.iter_mut().enumerate() {
        for &j in upper_joints {
            assert!(j < JOINT_COUNT);
            frame.joint_rots[j] = upper.frames[k].joint_rots[j];
        }
    }
    Ok(out)
}
