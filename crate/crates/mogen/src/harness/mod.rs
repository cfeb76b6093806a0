//! Synthetic corpus: procedural chairs, walk-to-sit motions, beat-driven
//! gesture motions with matching audio, and the on-disk dataset layout.

mod eval;
mod train;

pub use eval::{concat_baseline, corpus_gesture_features, evaluate_corpus, ClipReport, EvalReport};
pub use train::{train_stage, Stage};

use crate::audio::Waveform;
use crate::config::DataConfig;
use crate::diffusion::MotionTag;
use crate::encoders::{GoalSpec, SpeechInput, TimedToken};
use crate::error::{Error, Result};
use crate::geometry::{
    penetration_ratio, yaw_quat, BodyProxy, ObjectGeometry, Primitive,
};
use crate::math::{rot_y, rot_z, wrap_angle};
use crate::pose::{
    matrix_to_rot6d, joints, MotionClip, NormStats, PoseFrame, Skeleton, STAND_PELVIS_HEIGHT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Pelvis clearance above the seat surface when seated: the pelvis proxy
/// sphere rests tangent to the seat.
pub const SEAT_CLEARANCE: f64 = 0.10;

/// A chair-like object with the goal pose of a sit on it.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub object: ObjectGeometry,
    pub goal: GoalSpec,
    pub tag: MotionTag,
    pub seat_height: f64,
}

/// Seat box with a backrest, facing `facing` (the seated character's
/// heading). The seat surface is at `seat_height`.
pub fn make_chair(seat_center: [f64; 2], seat_height: f64, facing: f64) -> ObjectGeometry {
    let seat_thick: f64 = 0.07;
    let (fy, fx) = facing.sin_cos();
    let seat = Primitive::Box {
        center: [seat_center[0], seat_center[1], seat_height - seat_thick / 2.0],
        half_extents: [0.22, 0.22, seat_thick / 2.0],
        orientation: yaw_quat(facing),
    };
    let back = Primitive::Box {
        center: [
            seat_center[0] - 0.19 * fx,
            seat_center[1] - 0.19 * fy,
            seat_height + 0.25,
        ],
        half_extents: [0.03, 0.22, 0.25],
        orientation: yaw_quat(facing),
    };
    ObjectGeometry::new(vec![seat, back]).expect("chair primitives are valid")
}

/// Place a chair around the canonical start (origin, facing +x). Training
/// scenes spread over a wide sector; held-out scenes sit in the corridor
/// straight ahead.
pub fn make_scene(seed: u64, data: &DataConfig, held_out: bool) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dist, half_angle): (f64, f64) = if held_out { (1.6, 0.45) } else { (1.9, 0.9) };
    let d = dist + rng.gen_range(-0.3..0.5);
    let phi: f64 = rng.gen_range(-half_angle..half_angle);
    let seat_center = [d * phi.cos(), d * phi.sin()];
    let seat_height = rng.gen_range(data.seat_height_min..data.seat_height_max);
    // the chair faces back toward the start
    let facing = wrap_angle(phi + std::f64::consts::PI);
    let object = make_chair(seat_center, seat_height, facing);
    let goal = GoalSpec::new(seat_center, seat_height + SEAT_CLEARANCE, facing);
    SyntheticScene { object, goal, tag: MotionTag::EndsSitting, seat_height }
}

fn cos_ease(u: f64) -> f64 {
    0.5 - 0.5 * (std::f64::consts::PI * u.clamp(0.0, 1.0)).cos()
}

/// Procedural walk-to-sit motion: approach the chair from the canonical
/// start, turn, and lower the pelvis onto the seat over the last
/// `k_sit` frames. The result is verified penetration-free against the
/// scene's own object.
pub fn gen_interaction_clip(
    scene: &SyntheticScene,
    n: usize,
    fps: f64,
    k_sit: usize,
    seed: u64,
) -> Result<MotionClip> {
    if n < k_sit + 20 {
        return Err(Error::Config(format!(
            "interaction clip needs at least {} frames, asked for {n}",
            k_sit + 20
        )));
    }
    let goal = &scene.goal;
    let chair_dir = (goal.position[1]).atan2(goal.position[0]);
    let dist = (goal.position[0].powi(2) + goal.position[1].powi(2)).sqrt();
    if dist < 0.9 {
        return Err(Error::UnreachableGoal(format!("chair only {dist:.2} m from the start")));
    }
    // stand-up point in front of the seat
    let (fy, fx) = goal.heading.sin_cos();
    let pre_seat = [goal.position[0] + 0.46 * fx, goal.position[1] + 0.46 * fy];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gait_hz = rng.gen_range(1.3..1.7);
    let gait_amp = rng.gen_range(0.3..0.42);
    let arm_amp = 0.5 * gait_amp;
    let gait_phase0 = rng.gen_range(0.0..std::f64::consts::TAU);

    let walk = n - k_sit;
    let turn_in = 12.min(walk / 3);
    let mut frames = Vec::with_capacity(n);
    let mut prev_pos = [0.0, 0.0, STAND_PELVIS_HEIGHT];

    for k in 0..n {
        let t = k as f64 / fps;
        let (pos, heading, sit_u) = if k < walk {
            let u = cos_ease(k as f64 / (walk - 1).max(1) as f64);
            let pos = [
                pre_seat[0] * u,
                pre_seat[1] * u,
                STAND_PELVIS_HEIGHT,
            ];
            let h = if k < turn_in {
                chair_dir * cos_ease(k as f64 / turn_in.max(1) as f64)
            } else {
                chair_dir
            };
            (pos, h, 0.0)
        } else {
            let u = cos_ease((k - walk) as f64 / (k_sit - 1).max(1) as f64);
            let pos = [
                pre_seat[0] + (goal.position[0] - pre_seat[0]) * u,
                pre_seat[1] + (goal.position[1] - pre_seat[1]) * u,
                STAND_PELVIS_HEIGHT + (goal.height - STAND_PELVIS_HEIGHT) * u,
            ];
            // half turn from the approach heading onto the seat heading
            let h = chair_dir + std::f64::consts::PI * u;
            (pos, h, u)
        };

        // gait envelope fades in at the start and out before the sit
        let ramp_in = cos_ease(k as f64 / 6.0);
        let ramp_out = if k + 8 >= walk {
            1.0 - cos_ease((k + 8 - walk) as f64 / 8.0)
        } else {
            1.0
        };
        let env = ramp_in * ramp_out * if k >= walk { 0.0 } else { 1.0 };
        let phase = gait_phase0 + std::f64::consts::TAU * gait_hz * t;

        let mut frame = PoseFrame::rest();
        frame.joint_rots[joints::PELVIS] = matrix_to_rot6d(&rot_z(wrap_angle(heading)))?;

        let swing = gait_amp * env * phase.sin();
        let sit_hip = -std::f64::consts::FRAC_PI_2 * sit_u;
        let sit_knee = std::f64::consts::FRAC_PI_2 * sit_u;
        frame.joint_rots[joints::L_HIP] = matrix_to_rot6d(&rot_y(swing + sit_hip))?;
        frame.joint_rots[joints::R_HIP] = matrix_to_rot6d(&rot_y(-swing + sit_hip))?;
        let knee_l = 0.6 * gait_amp * env * (-phase.sin()).max(0.0) + sit_knee;
        let knee_r = 0.6 * gait_amp * env * phase.sin().max(0.0) + sit_knee;
        frame.joint_rots[joints::L_KNEE] = matrix_to_rot6d(&rot_y(knee_l))?;
        frame.joint_rots[joints::R_KNEE] = matrix_to_rot6d(&rot_y(knee_r))?;
        frame.joint_rots[joints::L_SHOULDER] = matrix_to_rot6d(&rot_y(-arm_amp * env * phase.sin()))?;
        frame.joint_rots[joints::R_SHOULDER] = matrix_to_rot6d(&rot_y(arm_amp * env * phase.sin()))?;

        frame.delta_trans = [pos[0] - prev_pos[0], pos[1] - prev_pos[1], pos[2] - prev_pos[2]];
        if k == 0 {
            frame.delta_trans = pos;
        }
        prev_pos = pos;
        frames.push(frame);
    }

    let clip = MotionClip::new(frames, fps)?;
    // construction invariant: the body never penetrates its own chair
    let sk = Skeleton::default_human();
    let proxy = BodyProxy::default_human();
    let ratio = penetration_ratio(&clip, &sk, &proxy, &scene.object)?;
    if ratio > 0.0 {
        return Err(Error::UnreachableGoal(format!(
            "generated motion penetrates the scene object (ratio {ratio:.3})"
        )));
    }
    Ok(clip)
}

/// Beat-synchronized gesture motion: the body stands in place while the
/// upper-body pose eases between seeded targets, reaching zero velocity
/// exactly at each beat. Returns the clip plus matching click-track
/// audio and a transcript tiling the duration.
pub fn gen_gesture_clip(
    beat_times: &[f64],
    n: usize,
    fps: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<(MotionClip, SpeechInput)> {
    let duration = n as f64 / fps;
    if beat_times.is_empty() {
        return Err(Error::BadBeats("no beats given".into()));
    }
    for w in beat_times.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::BadBeats("beat times must increase".into()));
        }
    }
    if beat_times[0] < 0.0 || *beat_times.last().unwrap() >= duration {
        return Err(Error::BadBeats(format!(
            "beats must lie inside [0, {duration:.2})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // pose targets per beat segment for six gesture channels
    let channels = [
        (joints::L_SHOULDER, 0.55),
        (joints::R_SHOULDER, 0.55),
        (joints::L_ELBOW, 0.65),
        (joints::R_ELBOW, 0.65),
        (joints::SPINE2, 0.12),
        (joints::NECK, 0.15),
    ];
    let n_segments = beat_times.len() + 1;
    let targets: Vec<Vec<f64>> = (0..n_segments + 1)
        .map(|_| {
            channels
                .iter()
                .map(|(_, amp)| rng.gen_range(-amp..*amp))
                .collect()
        })
        .collect();

    // piecewise cosine interpolation between targets, knots at beats
    let mut knots = vec![0.0];
    knots.extend_from_slice(beat_times);
    knots.push(duration.max(*beat_times.last().unwrap() + 1e-6));

    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / fps;
        let seg = match knots.windows(2).position(|w| t >= w[0] && t < w[1]) {
            Some(s) => s,
            None => n_segments - 1,
        };
        let u = cos_ease((t - knots[seg]) / (knots[seg + 1] - knots[seg]));
        let mut frame = PoseFrame::rest();
        for (ci, (joint, _)) in channels.iter().enumerate() {
            let a = targets[seg][ci];
            let b = targets[seg + 1][ci];
            let ang = a + (b - a) * u;
            frame.joint_rots[*joint] = matrix_to_rot6d(&rot_y(ang))?;
        }
        frame.delta_trans = if k == 0 { [0.0, 0.0, STAND_PELVIS_HEIGHT] } else { [0.0; 3] };
        frames.push(frame);
    }
    let clip = MotionClip::new(frames, fps)?;

    // click track with band-limited noise floor
    let n_samples = (sample_rate as f64 * duration).round() as usize;
    let mut samples = vec![0.0f64; n_samples];
    for s in samples.iter_mut() {
        *s = 0.005 * rng.gen_range(-1.0..1.0);
    }
    for &bt in beat_times {
        let start = (bt * sample_rate as f64).round() as usize;
        for i in 0..(sample_rate as usize / 40) {
            if start + i >= n_samples {
                break;
            }
            let decay = (-(i as f64) / (sample_rate as f64 / 200.0)).exp();
            samples[start + i] += 0.8
                * decay
                * (std::f64::consts::TAU * 1100.0 * i as f64 / sample_rate as f64).sin();
        }
    }
    let wave = Waveform { samples, sample_rate };

    // synthetic tokens tiling the duration
    let vocab = ["tok", "lex", "mor", "pha", "syl", "den", "vos", "ria"];
    let n_tokens = (duration / 0.4).floor().max(1.0) as usize;
    let mut transcript = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let start_s = duration * i as f64 / n_tokens as f64;
        let end_s = duration * (i + 1) as f64 / n_tokens as f64;
        let token = format!("{}{}", vocab[rng.gen_range(0..vocab.len())], i);
        transcript.push(TimedToken { token, start_s, end_s });
    }

    Ok((clip, SpeechInput { wave, transcript }))
}

/// Frame-aligned beat times with seeded spacing, covering (lead, dur).
pub fn gen_beat_times(n: usize, fps: f64, seed: u64) -> Vec<f64> {
    let duration = n as f64 / fps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = 0.5;
    while t < duration - 0.3 {
        // snap to the frame grid so velocity minima land on frames
        out.push((t * fps).round() / fps);
        t += rng.gen_range(0.7..1.1);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub motion: String,
    pub object: Option<String>,
    pub audio: Option<String>,
    pub transcript: Option<String>,
    pub prompt: String,
    pub tag: MotionTag,
    pub split: String,
    pub goal: Option<GoalSpec>,
    pub seed: u64,
    pub beat_times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub fps: f64,
    pub n_frames: usize,
    pub stats_id: String,
    pub stats_mean: Vec<f64>,
    pub stats_std: Vec<f64>,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn stats(&self) -> NormStats {
        NormStats { mean: self.stats_mean.clone(), std: self.stats_std.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CorpusManifest> {
        let s = std::fs::read_to_string(path)?;
        let m: CorpusManifest =
            serde_json::from_str(&s).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        Ok(m)
    }

    pub fn split_entries(&self, split: &str) -> Vec<&CorpusEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Check that every referenced file exists.
    pub fn verify_files(&self, dir: &Path) -> Result<()> {
        for e in &self.entries {
            for f in [Some(&e.motion), e.object.as_ref(), e.audio.as_ref(), e.transcript.as_ref()]
                .into_iter()
                .flatten()
            {
                if !dir.join(f).exists() {
                    return Err(Error::Format(format!("manifest references missing file {f}")));
                }
            }
        }
        Ok(())
    }
}

pub const INTERACTION_PROMPT: &str = "a person walks to the chair and sits down";
pub const GESTURE_PROMPT: &str = "a person stands and gestures while speaking";

/// Generate the full corpus under `out_dir` and write `manifest.json`.
pub fn generate_corpus(out_dir: &Path, data: &DataConfig) -> Result<CorpusManifest> {
    std::fs::create_dir_all(out_dir.join("clips"))?;
    std::fs::create_dir_all(out_dir.join("objects"))?;
    std::fs::create_dir_all(out_dir.join("audio"))?;

    let fps = data.fps;
    let n = data.n_frames;
    let k_sit = (0.9 * fps).round() as usize;
    let mut entries = Vec::new();
    let mut clips: Vec<(String, MotionClip)> = Vec::new();

    // interaction clips
    for (split, count, held_out) in [
        ("train", data.n_interaction, false),
        ("test", data.n_test_interaction, true),
    ] {
        for i in 0..count {
            let seed = data
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(if held_out { 50_000 } else { 0 } + i as u64);
            let scene = make_scene(seed, data, held_out);
            let clip = gen_interaction_clip(&scene, n, fps, k_sit, seed ^ 0x5eed)?;
            let id = format!("int_{split}_{i:03}");
            let motion = format!("clips/{id}.mclip");
            let object = format!("objects/{id}.toml");
            scene.object.save(&out_dir.join(&object))?;
            entries.push(CorpusEntry {
                id: id.clone(),
                motion: motion.clone(),
                object: Some(object),
                audio: None,
                transcript: None,
                prompt: INTERACTION_PROMPT.to_string(),
                tag: scene.tag,
                split: split.to_string(),
                goal: Some(scene.goal),
                seed,
                beat_times: None,
            });
            clips.push((motion, clip));
        }
    }

    // gesture clips
    for (split, count, offset) in [
        ("train", data.n_gesture, 100_000u64),
        ("test", data.n_test_gesture, 150_000u64),
    ] {
        for i in 0..count {
            let seed = data.seed.wrapping_mul(1_000_003).wrapping_add(offset + i as u64);
            let beats = gen_beat_times(n, fps, seed);
            let (clip, speech) = gen_gesture_clip(&beats, n, fps, data.audio_sample_rate, seed)?;
            let id = format!("ges_{split}_{i:03}");
            let motion = format!("clips/{id}.mclip");
            let audio = format!("audio/{id}.wav");
            let transcript = format!("audio/{id}.txt");
            crate::audio::write_wav(&out_dir.join(&audio), &speech.wave)?;
            crate::encoders::write_transcript(&out_dir.join(&transcript), &speech.transcript)?;
            entries.push(CorpusEntry {
                id: id.clone(),
                motion: motion.clone(),
                object: None,
                audio: Some(audio),
                transcript: Some(transcript),
                prompt: GESTURE_PROMPT.to_string(),
                tag: MotionTag::None,
                split: split.to_string(),
                goal: None,
                seed,
                beat_times: Some(beats),
            });
            clips.push((motion, clip));
        }
    }

    // normalization statistics over the training split
    let train_refs: Vec<&MotionClip> = entries
        .iter()
        .zip(&clips)
        .filter(|(e, _)| e.split == "train")
        .map(|(_, (_, c))| c)
        .collect();
    if train_refs.is_empty() {
        return Err(Error::Config("corpus has no training clips".into()));
    }
    let stats = NormStats::from_clips(&train_refs)?;

    for (path, clip) in &clips {
        let meta = format!("{{\"generator_seed\":{}}}", data.seed);
        crate::clipio::write_clip(&out_dir.join(path), clip, &meta)?;
    }

    let manifest = CorpusManifest {
        fps,
        n_frames: n,
        stats_id: stats.id(),
        stats_mean: stats.mean,
        stats_std: stats.std,
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Load one entry's speech input.
pub fn load_speech(dir: &Path, entry: &CorpusEntry) -> Result<Option<SpeechInput>> {
    match (&entry.audio, &entry.transcript) {
        (Some(a), Some(t)) => {
            let wave = crate::audio::read_wav(&dir.join(a))?;
            let transcript = crate::encoders::read_transcript(&dir.join(t))?;
            Ok(Some(SpeechInput { wave, transcript }))
        }
        _ => Ok(None),
    }
}

/// Load one entry's object geometry.
pub fn load_object(dir: &Path, entry: &CorpusEntry) -> Result<Option<ObjectGeometry>> {
    match &entry.object {
        Some(o) => Ok(Some(ObjectGeometry::load(&dir.join(o))?)),
        None => Ok(None),
    }
}

/// Absolute path of an entry's motion clip.
pub fn motion_path(dir: &Path, entry: &CorpusEntry) -> PathBuf {
    dir.join(&entry.motion)
}
