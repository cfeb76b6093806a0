//! Condition encoders: prompt and goal embeddings, per-frame audio and
//! transcript features, the joint audio-text projection, and the
//! object-proximity feature merge.

use crate::audio::{band_energies, Waveform};
use crate::error::{Error, Result};
use crate::geometry::{bps_interaction_features, ObjectGeometry};
use crate::math::{Mat, Vec3};
use crate::nn::Mlp;
use crate::pose::JOINT_COUNT;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Target end pose of the root: planar position, height, and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub position: [f64; 2],
    pub height: f64,
    /// Radians, wrapped to (-pi, pi].
    pub heading: f64,
}

impl GoalSpec {
    pub fn new(position: [f64; 2], height: f64, heading: f64) -> GoalSpec {
        GoalSpec { position, height, heading: crate::math::wrap_angle(heading) }
    }

    /// Pre-projection features. Heading enters as (cos h - 1, sin h) so
    /// the default goal maps to the zero feature vector.
    pub fn features(&self) -> [f64; 5] {
        [
            self.position[0],
            self.position[1],
            self.height,
            self.heading.cos() - 1.0,
            self.heading.sin(),
        ]
    }

    /// Inverse of `features`.
    pub fn from_features(f: &[f64; 5]) -> GoalSpec {
        GoalSpec {
            position: [f[0], f[1]],
            height: f[2],
            heading: f[4].atan2(f[3] + 1.0),
        }
    }
}

/// Deterministic unit vector for one token, derived from its hash.
pub fn token_embedding(token: &str, dim: usize) -> Vec<f64> {
    let seed = crate::math::fnv1a(token.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = crate::math::gauss_vec(&mut rng, dim);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Bag-of-tokens hash embedding, L2-normalized.
pub fn prompt_embed(text: &str, d_cond: usize) -> Result<Vec<f64>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut v = vec![0.0; d_cond];
    for t in &tokens {
        for (a, b) in v.iter_mut().zip(token_embedding(t, d_cond)) {
            *a += b;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    Ok(v)
}

/// Project a goal through the trainable linear map.
pub fn goal_embed(goal: &GoalSpec, proj: &crate::nn::Linear) -> Vec<f64> {
    proj.forward_row(&goal.features())
}

/// One transcript token with its time span in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedToken {
    pub token: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Speech audio plus its timed transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechInput {
    pub wave: Waveform,
    pub transcript: Vec<TimedToken>,
}

impl SpeechInput {
    pub fn validate(&self) -> Result<()> {
        if self.wave.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.wave.samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        let dur = self.wave.duration();
        for t in &self.transcript {
            if !(t.start_s >= 0.0 && t.end_s >= t.start_s && t.start_s <= dur + 1e-9) {
                return Err(Error::BadTiming(format!(
                    "token '{}' spans [{}, {}] over duration {dur}",
                    t.token, t.start_s, t.end_s
                )));
            }
        }
        Ok(())
    }
}

/// Transcript file: one record per line, `start_s end_s token`,
/// whitespace separated. Lines starting with '#' are ignored.
pub fn write_transcript(path: &std::path::Path, tokens: &[TimedToken]) -> Result<()> {
    let mut s = String::new();
    for t in tokens {
        s.push_str(&format!("{:.6} {:.6} {}\n", t.start_s, t.end_s, t.token));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_transcript(path: &std::path::Path) -> Result<Vec<TimedToken>> {
    let s = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in s.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("transcript line {}: expected 'start end token'", i + 1)));
        }
        let start_s: f64 = parts[0]
            .parse()
            .map_err(|_| Error::Format(format!("transcript line {}: bad start time", i + 1)))?;
        let end_s: f64 = parts[1]
            .parse()
            .map_err(|_| Error::Format(format!("transcript line {}: bad end time", i + 1)))?;
        out.push(TimedToken { token: parts[2].to_string(), start_s, end_s });
    }
    Ok(out)
}

/// Per-frame log band energies plus RMS, padded or truncated to
/// `n_frames` rows. Padding rows analyze silence.
pub fn audio_features(
    speech: &SpeechInput,
    fps: f64,
    n_bands: usize,
    n_frames: usize,
) -> Result<Mat> {
    speech.validate()?;
    let feats = band_energies(&speech.wave, fps, n_bands)?;
    let d = n_bands + 1;
    let mut out = Mat::zeros(n_frames, d);
    let silence_row: Vec<f64> = {
        let mut r = vec![crate::audio::LOG_FLOOR; d];
        r[n_bands] = 0.0;
        r
    };
    for k in 0..n_frames {
        let src = feats.get(k).unwrap_or(&silence_row);
        out.row_mut(k).copy_from_slice(src);
    }
    Ok(out)
}

/// Per-frame token hash embeddings; zero rows where no token is active.
/// Frame k covers time k / fps; a token is active on frames with
/// start <= k/fps < end.
pub fn text_features(
    speech: &SpeechInput,
    d_txt: usize,
    fps: f64,
    n_frames: usize,
) -> Result<Mat> {
    speech.validate()?;
    let mut out = Mat::zeros(n_frames, d_txt);
    for k in 0..n_frames {
        let t = k as f64 / fps;
        if let Some(tok) = speech
            .transcript
            .iter()
            .find(|tok| tok.start_s <= t && t < tok.end_s)
        {
            out.row_mut(k).copy_from_slice(&token_embedding(&tok.token, d_txt));
        }
    }
    Ok(out)
}

/// Joint audio-text features: per-frame linear projection of the
/// concatenated audio and text features.
pub fn speech_content_encode(audio: &Mat, text: &Mat, encoder: &Mlp) -> Result<Mat> {
    if audio.rows != text.rows {
        return Err(Error::LengthMismatch(audio.rows, text.rows));
    }
    let concat = hconcat(audio, text);
    if concat.cols != encoder.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "speech encoder expects {} inputs, got {}",
            encoder.in_dim(),
            concat.cols
        )));
    }
    Ok(encoder.forward(&concat, None))
}

/// Raw per-frame interaction features: object-surface distances
/// (constant across frames) concatenated with joint-proximity distances.
pub fn interaction_features_matrix(
    joints_per_frame: &[[Vec3; JOINT_COUNT]],
    obj_feats: &[f64],
    anchored: &[Vec3],
) -> Mat {
    let n_bps = obj_feats.len();
    let mut out = Mat::zeros(joints_per_frame.len(), 2 * n_bps);
    for (k, joints) in joints_per_frame.iter().enumerate() {
        let inter = bps_interaction_features(anchored, joints);
        let row = out.row_mut(k);
        row[..n_bps].copy_from_slice(obj_feats);
        row[n_bps..].copy_from_slice(&inter);
    }
    out
}

/// Merge object-geometry and joint-proximity features through the
/// branch MLP. `object` must be present in the bundle that produced the
/// features.
pub fn interaction_encode(
    joints_per_frame: &[[Vec3; JOINT_COUNT]],
    object: Option<&ObjectGeometry>,
    obj_feats: &[f64],
    anchored: &[Vec3],
    encoder: &Mlp,
) -> Result<Mat> {
    if object.is_none() {
        return Err(Error::MissingObject);
    }
    let feats = interaction_features_matrix(joints_per_frame, obj_feats, anchored);
    if feats.cols != encoder.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "interaction encoder expects {} inputs, got {}",
            encoder.in_dim(),
            feats.cols
        )));
    }
    Ok(encoder.forward(&feats, None))
}

/// Column-wise concatenation.
pub fn hconcat(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.rows, a.cols + b.cols);
    for r in 0..a.rows {
        out.row_mut(r)[..a.cols].copy_from_slice(a.row(r));
        out.row_mut(r)[a.cols..].copy_from_slice(b.row(r));
    }
    out
}

/// All conditioning inputs for one sampling or training run. The prompt
/// embedding is always present; branch activity follows from which
/// optional fields are set.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub prompt: Vec<f64>,
    pub goal: Option<GoalSpec>,
    pub object: Option<ObjectGeometry>,
    pub speech: Option<SpeechInput>,
}

impl ConditionBundle {
    pub fn new(prompt: Vec<f64>) -> ConditionBundle {
        ConditionBundle { prompt, goal: None, object: None, speech: None }
    }
}
