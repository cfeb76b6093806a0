//! Evaluation metrics: distribution distance over gesture features, beat
//! alignment between motion and audio, sample diversity, and final-pose
//! goal errors.

use crate::audio::{onset_strength, peak_times};
use crate::encoders::{GoalSpec, SpeechInput};
use crate::error::{Error, Result};
use crate::math::{m_apply, v_norm, v_sub, wrap_angle};
use crate::geometry::clip_joint_positions;
use crate::pose::{
    integrate_root, rot6d_to_matrix, MotionClip, Skeleton, UPPER_BODY_JOINTS,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rotation channels of the upper-body joints plus their speed
/// magnitudes: mean and standard deviation of each over a window.
pub const GESTURE_FEAT_DIM: usize = 2 * (UPPER_BODY_JOINTS.len() * 6 + UPPER_BODY_JOINTS.len());

/// Sliding-window gesture statistics over a denormalized clip.
///
/// Windows of `window` frames advance by `stride`; each yields the mean
/// and population standard deviation of every upper-body rotation
/// channel and joint speed magnitude.
pub fn gesture_features(
    clip: &MotionClip,
    window: usize,
    stride: usize,
    skeleton: &Skeleton,
) -> Result<Vec<Vec<f64>>> {
    if clip.normalized {
        return Err(Error::NormalizedInput);
    }
    let n = clip.len();
    if n < window || window == 0 {
        return Err(Error::ClipTooShort { n, w: window });
    }
    let stride = stride.max(1);
    let positions = clip_joint_positions(clip, skeleton)?;
    let nj = UPPER_BODY_JOINTS.len();

    // per-frame channel matrix: rotations then speeds
    let n_chan = nj * 6 + nj;
    let mut chans = vec![vec![0.0; n_chan]; n];
    for (k, frame) in clip.frames.iter().enumerate() {
        for (ji, &j) in UPPER_BODY_JOINTS.iter().enumerate() {
            let r = frame.joint_rots[j].flatten();
            chans[k][ji * 6..ji * 6 + 6].copy_from_slice(&r);
        }
        for (ji, &j) in UPPER_BODY_JOINTS.iter().enumerate() {
            let speed = if k == 0 {
                0.0
            } else {
                v_norm(v_sub(positions[k][j], positions[k - 1][j])) * clip.fps
            };
            chans[k][nj * 6 + ji] = speed;
        }
    }

    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= n {
        let mut feat = vec![0.0; GESTURE_FEAT_DIM];
        for c in 0..n_chan {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for k in start..start + window {
                sum += chans[k][c];
                sumsq += chans[k][c] * chans[k][c];
            }
            let mean = sum / window as f64;
            let var = (sumsq / window as f64 - mean * mean).max(0.0);
            feat[c] = mean;
            feat[n_chan + c] = var.sqrt();
        }
        out.push(feat);
        start += stride;
    }
    Ok(out)
}

/// Gaussian moments of a feature set.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
}

/// Unbiased covariance with 1e-6 diagonal regularization.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianFit> {
    if features.len() < 2 {
        return Err(Error::TooFewSamples(features.len()));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        if f.len() != d {
            return Err(Error::DimensionMismatch(f.len(), d));
        }
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
        cov[i * d + i] += 1e-6;
    }
    Ok(GaussianFit { mean, cov, dim: d })
}

fn check_psd(fit: &GaussianFit) -> Result<DMatrix<f64>> {
    let m = DMatrix::from_row_slice(fit.dim, fit.dim, &fit.cov);
    let mut max_asym: f64 = 0.0;
    for i in 0..fit.dim {
        for j in 0..fit.dim {
            max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if max_asym > 1e-9 {
        return Err(Error::NotPSD(f64::NAN));
    }
    Ok(m)
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// -1e-9 are rejected, small negatives are clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-9 {
            return Err(Error::NotPSD(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Squared distance between Gaussian fits:
/// |m1-m2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}).
pub fn frechet_gesture_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(a.dim, b.dim));
    }
    let s1 = check_psd(a)?;
    let s2 = check_psd(b)?;
    let mut mean_term = 0.0;
    for (x, y) in a.mean.iter().zip(&b.mean) {
        mean_term += (x - y) * (x - y);
    }
    let root1 = psd_sqrt(&s1)?;
    let inner = &root1 * &s2 * &root1;
    let cross = psd_sqrt(&inner)?;
    let trace = s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace).max(0.0))
}

/// Mean speed of the upper-body joints per frame, from central
/// differences so a velocity zero crossing lands on its frame. The ends
/// copy their neighbors so they cannot be spurious minima.
pub fn upper_body_speed(clip: &MotionClip, skeleton: &Skeleton) -> Result<Vec<f64>> {
    let positions = clip_joint_positions(clip, skeleton)?;
    let n = clip.len();
    let mut speeds = vec![0.0; n];
    for k in 1..n.saturating_sub(1) {
        let mut s = 0.0;
        for &j in &UPPER_BODY_JOINTS {
            s += v_norm(v_sub(positions[k + 1][j], positions[k - 1][j])) / 2.0;
        }
        speeds[k] = s / UPPER_BODY_JOINTS.len() as f64 * clip.fps;
    }
    if n > 2 {
        speeds[0] = speeds[1];
        speeds[n - 1] = speeds[n - 2];
    }
    Ok(speeds)
}

/// Times of local speed minima below `threshold_mult` times the median
/// speed.
pub fn kinematic_beat_times(speeds: &[f64], fps: f64, threshold_mult: f64) -> Vec<f64> {
    if speeds.len() < 3 {
        return Vec::new();
    }
    let mut sorted = speeds.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let thresh = threshold_mult * median;
    let mut out = Vec::new();
    for k in 1..speeds.len() - 1 {
        if speeds[k] < speeds[k - 1] && speeds[k] <= speeds[k + 1] && speeds[k] < thresh {
            out.push(k as f64 / fps);
        }
    }
    out
}

/// Mean over kinematic beats of exp(-(nearest audio beat gap)^2/(2 sigma^2)).
/// No kinematic beats, or no audio beats, scores 0.
pub fn beat_alignment_score(kinematic: &[f64], audio: &[f64], sigma: f64) -> f64 {
    if kinematic.is_empty() || audio.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &tb in kinematic {
        let nearest = audio.iter().map(|tj| (tb - tj) * (tb - tj)).fold(f64::INFINITY, f64::min);
        total += (-nearest / (2.0 * sigma * sigma)).exp();
    }
    total / kinematic.len() as f64
}

#[derive(Debug, Clone, Copy)]
pub struct BeatConfig {
    pub sigma: f64,
    pub onset_threshold: f64,
    pub speed_threshold: f64,
}

impl Default for BeatConfig {
    fn default() -> Self {
        BeatConfig { sigma: 0.1, onset_threshold: 1.5, speed_threshold: 0.3 }
    }
}

/// Beat consistency between a motion clip and its speech audio.
pub fn beat_consistency(
    clip: &MotionClip,
    speech: &SpeechInput,
    skeleton: &Skeleton,
    cfg: &BeatConfig,
) -> Result<f64> {
    if speech.wave.samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let speeds = upper_body_speed(clip, skeleton)?;
    let kin = kinematic_beat_times(&speeds, clip.fps, cfg.speed_threshold);
    let flux = onset_strength(&speech.wave, clip.fps, 16)?;
    let audio = peak_times(&flux, clip.fps, cfg.onset_threshold);
    Ok(beat_alignment_score(&kin, &audio, cfg.sigma))
}

/// Mean pairwise Euclidean distance over seeded random index pairs.
/// When `n_pairs` covers every unordered pair, the exact all-pairs mean
/// is returned. The feature set is canonically sorted first so the
/// result is permutation invariant.
pub fn diversity(features: &[Vec<f64>], n_pairs: usize, seed: u64) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::TooFewSamples(features.len()));
    }
    let mut sorted: Vec<&Vec<f64>> = features.iter().collect();
    sorted.sort_by(|a, b| {
        a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = sorted.len();
    let all_pairs = n * (n - 1) / 2;
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    if n_pairs >= all_pairs {
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += dist(sorted[i], sorted[j]);
            }
        }
        return Ok(total / all_pairs as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += dist(sorted[i], sorted[j]);
    }
    Ok(total / n_pairs as f64)
}

/// Final-frame goal errors: planar distance, height difference, and
/// absolute heading difference (radians, wrapped to [0, pi]).
pub fn goal_reach_error(
    clip: &MotionClip,
    skeleton: &Skeleton,
    goal: &GoalSpec,
) -> Result<(f64, f64, f64)> {
    let _ = skeleton;
    if clip.is_empty() {
        return Err(Error::EmptyClip);
    }
    let roots = integrate_root(clip, [0.0; 3])?;
    let last = roots[roots.len() - 1];
    let pos_err =
        ((last[0] - goal.position[0]).powi(2) + (last[1] - goal.position[1]).powi(2)).sqrt();
    let height_err = (last[2] - goal.height).abs();
    let rot = rot6d_to_matrix(&clip.frames[clip.len() - 1].joint_rots[0])?;
    let fwd = m_apply(&rot, [1.0, 0.0, 0.0]);
    let heading = if fwd[0].hypot(fwd[1]) < 1e-9 { 0.0 } else { fwd[1].atan2(fwd[0]) };
    let orient_err = wrap_angle(heading - goal.heading).abs();
    Ok((pos_err, height_err, orient_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rot_z;
    use crate::pose::{matrix_to_rot6d, PoseFrame, STAND_PELVIS_HEIGHT};

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    fn standing_clip(n: usize) -> MotionClip {
        let mut frames = vec![PoseFrame::rest(); n];
        frames[0].delta_trans = [0.0, 0.0, STAND_PELVIS_HEIGHT];
        MotionClip::new(frames, 20.0).unwrap()
    }

    #[test]
    fn gesture_features_basics() {
        let sk = Skeleton::default_human();
        let clip = standing_clip(12);
        // constant pose: all standard deviations zero
        let feats = gesture_features(&clip, 6, 3, &sk).unwrap();
        assert_eq!(feats.len(), 3); // starts 0, 3, 6
        let half = GESTURE_FEAT_DIM / 2;
        for f in &feats {
            assert_eq!(f.len(), GESTURE_FEAT_DIM);
            for c in half..GESTURE_FEAT_DIM {
                assert_close(f[c], 0.0, 1e-12, "constant clip std");
            }
        }
        // N == W: exactly one window
        let feats = gesture_features(&clip, 12, 4, &sk).unwrap();
        assert_eq!(feats.len(), 1);
        assert!(matches!(
            gesture_features(&clip, 13, 1, &sk),
            Err(Error::ClipTooShort { .. })
        ));
    }

    #[test]
    fn gesture_features_match_two_pass_oracle() {
        let sk = Skeleton::default_human();
        let mut clip = standing_clip(10);
        // wiggle an elbow so stats are nontrivial
        for (k, f) in clip.frames.iter_mut().enumerate() {
            let ang = 0.4 * (k as f64 * 0.9).sin();
            f.joint_rots[18] = matrix_to_rot6d(&crate::math::rot_x(ang)).unwrap();
        }
        let feats = gesture_features(&clip, 10, 1, &sk).unwrap();
        assert_eq!(feats.len(), 1);

        // independent two-pass oracle over the same channels
        let positions = crate::geometry::clip_joint_positions(&clip, &sk).unwrap();
        let nj = UPPER_BODY_JOINTS.len();
        let n_chan = nj * 7;
        let mut chans = vec![vec![0.0; 10]; n_chan];
        for k in 0..10 {
            for (ji, &j) in UPPER_BODY_JOINTS.iter().enumerate() {
                let r = clip.frames[k].joint_rots[j].flatten();
                for c in 0..6 {
                    chans[ji * 6 + c][k] = r[c];
                }
                chans[nj * 6 + ji][k] = if k == 0 {
                    0.0
                } else {
                    v_norm(v_sub(positions[k][j], positions[k - 1][j])) * clip.fps
                };
            }
        }
        for (c, series) in chans.iter().enumerate() {
            let mean: f64 = series.iter().sum::<f64>() / 10.0;
            let var: f64 = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 10.0;
            assert_close(feats[0][c], mean, 1e-9, "mean oracle");
            assert_close(feats[0][n_chan + c], var.sqrt(), 1e-9, "std oracle");
        }
    }

    #[test]
    fn fgd_identical_and_closed_forms() {
        // identical fits
        let fit = GaussianFit {
            mean: vec![0.3, -0.7],
            cov: vec![1.2, 0.3, 0.3, 0.9],
            dim: 2,
        };
        let d = frechet_gesture_distance(&fit, &fit).unwrap();
        assert!(d <= 1e-8, "identical fits give {d}");

        // 1-D closed forms: (mu1-mu2)^2 + (s1-s2)^2
        let a = GaussianFit { mean: vec![0.0], cov: vec![1.0], dim: 1 };
        let b = GaussianFit { mean: vec![3.0], cov: vec![1.0], dim: 1 };
        assert_close(frechet_gesture_distance(&a, &b).unwrap(), 9.0, 1e-9, "mean shift");
        let c = GaussianFit { mean: vec![0.0], cov: vec![4.0], dim: 1 };
        assert_close(frechet_gesture_distance(&a, &c).unwrap(), 1.0, 1e-9, "sigma 1 vs 2");

        // symmetry on random PSD fits
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = 4;
            let raw: Vec<Vec<f64>> =
                (0..12).map(|_| crate::math::gauss_vec(&mut rng, d)).collect();
            let raw2: Vec<Vec<f64>> =
                (0..12).map(|_| crate::math::gauss_vec(&mut rng, d)).collect();
            let fa = fit_gaussian(&raw).unwrap();
            let fb = fit_gaussian(&raw2).unwrap();
            let ab = frechet_gesture_distance(&fa, &fb).unwrap();
            let ba = frechet_gesture_distance(&fb, &fa).unwrap();
            assert_close(ab, ba, 1e-9, "symmetry");
            assert!(ab >= 0.0);
        }

        // dimension mismatch and genuinely non-PSD input rejected
        assert!(frechet_gesture_distance(&a, &fit).is_err());
        let bad = GaussianFit { mean: vec![0.0], cov: vec![-1.0], dim: 1 };
        assert!(matches!(frechet_gesture_distance(&bad, &a), Err(Error::NotPSD(_))));
    }

    #[test]
    fn beat_alignment_closed_forms() {
        // exact coincidence scores 1
        let kin = [0.5, 1.0, 1.5];
        assert_close(beat_alignment_score(&kin, &kin, 0.1), 1.0, 1e-15, "coincident");
        // no kinematic beats scores 0
        assert_eq!(beat_alignment_score(&[], &kin, 0.1), 0.0);
        // single offset pair: exp(-d^2 / (2 sigma^2))
        let s = beat_alignment_score(&[1.0], &[1.07], 0.1);
        assert_close(s, (-0.07f64 * 0.07 / 0.02).exp(), 1e-9, "offset closed form");
    }

    #[test]
    fn beat_alignment_decreases_with_offset() {
        let kin: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.5).collect();
        let audio = kin.clone();
        let mut prev = f64::INFINITY;
        for step in 0..6 {
            let offset = step as f64 * 0.04;
            let shifted: Vec<f64> = kin.iter().map(|t| t + offset).collect();
            let s = beat_alignment_score(&shifted, &audio, 0.1);
            assert!(s <= prev + 1e-12, "offset {offset} raised the score");
            prev = s;
        }
    }

    #[test]
    fn diversity_cases() {
        let a = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        // two points at distance 5
        assert_close(diversity(&a, 10, 1).unwrap(), 5.0, 1e-12, "single pair");
        // identical features
        let same = vec![vec![1.0; 3]; 5];
        assert_close(diversity(&same, 100, 1).unwrap(), 0.0, 1e-15, "identical");
        // n_pairs covering all pairs equals the brute-force mean
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats: Vec<Vec<f64>> = (0..7).map(|_| crate::math::gauss_vec(&mut rng, 3)).collect();
        let exact = diversity(&feats, 21, 5).unwrap();
        let mut total = 0.0;
        for i in 0..7 {
            for j in i + 1..7 {
                let d: f64 = feats[i]
                    .iter()
                    .zip(&feats[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                total += d;
            }
        }
        assert_close(exact, total / 21.0, 1e-12, "all-pairs mean");

        // permutation invariance with subsampling
        let before = diversity(&feats, 5, 77).unwrap();
        let mut shuffled = feats.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let after = diversity(&shuffled, 5, 77).unwrap();
        assert_close(before, after, 1e-15, "permutation invariance");

        assert!(matches!(diversity(&[vec![1.0]], 5, 0), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn goal_errors_basic_and_yaw_invariant() {
        let sk = Skeleton::default_human();
        let mut clip = standing_clip(5);
        // walk to (1.0, 0.5), heading 0.6, pelvis at 0.45
        let heading = 0.6;
        for f in &mut clip.frames {
            f.joint_rots[0] = matrix_to_rot6d(&rot_z(heading)).unwrap();
        }
        clip.frames[4].delta_trans = [1.0, 0.5, 0.45 - STAND_PELVIS_HEIGHT];
        let goal = GoalSpec::new([1.0, 0.5], 0.45, heading);
        let (p, h, o) = goal_reach_error(&clip, &sk, &goal).unwrap();
        assert_close(p, 0.0, 1e-12, "pos");
        assert_close(h, 0.0, 1e-12, "height");
        assert_close(o, 0.0, 1e-12, "orient");

        // heading off by pi wraps to pi
        let flipped = GoalSpec::new([1.0, 0.5], 0.45, heading + std::f64::consts::PI);
        let (_, _, o) = goal_reach_error(&clip, &sk, &flipped).unwrap();
        assert_close(o, std::f64::consts::PI, 1e-12, "wrap");

        // global yaw applied to both clip and goal leaves errors unchanged
        let phi = 1.3;
        let rz = rot_z(phi);
        let mut rotated = clip.clone();
        for f in &mut rotated.frames {
            let r0 = rot6d_to_matrix(&f.joint_rots[0]).unwrap();
            f.joint_rots[0] = matrix_to_rot6d(&crate::math::m_mul(&rz, &r0)).unwrap();
            f.delta_trans = m_apply(&rz, f.delta_trans);
        }
        let rg = GoalSpec::new(
            [
                phi.cos() * goal.position[0] - phi.sin() * goal.position[1],
                phi.sin() * goal.position[0] + phi.cos() * goal.position[1],
            ],
            goal.height,
            goal.heading + phi,
        );
        let a = goal_reach_error(&clip, &sk, &goal).unwrap();
        let b = goal_reach_error(&rotated, &sk, &rg).unwrap();
        assert_close(a.0, b.0, 1e-9, "pos invariant");
        assert_close(a.1, b.1, 1e-9, "height invariant");
        assert_close(a.2, b.2, 1e-9, "orient invariant");

        let empty = MotionClip::new(vec![], 20.0).unwrap();
        assert!(matches!(goal_reach_error(&empty, &sk, &goal), Err(Error::EmptyClip)));
    }

    #[test]
    fn kinematic_beats_from_oscillating_arm() {
        let sk = Skeleton::default_human();
        let mut clip = standing_clip(61);
        // elbow angle 0.8 cos(pi t): zero velocity at integer seconds
        let beats = [1.0f64, 2.0];
        for (k, f) in clip.frames.iter_mut().enumerate() {
            let t = k as f64 / 20.0;
            let ang = 0.8 * (std::f64::consts::PI * t).cos();
            f.joint_rots[18] = matrix_to_rot6d(&crate::math::rot_x(ang)).unwrap();
        }
        let speeds = upper_body_speed(&clip, &sk).unwrap();
        let found = kinematic_beat_times(&speeds, 20.0, 0.3);
        for &b in &beats {
            let nearest = found.iter().map(|t| (t - b).abs()).fold(f64::INFINITY, f64::min);
            assert!(nearest <= 0.1, "beat near {b} missing (best {nearest})");
        }
        // constant pose produces no beats
        let flat = standing_clip(40);
        let speeds = upper_body_speed(&flat, &sk).unwrap();
        assert!(kinematic_beat_times(&speeds, 20.0, 0.3).is_empty());
    }
}
