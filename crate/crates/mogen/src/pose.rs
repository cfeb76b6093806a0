//! Motion representation: 6D rotations, 135-dim pose frames, clips,
//! normalization, and forward kinematics over a 22-joint skeleton.
//!
//! Frame layout: 22 joints x 6 rotation scalars (first two columns of the
//! rotation matrix, column 0 then column 1), followed by the 3-component
//! root displacement since the previous frame. 22*6 + 3 = 135.
//!
//! World frame is Z-up, units are meters. Joint rotations are
//! parent-relative. Absolute root positions are the cumulative sum of the
//! per-frame displacements from the world origin.

use crate::error::{Error, Result};
use crate::math::{
    m_apply, m_col, m_det, m_mul, m_transpose, v_add, v_cross, v_dot, v_norm, v_scale, Mat, Mat3,
    Vec3,
};

pub const JOINT_COUNT: usize = 22;
pub const FRAME_DIM: usize = JOINT_COUNT * 6 + 3;

/// Gram-Schmidt degeneracy threshold.
pub const ROT6D_EPS: f64 = 1e-8;

/// Pelvis height of the default skeleton when standing with feet on the
/// ground plane.
pub const STAND_PELVIS_HEIGHT: f64 = 1.00;

/// Continuous 6D rotation encoding: the first two columns of a rotation
/// matrix, orthonormalized on decode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D {
    pub a: Vec3,
    pub b: Vec3,
}

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D { a: [1.0, 0.0, 0.0], b: [0.0, 1.0, 0.0] };

    pub fn flatten(&self) -> [f64; 6] {
        [self.a[0], self.a[1], self.a[2], self.b[0], self.b[1], self.b[2]]
    }

    pub fn from_slice(s: &[f64]) -> Rot6D {
        Rot6D { a: [s[0], s[1], s[2]], b: [s[3], s[4], s[5]] }
    }
}

/// Decode a 6D rotation to a rotation matrix via Gram-Schmidt.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<Mat3> {
    let na = v_norm(r.a);
    if na <= ROT6D_EPS {
        return Err(Error::DegenerateRotation(format!("|a| = {na:.3e}")));
    }
    let b1 = v_scale(r.a, 1.0 / na);
    let proj = v_dot(b1, r.b);
    let u = v_sub3(r.b, v_scale(b1, proj));
    let nu = v_norm(u);
    if nu <= ROT6D_EPS {
        return Err(Error::DegenerateRotation(format!(
            "a and b are parallel within eps (|u| = {nu:.3e})"
        )));
    }
    let b2 = v_scale(u, 1.0 / nu);
    let b3 = v_cross(b1, b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

fn v_sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Gradient of a scalar loss through `rot6d_to_matrix`.
///
/// `d_mat` holds dL/dR; returns dL/d(a, b). Intermediates are recomputed
/// from the inputs.
pub fn rot6d_backward(r: &Rot6D, d_mat: &Mat3) -> (Vec3, Vec3) {
    let na = v_norm(r.a);
    let b1 = v_scale(r.a, 1.0 / na);
    let proj = v_dot(b1, r.b);
    let u = v_sub3(r.b, v_scale(b1, proj));
    let nu = v_norm(u);
    let b2 = v_scale(u, 1.0 / nu);

    let g1 = m_col(d_mat, 0);
    let g2 = m_col(d_mat, 1);
    let g3 = m_col(d_mat, 2);

    // b3 = b1 x b2
    let mut gb1 = v_add(g1, v_cross(b2, g3));
    let gb2 = v_add(g2, v_cross(g3, b1));

    // b2 = u / |u|
    let du = v_scale(v_sub3(gb2, v_scale(b2, v_dot(b2, gb2))), 1.0 / nu);

    // u = b - (b1.b) b1
    let b1_du = v_dot(b1, du);
    let db = v_sub3(du, v_scale(b1, b1_du));
    gb1 = v_add(gb1, v_scale(r.b, -b1_du));
    gb1 = v_add(gb1, v_scale(du, -proj));

    // b1 = a / |a|
    let da = v_scale(v_sub3(gb1, v_scale(b1, v_dot(b1, gb1))), 1.0 / na);
    (da, db)
}

/// Extract the 6D encoding from a rotation matrix (first two columns).
pub fn matrix_to_rot6d(m: &Mat3) -> Result<Rot6D> {
    let mt = m_transpose(m);
    let gram = m_mul(&mt, m);
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((gram[i][j] - target).abs());
        }
    }
    let det = m_det(m);
    if max_dev > 1e-6 || (det - 1.0).abs() > 1e-6 {
        return Err(Error::NotARotation(format!(
            "orthonormality deviation {max_dev:.3e}, det {det:.9}"
        )));
    }
    Ok(Rot6D { a: m_col(m, 0), b: m_col(m, 1) })
}

/// One motion frame: parent-relative joint rotations plus the root
/// displacement since the previous frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub joint_rots: [Rot6D; JOINT_COUNT],
    pub delta_trans: Vec3,
}

impl PoseFrame {
    pub fn rest() -> PoseFrame {
        PoseFrame { joint_rots: [Rot6D::IDENTITY; JOINT_COUNT], delta_trans: [0.0; 3] }
    }

    pub fn encode(&self) -> [f64; FRAME_DIM] {
        let mut out = [0.0; FRAME_DIM];
        for (j, r) in self.joint_rots.iter().enumerate() {
            out[j * 6..j * 6 + 6].copy_from_slice(&r.flatten());
        }
        out[JOINT_COUNT * 6..].copy_from_slice(&self.delta_trans);
        out
    }

    pub fn decode(v: &[f64]) -> PoseFrame {
        assert_eq!(v.len(), FRAME_DIM, "frame must have {FRAME_DIM} scalars");
        let mut joint_rots = [Rot6D::IDENTITY; JOINT_COUNT];
        for (j, r) in joint_rots.iter_mut().enumerate() {
            *r = Rot6D::from_slice(&v[j * 6..j * 6 + 6]);
        }
        let mut delta_trans = [0.0; 3];
        delta_trans.copy_from_slice(&v[JOINT_COUNT * 6..]);
        PoseFrame { joint_rots, delta_trans }
    }
}

/// Encode a frame from explicit rotation matrices and a displacement.
pub fn encode_frame(rots: &[Mat3; JOINT_COUNT], delta: Vec3) -> [f64; FRAME_DIM] {
    let mut frame = PoseFrame::rest();
    for (j, m) in rots.iter().enumerate() {
        frame.joint_rots[j] = Rot6D { a: m_col(m, 0), b: m_col(m, 1) };
    }
    frame.delta_trans = delta;
    frame.encode()
}

/// A motion clip: a sequence of frames at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub frames: Vec<PoseFrame>,
    pub fps: f64,
    pub normalized: bool,
    pub stats_id: Option<String>,
}

impl MotionClip {
    pub fn new(frames: Vec<PoseFrame>, fps: f64) -> Result<MotionClip> {
        if fps <= 0.0 {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        Ok(MotionClip { frames, fps, normalized: false, stats_id: None })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    /// Flatten to an N x 135 matrix.
    pub fn to_mat(&self) -> Mat {
        let mut m = Mat::zeros(self.frames.len(), FRAME_DIM);
        for (i, f) in self.frames.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&f.encode());
        }
        m
    }

    /// Rebuild a clip from an N x 135 matrix, keeping this clip's metadata.
    pub fn with_mat(&self, m: &Mat) -> MotionClip {
        assert_eq!(m.cols, FRAME_DIM);
        let frames = (0..m.rows).map(|i| PoseFrame::decode(m.row(i))).collect();
        MotionClip { frames, fps: self.fps, normalized: self.normalized, stats_id: self.stats_id.clone() }
    }

    pub fn from_mat(m: &Mat, fps: f64) -> MotionClip {
        assert_eq!(m.cols, FRAME_DIM);
        let frames = (0..m.rows).map(|i| PoseFrame::decode(m.row(i))).collect();
        MotionClip { frames, fps, normalized: false, stats_id: None }
    }
}

/// Per-channel normalization statistics over a training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    /// Compute stats over all frames of the given clips; std floored.
    pub fn from_clips(clips: &[&MotionClip]) -> Result<NormStats> {
        let mut n = 0usize;
        let mut mean = vec![0.0; FRAME_DIM];
        for c in clips {
            if c.normalized {
                return Err(Error::NormalizedInput);
            }
            for f in &c.frames {
                let v = f.encode();
                for (m, x) in mean.iter_mut().zip(v.iter()) {
                    *m += x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyClip);
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; FRAME_DIM];
        for c in clips {
            for f in &c.frames {
                let v = f.encode();
                for (s, (x, m)) in var.iter_mut().zip(v.iter().zip(mean.iter())) {
                    let d = x - m;
                    *s += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn identity() -> NormStats {
        NormStats { mean: vec![0.0; FRAME_DIM], std: vec![1.0; FRAME_DIM] }
    }

    /// Stable identifier derived from the stats content.
    pub fn id(&self) -> String {
        let mut bytes = Vec::with_capacity(FRAME_DIM * 16);
        for x in self.mean.iter().chain(self.std.iter()) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        format!("{:016x}", crate::math::fnv1a(&bytes))
    }
}

/// (x - mean) / std per channel.
pub fn normalize(clip: &MotionClip, stats: &NormStats) -> Result<MotionClip> {
    if stats.mean.len() != FRAME_DIM || stats.std.len() != FRAME_DIM {
        return Err(Error::StatsMismatch(format!(
            "stats have {} channels, expected {FRAME_DIM}",
            stats.mean.len()
        )));
    }
    if clip.normalized {
        return Err(Error::StatsMismatch("clip is already normalized".into()));
    }
    let mut m = clip.to_mat();
    for i in 0..m.rows {
        let row = m.row_mut(i);
        for (c, x) in row.iter_mut().enumerate() {
            *x = (*x - stats.mean[c]) / stats.std[c].max(STD_FLOOR);
        }
    }
    let mut out = clip.with_mat(&m);
    out.normalized = true;
    out.stats_id = Some(stats.id());
    Ok(out)
}

/// x * std + mean per channel; inverse of `normalize`.
pub fn denormalize(clip: &MotionClip, stats: &NormStats) -> Result<MotionClip> {
    if stats.mean.len() != FRAME_DIM || stats.std.len() != FRAME_DIM {
        return Err(Error::StatsMismatch(format!(
            "stats have {} channels, expected {FRAME_DIM}",
            stats.mean.len()
        )));
    }
    if !clip.normalized {
        return Err(Error::StatsMismatch("clip is not normalized".into()));
    }
    if let Some(id) = &clip.stats_id {
        if *id != stats.id() {
            return Err(Error::StatsMismatch(format!(
                "clip was normalized with stats {id}, got {}",
                stats.id()
            )));
        }
    }
    let mut m = clip.to_mat();
    for i in 0..m.rows {
        let row = m.row_mut(i);
        for (c, x) in row.iter_mut().enumerate() {
            *x = *x * stats.std[c].max(STD_FLOOR) + stats.mean[c];
        }
    }
    let mut out = clip.with_mat(&m);
    out.normalized = false;
    out.stats_id = None;
    Ok(out)
}

/// Absolute root positions: pos[k] = start + sum of deltas up to k.
pub fn integrate_root(clip: &MotionClip, start: Vec3) -> Result<Vec<Vec3>> {
    if clip.normalized {
        return Err(Error::NormalizedInput);
    }
    let mut out = Vec::with_capacity(clip.len());
    let mut p = start;
    for f in &clip.frames {
        p = v_add(p, f.delta_trans);
        out.push(p);
    }
    Ok(out)
}

/// Kinematic tree: parent indices and rest-pose child offsets.
#[derive(Debug, Clone)]
pub struct Skeleton {
    /// parent[0] is unused (root); parent[j] < j for j > 0.
    pub parent: [usize; JOINT_COUNT],
    /// Offset of joint j from its parent in the rest pose, meters.
    pub rest_offsets: [Vec3; JOINT_COUNT],
}

/// Joint indices of the default skeleton.
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const SPINE1: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const SPINE2: usize = 6;
    pub const L_ANKLE: usize = 7;
    pub const R_ANKLE: usize = 8;
    pub const SPINE3: usize = 9;
    pub const L_FOOT: usize = 10;
    pub const R_FOOT: usize = 11;
    pub const NECK: usize = 12;
    pub const L_COLLAR: usize = 13;
    pub const R_COLLAR: usize = 14;
    pub const HEAD: usize = 15;
    pub const L_SHOULDER: usize = 16;
    pub const R_SHOULDER: usize = 17;
    pub const L_ELBOW: usize = 18;
    pub const R_ELBOW: usize = 19;
    pub const L_WRIST: usize = 20;
    pub const R_WRIST: usize = 21;
}

/// Spine chain, neck, head, collars, shoulders, elbows, wrists.
pub const UPPER_BODY_JOINTS: [usize; 13] = [3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21];

impl Skeleton {
    /// Standard 22-joint human tree with rest offsets of plausible
    /// proportions (about 1.7 m standing). Facing +X, left is +Y, Z up.
    pub fn default_human() -> Skeleton {
        let parent = [
            usize::MAX, // root
            0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
        ];
        let rest_offsets: [Vec3; JOINT_COUNT] = [
            [0.0, 0.0, 0.0],     // pelvis
            [0.0, 0.09, -0.06],  // l hip
            [0.0, -0.09, -0.06], // r hip
            [0.0, 0.0, 0.12],    // spine1
            [0.0, 0.0, -0.44],   // l knee
            [0.0, 0.0, -0.44],   // r knee
            [0.0, 0.0, 0.14],    // spine2
            [0.0, 0.0, -0.45],   // l ankle
            [0.0, 0.0, -0.45],   // r ankle
            [0.0, 0.0, 0.06],    // spine3
            [0.13, 0.0, -0.05],  // l foot
            [0.13, 0.0, -0.05],  // r foot
            [0.0, 0.0, 0.10],    // neck
            [0.0, 0.07, 0.03],   // l collar
            [0.0, -0.07, 0.03],  // r collar
            [0.0, 0.0, 0.14],    // head
            [0.0, 0.10, 0.02],   // l shoulder
            [0.0, -0.10, 0.02],  // r shoulder
            [0.0, 0.28, 0.0],    // l elbow
            [0.0, -0.28, 0.0],   // r elbow
            [0.0, 0.25, 0.0],    // l wrist
            [0.0, -0.25, 0.0],   // r wrist
        ];
        Skeleton { parent, rest_offsets }
    }

    pub fn validate(&self) -> Result<()> {
        for j in 1..JOINT_COUNT {
            if self.parent[j] >= j {
                return Err(Error::Config(format!(
                    "skeleton parent[{j}] = {} must be < {j}",
                    self.parent[j]
                )));
            }
        }
        Ok(())
    }
}

/// Cached intermediates of one FK evaluation, for the backward pass.
#[derive(Debug, Clone)]
pub struct FkCache {
    pub local_rots: [Mat3; JOINT_COUNT],
    pub world_rots: [Mat3; JOINT_COUNT],
    pub positions: [Vec3; JOINT_COUNT],
}

/// World joint positions for one frame with the root pinned at `root_pos`.
pub fn forward_kinematics(
    frame: &PoseFrame,
    skeleton: &Skeleton,
    root_pos: Vec3,
) -> Result<[Vec3; JOINT_COUNT]> {
    Ok(forward_kinematics_cached(frame, skeleton, root_pos)?.positions)
}

pub fn forward_kinematics_cached(
    frame: &PoseFrame,
    skeleton: &Skeleton,
    root_pos: Vec3,
) -> Result<FkCache> {
    let mut local_rots = [crate::math::MAT3_IDENTITY; JOINT_COUNT];
    for (j, r) in frame.joint_rots.iter().enumerate() {
        local_rots[j] = rot6d_to_matrix(r)?;
    }
    let mut world_rots = [crate::math::MAT3_IDENTITY; JOINT_COUNT];
    let mut positions = [[0.0; 3]; JOINT_COUNT];
    world_rots[0] = local_rots[0];
    positions[0] = root_pos;
    for j in 1..JOINT_COUNT {
        let p = skeleton.parent[j];
        world_rots[j] = m_mul(&world_rots[p], &local_rots[j]);
        positions[j] = v_add(positions[p], m_apply(&world_rots[p], skeleton.rest_offsets[j]));
    }
    Ok(FkCache { local_rots, world_rots, positions })
}

/// Gradient of a scalar loss through forward kinematics.
///
/// `d_positions` holds dL/d(world position) per joint; `d_world_rots`
/// optionally adds dL/d(world rotation) contributions (for quantities
/// hung off a joint's frame). Returns dL/d(frame rotation slots) as a
/// 135-vector (displacement slots left zero) and dL/d(root_pos).
pub fn fk_backward(
    frame: &PoseFrame,
    skeleton: &Skeleton,
    cache: &FkCache,
    d_positions: &[Vec3; JOINT_COUNT],
    d_world_rots: Option<&[Mat3; JOINT_COUNT]>,
) -> ([f64; FRAME_DIM], Vec3) {
    let mut d_pos = *d_positions;
    let mut d_world = match d_world_rots {
        Some(dw) => *dw,
        None => [[[0.0; 3]; 3]; JOINT_COUNT],
    };
    let mut d_local = [[[0.0; 3]; 3]; JOINT_COUNT];

    for j in (1..JOINT_COUNT).rev() {
        let p = skeleton.parent[j];
        // positions[j] = positions[p] + world_rots[p] * offset[j]
        let off = skeleton.rest_offsets[j];
        for r in 0..3 {
            for c in 0..3 {
                d_world[p][r][c] += d_pos[j][r] * off[c];
            }
        }
        d_pos[p] = v_add(d_pos[p], d_pos[j]);
        // world_rots[j] = world_rots[p] * local_rots[j]
        let dw = d_world[j];
        let lr = cache.local_rots[j];
        let wp = cache.world_rots[p];
        for r in 0..3 {
            for c in 0..3 {
                // d world_rots[p][r][k] += dw[r][c] * local[k][c]  (dw * local^T)
                for k in 0..3 {
                    d_world[p][r][k] += dw[r][c] * lr[k][c];
                }
            }
        }
        // d local[k][c] += sum_r wp[r][k] * dw[r][c]  (wp^T * dw)
        for k in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for r in 0..3 {
                    s += wp[r][k] * dw[r][c];
                }
                d_local[j][k][c] += s;
            }
        }
    }
    d_local[0] = d_world[0];

    let mut d_frame = [0.0; FRAME_DIM];
    for j in 0..JOINT_COUNT {
        let (da, db) = rot6d_backward(&frame.joint_rots[j], &d_local[j]);
        d_frame[j * 6..j * 6 + 3].copy_from_slice(&da);
        d_frame[j * 6 + 3..j * 6 + 6].copy_from_slice(&db);
    }
    (d_frame, d_pos[0])
}
