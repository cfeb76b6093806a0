//! Training objective: reconstruction, final-pelvis, contact, and
//! collision terms with the analytic gradient of the total with respect
//! to the predicted motion.
//!
//! Predictions and ground truth are in normalized space; the contact and
//! collision terms denormalize internally, run forward kinematics on the
//! supervised frames, and query the object's signed distance field. The
//! returned gradient folds the whole chain back to normalized
//! coordinates.

use crate::error::{Error, Result};
use crate::geometry::{BodyProxy, ObjectGeometry};
use crate::math::{m_apply, Mat, Vec3};
use crate::pose::{
    fk_backward, forward_kinematics_cached, NormStats, PoseFrame, Skeleton, FRAME_DIM,
    JOINT_COUNT, STD_FLOOR,
};
use serde::{Deserialize, Serialize};

/// Which end of a motion carries the object interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionTag {
    EndsSitting,
    StartsSitting,
    None,
}

/// Frame mask for the contact/collision terms: the last K frames for
/// motions that end seated, the first K for motions that start seated.
pub fn select_supervision_frames(tag: MotionTag, n: usize, k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > n {
        return Err(Error::BadWindow { k, n });
    }
    let mut mask = vec![false; n];
    match tag {
        MotionTag::EndsSitting => {
            for m in mask.iter_mut().skip(n - k) {
                *m = true;
            }
        }
        MotionTag::StartsSitting => {
            for m in mask.iter_mut().take(k) {
                *m = true;
            }
        }
        MotionTag::None => {}
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rec: f64,
    pub w_pelvis: f64,
    pub w_contact: f64,
    pub w_collision: f64,
    /// Supervision window length in frames.
    pub k_frames: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_rec: 1.0, w_pelvis: 1.0, w_contact: 1.0, w_collision: 1.0, k_frames: 15 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_rec < 0.0 || self.w_pelvis < 0.0 || self.w_contact < 0.0 || self.w_collision < 0.0
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn rec_only(w: f64) -> LossWeights {
        LossWeights { w_rec: w, w_pelvis: 0.0, w_contact: 0.0, w_collision: 0.0, k_frames: 1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub rec: f64,
    pub pelvis: f64,
    pub contact: f64,
    pub collision: f64,
}

/// Geometry context for the contact/collision terms.
pub struct GeometryCtx<'a> {
    pub object: Option<&'a ObjectGeometry>,
    pub skeleton: &'a Skeleton,
    pub proxy: &'a BodyProxy,
    /// Indices into `proxy.spheres` that should be pulled to the surface.
    pub contact_proxies: &'a [usize],
    pub stats: &'a NormStats,
    /// Contact distances are clamped at this value (meters).
    pub contact_clamp: f64,
}

/// Default contact set: pelvis and both upper-leg spheres of the
/// standard proxy (one sphere per joint, so sphere index = joint index).
pub const CONTACT_PROXIES: [usize; 3] = [0, 1, 2];
pub const CONTACT_CLAMP: f64 = 0.5;

/// Frame slots supervised by the pelvis term: the root rotation plus the
/// root displacement of the final frame.
const PELVIS_SLOTS: [usize; 9] = [0, 1, 2, 3, 4, 5, 132, 133, 134];

/// Weighted total with per-term breakdown and dL/d(prediction).
pub fn supervised_loss(
    pred: &Mat,
    gt: &Mat,
    mask: &[bool],
    w: &LossWeights,
    ctx: &GeometryCtx,
) -> Result<(LossTerms, Mat)> {
    if !pred.same_shape(gt) || pred.cols != FRAME_DIM {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}, ground truth {}x{}",
            pred.rows, pred.cols, gt.rows, gt.cols
        )));
    }
    if mask.len() != pred.rows {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} entries for {} frames",
            mask.len(),
            pred.rows
        )));
    }
    w.validate()?;
    let needs_geometry = w.w_contact > 0.0 || w.w_collision > 0.0;
    if needs_geometry && ctx.object.is_none() {
        return Err(Error::MissingObject);
    }

    let n = pred.rows;
    let count = (n * FRAME_DIM) as f64;
    let mut grad = Mat::zeros(n, FRAME_DIM);
    let mut terms = LossTerms::default();

    // reconstruction: mean squared error over all entries
    for i in 0..pred.data.len() {
        let d = pred.data[i] - gt.data[i];
        terms.rec += d * d;
        grad.data[i] += w.w_rec * 2.0 * d / count;
    }
    terms.rec /= count;

    // final pelvis pose: squared error over the root slots of the last frame
    if n > 0 {
        let last = n - 1;
        for &slot in &PELVIS_SLOTS {
            let d = pred.at(last, slot) - gt.at(last, slot);
            terms.pelvis += d * d;
            *grad.at_mut(last, slot) += w.w_pelvis * 2.0 * d;
        }
    }

    // contact and collision over the supervised frames
    let masked: Vec<usize> = (0..n).filter(|i| mask[*i]).collect();
    if needs_geometry && !masked.is_empty() {
        let obj = ctx.object.unwrap();
        let stats = ctx.stats;
        // denormalized prediction
        let mut denorm = pred.clone();
        for r in 0..n {
            let row = denorm.row_mut(r);
            for c in 0..FRAME_DIM {
                row[c] = row[c] * stats.std[c].max(STD_FLOOR) + stats.mean[c];
            }
        }
        // absolute root positions
        let mut roots = vec![[0.0f64; 3]; n];
        let mut acc = [0.0f64; 3];
        for r in 0..n {
            for c in 0..3 {
                acc[c] += denorm.at(r, 132 + c);
            }
            roots[r] = acc;
        }

        let contact_on = w.w_contact > 0.0 && !ctx.contact_proxies.is_empty();
        let collision_on = w.w_collision > 0.0 && !ctx.proxy.spheres.is_empty();
        let n_contact = (masked.len() * ctx.contact_proxies.len()).max(1) as f64;
        let n_collision = (masked.len() * ctx.proxy.spheres.len()).max(1) as f64;
        let mut d_roots = vec![[0.0f64; 3]; n];

        for &k in &masked {
            let frame = PoseFrame::decode(denorm.row(k));
            let cache = forward_kinematics_cached(&frame, ctx.skeleton, roots[k])?;
            let centers = ctx.proxy.centers(&cache);

            let mut d_positions = [[0.0f64; 3]; JOINT_COUNT];
            let mut d_world = [[[0.0f64; 3]; 3]; JOINT_COUNT];
            let mut any = false;

            for (pi, sphere) in ctx.proxy.spheres.iter().enumerate() {
                let (sdf, sgrad) = obj.sdf_grad(centers[pi]);
                let mut d_sdf = 0.0;
                if collision_on {
                    let pen = (sphere.radius - sdf).max(0.0);
                    terms.collision += pen * pen;
                    if pen > 0.0 {
                        d_sdf += w.w_collision * 2.0 * pen * (-1.0) / n_collision;
                    }
                }
                if contact_on && ctx.contact_proxies.contains(&pi) {
                    let gap = sdf - sphere.radius;
                    let clamped = gap.clamp(0.0, ctx.contact_clamp);
                    terms.contact += clamped;
                    if gap > 0.0 && gap < ctx.contact_clamp {
                        d_sdf += w.w_contact / n_contact;
                    }
                }
                if d_sdf != 0.0 {
                    any = true;
                    let dc: Vec3 = [d_sdf * sgrad[0], d_sdf * sgrad[1], d_sdf * sgrad[2]];
                    for c in 0..3 {
                        d_positions[sphere.joint][c] += dc[c];
                    }
                    let off = sphere.local_offset;
                    if off != [0.0; 3] {
                        // center = position + world_rot * offset
                        let _ = m_apply(&cache.world_rots[sphere.joint], off);
                        for r in 0..3 {
                            for c in 0..3 {
                                d_world[sphere.joint][r][c] += dc[r] * off[c];
                            }
                        }
                    }
                }
            }

            if any {
                let (d_frame, d_root) =
                    fk_backward(&frame, ctx.skeleton, &cache, &d_positions, Some(&d_world));
                let grow = grad.row_mut(k);
                for slot in 0..JOINT_COUNT * 6 {
                    grow[slot] += d_frame[slot] * stats.std[slot].max(STD_FLOOR);
                }
                for c in 0..3 {
                    d_roots[k][c] += d_root[c];
                }
            }
        }

        terms.contact /= n_contact;
        terms.collision /= n_collision;

        // root position k depends on every displacement up to k
        let mut suffix = [0.0f64; 3];
        for k in (0..n).rev() {
            for c in 0..3 {
                suffix[c] += d_roots[k][c];
                *grad.at_mut(k, 132 + c) += suffix[c] * stats.std[132 + c].max(STD_FLOOR);
            }
        }
    }

    terms.total = w.w_rec * terms.rec
        + w.w_pelvis * terms.pelvis
        + w.w_contact * terms.contact
        + w.w_collision * terms.collision;
    Ok((terms, grad))
}
