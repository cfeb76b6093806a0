//! Multi-condition guidance: linear combination of per-branch residuals
//! around the unconditioned prediction, residual scale normalization,
//! and per-step gradient updates of the guidance weights.

use crate::error::{Error, Result};
use crate::math::Mat;
use serde::{Deserialize, Serialize};

/// Fused prediction: x_uncond + sum_i lambda_i * residual_i.
pub fn guided_prediction(x_uncond: &Mat, residuals: &[Mat], lambdas: &[f64]) -> Result<Mat> {
    if residuals.len() != lambdas.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} residuals, {} guidance weights",
            residuals.len(),
            lambdas.len()
        )));
    }
    let mut out = x_uncond.clone();
    for (r, l) in residuals.iter().zip(lambdas) {
        if !r.same_shape(x_uncond) {
            return Err(Error::ShapeMismatch(format!(
                "residual {}x{} against prediction {}x{}",
                r.rows, r.cols, x_uncond.rows, x_uncond.cols
            )));
        }
        out.add_scaled(r, *l);
    }
    Ok(out)
}

/// Rescale a residual to the Frobenius norm of a reference residual.
/// A zero reference passes the residual through unchanged.
pub fn normalize_residual_to(residual: &Mat, reference: &Mat) -> Mat {
    let ref_norm = reference.frob();
    if ref_norm == 0.0 {
        return residual.clone();
    }
    let own = residual.frob().max(1e-12);
    let mut out = residual.clone();
    out.scale_in_place(ref_norm / own);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda_init: f64,
    /// Step size of the per-timestep weight update.
    pub eta: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { lambda_init: 1.0, eta: 0.05, lambda_min: 0.0, lambda_max: 4.0 }
    }
}

/// Per-run guidance weights, updated once per denoising step and carried
/// across steps.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub lambdas: Vec<f64>,
    pub eta: f64,
    pub bounds: (f64, f64),
}

impl FusionState {
    pub fn new(n_branches: usize, cfg: &FusionConfig) -> FusionState {
        FusionState {
            lambdas: vec![cfg.lambda_init.clamp(cfg.lambda_min, cfg.lambda_max); n_branches],
            eta: cfg.eta,
            bounds: (cfg.lambda_min, cfg.lambda_max),
        }
    }
}

/// d/d(lambda_i) of ||fused - anchor_i||^2 where fused depends on
/// lambda_i linearly through residual_i.
pub fn fusion_gradient(fused: &Mat, anchor: &Mat, residual: &Mat) -> f64 {
    let diff = fused.sub(anchor);
    2.0 * diff.dot(residual)
}

/// Alignment loss of the fused prediction against one anchor.
pub fn fusion_loss(fused: &Mat, anchor: &Mat) -> f64 {
    let diff = fused.sub(anchor);
    diff.dot(&diff)
}

/// Step size below which one weight update cannot increase the
/// corresponding alignment loss.
pub fn stability_bound(residual: &Mat) -> f64 {
    let n2 = residual.dot(residual);
    if n2 == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (2.0 * n2)
    }
}

/// One gradient step on every guidance weight, clamped to the bounds.
/// `fused` must have been produced by `guided_prediction` with the
/// current weights.
pub fn adaptive_fusion_update(
    fused: &Mat,
    anchors: &[Mat],
    residuals: &[Mat],
    state: &mut FusionState,
) -> Result<()> {
    if anchors.len() != state.lambdas.len() || residuals.len() != state.lambdas.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} anchors, {} residuals, {} weights",
            anchors.len(),
            residuals.len(),
            state.lambdas.len()
        )));
    }
    for i in 0..state.lambdas.len() {
        if !anchors[i].same_shape(fused) || !residuals[i].same_shape(fused) {
            return Err(Error::ShapeMismatch("fusion operand shape".into()));
        }
        let g = fusion_gradient(fused, &anchors[i], &residuals[i]);
        state.lambdas[i] = (state.lambdas[i] - state.eta * g).clamp(state.bounds.0, state.bounds.1);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, crate::math::gauss_vec(rng, r * c))
    }

    #[test]
    fn guidance_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = rand_mat(&mut rng, 3, 5);
        let r1 = rand_mat(&mut rng, 3, 5);
        let r2 = rand_mat(&mut rng, 3, 5);

        // all lambdas zero: the unconditioned prediction
        let y = guided_prediction(&u, &[r1.clone(), r2.clone()], &[0.0, 0.0]).unwrap();
        assert_eq!(y.data, u.data);

        // one branch at lambda 1: exactly u + r
        let y = guided_prediction(&u, &[r1.clone()], &[1.0]).unwrap();
        for i in 0..y.data.len() {
            assert!((y.data[i] - (u.data[i] + r1.data[i])).abs() < 1e-15);
        }

        // two branches match the elementwise oracle
        let y = guided_prediction(&u, &[r1.clone(), r2.clone()], &[0.5, 2.0]).unwrap();
        for i in 0..y.data.len() {
            let expect = u.data[i] + 0.5 * r1.data[i] + 2.0 * r2.data[i];
            assert!((y.data[i] - expect).abs() < 1e-12);
        }

        // superposition: linear in each residual and in each lambda
        let y1 = guided_prediction(&u, &[r1.clone()], &[0.7]).unwrap();
        let y2 = guided_prediction(&u, &[r2.clone()], &[1.3]).unwrap();
        let both = guided_prediction(&u, &[r1.clone(), r2.clone()], &[0.7, 1.3]).unwrap();
        for i in 0..both.data.len() {
            let expect = y1.data[i] + y2.data[i] - u.data[i];
            assert!((both.data[i] - expect).abs() < 1e-12);
        }

        assert!(guided_prediction(&u, &[r1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn residual_normalization_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r_int = rand_mat(&mut rng, 2, 4);
        // equal norms: unchanged
        let same = normalize_residual_to(&r_int, &r_int);
        for (a, b) in same.data.iter().zip(&r_int.data) {
            assert_close(*a, *b, 1e-12, "equal norm");
        }
        // proportional residual scaled down to the reference norm
        let mut twice = r_int.clone();
        twice.scale_in_place(2.0);
        let scaled = normalize_residual_to(&twice, &r_int);
        assert_close(scaled.frob(), r_int.frob(), 1e-12, "scaled to reference");
        for (a, b) in scaled.data.iter().zip(&r_int.data) {
            assert_close(*a, *b, 1e-12, "direction preserved");
        }
        // zero reference passes through
        let zero = Mat::zeros(2, 4);
        let passed = normalize_residual_to(&twice, &zero);
        assert_eq!(passed.data, twice.data);
    }

    #[test]
    fn fusion_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = rand_mat(&mut rng, 3, 6);
            let r1 = rand_mat(&mut rng, 3, 6);
            let r2 = rand_mat(&mut rng, 3, 6);
            let a1 = rand_mat(&mut rng, 3, 6);
            let l = [rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0)];
            let fused = guided_prediction(&u, &[r1.clone(), r2.clone()], &l).unwrap();
            let g = fusion_gradient(&fused, &a1, &r1);

            let h = 1e-3;
            let lp = [l[0] + h, l[1]];
            let lm = [l[0] - h, l[1]];
            let fp = guided_prediction(&u, &[r1.clone(), r2.clone()], &lp).unwrap();
            let fm = guided_prediction(&u, &[r1.clone(), r2.clone()], &lm).unwrap();
            let fd = (fusion_loss(&fp, &a1) - fusion_loss(&fm, &a1)) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-8 * g.abs().max(fd.abs()).max(1.0), "{g} vs {fd}");
        }
    }

    #[test]
    fn anchor_equality_freezes_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = rand_mat(&mut rng, 2, 3);
        let r = rand_mat(&mut rng, 2, 3);
        let fused = guided_prediction(&u, &[r.clone()], &[0.8]).unwrap();
        let mut state = FusionState::new(1, &FusionConfig { lambda_init: 0.8, ..Default::default() });
        // anchor equals the fused prediction: gradient zero, weight unchanged
        adaptive_fusion_update(&fused, &[fused.clone()], &[r], &mut state).unwrap();
        assert_close(state.lambdas[0], 0.8, 1e-15, "unchanged weight");
    }

    #[test]
    fn update_below_stability_bound_never_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..1000 {
            let rows = 2 + (trial % 3);
            let u = rand_mat(&mut rng, rows, 5);
            let r1 = rand_mat(&mut rng, rows, 5);
            let r2 = rand_mat(&mut rng, rows, 5);
            let a1 = rand_mat(&mut rng, rows, 5);
            let a2 = rand_mat(&mut rng, rows, 5);
            let l0 = [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)];
            let eta = 0.9 / (2.0 * r1.dot(&r1).max(r2.dot(&r2)).max(1e-12));

            let residuals = [r1.clone(), r2.clone()];
            let anchors = [a1.clone(), a2.clone()];
            let fused = guided_prediction(&u, &residuals, &l0).unwrap();
            let before = [fusion_loss(&fused, &a1), fusion_loss(&fused, &a2)];

            let mut state = FusionState {
                lambdas: l0.to_vec(),
                eta,
                bounds: (0.0, 4.0),
            };
            adaptive_fusion_update(&fused, &anchors, &residuals, &mut state).unwrap();
            assert!(state.lambdas.iter().all(|l| (0.0..=4.0).contains(l)));

            // recompute each loss with only its own lambda updated
            for i in 0..2 {
                let mut li = l0;
                li[i] = state.lambdas[i];
                let refused = guided_prediction(&u, &residuals, &li).unwrap();
                let after = fusion_loss(&refused, &anchors[i]);
                assert!(
                    after <= before[i] + 1e-9,
                    "trial {trial} branch {i}: loss rose {} -> {after}",
                    before[i]
                );
            }
        }
    }
}
