//! Reverse-mode gradients through the denoiser.
//!
//! Gradients accumulate into parameter-shaped structs. Passing `None`
//! for a parameter set freezes it: activation gradients still flow
//! through (the branch stream reaches the loss only through the base
//! stack), but nothing is accumulated for the frozen set.

use super::forward::{BlockCache, LnCache, Trace};
use super::{Block, BranchParams, DenoiserParams, ModelConfig, N_BLOCKS};
use crate::error::{Error, Result};
use crate::math::{matmul, matmul_nt, matmul_tn, Mat};
use crate::nn::{silu_prime, Linear};

/// Gradients share the parameter layout.
pub type DenoiserGrads = DenoiserParams;
pub type BranchGrads = BranchParams;

fn linear_backward(l: &Linear, x: &Mat, dy: &Mat, grad: Option<&mut Linear>) -> Mat {
    match grad {
        Some(g) => l.backward(x, dy, g),
        None => l.backward_input(dy),
    }
}

/// dX through a layer norm; optionally accumulates dgamma/dbeta.
fn ln_backward(
    cache: &LnCache,
    gamma: &[f64],
    dy: &Mat,
    mut grads: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
) -> Mat {
    let d = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        if let Some((dg, db)) = grads.as_mut() {
            for c in 0..dy.cols {
                dg[c] += dyr[c] * xh[c];
                db[c] += dyr[c];
            }
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..dy.cols {
            let dxh = dyr[c] * gamma[c];
            m1 += dxh;
            m2 += dxh * xh[c];
        }
        m1 /= d;
        m2 /= d;
        let is = cache.invstd[r];
        let out = dx.row_mut(r);
        for c in 0..dy.cols {
            let dxh = dyr[c] * gamma[c];
            out[c] = (dxh - m1 - xh[c] * m2) * is;
        }
    }
    dx
}

/// Rebuild a layer norm's output from its cache.
fn ln_output(cache: &LnCache, gamma: &[f64], beta: &[f64]) -> Mat {
    let mut out = cache.xhat.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for c in 0..row.len() {
            row[c] = gamma[c] * row[c] + beta[c];
        }
    }
    out
}

fn softmax_backward(probs: &Mat, dprobs: &Mat) -> Mat {
    let mut out = Mat::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        let o = out.row_mut(r);
        for c in 0..p.len() {
            o[c] = p[c] * (dp[c] - dot);
        }
    }
    out
}

/// dX through one transformer block.
pub fn block_backward(
    block: &Block,
    cache: &BlockCache,
    dy: &Mat,
    n_heads: usize,
    mut grad: Option<&mut Block>,
) -> Mat {
    let t = dy.rows;
    let d = dy.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // out = res1 + ff2(silu(ff1(ln2(res1))))
    let mut d_res1 = dy.clone();
    let d_ff_hidden = linear_backward(
        &block.ff2,
        &cache.ff_hidden,
        dy,
        grad.as_deref_mut().map(|g| &mut g.ff2),
    );
    let mut d_ff_pre = d_ff_hidden;
    for (g, p) in d_ff_pre.data.iter_mut().zip(&cache.ff_pre.data) {
        *g *= silu_prime(*p);
    }
    let ln2 = cache.ln2.as_ref().expect("trace recorded");
    let xh2 = ln_output(ln2, &block.ln2_gamma, &block.ln2_beta);
    let d_xh2 = linear_backward(&block.ff1, &xh2, &d_ff_pre, grad.as_deref_mut().map(|g| &mut g.ff1));
    let d_ln2_in = ln_backward(
        ln2,
        &block.ln2_gamma,
        &d_xh2,
        grad.as_deref_mut().map(|g| (&mut g.ln2_gamma, &mut g.ln2_beta)),
    );
    d_res1.add_in_place(&d_ln2_in);

    // res1 = x + wo(attn_cat)
    let mut d_x = d_res1.clone();
    let d_attn_cat = linear_backward(
        &block.wo,
        &cache.attn_cat,
        &d_res1,
        grad.as_deref_mut().map(|g| &mut g.wo),
    );

    // attention heads
    let mut dq = Mat::zeros(t, d);
    let mut dk = Mat::zeros(t, d);
    let mut dv = Mat::zeros(t, d);
    for h in 0..n_heads {
        let d_o = super::forward::slice_head(&d_attn_cat, h, dh);
        let qs = super::forward::slice_head(&cache.q, h, dh);
        let ks = super::forward::slice_head(&cache.k, h, dh);
        let vs = super::forward::slice_head(&cache.v, h, dh);
        let probs = &cache.probs[h];
        // o = probs * v
        let dprobs = Mat::from_vec(t, t, matmul_nt(&d_o.data, &vs.data, t, dh, t));
        let dvh = Mat::from_vec(t, dh, matmul_tn(&probs.data, &d_o.data, t, t, dh));
        let mut dscores = softmax_backward(probs, &dprobs);
        dscores.scale_in_place(scale);
        let dqh = Mat::from_vec(t, dh, matmul(&dscores.data, &ks.data, t, t, dh));
        let dkh = Mat::from_vec(t, dh, matmul_tn(&dscores.data, &qs.data, t, t, dh));
        for r in 0..t {
            dq.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dqh.row(r));
            dk.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dkh.row(r));
            dv.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dvh.row(r));
        }
    }

    let ln1 = cache.ln1.as_ref().expect("trace recorded");
    let xh1 = ln_output(ln1, &block.ln1_gamma, &block.ln1_beta);
    let mut d_xh1 = linear_backward(&block.wq, &xh1, &dq, grad.as_deref_mut().map(|g| &mut g.wq));
    d_xh1.add_in_place(&linear_backward(&block.wk, &xh1, &dk, grad.as_deref_mut().map(|g| &mut g.wk)));
    d_xh1.add_in_place(&linear_backward(&block.wv, &xh1, &dv, grad.as_deref_mut().map(|g| &mut g.wv)));
    let d_ln1_in = ln_backward(
        ln1,
        &block.ln1_gamma,
        &d_xh1,
        grad.as_deref_mut().map(|g| (&mut g.ln1_gamma, &mut g.ln1_beta)),
    );
    d_x.add_in_place(&d_ln1_in);
    d_x
}

fn frame_rows(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.rows - 1, m.cols);
    for r in 0..out.rows {
        out.row_mut(r).copy_from_slice(m.row(r + 1));
    }
    out
}

/// Gradients of a scalar loss with `d_out` = dL/d(prediction).
///
/// `mdm_grads` and `branch_grads` receive accumulated parameter
/// gradients; pass `None` to freeze a set. The branch arguments must
/// match how the forward pass was run.
pub fn backward(
    trace: &Trace,
    d_out: &Mat,
    params: &DenoiserParams,
    cfg: &ModelConfig,
    branch: Option<&BranchParams>,
    mut mdm_grads: Option<&mut DenoiserGrads>,
    mut branch_grads: Option<&mut BranchGrads>,
) -> Result<()> {
    if trace.base_caches.len() != N_BLOCKS {
        return Err(Error::NoTrace);
    }
    if !d_out.same_shape(&Mat::zeros(trace.x_in.rows, crate::pose::FRAME_DIM)) {
        return Err(Error::ShapeMismatch(format!(
            "loss gradient is {}x{}, prediction was {}x{}",
            d_out.rows,
            d_out.cols,
            trace.x_in.rows,
            crate::pose::FRAME_DIM
        )));
    }
    let n = trace.x_in.rows;
    let d = cfg.d_model;

    let d_out_in = linear_backward(
        &params.out_proj,
        &trace.out_in,
        d_out,
        mdm_grads.as_deref_mut().map(|g| &mut g.out_proj),
    );

    // gradient flowing into each branch block output
    let branch_active = branch.is_some() && trace.branch.is_some();
    let mut d_c_outs: Vec<Mat> = if branch_active {
        (0..N_BLOCKS).map(|_| Mat::zeros(n, d)).collect()
    } else {
        Vec::new()
    };
    let mut d_gates = vec![0.0; N_BLOCKS];

    if branch_active {
        let bp = branch.unwrap();
        let bt = trace.branch.as_ref().unwrap();
        d_c_outs[N_BLOCKS - 1].add_scaled(&d_out_in, bp.gates[N_BLOCKS - 1]);
        d_gates[N_BLOCKS - 1] += bt.c_outs[N_BLOCKS - 1].dot(&d_out_in);
    }

    // base stack, last block first
    let mut dh = Mat::zeros(n + 1, d);
    for r in 0..n {
        dh.row_mut(r + 1).copy_from_slice(d_out_in.row(r));
    }
    for i in (0..N_BLOCKS).rev() {
        let d_input = block_backward(
            &params.blocks[i],
            &trace.base_caches[i],
            &dh,
            cfg.n_heads,
            mdm_grads.as_deref_mut().map(|g| &mut g.blocks[i]),
        );
        if i > 0 && branch_active {
            let bp = branch.unwrap();
            let bt = trace.branch.as_ref().unwrap();
            let d_frames = frame_rows(&d_input);
            d_c_outs[i - 1].add_scaled(&d_frames, bp.gates[i - 1]);
            d_gates[i - 1] += bt.c_outs[i - 1].dot(&d_frames);
        }
        dh = d_input;
    }

    // condition token and frame projections
    if let Some(g) = mdm_grads.as_deref_mut() {
        let d_cond_token = Mat::from_vec(1, d, dh.row(0).to_vec());
        let cond_in = Mat::from_vec(1, trace.cond_in.len(), trace.cond_in.clone());
        let d_cond_in = params.cond_proj.backward(&cond_in, &d_cond_token, &mut g.cond_proj);
        if let Some(feats) = trace.goal_feats {
            let d_content = Mat::from_vec(1, cfg.d_cond, d_cond_in.row(0)[..cfg.d_cond].to_vec());
            let fmat = Mat::from_vec(1, 5, feats.to_vec());
            params.goal_proj.backward(&fmat, &d_content, &mut g.goal_proj);
        }
        let d_frames = frame_rows(&dh);
        params.in_proj.backward(&trace.x_in, &d_frames, &mut g.in_proj);
    }

    // branch stream
    if branch_active {
        if let Some(bg) = branch_grads.as_deref_mut() {
            let bp = branch.unwrap();
            let bt = trace.branch.as_ref().unwrap();
            for (g, dg) in bg.gates.iter_mut().zip(&d_gates) {
                *g += dg;
            }
            let mut dc = d_c_outs.pop().unwrap();
            for i in (0..N_BLOCKS).rev() {
                let d_prev = block_backward(
                    &bp.blocks[i],
                    &bt.branch_caches[i],
                    &dc,
                    cfg.n_heads,
                    Some(&mut bg.blocks[i]),
                );
                if i > 0 {
                    dc = d_c_outs.pop().unwrap();
                    dc.add_in_place(&d_prev);
                } else {
                    bp.encoder.backward(&bt.enc_cache, &d_prev, &mut bg.encoder);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::forward::{adapted_forward, mdm_forward};
    use crate::encoders::GoalSpec;
    use crate::pose::FRAME_DIM;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            d_cond: 8,
            d_time: 8,
            n_bps: 4,
            bps_seed: 0,
            merge_hidden: 6,
            n_bands: 4,
            d_txt: 4,
            fps: 20.0,
            max_frames: 16,
        }
    }

    /// Relative agreement with an absolute floor: central differences
    /// carry ~1e-10 of rounding noise at step 1e-4, which would swamp a
    /// pure ratio for analytically-zero gradients (e.g. key biases,
    /// which cancel in the row-wise softmax).
    fn grad_close(analytic: f64, fd: f64) -> bool {
        let diff = (analytic - fd).abs();
        diff <= 1e-4 * analytic.abs().max(fd.abs()) || diff <= 1e-7
    }

    /// Weighted-sum losses make every output entry contribute.
    fn loss_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        crate::math::gauss_vec(rng, n * FRAME_DIM)
    }

    #[test]
    fn mdm_gradients_match_finite_differences_spot_check() {
        let cfg = tiny_cfg();
        let params = DenoiserParams::init(&cfg, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 3;
        let x = Mat::from_vec(n, FRAME_DIM, crate::math::gauss_vec(&mut rng, n * FRAME_DIM));
        let prompt: Vec<f64> = crate::math::gauss_vec(&mut rng, cfg.d_cond);
        let goal = GoalSpec::new([0.4, -0.2], 0.5, 1.0);
        let w = loss_weights(&mut rng, n);

        let loss = |p: &DenoiserParams| -> f64 {
            let y = mdm_forward(&x, 2, 10, &prompt, Some(&goal), p, &cfg, None).unwrap();
            y.data.iter().zip(&w).map(|(a, b)| a * b).sum()
        };

        let mut trace = None;
        let y = mdm_forward(&x, 2, 10, &prompt, Some(&goal), &params, &cfg, Some(&mut trace)).unwrap();
        let trace = trace.unwrap();
        let d_out = Mat::from_vec(y.rows, y.cols, w.clone());
        let mut grads = DenoiserParams::zeros(&cfg);
        backward(&trace, &d_out, &params, &cfg, None, Some(&mut grads), None).unwrap();

        // spot-check a spread of parameters in every array
        let h = 1e-4;
        let mut names: Vec<String> = Vec::new();
        grads.visit(&mut |name, _| names.push(name.to_string()));
        for name in names {
            let mut idxs = Vec::new();
            grads.visit(&mut |n2, v| {
                if n2 == name {
                    idxs = vec![0, v.len() / 2, v.len() - 1];
                    idxs.dedup();
                }
            });
            for idx in idxs {
                let mut plus = params.clone();
                plus.visit_mut(&mut |n2, v| {
                    if n2 == name {
                        v[idx] += h;
                    }
                });
                let mut minus = params.clone();
                minus.visit_mut(&mut |n2, v| {
                    if n2 == name {
                        v[idx] -= h;
                    }
                });
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let mut got = 0.0;
                grads.visit(&mut |n2, v| {
                    if n2 == name {
                        got = v[idx];
                    }
                });
                assert!(
                    grad_close(got, fd),
                    "{name}[{idx}]: analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn branch_gradients_match_finite_differences_spot_check() {
        let cfg = tiny_cfg();
        let params = DenoiserParams::init(&cfg, 51);
        let mut branch = BranchParams::init("interaction", &[8, 6, 8], &cfg, 52);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        // nonzero gates so the branch actually reaches the loss
        for g in &mut branch.gates {
            *g = rng.gen_range(0.2..0.8);
        }
        let n = 3;
        let x = Mat::from_vec(n, FRAME_DIM, crate::math::gauss_vec(&mut rng, n * FRAME_DIM));
        let feats = Mat::from_vec(n, 8, crate::math::gauss_vec(&mut rng, n * 8));
        let prompt: Vec<f64> = crate::math::gauss_vec(&mut rng, cfg.d_cond);
        let w = loss_weights(&mut rng, n);

        let loss = |b: &BranchParams| -> f64 {
            let y = adapted_forward(&x, 1, 10, &prompt, None, &params, &cfg, b, &feats, None)
                .unwrap();
            y.data.iter().zip(&w).map(|(a, b)| a * b).sum()
        };

        let mut trace = None;
        let y = adapted_forward(
            &x, 1, 10, &prompt, None, &params, &cfg, &branch, &feats, Some(&mut trace),
        )
        .unwrap();
        let trace = trace.unwrap();
        let d_out = Mat::from_vec(y.rows, y.cols, w.clone());
        let mut bgrads = branch.zeros_like(&cfg);
        backward(&trace, &d_out, &params, &cfg, Some(&branch), None, Some(&mut bgrads)).unwrap();

        let h = 1e-4;
        let mut names: Vec<String> = Vec::new();
        bgrads.visit(&mut |name, _| names.push(name.to_string()));
        for name in names {
            let mut idxs = Vec::new();
            bgrads.visit(&mut |n2, v| {
                if n2 == name {
                    idxs = vec![0, v.len() / 2, v.len() - 1];
                    idxs.dedup();
                }
            });
            for idx in idxs {
                let mut plus = branch.clone();
                plus.visit_mut(&mut |n2, v| {
                    if n2 == name {
                        v[idx] += h;
                    }
                });
                let mut minus = branch.clone();
                minus.visit_mut(&mut |n2, v| {
                    if n2 == name {
                        v[idx] -= h;
                    }
                });
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let mut got = 0.0;
                bgrads.visit(&mut |n2, v| {
                    if n2 == name {
                        got = v[idx];
                    }
                });
                assert!(
                    grad_close(got, fd),
                    "{name}[{idx}]: analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn frozen_base_receives_no_gradient() {
        let cfg = tiny_cfg();
        let params = DenoiserParams::init(&cfg, 61);
        let mut branch = BranchParams::init("cospeech", &[5, 8], &cfg, 62);
        branch.gates[2] = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let n = 2;
        let x = Mat::from_vec(n, FRAME_DIM, crate::math::gauss_vec(&mut rng, n * FRAME_DIM));
        let feats = Mat::from_vec(n, 5, crate::math::gauss_vec(&mut rng, n * 5));
        let prompt = vec![0.1; cfg.d_cond];

        let mut trace = None;
        let y = adapted_forward(
            &x, 1, 10, &prompt, None, &params, &cfg, &branch, &feats, Some(&mut trace),
        )
        .unwrap();
        let d_out = Mat::from_vec(y.rows, y.cols, vec![1.0; y.data.len()]);
        let mut bgrads = branch.zeros_like(&cfg);
        // base frozen: only branch grads come back, and branch grads are
        // nonzero through the injection path
        backward(
            &trace.unwrap(),
            &d_out,
            &params,
            &cfg,
            Some(&branch),
            None,
            Some(&mut bgrads),
        )
        .unwrap();
        let mut any_nonzero = false;
        bgrads.visit(&mut |_, v| any_nonzero |= v.iter().any(|x| *x != 0.0));
        assert!(any_nonzero, "branch gradients should be nonzero");
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let cfg = tiny_cfg();
        let params = DenoiserParams::init(&cfg, 71);
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let x = Mat::from_vec(2, FRAME_DIM, crate::math::gauss_vec(&mut rng, 2 * FRAME_DIM));
        let prompt = vec![0.5; cfg.d_cond];
        let mut trace = None;
        mdm_forward(&x, 0, 10, &prompt, None, &params, &cfg, Some(&mut trace)).unwrap();
        let d_out = Mat::zeros(2, FRAME_DIM);
        let mut grads = DenoiserParams::zeros(&cfg);
        backward(&trace.unwrap(), &d_out, &params, &cfg, None, Some(&mut grads), None).unwrap();
        grads.visit(&mut |name, v| {
            assert!(v.iter().all(|x| *x == 0.0), "{name} should be zero");
        });
    }
}
