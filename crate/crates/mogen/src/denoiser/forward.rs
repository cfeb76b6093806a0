//! Forward evaluation of the denoiser and its adaptation branches.
//!
//! Token layout: one condition token (projected prompt/goal content plus
//! the timestep embedding) followed by N frame tokens. The output
//! projection reads the frame tokens only, so the prediction has the
//! input's shape.
//!
//! With a branch attached, the branch stream runs its own block stack on
//! the encoded condition features; block i's output, scaled by gate i, is
//! added to the frame tokens entering base block i+1 (the last one feeds
//! the output projection instead). The condition token never receives a
//! branch residual.

use super::{Block, BranchParams, DenoiserParams, ModelConfig, N_BLOCKS};
use crate::encoders::GoalSpec;
use crate::error::{Error, Result};
use crate::math::{matmul, matmul_nt, Mat};
use crate::nn::{silu, MlpCache};
use crate::pose::FRAME_DIM;

pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal timestep embedding; distinct for every step of a schedule.
pub fn time_embed(t: usize, total: usize, d_time: usize) -> Result<Vec<f64>> {
    if t >= total {
        return Err(Error::StepOutOfRange { t, total });
    }
    Ok(sinusoid(t as f64, d_time))
}

/// Sinusoidal position encoding for frame tokens.
pub fn positional_encoding(n: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(n, d);
    for i in 0..n {
        m.row_mut(i).copy_from_slice(&sinusoid(i as f64, d));
    }
    m
}

fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for i in 0..d / 2 {
        let omega = 10000f64.powf(-2.0 * i as f64 / d as f64);
        v[2 * i] = (pos * omega).sin();
        v[2 * i + 1] = (pos * omega).cos();
    }
    v
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Mat,
    pub invstd: Vec<f64>,
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], cache: Option<&mut Option<LnCache>>) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut invstd = vec![0.0; x.rows];
    let d = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        invstd[r] = is;
        let xh = xhat.row_mut(r);
        let o = out.row_mut(r);
        for c in 0..x.cols {
            let h = (row[c] - mu) * is;
            xh[c] = h;
            o[c] = gamma[c] * h + beta[c];
        }
    }
    if let Some(slot) = cache {
        *slot = Some(LnCache { xhat, invstd });
    }
    out
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x: Mat,
    pub ln1: Option<LnCache>,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Per-head attention weights, each T x T.
    pub probs: Vec<Mat>,
    /// Concatenated head outputs, before the output projection.
    pub attn_cat: Mat,
    pub res1: Mat,
    pub ln2: Option<LnCache>,
    pub ff_pre: Mat,
    pub ff_hidden: Mat,
}

pub fn block_forward(
    block: &Block,
    x: &Mat,
    n_heads: usize,
    cache: Option<&mut Vec<BlockCache>>,
) -> Mat {
    let t = x.rows;
    let d = x.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut ln1_cache = None;
    let xh = layer_norm(x, &block.ln1_gamma, &block.ln1_beta, Some(&mut ln1_cache));
    let q = block.wq.forward(&xh);
    let k = block.wk.forward(&xh);
    let v = block.wv.forward(&xh);

    let mut probs = Vec::with_capacity(n_heads);
    let mut attn_cat = Mat::zeros(t, d);
    for h in 0..n_heads {
        let qs = slice_head(&q, h, dh);
        let ks = slice_head(&k, h, dh);
        let vs = slice_head(&v, h, dh);
        let mut scores = Mat::from_vec(t, t, matmul_nt(&qs.data, &ks.data, t, dh, t));
        scores.scale_in_place(scale);
        let p = softmax_rows(&scores);
        let o = Mat::from_vec(t, dh, matmul(&p.data, &vs.data, t, t, dh));
        for r in 0..t {
            attn_cat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(o.row(r));
        }
        probs.push(p);
    }
    let proj = block.wo.forward(&attn_cat);
    let mut res1 = x.clone();
    res1.add_in_place(&proj);

    let mut ln2_cache = None;
    let xh2 = layer_norm(&res1, &block.ln2_gamma, &block.ln2_beta, Some(&mut ln2_cache));
    let ff_pre = block.ff1.forward(&xh2);
    let mut ff_hidden = ff_pre.clone();
    for v in &mut ff_hidden.data {
        *v = silu(*v);
    }
    let ff_out = block.ff2.forward(&ff_hidden);
    let mut out = res1.clone();
    out.add_in_place(&ff_out);

    if let Some(caches) = cache {
        caches.push(BlockCache {
            x: x.clone(),
            ln1: ln1_cache,
            q,
            k,
            v,
            probs,
            attn_cat,
            res1,
            ln2: ln2_cache,
            ff_pre,
            ff_hidden,
        });
    }
    out
}

pub(super) fn slice_head(m: &Mat, h: usize, dh: usize) -> Mat {
    let mut out = Mat::zeros(m.rows, dh);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

pub(super) fn softmax_rows(scores: &Mat) -> Mat {
    let mut out = Mat::zeros(scores.rows, scores.cols);
    for r in 0..scores.rows {
        let row = scores.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut sum = 0.0;
        for c in 0..row.len() {
            let e = (row[c] - max).exp();
            o[c] = e;
            sum += e;
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace {
    pub x_in: Mat,
    pub cond_in: Vec<f64>,
    pub goal_feats: Option<[f64; 5]>,
    pub base_caches: Vec<BlockCache>,
    /// Frame-token matrix fed to the output projection.
    pub out_in: Mat,
    pub branch: Option<BranchTrace>,
}

#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub feats: Mat,
    pub enc_cache: MlpCache,
    /// Encoder output (input to branch block 0).
    pub c0: Mat,
    /// Output of each branch block.
    pub c_outs: Vec<Mat>,
    pub branch_caches: Vec<BlockCache>,
}

/// Condition content vector: prompt embedding plus the projected goal
/// when present. Zero content with no goal is the unconditioned case.
fn cond_content(
    prompt: &[f64],
    goal: Option<&GoalSpec>,
    params: &DenoiserParams,
    cfg: &ModelConfig,
) -> Result<(Vec<f64>, Option<[f64; 5]>)> {
    if prompt.len() != cfg.d_cond {
        return Err(Error::ShapeMismatch(format!(
            "prompt embedding has {} dims, expected {}",
            prompt.len(),
            cfg.d_cond
        )));
    }
    let mut content = prompt.to_vec();
    let mut goal_feats = None;
    if let Some(g) = goal {
        let feats = g.features();
        let emb = params.goal_proj.forward_row(&feats);
        for (c, e) in content.iter_mut().zip(&emb) {
            *c += e;
        }
        goal_feats = Some(feats);
    }
    Ok((content, goal_feats))
}

/// Predict the clean motion from a noisy one with the base network only.
pub fn mdm_forward(
    x_t: &Mat,
    t: usize,
    total_steps: usize,
    prompt: &[f64],
    goal: Option<&GoalSpec>,
    params: &DenoiserParams,
    cfg: &ModelConfig,
    trace: Option<&mut Option<Trace>>,
) -> Result<Mat> {
    forward_impl(x_t, t, total_steps, prompt, goal, params, cfg, None, None, trace)
}

/// Predict the clean motion with one adaptation branch injecting its
/// activations. `cond_feats` holds the branch's raw per-frame condition
/// features (N rows).
pub fn adapted_forward(
    x_t: &Mat,
    t: usize,
    total_steps: usize,
    prompt: &[f64],
    goal: Option<&GoalSpec>,
    params: &DenoiserParams,
    cfg: &ModelConfig,
    branch: &BranchParams,
    cond_feats: &Mat,
    trace: Option<&mut Option<Trace>>,
) -> Result<Mat> {
    forward_impl(
        x_t,
        t,
        total_steps,
        prompt,
        goal,
        params,
        cfg,
        Some(branch),
        Some(cond_feats),
        trace,
    )
}

#[allow(clippy::too_many_arguments)]
fn forward_impl(
    x_t: &Mat,
    t: usize,
    total_steps: usize,
    prompt: &[f64],
    goal: Option<&GoalSpec>,
    params: &DenoiserParams,
    cfg: &ModelConfig,
    branch: Option<&BranchParams>,
    cond_feats: Option<&Mat>,
    trace: Option<&mut Option<Trace>>,
) -> Result<Mat> {
    if x_t.cols != FRAME_DIM {
        return Err(Error::ShapeMismatch(format!(
            "input frames have {} dims, expected {FRAME_DIM}",
            x_t.cols
        )));
    }
    let n = x_t.rows;
    let d = cfg.d_model;
    let record = trace.is_some();

    // branch stream
    let mut branch_trace: Option<BranchTrace> = None;
    let mut c_outs: Vec<Mat> = Vec::new();
    if let Some(bp) = branch {
        let feats = cond_feats.ok_or_else(|| Error::MissingCondition(bp.name.clone()))?;
        if feats.rows != n {
            return Err(Error::ShapeMismatch(format!(
                "condition features have {} rows for {} frames",
                feats.rows, n
            )));
        }
        if feats.cols != bp.encoder.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "condition features have {} dims, encoder expects {}",
                feats.cols,
                bp.encoder.in_dim()
            )));
        }
        let mut enc_cache = MlpCache::default();
        let c0 = bp.encoder.forward(feats, if record { Some(&mut enc_cache) } else { None });
        let mut branch_caches = Vec::new();
        let mut c = c0.clone();
        for blk in &bp.blocks {
            c = block_forward(
                blk,
                &c,
                cfg.n_heads,
                if record { Some(&mut branch_caches) } else { None },
            );
            c_outs.push(c.clone());
        }
        if record {
            branch_trace = Some(BranchTrace {
                feats: feats.clone(),
                enc_cache,
                c0,
                c_outs: c_outs.clone(),
                branch_caches,
            });
        }
    }

    // condition token
    let (content, goal_feats) = cond_content(prompt, goal, params, cfg)?;
    let te = time_embed(t, total_steps, cfg.d_time)?;
    let mut cond_in = content;
    cond_in.extend_from_slice(&te);
    let cond_token = params.cond_proj.forward_row(&cond_in);

    // frame tokens with position encoding
    let frames = params.in_proj.forward(x_t);
    let pe = positional_encoding(n, d);
    let mut h = Mat::zeros(n + 1, d);
    h.row_mut(0).copy_from_slice(&cond_token);
    for r in 0..n {
        let dst = h.row_mut(r + 1);
        for c in 0..d {
            dst[c] = frames.at(r, c) + pe.at(r, c);
        }
    }
    // base stack with gated injections on the frame rows
    let mut base_caches = Vec::new();
    let gates = branch.map(|b| b.gates.as_slice());
    for (i, blk) in params.blocks.iter().enumerate() {
        if i > 0 {
            if let (Some(g), true) = (gates, !c_outs.is_empty()) {
                inject(&mut h, &c_outs[i - 1], g[i - 1]);
            }
        }
        h = block_forward(blk, &h, cfg.n_heads, if record { Some(&mut base_caches) } else { None });
    }

    // final injection feeds the output projection
    let mut out_in = Mat::zeros(n, d);
    for r in 0..n {
        out_in.row_mut(r).copy_from_slice(h.row(r + 1));
    }
    if let (Some(g), true) = (gates, !c_outs.is_empty()) {
        out_in.add_scaled(&c_outs[N_BLOCKS - 1], g[N_BLOCKS - 1]);
    }
    let out = params.out_proj.forward(&out_in);

    if let Some(slot) = trace {
        *slot = Some(Trace {
            x_in: x_t.clone(),
            cond_in,
            goal_feats,
            base_caches,
            out_in,
            branch: branch_trace,
        });
    }
    Ok(out)
}

/// frame rows of `h` += gate * c (condition row untouched).
fn inject(h: &mut Mat, c: &Mat, gate: f64) {
    debug_assert_eq!(h.rows, c.rows + 1);
    for r in 0..c.rows {
        let dst = h.row_mut(r + 1);
        for (d, s) in dst.iter_mut().zip(c.row(r)) {
            *d += gate * s;
        }
    }
}
