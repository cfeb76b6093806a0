//! The denoising network: input/output projections around a fixed stack
//! of eight transformer blocks, plus adaptation branches that mirror the
//! block stack and inject their activations into it.

mod adamw;
mod backward;
mod checkpoint;
mod forward;

pub use adamw::{adamw_step, AdamW, OptState};
pub use backward::{backward, BranchGrads, DenoiserGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{
    adapted_forward, mdm_forward, positional_encoding, time_embed, BranchTrace, Trace,
};

use crate::nn::{Linear, Mlp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn axpy(a: &mut [f64], b: &[f64], s: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += s * y;
    }
}

fn axpy_linear(a: &mut Linear, b: &Linear, s: f64) {
    axpy(&mut a.w, &b.w, s);
    axpy(&mut a.b, &b.b, s);
}

/// The block stack depth is part of the architecture contract.
pub const N_BLOCKS: usize = 8;

/// Network and feature dimensions. `d_model` is shared by the branch
/// streams so injected activations add without projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub d_cond: usize,
    pub d_time: usize,
    /// Basis point set for the interaction branch.
    pub n_bps: usize,
    pub bps_seed: u64,
    /// Hidden width of the interaction feature merge.
    pub merge_hidden: usize,
    /// Audio bands for the co-speech branch (features are bands + RMS).
    pub n_bands: usize,
    /// Transcript token embedding width.
    pub d_txt: usize,
    pub fps: f64,
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            ffn_mult: 4,
            d_cond: 64,
            d_time: 64,
            n_bps: 512,
            bps_seed: 0,
            merge_hidden: 128,
            n_bands: 16,
            d_txt: 32,
            fps: 20.0,
            max_frames: 196,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::Error;
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_time % 2 != 0 || self.d_time == 0 {
            return Err(Error::Config("d_time must be positive and even".into()));
        }
        if self.d_cond == 0 || self.ffn_mult == 0 || self.n_bps == 0 {
            return Err(Error::Config("d_cond, ffn_mult and n_bps must be positive".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Encoder input width for the co-speech branch.
    pub fn speech_feat_dim(&self) -> usize {
        self.n_bands + 1 + self.d_txt
    }

    /// Encoder input width for the interaction branch.
    pub fn interaction_feat_dim(&self) -> usize {
        2 * self.n_bps
    }
}

/// One pre-norm transformer block: self-attention and a feed-forward,
/// each behind a layer norm, with residual connections.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn zeros(cfg: &ModelConfig) -> Block {
        let d = cfg.d_model;
        Block {
            ln1_gamma: vec![0.0; d],
            ln1_beta: vec![0.0; d],
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln2_gamma: vec![0.0; d],
            ln2_beta: vec![0.0; d],
            ff1: Linear::zeros(d, cfg.d_ffn()),
            ff2: Linear::zeros(cfg.d_ffn(), d),
        }
    }

    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Block {
        let d = cfg.d_model;
        Block {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            wq: Linear::init(d, d, rng),
            wk: Linear::init(d, d, rng),
            wv: Linear::init(d, d, rng),
            wo: Linear::init(d, d, rng),
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            ff1: Linear::init(d, cfg.d_ffn(), rng),
            ff2: Linear::init(cfg.d_ffn(), d, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.ln1_gamma"), &self.ln1_gamma);
        f(&format!("{prefix}.ln1_beta"), &self.ln1_beta);
        f(&format!("{prefix}.wq.w"), &self.wq.w);
        f(&format!("{prefix}.wq.b"), &self.wq.b);
        f(&format!("{prefix}.wk.w"), &self.wk.w);
        f(&format!("{prefix}.wk.b"), &self.wk.b);
        f(&format!("{prefix}.wv.w"), &self.wv.w);
        f(&format!("{prefix}.wv.b"), &self.wv.b);
        f(&format!("{prefix}.wo.w"), &self.wo.w);
        f(&format!("{prefix}.wo.b"), &self.wo.b);
        f(&format!("{prefix}.ln2_gamma"), &self.ln2_gamma);
        f(&format!("{prefix}.ln2_beta"), &self.ln2_beta);
        f(&format!("{prefix}.ff1.w"), &self.ff1.w);
        f(&format!("{prefix}.ff1.b"), &self.ff1.b);
        f(&format!("{prefix}.ff2.w"), &self.ff2.w);
        f(&format!("{prefix}.ff2.b"), &self.ff2.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f(&format!("{prefix}.ln1_gamma"), &mut self.ln1_gamma);
        f(&format!("{prefix}.ln1_beta"), &mut self.ln1_beta);
        f(&format!("{prefix}.wq.w"), &mut self.wq.w);
        f(&format!("{prefix}.wq.b"), &mut self.wq.b);
        f(&format!("{prefix}.wk.w"), &mut self.wk.w);
        f(&format!("{prefix}.wk.b"), &mut self.wk.b);
        f(&format!("{prefix}.wv.w"), &mut self.wv.w);
        f(&format!("{prefix}.wv.b"), &mut self.wv.b);
        f(&format!("{prefix}.wo.w"), &mut self.wo.w);
        f(&format!("{prefix}.wo.b"), &mut self.wo.b);
        f(&format!("{prefix}.ln2_gamma"), &mut self.ln2_gamma);
        f(&format!("{prefix}.ln2_beta"), &mut self.ln2_beta);
        f(&format!("{prefix}.ff1.w"), &mut self.ff1.w);
        f(&format!("{prefix}.ff1.b"), &mut self.ff1.b);
        f(&format!("{prefix}.ff2.w"), &mut self.ff2.w);
        f(&format!("{prefix}.ff2.b"), &mut self.ff2.b);
    }

    pub fn add_scaled(&mut self, other: &Block, s: f64) {
        axpy(&mut self.ln1_gamma, &other.ln1_gamma, s);
        axpy(&mut self.ln1_beta, &other.ln1_beta, s);
        axpy_linear(&mut self.wq, &other.wq, s);
        axpy_linear(&mut self.wk, &other.wk, s);
        axpy_linear(&mut self.wv, &other.wv, s);
        axpy_linear(&mut self.wo, &other.wo, s);
        axpy(&mut self.ln2_gamma, &other.ln2_gamma, s);
        axpy(&mut self.ln2_beta, &other.ln2_beta, s);
        axpy_linear(&mut self.ff1, &other.ff1, s);
        axpy_linear(&mut self.ff2, &other.ff2, s);
    }
}

/// All trainable parameters of the base denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub cond_proj: Linear,
    pub goal_proj: Linear,
    pub blocks: Vec<Block>,
}

impl DenoiserParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> DenoiserParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenoiserParams {
            in_proj: Linear::init(crate::pose::FRAME_DIM, cfg.d_model, &mut rng),
            out_proj: Linear::init(cfg.d_model, crate::pose::FRAME_DIM, &mut rng),
            cond_proj: Linear::init(cfg.d_cond + cfg.d_time, cfg.d_model, &mut rng),
            goal_proj: Linear::init(5, cfg.d_cond, &mut rng),
            blocks: (0..N_BLOCKS).map(|_| Block::init(cfg, &mut rng)).collect(),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> DenoiserParams {
        DenoiserParams {
            in_proj: Linear::zeros(crate::pose::FRAME_DIM, cfg.d_model),
            out_proj: Linear::zeros(cfg.d_model, crate::pose::FRAME_DIM),
            cond_proj: Linear::zeros(cfg.d_cond + cfg.d_time, cfg.d_model),
            goal_proj: Linear::zeros(5, cfg.d_cond),
            blocks: (0..N_BLOCKS).map(|_| Block::zeros(cfg)).collect(),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("in_proj.w", &self.in_proj.w);
        f("in_proj.b", &self.in_proj.b);
        f("out_proj.w", &self.out_proj.w);
        f("out_proj.b", &self.out_proj.b);
        f("cond_proj.w", &self.cond_proj.w);
        f("cond_proj.b", &self.cond_proj.b);
        f("goal_proj.w", &self.goal_proj.w);
        f("goal_proj.b", &self.goal_proj.b);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f("in_proj.w", &mut self.in_proj.w);
        f("in_proj.b", &mut self.in_proj.b);
        f("out_proj.w", &mut self.out_proj.w);
        f("out_proj.b", &mut self.out_proj.b);
        f("cond_proj.w", &mut self.cond_proj.w);
        f("cond_proj.b", &mut self.cond_proj.b);
        f("goal_proj.w", &mut self.goal_proj.w);
        f("goal_proj.b", &mut self.goal_proj.b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    /// self += s * other over every parameter array.
    pub fn add_scaled(&mut self, other: &DenoiserParams, s: f64) {
        axpy_linear(&mut self.in_proj, &other.in_proj, s);
        axpy_linear(&mut self.out_proj, &other.out_proj, s);
        axpy_linear(&mut self.cond_proj, &other.cond_proj, s);
        axpy_linear(&mut self.goal_proj, &other.goal_proj, s);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_scaled(b, s);
        }
    }
}

/// Parameters of one adaptation branch: its condition encoder, a block
/// stack mirroring the base network, and per-block output gates. Gates
/// start at zero so an untrained branch leaves the base network intact;
/// at gate value one the injection adds the raw block activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub name: String,
    pub encoder: Mlp,
    pub blocks: Vec<Block>,
    pub gates: Vec<f64>,
}

impl BranchParams {
    pub fn init(name: &str, encoder_dims: &[usize], cfg: &ModelConfig, seed: u64) -> BranchParams {
        assert_eq!(*encoder_dims.last().unwrap(), cfg.d_model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BranchParams {
            name: name.to_string(),
            encoder: Mlp::init(encoder_dims, &mut rng),
            blocks: (0..N_BLOCKS).map(|_| Block::init(cfg, &mut rng)).collect(),
            gates: vec![0.0; N_BLOCKS],
        }
    }

    pub fn zeros_like(&self, cfg: &ModelConfig) -> BranchParams {
        BranchParams {
            name: self.name.clone(),
            encoder: self.encoder.zeros_like(),
            blocks: (0..N_BLOCKS).map(|_| Block::zeros(cfg)).collect(),
            gates: vec![0.0; N_BLOCKS],
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.visit(&mut |name, v| f(&format!("encoder.{name}"), v));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), f);
        }
        f("gates", &self.gates);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.encoder.visit_mut(&mut |name, v| f(&format!("encoder.{name}"), v));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), f);
        }
        f("gates", &mut self.gates);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    /// self += s * other over every parameter array.
    pub fn add_scaled(&mut self, other: &BranchParams, s: f64) {
        for (a, b) in self.encoder.layers.iter_mut().zip(&other.encoder.layers) {
            axpy_linear(a, b, s);
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_scaled(b, s);
        }
        axpy(&mut self.gates, &other.gates, s);
    }
}
