//! Three-stage training: base network pre-training, then one adaptation
//! branch at a time against the frozen base.

use super::{load_object, load_speech, motion_path, CorpusManifest};
use crate::branches::{source_by_name, CondEnv};
use crate::config::{RunConfig, StageConfig};
use crate::denoiser::{
    adamw_step, adapted_forward, backward, mdm_forward, AdamW, BranchParams, Checkpoint,
    DenoiserParams, OptState,
};
use crate::diffusion::{
    q_sample, select_supervision_frames, supervised_loss, GeometryCtx, LossWeights,
    NoiseSchedule, CONTACT_CLAMP, CONTACT_PROXIES,
};
use crate::encoders::{prompt_embed, ConditionBundle, GoalSpec};
use crate::error::{Error, Result};
use crate::geometry::{BodyProxy, ObjectGeometry};
use crate::math::{fill_gauss, fnv1a, Mat};
use crate::pose::{normalize, NormStats, Skeleton};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mdm,
    Interaction,
    Cospeech,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Mdm => "mdm",
            Stage::Interaction => "interaction",
            Stage::Cospeech => "cospeech",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "mdm" => Ok(Stage::Mdm),
            "interaction" => Ok(Stage::Interaction),
            "cospeech" => Ok(Stage::Cospeech),
            other => Err(Error::Config(format!("unknown training stage '{other}'"))),
        }
    }
}

struct TrainItem {
    x0: Mat,
    prompt: Vec<f64>,
    goal: Option<GoalSpec>,
    object: Option<ObjectGeometry>,
    speech_feats: Option<Mat>,
    mask: Vec<bool>,
}

fn load_items(
    stage: Stage,
    run: &RunConfig,
    manifest: &CorpusManifest,
    data_dir: &Path,
    stats: &NormStats,
) -> Result<Vec<TrainItem>> {
    let env = CondEnv::new(run.model.clone(), stats.clone());
    let mut items = Vec::new();
    for entry in manifest.split_entries("train") {
        let keep = match stage {
            Stage::Mdm => true,
            Stage::Interaction => entry.object.is_some(),
            Stage::Cospeech => entry.audio.is_some(),
        };
        if !keep {
            continue;
        }
        let (clip, _) = crate::clipio::read_clip(&motion_path(data_dir, entry))?;
        let normed = normalize(&clip, stats)?;
        let x0 = normed.to_mat();
        let prompt = prompt_embed(&entry.prompt, run.model.d_cond)?;
        let object = load_object(data_dir, entry)?;
        let speech = load_speech(data_dir, entry)?;
        let speech_feats = match (stage, &speech) {
            (Stage::Cospeech, Some(sp)) => {
                let mut bundle = ConditionBundle::new(prompt.clone());
                bundle.speech = Some(sp.clone());
                let src = source_by_name("cospeech").expect("registered source");
                Some(src.features(&x0, &env, &bundle)?)
            }
            _ => None,
        };
        let mask = match stage {
            Stage::Interaction => {
                select_supervision_frames(entry.tag, x0.rows, run.loss.k_frames)?
            }
            _ => vec![false; x0.rows],
        };
        items.push(TrainItem { x0, prompt, goal: entry.goal, object, speech_feats, mask });
    }
    if items.is_empty() {
        return Err(Error::DataMismatch(format!(
            "no training entries usable for stage {}",
            stage.name()
        )));
    }
    Ok(items)
}

fn element_seed(stage_seed: u64, step: usize, idx: usize) -> u64 {
    let mut bytes = Vec::with_capacity(24);
    bytes.extend_from_slice(&stage_seed.to_le_bytes());
    bytes.extend_from_slice(&(step as u64).to_le_bytes());
    bytes.extend_from_slice(&(idx as u64).to_le_bytes());
    fnv1a(&bytes)
}

/// Walk params and grads in visitor order, applying one optimizer step.
fn optimizer_step(
    visit_grads: &dyn Fn(&mut dyn FnMut(&str, &[f64])),
    visit_params: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Vec<f64>)),
    states: &mut Vec<OptState>,
    opt: &AdamW,
) -> Result<()> {
    let mut grads: Vec<Vec<f64>> = Vec::new();
    visit_grads(&mut |_, v| grads.push(v.to_vec()));
    if states.is_empty() {
        for g in &grads {
            states.push(OptState::new(g.len()));
        }
    }
    let mut idx = 0usize;
    let mut err = None;
    visit_params(&mut |_, p| {
        if err.is_some() {
            return;
        }
        if let Err(e) = adamw_step(p, &grads[idx], &mut states[idx], opt) {
            err = Some(e);
        }
        idx += 1;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn stage_cfg<'a>(stage: Stage, run: &'a RunConfig) -> &'a StageConfig {
    match stage {
        Stage::Mdm => &run.train.mdm,
        Stage::Interaction => &run.train.interaction,
        Stage::Cospeech => &run.train.cospeech,
    }
}

/// Train one stage and return the resulting checkpoint. Stages after the
/// first require the previous checkpoint and leave its base parameters
/// byte-for-byte untouched. Loss curves go to `log_path` as CSV.
pub fn train_stage(
    stage: Stage,
    run: &RunConfig,
    manifest: &CorpusManifest,
    data_dir: &Path,
    prereq: Option<&Checkpoint>,
    log_path: Option<&Path>,
) -> Result<Checkpoint> {
    run.validate()?;
    let stats = manifest.stats();
    let cfg = &run.model;
    let st = stage_cfg(stage, run);
    let schedule = NoiseSchedule::new(run.schedule.kind, run.schedule.steps)?;
    let items = load_items(stage, run, manifest, data_dir, &stats)?;
    let skeleton = Skeleton::default_human();
    let proxy = BodyProxy::default_human();

    // stage wiring
    let (mut mdm, mut branch): (DenoiserParams, Option<BranchParams>) = match stage {
        Stage::Mdm => {
            let mut p = DenoiserParams::init(cfg, st.seed);
            // a zeroed output projection starts the model at the data mean
            p.out_proj.w.iter_mut().for_each(|w| *w = 0.0);
            p.out_proj.b.iter_mut().for_each(|b| *b = 0.0);
            (p, None)
        }
        Stage::Interaction | Stage::Cospeech => {
            let prev = prereq.ok_or_else(|| {
                Error::MissingPrereq(format!("stage {} needs a base checkpoint", stage.name()))
            })?;
            if prev.stats.id() != manifest.stats_id {
                return Err(Error::DataMismatch(format!(
                    "checkpoint stats {} do not match manifest stats {}",
                    prev.stats.id(),
                    manifest.stats_id
                )));
            }
            if prev.config != *cfg {
                return Err(Error::DataMismatch(
                    "checkpoint model config differs from the run config".into(),
                ));
            }
            let src = source_by_name(stage.name()).expect("registered source");
            let bp = BranchParams::init(stage.name(), &src.encoder_dims(cfg), cfg, st.seed);
            (prev.mdm.clone(), Some(bp))
        }
    };

    let env = CondEnv::new(cfg.clone(), stats.clone());
    let loss_weights = match stage {
        Stage::Mdm | Stage::Cospeech => LossWeights::rec_only(1.0),
        Stage::Interaction => run.loss,
    };
    let opt = AdamW {
        lr: st.lr,
        beta1: st.beta1,
        beta2: st.beta2,
        eps: 1e-8,
        weight_decay: st.weight_decay,
    };
    let mut opt_states: Vec<OptState> = Vec::new();
    let mut log = String::from("step,loss,rec,pelvis,contact,collision\n");

    for step in 0..st.steps {
        // per-element forward/backward, reduced in index order
        let results: Vec<(crate::diffusion::LossTerms, DenoiserParams, Option<BranchParams>)> =
            (0..st.batch)
                .into_par_iter()
                .map(|idx| -> Result<_> {
                    let mut rng = ChaCha8Rng::seed_from_u64(element_seed(st.seed, step, idx));
                    let item = &items[rng.gen_range(0..items.len())];
                    let t = rng.gen_range(0..schedule.steps());
                    let mut eps = Mat::zeros(item.x0.rows, item.x0.cols);
                    fill_gauss(&mut rng, &mut eps.data);
                    let x_t = q_sample(&item.x0, t, &eps, &schedule)?;
                    let dropped = rng.gen::<f64>() < st.cond_dropout;
                    let zero_prompt = vec![0.0; cfg.d_cond];
                    let (prompt, goal) = if dropped {
                        (&zero_prompt, None)
                    } else {
                        (&item.prompt, item.goal.as_ref())
                    };

                    let mut trace = None;
                    let pred = match (&branch, stage) {
                        (None, _) => mdm_forward(
                            &x_t,
                            t,
                            schedule.steps(),
                            prompt,
                            goal,
                            &mdm,
                            cfg,
                            Some(&mut trace),
                        )?,
                        (Some(bp), Stage::Interaction) => {
                            let mut bundle = ConditionBundle::new(prompt.clone());
                            bundle.object = item.object.clone();
                            let src = source_by_name("interaction").unwrap();
                            let feats = src.features(&x_t, &env, &bundle)?;
                            adapted_forward(
                                &x_t,
                                t,
                                schedule.steps(),
                                prompt,
                                goal,
                                &mdm,
                                cfg,
                                bp,
                                &feats,
                                Some(&mut trace),
                            )?
                        }
                        (Some(bp), _) => {
                            let feats = item
                                .speech_feats
                                .as_ref()
                                .ok_or_else(|| Error::MissingCondition("cospeech".into()))?;
                            adapted_forward(
                                &x_t,
                                t,
                                schedule.steps(),
                                prompt,
                                goal,
                                &mdm,
                                cfg,
                                bp,
                                feats,
                                Some(&mut trace),
                            )?
                        }
                    };
                    let ctx = GeometryCtx {
                        object: item.object.as_ref(),
                        skeleton: &skeleton,
                        proxy: &proxy,
                        contact_proxies: &CONTACT_PROXIES,
                        stats: &stats,
                        contact_clamp: CONTACT_CLAMP,
                    };
                    let (terms, d_out) =
                        supervised_loss(&pred, &item.x0, &item.mask, &loss_weights, &ctx)?;
                    let trace = trace.ok_or(Error::NoTrace)?;
                    let mut mdm_grads =
                        if branch.is_none() { Some(DenoiserParams::zeros(cfg)) } else { None };
                    let mut branch_grads = branch.as_ref().map(|bp| bp.zeros_like(cfg));
                    backward(
                        &trace,
                        &d_out,
                        &mdm,
                        cfg,
                        branch.as_ref(),
                        mdm_grads.as_mut(),
                        branch_grads.as_mut(),
                    )?;
                    Ok((
                        terms,
                        mdm_grads.unwrap_or_else(|| DenoiserParams::zeros(cfg)),
                        branch_grads,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;

        // fixed-order reduction keeps the run deterministic
        let scale = 1.0 / st.batch as f64;
        let mut terms = crate::diffusion::LossTerms::default();
        match stage {
            Stage::Mdm => {
                let mut total = DenoiserParams::zeros(cfg);
                for (t, g, _) in &results {
                    total.add_scaled(g, scale);
                    add_terms(&mut terms, t, scale);
                }
                optimizer_step(
                    &|f| total.visit(f),
                    &mut |f| mdm.visit_mut(f),
                    &mut opt_states,
                    &opt,
                )?;
            }
            _ => {
                let bp = branch.as_mut().unwrap();
                let mut total = bp.zeros_like(cfg);
                for (t, _, g) in &results {
                    total.add_scaled(g.as_ref().unwrap(), scale);
                    add_terms(&mut terms, t, scale);
                }
                optimizer_step(&|f| total.visit(f), &mut |f| bp.visit_mut(f), &mut opt_states, &opt)?;
            }
        }

        if step % st.log_every == 0 || step + 1 == st.steps {
            log.push_str(&format!(
                "{step},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                terms.total, terms.rec, terms.pelvis, terms.contact, terms.collision
            ));
        }
    }

    if let Some(p) = log_path {
        std::fs::write(p, &log)?;
    }

    // assemble the checkpoint
    let mut branches = prereq.map(|p| p.branches.clone()).unwrap_or_default();
    if let Some(bp) = branch {
        branches.retain(|b| b.name != bp.name);
        branches.push(bp);
    }
    Ok(Checkpoint { config: cfg.clone(), stats, mdm, branches })
}

fn add_terms(
    total: &mut crate::diffusion::LossTerms,
    part: &crate::diffusion::LossTerms,
    scale: f64,
) {
    total.total += scale * part.total;
    total.rec += scale * part.rec;
    total.pelvis += scale * part.pelvis;
    total.contact += scale * part.contact;
    total.collision += scale * part.collision;
}
