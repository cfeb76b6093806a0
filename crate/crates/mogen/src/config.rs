//! Run configuration: one TOML file covering the model, schedule,
//! guidance fusion, data generation, and the three training stages.
//! Every section and field is optional and falls back to the defaults.

use crate::denoiser::ModelConfig;
use crate::diffusion::{FusionConfig, LossWeights, ScheduleKind};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Cosine, steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Training clips per kind.
    pub n_interaction: usize,
    pub n_gesture: usize,
    /// Held-out clips per kind.
    pub n_test_interaction: usize,
    pub n_test_gesture: usize,
    pub n_frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub audio_sample_rate: u32,
    /// Seat heights are drawn uniformly from this range (meters).
    pub seat_height_min: f64,
    pub seat_height_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_interaction: 24,
            n_gesture: 24,
            n_test_interaction: 8,
            n_test_gesture: 8,
            n_frames: 64,
            fps: 20.0,
            seed: 7,
            audio_sample_rate: 8000,
            seat_height_min: 0.2,
            seat_height_max: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Probability of zeroing the prompt/goal content during base
    /// pre-training so the unconditioned prediction is trained too.
    pub cond_dropout: f64,
    pub log_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 600,
            batch: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            seed: 11,
            cond_dropout: 0.1,
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mdm: StageConfig,
    pub interaction: StageConfig,
    pub cospeech: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mdm: StageConfig { steps: 900, lr: 3e-4, seed: 11, ..StageConfig::default() },
            interaction: StageConfig {
                steps: 700,
                lr: 3e-4,
                seed: 12,
                cond_dropout: 0.0,
                ..StageConfig::default()
            },
            cospeech: StageConfig {
                steps: 700,
                lr: 3e-4,
                seed: 13,
                cond_dropout: 0.0,
                ..StageConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_frames: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { n_frames: 64, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            fusion: FusionConfig::default(),
            data: DataConfig::default(),
            // collision-heavy weighting for the seated supervision window
            loss: LossWeights {
                w_rec: 1.0,
                w_pelvis: 2.0,
                w_contact: 0.5,
                w_collision: 4.0,
                k_frames: 15,
            },
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Load the file when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&std::path::Path>) -> Result<RunConfig> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.schedule.steps == 0 {
            return Err(Error::Config("schedule.steps must be positive".into()));
        }
        if self.data.fps <= 0.0 || self.data.n_frames == 0 {
            return Err(Error::Config("data.fps and data.n_frames must be positive".into()));
        }
        if self.data.n_frames > self.model.max_frames {
            return Err(Error::Config(format!(
                "data.n_frames {} exceeds model.max_frames {}",
                self.data.n_frames, self.model.max_frames
            )));
        }
        if (self.data.fps - self.model.fps).abs() > 1e-9 {
            return Err(Error::Config("data.fps must match model.fps".into()));
        }
        for (name, st) in [
            ("mdm", &self.train.mdm),
            ("interaction", &self.train.interaction),
            ("cospeech", &self.train.cospeech),
        ] {
            if st.batch == 0 || st.lr <= 0.0 {
                return Err(Error::Config(format!("train.{name}: batch and lr must be positive")));
            }
            if !(0.0..=1.0).contains(&st.cond_dropout) {
                return Err(Error::Config(format!("train.{name}: cond_dropout outside [0,1]")));
            }
        }
        if self.loss.k_frames > self.data.n_frames {
            return Err(Error::Config("loss.k_frames exceeds data.n_frames".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_partial_files_work() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let s = cfg.to_toml();
        let back = RunConfig::from_toml(&s).unwrap();
        assert_eq!(cfg, back);

        // partial file overrides only what it names
        let partial = "[schedule]\nsteps = 25\n\n[train.mdm]\nsteps = 99\n";
        let c = RunConfig::from_toml(partial).unwrap();
        assert_eq!(c.schedule.steps, 25);
        assert_eq!(c.train.mdm.steps, 99);
        assert_eq!(c.train.interaction.steps, RunConfig::default().train.interaction.steps);

        // invalid values rejected
        assert!(RunConfig::from_toml("[schedule]\nsteps = 0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd_model = 7\n").is_err());
    }
}
