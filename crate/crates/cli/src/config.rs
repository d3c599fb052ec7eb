//! Structured run configuration: a TOML file with `[synth]`, `[train]`,
//! and `[eval]` sections plus per-command flag overrides. Unknown keys
//! are rejected; every run echoes its resolved configuration.

use serde::{Deserialize, Serialize};

use segreg_core::loss::WeightSchedule;
use segreg_core::synth::SynthConfig;
use segreg_core::train::{TrainConfig, TrainMode};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub synth: SynthSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub pairs: usize,
    pub dims: [usize; 3],
    pub structures: usize,
    pub image_channels: usize,
    pub sigma_g: f64,
    pub amplitude: f64,
    pub rot_deg: f64,
    pub trans_vox: f64,
    pub scale_jitter: f64,
    pub noise_std: f64,
    pub spacing_mm: [f64; 3],
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::default();
        SynthSection {
            pairs: 40,
            dims: c.dims,
            structures: c.structures,
            image_channels: c.image_channels,
            sigma_g: c.sigma_g,
            amplitude: c.amplitude,
            rot_deg: c.rot_deg,
            trans_vox: c.trans_vox,
            scale_jitter: c.scale_jitter,
            noise_std: c.noise_std,
            spacing_mm: c.spacing_mm,
        }
    }
}

impl SynthSection {
    pub fn to_core(&self) -> SynthConfig {
        SynthConfig {
            dims: self.dims,
            structures: self.structures,
            image_channels: self.image_channels,
            sigma_g: self.sigma_g,
            amplitude: self.amplitude,
            rot_deg: self.rot_deg,
            trans_vox: self.trans_vox,
            scale_jitter: self.scale_jitter,
            noise_std: self.noise_std,
            spacing_mm: self.spacing_mm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub epochs_max: u32,
    /// Initial learning rate; omitted → the mode default (1e-3 joint and
    /// segmentation, 1e-4 registration).
    pub lr0: Option<f64>,
    pub decay_factor: f64,
    pub decay_patience: u32,
    pub early_stop_patience: u32,
    pub base_width: usize,
    pub depth: usize,
    pub convs_per_block: usize,
    pub alpha0: f64,
    pub alpha_step: f64,
    pub alpha_max: f64,
    pub beta_ratio: f64,
    pub gamma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let sched = WeightSchedule::default();
        TrainSection {
            mode: TrainMode::Joint,
            epochs_max: 100,
            lr0: None,
            decay_factor: 0.8,
            decay_patience: 10,
            early_stop_patience: 5,
            base_width: 8,
            depth: 2,
            convs_per_block: 1,
            alpha0: sched.alpha0,
            alpha_step: sched.alpha_step,
            alpha_max: sched.alpha_max,
            beta_ratio: sched.beta_ratio,
            gamma: sched.gamma,
        }
    }
}

impl TrainSection {
    /// Builds the core config for `mode`, keeping the mode defaults unless
    /// the file or flags pinned something else.
    pub fn to_core(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        let defaults = TrainConfig::new(mode, seed);
        let file_defaults = TrainSection::default();
        // The ramped defaults only apply to joint mode; for the
        // independent registration baseline the schedule is constant.
        let schedule = if self.schedule_overridden(&file_defaults) {
            WeightSchedule {
                alpha0: self.alpha0,
                alpha_step: self.alpha_step,
                alpha_max: self.alpha_max,
                beta_ratio: self.beta_ratio,
                gamma: self.gamma,
            }
        } else {
            defaults.schedule
        };
        TrainConfig {
            mode,
            epochs_max: self.epochs_max,
            lr0: self.lr0.unwrap_or(defaults.lr0),
            decay_factor: self.decay_factor,
            decay_patience: self.decay_patience,
            early_stop_patience: self.early_stop_patience,
            seed,
            schedule,
            base_width: self.base_width,
            depth: self.depth,
            convs_per_block: self.convs_per_block,
        }
    }

    fn schedule_overridden(&self, d: &TrainSection) -> bool {
        self.alpha0 != d.alpha0
            || self.alpha_step != d.alpha_step
            || self.alpha_max != d.alpha_max
            || self.beta_ratio != d.beta_ratio
            || self.gamma != d.gamma
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sc_literal: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { sc_literal: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let good: Result<FileConfig, _> = toml::from_str("[synth]\npairs = 10\n");
        assert!(good.is_ok());
        let bad: Result<FileConfig, _> = toml::from_str("[synth]\npears = 10\n");
        assert!(bad.is_err());
        let bad2: Result<FileConfig, _> = toml::from_str("[training]\nmode = \"joint\"\n");
        assert!(bad2.is_err());
    }

    #[test]
    fn mode_defaults_flow_through() {
        let section = TrainSection::default();
        let joint = section.to_core(TrainMode::Joint, 1);
        assert_eq!(joint.lr0, 1e-3);
        assert_eq!(joint.schedule.alpha_step, 4.0);
        let reg = section.to_core(TrainMode::Reg, 1);
        assert_eq!(reg.lr0, 1e-4);
        assert_eq!(reg.schedule.alpha_step, 0.0);
        assert_eq!(reg.schedule.alpha(50), 10.0);
    }

    #[test]
    fn explicit_schedule_beats_mode_default() {
        let mut section = TrainSection::default();
        section.alpha0 = 20.0;
        let reg = section.to_core(TrainMode::Reg, 1);
        assert_eq!(reg.schedule.alpha0, 20.0);
    }
}
