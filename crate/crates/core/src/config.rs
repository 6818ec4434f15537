//! Plain-text `key = value` run configuration.

use std::fmt;

use crate::control::ControlConfig;
use crate::datagen::{CannyRanges, ConditionConfig};
use crate::denoiser::UNetConfig;
use crate::diffusion::{GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tasks::{self, TaskSpec, EMBED_DIM};

/// Every key with its default, in document order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("image_size", "32", "canvas side in pixels"),
    ("base_channels", "32", "U-Net width at full resolution"),
    ("channel_mults", "1,2,4", "width multiplier per resolution level"),
    ("time_embed_dim", "128", "conditioning vector width"),
    ("adapter_depth", "2", "convolutions per adapter module (2 or 3)"),
    ("T", "200", "diffusion steps"),
    ("beta_min", "0.0001", "first noise variance"),
    ("beta_max", "0.02", "last noise variance"),
    (
        "tasks",
        "hed,canny,seg,depth,normal,pose,hedsketch,bbox,outpainting",
        "trained tasks, in adapter order",
    ),
    ("steps", "2000", "control-branch optimizer steps"),
    ("batch_size", "8", "samples per single-task minibatch"),
    ("lr", "0.0001", "AdamW learning rate (1e-5 at full scale)"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("drop_prob", "0.3", "probability of replacing the prompt by the null embedding"),
    ("base_steps", "0", "optimizer steps on the base denoiser before it is frozen"),
    ("base_lr", "0.001", "learning rate of the base stage"),
    ("guidance_weight", "9", "classifier-free guidance weight"),
    ("ddim_steps", "50", "DDIM sampling steps"),
    ("seed", "0", "root seed"),
    ("freeze_frac", "0.8", "fraction of steps after which the hypernet is frozen"),
    ("canny_low_min", "0.05", "edge low threshold range, fraction of max gradient"),
    ("canny_low_max", "0.2", ""),
    ("canny_high_min", "0.2", "edge high threshold range, fraction of max gradient"),
    ("canny_high_max", "0.5", ""),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub adapter_depth: usize,
    pub t: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub tasks: Vec<TaskSpec>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub drop_prob: f64,
    pub base_steps: usize,
    pub base_lr: f64,
    pub guidance_weight: f64,
    pub ddim_steps: usize,
    pub seed: u64,
    pub freeze_frac: f64,
    pub canny: CannyRanges,
}

impl Default for Config {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl Config {
    /// Parse a document; `#` starts a comment, unknown keys are rejected and
    /// absent keys take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: Vec<(&str, String)> = KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim();
            let slot = values
                .iter_mut()
                .find(|(key, _)| *key == k)
                .ok_or_else(|| Error::Config(format!("line {}: unknown key {k:?}", lineno + 1)))?;
            slot.1 = v.trim().to_string();
        }
        let get = |k: &str| values.iter().find(|(key, _)| *key == k).expect("known key").1.as_str();
        let cfg = Self {
            image_size: num("image_size", get("image_size"))?,
            base_channels: num("base_channels", get("base_channels"))?,
            channel_mults: get("channel_mults")
                .split(',')
                .map(|m| num("channel_mults", m))
                .collect::<Result<_>>()?,
            time_embed_dim: num("time_embed_dim", get("time_embed_dim"))?,
            adapter_depth: num("adapter_depth", get("adapter_depth"))?,
            t: num("T", get("T"))?,
            beta_min: num("beta_min", get("beta_min"))?,
            beta_max: num("beta_max", get("beta_max"))?,
            tasks: tasks::parse_task_list(get("tasks"))?.into_iter().copied().collect(),
            steps: num("steps", get("steps"))?,
            batch_size: num("batch_size", get("batch_size"))?,
            lr: num("lr", get("lr"))?,
            weight_decay: num("weight_decay", get("weight_decay"))?,
            drop_prob: num("drop_prob", get("drop_prob"))?,
            base_steps: num("base_steps", get("base_steps"))?,
            base_lr: num("base_lr", get("base_lr"))?,
            guidance_weight: num("guidance_weight", get("guidance_weight"))?,
            ddim_steps: num("ddim_steps", get("ddim_steps"))?,
            seed: num("seed", get("seed"))?,
            freeze_frac: num("freeze_frac", get("freeze_frac"))?,
            canny: CannyRanges {
                low: (num("canny_low_min", get("canny_low_min"))?, num("canny_low_max", get("canny_low_max"))?),
                high: (num("canny_high_min", get("canny_high_min"))?, num("canny_high_max", get("canny_high_max"))?),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet().validate()?;
        self.control().validate()?;
        self.schedule()?;
        self.guidance().validate(&self.schedule()?)?;
        self.canny.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.base_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive, weight decay nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.freeze_frac) {
            return Err(Error::Config("freeze_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `(key, value)` pairs in document order, as written by `Display`.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("image_size", self.image_size.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("channel_mults", list(&self.channel_mults)),
            ("time_embed_dim", self.time_embed_dim.to_string()),
            ("adapter_depth", self.adapter_depth.to_string()),
            ("T", self.t.to_string()),
            ("beta_min", self.beta_min.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("tasks", self.tasks.iter().map(|t| t.key).collect::<Vec<_>>().join(",")),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("drop_prob", self.drop_prob.to_string()),
            ("base_steps", self.base_steps.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("guidance_weight", self.guidance_weight.to_string()),
            ("ddim_steps", self.ddim_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("freeze_frac", self.freeze_frac.to_string()),
            ("canny_low_min", self.canny.low.0.to_string()),
            ("canny_low_max", self.canny.low.1.to_string()),
            ("canny_high_min", self.canny.high.0.to_string()),
            ("canny_high_max", self.canny.high.1.to_string()),
        ]
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            image_size: self.image_size,
            in_channels: 3,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            time_embed_dim: self.time_embed_dim,
            text_embed_dim: EMBED_DIM,
            blocks_per_level: 1,
            freq_dim: 32,
        }
    }

    pub fn control(&self) -> ControlConfig {
        ControlConfig {
            num_tasks: self.tasks.len(),
            adapter_hidden: 16,
            adapter_depth: self.adapter_depth,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t, self.beta_min, self.beta_max)
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            weight: self.guidance_weight,
            steps: self.ddim_steps,
            prompt_drop_prob: self.drop_prob,
            clip_x0: true,
        }
    }

    pub fn conditions(&self) -> ConditionConfig {
        ConditionConfig {
            canny: self.canny,
            ..ConditionConfig::default()
        }
    }

    /// First step at which the hypernet no longer updates.
    pub fn freeze_step(&self) -> usize {
        ((self.steps as f64) * self.freeze_frac).round() as usize
    }

    /// Position of `key` in this run's task list, which is also its
    /// adapter index in the model.
    pub fn task_index(&self, key: &str) -> Result<usize> {
        tasks::task(key)?;
        self.tasks
            .iter()
            .position(|t| t.key == key)
            .ok_or_else(|| Error::UnknownTask(format!("{key} (not trained in this model)")))
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_roundtrip() {
        let c = Config::parse("steps = 10\ntasks = canny, seg # two\n").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.tasks.len(), 2);
        assert_eq!(Config::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(Config::parse("learning_rate = 1").is_err());
    }
}
