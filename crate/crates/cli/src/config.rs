//! The JSON run configuration shared by `train`, `augment` and `ablate`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vpa_core::augment::{AugmentConfig, AugmentRanges};
use vpa_core::train::{arm_by_name, default_arms, AblationArm, TrainSchedule};
use vpa_core::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairPaths {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// `mode` picks a preset; any other field overrides it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_reduction: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_cropping: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_lighting: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_rigid: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_camera: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_textures: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<AugmentRanges>,
}

fn default_mode() -> String {
    "standard".into()
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            mode: default_mode(),
            enable_reduction: None,
            enable_cropping: None,
            enable_lighting: None,
            enable_rigid: None,
            enable_camera: None,
            enable_textures: None,
            ranges: None,
        }
    }
}

impl AugmentSection {
    pub fn config(&self) -> Result<AugmentConfig> {
        let base = AugmentConfig::preset(&self.mode)?;
        let cfg = AugmentConfig {
            enable_reduction: self.enable_reduction.unwrap_or(base.enable_reduction),
            enable_cropping: self.enable_cropping.unwrap_or(base.enable_cropping),
            enable_lighting: self.enable_lighting.unwrap_or(base.enable_lighting),
            enable_rigid: self.enable_rigid.unwrap_or(base.enable_rigid),
            enable_camera: self.enable_camera.unwrap_or(base.enable_camera),
            enable_textures: self.enable_textures.unwrap_or(base.enable_textures),
            ranges: self.ranges.clone().unwrap_or(base.ranges),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field spelled out.
    fn resolved(&self) -> Result<Self> {
        let c = self.config()?;
        Ok(AugmentSection {
            mode: self.mode.clone(),
            enable_reduction: Some(c.enable_reduction),
            enable_cropping: Some(c.enable_cropping),
            enable_lighting: Some(c.enable_lighting),
            enable_rigid: Some(c.enable_rigid),
            enable_camera: Some(c.enable_camera),
            enable_textures: Some(c.enable_textures),
            ranges: Some(c.ranges),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Arm names; empty means all eight default arms.
    #[serde(default)]
    pub arms: Vec<String>,
    /// Schedule per arm; defaults to 1000 single-sample epochs at 0.001.
    #[serde(default = "default_ablation_schedule")]
    pub schedule: TrainSchedule,
}

fn default_ablation_schedule() -> TrainSchedule {
    TrainSchedule::single(0.001, 1000)
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            arms: Vec::new(),
            schedule: default_ablation_schedule(),
        }
    }
}

impl AblationSection {
    pub fn arms(&self) -> Result<Vec<AblationArm>> {
        if self.arms.is_empty() {
            return Ok(default_arms());
        }
        Ok(self.arms.iter().map(|n| arm_by_name(n)).collect::<Result<_, _>>()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub template: PairPaths,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PairPaths>,
    #[serde(default)]
    pub ablation: AblationSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("vpa-out")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config; relative paths inside it are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.template.image);
        fix(&mut cfg.template.label);
        fix(&mut cfg.output_dir);
        if let Some(e) = &mut cfg.eval {
            fix(&mut e.image);
            fix(&mut e.label);
        }
        Ok(cfg)
    }

    /// Checks every section and fills in every default.
    pub fn resolved(&self) -> Result<Self> {
        self.unet.validate()?;
        self.schedule.validate()?;
        self.ablation.schedule.validate()?;
        self.ablation.arms()?;
        if self.schedule.rounds.is_empty() {
            bail!("schedule has no rounds");
        }
        Ok(RunConfig {
            augment: self.augment.resolved()?,
            ..self.clone()
        })
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.resolved()?)?;
        let path = dir.join("config.resolved.json");
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
