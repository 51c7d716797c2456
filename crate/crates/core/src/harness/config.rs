//! Run configuration and its flat `key=value` file format.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::draft::PoolMode;
use crate::error::{Error, Result};
use crate::layout::LatentLayout;
use crate::mask::SelectOn;
use crate::sparse::PipelineOptions;
use crate::tensor::Precision;

/// Where Q, K and V come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// i.i.d. standard normal entries.
    #[default]
    Gaussian,
    /// Bilinearly upsampled low-resolution fields plus small noise.
    Smooth,
    /// User-provided matrix files.
    File,
}

impl FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(DataMode::Gaussian),
            "smooth" => Ok(DataMode::Smooth),
            "file" => Ok(DataMode::File),
            other => Err(Error::Config(format!("unknown data mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DataMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataMode::Gaussian => "gaussian",
            DataMode::Smooth => "smooth",
            DataMode::File => "file",
        })
    }
}

/// Named latent resolutions that tile exactly with the 8x16 kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 512p video, 32x48 latent.
    P512,
    /// 768p video, 48x80 latent.
    P768,
}

impl Preset {
    pub const PATCH_H: usize = 8;
    pub const PATCH_W: usize = 16;

    pub fn latent_hw(self) -> (usize, usize) {
        match self {
            Preset::P512 => (32, 48),
            Preset::P768 => (48, 80),
        }
    }

    pub fn layout(self, frames: usize) -> LatentLayout {
        let (h, w) = self.latent_hw();
        LatentLayout::new(frames, h, w, Self::PATCH_H, Self::PATCH_W).expect("preset tiles exactly")
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "512p" => Ok(Preset::P512),
            "768p" => Ok(Preset::P768),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Everything needed to reproduce one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub d: usize,
    pub heads: usize,
    pub sparsity: f64,
    pub pool: PoolMode,
    pub select_on: SelectOn,
    pub force_row_keep: bool,
    pub precision: Precision,
    pub seed: u64,
    pub data_mode: DataMode,
    pub shared_head_mask: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (height, width) = Preset::P512.latent_hw();
        Self {
            frames: 2,
            height,
            width,
            patch_h: Preset::PATCH_H,
            patch_w: Preset::PATCH_W,
            d: 64,
            heads: 1,
            sparsity: 0.9,
            pool: PoolMode::Average,
            select_on: SelectOn::Logits,
            force_row_keep: true,
            precision: Precision::Single,
            seed: 0,
            data_mode: DataMode::Gaussian,
            shared_head_mask: false,
        }
    }
}

const KEYS: [&str; 15] = [
    "frames",
    "height",
    "width",
    "patch_h",
    "patch_w",
    "d",
    "heads",
    "sparsity",
    "pool",
    "select_on",
    "force_row_keep",
    "precision",
    "seed",
    "data_mode",
    "shared_head_mask",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" => Ok(true),
        "false" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn with_preset(preset: Preset, frames: usize) -> Self {
        let (height, width) = preset.latent_hw();
        Self {
            frames,
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Sparsity(self.sparsity));
        }
        if self.d == 0 || self.heads == 0 {
            return Err(Error::Config("d and heads must be positive".into()));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::Config("layout extents must be positive".into()));
        }
        Ok(())
    }

    /// Exact layout; fails when the patch does not tile the frame.
    pub fn layout(&self) -> Result<LatentLayout> {
        LatentLayout::new(self.frames, self.height, self.width, self.patch_h, self.patch_w)
    }

    pub fn n(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            pool: self.pool,
            select_on: self.select_on,
            force_row_keep: self.force_row_keep,
            ..PipelineOptions::default()
        }
    }

    /// Parses `key=value` lines. Blank lines and `#` comments are skipped;
    /// unknown or repeated keys are errors. Missing keys keep defaults.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            seen.push(key);
            match key {
                "frames" => cfg.frames = parse(key, value)?,
                "height" => cfg.height = parse(key, value)?,
                "width" => cfg.width = parse(key, value)?,
                "patch_h" => cfg.patch_h = parse(key, value)?,
                "patch_w" => cfg.patch_w = parse(key, value)?,
                "d" => cfg.d = parse(key, value)?,
                "heads" => cfg.heads = parse(key, value)?,
                "sparsity" => cfg.sparsity = parse(key, value)?,
                "pool" => cfg.pool = value.parse()?,
                "select_on" => cfg.select_on = value.parse()?,
                "force_row_keep" => cfg.force_row_keep = parse_flag(key, value)?,
                "precision" => cfg.precision = value.parse()?,
                "seed" => cfg.seed = parse(key, value)?,
                "data_mode" => cfg.data_mode = value.parse()?,
                "shared_head_mask" => cfg.shared_head_mask = parse_flag(key, value)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "patch_h={}", self.patch_h);
        let _ = writeln!(s, "patch_w={}", self.patch_w);
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "sparsity={}", self.sparsity);
        let _ = writeln!(s, "pool={}", self.pool);
        let _ = writeln!(s, "select_on={}", self.select_on);
        let _ = writeln!(s, "force_row_keep={}", self.force_row_keep);
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "data_mode={}", self.data_mode);
        let _ = writeln!(s, "shared_head_mask={}", self.shared_head_mask);
        s
    }
}
