//! The JSON run description shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use roadfuse::evalkit::SweepSettings;
use roadfuse::geodata::{DEFAULT_ROAD_WIDTH_PX, DEFAULT_TRAJ_CAP, TILE_SIZE};
use roadfuse::synth::SynthConfig;
use roadfuse::{GeoRegion, LossWeights, SplitLayout, TrainConfig, Widths};
use serde::{Deserialize, Serialize};

/// Input and output files. Relative paths are resolved against the
/// directory of the config file; unset outputs go to `--out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// CSV of `traj_id,timestamp,lat,lon`.
    pub trajectories: Option<PathBuf>,
    pub trajectories_header: bool,
    /// Road polylines, one JSON object per line.
    pub roads: Option<PathBuf>,
    /// RGB PNG with a `<stem>.json` georeference.
    pub image: Option<PathBuf>,
    pub traj_raster: Option<PathBuf>,
    pub label_raster: Option<PathBuf>,
    /// Checkpoint stem used by eval, attack, sweep, gates and predict.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub scene: SynthConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 896,
            width: 896,
            scene: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub region: Option<GeoRegion>,
    pub split: SplitLayout,
    pub paths: Paths,
    /// Channels of the finest level; 16 for the reduced network.
    pub width_base: usize,
    pub tile_size: usize,
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
    pub traj_cap: u32,
    pub road_width_px: f64,
    pub sweep: SweepSettings,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: None,
            region: None,
            split: SplitLayout::default(),
            paths: Paths::default(),
            width_base: Widths::REDUCED.base,
            tile_size: TILE_SIZE,
            train: TrainConfig::default(),
            loss_weights: LossWeights::default(),
            traj_cap: DEFAULT_TRAJ_CAP,
            road_width_px: DEFAULT_ROAD_WIDTH_PX,
            sweep: SweepSettings {
                blur_factors: vec![1, 2, 4, 8],
                noise_sigmas_m: vec![0.0, 5.0, 10.0, 20.0],
                resolution: 1.0,
                traj_cap: DEFAULT_TRAJ_CAP,
            },
            synth: SynthSpec::default(),
        }
    }
}

impl PipelineConfig {
    /// Read `path`, or start from defaults when there is none, and resolve
    /// relative paths.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [&mut p.trajectories, &mut p.roads, &mut p.image, &mut p.traj_raster, &mut p.label_raster, &mut p.checkpoint] {
            if let Some(f) = slot.as_mut() {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.context("a seed is required: set \"seed\" in the config or pass --seed")
    }

    pub fn widths(&self) -> Result<Widths> {
        if self.width_base == 0 {
            bail!("width_base must be positive");
        }
        Ok(Widths { base: self.width_base })
    }

    pub fn region(&self) -> Result<GeoRegion> {
        let r = self.region.context("this command needs \"region\" in the config")?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.widths()?;
        self.split.validate()?;
        self.loss_weights.validate()?;
        self.train.validate()?;
        if self.tile_size == 0 || self.tile_size % 16 != 0 {
            bail!("tile_size {} must be a positive multiple of 16", self.tile_size);
        }
        if !(self.road_width_px > 0.0) {
            bail!("road_width_px must be positive");
        }
        if let Some(r) = &self.region {
            r.validate()?;
        }
        Ok(())
    }
}

/// `path` if it is set and exists.
pub fn existing(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.as_ref().with_context(|| format!("config lacks paths.{what}"))?;
    if !p.exists() {
        bail!("paths.{what} {} does not exist", p.display());
    }
    Ok(p.clone())
}

/// The configured file, or `default` under the output directory.
pub fn input_or(path: &Option<PathBuf>, default: PathBuf, what: &str) -> Result<PathBuf> {
    let p = path.clone().unwrap_or(default);
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(p)
}
