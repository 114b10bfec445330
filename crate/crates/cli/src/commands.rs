//! One function per subcommand; each reads its inputs from the config and
//! writes everything under the output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use roadfuse::evalkit::{
    attack_eval, confusion, export_gates, mean_gates, quality_sweep, stitch_probabilities, write_error_overlay,
    write_prediction_png, write_sweep_csv, BinaryMap, ConfusionCounts, MetricsReport, SweepTile,
};
use roadfuse::geodata::io::{
    for_each_trajectory_point, read_ftz, read_image, read_roads, write_ftz, write_image, write_json, write_roads, write_trajectories,
    ImageSidecar,
};
use roadfuse::geodata::{epoch_size, project, rasterize_trajectories, render_ground_truth, scale_traj, TileSampler};
use roadfuse::synth::synth_region;
use roadfuse::trainer::{RegionSource, RunOutput, TrainSummary};
use roadfuse::{DualMapper, GeoRegion, ModelConfig, RasterKind, Rect, RegionRasters, TileSample, Trainer};
use serde::Serialize;

use crate::config::{existing, input_or, PipelineConfig};

pub const TRAJ_COUNT_FILE: &str = "traj_count.ftz";
pub const TRAJ_SCALED_FILE: &str = "traj_scaled.ftz";
pub const LABEL_FILE: &str = "label.ftz";

fn out_file(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

/// Synthetic region: image with sidecar, trajectories, roads and the region
/// description, ready for the other subcommands.
pub fn synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let spec = &cfg.synth;
    let region = match cfg.region {
        Some(r) => GeoRegion::new(r.origin_lat, r.origin_lon, spec.width, spec.height, r.resolution)?,
        None => GeoRegion::new(41.15, -8.62, spec.width, spec.height, 1.0)?,
    };
    let generated = synth_region(&spec.scene, spec.height, spec.width, seed)?;
    let (points, roads) = generated.scene.to_geo(&region);
    let meta = ImageSidecar {
        origin_lat: region.origin_lat,
        origin_lon: region.origin_lon,
        resolution: region.resolution,
    };
    write_image(&out_file(out, "image.png"), &generated.rasters.image, &meta)?;
    write_trajectories(&out_file(out, "trajectories.csv"), &points, true)?;
    write_roads(&out_file(out, "roads.ndjson"), &roads)?;
    write_json(&out_file(out, "region.json"), &region)?;
    Ok(())
}

pub fn rasterize(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let region = cfg.region()?;
    let path = existing(&cfg.paths.trajectories, "trajectories")?;
    let mut points = Vec::new();
    for_each_trajectory_point(&path, cfg.paths.trajectories_header, |p| points.push(p))?;
    let (counts, summary) = rasterize_trajectories(points, &region);
    write_ftz(&out_file(out, TRAJ_COUNT_FILE), &counts)?;
    write_ftz(&out_file(out, TRAJ_SCALED_FILE), &scale_traj(&counts, cfg.traj_cap))?;
    write_json(&out_file(out, "rasterize_summary.json"), &summary)?;
    Ok(())
}

pub fn render_gt(cfg: &PipelineConfig, out: &Path, road_width: Option<f64>) -> Result<()> {
    let region = cfg.region()?;
    let width = road_width.unwrap_or(cfg.road_width_px);
    if !(width > 0.0) {
        bail!("road width {width} must be positive");
    }
    let (roads, skipped) = read_roads(&existing(&cfg.paths.roads, "roads")?)?;
    let label = render_ground_truth(&roads, &region, width);
    write_ftz(&out_file(out, LABEL_FILE), &label)?;
    write_json(
        &out_file(out, "render_summary.json"),
        &serde_json::json!({ "roads": roads.len(), "skipped": skipped, "road_width_px": width }),
    )?;
    Ok(())
}

/// Image, scaled trajectories and label of the whole region.
fn load_rasters(cfg: &PipelineConfig, out: &Path, need_label: bool) -> Result<RegionRasters> {
    let (image, _) = read_image(&existing(&cfg.paths.image, "image")?)?;
    let traj = read_ftz(&input_or(&cfg.paths.traj_raster, out_file(out, TRAJ_SCALED_FILE), "trajectory raster")?)?;
    if traj.kind != RasterKind::TrajScaled {
        bail!("the trajectory raster must hold scaled values, found {}", traj.kind.name());
    }
    let label_path = cfg.paths.label_raster.clone().unwrap_or(out_file(out, LABEL_FILE));
    let label = if label_path.exists() {
        Some(read_ftz(&label_path)?)
    } else if need_label {
        bail!("label raster {} does not exist", label_path.display());
    } else {
        None
    };
    let rasters = RegionRasters { image, traj, label };
    rasters.validate()?;
    Ok(rasters)
}

/// Whole tiles inside `rect`, or one tile at its corner when none fits.
fn rect_tiles(rasters: &RegionRasters, rect: &Rect, size: usize) -> Vec<TileSample> {
    let mut tiles = Vec::new();
    let mut y = rect.y0;
    while y + size <= rect.y1() {
        let mut x = rect.x0;
        while x + size <= rect.x1() {
            tiles.push(rasters.crop(y as isize, x as isize, size));
            x += size;
        }
        y += size;
    }
    if tiles.is_empty() {
        tiles.push(rasters.crop(rect.y0 as isize, rect.x0 as isize, size));
    }
    tiles
}

fn test_rects(cfg: &PipelineConfig, rasters: &RegionRasters) -> Result<Vec<Rect>> {
    let rects: Vec<Rect> = cfg.split.test.iter().filter_map(|r| r.clip(rasters.width(), rasters.height())).collect();
    if rects.is_empty() {
        bail!("the split layout has no test rectangle inside the region");
    }
    Ok(rects)
}

fn test_tiles(cfg: &PipelineConfig, rasters: &RegionRasters) -> Result<Vec<TileSample>> {
    Ok(test_rects(cfg, rasters)?.iter().flat_map(|r| rect_tiles(rasters, r, cfg.tile_size)).collect())
}

pub fn train(cfg: &PipelineConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let seed = cfg.seed()?;
    let rasters = load_rasters(cfg, out, true)?;
    let (h, w) = (rasters.height(), rasters.width());
    let sampler = TileSampler::new(&cfg.split, w, h, cfg.tile_size)?;
    let epoch_samples = epoch_size(&cfg.split, w, h, cfg.tile_size);
    let validation: Vec<TileSample> = cfg.split.val.iter().filter_map(|r| r.clip(w, h)).flat_map(|r| rect_tiles(&rasters, &r, cfg.tile_size)).collect();
    let mut trainer = match resume {
        Some(stem) => {
            // Run length follows the current config.
            let mut t = Trainer::resume(stem)?;
            t.config.epochs = cfg.train.epochs;
            t.config.max_steps = cfg.train.max_steps;
            t
        }
        None => {
            let model = DualMapper::new(ModelConfig {
                widths: cfg.widths()?,
                init_seed: seed,
            });
            let mut train = cfg.train.clone();
            train.seed = seed;
            Trainer::new(model, train, cfg.loss_weights)?
        }
    };
    let mut source = RegionSource {
        rasters,
        sampler,
        seed: trainer.config.seed,
        epoch_samples,
    };
    let run = RunOutput { dir: out.to_path_buf() };
    let summary = trainer.run(&mut source, Some(&run), (!validation.is_empty()).then_some(&validation[..]))?;
    write_json(&out_file(out, "train_summary.json"), &summary)?;
    Ok(summary)
}

fn load_model(cfg: &PipelineConfig, out: &Path) -> Result<DualMapper<f32>> {
    let stem = cfg.paths.checkpoint.clone().unwrap_or_else(|| RunOutput { dir: out.to_path_buf() }.checkpoint_stem("last"));
    let (model, _) = DualMapper::from_checkpoint(&stem).with_context(|| format!("loading checkpoint {}", stem.display()))?;
    Ok(model)
}

#[derive(Serialize)]
struct RectReport {
    rect: Rect,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct EvalReport {
    overall: MetricsReport,
    rects: Vec<RectReport>,
}

/// Stitched predictions of every test rectangle, thresholded.
fn predict_rects(cfg: &PipelineConfig, model: &mut DualMapper<f32>, rasters: &RegionRasters) -> Result<Vec<(Rect, BinaryMap)>> {
    test_rects(cfg, rasters)?
        .into_iter()
        .map(|r| {
            let probs = stitch_probabilities(model, rasters, &r, cfg.tile_size, None)?;
            Ok((r, BinaryMap::threshold(r.h, r.w, &probs.values)?))
        })
        .collect()
}

pub fn eval(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let rasters = load_rasters(cfg, out, true)?;
    let mut model = load_model(cfg, out)?;
    let label = rasters.label.as_ref().expect("label loaded");
    let mut overall = ConfusionCounts::default();
    let mut rects = Vec::new();
    for (i, (rect, pred)) in predict_rects(cfg, &mut model, &rasters)?.into_iter().enumerate() {
        let gt = BinaryMap::from_grid(&label.crop(rect.y0 as isize, rect.x0 as isize, rect.h, rect.w));
        let c = confusion(&pred, &gt)?;
        overall.merge(&c);
        write_error_overlay(&out_file(out, &format!("errors_{i}.png")), &pred, &gt)?;
        rects.push(RectReport {
            rect,
            metrics: MetricsReport::new(&c),
        });
    }
    let report = EvalReport {
        overall: MetricsReport::new(&overall),
        rects,
    };
    write_json(&out_file(out, "eval.json"), &report)?;
    Ok(())
}

pub fn predict(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let rasters = load_rasters(cfg, out, false)?;
    let mut model = load_model(cfg, out)?;
    for (i, (_, pred)) in predict_rects(cfg, &mut model, &rasters)?.into_iter().enumerate() {
        write_prediction_png(&out_file(out, &format!("prediction_{i}.png")), &pred)?;
    }
    Ok(())
}

pub fn attack(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let rasters = load_rasters(cfg, out, true)?;
    let mut model = load_model(cfg, out)?;
    let tiles = test_tiles(cfg, &rasters)?;
    let report = attack_eval(&mut model, &tiles, cfg.seed()?)?;
    write_json(&out_file(out, "attack.json"), &report)?;
    Ok(())
}

pub fn sweep(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let rasters = load_rasters(cfg, out, true)?;
    let region = cfg.region()?;
    if (region.height_px, region.width_px) != (rasters.height(), rasters.width()) {
        bail!("region is {}x{} but the rasters are {}x{}", region.height_px, region.width_px, rasters.height(), rasters.width());
    }
    let mut model = load_model(cfg, out)?;
    let mut fixes = Vec::new();
    for_each_trajectory_point(&existing(&cfg.paths.trajectories, "trajectories")?, cfg.paths.trajectories_header, |p| {
        if let Some(p) = p.filter(|p| p.is_valid()) {
            fixes.push(project(p.lat, p.lon, &region));
        }
    })?;
    let size = cfg.tile_size as f64;
    let tiles: Vec<SweepTile> = test_tiles(cfg, &rasters)?
        .into_iter()
        .map(|tile| {
            let (top, left) = (tile.origin.0 as f64, tile.origin.1 as f64);
            let points = fixes
                .iter()
                .map(|&(r, c)| (r - top, c - left))
                .filter(|&(r, c)| (0.0..size).contains(&r) && (0.0..size).contains(&c))
                .collect();
            SweepTile { tile, points }
        })
        .collect();
    let mut settings = cfg.sweep.clone();
    settings.resolution = region.resolution;
    let rows = quality_sweep(&mut model, &tiles, &settings, cfg.seed()?)?;
    write_sweep_csv(&out_file(out, "sweep.csv"), &rows)?;
    Ok(())
}

pub fn gates(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let rasters = load_rasters(cfg, out, false)?;
    let mut model = load_model(cfg, out)?;
    let tiles = test_tiles(cfg, &rasters)?;
    export_gates(&mut model, &tiles[0], &out.join("gates"))?;
    let (gi, gt) = mean_gates(&mut model, &tiles)?;
    write_json(&out_file(out, "gates.json"), &serde_json::json!({ "mean_gate_image": gi, "mean_gate_traj": gt, "tiles": tiles.len() }))?;
    Ok(())
}
