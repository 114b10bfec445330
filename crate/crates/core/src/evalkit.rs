//! Metrics, stitched region inference, gate export and the robustness
//! harnesses.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Level;
use crate::error::{Error, Result};
use crate::geodata::io::{write_gray_png, write_mask_png, write_png};
use crate::geodata::{apply_info_loss, degrade, AttackSpec, RasterGrid, RasterKind, Rect, RegionRasters, TileSample};
use crate::graph::Graph;
use crate::model::DualMapper;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Probabilities at or above this are roads.
pub const THRESHOLD: f32 = 0.5;
pub const CELL_SIZE: usize = 224;

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("BinaryMap", height * width, data.len()));
        }
        Ok(BinaryMap { height, width, data })
    }

    pub fn threshold(height: usize, width: usize, probs: &[f32]) -> Result<Self> {
        BinaryMap::new(height, width, probs.iter().map(|&p| p >= THRESHOLD).collect())
    }

    pub fn from_grid(g: &RasterGrid) -> Self {
        BinaryMap {
            height: g.height,
            width: g.width,
            data: g.values.iter().map(|&v| v >= THRESHOLD).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn merge(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &BinaryMap, gt: &BinaryMap) -> Result<ConfusionCounts> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape("confusion", format!("{}x{}", gt.height, gt.width), format!("{}x{}", pred.height, pred.width)));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Reasons a metric fell back to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    /// No predicted and no true road pixel.
    Degenerate,
    IouUndefined,
    PrecisionUndefined,
    RecallUndefined,
    F1Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flags: Vec<MetricFlag>,
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let mut flags = Vec::new();
    let mut ratio = |num: u64, den: u64, flag: MetricFlag| {
        if den == 0 {
            flags.push(flag);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_, MetricFlag::IouUndefined);
    let precision = ratio(c.tp, c.tp + c.fp, MetricFlag::PrecisionUndefined);
    let recall = ratio(c.tp, c.tp + c.fn_, MetricFlag::RecallUndefined);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        flags.push(MetricFlag::F1Undefined);
        0.0
    };
    if c.tp + c.fp + c.fn_ == 0 {
        flags.insert(0, MetricFlag::Degenerate);
    }
    Metrics {
        iou,
        precision,
        recall,
        f1,
        flags,
    }
}

/// JSON metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub flags: Vec<MetricFlag>,
}

impl MetricsReport {
    pub fn new(c: &ConfusionCounts) -> Self {
        let m = metrics(c);
        MetricsReport {
            iou: m.iou,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            flags: m.flags,
        }
    }
}

/// Eval-mode `P_r^(5)` of one tile, row-major.
pub fn predict_tile(model: &mut DualMapper<f32>, tile: &TileSample) -> Result<Vec<f32>> {
    tile.validate()?;
    Ok(model.predict(&tile.image_tensor(), &tile.traj_tensor())?.into_data())
}

/// Pixel tallies of thresholded predictions over a set of tiles.
pub fn evaluate_tiles(model: &mut DualMapper<f32>, tiles: &[TileSample]) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for t in tiles {
        let pred = BinaryMap::threshold(t.height(), t.width(), &predict_tile(model, t)?)?;
        total.merge(&confusion(&pred, &BinaryMap::from_grid(&t.label))?);
    }
    Ok(total)
}

/// Cells covering `rect` in row-major order, as `(top, left)`. The last row
/// and column of cells may overhang the rectangle.
pub fn stitch_cells(rect: &Rect, cell: usize) -> Result<Vec<(usize, usize)>> {
    if cell == 0 || cell % 2 != 0 || rect.w == 0 || rect.h == 0 {
        return Err(Error::Invalid(format!("cannot cover {}x{} with {cell}-pixel cells", rect.w, rect.h)));
    }
    let mut cells = Vec::new();
    for r in 0..rect.h.div_ceil(cell) {
        for c in 0..rect.w.div_ceil(cell) {
            cells.push((rect.y0 + r * cell, rect.x0 + c * cell));
        }
    }
    Ok(cells)
}

/// Road probability of one cell: predict the `2 * cell` window centred on it
/// (zero outside the region) and keep the central crop.
pub fn predict_cell(model: &mut DualMapper<f32>, rasters: &RegionRasters, top: usize, left: usize, cell: usize) -> Result<Vec<f32>> {
    let half = cell / 2;
    let window = rasters.crop(top as isize - half as isize, left as isize - half as isize, 2 * cell);
    let probs = predict_tile(model, &window)?;
    let ctx = 2 * cell;
    let mut out = Vec::with_capacity(cell * cell);
    for r in half..half + cell {
        out.extend_from_slice(&probs[r * ctx + half..r * ctx + half + cell]);
    }
    Ok(out)
}

/// Probabilities over `rect`, visiting cells in `order` (row-major cell
/// indices) or row-major when `None`.
pub fn stitch_probabilities(
    model: &mut DualMapper<f32>,
    rasters: &RegionRasters,
    rect: &Rect,
    cell: usize,
    order: Option<&[usize]>,
) -> Result<RasterGrid> {
    rasters.validate()?;
    if rect.x1() > rasters.width() || rect.y1() > rasters.height() {
        return Err(Error::Invalid(format!("rectangle {rect:?} exceeds the region")));
    }
    let cells = stitch_cells(rect, cell)?;
    let visit: Vec<usize> = match order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..cells.len()).collect::<Vec<_>>() {
                return Err(Error::Invalid("cell order must be a permutation".into()));
            }
            o.to_vec()
        }
        None => (0..cells.len()).collect(),
    };
    let mut out = RasterGrid::zeros(rect.h, rect.w, RasterKind::ImageChannel);
    for i in visit {
        let (top, left) = cells[i];
        let probs = predict_cell(model, rasters, top, left, cell)?;
        let (rows, cols) = (cell.min(rect.y1() - top), cell.min(rect.x1() - left));
        for r in 0..rows {
            let dst = (top - rect.y0 + r) * rect.w + (left - rect.x0);
            out.values[dst..dst + cols].copy_from_slice(&probs[r * cell..r * cell + cols]);
        }
    }
    Ok(out)
}

/// Binary road map of `rect` from 224-pixel cells with 448-pixel context.
pub fn stitch_predict(model: &mut DualMapper<f32>, rasters: &RegionRasters, rect: &Rect) -> Result<BinaryMap> {
    let probs = stitch_probabilities(model, rasters, rect, CELL_SIZE, None)?;
    BinaryMap::threshold(rect.h, rect.w, &probs.values)
}

/// `(G_I, G_T)` rasters of the first item at every level, coarsest first.
pub fn gate_maps(model: &mut DualMapper<f32>, tile: &TileSample) -> Result<Vec<(RasterGrid, RasterGrid)>> {
    tile.validate()?;
    let mut g = Graph::inference();
    let out = model.forward_full(&mut g, &tile.image_tensor(), &tile.traj_tensor(), Mode::Eval)?;
    let grid = |t: &Tensor<f32>| {
        let s = t.shape();
        RasterGrid::from_values(s.h, s.w, RasterKind::ImageChannel, t.plane(0, 0).to_vec())
    };
    Level::ALL
        .iter()
        .map(|&l| {
            let st = out.gates_at(l);
            Ok((grid(g.value(st.image))?, grid(g.value(st.traj))?))
        })
        .collect()
}

pub fn gate_file_name(modality: &str, level: Level) -> String {
    format!("gate_{modality}_l{level}.png")
}

/// Write `G_I` and `G_T` of all five levels as 8-bit grayscale PNGs.
pub fn export_gates(model: &mut DualMapper<f32>, tile: &TileSample, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let maps = gate_maps(model, tile)?;
    let mut paths = Vec::with_capacity(10);
    for (level, (gi, gt)) in Level::ALL.iter().zip(&maps) {
        for (modality, grid) in [("image", gi), ("traj", gt)] {
            let p = out_dir.join(gate_file_name(modality, *level));
            write_gray_png(&p, grid)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// Mean of `G_I` and `G_T` at the finest level over all tiles.
pub fn mean_gates(model: &mut DualMapper<f32>, tiles: &[TileSample]) -> Result<(f64, f64)> {
    let (mut si, mut st, mut n) = (0.0f64, 0.0f64, 0usize);
    for t in tiles {
        let maps = gate_maps(model, t)?;
        let (gi, gt) = &maps[Level::FINEST.index()];
        si += gi.values.iter().map(|&v| v as f64).sum::<f64>();
        st += gt.values.iter().map(|&v| v as f64).sum::<f64>();
        n += gi.values.len();
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((si / n as f64, st / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub metrics: MetricsReport,
    pub specs: Vec<AttackSpec>,
}

/// Attack spec of tile `index` under `seed`.
pub fn attack_spec_for(seed: u64, index: u64) -> AttackSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    AttackSpec::random(&mut rng)
}

/// Metrics over attacked copies of the tiles, one random spec per tile.
pub fn attack_eval(model: &mut DualMapper<f32>, tiles: &[TileSample], seed: u64) -> Result<AttackReport> {
    let mut total = ConfusionCounts::default();
    let mut specs = Vec::with_capacity(tiles.len());
    for (i, t) in tiles.iter().enumerate() {
        let spec = attack_spec_for(seed, i as u64);
        let attacked = apply_info_loss(t, &spec)?;
        total.merge(&evaluate_tiles(model, std::slice::from_ref(&attacked))?);
        specs.push(spec);
    }
    Ok(AttackReport {
        metrics: MetricsReport::new(&total),
        specs,
    })
}

/// A tile together with its GPS fixes in tile pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTile {
    pub tile: TileSample,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub blur_factors: Vec<usize>,
    pub noise_sigmas_m: Vec<f64>,
    pub resolution: f64,
    pub traj_cap: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub iou: f64,
    pub f1: f64,
    pub mean_gate_image: f64,
    pub mean_gate_traj: f64,
}

/// The settings visited by [`quality_sweep`]: every blur factor with clean
/// trajectories, then every noise level with the clean image.
pub fn sweep_settings(s: &SweepSettings) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = s.blur_factors.iter().map(|&f| (f, 0.0)).collect();
    for &sigma in &s.noise_sigmas_m {
        if !out.contains(&(1, sigma)) {
            out.push((1, sigma));
        }
    }
    out
}

fn setting_label(factor: usize, sigma: f64) -> String {
    format!("blur={factor};sigma_m={sigma}")
}

/// Metrics and mean finest-level gates under each degradation setting.
pub fn quality_sweep(model: &mut DualMapper<f32>, tiles: &[SweepTile], settings: &SweepSettings, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (factor, sigma) in sweep_settings(settings) {
        let degraded = tiles
            .iter()
            .enumerate()
            .map(|(i, t)| degrade(&t.tile, &t.points, factor, sigma, settings.resolution, settings.traj_cap, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let m = metrics(&evaluate_tiles(model, &degraded)?);
        let (gi, gt) = mean_gates(model, &degraded)?;
        rows.push(SweepRow {
            setting: setting_label(factor, sigma),
            iou: m.iou,
            f1: m.f1,
            mean_gate_image: gi,
            mean_gate_traj: gt,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Predicted map as a 1-bit PNG.
pub fn write_prediction_png(path: &Path, pred: &BinaryMap) -> Result<()> {
    write_mask_png(path, pred.width, pred.height, &pred.data)
}

/// RGB overlay: white hits, black background, red misses, blue false alarms.
pub fn write_error_overlay(path: &Path, pred: &BinaryMap, gt: &BinaryMap) -> Result<()> {
    confusion(pred, gt)?;
    let mut data = Vec::with_capacity(pred.data.len() * 3);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let px: [u8; 3] = match (p, g) {
            (true, true) => [255, 255, 255],
            (false, false) => [0, 0, 0],
            (false, true) => [255, 0, 0],
            (true, false) => [0, 0, 255],
        };
        data.extend_from_slice(&px);
    }
    write_png(path, pred.width, pred.height, png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&ConfusionCounts { tp: 3, fp: 1, fn_: 1, tn: 10 });
        assert!((m.iou - 0.6).abs() < 1e-12 && (m.f1 - 0.75).abs() < 1e-12);
        assert!(m.flags.is_empty());
        let m = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 5 });
        assert_eq!((m.iou, m.f1), (0.0, 0.0));
        assert_eq!(m.flags[0], MetricFlag::Degenerate);
    }

    #[test]
    fn report_json_keys() {
        let r = MetricsReport::new(&ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 0 });
        let v = serde_json::to_value(&r).unwrap();
        for k in ["iou", "f1", "precision", "recall", "tp", "fp", "fn", "tn", "flags"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn confusion_extremes() {
        let gt = BinaryMap::new(2, 2, vec![true, false, true, false]).unwrap();
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = BinaryMap::new(2, 2, gt.data.iter().map(|b| !b).collect()).unwrap();
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&BinaryMap::new(1, 4, vec![false; 4]).unwrap(), &gt).is_err());
    }

    #[test]
    fn stitch_cells_cover_the_rectangle() {
        assert_eq!(stitch_cells(&Rect::new(0, 0, 64, 32), 32).unwrap(), vec![(0, 0), (0, 32)]);
        assert_eq!(stitch_cells(&Rect::new(4, 0, 60, 33), 32).unwrap(), vec![(0, 4), (0, 36), (32, 4), (32, 36)]);
        assert!(stitch_cells(&Rect::new(0, 0, 60, 32), 31).is_err());
    }

    #[test]
    fn sweep_settings_cover_both_axes_once() {
        let s = SweepSettings {
            blur_factors: vec![1, 2, 4],
            noise_sigmas_m: vec![0.0, 10.0],
            resolution: 1.0,
            traj_cap: 256,
        };
        assert_eq!(sweep_settings(&s), vec![(1, 0.0), (2, 0.0), (4, 0.0), (1, 10.0)]);
    }
}
