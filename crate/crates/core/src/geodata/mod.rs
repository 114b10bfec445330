//! Geographic inputs: projection onto a metric pixel grid, trajectory
//! rasterization, road rendering, region splits, tile sampling and the
//! degradation transforms used by the robustness harnesses.

mod attack;
pub mod io;
mod project;
mod raster;
mod render;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use attack::{apply_info_loss, degrade, degrade_image, jitter_pixels, jitter_points, AttackSpec, Quadrant};
pub use project::{project, unproject, EARTH_RADIUS_M, METERS_PER_DEGREE};
pub use raster::{rasterize_pixels, rasterize_trajectories, scale_traj, RasterSummary, DEFAULT_TRAJ_CAP};
pub use render::{render_ground_truth, render_segments, segment_distance, DEFAULT_ROAD_WIDTH_PX};
pub use split::{epoch_size, Rect, SplitLayout, TileSampler, TILE_SIZE};

/// A north-up pixel grid anchored at its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRegion {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub width_px: usize,
    pub height_px: usize,
    /// Meters per pixel.
    #[serde(default = "default_resolution")]
    pub resolution: f64,
}

fn default_resolution() -> f64 {
    1.0
}

impl GeoRegion {
    pub fn new(origin_lat: f64, origin_lon: f64, width_px: usize, height_px: usize, resolution: f64) -> Result<Self> {
        let r = GeoRegion {
            origin_lat,
            origin_lon,
            width_px,
            height_px,
            resolution,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Invalid(format!("region {}x{} is empty", self.width_px, self.height_px)));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Invalid(format!("resolution {} must be positive", self.resolution)));
        }
        if !(-90.0..=90.0).contains(&self.origin_lat) || !(-180.0..=180.0).contains(&self.origin_lon) {
            return Err(Error::Invalid(format!("origin ({}, {}) is not a valid coordinate", self.origin_lat, self.origin_lon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub traj_id: String,
    pub timestamp: f64,
    pub lat: f64,
    pub lon: f64,
}

impl TrajectoryPoint {
    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadPolyline {
    pub id: String,
    /// `(lat, lon)` pairs.
    pub vertices: Vec<[f64; 2]>,
}

impl RoadPolyline {
    pub fn new(id: impl Into<String>, vertices: Vec<[f64; 2]>) -> Result<Self> {
        let road = RoadPolyline { id: id.into(), vertices };
        road.validate()?;
        Ok(road)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 2 {
            return Err(Error::Invalid(format!("road {} has fewer than 2 vertices", self.id)));
        }
        if self.vertices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid(format!("road {} repeats a vertex", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    TrajCount,
    TrajScaled,
    ImageChannel,
    Label,
}

impl RasterKind {
    pub fn name(self) -> &'static str {
        match self {
            RasterKind::TrajCount => "traj_count",
            RasterKind::TrajScaled => "traj_scaled",
            RasterKind::ImageChannel => "image_channel",
            RasterKind::Label => "label",
        }
    }
}

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub height: usize,
    pub width: usize,
    pub kind: RasterKind,
    pub values: Vec<f32>,
}

impl RasterGrid {
    pub fn zeros(height: usize, width: usize, kind: RasterKind) -> Self {
        RasterGrid {
            height,
            width,
            kind,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, kind: RasterKind, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("RasterGrid", format!("{} values", height * width), values.len()));
        }
        Ok(RasterGrid { height, width, kind, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * self.width + col] = v;
    }

    /// Copy of a window; cells outside the grid read as zero.
    pub fn crop(&self, top: isize, left: isize, height: usize, width: usize) -> RasterGrid {
        let mut out = RasterGrid::zeros(height, width, self.kind);
        for r in 0..height {
            let sr = top + r as isize;
            if sr < 0 || sr >= self.height as isize {
                continue;
            }
            for c in 0..width {
                let sc = left + c as isize;
                if sc >= 0 && sc < self.width as isize {
                    out.values[r * width + c] = self.values[sr as usize * self.width + sc as usize];
                }
            }
        }
        out
    }

    /// Check the value domain of the raster kind.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            RasterKind::TrajCount => self.values.iter().all(|&v| v >= 0.0 && v.fract() == 0.0),
            RasterKind::TrajScaled | RasterKind::ImageChannel => self.values.iter().all(|&v| (0.0..=1.0).contains(&v)),
            RasterKind::Label => self.values.iter().all(|&v| v == 0.0 || v == 1.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("{} raster has values outside its domain", self.kind.name())))
        }
    }
}

/// Full-region inputs from which tiles are cut.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRasters {
    pub image: [RasterGrid; 3],
    pub traj: RasterGrid,
    pub label: Option<RasterGrid>,
}

impl RegionRasters {
    pub fn height(&self) -> usize {
        self.traj.height
    }

    pub fn width(&self) -> usize {
        self.traj.width
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let grids = self.image.iter().chain(std::iter::once(&self.traj)).chain(self.label.as_ref());
        for g in grids {
            if g.height != h || g.width != w {
                return Err(Error::shape("RegionRasters", format!("{h}x{w}"), format!("{}x{}", g.height, g.width)));
            }
        }
        Ok(())
    }

    /// Window at `(top, left)`, zero outside the region. A missing label
    /// crops to zeros.
    pub fn crop(&self, top: isize, left: isize, size: usize) -> TileSample {
        let c = |g: &RasterGrid| g.crop(top, left, size, size);
        TileSample {
            image: [c(&self.image[0]), c(&self.image[1]), c(&self.image[2])],
            traj: c(&self.traj),
            label: self.label.as_ref().map(c).unwrap_or_else(|| RasterGrid::zeros(size, size, RasterKind::Label)),
            origin: (top.max(0) as usize, left.max(0) as usize),
        }
    }
}

/// One training or evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    pub image: [RasterGrid; 3],
    pub traj: RasterGrid,
    pub label: RasterGrid,
    /// `(row, col)` of the top-left pixel in the parent region.
    pub origin: (usize, usize),
}

impl TileSample {
    pub fn height(&self) -> usize {
        self.traj.height
    }

    pub fn width(&self) -> usize {
        self.traj.width
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for g in self.image.iter().chain([&self.traj, &self.label]) {
            if g.height != h || g.width != w {
                return Err(Error::shape("TileSample", format!("{h}x{w}"), format!("{}x{}", g.height, g.width)));
            }
        }
        Ok(())
    }

    /// `[1, 3, h, w]` image tensor.
    pub fn image_tensor(&self) -> Tensor<f32> {
        let mut data = Vec::with_capacity(3 * self.height() * self.width());
        for g in &self.image {
            data.extend_from_slice(&g.values);
        }
        Tensor::from_vec(Shape::new(1, 3, self.height(), self.width()), data).expect("consistent tile")
    }

    pub fn traj_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, self.height(), self.width()), self.traj.values.clone()).expect("consistent tile")
    }

    pub fn label_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, self.height(), self.width()), self.label.values.clone()).expect("consistent tile")
    }
}

/// Stack tiles into `(image, traj, label)` batch tensors.
pub fn batch_tensors(tiles: &[TileSample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    if tiles.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    for t in tiles {
        t.validate()?;
    }
    let image: Vec<_> = tiles.iter().map(TileSample::image_tensor).collect();
    let traj: Vec<_> = tiles.iter().map(TileSample::traj_tensor).collect();
    let label: Vec<_> = tiles.iter().map(TileSample::label_tensor).collect();
    Ok((Tensor::stack(&image)?, Tensor::stack(&traj)?, Tensor::stack(&label)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_validation() {
        assert!(GeoRegion::new(41.0, -8.6, 10, 10, 1.0).is_ok());
        assert!(GeoRegion::new(41.0, -8.6, 0, 10, 1.0).is_err());
        assert!(GeoRegion::new(41.0, -8.6, 10, 10, 0.0).is_err());
        let r: GeoRegion = serde_json::from_str(r#"{"origin_lat":1,"origin_lon":2,"width_px":3,"height_px":4}"#).unwrap();
        assert_eq!(r.resolution, 1.0);
    }

    #[test]
    fn polyline_invariants() {
        assert!(RoadPolyline::new("a", vec![[0.0, 0.0]]).is_err());
        assert!(RoadPolyline::new("a", vec![[0.0, 0.0], [0.0, 0.0]]).is_err());
        assert!(RoadPolyline::new("a", vec![[0.0, 0.0], [0.0, 1.0]]).is_ok());
    }

    #[test]
    fn crop_pads_with_zeros() {
        let g = RasterGrid::from_values(2, 2, RasterKind::TrajScaled, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let c = g.crop(-1, 1, 3, 2);
        assert_eq!(c.values, vec![0.0, 0.0, 0.2, 0.0, 0.4, 0.0]);
    }

    #[test]
    fn raster_domains() {
        assert!(RasterGrid::from_values(1, 2, RasterKind::TrajCount, vec![0.0, 3.0]).unwrap().validate().is_ok());
        assert!(RasterGrid::from_values(1, 2, RasterKind::TrajCount, vec![0.5, 3.0]).unwrap().validate().is_err());
        assert!(RasterGrid::from_values(1, 1, RasterKind::Label, vec![0.5]).unwrap().validate().is_err());
        assert!(RasterGrid::from_values(1, 1, RasterKind::ImageChannel, vec![1.5]).unwrap().validate().is_err());
    }
}
