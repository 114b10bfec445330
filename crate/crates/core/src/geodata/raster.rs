//! Trajectory point counting and channel scaling.

use serde::{Deserialize, Serialize};

use super::{project, GeoRegion, RasterGrid, RasterKind, TrajectoryPoint};

pub const DEFAULT_TRAJ_CAP: u32 = 256;

/// Bookkeeping of one rasterization pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterSummary {
    /// Records seen, including malformed ones.
    pub read: u64,
    pub skipped: u64,
    pub in_region: u64,
    pub out_of_region: u64,
}

impl RasterSummary {
    pub fn merge(&mut self, other: &RasterSummary) {
        self.read += other.read;
        self.skipped += other.skipped;
        self.in_region += other.in_region;
        self.out_of_region += other.out_of_region;
    }
}

/// Count points per cell. Items are `None` for records that failed to parse;
/// they are counted as skipped, as are points with invalid coordinates.
pub fn rasterize_trajectories<I>(points: I, region: &GeoRegion) -> (RasterGrid, RasterSummary)
where
    I: IntoIterator<Item = Option<TrajectoryPoint>>,
{
    let mut grid = RasterGrid::zeros(region.height_px, region.width_px, RasterKind::TrajCount);
    let mut summary = RasterSummary::default();
    for p in points {
        summary.read += 1;
        let Some(p) = p.filter(|p| p.is_valid() && p.lat.is_finite() && p.lon.is_finite()) else {
            summary.skipped += 1;
            continue;
        };
        let (row, col) = project(p.lat, p.lon, region);
        if add_point(&mut grid, row, col) {
            summary.in_region += 1;
        } else {
            summary.out_of_region += 1;
        }
    }
    (grid, summary)
}

fn add_point(grid: &mut RasterGrid, row: f64, col: f64) -> bool {
    let (r, c) = (row.floor(), col.floor());
    if r >= 0.0 && c >= 0.0 && r < grid.height as f64 && c < grid.width as f64 {
        grid.values[r as usize * grid.width + c as usize] += 1.0;
        true
    } else {
        false
    }
}

/// Count points already expressed in fractional pixel coordinates.
pub fn rasterize_pixels(points: &[(f64, f64)], height: usize, width: usize) -> RasterGrid {
    let mut grid = RasterGrid::zeros(height, width, RasterKind::TrajCount);
    for &(r, c) in points {
        add_point(&mut grid, r, c);
    }
    grid
}

/// `min(log1p(n), log1p(cap)) / log1p(cap)`.
pub fn scale_traj(counts: &RasterGrid, cap: u32) -> RasterGrid {
    let cap = cap.max(1) as f64;
    let denom = cap.ln_1p();
    let values = counts
        .values
        .iter()
        .map(|&n| ((n as f64).ln_1p().min(denom) / denom) as f32)
        .collect();
    RasterGrid {
        height: counts.height,
        width: counts.width,
        kind: RasterKind::TrajScaled,
        values,
    }
}
