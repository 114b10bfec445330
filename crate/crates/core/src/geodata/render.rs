//! Road polylines to binary labels.

use super::{project, GeoRegion, RasterGrid, RasterKind, RoadPolyline};

pub const DEFAULT_ROAD_WIDTH_PX: f64 = 10.0;

/// Euclidean distance from `p` to the segment `a`-`b`, all `(row, col)`.
pub fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

/// Mark every pixel whose centre lies within `width / 2` of a segment.
/// Segments are `(row, col)` endpoint pairs in pixel space; zero-length
/// segments are skipped.
pub fn render_segments(segments: &[((f64, f64), (f64, f64))], height: usize, width: usize, road_width: f64) -> RasterGrid {
    let mut grid = RasterGrid::zeros(height, width, RasterKind::Label);
    let radius = road_width / 2.0;
    for &(a, b) in segments {
        if a == b {
            continue;
        }
        let r0 = (a.0.min(b.0) - radius - 1.0).floor().max(0.0);
        let r1 = (a.0.max(b.0) + radius + 1.0).ceil().min(height as f64);
        let c0 = (a.1.min(b.1) - radius - 1.0).floor().max(0.0);
        let c1 = (a.1.max(b.1) + radius + 1.0).ceil().min(width as f64);
        if r0 >= r1 || c0 >= c1 {
            continue;
        }
        for r in r0 as usize..r1 as usize {
            for c in c0 as usize..c1 as usize {
                let centre = (r as f64 + 0.5, c as f64 + 0.5);
                if segment_distance(centre, a, b) <= radius {
                    grid.values[r * width + c] = 1.0;
                }
            }
        }
    }
    grid
}

/// Render road polylines at `road_width` pixels onto the region grid.
pub fn render_ground_truth(roads: &[RoadPolyline], region: &GeoRegion, road_width: f64) -> RasterGrid {
    let mut segments = Vec::new();
    for road in roads {
        let pts: Vec<_> = road.vertices.iter().map(|v| project(v[0], v[1], region)).collect();
        segments.extend(pts.windows(2).map(|w| (w[0], w[1])));
    }
    render_segments(&segments, region.height_px, region.width_px, road_width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_cases() {
        assert_eq!(segment_distance((0.0, 5.0), (0.0, 0.0), (0.0, 10.0)), 0.0);
        assert_eq!(segment_distance((3.0, 5.0), (0.0, 0.0), (0.0, 10.0)), 3.0);
        assert_eq!(segment_distance((0.0, 13.0), (0.0, 0.0), (0.0, 10.0)), 3.0);
        assert_eq!(segment_distance((4.0, 3.0), (0.0, 0.0), (0.0, 0.0)), 5.0);
    }

    #[test]
    fn vertical_band_is_ten_wide() {
        let g = render_segments(&[((10.0, 32.0), (54.0, 32.0))], 64, 64, 10.0);
        let row: Vec<usize> = (0..64).filter(|&c| g.get(32, c) == 1.0).collect();
        assert_eq!(row.len(), 10);
        assert_eq!((row[0], row[9]), (27, 36));
    }

    #[test]
    fn degenerate_segment_draws_nothing() {
        let g = render_segments(&[((5.0, 5.0), (5.0, 5.0))], 16, 16, 10.0);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }
}
