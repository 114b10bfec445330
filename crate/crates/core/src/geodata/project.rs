//! Local equirectangular projection.

use super::GeoRegion;

/// WGS84 equatorial radius.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;
/// Arc length of one degree on the sphere of radius [`EARTH_RADIUS_M`].
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// `(lat, lon)` to fractional `(row, col)`; the region origin maps to the
/// corner `(0, 0)`. Results outside the grid are returned as is.
pub fn project(lat: f64, lon: f64, region: &GeoRegion) -> (f64, f64) {
    let k = METERS_PER_DEGREE / region.resolution;
    let row = (region.origin_lat - lat) * k;
    let col = (lon - region.origin_lon) * region.origin_lat.to_radians().cos() * k;
    (row, col)
}

/// Inverse of [`project`].
pub fn unproject(row: f64, col: f64, region: &GeoRegion) -> (f64, f64) {
    let k = METERS_PER_DEGREE / region.resolution;
    let lat = region.origin_lat - row / k;
    let lon = region.origin_lon + col / (k * region.origin_lat.to_radians().cos());
    (lat, lon)
}
