//! Information-loss attack and data-quality degradation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rasterize_pixels, scale_traj, RasterGrid, TileSample, TrajectoryPoint, METERS_PER_DEGREE};
use crate::error::{Error, Result};

/// Tile quadrant, numbered counterclockwise from the top-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Quadrant(u8);

impl Quadrant {
    pub fn new(q: u8) -> Result<Self> {
        if (1..=4).contains(&q) {
            Ok(Quadrant(q))
        } else {
            Err(Error::Invalid(format!("quadrant {q} outside 1..=4")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// `(row range, col range)` inside an `h x w` tile.
    pub fn bounds(self, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (hh, hw) = (h / 2, w / 2);
        match self.0 {
            1 => (0..hh, hw..w),
            2 => (0..hh, 0..hw),
            3 => (hh..h, 0..hw),
            _ => (hh..h, hw..w),
        }
    }
}

impl TryFrom<u8> for Quadrant {
    type Error = Error;

    fn try_from(q: u8) -> Result<Self> {
        Quadrant::new(q)
    }
}

impl From<Quadrant> for u8 {
    fn from(q: Quadrant) -> u8 {
        q.0
    }
}

/// Which quadrant loses its image and which its trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub image_quadrant: Quadrant,
    pub traj_quadrant: Quadrant,
}

impl AttackSpec {
    pub fn new(image_quadrant: u8, traj_quadrant: u8) -> Result<Self> {
        let spec = AttackSpec {
            image_quadrant: Quadrant::new(image_quadrant)?,
            traj_quadrant: Quadrant::new(traj_quadrant)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_quadrant == self.traj_quadrant {
            return Err(Error::Invalid(format!("image and trajectory attacks share quadrant {}", self.image_quadrant.0)));
        }
        Ok(())
    }

    /// Two distinct quadrants drawn uniformly.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let a = rng.random_range(1..=4u8);
        let mut b = rng.random_range(1..=3u8);
        if b >= a {
            b += 1;
        }
        AttackSpec {
            image_quadrant: Quadrant(a),
            traj_quadrant: Quadrant(b),
        }
    }
}

fn zero_quadrant(g: &mut RasterGrid, q: Quadrant) {
    let (rows, cols) = q.bounds(g.height, g.width);
    for r in rows {
        g.values[r * g.width + cols.start..r * g.width + cols.end].fill(0.0);
    }
}

/// Zero the image in one quadrant and the trajectories in another.
pub fn apply_info_loss(tile: &TileSample, spec: &AttackSpec) -> Result<TileSample> {
    spec.validate()?;
    tile.validate()?;
    if tile.height() % 2 != 0 || tile.width() % 2 != 0 {
        return Err(Error::Invalid(format!("tile {}x{} has no equal quadrants", tile.height(), tile.width())));
    }
    let mut out = tile.clone();
    for g in &mut out.image {
        zero_quadrant(g, spec.image_quadrant);
    }
    zero_quadrant(&mut out.traj, spec.traj_quadrant);
    Ok(out)
}

/// Box down-sample by `factor`, then nearest up-sample back. Edge blocks
/// that are only partially inside the raster average what they cover.
pub fn degrade_image(g: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    if factor == 0 {
        return Err(Error::Invalid("blur factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(g.clone());
    }
    let mut out = g.clone();
    for by in (0..g.height).step_by(factor) {
        for bx in (0..g.width).step_by(factor) {
            let (y1, x1) = ((by + factor).min(g.height), (bx + factor).min(g.width));
            let mut sum = 0.0f64;
            for y in by..y1 {
                sum += g.values[y * g.width + bx..y * g.width + x1].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = (sum / ((y1 - by) * (x1 - bx)) as f64) as f32;
            for y in by..y1 {
                out.values[y * g.width + bx..y * g.width + x1].fill(mean);
            }
        }
    }
    Ok(out)
}

/// Add isotropic Gaussian noise of `sigma` pixels to each point.
pub fn jitter_pixels<R: Rng + ?Sized>(points: &[(f64, f64)], sigma: f64, rng: &mut R) -> Vec<(f64, f64)> {
    if sigma <= 0.0 {
        return points.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    points
        .iter()
        .map(|&(r, c)| (r + normal.sample(rng), c + normal.sample(rng)))
        .collect()
}

/// Displace each fix by isotropic Gaussian noise of `sigma_m` meters.
pub fn jitter_points(points: &[TrajectoryPoint], sigma_m: f64, seed: u64) -> Vec<TrajectoryPoint> {
    if sigma_m <= 0.0 {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma_m).expect("positive sigma");
    points
        .iter()
        .map(|p| {
            let north = normal.sample(&mut rng);
            let east = normal.sample(&mut rng);
            TrajectoryPoint {
                lat: p.lat + north / METERS_PER_DEGREE,
                lon: p.lon + east / (METERS_PER_DEGREE * p.lat.to_radians().cos()),
                ..p.clone()
            }
        })
        .collect()
}

/// Lower the image resolution by `factor` and perturb the GPS fixes by
/// `sigma_m` meters before re-rasterizing them with `cap`. `points` are the
/// tile's fixes in tile pixel coordinates. With `factor == 1` and
/// `sigma_m == 0` the tile is returned unchanged.
pub fn degrade(tile: &TileSample, points: &[(f64, f64)], factor: usize, sigma_m: f64, resolution: f64, cap: u32, seed: u64) -> Result<TileSample> {
    if !(sigma_m >= 0.0) || !(resolution > 0.0) {
        return Err(Error::Invalid(format!("sigma {sigma_m} m at resolution {resolution}")));
    }
    let mut out = tile.clone();
    for g in &mut out.image {
        *g = degrade_image(g, factor)?;
    }
    if sigma_m > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let moved = jitter_pixels(points, sigma_m / resolution, &mut rng);
        out.traj = scale_traj(&rasterize_pixels(&moved, tile.height(), tile.width()), cap);
    }
    Ok(out)
}
