//! Procedural road scenes: straight roads drawn into an RGB image, GPS
//! fixes sampled along the road centrelines with Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{
    jitter_pixels, rasterize_pixels, render_segments, scale_traj, unproject, GeoRegion, RasterGrid, RasterKind, RegionRasters, RoadPolyline,
    TileSample, TrajectoryPoint,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Expected roads per 224 x 224 area.
    pub roads_per_tile: f64,
    pub road_width: f64,
    /// Expected GPS fixes per pixel of road length.
    pub fixes_per_px: f64,
    pub gps_sigma_px: f64,
    pub traj_cap: u32,
    pub image_noise: f64,
    /// Share of roads that carry no trajectories.
    pub untracked_share: f64,
    /// Share of roads hidden in the image.
    pub occluded_share: f64,
    /// Expected buildings per 224 x 224 area.
    pub buildings_per_tile: f64,
    /// Grass and soil waves under the roads; plain grass otherwise.
    pub textured_ground: bool,
    pub road_colour: [f32; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            roads_per_tile: 3.0,
            road_width: 10.0,
            fixes_per_px: 0.5,
            gps_sigma_px: 2.0,
            traj_cap: 256,
            image_noise: 0.05,
            untracked_share: 0.0,
            occluded_share: 0.0,
            buildings_per_tile: 6.0,
            textured_ground: true,
            road_colour: ASPHALT,
        }
    }
}

type Segment = ((f64, f64), (f64, f64));

/// Vector description of a scene in pixel coordinates `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub height: usize,
    pub width: usize,
    pub roads: Vec<Segment>,
    pub tracked: Vec<bool>,
    pub visible: Vec<bool>,
    pub points: Vec<(f64, f64)>,
}

/// A generated region with its rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRegion {
    pub scene: SynthScene,
    pub rasters: RegionRasters,
}

/// A generated tile with its fixes in tile pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTile {
    pub tile: TileSample,
    pub points: Vec<(f64, f64)>,
}

/// The line through `(r, c)` at angle `theta`, clipped generously past the
/// grid so it crosses it completely.
fn crossing_segment(r: f64, c: f64, theta: f64, reach: f64) -> Segment {
    let (dy, dx) = (theta.sin() * reach, theta.cos() * reach);
    ((r - dy, c - dx), (r + dy, c + dx))
}

fn clip_to_box(seg: Segment, h: f64, w: f64, margin: f64) -> Option<Segment> {
    // Liang-Barsky against [-margin, h + margin] x [-margin, w + margin].
    let ((r0, c0), (r1, c1)) = seg;
    let (dr, dc) = (r1 - r0, c1 - c0);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dr, r0 + margin), (dr, h + margin - r0), (-dc, c0 + margin), (dc, w + margin - c0)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    (t0 < t1).then(|| ((r0 + t0 * dr, c0 + t0 * dc), (r0 + t1 * dr, c0 + t1 * dc)))
}

pub fn synth_scene<R: Rng + ?Sized>(cfg: &SynthConfig, height: usize, width: usize, rng: &mut R) -> Result<SynthScene> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid("empty scene".into()));
    }
    let (h, w) = (height as f64, width as f64);
    let area = h * w / (224.0 * 224.0);
    let n_roads = (Poisson::new(cfg.roads_per_tile * area).map(|p| p.sample(rng) as usize).unwrap_or(0)).max(1);
    let reach = h + w;
    let mut roads = Vec::with_capacity(n_roads);
    let mut tracked = Vec::with_capacity(n_roads);
    let mut visible = Vec::with_capacity(n_roads);
    while roads.len() < n_roads {
        let (r, c) = (rng.random_range(0.1 * h..0.9 * h), rng.random_range(0.1 * w..0.9 * w));
        // Mostly axis-aligned street grids with some diagonals.
        let theta = match rng.random_range(0..4) {
            0 => 0.0,
            1 => std::f64::consts::FRAC_PI_2,
            _ => rng.random_range(0.0..std::f64::consts::PI),
        };
        if let Some(seg) = clip_to_box(crossing_segment(r, c, theta, reach), h, w, cfg.road_width) {
            roads.push(seg);
            tracked.push(!rng.random_bool(cfg.untracked_share.clamp(0.0, 1.0)));
            visible.push(!rng.random_bool(cfg.occluded_share.clamp(0.0, 1.0)));
        }
    }
    let mut centre = Vec::new();
    for (seg, &t) in roads.iter().zip(&tracked) {
        if !t {
            continue;
        }
        let ((r0, c0), (r1, c1)) = *seg;
        let len = ((r1 - r0).powi(2) + (c1 - c0).powi(2)).sqrt();
        let busy = rng.random_range(0.5..1.5);
        let n = Poisson::new((len * cfg.fixes_per_px * busy).max(1e-9)).map(|p| p.sample(rng) as usize).unwrap_or(0);
        for _ in 0..n {
            let t: f64 = rng.random_range(0.0..1.0);
            centre.push((r0 + t * (r1 - r0), c0 + t * (c1 - c0)));
        }
    }
    let points = jitter_pixels(&centre, cfg.gps_sigma_px, rng);
    Ok(SynthScene {
        height,
        width,
        roads,
        tracked,
        visible,
        points,
    })
}

const GRASS: [f32; 3] = [0.30, 0.42, 0.22];
const SOIL: [f32; 3] = [0.52, 0.45, 0.33];
const ROOF: [f32; 3] = [0.62, 0.36, 0.30];
const ASPHALT: [f32; 3] = [0.47, 0.47, 0.50];

/// Paint the RGB image of a scene.
pub fn paint_image<R: Rng + ?Sized>(cfg: &SynthConfig, scene: &SynthScene, rng: &mut R) -> [RasterGrid; 3] {
    let (h, w) = (scene.height, scene.width);
    // Low-frequency mix between grass and soil.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.01..0.05), rng.random_range(0.01..0.05), rng.random_range(0.0..6.3)))
        .collect();
    let mut img: [Vec<f32>; 3] = std::array::from_fn(|_| vec![0.0; h * w]);
    for r in 0..h {
        for c in 0..w {
            let s: f64 = waves.iter().map(|&(a, b, p)| (a * r as f64 + b * c as f64 + p).sin()).sum::<f64>() / 3.0;
            let t = if cfg.textured_ground { (0.5 + 0.5 * s) as f32 } else { 0.0 };
            for k in 0..3 {
                img[k][r * w + c] = GRASS[k] * (1.0 - t) + SOIL[k] * t;
            }
        }
    }
    let area = (h * w) as f64 / (224.0 * 224.0);
    let n_buildings = Poisson::new((cfg.buildings_per_tile * area).max(1e-9)).map(|p| p.sample(rng) as usize).unwrap_or(0);
    for _ in 0..n_buildings {
        let (bh, bw) = (rng.random_range(8..24).min(h), rng.random_range(8..24).min(w));
        let (r0, c0) = (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw));
        let shade: f32 = rng.random_range(0.85..1.15);
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                for k in 0..3 {
                    img[k][r * w + c] = ROOF[k] * shade;
                }
            }
        }
    }
    let visible: Vec<Segment> = scene.roads.iter().zip(&scene.visible).filter(|(_, &v)| v).map(|(s, _)| *s).collect();
    let mask = render_segments(&visible, h, w, cfg.road_width);
    for (i, &m) in mask.values.iter().enumerate() {
        if m == 1.0 {
            for k in 0..3 {
                img[k][i] = cfg.road_colour[k];
            }
        }
    }
    if cfg.image_noise > 0.0 {
        let noise = Normal::new(0.0, cfg.image_noise).expect("positive noise");
        for plane in &mut img {
            for v in plane.iter_mut() {
                *v = (*v + noise.sample(rng) as f32).clamp(0.0, 1.0);
            }
        }
    }
    img.map(|v| RasterGrid {
        height: h,
        width: w,
        kind: RasterKind::ImageChannel,
        values: v,
    })
}

pub fn synth_region(cfg: &SynthConfig, height: usize, width: usize, seed: u64) -> Result<SynthRegion> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = synth_scene(cfg, height, width, &mut rng)?;
    let image = paint_image(cfg, &scene, &mut rng);
    let traj = scale_traj(&rasterize_pixels(&scene.points, height, width), cfg.traj_cap);
    let label = render_segments(&scene.roads, height, width, cfg.road_width);
    Ok(SynthRegion {
        scene,
        rasters: RegionRasters {
            image,
            traj,
            label: Some(label),
        },
    })
}

/// Tile `index` of the set generated from `seed`.
pub fn synth_tile(cfg: &SynthConfig, size: usize, seed: u64, index: u64) -> Result<SynthTile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let region = synth_region(cfg, size, size, rng.random())?;
    Ok(SynthTile {
        tile: region.rasters.crop(0, 0, size),
        points: region.scene.points,
    })
}

pub fn synth_tiles(cfg: &SynthConfig, size: usize, count: usize, seed: u64) -> Result<Vec<SynthTile>> {
    (0..count as u64).map(|i| synth_tile(cfg, size, seed, i)).collect()
}

/// Which half of a tile keeps which modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlankSide {
    /// Image zeroed on the left half, trajectories on the right.
    ImageLeft,
    /// Image zeroed on the right half, trajectories on the left.
    ImageRight,
}

impl BlankSide {
    /// Whether column `col` of a `width`-wide tile has its image removed.
    pub fn image_blanked(self, col: usize, width: usize) -> bool {
        (col < width / 2) == (self == BlankSide::ImageLeft)
    }
}

/// Remove the image in one half of the tile and the trajectories in the
/// other; the label stays.
pub fn blank_halves(tile: &TileSample, side: BlankSide) -> TileSample {
    let mut out = tile.clone();
    let w = tile.width();
    for r in 0..tile.height() {
        for c in 0..w {
            if side.image_blanked(c, w) {
                for g in &mut out.image {
                    g.set(r, c, 0.0);
                }
            } else {
                out.traj.set(r, c, 0.0);
            }
        }
    }
    out
}

impl SynthScene {
    /// Geographic form of the scene: fixes grouped into one trajectory per
    /// road with increasing timestamps, and roads as two-vertex polylines.
    pub fn to_geo(&self, region: &GeoRegion) -> (Vec<TrajectoryPoint>, Vec<RoadPolyline>) {
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let (lat, lon) = unproject(r, c, region);
                TrajectoryPoint {
                    traj_id: format!("t{}", i / 50),
                    timestamp: (i % 50) as f64 * 15.0,
                    lat,
                    lon,
                }
            })
            .collect();
        let roads = self
            .roads
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                let (la, oa) = unproject(a.0, a.1, region);
                let (lb, ob) = unproject(b.0, b.1, region);
                RoadPolyline {
                    id: format!("r{i}"),
                    vertices: vec![[la, oa], [lb, ob]],
                }
            })
            .collect();
        (points, roads)
    }
}
