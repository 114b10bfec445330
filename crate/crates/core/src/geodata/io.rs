//! File formats: trajectory CSV, road NDJSON, PNG imagery with a JSON
//! sidecar, `.ftz` float rasters and split layouts.
//!
//! An `.ftz` file is one line of UTF-8 JSON `{"shape":[h,w],"kind":...}`
//! terminated by `\n`, followed by `h * w` little-endian `f32` values in
//! row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RasterGrid, RasterKind, RoadPolyline, SplitLayout, TrajectoryPoint};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Stream trajectory records `traj_id,timestamp,lat,lon` to `f`; rows that
/// fail to parse arrive as `None`.
pub fn for_each_trajectory_point(path: &Path, has_header: bool, mut f: impl FnMut(Option<TrajectoryPoint>)) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => f(parse_point(&record)),
            Err(e) if e.is_io_error() => return Err(Error::format(path, e)),
            Err(_) => f(None),
        }
    }
    Ok(())
}

fn parse_point(r: &csv::StringRecord) -> Option<TrajectoryPoint> {
    if r.len() != 4 {
        return None;
    }
    Some(TrajectoryPoint {
        traj_id: r[0].to_owned(),
        timestamp: r[1].parse().ok()?,
        lat: r[2].parse().ok()?,
        lon: r[3].parse().ok()?,
    })
}

pub fn read_trajectories(path: &Path, has_header: bool) -> Result<Vec<Option<TrajectoryPoint>>> {
    let mut out = Vec::new();
    for_each_trajectory_point(path, has_header, |p| out.push(p))?;
    Ok(out)
}

pub fn write_trajectories(path: &Path, points: &[TrajectoryPoint], header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| Error::format(path, e);
    if header {
        w.write_record(["traj_id", "timestamp", "lat", "lon"]).map_err(err)?;
    }
    for p in points {
        w.write_record([p.traj_id.clone(), p.timestamp.to_string(), p.lat.to_string(), p.lon.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct RoadRecord {
    id: serde_json::Value,
    vertices: Vec<[f64; 2]>,
}

/// Read road polylines, one JSON object per line. Repeated consecutive
/// vertices are dropped; polylines left with fewer than two vertices are
/// skipped and counted.
pub fn read_roads(path: &Path) -> Result<(Vec<RoadPolyline>, usize)> {
    let reader = BufReader::new(open(path)?);
    let mut roads = Vec::new();
    let mut skipped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoadRecord = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        let id = match rec.id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        let mut vertices = rec.vertices;
        vertices.dedup();
        match RoadPolyline::new(id, vertices) {
            Ok(r) => roads.push(r),
            Err(_) => skipped += 1,
        }
    }
    Ok((roads, skipped))
}

pub fn write_roads(path: &Path, roads: &[RoadPolyline]) -> Result<()> {
    let mut w = create(path)?;
    for r in roads {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct FtzHeader {
    shape: [usize; 2],
    kind: RasterKind,
}

pub fn write_ftz(path: &Path, grid: &RasterGrid) -> Result<()> {
    let mut w = create(path)?;
    let header = serde_json::to_string(&FtzHeader {
        shape: [grid.height, grid.width],
        kind: grid.kind,
    })?;
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for v in &grid.values {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_ftz(path: &Path) -> Result<RasterGrid> {
    let mut r = BufReader::new(open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header: FtzHeader = serde_json::from_slice(&line).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let [h, w] = header.shape;
    let mut bytes = Vec::with_capacity(h * w * 4);
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != h * w * 4 {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", h * w * 4, bytes.len())));
    }
    let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    RasterGrid::from_values(h, w, header.kind, values)
}

/// Georeference stored next to an image as `<stem>.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub resolution: f64,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Decode any 8-bit or 16-bit PNG into three `[0, 1]` channels.
pub fn read_png_rgb(path: &Path) -> Result<[RasterGrid; 3]> {
    let limits = png::Limits { bytes: usize::MAX };
    let mut decoder = png::Decoder::new_with_limits(BufReader::new(open(path)?), limits);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let err = |e: png::DecodingError| Error::format(path, e);
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "palette not expanded")),
    };
    let mut planes = [vec![0f32; h * w], vec![0f32; h * w], vec![0f32; h * w]];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for x in 0..w {
            let px = &row[x * channels..(x + 1) * channels];
            for (c, plane) in planes.iter_mut().enumerate() {
                let v = if channels < 3 { px[0] } else { px[c] };
                plane[y * w + x] = v as f32 / 255.0;
            }
        }
    }
    let [r, g, b] = planes;
    let grid = |v| RasterGrid::from_values(h, w, RasterKind::ImageChannel, v);
    Ok([grid(r)?, grid(g)?, grid(b)?])
}

pub fn read_image(path: &Path) -> Result<([RasterGrid; 3], ImageSidecar)> {
    let side = sidecar_path(path);
    let meta: ImageSidecar = serde_json::from_reader(BufReader::new(open(&side)?)).map_err(|e| Error::format(&side, e))?;
    Ok((read_png_rgb(path)?, meta))
}

pub fn write_image(path: &Path, rgb: &[RasterGrid; 3], meta: &ImageSidecar) -> Result<()> {
    let (h, w) = (rgb[0].height, rgb[0].width);
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for g in rgb {
            data.push(to_u8(g.values[i]));
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &data)?;
    let side = sidecar_path(path);
    let mut f = create(&side)?;
    serde_json::to_writer_pretty(&mut f, meta)?;
    f.write_all(b"\n").map_err(|e| Error::io(&side, e))?;
    f.flush().map_err(|e| Error::io(&side, e))
}

/// `round(255 * v)` with `v` clamped to `[0, 1]`.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let err = |e: png::EncodingError| Error::format(path, e);
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(data).map_err(err)?;
    writer.finish().map_err(err)
}

/// 8-bit grayscale PNG of `round(255 * v)`.
pub fn write_gray_png(path: &Path, grid: &RasterGrid) -> Result<()> {
    let data: Vec<u8> = grid.values.iter().map(|&v| to_u8(v)).collect();
    write_png(path, grid.width, grid.height, png::ColorType::Grayscale, png::BitDepth::Eight, &data)
}

/// 1-bit PNG, white where `mask` is set.
pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let stride = width.div_ceil(8);
    let mut data = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                data[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::One, &data)
}

pub fn read_split_layout(path: &Path) -> Result<SplitLayout> {
    let layout: SplitLayout = serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| Error::format(path, e))?;
    layout.validate()?;
    Ok(layout)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}
