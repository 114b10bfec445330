//! Region splits, uniform tile sampling and epoch accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RegionRasters, TileSample};
use crate::error::{Error, Result};

pub const TILE_SIZE: usize = 224;

/// Axis-aligned rectangle; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Rect { x0, y0, w, h }
    }

    pub fn x1(&self) -> usize {
        self.x0 + self.w
    }

    pub fn y1(&self) -> usize {
        self.y0 + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.x0 < o.x1() && o.x0 < self.x1() && self.y0 < o.y1() && o.y0 < self.y1()
    }

    pub fn contains(&self, o: &Rect) -> bool {
        self.x0 <= o.x0 && self.y0 <= o.y0 && o.x1() <= self.x1() && o.y1() <= self.y1()
    }

    /// Intersection with `[0, width) x [0, height)`.
    pub fn clip(&self, width: usize, height: usize) -> Option<Rect> {
        let (x0, y0) = (self.x0.min(width), self.y0.min(height));
        let (x1, y1) = (self.x1().min(width), self.y1().min(height));
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Train, validation and test areas of a region. An empty `train` list
/// means the whole region outside `val` and `test`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitLayout {
    #[serde(default)]
    pub train: Vec<Rect>,
    #[serde(default)]
    pub val: Vec<Rect>,
    #[serde(default)]
    pub test: Vec<Rect>,
}

impl SplitLayout {
    pub fn validate(&self) -> Result<()> {
        for v in &self.val {
            if let Some(t) = self.test.iter().find(|t| t.intersects(v)) {
                return Err(Error::Invalid(format!("validation rectangle {v:?} overlaps test rectangle {t:?}")));
            }
        }
        for r in self.train.iter().chain(&self.val).chain(&self.test) {
            if r.w == 0 || r.h == 0 {
                return Err(Error::Invalid(format!("empty rectangle {r:?}")));
            }
        }
        Ok(())
    }

    pub fn excluded(&self) -> impl Iterator<Item = &Rect> {
        self.val.iter().chain(&self.test)
    }

    /// Pixel area available for training crops.
    pub fn train_area(&self, width: usize, height: usize) -> u64 {
        let excluded: Vec<Rect> = self.excluded().filter_map(|r| r.clip(width, height)).collect();
        if self.train.is_empty() {
            width as u64 * height as u64 - union_area(&excluded)
        } else {
            let train: Vec<Rect> = self.train.iter().filter_map(|r| r.clip(width, height)).collect();
            let both: Vec<Rect> = train
                .iter()
                .flat_map(|t| excluded.iter().filter_map(move |e| intersection(t, e)))
                .collect();
            union_area(&train) - union_area(&both)
        }
    }
}

fn intersection(a: &Rect, b: &Rect) -> Option<Rect> {
    let (x0, y0) = (a.x0.max(b.x0), a.y0.max(b.y0));
    let (x1, y1) = (a.x1().min(b.x1()), a.y1().min(b.y1()));
    (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
}

/// Area of a union of rectangles by coordinate compression.
fn union_area(rects: &[Rect]) -> u64 {
    let mut xs: Vec<usize> = rects.iter().flat_map(|r| [r.x0, r.x1()]).collect();
    let mut ys: Vec<usize> = rects.iter().flat_map(|r| [r.y0, r.y1()]).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut area = 0;
    for yw in ys.windows(2) {
        for xw in xs.windows(2) {
            let cell = Rect::new(xw[0], yw[0], xw[1] - xw[0], yw[1] - yw[0]);
            if rects.iter().any(|r| r.contains(&cell)) {
                area += cell.area();
            }
        }
    }
    area
}

/// Samples per epoch: the expected count of crops that scan the training
/// area once, at least one.
pub fn epoch_size(layout: &SplitLayout, width: usize, height: usize, size: usize) -> u64 {
    let s = layout.train_area(width, height);
    (s / (size as u64 * size as u64)).max(1)
}

/// Uniform sampler over every admissible top-left corner.
#[derive(Debug, Clone)]
pub struct TileSampler {
    size: usize,
    /// Per corner row, disjoint inclusive column intervals.
    rows: Vec<Vec<(usize, usize)>>,
    /// `prefix[y]` = admissible corners in rows `< y`.
    prefix: Vec<u64>,
}

impl TileSampler {
    pub fn new(layout: &SplitLayout, width: usize, height: usize, size: usize) -> Result<Self> {
        layout.validate()?;
        if size == 0 || size > width || size > height {
            return Err(Error::NoAdmissibleCorner { size });
        }
        let max_x = width - size;
        let excluded: Vec<&Rect> = layout.excluded().collect();
        let mut rows = Vec::with_capacity(height - size + 1);
        let mut prefix = Vec::with_capacity(height - size + 2);
        let mut total = 0u64;
        for y in 0..=height - size {
            prefix.push(total);
            let mut allowed: Vec<(usize, usize)> = if layout.train.is_empty() {
                vec![(0, max_x)]
            } else {
                layout
                    .train
                    .iter()
                    .filter(|t| t.y0 <= y && y + size <= t.y1() && t.w >= size && t.x1() <= width)
                    .map(|t| (t.x0, t.x1() - size))
                    .collect()
            };
            for e in &excluded {
                if !(y < e.y1() && e.y0 < y + size) {
                    continue;
                }
                let lo = (e.x0 + 1).saturating_sub(size);
                let hi = e.x1() - 1;
                allowed = allowed
                    .into_iter()
                    .flat_map(|(a, b)| {
                        let left = (a < lo).then(|| (a, b.min(lo - 1)));
                        let right = (b > hi).then(|| (a.max(hi + 1), b));
                        left.into_iter().chain(right)
                    })
                    .collect();
            }
            allowed.sort_unstable();
            let merged = merge_intervals(allowed);
            total += merged.iter().map(|&(a, b)| (b - a + 1) as u64).sum::<u64>();
            rows.push(merged);
        }
        prefix.push(total);
        if total == 0 {
            return Err(Error::NoAdmissibleCorner { size });
        }
        Ok(TileSampler { size, rows, prefix })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of admissible corners.
    pub fn count(&self) -> u64 {
        *self.prefix.last().expect("non-empty")
    }

    /// The `k`-th admissible corner `(row, col)` in row-major order.
    pub fn corner(&self, k: u64) -> (usize, usize) {
        assert!(k < self.count());
        let y = self.prefix.partition_point(|&p| p <= k) - 1;
        let mut rem = k - self.prefix[y];
        for &(a, b) in &self.rows[y] {
            let n = (b - a + 1) as u64;
            if rem < n {
                return (y, a + rem as usize);
            }
            rem -= n;
        }
        unreachable!("prefix sums cover the row")
    }

    /// Corner of draw `index` in the stream seeded by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> (usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        self.corner(rng.random_range(0..self.count()))
    }

    pub fn sample_tile(&self, seed: u64, index: u64, rasters: &RegionRasters) -> TileSample {
        let (y, x) = self.sample(seed, index);
        rasters.crop(y as isize, x as isize, self.size)
    }
}

fn merge_intervals(sorted: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(sorted.len());
    for (a, b) in sorted {
        match out.last_mut() {
            Some(last) if a <= last.1 + 1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}
