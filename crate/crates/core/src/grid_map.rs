//! Estimated occupancy grid with log-odds updates, Shannon entropy
//! bookkeeping, class partitioning and map-quality scoring.
//!
//! Cells carry a log-odds value and a touched flag. A cell that was never
//! updated is *unknown* regardless of its numeric probability, and only
//! touched cells contribute to the map entropy.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{walk_cells, Cell, Point2, Pose2};
use crate::world_sim::DepthScan;

/// Occupancy threshold: a touched cell is occupied iff `p_o >= P_THR`.
pub const P_THR: f64 = 0.7;

/// Shannon entropy (bits) of a binary cell with occupancy probability `p`.
pub fn cell_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ProbabilityDomain(p));
    }
    Ok(entropy_unchecked(p))
}

#[inline]
fn entropy_unchecked(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { q * q.log2() };
    -(term(p) + term(1.0 - p))
}

#[inline]
pub fn logodds_to_prob(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Fixed inverse-sensor-model increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogOddsParams {
    pub hit: f64,
    pub miss: f64,
    /// Symmetric clamp: log-odds stay in `[-clamp, clamp]`.
    pub clamp: f64,
}

impl Default for LogOddsParams {
    fn default() -> Self {
        Self {
            hit: 0.85,
            miss: -0.4,
            clamp: 3.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellClass {
    Free,
    Occupied,
    Unknown,
}

/// Per-cell class map used as ground truth. `None` marks hidden cells that
/// cannot be mapped and are ignored by every score.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrid {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub classes: Vec<Option<CellClass>>,
}

impl ClassGrid {
    pub fn new(width: usize, height: usize, resolution: f64, fill: Option<CellClass>) -> Self {
        Self {
            width,
            height,
            resolution,
            classes: vec![fill; width * height],
        }
    }

    pub fn get(&self, c: Cell) -> Option<CellClass> {
        self.classes[c.y as usize * self.width + c.x as usize]
    }

    pub fn set(&mut self, c: Cell, v: Option<CellClass>) {
        self.classes[c.y as usize * self.width + c.x as usize] = v;
    }

    /// Number of non-hidden cells.
    pub fn mappable_count(&self) -> usize {
        self.classes.iter().filter(|c| c.is_some()).count()
    }
}

/// Total and normalized map entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEntropy {
    pub total: f64,
    pub normalized: f64,
    pub explored: usize,
}

#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Point2,
    params: LogOddsParams,
    logodds: Vec<f64>,
    touched: Vec<bool>,
    entropy: Vec<f64>,
    total_entropy: f64,
    explored: usize,
    // Per-scan deduplication stamps.
    stamp: Vec<u32>,
    stamp_id: u32,
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, resolution: f64, origin: Point2) -> Self {
        Self::with_params(width, height, resolution, origin, LogOddsParams::default())
    }

    pub fn with_params(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Point2,
        params: LogOddsParams,
    ) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            resolution,
            origin,
            params,
            logodds: vec![0.0; n],
            touched: vec![false; n],
            entropy: vec![1.0; n],
            total_entropy: 0.0,
            explored: 0,
            stamp: vec![0; n],
            stamp_id: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }

    pub fn params(&self) -> LogOddsParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    #[inline]
    pub fn cell_at_index(&self, i: usize) -> Cell {
        Cell::new((i % self.width) as i32, (i / self.width) as i32)
    }

    /// Cell containing a world point, even if out of bounds.
    #[inline]
    pub fn cell_of_unchecked(&self, p: Point2) -> Cell {
        Cell::new(
            ((p.x - self.origin.x) / self.resolution).floor() as i32,
            ((p.y - self.origin.y) / self.resolution).floor() as i32,
        )
    }

    pub fn cell_of(&self, p: Point2) -> Option<Cell> {
        let c = self.cell_of_unchecked(p);
        self.in_bounds(c).then_some(c)
    }

    #[inline]
    pub fn cell_center(&self, c: Cell) -> Point2 {
        Point2::new(
            self.origin.x + (c.x as f64 + 0.5) * self.resolution,
            self.origin.y + (c.y as f64 + 0.5) * self.resolution,
        )
    }

    #[inline]
    pub fn logodds(&self, c: Cell) -> f64 {
        self.logodds[self.index(c)]
    }

    #[inline]
    pub fn probability(&self, c: Cell) -> f64 {
        let i = self.index(c);
        if self.touched[i] {
            logodds_to_prob(self.logodds[i])
        } else {
            0.5
        }
    }

    #[inline]
    pub fn is_explored(&self, c: Cell) -> bool {
        self.touched[self.index(c)]
    }

    #[inline]
    pub fn explored_at(&self, i: usize) -> bool {
        self.touched[i]
    }

    /// Cached per-cell entropy (1 for unknown cells).
    #[inline]
    pub fn cell_entropy_at(&self, c: Cell) -> f64 {
        self.entropy[self.index(c)]
    }

    pub fn class(&self, c: Cell) -> CellClass {
        self.class_at(self.index(c))
    }

    #[inline]
    pub fn class_at(&self, i: usize) -> CellClass {
        if !self.touched[i] {
            CellClass::Unknown
        } else if logodds_to_prob(self.logodds[i]) >= P_THR {
            CellClass::Occupied
        } else {
            CellClass::Free
        }
    }

    /// Cells that block visibility rays (strictly above the obstacle threshold).
    #[inline]
    pub fn is_occluder(&self, c: Cell) -> bool {
        let i = self.index(c);
        if !self.touched[i] {
            return false;
        }
        // Compare in log-odds; only values next to the threshold need the exact test.
        let l = self.logodds[i];
        let l_thr = (P_THR / (1.0 - P_THR)).ln();
        if (l - l_thr).abs() > 1e-9 {
            l > l_thr
        } else {
            logodds_to_prob(l) > P_THR
        }
    }

    pub fn explored_count(&self) -> usize {
        self.explored
    }

    pub fn explored_area(&self) -> f64 {
        self.explored as f64 * self.resolution * self.resolution
    }

    /// Adds `delta` to a cell's log-odds (clamped) and keeps the entropy cache current.
    pub fn apply_logodds(&mut self, c: Cell, delta: f64) {
        let i = self.index(c);
        self.apply_index(i, delta);
    }

    #[inline]
    fn apply_index(&mut self, i: usize, delta: f64) {
        let l = (self.logodds[i] + delta).clamp(-self.params.clamp, self.params.clamp);
        self.logodds[i] = l;
        let e = entropy_unchecked(logodds_to_prob(l));
        if self.touched[i] {
            self.total_entropy += e - self.entropy[i];
        } else {
            self.touched[i] = true;
            self.explored += 1;
            self.total_entropy += e;
        }
        self.entropy[i] = e;
    }

    fn next_stamp(&mut self) -> u32 {
        self.stamp_id = self.stamp_id.wrapping_add(1);
        if self.stamp_id == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.stamp_id = 1;
        }
        self.stamp_id
    }

    /// Integrates one depth scan taken from `pose`.
    ///
    /// Each ray is traced with exact grid stepping from the sensor cell to
    /// the cell of its end point. The sensor cell itself is never updated.
    /// Within one scan every cell is updated at most once and a hit
    /// overrides a miss. Returns the sorted list of updated cells.
    pub fn update_from_scan(&mut self, pose: &Pose2, scan: &DepthScan) -> Result<Vec<Cell>> {
        let origin = self
            .cell_of(pose.position())
            .ok_or(Error::PoseOutsideGrid(*pose))?;
        if scan.is_empty() {
            return Ok(Vec::new());
        }
        let id = self.next_stamp();
        let mut hits = Vec::new();
        let mut misses = Vec::new();
        let nudge = 1e-3 * self.resolution;
        for (rel, range) in scan.rays() {
            let a = pose.theta + rel;
            let (s, c) = a.sin_cos();
            let (len, hit) = match range {
                Some(r) => (r + nudge, true),
                None => (scan.max_range, false),
            };
            let end = self.cell_of_unchecked(Point2::new(pose.x + c * len, pose.y + s * len));
            for cell in walk_cells(origin, end).skip(1) {
                if !self.in_bounds(cell) {
                    break;
                }
                if cell == end && hit {
                    hits.push(cell);
                } else {
                    misses.push(cell);
                }
            }
        }
        let mut changed = Vec::with_capacity(hits.len() + misses.len());
        // Hits first so they claim the stamp and win over misses.
        for cell in hits {
            let i = self.index(cell);
            if self.stamp[i] != id {
                self.stamp[i] = id;
                self.apply_index(i, self.params.hit);
                changed.push(cell);
            }
        }
        for cell in misses {
            let i = self.index(cell);
            if self.stamp[i] != id {
                self.stamp[i] = id;
                self.apply_index(i, self.params.miss);
                changed.push(cell);
            }
        }
        changed.sort_unstable();
        Ok(changed)
    }

    pub fn map_entropy(&self) -> MapEntropy {
        let normalized = if self.explored == 0 {
            1.0
        } else {
            self.total_entropy / self.explored as f64
        };
        MapEntropy {
            total: self.total_entropy,
            normalized,
            explored: self.explored,
        }
    }

    /// Sum of per-cell entropies over explored cells, computed from scratch.
    pub fn recompute_entropy_total(&self) -> f64 {
        self.logodds
            .iter()
            .zip(&self.touched)
            .filter(|(_, t)| **t)
            .map(|(l, _)| entropy_unchecked(logodds_to_prob(*l)))
            .sum()
    }

    /// Rebuilds the cached entropy field and total from the log-odds.
    pub fn resync_entropy(&mut self) {
        let mut total = 0.0;
        let mut explored = 0;
        for i in 0..self.logodds.len() {
            if self.touched[i] {
                let e = entropy_unchecked(logodds_to_prob(self.logodds[i]));
                self.entropy[i] = e;
                total += e;
                explored += 1;
            } else {
                self.entropy[i] = 1.0;
            }
        }
        self.total_entropy = total;
        self.explored = explored;
    }

    /// Forgets every observation.
    pub fn clear(&mut self) {
        self.logodds.iter_mut().for_each(|l| *l = 0.0);
        self.touched.iter_mut().for_each(|t| *t = false);
        self.entropy.iter_mut().for_each(|e| *e = 1.0);
        self.total_entropy = 0.0;
        self.explored = 0;
    }

    /// Overwrites this grid's cell state with `other`'s (same geometry).
    pub fn copy_cells_from(&mut self, other: &OccupancyGrid) {
        self.logodds.copy_from_slice(&other.logodds);
        self.touched.copy_from_slice(&other.touched);
        self.entropy.copy_from_slice(&other.entropy);
        self.total_entropy = other.total_entropy;
        self.explored = other.explored;
    }

    /// Adds every touched cell of `other` into this grid (log-odds sum, clamped).
    pub fn merge_from(&mut self, other: &OccupancyGrid) {
        for i in 0..self.logodds.len() {
            if other.touched[i] {
                self.apply_index(i, other.logodds[i]);
            }
        }
    }

    fn same_geometry(&self, gt: &ClassGrid) -> Result<()> {
        if self.width != gt.width
            || self.height != gt.height
            || (self.resolution - gt.resolution).abs() > 1e-12
        {
            return Err(Error::GridMismatch(
                self.width,
                self.height,
                self.resolution,
                gt.width,
                gt.height,
                gt.resolution,
            ));
        }
        Ok(())
    }

    /// Balanced accuracy over the free / occupied / unknown classes.
    /// Hidden ground-truth cells are skipped; classes absent from the
    /// ground truth do not enter the mean.
    pub fn balanced_accuracy(&self, gt: &ClassGrid) -> Result<f64> {
        self.same_geometry(gt)?;
        let slot = |c: CellClass| match c {
            CellClass::Free => 0,
            CellClass::Occupied => 1,
            CellClass::Unknown => 2,
        };
        let mut total = [0usize; 3];
        let mut correct = [0usize; 3];
        for (i, truth) in gt.classes.iter().enumerate() {
            let Some(truth) = truth else { continue };
            let k = slot(*truth);
            total[k] += 1;
            if self.class_at(i) == *truth {
                correct[k] += 1;
            }
        }
        let present: Vec<f64> = (0..3)
            .filter(|&k| total[k] > 0)
            .map(|k| correct[k] as f64 / total[k] as f64)
            .collect();
        if present.is_empty() {
            return Ok(1.0);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Fraction of mappable ground-truth cells that have been observed.
    pub fn coverage(&self, gt: &ClassGrid) -> Result<f64> {
        self.same_geometry(gt)?;
        let mut mappable = 0usize;
        let mut seen = 0usize;
        for (i, truth) in gt.classes.iter().enumerate() {
            if truth.is_some() {
                mappable += 1;
                if self.touched[i] {
                    seen += 1;
                }
            }
        }
        Ok(if mappable == 0 {
            1.0
        } else {
            seen as f64 / mappable as f64
        })
    }

    /// Writes the map as a binary PGM (0 occupied, 254 free, 205 unknown)
    /// plus a `<stem>.yaml` sidecar holding resolution and origin.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let pixels: Vec<u8> = (0..self.len())
            .map(|i| match self.class_at(i) {
                CellClass::Occupied => 0,
                CellClass::Free => 254,
                CellClass::Unknown => 205,
            })
            .collect();
        write_pgm_bytes(path, self.width, self.height, &pixels)?;
        let sidecar = path.with_extension("yaml");
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        fs::write(
            sidecar,
            format!(
                "image: {name}\nresolution: {}\norigin: [{}, {}, 0.0]\noccupied_thresh: {P_THR}\n",
                self.resolution, self.origin.x, self.origin.y
            ),
        )?;
        Ok(())
    }
}

/// Writes a P5 image. Row 0 of `pixels` is the bottom row of the map
/// (y up), so rows are flipped to the image's top-down order.
pub fn write_pgm_bytes(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(pixels.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    for row in (0..height).rev() {
        out.extend_from_slice(&pixels[row * width..(row + 1) * width]);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a P5 image written by [`write_pgm_bytes`]; returns `(width, height, pixels)`
/// with row 0 at the bottom.
pub fn read_pgm_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path)?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    if data.len() < pos + width * height {
        return Err(bad("truncated pixel data"));
    }
    let raster = &data[pos..pos + width * height];
    let mut pixels = vec![0u8; width * height];
    for row in 0..height {
        let src = height - 1 - row;
        pixels[row * width..(row + 1) * width]
            .copy_from_slice(&raster[src * width..(src + 1) * width]);
    }
    Ok((width, height, pixels))
}
