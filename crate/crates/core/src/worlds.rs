//! Bundled desk-scale worlds and the on-disk world format.
//!
//! A world on disk is a P5 PGM raster (pixels below 50 are walls, 205 marks
//! unmappable space, everything else is free) and a `key: value` sidecar:
//!
//! ```text
//! image: apartment.pgm
//! resolution: 0.1
//! origin: 0 0
//! start: 1.5 1.0 0.0
//! feature_seed: 7
//! features_per_segment: 4
//! feature_segment_len: 1.0
//! feature_offset: 0.1
//! hidden_mask: apartment_hidden.pgm   # optional, pixel 0 = hidden
//! feature: 2.35 4.1                   # optional, repeatable; replaces seeded placement
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose2};
use crate::grid_map::{read_pgm_bytes, write_pgm_bytes};
use crate::world_sim::{Feature, FeaturePlacement, WorldModel};

pub const BUILTIN_WORLDS: &[&str] = &["toy_room", "apartment"];

/// Rasterizes axis-aligned rectangles into an occupancy grid.
struct Builder {
    width: usize,
    height: usize,
    res: f64,
    occ: Vec<bool>,
}

impl Builder {
    fn new(width_m: f64, height_m: f64, res: f64) -> Self {
        let width = (width_m / res).round() as usize;
        let height = (height_m / res).round() as usize;
        Self {
            width,
            height,
            res,
            occ: vec![false; width * height],
        }
    }

    fn fill(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: bool) -> &mut Self {
        for y in 0..self.height {
            let cy = (y as f64 + 0.5) * self.res;
            if cy < y0 || cy > y1 {
                continue;
            }
            for x in 0..self.width {
                let cx = (x as f64 + 0.5) * self.res;
                if cx >= x0 && cx <= x1 {
                    self.occ[y * self.width + x] = value;
                }
            }
        }
        self
    }

    fn block(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) -> &mut Self {
        self.fill(x0, y0, x1, y1, true)
    }

    fn door(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) -> &mut Self {
        self.fill(x0, y0, x1, y1, false)
    }

    fn border(&mut self) -> &mut Self {
        let (w, h) = (self.width as f64 * self.res, self.height as f64 * self.res);
        let t = self.res;
        self.block(0.0, 0.0, w, t)
            .block(0.0, h - t, w, h)
            .block(0.0, 0.0, t, h)
            .block(w - t, 0.0, w, h)
    }

    fn finish(self, name: &str, start: Pose2, placement: &FeaturePlacement) -> Result<WorldModel> {
        let mut world = WorldModel::new(
            name,
            self.width,
            self.height,
            self.res,
            Point2::new(0.0, 0.0),
            self.occ,
            None,
            start,
        )?;
        world.place_features(placement);
        Ok(world)
    }
}

/// 6 × 5 m room split by a partial wall.
pub fn toy_room() -> Result<WorldModel> {
    let mut b = Builder::new(6.0, 5.0, 0.1);
    b.border()
        .block(3.0, 0.0, 3.1, 3.2)
        .block(4.4, 3.6, 5.2, 4.2);
    b.finish(
        "toy_room",
        Pose2::new(1.2, 1.2, 0.0),
        &FeaturePlacement::default(),
    )
}

/// 12 × 10 m apartment: living room, kitchen and three rooms off a shared wall.
pub fn apartment() -> Result<WorldModel> {
    let mut b = Builder::new(12.0, 10.0, 0.1);
    b.border()
        // Wall between the lower and upper halves, with three doors.
        .block(0.0, 5.0, 12.0, 5.1)
        .door(1.5, 5.0, 2.5, 5.1)
        .door(5.5, 5.0, 6.5, 5.1)
        .door(9.5, 5.0, 10.5, 5.1)
        // Living room / kitchen partition with a wide opening.
        .block(7.0, 0.0, 7.1, 5.0)
        .door(7.0, 1.4, 7.1, 2.8)
        // Upper rooms.
        .block(4.0, 5.0, 4.1, 10.0)
        .block(8.0, 5.0, 8.1, 10.0)
        // Furniture.
        .block(2.5, 1.6, 3.5, 2.6)
        .block(0.1, 3.3, 0.6, 4.6)
        .block(10.4, 0.1, 11.9, 0.7)
        .block(9.0, 2.6, 10.0, 3.3)
        .block(0.1, 7.6, 1.6, 9.9)
        .block(6.8, 8.8, 7.9, 9.9)
        .block(11.3, 6.2, 11.9, 7.6)
        .block(5.2, 6.8, 5.6, 7.2);
    b.finish(
        "apartment",
        Pose2::new(1.5, 1.0, 0.0),
        &FeaturePlacement::default(),
    )
}

pub fn builtin(name: &str) -> Result<WorldModel> {
    match name {
        "toy_room" => toy_room(),
        "apartment" => apartment(),
        other => Err(Error::UnknownWorld(other.to_string())),
    }
}

/// Loads a builtin world by name, or a world sidecar file by path.
pub fn load(spec: &str) -> Result<WorldModel> {
    if BUILTIN_WORLDS.contains(&spec) {
        return builtin(spec);
    }
    let path = Path::new(spec);
    if path.exists() {
        return load_file(path);
    }
    Err(Error::UnknownWorld(spec.to_string()))
}

pub fn load_file(sidecar: &Path) -> Result<WorldModel> {
    let text = fs::read_to_string(sidecar)?;
    let bad = |msg: String| Error::Format {
        path: sidecar.to_path_buf(),
        msg,
    };
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let mut image = None;
    let mut resolution = None;
    let mut origin = Point2::new(0.0, 0.0);
    let mut start = None;
    let mut placement = FeaturePlacement::default();
    let mut hidden_mask = None;
    let mut explicit = Vec::new();
    let nums = |v: &str, n: usize| -> Result<Vec<f64>> {
        let parsed: Vec<f64> = v
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("`{v}`: {e}")))?;
        if parsed.len() != n {
            return Err(bad(format!("`{v}`: expected {n} numbers")));
        }
        Ok(parsed)
    };
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| bad(format!("expected `key: value`, got `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "image" => image = Some(value.to_string()),
            "resolution" => resolution = Some(nums(value, 1)?[0]),
            "origin" => {
                let v = nums(value, 2)?;
                origin = Point2::new(v[0], v[1]);
            }
            "start" => {
                let v = nums(value, 3)?;
                start = Some(Pose2::new(v[0], v[1], v[2]));
            }
            "feature_seed" => placement.seed = nums(value, 1)?[0] as u64,
            "features_per_segment" => placement.per_segment = nums(value, 1)?[0] as usize,
            "feature_segment_len" => placement.segment_len = nums(value, 1)?[0],
            "feature_offset" => placement.offset = nums(value, 1)?[0],
            "hidden_mask" => {
                if value != "none" {
                    hidden_mask = Some(value.to_string());
                }
            }
            "feature" => {
                let v = nums(value, 2)?;
                explicit.push(Point2::new(v[0], v[1]));
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    let image = image.ok_or_else(|| bad("missing `image`".into()))?;
    let resolution = resolution.ok_or_else(|| bad("missing `resolution`".into()))?;
    let start = start.ok_or_else(|| bad("missing `start`".into()))?;
    let (w, h, px) = read_pgm_bytes(&dir.join(&image))?;
    let occupied: Vec<bool> = px.iter().map(|p| *p < 50).collect();
    let mut hidden: Vec<bool> = px.iter().map(|p| *p == 205).collect();
    if let Some(mask) = hidden_mask {
        let (mw, mh, mpx) = read_pgm_bytes(&dir.join(&mask))?;
        if (mw, mh) != (w, h) {
            return Err(bad("hidden mask size differs from the image".into()));
        }
        for (hd, m) in hidden.iter_mut().zip(mpx) {
            *hd |= m == 0;
        }
    }
    let name = sidecar
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut world = WorldModel::new(
        name,
        w,
        h,
        resolution,
        origin,
        occupied,
        Some(hidden),
        start,
    )?;
    if explicit.is_empty() {
        world.place_features(&placement);
    } else {
        world.features = explicit
            .into_iter()
            .enumerate()
            .map(|(i, pos)| Feature { id: i as u32, pos })
            .collect();
    }
    Ok(world)
}

/// Writes `<dir>/<name>.pgm` and `<dir>/<name>.world`. Features are written
/// explicitly so the file reproduces the world exactly.
pub fn export(world: &WorldModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let pixels: Vec<u8> = world
        .occupied_raster()
        .iter()
        .zip(world.hidden_raster())
        .map(|(o, h)| match (o, h) {
            (true, _) => 0,
            (false, true) => 205,
            (false, false) => 254,
        })
        .collect();
    let image = format!("{}.pgm", world.name);
    write_pgm_bytes(&dir.join(&image), world.width(), world.height(), &pixels)?;
    let mut s = String::new();
    let _ = writeln!(s, "image: {image}");
    let _ = writeln!(s, "resolution: {}", world.resolution());
    let _ = writeln!(s, "origin: {} {}", world.origin().x, world.origin().y);
    let _ = writeln!(
        s,
        "start: {} {} {}",
        world.start.x, world.start.y, world.start.theta
    );
    for f in &world.features {
        let _ = writeln!(s, "feature: {} {}", f.pos.x, f.pos.y);
    }
    fs::write(dir.join(format!("{}.world", world.name)), s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_well_formed() {
        for name in BUILTIN_WORLDS {
            let w = builtin(name).unwrap();
            assert!(!w.features.is_empty());
            let gt = w.class_grid();
            assert!(gt.mappable_count() > 0);
            assert!(w.is_free_point(w.start.position()));
        }
        assert!(matches!(builtin("nowhere"), Err(Error::UnknownWorld(_))));
    }

    #[test]
    fn apartment_furniture_interiors_are_hidden() {
        let w = apartment().unwrap();
        let c = w.cell_of(Point2::new(3.0, 2.1)).unwrap();
        assert!(w.is_occupied(c) && w.is_hidden(c));
        let e = w.cell_of(Point2::new(2.55, 2.1)).unwrap();
        assert!(w.is_occupied(e) && !w.is_hidden(e));
    }

    #[test]
    fn export_then_load_reproduces_world() {
        let dir = tempfile::tempdir().unwrap();
        let w = toy_room().unwrap();
        export(&w, dir.path()).unwrap();
        let back = load_file(&dir.path().join("toy_room.world")).unwrap();
        assert_eq!(back.occupied_raster(), w.occupied_raster());
        assert_eq!(back.hidden_raster(), w.hidden_raster());
        assert_eq!(back.features.len(), w.features.len());
        for (a, b) in back.features.iter().zip(&w.features) {
            assert!((a.pos.x - b.pos.x).abs() < 1e-9 && (a.pos.y - b.pos.y).abs() < 1e-9);
        }
        assert_eq!(back.start, w.start);
    }

    #[test]
    fn malformed_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.world");
        fs::write(&p, "resolution: 0.1\nstart: 1 2\n").unwrap();
        assert!(matches!(load_file(&p), Err(Error::Format { .. })));
    }
}
