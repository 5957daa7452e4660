//! Procedural scenes: colored axis-aligned boxes resting on a table plane.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_ply, save_ply, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Height of the table plane the boxes rest on.
pub const TABLE_Z: f64 = -0.9;

/// Box centers keep their AABB inside `[-XY_LIMIT, XY_LIMIT]` on x and y.
const XY_LIMIT: f64 = 0.9;
/// Minimum clearance between two box footprints.
const MIN_GAP: f64 = 0.02;
const MAX_PLACEMENT_TRIES: usize = 100;
pub(crate) const MAX_OBJECTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: Vec3,
}

/// Object colors. A goal token is an index into this table.
pub const PALETTE: [NamedColor; 8] = [
    NamedColor { name: "red", rgb: [0.9, 0.1, 0.1] },
    NamedColor { name: "green", rgb: [0.1, 0.75, 0.2] },
    NamedColor { name: "blue", rgb: [0.15, 0.3, 0.9] },
    NamedColor { name: "yellow", rgb: [0.95, 0.85, 0.1] },
    NamedColor { name: "cyan", rgb: [0.1, 0.8, 0.85] },
    NamedColor { name: "magenta", rgb: [0.85, 0.15, 0.75] },
    NamedColor { name: "orange", rgb: [0.95, 0.5, 0.1] },
    NamedColor { name: "purple", rgb: [0.5, 0.2, 0.7] },
];

pub(crate) fn palette_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|c| c.name == name)
}

/// Snaps a color to the uchar grid so scenes survive a PLY round trip.
pub(crate) fn quantize(rgb: Vec3) -> Vec3 {
    rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub min_objects: usize,
    pub max_objects: usize,
    pub half_extent_min: f64,
    pub half_extent_max: f64,
    /// Surface samples per unit area on box faces.
    pub density: f64,
    /// Samples per unit area on the table plane; 0 disables the table.
    pub table_density: f64,
    pub table_color: Vec3,
    /// Half-width of the uniform per-face color offset.
    pub face_dither: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 4,
            half_extent_min: 0.08,
            half_extent_max: 0.2,
            density: 3000.0,
            table_density: 3000.0,
            table_color: [0.55, 0.45, 0.35],
            face_dither: 0.05,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if self.max_objects > MAX_OBJECTS.min(PALETTE.len()) {
            return bad("at most 8 objects per scene");
        }
        if !(self.half_extent_min > 0.0 && self.half_extent_min <= self.half_extent_max) {
            return bad("half-extent range must satisfy 0 < min <= max");
        }
        if self.half_extent_max * 2.0 + TABLE_Z > 1.0 || self.half_extent_max >= XY_LIMIT {
            return bad("half-extent max does not fit the workspace");
        }
        if !(self.density >= 0.0 && self.table_density >= 0.0) {
            return bad("densities must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.face_dither)
            || !self.table_color.iter().all(|c| (0.0..=1.0).contains(c))
        {
            return bad("colors must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub shape: Shape,
    pub center: Vec3,
    pub half_extents: Vec3,
    pub color_name: String,
    pub color_rgb: Vec3,
}

impl BoxObject {
    pub(crate) fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= self.half_extents[k] + tol)
    }

    pub(crate) fn footprint_contains(&self, x: f64, y: f64) -> bool {
        (x - self.center[0]).abs() < self.half_extents[0]
            && (y - self.center[1]).abs() < self.half_extents[1]
    }

    fn footprints_overlap(&self, other: &BoxObject) -> bool {
        (0..2).all(|k| {
            (self.center[k] - other.center[k]).abs()
                < self.half_extents[k] + other.half_extents[k] + MIN_GAP
        })
    }

    pub fn surface_area(&self) -> f64 {
        let [hx, hy, hz] = self.half_extents;
        8.0 * (hx * hy + hy * hz + hx * hz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub objects: Vec<BoxObject>,
    pub target_index: usize,
    pub seed: u64,
}

impl SceneMeta {
    pub fn target(&self) -> &BoxObject {
        &self.objects[self.target_index]
    }
}

/// Samples a box with a uniform footprint position, rejecting overlaps with
/// `placed`. Returns `None` after the retry cap.
pub(crate) fn place_box(
    rng: &mut ChaCha8Rng,
    spec: &CorpusSpec,
    placed: &[BoxObject],
    color: &NamedColor,
) -> Option<BoxObject> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let mut h = [0.0; 3];
        for v in &mut h {
            *v = rng.random_range(spec.half_extent_min..=spec.half_extent_max);
        }
        let cx = rng.random_range(-(XY_LIMIT - h[0])..=(XY_LIMIT - h[0]));
        let cy = rng.random_range(-(XY_LIMIT - h[1])..=(XY_LIMIT - h[1]));
        let candidate = BoxObject {
            shape: Shape::Box,
            center: [cx, cy, TABLE_Z + h[2]],
            half_extents: h,
            color_name: color.name.to_string(),
            color_rgb: quantize(color.rgb),
        };
        if placed.iter().all(|b| !b.footprints_overlap(&candidate)) {
            return Some(candidate);
        }
    }
    None
}

/// Samples the six faces of `obj` with `round(density * area)` uniform
/// points each, in the face order -x, +x, -y, +y, -z, +z.
pub(crate) fn surface_box(
    rng: &mut ChaCha8Rng,
    obj: &BoxObject,
    density: f64,
    dither: f64,
    cloud: &mut PointCloud,
) {
    let c = obj.center;
    let h = obj.half_extents;
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let area = 4.0 * h[a] * h[b];
        let count = (density * area).round() as usize;
        for sign in [-1.0, 1.0] {
            let mut face_rgb = obj.color_rgb;
            if dither > 0.0 {
                for v in &mut face_rgb {
                    *v += rng.random_range(-dither..=dither);
                }
            }
            let face_rgb = quantize(face_rgb);
            for _ in 0..count {
                let mut p = [0.0; 3];
                p[axis] = c[axis] + sign * h[axis];
                p[a] = c[a] + rng.random_range(-h[a]..=h[a]);
                p[b] = c[b] + rng.random_range(-h[b]..=h[b]);
                cloud.push(p, face_rgb);
            }
        }
    }
}

/// Builds a scene from `(seed, spec)`. Boxes that cannot be placed after
/// the retry cap are dropped; the call fails only if none fit.
pub fn gen_scene(seed: u64, spec: &CorpusSpec) -> Result<(PointCloud, SceneMeta)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.random_range(spec.min_objects..=spec.max_objects);

    // Distinct colors so a color names exactly one object.
    let mut order: Vec<usize> = (0..PALETTE.len()).collect();
    for i in 0..wanted {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }

    let mut objects: Vec<BoxObject> = Vec::with_capacity(wanted);
    for &ci in &order[..wanted] {
        if let Some(b) = place_box(&mut rng, spec, &objects, &PALETTE[ci]) {
            objects.push(b);
        }
    }
    if objects.is_empty() {
        return Err(Error::NoObjectsPlaced);
    }
    let target_index = rng.random_range(0..objects.len());

    let mut cloud = PointCloud::default();
    for obj in &objects {
        surface_box(&mut rng, obj, spec.density, spec.face_dither, &mut cloud);
    }
    if spec.table_density > 0.0 {
        let table_rgb = quantize(spec.table_color);
        let count = (spec.table_density * 4.0).round() as usize;
        for _ in 0..count {
            let x = rng.random_range(-1.0..=1.0);
            let y = rng.random_range(-1.0..=1.0);
            if objects.iter().any(|o| o.footprint_contains(x, y)) {
                continue;
            }
            cloud.push([x, y, TABLE_Z], table_rgb);
        }
    }

    Ok((
        cloud,
        SceneMeta {
            objects,
            target_index,
            seed,
        },
    ))
}

pub fn scene_paths(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("scene_{seed}.ply")),
        dir.join(format!("scene_{seed}.json")),
    )
}

/// Writes `scene_<seed>.ply` and `scene_<seed>.json` into `dir`.
pub fn save_scene(dir: &Path, cloud: &PointCloud, meta: &SceneMeta) -> Result<PathBuf> {
    let (ply, json) = scene_paths(dir, meta.seed);
    save_ply(&ply, cloud)?;
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(ply)
}

/// Loads a cached scene from its PLY path; the metadata is the sibling
/// `.json` file.
pub fn load_scene(ply: &Path) -> Result<(PointCloud, SceneMeta)> {
    let cloud = load_ply(ply)?;
    let json = ply.with_extension("json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    Ok((cloud, serde_json::from_str(&text)?))
}
