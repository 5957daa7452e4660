//! Colored point clouds, workspace normalization, the procedural box corpus
//! and its perturbations.

mod perturb;
mod ply;
mod scene;

pub use perturb::{apply_perturbation, tint_colors, Perturbation, PerturbationKind};
pub use ply::{load_ply, parse_ply, save_ply, write_ply};
pub use scene::{
    gen_scene, load_scene, save_scene, scene_paths, BoxObject, CorpusSpec, NamedColor, SceneMeta,
    Shape, PALETTE, TABLE_Z,
};
pub(crate) use scene::palette_index;

use crate::error::{Error, Result};

/// Largest AABB half-extent after [`normalize_to_workspace`].
pub const WORKSPACE_HALF_EXTENT: f64 = 0.9;

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// RGB in `[0, 1]`, one per point.
    pub colors: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, colors: Vec<Vec3>) -> Result<Self> {
        if points.len() != colors.len() {
            return Err(Error::Shape(format!(
                "{} points but {} colors",
                points.len(),
                colors.len()
            )));
        }
        Ok(Self { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: Vec3, color: Vec3) {
        self.points.push(point);
        self.colors.push(color);
    }

    /// Axis-aligned bounding box as `(min, max)`, `None` when empty.
    pub fn aabb(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points[1..] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Some((lo, hi))
    }

    /// Checks the structural invariants: equal lengths, colors in the unit
    /// cube, and (optionally) points inside `[-1, 1]^3`.
    pub fn check_invariants(&self, require_workspace: bool) -> bool {
        self.points.len() == self.colors.len()
            && self
                .colors
                .iter()
                .all(|c| c.iter().all(|v| (0.0..=1.0).contains(v)))
            && (!require_workspace
                || self
                    .points
                    .iter()
                    .all(|p| p.iter().all(|v| (-1.0..=1.0).contains(v))))
    }
}

/// Maps the cloud's AABB center to the origin and its largest half-extent to
/// [`WORKSPACE_HALF_EXTENT`] with one isotropic scale. A degenerate cloud
/// (zero extent) is only translated.
pub fn normalize_to_workspace(cloud: &PointCloud) -> Result<PointCloud> {
    let (lo, hi) = cloud.aabb().ok_or(Error::EmptyCloud)?;
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let half = (0..3).map(|k| (hi[k] - lo[k]) / 2.0).fold(0.0, f64::max);
    let scale = if half > 0.0 {
        WORKSPACE_HALF_EXTENT / half
    } else {
        1.0
    };
    let points = cloud
        .points
        .iter()
        .map(|p| {
            [
                (p[0] - center[0]) * scale,
                (p[1] - center[1]) * scale,
                (p[2] - center[2]) * scale,
            ]
        })
        .collect();
    Ok(PointCloud {
        points,
        colors: cloud.colors.clone(),
    })
}
