//! Environmental perturbations of a scene, each a deterministic function of
//! `(cloud, meta, perturbation, seed)`.
//!
//! Points are attributed to objects by AABB membership, which is exact for
//! generated scenes: boxes keep a gap between footprints and the table is
//! not sampled under them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{place_box, quantize, surface_box, MAX_OBJECTS, PALETTE, TABLE_Z};
use super::{PointCloud, SceneMeta, Vec3};
use crate::error::{Error, Result};

const MEMBER_TOL: f64 = 1e-9;
const MAX_DISTRACTORS: f64 = 3.0;
const NOISE_HALF_WIDTH: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    ObjectColor,
    ObjectSize,
    DistractorCount,
    TableColor,
    LightTint,
    PointNoise,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::ObjectColor,
        PerturbationKind::ObjectSize,
        PerturbationKind::DistractorCount,
        PerturbationKind::TableColor,
        PerturbationKind::LightTint,
        PerturbationKind::PointNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::ObjectColor => "object_color",
            PerturbationKind::ObjectSize => "object_size",
            PerturbationKind::DistractorCount => "distractor_count",
            PerturbationKind::TableColor => "table_color",
            PerturbationKind::LightTint => "light_tint",
            PerturbationKind::PointNoise => "point_noise",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    /// In `[0, 1]`; 0 is the identity.
    pub magnitude: f64,
}

fn blend(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    [
        (1.0 - t) * a[0] + t * b[0],
        (1.0 - t) * a[1] + t * b[1],
        (1.0 - t) * a[2] + t * b[2],
    ]
}

fn is_table_point(p: &Vec3, meta: &SceneMeta) -> bool {
    (p[2] - TABLE_Z).abs() <= MEMBER_TOL
        && !meta.objects.iter().any(|o| o.contains(p, MEMBER_TOL))
}

/// Palette color for a non-target object, never the target's color.
fn other_color(rng: &mut ChaCha8Rng, target_name: &str) -> usize {
    let choices: Vec<usize> = (0..PALETTE.len())
        .filter(|&i| PALETTE[i].name != target_name)
        .collect();
    choices[rng.random_range(0..choices.len())]
}

pub fn apply_perturbation(
    cloud: &PointCloud,
    meta: &SceneMeta,
    perturbation: Perturbation,
    seed: u64,
) -> Result<(PointCloud, SceneMeta)> {
    let m = perturbation.magnitude;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!(
            "perturbation magnitude {m} outside [0, 1]"
        )));
    }
    if meta.target_index >= meta.objects.len() {
        return Err(Error::Shape("target index out of range".into()));
    }
    let mut cloud = cloud.clone();
    let mut meta = meta.clone();
    if m == 0.0 {
        return Ok((cloud, meta));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_name = meta.target().color_name.clone();

    match perturbation.kind {
        PerturbationKind::ObjectColor => {
            for i in 0..meta.objects.len() {
                if i == meta.target_index {
                    continue;
                }
                let new = &PALETTE[other_color(&mut rng, &target_name)];
                let obj = meta.objects[i].clone();
                for (p, c) in cloud.points.iter().zip(cloud.colors.iter_mut()) {
                    if obj.contains(p, MEMBER_TOL) {
                        *c = blend(*c, new.rgb, m);
                    }
                }
                let o = &mut meta.objects[i];
                o.color_rgb = blend(o.color_rgb, new.rgb, m);
                if m >= 0.5 {
                    o.color_name = new.name.to_string();
                }
            }
        }
        PerturbationKind::ObjectSize => {
            let delta = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
            let scale = 1.0 + m * delta;
            let old = meta.target().clone();
            let mut half = old.half_extents.map(|h| h * scale);
            for h in &mut half {
                *h = h.min(1.0);
            }
            // Stays on the table; x/y clamped so the AABB fits the cube.
            let mut center = [old.center[0], old.center[1], TABLE_Z + half[2]];
            for k in 0..3 {
                center[k] = center[k].clamp(-1.0 + half[k], 1.0 - half[k]);
            }
            for p in cloud.points.iter_mut() {
                if old.contains(p, MEMBER_TOL) {
                    for k in 0..3 {
                        p[k] = (center[k] + (p[k] - old.center[k]) * scale).clamp(-1.0, 1.0);
                    }
                }
            }
            let t = &mut meta.objects[meta.target_index];
            t.half_extents = half;
            t.center = center;
        }
        PerturbationKind::DistractorCount => {
            let extra = (m * MAX_DISTRACTORS).round() as usize;
            let room = MAX_OBJECTS.saturating_sub(meta.objects.len());
            let target = meta.target().clone();
            let on_target = cloud
                .points
                .iter()
                .filter(|p| target.contains(p, MEMBER_TOL))
                .count();
            let density = on_target as f64 / target.surface_area();
            let spec = super::CorpusSpec::default();
            let has_table = cloud.points.iter().any(|p| is_table_point(p, &meta));
            for _ in 0..extra.min(room) {
                let color = PALETTE[other_color(&mut rng, &target_name)];
                let Some(obj) = place_box(&mut rng, &spec, &meta.objects, &color) else {
                    continue;
                };
                // Drop table samples now hidden under the new box.
                if has_table {
                    let keep: Vec<bool> = cloud
                        .points
                        .iter()
                        .map(|p| {
                            !((p[2] - TABLE_Z).abs() <= MEMBER_TOL
                                && obj.footprint_contains(p[0], p[1]))
                        })
                        .collect();
                    let mut it = keep.iter();
                    cloud.points.retain(|_| *it.next().unwrap());
                    let mut it = keep.iter();
                    cloud.colors.retain(|_| *it.next().unwrap());
                }
                surface_box(&mut rng, &obj, density, spec.face_dither, &mut cloud);
                meta.objects.push(obj);
            }
        }
        PerturbationKind::TableColor => {
            let new: Vec3 = [rng.random(), rng.random(), rng.random()];
            let new = quantize(new);
            for (p, c) in cloud.points.iter().zip(cloud.colors.iter_mut()) {
                if is_table_point(p, &meta) {
                    *c = blend(*c, new, m);
                }
            }
        }
        PerturbationKind::LightTint => {
            let tint: Vec3 = [0, 1, 2].map(|_| 1.0 + m * rng.random_range(-0.5..=0.5));
            cloud = tint_colors(&cloud, tint);
        }
        PerturbationKind::PointNoise => {
            let w = NOISE_HALF_WIDTH * m;
            for p in cloud.points.iter_mut() {
                for v in p.iter_mut() {
                    *v = (*v + rng.random_range(-w..=w)).clamp(-1.0, 1.0);
                }
            }
        }
    }
    Ok((cloud, meta))
}

/// Multiplies every color by `tint` and clamps to `[0, 1]`.
pub fn tint_colors(cloud: &PointCloud, tint: Vec3) -> PointCloud {
    let colors = cloud
        .colors
        .iter()
        .map(|c| [0, 1, 2].map(|k| (c[k] * tint[k]).clamp(0.0, 1.0)))
        .collect();
    PointCloud {
        points: cloud.points.clone(),
        colors,
    }
}
