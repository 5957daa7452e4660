//! The toy reaching task: goal tokens, oracle actions and the JSONL episode
//! manifest.
//!
//! The goal names the target box by its palette color. The oracle action
//! places the gripper at the center of the target's top face, yawed to
//! align with the box's shorter horizontal side, and opens it for boxes
//! lower than [`OPEN_HEIGHT`].

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GoalToken, ToyAction};
use crate::pointcloud::{gen_scene, load_scene, palette_index, save_scene, CorpusSpec, PointCloud, SceneMeta, PALETTE};

/// Goal vocabulary: one token per palette color.
pub const GOAL_VOCAB: usize = PALETTE.len();
/// Boxes with full height below this are approached with an open gripper.
pub const OPEN_HEIGHT: f64 = 0.28;
pub const EPISODES_FILE: &str = "episodes.jsonl";

pub fn goal_token(meta: &SceneMeta) -> Result<GoalToken> {
    let name = &meta.target().color_name;
    palette_index(name)
        .map(GoalToken)
        .ok_or_else(|| Error::InvalidSpec(format!("target color '{name}' is not in the palette")))
}

pub fn oracle_action(meta: &SceneMeta) -> ToyAction {
    let t = meta.target();
    let [cx, cy, cz] = t.center;
    let [hx, hy, hz] = t.half_extents;
    let rot = if hx <= hy {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        [h, 0.0, 0.0, h]
    };
    ToyAction {
        pos: [cx, cy, cz + hz],
        rot,
        open: if 2.0 * hz < OPEN_HEIGHT { 1.0 } else { 0.0 },
    }
}

/// One line of the episode manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    /// Scene PLY, relative to the manifest's directory unless absolute.
    pub scene: PathBuf,
    pub goal: usize,
    pub a_pos: [f64; 3],
    pub a_rot: [f64; 4],
    pub a_open: u8,
}

impl Episode {
    pub fn new(scene: PathBuf, goal: GoalToken, action: &ToyAction) -> Self {
        Self {
            scene,
            goal: goal.0,
            a_pos: action.pos,
            a_rot: action.rot,
            a_open: u8::from(action.open > 0.5),
        }
    }

    pub fn goal(&self) -> GoalToken {
        GoalToken(self.goal)
    }

    pub fn action(&self) -> ToyAction {
        ToyAction {
            pos: self.a_pos,
            rot: self.a_rot,
            open: f64::from(self.a_open),
        }
    }
}

/// A loaded finetuning or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub cloud: PointCloud,
    pub meta: Option<SceneMeta>,
    pub goal: GoalToken,
    pub action: ToyAction,
}

impl Demo {
    pub fn from_scene(cloud: PointCloud, meta: SceneMeta) -> Result<Self> {
        Ok(Self {
            goal: goal_token(&meta)?,
            action: oracle_action(&meta),
            cloud,
            meta: Some(meta),
        })
    }

    /// Generates scene `seed` and labels it with the oracle.
    pub fn generate(seed: u64, spec: &CorpusSpec) -> Result<Self> {
        let (cloud, meta) = gen_scene(seed, spec)?;
        Self::from_scene(cloud, meta)
    }
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = Vec::new();
    for e in episodes {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a manifest, resolving relative scene paths against its directory.
pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut episodes = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: Episode = serde_json::from_str(&line)?;
        if e.a_open > 1 {
            return Err(Error::InvalidSpec(format!("a_open must be 0 or 1, got {}", e.a_open)));
        }
        if e.scene.is_relative() {
            e.scene = base.join(&e.scene);
        }
        episodes.push(e);
    }
    Ok(episodes)
}

/// Accepts either a manifest file or a directory holding [`EPISODES_FILE`].
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(EPISODES_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Generates scenes `seed .. seed + n` into `dir` with their oracle
/// episodes and writes the manifest.
pub fn gen_episodes(dir: &Path, n: usize, seed: u64, spec: &CorpusSpec) -> Result<Vec<Episode>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut episodes = Vec::with_capacity(n);
    for s in seed..seed + n as u64 {
        let (cloud, meta) = gen_scene(s, spec)?;
        let ply = save_scene(dir, &cloud, &meta)?;
        let rel = PathBuf::from(ply.file_name().expect("scene file name"));
        episodes.push(Episode::new(rel, goal_token(&meta)?, &oracle_action(&meta)));
    }
    write_episodes(&dir.join(EPISODES_FILE), &episodes)?;
    Ok(episodes)
}

/// Loads the scene of every episode. The sibling metadata is attached when
/// present.
pub fn load_demos(episodes: &[Episode]) -> Result<Vec<Demo>> {
    episodes
        .iter()
        .map(|e| {
            let (cloud, meta) = match load_scene(&e.scene) {
                Ok((c, m)) => (c, Some(m)),
                Err(Error::Io { .. }) => (crate::pointcloud::load_ply(&e.scene)?, None),
                Err(err) => return Err(err),
            };
            Ok(Demo {
                cloud,
                meta,
                goal: e.goal(),
                action: e.action(),
            })
        })
        .collect()
}
