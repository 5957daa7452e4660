//! Debug image dumps: binary PPM (P6) for channel triples and 16-bit PGM
//! (P5) for depth. The first written row is the one with the largest `v`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{CameraId, MultiViewObservation, ViewImage, CHANNELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Triple {
    Rgb,
    Xyz,
    Cam,
}

impl Triple {
    pub fn name(self) -> &'static str {
        match self {
            Triple::Rgb => "rgb",
            Triple::Xyz => "xyz",
            Triple::Cam => "cam",
        }
    }

    /// Maps a pixel to three values in `[0, 1]`.
    fn unit(self, px: &[f64]) -> [f64; 3] {
        let signed = |v: f64| (v + 1.0) / 2.0;
        match self {
            Triple::Rgb => [px[0], px[1], px[2]],
            Triple::Xyz => [signed(px[4]), signed(px[5]), signed(px[6])],
            Triple::Cam => [signed(px[7]), signed(px[8]), px[9]],
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an RGB raster (rows already in output order) as binary PPM.
pub fn encode_ppm(width: usize, height: usize, rgb: &[[f64; 3]]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(rgb.len() * 3);
    for px in rgb {
        out.extend(px.iter().map(|v| to_u8(*v)));
    }
    out
}

/// Rows of `img` from top (max v) to bottom, mapped through `f`.
fn raster<T>(img: &ViewImage, f: impl Fn(&[f64]) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(img.width * img.height);
    for row in (0..img.height).rev() {
        for col in 0..img.width {
            out.push(f(img.pixel(row, col)));
        }
    }
    out
}

pub fn encode_view_ppm(img: &ViewImage, triple: Triple) -> Vec<u8> {
    encode_ppm(img.width, img.height, &raster(img, |px| triple.unit(px)))
}

/// 16-bit big-endian PGM of the depth channel.
pub fn encode_depth_pgm(img: &ViewImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for d in raster(img, |px| px[3]) {
        let q = (d.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `<scene>_<view>_{rgb,xyz,cam}.ppm` and `<scene>_<view>_depth.pgm`
/// for every view; returns the written paths.
pub fn dump_observation(dir: &Path, scene: &str, obs: &MultiViewObservation) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for id in CameraId::ORDER {
        let img = &obs.views[id.index()];
        for triple in [Triple::Rgb, Triple::Xyz, Triple::Cam] {
            let path = dir.join(format!("{scene}_{id}_{}.ppm", triple.name()));
            written.push(write(path, &encode_view_ppm(img, triple))?);
        }
        let path = dir.join(format!("{scene}_{id}_depth.pgm"));
        written.push(write(path, &encode_depth_pgm(img))?);
    }
    Ok(written)
}

/// Side-by-side RGB strip of several same-sized planes holding three
/// channels each (`height x width x 3`, row index growing with `v`).
pub fn encode_strip(width: usize, height: usize, planes: &[&[f64]]) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(width * height * planes.len());
    for row in (0..height).rev() {
        for plane in planes {
            for col in 0..width {
                let o = (row * width + col) * 3;
                rgb.push([plane[o], plane[o + 1], plane[o + 2]]);
            }
        }
    }
    encode_ppm(width * planes.len(), height, &rgb)
}

/// Copies the RGB channels of a view into a `height x width x 3` plane.
pub fn rgb_plane(img: &ViewImage) -> Vec<f64> {
    img.data
        .chunks_exact(CHANNELS)
        .flat_map(|px| [px[0], px[1], px[2]])
        .collect()
}
