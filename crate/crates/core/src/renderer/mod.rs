//! Orthographic rendering of a point cloud into five fixed 10-channel views.
//!
//! Channel layout per pixel:
//!
//! | channels | content                                   |
//! |----------|-------------------------------------------|
//! | 0..3     | RGB                                       |
//! | 3        | depth `d` in `[0, 1]`, background 1.0     |
//! | 4..7     | world-frame `(x, y, z)`, background 0     |
//! | 7..10    | camera-frame `(u, v, d)`, background 0    |
//!
//! Row index grows with `v`, column index with `u`.

pub mod dump;

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::pointcloud::{PointCloud, Vec3};

pub const CHANNELS: usize = 10;
pub const NUM_VIEWS: usize = 5;
pub const BACKGROUND_DEPTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    Top,
    Front,
    Back,
    Left,
    Right,
}

impl CameraId {
    /// Fixed view order used everywhere a set of views is indexed.
    pub const ORDER: [CameraId; NUM_VIEWS] = [
        CameraId::Top,
        CameraId::Front,
        CameraId::Back,
        CameraId::Left,
        CameraId::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraId::Top => "top",
            CameraId::Front => "front",
            CameraId::Back => "back",
            CameraId::Left => "left",
            CameraId::Right => "right",
        }
    }
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualCamera {
    pub id: CameraId,
    /// On a face of the unit cube; always `-view_dir`.
    pub center: Vec3,
    pub view_dir: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
}

/// The five cameras in [`CameraId::ORDER`].
pub fn standard_cameras() -> [VirtualCamera; NUM_VIEWS] {
    let cam = |id, center: Vec3, view_dir, u_axis, v_axis| VirtualCamera {
        id,
        center,
        view_dir,
        u_axis,
        v_axis,
    };
    [
        cam(CameraId::Top, [0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        cam(CameraId::Front, [0.0, -1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        cam(CameraId::Back, [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        cam(CameraId::Left, [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]),
        cam(CameraId::Right, [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
    ]
}

#[inline]
pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width x CHANNELS`.
    pub data: Vec<f64>,
}

impl ViewImage {
    pub fn background(width: usize, height: usize) -> Self {
        let mut data = vec![0.0; width * height * CHANNELS];
        for px in data.chunks_exact_mut(CHANNELS) {
            px[3] = BACKGROUND_DEPTH;
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * CHANNELS;
        &self.data[o..o + CHANNELS]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * CHANNELS;
        &mut self.data[o..o + CHANNELS]
    }

    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.pixel(row, col)[3] != BACKGROUND_DEPTH
    }

    pub fn foreground_count(&self) -> usize {
        self.data
            .chunks_exact(CHANNELS)
            .filter(|px| px[3] != BACKGROUND_DEPTH)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewObservation {
    /// Indexed by [`CameraId::index`].
    pub views: [ViewImage; NUM_VIEWS],
}

impl MultiViewObservation {
    pub fn width(&self) -> usize {
        self.views[0].width
    }

    pub fn height(&self) -> usize {
        self.views[0].height
    }
}

/// Projects `(u, v)` to a pixel, clamping to the image.
#[inline]
fn pixel_of(u: f64, v: f64, width: usize, height: usize) -> (usize, usize) {
    let col = ((u + 1.0) / 2.0 * width as f64).floor();
    let row = ((v + 1.0) / 2.0 * height as f64).floor();
    let col = col.clamp(0.0, (width - 1) as f64) as usize;
    let row = row.clamp(0.0, (height - 1) as f64) as usize;
    (row, col)
}

/// Splats every point into its nearest pixel; the z-buffer keeps the
/// smallest depth, and the earlier point on ties.
pub fn render_view(cloud: &PointCloud, cam: &VirtualCamera, width: usize, height: usize) -> ViewImage {
    assert!(width >= 1 && height >= 1, "image must be at least 1x1");
    let mut img = ViewImage::background(width, height);
    let mut zbuf = vec![f64::INFINITY; width * height];
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let u = dot(p, &cam.u_axis);
        let v = dot(p, &cam.v_axis);
        let d = (dot(p, &cam.view_dir) + 1.0) / 2.0;
        let (row, col) = pixel_of(u, v, width, height);
        let slot = &mut zbuf[row * width + col];
        if d < *slot {
            *slot = d;
            img.pixel_mut(row, col)
                .copy_from_slice(&[c[0], c[1], c[2], d, p[0], p[1], p[2], u, v, d]);
        }
    }
    img
}

pub fn render_all(cloud: &PointCloud, width: usize, height: usize) -> MultiViewObservation {
    let cams = standard_cameras();
    MultiViewObservation {
        views: std::array::from_fn(|i| render_view(cloud, &cams[i], width, height)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross(a: Vec3, b: Vec3) -> Vec3 {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    #[test]
    fn convention_table() {
        let cams = standard_cameras();
        assert_eq!(cams[0].id, CameraId::Top);
        assert_eq!(cams[0].center, [0.0, 0.0, 1.0]);
        assert_eq!(cams[0].view_dir, [0.0, 0.0, -1.0]);
        assert_eq!(cams[0].u_axis, [1.0, 0.0, 0.0]);
        assert_eq!(cams[0].v_axis, [0.0, 1.0, 0.0]);
        assert_eq!(cams[1].id, CameraId::Front);
        assert_eq!(cams[1].center, [0.0, -1.0, 0.0]);
        assert_eq!(cams[1].view_dir, [0.0, 1.0, 0.0]);
        assert_eq!(cams[1].u_axis, [1.0, 0.0, 0.0]);
        assert_eq!(cams[1].v_axis, [0.0, 0.0, 1.0]);
        assert_eq!(cams[2].u_axis, [-1.0, 0.0, 0.0]);
        assert_eq!(cams[3].u_axis, [0.0, -1.0, 0.0]);
        assert_eq!(cams[4].u_axis, [0.0, 1.0, 0.0]);
        for (i, id) in CameraId::ORDER.iter().enumerate() {
            assert_eq!(cams[i].id, *id);
            assert_eq!(id.index(), i);
        }
    }

    #[test]
    fn frames_are_orthonormal() {
        for cam in standard_cameras() {
            let axes = [cam.u_axis, cam.v_axis, cam.view_dir];
            for (i, a) in axes.iter().enumerate() {
                assert!((dot(a, a) - 1.0).abs() < 1e-12);
                for b in &axes[i + 1..] {
                    assert!(dot(a, b).abs() < 1e-12);
                }
            }
            let triple = dot(&cross(cam.u_axis, cam.v_axis), &cam.view_dir);
            assert!((triple.abs() - 1.0).abs() < 1e-12);
            assert_eq!(cam.center, cam.view_dir.map(|v| -v));
        }
    }

    #[test]
    fn empty_cloud_renders_background() {
        let img = render_view(&PointCloud::default(), &standard_cameras()[1], 4, 4);
        assert_eq!(img, ViewImage::background(4, 4));
        assert!(img.data.chunks(CHANNELS).all(|px| px[3] == 1.0));
    }

    #[test]
    fn single_point_front_camera() {
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[1.0, 0.0, 0.0]]).unwrap();
        let img = render_view(&cloud, &standard_cameras()[1], 4, 4);
        assert_eq!(
            img.pixel(2, 2),
            &[1.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]
        );
        assert_eq!(img.foreground_count(), 1);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        // Front camera: d = (y + 1) / 2, so y = -0.4 -> 0.3 and y = 0.4 -> 0.7.
        let cloud = PointCloud::new(
            vec![[0.1, 0.4, 0.1], [0.1, -0.4, 0.1]],
            vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
        )
        .unwrap();
        let img = render_view(&cloud, &standard_cameras()[1], 4, 4);
        let px = img.pixel(2, 2);
        assert_eq!(&px[..3], &[0.0, 1.0, 0.0]);
        assert!((px[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ties_keep_lower_index() {
        let cloud = PointCloud::new(
            vec![[0.1, 0.0, 0.1], [0.11, 0.0, 0.12]],
            vec![[0.2, 0.2, 0.2], [0.9, 0.9, 0.9]],
        )
        .unwrap();
        let img = render_view(&cloud, &standard_cameras()[1], 4, 4);
        assert_eq!(img.pixel(2, 2)[0], 0.2);
    }

    #[test]
    fn out_of_frustum_point_is_clamped() {
        let cloud = PointCloud::new(vec![[1.0, 0.0, 0.0], [0.95, 0.0, 0.0]], vec![[1.0; 3]; 2])
            .unwrap();
        let obs = render_all(&cloud, 8, 8);
        // u = 1 lands exactly on the right edge and is clamped to the last column.
        assert!(obs.views[CameraId::Front.index()].is_foreground(4, 7));
        for view in &obs.views {
            assert!(view.foreground_count() >= 1);
        }
    }

    #[test]
    fn render_all_matches_render_view() {
        let cloud = PointCloud::new(
            vec![[0.3, -0.2, 0.5], [-0.7, 0.1, -0.4], [0.0, 0.6, 0.2]],
            vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]],
        )
        .unwrap();
        let obs = render_all(&cloud, 6, 5);
        for (i, cam) in standard_cameras().iter().enumerate() {
            assert_eq!(obs.views[i], render_view(&cloud, cam, 6, 5));
        }
        assert_eq!(obs.width(), 6);
        assert_eq!(obs.height(), 5);
    }
}
