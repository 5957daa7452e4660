//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the code under test beyond plain data types.

#![allow(dead_code)]

use mvp3d::model::ViewPredictions;
use mvp3d::patches::MaskStrategy;
use mvp3d::pointcloud::PointCloud;
use mvp3d::renderer::MultiViewObservation;
use rand::Rng;

/// Camera table in view order: (u axis, v axis, view direction).
pub const CAMERAS: [([f64; 3], [f64; 3], [f64; 3]); 5] = [
    ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]),
    ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
    ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]),
    ([0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
    ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]),
];

/// Index of the unit cell of `t` scanning cells `0..n`, with everything
/// below the first cell in it and everything past the last in the last.
fn cell(t: f64, n: usize) -> usize {
    if t < 0.0 {
        return 0;
    }
    for c in 0..n {
        if (c as f64) <= t && t < (c + 1) as f64 {
            return c;
        }
    }
    n - 1
}

/// Brute-force projection: every point is tested against every column and
/// row interval, all candidates of a pixel are collected, and the winner
/// is the smallest depth with the lowest index on ties.
pub fn render_oracle(cloud: &PointCloud, view: usize, width: usize, height: usize) -> Vec<f64> {
    let (ua, va, dir) = CAMERAS[view];
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut candidates: Vec<Vec<(f64, usize)>> = vec![Vec::new(); width * height];
    for (i, p) in cloud.points.iter().enumerate() {
        let u = dot(p, &ua);
        let v = dot(p, &va);
        let d = (dot(p, &dir) + 1.0) / 2.0;
        let col = cell((u + 1.0) / 2.0 * width as f64, width);
        let row = cell((v + 1.0) / 2.0 * height as f64, height);
        candidates[row * width + col].push((d, i));
    }
    let mut out = Vec::with_capacity(width * height * 10);
    for cands in &candidates {
        let best = cands
            .iter()
            .copied()
            .reduce(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
        match best {
            None => out.extend_from_slice(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Some((d, i)) => {
                let p = cloud.points[i];
                let c = cloud.colors[i];
                out.extend_from_slice(&[c[0], c[1], c[2], d, p[0], p[1], p[2], dot(&p, &ua), dot(&p, &va), d]);
            }
        }
    }
    out
}

/// Scalar double loop over views, pixels and the strategy's channels.
pub fn recon_loss_oracle(pred: &ViewPredictions, target: &MultiViewObservation, strategy: MaskStrategy) -> f64 {
    let c = match strategy {
        MaskStrategy::RgbOnly => 3,
        MaskStrategy::AllChannels => 10,
    };
    let (w, h) = (target.views[0].width, target.views[0].height);
    let mut sum = 0.0;
    for view in 0..5 {
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let p = pred.views[view][(row * w + col) * c + ch];
                    let t = target.views[view].data[(row * w + col) * 10 + ch];
                    sum += (p - t) * (p - t);
                }
            }
        }
    }
    sum / (5 * w * h) as f64
}

/// Uniform random cloud in the cube. A few points sit exactly on the
/// faces and a few repeat earlier points, to exercise clamping and ties.
pub fn random_cloud<R: Rng>(rng: &mut R, n: usize) -> PointCloud {
    let mut points: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for i in 0..n {
        let p = if i > 0 && rng.random_bool(0.02) {
            points[rng.random_range(0..i)]
        } else {
            let mut p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            if rng.random_bool(0.02) {
                p[rng.random_range(0..3)] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            p
        };
        points.push(p);
        colors.push(std::array::from_fn(|_| rng.random_range(0.0..=1.0)));
    }
    PointCloud::new(points, colors).expect("valid cloud")
}
