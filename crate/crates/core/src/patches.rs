//! Patch tokenization of views and the per-view random masking plans.
//!
//! A token is one `P x P` patch flattened channel-last in row-major pixel
//! order: entry `(py * P + px) * C + ch`. Token `k` of a grid with
//! `grid_w = W / P` columns covers patch row `k / grid_w`, column
//! `k % grid_w`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::{CameraId, MultiViewObservation, ViewImage, CHANNELS, NUM_VIEWS};

/// Which channels of a masked patch are hidden, and therefore which
/// channels the reconstruction head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    RgbOnly,
    AllChannels,
}

impl MaskStrategy {
    /// Number of leading channels hidden by the mask (3 or 10).
    pub fn channels(self) -> usize {
        match self {
            MaskStrategy::RgbOnly => 3,
            MaskStrategy::AllChannels => CHANNELS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::RgbOnly => "rgb_only",
            MaskStrategy::AllChannels => "all_channels",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb_only" => Ok(MaskStrategy::RgbOnly),
            "all_channels" => Ok(MaskStrategy::AllChannels),
            _ => Err(Error::Config(format!("unknown mask strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub view: CameraId,
    pub patch: usize,
    /// `(W / P, H / P)`.
    pub grid_dims: (usize, usize),
    /// `N x (P * P * CHANNELS)`, row-major.
    pub tokens: Vec<f64>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid_dims.0 * self.grid_dims.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn token(&self, k: usize) -> &[f64] {
        let d = self.token_dim();
        &self.tokens[k * d..(k + 1) * d]
    }
}

pub fn check_patch(width: usize, height: usize, patch: usize) -> Result<()> {
    if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
        return Err(Error::PatchSize {
            width,
            height,
            patch,
        });
    }
    Ok(())
}

/// Pairs of `(image pixel index, token pixel index)` where the token pixel
/// index is `k * P * P + py * P + px`.
fn patch_pixels(
    width: usize,
    grid_dims: (usize, usize),
    patch: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (gw, gh) = grid_dims;
    (0..gh * gw).flat_map(move |k| {
        let (gr, gc) = (k / gw, k % gw);
        (0..patch * patch).map(move |q| {
            let (py, px) = (q / patch, q % patch);
            let pixel = (gr * patch + py) * width + gc * patch + px;
            (pixel, k * patch * patch + q)
        })
    })
}

pub fn tokenize(img: &ViewImage, view: CameraId, patch: usize) -> Result<TokenGrid> {
    check_patch(img.width, img.height, patch)?;
    let grid_dims = (img.width / patch, img.height / patch);
    let mut tokens = vec![0.0; img.data.len()];
    for (i, t) in patch_pixels(img.width, grid_dims, patch) {
        tokens[t * CHANNELS..(t + 1) * CHANNELS]
            .copy_from_slice(&img.data[i * CHANNELS..(i + 1) * CHANNELS]);
    }
    Ok(TokenGrid {
        view,
        patch,
        grid_dims,
        tokens,
    })
}

pub fn tokenize_all(obs: &MultiViewObservation, patch: usize) -> Result<[TokenGrid; NUM_VIEWS]> {
    let mut grids = Vec::with_capacity(NUM_VIEWS);
    for id in CameraId::ORDER {
        grids.push(tokenize(&obs.views[id.index()], id, patch)?);
    }
    Ok(grids.try_into().expect("five views"))
}

/// Inverse of [`tokenize`] for per-token predictions holding the first
/// `channels` channels. Returns a `H x W x channels` plane.
pub fn detokenize(
    predictions: &[f64],
    grid_dims: (usize, usize),
    patch: usize,
    channels: usize,
) -> Result<Vec<f64>> {
    let n = grid_dims.0 * grid_dims.1;
    let expected = n * patch * patch * channels;
    if predictions.len() != expected {
        return Err(Error::Shape(format!(
            "predictions have {} entries, expected {n} tokens x {patch}x{patch}x{channels} = {expected}",
            predictions.len()
        )));
    }
    let width = grid_dims.0 * patch;
    let mut plane = vec![0.0; expected];
    for (i, t) in patch_pixels(width, grid_dims, patch) {
        plane[i * channels..(i + 1) * channels]
            .copy_from_slice(&predictions[t * channels..(t + 1) * channels]);
    }
    Ok(plane)
}

/// Full inverse of [`tokenize`].
pub fn detokenize_image(grid: &TokenGrid) -> ViewImage {
    let data = detokenize(&grid.tokens, grid.grid_dims, grid.patch, CHANNELS)
        .expect("grid is self-consistent");
    ViewImage {
        width: grid.grid_dims.0 * grid.patch,
        height: grid.grid_dims.1 * grid.patch,
        data,
    }
}

/// `floor(ratio * n + 0.5)`.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 0.5).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub seed: u64,
    /// One flag per token, `true` when masked.
    pub per_view: [Vec<bool>; NUM_VIEWS],
}

impl MaskPlan {
    pub fn tokens_per_view(&self) -> usize {
        self.per_view[0].len()
    }

    /// A plan that masks nothing.
    pub fn none(n: usize, strategy: MaskStrategy) -> Self {
        Self {
            strategy,
            ratio: 0.0,
            seed: 0,
            per_view: std::array::from_fn(|_| vec![false; n]),
        }
    }
}

/// Selects exactly [`mask_count`] tokens per view by a partial Fisher-Yates
/// shuffle, with view `i` drawing from a stream seeded by `seed ^ i`.
pub fn sample_mask(n: usize, ratio: f64, strategy: MaskStrategy, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = mask_count(ratio, n);
    let per_view = std::array::from_fn(|view| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ view as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let mut flags = vec![false; n];
        for &k in &idx[..count] {
            flags[k] = true;
        }
        flags
    });
    Ok(MaskPlan {
        strategy,
        ratio,
        seed,
        per_view,
    })
}

/// Encoder input: the masked tokens of all views plus their mask flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTokens {
    pub token_dim: usize,
    pub tokens_per_view: usize,
    /// `(5 N) x token_dim`, view-major.
    pub tokens: Vec<f64>,
    /// `5 N` flags, view-major.
    pub flags: Vec<bool>,
}

/// Zero-fills the hidden channels of masked tokens; every token is kept.
pub fn apply_mask(grids: &[TokenGrid; NUM_VIEWS], plan: &MaskPlan) -> Result<MaskedTokens> {
    let n = grids[0].len();
    let token_dim = grids[0].token_dim();
    for (g, flags) in grids.iter().zip(&plan.per_view) {
        if g.len() != n || g.token_dim() != token_dim || flags.len() != n {
            return Err(Error::Shape(format!(
                "grid of {} tokens (dim {}) vs plan of {} flags",
                g.len(),
                g.token_dim(),
                flags.len()
            )));
        }
    }
    let hidden = plan.strategy.channels();
    let mut tokens = Vec::with_capacity(NUM_VIEWS * n * token_dim);
    let mut flags = Vec::with_capacity(NUM_VIEWS * n);
    for (g, view_flags) in grids.iter().zip(&plan.per_view) {
        for (k, &masked) in view_flags.iter().enumerate() {
            let start = tokens.len();
            tokens.extend_from_slice(g.token(k));
            if masked {
                for px in tokens[start..].chunks_exact_mut(CHANNELS) {
                    px[..hidden].fill(0.0);
                }
            }
            flags.push(masked);
        }
    }
    Ok(MaskedTokens {
        token_dim,
        tokens_per_view: n,
        tokens,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(width: usize, height: usize, seed: u64) -> ViewImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ViewImage {
            width,
            height,
            data: (0..width * height * CHANNELS).map(|_| rng.random()).collect(),
        }
    }

    fn grids(width: usize, patch: usize, seed: u64) -> [TokenGrid; NUM_VIEWS] {
        std::array::from_fn(|i| {
            tokenize(&random_image(width, width, seed + i as u64), CameraId::ORDER[i], patch)
                .unwrap()
        })
    }

    #[test]
    fn single_patch_token_is_the_image() {
        let img = random_image(4, 4, 1);
        let g = tokenize(&img, CameraId::Top, 4).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.tokens, img.data);
    }

    #[test]
    fn grid_dims_for_desk_preset() {
        let g = tokenize(&ViewImage::background(64, 64), CameraId::Top, 8).unwrap();
        assert_eq!(g.len(), 64);
        assert_eq!(g.grid_dims, (8, 8));
        assert_eq!(g.token_dim(), 640);
    }

    #[test]
    fn token_index_maps_to_patch_position() {
        let mut img = ViewImage::background(6, 4);
        // Pixel (row 3, col 4) lives in patch row 1, col 2 -> token 5 for P = 2.
        img.pixel_mut(3, 4)[0] = 7.0;
        let g = tokenize(&img, CameraId::Front, 2).unwrap();
        assert_eq!(g.grid_dims, (3, 2));
        // Within the patch: py = 1, px = 0.
        assert_eq!(g.token(5)[(2) * CHANNELS], 7.0);
    }

    #[test]
    fn non_divisible_patch_is_rejected() {
        match tokenize(&ViewImage::background(10, 8), CameraId::Top, 3) {
            Err(Error::PatchSize {
                width,
                height,
                patch,
            }) => assert_eq!((width, height, patch), (10, 8, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detokenize_zero_and_shape_errors() {
        assert_eq!(detokenize(&[0.0; 48], (2, 2), 2, 3).unwrap(), vec![0.0; 48]);
        assert!(matches!(
            detokenize(&[0.0; 47], (2, 2), 2, 3),
            Err(Error::Shape(_))
        ));
        let single: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(detokenize(&single, (1, 1), 2, 3).unwrap(), single);
    }

    #[test]
    fn detokenize_rgb_matches_target_planes() {
        let img = random_image(8, 8, 4);
        let g = tokenize(&img, CameraId::Left, 4).unwrap();
        let rgb_tokens: Vec<f64> = g
            .tokens
            .chunks_exact(CHANNELS)
            .flat_map(|px| px[..3].to_vec())
            .collect();
        let plane = detokenize(&rgb_tokens, g.grid_dims, 4, 3).unwrap();
        let expected: Vec<f64> = img
            .data
            .chunks_exact(CHANNELS)
            .flat_map(|px| px[..3].to_vec())
            .collect();
        assert_eq!(plane, expected);
    }

    #[test]
    fn ratio_zero_masks_nothing() {
        let g = grids(8, 4, 0);
        let plan = sample_mask(g[0].len(), 0.0, MaskStrategy::RgbOnly, 3).unwrap();
        assert!(plan.per_view.iter().flatten().all(|m| !m));
        let masked = apply_mask(&g, &plan).unwrap();
        let all: Vec<f64> = g.iter().flat_map(|x| x.tokens.clone()).collect();
        assert_eq!(masked.tokens, all);
    }

    #[test]
    fn desk_ratio_masks_48_of_64() {
        let plan = sample_mask(64, 0.75, MaskStrategy::RgbOnly, 11).unwrap();
        for v in &plan.per_view {
            assert_eq!(v.iter().filter(|m| **m).count(), 48);
        }
        assert_eq!(plan, sample_mask(64, 0.75, MaskStrategy::RgbOnly, 11).unwrap());
    }

    #[test]
    fn round_half_up() {
        assert_eq!(mask_count(0.5, 3), 2);
        assert_eq!(mask_count(0.25, 2), 1);
        assert_eq!(mask_count(0.1, 4), 0);
    }

    #[test]
    fn invalid_ratio() {
        assert!(sample_mask(4, 1.0, MaskStrategy::RgbOnly, 0).is_err());
        assert!(sample_mask(4, -0.1, MaskStrategy::RgbOnly, 0).is_err());
    }

    #[test]
    fn views_use_distinct_streams() {
        for seed in 0..100 {
            let plan = sample_mask(16, 0.75, MaskStrategy::RgbOnly, seed).unwrap();
            assert!(plan.per_view.iter().any(|v| *v != plan.per_view[0]));
        }
    }

    #[test]
    fn rgb_only_keeps_geometry() {
        let mut g = grids(4, 2, 7);
        g[0].tokens[3] = 0.5;
        let mut plan = MaskPlan::none(4, MaskStrategy::RgbOnly);
        plan.per_view[0][0] = true;
        let m = apply_mask(&g, &plan).unwrap();
        let tok = &m.tokens[..m.token_dim];
        assert_eq!(tok[3], 0.5);
        for px in tok.chunks_exact(CHANNELS) {
            assert_eq!(&px[..3], &[0.0; 3]);
        }
        assert_eq!(&tok[4..10], &g[0].tokens[4..10]);
        assert!(m.flags[0]);
    }

    #[test]
    fn all_channels_zeroes_token() {
        let g = grids(4, 2, 8);
        let mut plan = MaskPlan::none(4, MaskStrategy::AllChannels);
        plan.per_view[2][3] = true;
        let m = apply_mask(&g, &plan).unwrap();
        let k = 2 * 4 + 3;
        assert!(m.tokens[k * m.token_dim..(k + 1) * m.token_dim]
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn plan_shape_mismatch() {
        let g = grids(4, 2, 9);
        let plan = MaskPlan::none(5, MaskStrategy::RgbOnly);
        assert!(matches!(apply_mask(&g, &plan), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(gw in 1usize..4, gh in 1usize..4, p in 1usize..4, seed in 0u64..1000) {
            let img = random_image(gw * p, gh * p, seed);
            let g = tokenize(&img, CameraId::Back, p).unwrap();
            prop_assert_eq!(detokenize_image(&g), img);
        }

        #[test]
        fn unmasked_tokens_untouched(seed in 0u64..500, ratio in 0.0f64..0.99, all in any::<bool>()) {
            let strategy = if all { MaskStrategy::AllChannels } else { MaskStrategy::RgbOnly };
            let g = grids(8, 2, seed);
            let plan = sample_mask(16, ratio, strategy, seed).unwrap();
            let m = apply_mask(&g, &plan).unwrap();
            for (v, grid) in g.iter().enumerate() {
                prop_assert_eq!(plan.per_view[v].iter().filter(|x| **x).count(), mask_count(ratio, 16));
                for k in 0..16 {
                    let idx = v * 16 + k;
                    let got = &m.tokens[idx * m.token_dim..(idx + 1) * m.token_dim];
                    if !plan.per_view[v][k] {
                        prop_assert_eq!(got, grid.token(k));
                    }
                }
            }
        }
    }
}
