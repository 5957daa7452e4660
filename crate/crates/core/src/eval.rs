//! Reconstruction quality, toy-task success and the perturbation sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::episodes::{goal_token, oracle_action, Demo};
use crate::error::{Error, Result};
use crate::model::{action_decode, encode, mae_decode, FinetuneSample, ModelParams, ToyAction};
use crate::patches::{apply_mask, sample_mask, tokenize_all, MaskPlan, MaskStrategy};
use crate::pointcloud::{apply_perturbation, Perturbation, PerturbationKind, PointCloud};
use crate::renderer::dump::{encode_strip, rgb_plane};
use crate::renderer::{render_all, CameraId, MultiViewObservation, CHANNELS, NUM_VIEWS};

/// Success requires a position error strictly below this.
pub const POS_THRESHOLD: f64 = 0.05;
/// Success requires a rotation error strictly below this, in degrees.
pub const ROT_THRESHOLD_DEG: f64 = 15.0;
pub const SWEEP_HEADER: &str = "perturbation,success_rate,mean_pos_err,n";
pub const BASELINE_ROW: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneRecon {
    pub scene: String,
    /// Per-pixel squared error over masked patches; `None` when nothing
    /// was masked.
    pub masked_mse: Option<f64>,
    pub unmasked_mse: Option<f64>,
    /// The same error for a prediction equal to each view's mean over its
    /// unmasked pixels.
    pub copy_baseline_mse: Option<f64>,
    pub whole_mse: f64,
    pub masked_pixels: usize,
    pub unmasked_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconReport {
    pub scenes: Vec<SceneRecon>,
    pub mean_masked_mse: Option<f64>,
    pub mean_unmasked_mse: Option<f64>,
    pub mean_copy_baseline_mse: Option<f64>,
}

impl ReconReport {
    /// Fraction of scenes whose masked error is below the copy baseline.
    pub fn beats_copy_fraction(&self) -> Option<f64> {
        let pairs: Vec<bool> = self
            .scenes
            .iter()
            .filter_map(|s| Some(s.masked_mse? < s.copy_baseline_mse?))
            .collect();
        (!pairs.is_empty()).then(|| pairs.iter().filter(|b| **b).count() as f64 / pairs.len() as f64)
    }
}

fn mean_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-pixel mask of one view from its token flags.
fn pixel_mask(flags: &[bool], width: usize, patch: usize) -> Vec<bool> {
    let grid_w = width / patch;
    let height = flags.len() / grid_w * patch;
    let mut out = vec![false; width * height];
    for (row, chunk) in out.chunks_exact_mut(width).enumerate() {
        for (col, m) in chunk.iter_mut().enumerate() {
            *m = flags[(row / patch) * grid_w + col / patch];
        }
    }
    out
}

/// Scores one scene's reconstruction under `plan`.
fn score_scene(
    name: &str,
    obs: &MultiViewObservation,
    pred: &[Vec<f64>; NUM_VIEWS],
    plan: &MaskPlan,
    patch: usize,
) -> SceneRecon {
    let c = plan.strategy.channels();
    let (w, h) = (obs.width(), obs.height());
    let (mut masked, mut unmasked, mut copy) = (0.0, 0.0, 0.0);
    let (mut n_masked, mut n_unmasked) = (0usize, 0usize);
    for (v, flags) in plan.per_view.iter().enumerate() {
        let mask = pixel_mask(flags, w, patch);
        let target = &obs.views[v].data;
        let mut mean = vec![0.0; c];
        let visible = mask.iter().filter(|m| !**m).count();
        if visible > 0 {
            for (px, _) in target.chunks_exact(CHANNELS).zip(&mask).filter(|(_, m)| !**m) {
                for k in 0..c {
                    mean[k] += px[k] / visible as f64;
                }
            }
        }
        for (i, (px, &m)) in target.chunks_exact(CHANNELS).zip(&mask).enumerate() {
            let p = &pred[v][i * c..(i + 1) * c];
            let err: f64 = (0..c).map(|k| (p[k] - px[k]).powi(2)).sum();
            if m {
                masked += err;
                copy += (0..c).map(|k| (mean[k] - px[k]).powi(2)).sum::<f64>();
                n_masked += 1;
            } else {
                unmasked += err;
                n_unmasked += 1;
            }
        }
    }
    let per = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    SceneRecon {
        scene: name.to_string(),
        masked_mse: per(masked, n_masked),
        unmasked_mse: per(unmasked, n_unmasked),
        copy_baseline_mse: per(copy, n_masked),
        whole_mse: (masked + unmasked) / (NUM_VIEWS * w * h) as f64,
        masked_pixels: n_masked,
        unmasked_pixels: n_unmasked,
    }
}

/// Masks, encodes and reconstructs every scene, scoring masked and visible
/// regions separately. Masks are drawn from `seed`, one stream per scene.
/// With `dump`, writes `<scene>_<camera>.ppm` strips showing target,
/// masked input and reconstruction.
pub fn reconstruct_report(
    params: &ModelParams,
    scenes: &[(String, PointCloud)],
    ratio: f64,
    strategy: MaskStrategy,
    seed: u64,
    dump: Option<&Path>,
) -> Result<ReconReport> {
    let cfg = params.config();
    if strategy != cfg.strategy {
        return Err(Error::ConfigMismatch(vec![format!(
            "model.strategy ({} vs {})",
            cfg.strategy, strategy
        )]));
    }
    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(scenes.len());
    for (name, cloud) in scenes {
        let obs = render_all(cloud, cfg.width, cfg.height);
        let plan = sample_mask(cfg.tokens_per_view(), ratio, strategy, rng.next_u64())?;
        let grids = tokenize_all(&obs, cfg.patch)?;
        let input = apply_mask(&grids, &plan)?;
        let z = encode(&input, params)?;
        let pred = mae_decode(&z, params, strategy)?;
        out.push(score_scene(name, &obs, &pred.views, &plan, cfg.patch));
        if let Some(dir) = dump {
            for id in CameraId::ORDER {
                let v = id.index();
                let target = rgb_plane(&obs.views[v]);
                let mask = pixel_mask(&plan.per_view[v], cfg.width, cfg.patch);
                let mut hidden = target.clone();
                for (px, _) in hidden.chunks_exact_mut(3).zip(&mask).filter(|(_, m)| **m) {
                    px.fill(0.0);
                }
                let c = pred.channels;
                let recon: Vec<f64> = pred.views[v]
                    .chunks_exact(c)
                    .flat_map(|px| [px[0], px[1], px[2]])
                    .collect();
                let path = dir.join(format!("{name}_{id}.ppm"));
                let bytes = encode_strip(cfg.width, cfg.height, &[&target, &hidden, &recon]);
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(ReconReport {
        mean_masked_mse: mean_some(out.iter().map(|s| s.masked_mse)),
        mean_unmasked_mse: mean_some(out.iter().map(|s| s.unmasked_mse)),
        mean_copy_baseline_mse: mean_some(out.iter().map(|s| s.copy_baseline_mse)),
        scenes: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeScore {
    pub pos_err: f64,
    pub rot_err_deg: f64,
    pub open_correct: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuccessReport {
    pub episodes: Vec<EpisodeScore>,
    pub success_rate: f64,
    pub mean_pos_err: f64,
    pub pos_threshold: f64,
    pub rot_threshold_deg: f64,
}

pub fn score_action(pred: &ToyAction, truth: &ToyAction) -> EpisodeScore {
    let pos_err = pred
        .pos
        .iter()
        .zip(&truth.pos)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let dot: f64 = pred.rot.iter().zip(&truth.rot).map(|(a, b)| a * b).sum();
    let rot_err_deg = (2.0 * dot.abs().min(1.0).acos()).to_degrees();
    let open_correct = (pred.open > 0.5) == (truth.open > 0.5);
    EpisodeScore {
        pos_err,
        rot_err_deg,
        open_correct,
        success: pos_err < POS_THRESHOLD && rot_err_deg < ROT_THRESHOLD_DEG && open_correct,
    }
}

pub fn summarize(episodes: Vec<EpisodeScore>) -> SuccessReport {
    let n = episodes.len().max(1) as f64;
    SuccessReport {
        success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
        mean_pos_err: episodes.iter().map(|e| e.pos_err).sum::<f64>() / n,
        episodes,
        pos_threshold: POS_THRESHOLD,
        rot_threshold_deg: ROT_THRESHOLD_DEG,
    }
}

/// Predicts the action of every demo and scores it against the demo's
/// ground truth.
pub fn predict_actions(params: &ModelParams, demos: &[Demo]) -> Result<Vec<ToyAction>> {
    let cfg = params.config();
    demos
        .iter()
        .map(|d| {
            let obs = render_all(&d.cloud, cfg.width, cfg.height);
            let sample = FinetuneSample::new(&obs, cfg.patch, d.goal, d.action)?;
            let z = encode(&sample.input, params)?;
            action_decode(&z, d.goal, params)
        })
        .collect()
}

pub fn eval_success(params: &ModelParams, demos: &[Demo]) -> Result<SuccessReport> {
    let preds = predict_actions(params, demos)?;
    Ok(summarize(
        preds
            .iter()
            .zip(demos)
            .map(|(p, d)| score_action(p, &d.action))
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub perturbation: String,
    pub success_rate: f64,
    pub mean_pos_err: f64,
    pub n: usize,
}

/// Re-labels perturbed copies of `demos` with the oracle and evaluates
/// them, one row per kind after a baseline row on the unperturbed demos.
/// Every demo must carry its scene metadata.
pub fn perturbation_sweep(
    params: &ModelParams,
    demos: &[Demo],
    kinds: &[PerturbationKind],
    magnitude: f64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let metas = demos
        .iter()
        .map(|d| d.meta.as_ref().ok_or_else(|| Error::InvalidSpec("sweep needs scene metadata".into())))
        .collect::<Result<Vec<_>>>()?;
    let base = eval_success(params, demos)?;
    let mut rows = vec![SweepRow {
        perturbation: BASELINE_ROW.into(),
        success_rate: base.success_rate,
        mean_pos_err: base.mean_pos_err,
        n: demos.len(),
    }];
    for (k, &kind) in kinds.iter().enumerate() {
        let perturbed = demos
            .iter()
            .zip(&metas)
            .enumerate()
            .map(|(i, (d, meta))| {
                let s = seed ^ ((k as u64) << 32) ^ i as u64;
                let (cloud, meta) = apply_perturbation(&d.cloud, meta, Perturbation { kind, magnitude }, s)?;
                Ok(Demo {
                    goal: goal_token(&meta)?,
                    action: oracle_action(&meta),
                    cloud,
                    meta: Some(meta),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = eval_success(params, &perturbed)?;
        rows.push(SweepRow {
            perturbation: kind.name().into(),
            success_rate: report.success_rate,
            mean_pos_err: report.mean_pos_err,
            n: perturbed.len(),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.perturbation, r.success_rate, r.mean_pos_err, r.n).expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pointcloud::{gen_scene, CorpusSpec};

    const Q90: [f64; 4] = [std::f64::consts::FRAC_1_SQRT_2, 0.0, 0.0, std::f64::consts::FRAC_1_SQRT_2];

    fn action(pos: [f64; 3], rot: [f64; 4], open: f64) -> ToyAction {
        ToyAction { pos, rot, open }
    }

    #[test]
    fn perfect_and_sign_flipped_predictions_succeed() {
        let t = action([0.1, 0.2, -0.5], Q90, 1.0);
        let s = score_action(&t, &t);
        assert!(s.success && s.pos_err == 0.0 && s.rot_err_deg < 1e-6);
        let flipped = action(t.pos, Q90.map(|v| -v), 0.9);
        let s = score_action(&flipped, &t);
        assert!(s.rot_err_deg < 1e-6 && s.success);
    }

    #[test]
    fn thresholds_are_strict() {
        let t = action([0.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0);
        let s = score_action(&action([0.05, 0.0, 0.0], t.rot, 0.1), &t);
        assert_eq!(s.pos_err, 0.05);
        assert!(!s.success);
        let half = 7.5f64.to_radians();
        let s = score_action(&action([0.0; 3], [half.cos(), 0.0, 0.0, half.sin()], 0.1), &t);
        assert!((s.rot_err_deg - 15.0).abs() < 1e-9);
        let wrong_open = score_action(&action([0.0; 3], t.rot, 0.7), &t);
        assert!(!wrong_open.open_correct && !wrong_open.success);
    }

    #[test]
    fn rate_is_order_invariant() {
        let t = action([0.0; 3], [1.0, 0.0, 0.0, 0.0], 1.0);
        let mut scores: Vec<EpisodeScore> = (0..7)
            .map(|i| score_action(&action([0.01 * i as f64, 0.0, 0.0], t.rot, 0.9), &t))
            .collect();
        let a = summarize(scores.clone()).success_rate;
        scores.reverse();
        assert_eq!(a, summarize(scores).success_rate);
        assert!((a - 5.0 / 7.0).abs() < 1e-15);
    }

    fn tiny() -> ModelParams {
        ModelParams::init(&ModelConfig {
            hidden: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            patch: 4,
            width: 16,
            height: 16,
            ..ModelConfig::desk()
        })
        .unwrap()
    }

    fn scenes(n: u64) -> Vec<(String, PointCloud)> {
        let spec = CorpusSpec {
            density: 300.0,
            table_density: 300.0,
            ..CorpusSpec::default()
        };
        (0..n).map(|s| (format!("s{s}"), gen_scene(s, &spec).unwrap().0)).collect()
    }

    #[test]
    fn region_errors_recombine_to_the_whole() {
        let p = tiny();
        let r = reconstruct_report(&p, &scenes(3), 0.5, MaskStrategy::RgbOnly, 1, None).unwrap();
        for s in &r.scenes {
            let total = (s.masked_pixels + s.unmasked_pixels) as f64;
            let combined = (s.masked_mse.unwrap() * s.masked_pixels as f64
                + s.unmasked_mse.unwrap() * s.unmasked_pixels as f64)
                / total;
            assert!((combined - s.whole_mse).abs() < 1e-10);
        }
        let again = reconstruct_report(&p, &scenes(3), 0.5, MaskStrategy::RgbOnly, 1, None).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn zero_ratio_reports_absent_masked_error() {
        let r = reconstruct_report(&tiny(), &scenes(2), 0.0, MaskStrategy::RgbOnly, 1, None).unwrap();
        assert!(r.scenes.iter().all(|s| s.masked_mse.is_none() && s.copy_baseline_mse.is_none()));
        assert_eq!(r.mean_masked_mse, None);
        assert_eq!(r.beats_copy_fraction(), None);
    }

    #[test]
    fn sweep_rows_follow_kinds_and_zero_magnitude_matches_baseline() {
        let spec = CorpusSpec {
            density: 300.0,
            table_density: 300.0,
            ..CorpusSpec::default()
        };
        let demos: Vec<Demo> = (0..3).map(|s| Demo::generate(s, &spec).unwrap()).collect();
        let p = tiny();
        let rows = perturbation_sweep(&p, &demos, &PerturbationKind::ALL, 0.0, 5).unwrap();
        assert_eq!(rows.len(), 1 + PerturbationKind::ALL.len());
        assert_eq!(rows[0].perturbation, BASELINE_ROW);
        for (r, k) in rows[1..].iter().zip(PerturbationKind::ALL) {
            assert_eq!(r.perturbation, k.name());
            assert_eq!((r.success_rate, r.mean_pos_err, r.n), (rows[0].success_rate, rows[0].mean_pos_err, 3));
        }
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().next(), Some(SWEEP_HEADER));
        assert_eq!(csv.lines().count(), rows.len() + 1);

        let shaken = perturbation_sweep(&p, &demos, &[PerturbationKind::PointNoise], 1.0, 5).unwrap();
        assert_ne!(shaken[1].mean_pos_err, shaken[0].mean_pos_err);

        let bare: Vec<Demo> = demos.into_iter().map(|d| Demo { meta: None, ..d }).collect();
        assert!(perturbation_sweep(&p, &bare, &PerturbationKind::ALL, 0.0, 5).is_err());
    }

    #[test]
    fn strategy_mismatch_is_rejected() {
        let err = reconstruct_report(&tiny(), &scenes(1), 0.5, MaskStrategy::AllChannels, 1, None).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
    }

    #[test]
    fn dumps_one_strip_per_view() {
        let dir = tempfile::tempdir().unwrap();
        reconstruct_report(&tiny(), &scenes(1), 0.75, MaskStrategy::RgbOnly, 1, Some(dir.path())).unwrap();
        let bytes = fs::read(dir.path().join("s0_top.ppm")).unwrap();
        assert!(bytes.starts_with(b"P6\n48 16\n255\n"));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), NUM_VIEWS);
    }
}
