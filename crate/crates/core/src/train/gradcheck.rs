//! Central finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::episodes::Demo;
use crate::error::Result;
use crate::model::{
    loss_and_grads, loss_only, Batch, FinetuneSample, LossOptions, ModelConfig, ModelParams, Part,
    PretrainSample,
};
use crate::patches::sample_mask;
use crate::pointcloud::{gen_scene, CorpusSpec};
use crate::renderer::render_all;

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_SAMPLES: usize = 8;
/// Pairs where both gradients are below this are skipped.
pub const GRADCHECK_ABS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a - n| / max(|a|, |n|)`, or `None` when both are below the absolute
/// tolerance.
pub fn rel_err(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    if scale < GRADCHECK_ABS_TOL {
        None
    } else {
        Some((analytic - numeric).abs() / scale)
    }
}

/// Compares `analytic` against central differences of `loss` on up to
/// `samples` random entries of every tensor in `parts`.
pub fn check_gradients<F>(
    params: &ModelParams,
    analytic: &ModelParams,
    loss: F,
    parts: &[Part],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut tensors = Vec::new();
    for ti in 0..params.tensors().len() {
        let t = &params.tensors()[ti];
        if !parts.contains(&t.part) {
            continue;
        }
        let n = t.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let k = samples.min(n);
        for i in 0..k {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let mut check = TensorCheck {
            name: t.name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        };
        for &e in &idx[..k] {
            let orig = t.data[e];
            work.tensors_mut()[ti].data[e] = orig + eps;
            let up = loss(&work)?;
            work.tensors_mut()[ti].data[e] = orig - eps;
            let down = loss(&work)?;
            work.tensors_mut()[ti].data[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            match rel_err(analytic.tensors()[ti].data[e], numeric) {
                Some(r) => {
                    check.checked += 1;
                    check.max_rel_err = check.max_rel_err.max(r);
                }
                None => check.skipped += 1,
            }
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_err })
}

/// Checks [`loss_and_grads`] on `batch`, restricted to the tensors the
/// batch's loss depends on.
pub fn grad_check(
    batch: Batch<'_>,
    params: &ModelParams,
    opts: LossOptions,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let out = loss_and_grads(batch, params, opts)?;
    let parts: &[Part] = match batch {
        Batch::Pretrain(_) => &[Part::Encoder, Part::MaeDecoder],
        Batch::Finetune(_) => &[Part::Encoder, Part::ActionDecoder],
    };
    check_gradients(params, &out.grads, |p| loss_only(batch, p, opts), parts, eps, samples, seed)
}

/// Reports for both loss paths of one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresetReport {
    pub pretrain: GradCheckReport,
    pub finetune: GradCheckReport,
}

impl PresetReport {
    pub fn max_rel_err(&self) -> f64 {
        self.pretrain.max_rel_err.max(self.finetune.max_rel_err)
    }
}

/// Gradient check of freshly initialized `cfg` parameters on `batch`
/// procedural scenes per loss path, at the default eps and sample count.
pub fn gradcheck_preset(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<PresetReport> {
    let params = ModelParams::init(cfg)?;
    let spec = CorpusSpec::default();
    let n = cfg.tokens_per_view();
    let mut pre = Vec::with_capacity(batch);
    let mut fine = Vec::with_capacity(batch);
    for i in 0..batch as u64 {
        let s = seed.wrapping_add(i);
        let (cloud, _) = gen_scene(s, &spec)?;
        let obs = render_all(&cloud, cfg.width, cfg.height);
        let plan = sample_mask(n, 0.75, cfg.strategy, s)?;
        pre.push(PretrainSample::new(&obs, &plan, cfg.patch)?);
        let demo = Demo::generate(s ^ 0x5eed, &spec)?;
        let obs = render_all(&demo.cloud, cfg.width, cfg.height);
        fine.push(FinetuneSample::new(&obs, cfg.patch, demo.goal, demo.action)?);
    }
    let opts = LossOptions::default();
    Ok(PresetReport {
        pretrain: grad_check(Batch::Pretrain(&pre), &params, opts, GRADCHECK_EPS, GRADCHECK_SAMPLES, seed)?,
        finetune: grad_check(Batch::Finetune(&fine), &params, opts, GRADCHECK_EPS, GRADCHECK_SAMPLES, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn rel_err_rule() {
        assert_eq!(rel_err(0.0, 5e-11), None);
        assert_eq!(rel_err(1.0, 1.0), Some(0.0));
        assert!((rel_err(1.0, 0.999).unwrap() - 1e-3).abs() < 1e-12);
        assert_eq!(rel_err(1e-9, 0.0), Some(1.0));
    }

    #[test]
    fn constant_loss_skips_every_pair() {
        let cfg = ModelConfig {
            hidden: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            patch: 2,
            width: 4,
            height: 4,
            ..ModelConfig::desk()
        };
        let p = ModelParams::init(&cfg).unwrap().zeros_like();
        let parts = [Part::Encoder, Part::MaeDecoder, Part::ActionDecoder];
        let r = check_gradients(&p, &p, |_| Ok(0.25), &parts, GRADCHECK_EPS, 8, 1).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.tensors.iter().all(|t| t.checked == 0 && t.skipped > 0));
    }

    #[test]
    fn quadratic_in_one_tensor_is_exact() {
        let cfg = ModelConfig {
            hidden: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            patch: 2,
            width: 4,
            height: 4,
            ..ModelConfig::desk()
        };
        let p = ModelParams::init(&cfg).unwrap();
        let mut g = p.zeros_like();
        let w = p.get("mae_head.w").unwrap().data.clone();
        g.get_mut("mae_head.w").unwrap().data = w.iter().map(|v| 2.0 * v).collect();
        let loss = |q: &ModelParams| Ok(q.get("mae_head.w").unwrap().data.iter().map(|v| v * v).sum());
        let r = check_gradients(&p, &g, loss, &[Part::MaeDecoder], GRADCHECK_EPS, 8, 3).unwrap();
        let head = r.tensors.iter().find(|t| t.name == "mae_head.w").unwrap();
        assert_eq!(head.checked, 8);
        assert!(r.max_rel_err < 1e-8);
    }
}
