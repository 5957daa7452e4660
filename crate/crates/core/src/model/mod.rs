//! Multi-view transformer: encoder, reconstruction decoder, action decoder,
//! their losses and exact reverse-mode gradients.
//!
//! The encoder embeds every token of all five views (masked ones included,
//! with their hidden channels zeroed and a learned mask embedding added),
//! then runs full self-attention over the joint `5 N` sequence. The
//! reconstruction decoder maps the latent rows back to per-patch pixels; the
//! action decoder appends a goal token and reads the action off its row.

mod layers;
pub(crate) mod linalg;
mod params;

pub use params::{param_count, ModelConfig, ModelParams, Part, Tensor, ACTION_DIM, INIT_STD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::{apply_mask, detokenize, tokenize_all, MaskPlan, MaskStrategy, MaskedTokens};
use crate::renderer::{MultiViewObservation, CHANNELS, NUM_VIEWS};
use layers::{add_into, block_bwd, block_fwd, linear_bwd, linear_fwd, norm_bwd, norm_fwd, BlockCache, NormCache};

/// Encoder output, `(5 N) x H`, view-major rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTokens {
    pub rows: usize,
    pub hidden: usize,
    pub data: Vec<f64>,
}

impl LatentTokens {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.hidden..(r + 1) * self.hidden]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalToken(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyAction {
    pub pos: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rot: [f64; 4],
    /// Probability the gripper is open.
    pub open: f64,
}

/// Reconstructed channel planes per view, each `H x W x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPredictions {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub views: [Vec<f64>; NUM_VIEWS],
}

struct EncoderCache {
    blocks: Vec<BlockCache>,
    norm: NormCache,
}

fn check_input(input: &MaskedTokens, cfg: &ModelConfig) -> Result<()> {
    if input.token_dim != cfg.token_dim()
        || input.tokens_per_view != cfg.tokens_per_view()
        || input.tokens.len() != cfg.seq_len() * cfg.token_dim()
        || input.flags.len() != cfg.seq_len()
    {
        return Err(Error::Shape(format!(
            "input of {} tokens x {} does not match model {} x {}",
            input.flags.len(),
            input.token_dim,
            cfg.seq_len(),
            cfg.token_dim()
        )));
    }
    if input.tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input".into()));
    }
    Ok(())
}

fn encoder_fwd(p: &ModelParams, input: &MaskedTokens) -> Result<(Vec<f64>, EncoderCache)> {
    let cfg = p.config();
    check_input(input, cfg)?;
    let l = &p.layout;
    let (t, h, n) = (cfg.seq_len(), cfg.hidden, cfg.tokens_per_view());

    let mut x = linear_fwd(p, l.patch, &input.tokens, t);
    let (pos, view, mask) = (p.data(l.pos_emb), p.data(l.view_emb), p.data(l.mask_emb));
    for (r, row) in x.chunks_exact_mut(h).enumerate() {
        add_into(row, &pos[(r % n) * h..(r % n + 1) * h]);
        add_into(row, &view[(r / n) * h..(r / n + 1) * h]);
        if input.flags[r] {
            add_into(row, mask);
        }
    }
    let mut blocks = Vec::with_capacity(l.enc.len());
    for b in &l.enc {
        let (y, cache) = block_fwd(p, b, cfg.heads, &x, t);
        blocks.push(cache);
        x = y;
    }
    let (z, norm) = norm_fwd(p, l.enc_norm, &x, h);
    Ok((z, EncoderCache { blocks, norm }))
}

fn encoder_bwd(p: &ModelParams, g: &mut ModelParams, input: &MaskedTokens, cache: &EncoderCache, dz: &[f64]) {
    let cfg = p.config();
    let l = &p.layout;
    let (t, h, n) = (cfg.seq_len(), cfg.hidden, cfg.tokens_per_view());
    let mut dx = norm_bwd(p, g, l.enc_norm, &cache.norm, dz, h);
    for (b, c) in l.enc.iter().zip(&cache.blocks).rev() {
        dx = block_bwd(p, g, b, cfg.heads, c, &dx);
    }
    for (r, row) in dx.chunks_exact(h).enumerate() {
        add_into(&mut g.data_mut(l.pos_emb)[(r % n) * h..(r % n + 1) * h], row);
        add_into(&mut g.data_mut(l.view_emb)[(r / n) * h..(r / n + 1) * h], row);
        if input.flags[r] {
            add_into(g.data_mut(l.mask_emb), row);
        }
    }
    linear_bwd(p, g, l.patch, &input.tokens, &dx, t);
}

/// Runs the encoder on masked inputs.
pub fn encode(input: &MaskedTokens, params: &ModelParams) -> Result<LatentTokens> {
    let (z, _) = encoder_fwd(params, input)?;
    Ok(LatentTokens {
        rows: params.config().seq_len(),
        hidden: params.config().hidden,
        data: z,
    })
}

/// Like [`encode`], also returning each encoder layer's attention
/// probabilities (`heads x 5N x 5N`).
pub fn encode_traced(input: &MaskedTokens, params: &ModelParams) -> Result<(LatentTokens, Vec<Vec<f64>>)> {
    let (z, cache) = encoder_fwd(params, input)?;
    let probs = cache.blocks.into_iter().map(|c| c.probs).collect();
    Ok((
        LatentTokens {
            rows: params.config().seq_len(),
            hidden: params.config().hidden,
            data: z,
        },
        probs,
    ))
}

struct DecoderCache {
    blocks: Vec<BlockCache>,
    norm: NormCache,
    normed: Vec<f64>,
}

fn check_latent(z: &LatentTokens, cfg: &ModelConfig) -> Result<()> {
    if z.rows != cfg.seq_len() || z.hidden != cfg.hidden || z.data.len() != z.rows * z.hidden {
        return Err(Error::Shape(format!(
            "latent {}x{} does not match model {}x{}",
            z.rows,
            z.hidden,
            cfg.seq_len(),
            cfg.hidden
        )));
    }
    Ok(())
}

/// Per-token predictions, `(5 N) x (P * P * C')`.
fn decoder_fwd(p: &ModelParams, z: &[f64]) -> (Vec<f64>, DecoderCache) {
    let cfg = p.config();
    let l = &p.layout;
    let t = cfg.seq_len();
    let mut x = z.to_vec();
    let mut blocks = Vec::with_capacity(l.dec.len());
    for b in &l.dec {
        let (y, cache) = block_fwd(p, b, cfg.heads, &x, t);
        blocks.push(cache);
        x = y;
    }
    let (normed, norm) = norm_fwd(p, l.dec_norm, &x, cfg.hidden);
    let pred = linear_fwd(p, l.mae_head, &normed, t);
    (pred, DecoderCache { blocks, norm, normed })
}

fn decoder_bwd(p: &ModelParams, g: &mut ModelParams, cache: &DecoderCache, dpred: &[f64]) -> Vec<f64> {
    let cfg = p.config();
    let l = &p.layout;
    let dnormed = linear_bwd(p, g, l.mae_head, &cache.normed, dpred, cfg.seq_len());
    let mut dx = norm_bwd(p, g, l.dec_norm, &cache.norm, &dnormed, cfg.hidden);
    for (b, c) in l.dec.iter().zip(&cache.blocks).rev() {
        dx = block_bwd(p, g, b, cfg.heads, c, &dx);
    }
    dx
}

fn predictions_from_tokens(cfg: &ModelConfig, pred: &[f64]) -> Result<ViewPredictions> {
    let n = cfg.tokens_per_view();
    let d = cfg.mae_out_dim();
    let channels = cfg.strategy.channels();
    let mut views = Vec::with_capacity(NUM_VIEWS);
    for v in 0..NUM_VIEWS {
        views.push(detokenize(&pred[v * n * d..(v + 1) * n * d], cfg.grid_dims(), cfg.patch, channels)?);
    }
    Ok(ViewPredictions {
        width: cfg.width,
        height: cfg.height,
        channels,
        views: views.try_into().expect("five views"),
    })
}

/// Reconstructs the strategy's channels of all five views from `z`.
pub fn mae_decode(z: &LatentTokens, params: &ModelParams, strategy: MaskStrategy) -> Result<ViewPredictions> {
    let cfg = params.config();
    if strategy != cfg.strategy {
        return Err(Error::Shape(format!(
            "reconstruction head predicts {} but {} was requested",
            cfg.strategy, strategy
        )));
    }
    check_latent(z, cfg)?;
    let (pred, _) = decoder_fwd(params, &z.data);
    predictions_from_tokens(cfg, &pred)
}

/// Mean over all `5 W H` pixels of the squared error on the strategy's
/// channels.
pub fn recon_loss(pred: &ViewPredictions, target: &MultiViewObservation, strategy: MaskStrategy) -> Result<f64> {
    let c = strategy.channels();
    let (w, h) = (target.width(), target.height());
    if pred.channels != c || pred.width != w || pred.height != h {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs target {w}x{h}x{c}",
            pred.width, pred.height, pred.channels
        )));
    }
    let mut total = 0.0;
    for (pv, tv) in pred.views.iter().zip(&target.views) {
        if pv.len() != w * h * c {
            return Err(Error::Shape("prediction plane has the wrong length".into()));
        }
        for (pp, tp) in pv.chunks_exact(c).zip(tv.data.chunks_exact(CHANNELS)) {
            for k in 0..c {
                let d = pp[k] - tp[k];
                total += d * d;
            }
        }
    }
    Ok(total / (NUM_VIEWS * w * h) as f64)
}

struct ActionCache {
    block: BlockCache,
    norm: NormCache,
    normed: Vec<f64>,
    out: Vec<f64>,
}

fn action_fwd(p: &ModelParams, z: &[f64], goal: GoalToken) -> Result<ActionCache> {
    let cfg = p.config();
    if goal.0 >= cfg.goal_vocab {
        return Err(Error::Shape(format!(
            "goal {} outside vocabulary of {}",
            goal.0, cfg.goal_vocab
        )));
    }
    let l = &p.layout;
    let h = cfg.hidden;
    let rows = cfg.seq_len() + 1;
    let mut seq = Vec::with_capacity(rows * h);
    seq.extend_from_slice(z);
    seq.extend_from_slice(&p.data(l.goal_emb)[goal.0 * h..(goal.0 + 1) * h]);
    let (y, block) = block_fwd(p, &l.act_block, cfg.heads, &seq, rows);
    let (normed, norm) = norm_fwd(p, l.act_norm, &y[(rows - 1) * h..], h);
    let out = linear_fwd(p, l.act_head, &normed, 1);
    Ok(ActionCache {
        block,
        norm,
        normed,
        out,
    })
}

/// Returns the gradient with respect to `z`.
fn action_bwd(p: &ModelParams, g: &mut ModelParams, cache: &ActionCache, goal: GoalToken, dout: &[f64]) -> Vec<f64> {
    let cfg = p.config();
    let l = &p.layout;
    let h = cfg.hidden;
    let rows = cfg.seq_len() + 1;
    let dnormed = linear_bwd(p, g, l.act_head, &cache.normed, dout, 1);
    let dlast = norm_bwd(p, g, l.act_norm, &cache.norm, &dnormed, h);
    let mut dy = vec![0.0; rows * h];
    dy[(rows - 1) * h..].copy_from_slice(&dlast);
    let mut dseq = block_bwd(p, g, &l.act_block, cfg.heads, &cache.block, &dy);
    add_into(
        &mut g.data_mut(l.goal_emb)[goal.0 * h..(goal.0 + 1) * h],
        &dseq[(rows - 1) * h..],
    );
    dseq.truncate((rows - 1) * h);
    dseq
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn action_from_output(out: &[f64]) -> ToyAction {
    let r = [out[3], out[4], out[5], out[6]];
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rot = if norm > 0.0 {
        r.map(|v| v / norm)
    } else {
        [1.0, 0.0, 0.0, 0.0]
    };
    ToyAction {
        pos: [out[0], out[1], out[2]],
        rot,
        open: sigmoid(out[7]),
    }
}

pub fn action_decode(z: &LatentTokens, goal: GoalToken, params: &ModelParams) -> Result<ToyAction> {
    check_latent(z, params.config())?;
    let cache = action_fwd(params, &z.data, goal)?;
    Ok(action_from_output(&cache.out))
}

/// One reconstruction example: masked encoder input and the unmasked
/// target tokens restricted to the strategy's channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub input: MaskedTokens,
    /// `(5 N) x (P * P * C')`.
    pub target: Vec<f64>,
}

impl PretrainSample {
    pub fn new(obs: &MultiViewObservation, plan: &MaskPlan, patch: usize) -> Result<Self> {
        let grids = tokenize_all(obs, patch)?;
        let input = apply_mask(&grids, plan)?;
        let c = plan.strategy.channels();
        let target = grids
            .iter()
            .flat_map(|g| g.tokens.chunks_exact(CHANNELS).flat_map(|px| px[..c].to_vec()))
            .collect();
        Ok(Self { input, target })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSample {
    pub input: MaskedTokens,
    pub goal: GoalToken,
    pub action: ToyAction,
}

impl FinetuneSample {
    pub fn new(obs: &MultiViewObservation, patch: usize, goal: GoalToken, action: ToyAction) -> Result<Self> {
        let grids = tokenize_all(obs, patch)?;
        let plan = MaskPlan::none(grids[0].len(), MaskStrategy::RgbOnly);
        Ok(Self {
            input: apply_mask(&grids, &plan)?,
            goal,
            action,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Pretrain(&'a [PretrainSample]),
    Finetune(&'a [FinetuneSample]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Pretrain(s) => s.len(),
            Batch::Finetune(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Restrict the reconstruction loss to masked patches.
    pub masked_only: bool,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Batch mean of the per-sample loss.
    pub loss: f64,
    /// Batch mean of the per-pixel error on masked patches; `None` when
    /// nothing was masked.
    pub masked_mse: Option<f64>,
    pub grads: ModelParams,
}

/// Per-sample reconstruction loss against target tokens and its gradient
/// with respect to the predictions.
fn pretrain_terms(cfg: &ModelConfig, sample: &PretrainSample, pred: &[f64], opts: LossOptions) -> Result<(f64, Option<f64>, Vec<f64>)> {
    let d = cfg.mae_out_dim();
    let pp = (cfg.patch * cfg.patch) as f64;
    if sample.target.len() != pred.len() {
        return Err(Error::Shape(format!(
            "target has {} entries, predictions {}",
            sample.target.len(),
            pred.len()
        )));
    }
    let mut all = 0.0;
    let mut masked = 0.0;
    let n_masked = sample.input.flags.iter().filter(|f| **f).count();
    let diff: Vec<f64> = pred.iter().zip(&sample.target).map(|(a, b)| a - b).collect();
    for (row, &flag) in diff.chunks_exact(d).zip(&sample.input.flags) {
        let s: f64 = row.iter().map(|v| v * v).sum();
        all += s;
        if flag {
            masked += s;
        }
    }
    let masked_mse = (n_masked > 0).then(|| masked / (n_masked as f64 * pp));
    let mut dpred = diff;
    let loss = if opts.masked_only {
        if n_masked == 0 {
            dpred.fill(0.0);
            0.0
        } else {
            let denom = n_masked as f64 * pp;
            for (row, &flag) in dpred.chunks_exact_mut(d).zip(&sample.input.flags) {
                let k = if flag { 2.0 / denom } else { 0.0 };
                row.iter_mut().for_each(|v| *v *= k);
            }
            masked / denom
        }
    } else {
        let denom = cfg.seq_len() as f64 * pp;
        dpred.iter_mut().for_each(|v| *v *= 2.0 / denom);
        all / denom
    };
    Ok((loss, masked_mse, dpred))
}

/// Per-sample `(loss, masked_mse)` and gradients.
type SampleResult = ((f64, Option<f64>), ModelParams);

/// Action loss `|pos - pos*|^2 + (1 - |<q, q*>|) + BCE(open, open*)` and
/// its gradient with respect to the raw head output.
fn finetune_terms(out: &[f64], target: &ToyAction) -> (f64, [f64; ACTION_DIM]) {
    let action = action_from_output(out);
    let mut grad = [0.0; ACTION_DIM];
    let mut loss = 0.0;
    for (k, (p, t)) in action.pos.iter().zip(&target.pos).enumerate() {
        let d = p - t;
        loss += d * d;
        grad[k] = 2.0 * d;
    }
    let q = action.rot;
    let dot: f64 = q.iter().zip(&target.rot).map(|(a, b)| a * b).sum();
    loss += 1.0 - dot.abs();
    let sign = if dot >= 0.0 { 1.0 } else { -1.0 };
    let dq = target.rot.map(|v| -sign * v);
    let norm = out[3..7].iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        let qdq: f64 = q.iter().zip(&dq).map(|(a, b)| a * b).sum();
        for k in 0..4 {
            grad[3 + k] = (dq[k] - q[k] * qdq) / norm;
        }
    }
    let logit = out[7];
    let y = target.open;
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    loss += softplus - y * logit;
    grad[7] = sigmoid(logit) - y;
    (loss, grad)
}

/// Loss of one sample scaled by `scale`, with gradients accumulated into
/// `grads`.
fn sample_loss_and_grads(
    batch: Batch<'_>,
    i: usize,
    params: &ModelParams,
    opts: LossOptions,
    scale: f64,
    grads: &mut ModelParams,
) -> Result<(f64, Option<f64>)> {
    match batch {
        Batch::Pretrain(samples) => {
            let s = &samples[i];
            let (z, enc) = encoder_fwd(params, &s.input)?;
            let (pred, dec) = decoder_fwd(params, &z);
            let (l, m, mut dpred) = pretrain_terms(params.config(), s, &pred, opts)?;
            dpred.iter_mut().for_each(|v| *v *= scale);
            let dz = decoder_bwd(params, grads, &dec, &dpred);
            encoder_bwd(params, grads, &s.input, &enc, &dz);
            Ok((l * scale, m))
        }
        Batch::Finetune(samples) => {
            let s = &samples[i];
            let (z, enc) = encoder_fwd(params, &s.input)?;
            let act = action_fwd(params, &z, s.goal)?;
            let (l, mut dout) = finetune_terms(&act.out, &s.action);
            dout.iter_mut().for_each(|v| *v *= scale);
            let dz = action_bwd(params, grads, &act, s.goal, &dout);
            encoder_bwd(params, grads, &s.input, &enc, &dz);
            Ok((l * scale, None))
        }
    }
}

/// Mean loss over the batch and exact gradients for every tensor. Tensors
/// the mode does not touch get zero gradients.
pub fn loss_and_grads(batch: Batch<'_>, params: &ModelParams, opts: LossOptions) -> Result<LossOutput> {
    loss_and_grads_parallel(batch, params, opts, 1)
}

/// [`loss_and_grads`] with up to `workers` samples in flight at once.
/// Per-sample results are reduced in batch order, so the output is
/// bit-identical for every worker count.
pub fn loss_and_grads_parallel(
    batch: Batch<'_>,
    params: &ModelParams,
    opts: LossOptions,
    workers: usize,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let workers = workers.clamp(1, batch.len());
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut masked_sum = 0.0;
    let mut masked_n = 0usize;
    let mut reduce = |(l, m): (f64, Option<f64>)| {
        loss += l;
        if let Some(m) = m {
            masked_sum += m;
            masked_n += 1;
        }
    };
    if workers == 1 {
        for i in 0..batch.len() {
            let mut g = params.zeros_like();
            reduce(sample_loss_and_grads(batch, i, params, opts, scale, &mut g)?);
            grads.add_scaled(&g, 1.0);
        }
    } else {
        let indices: Vec<usize> = (0..batch.len()).collect();
        for wave in indices.chunks(workers) {
            let results: Vec<Result<SampleResult>> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&i| {
                        scope.spawn(move || {
                            let mut g = params.zeros_like();
                            sample_loss_and_grads(batch, i, params, opts, scale, &mut g).map(|r| (r, g))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            for r in results {
                let (terms, g) = r?;
                reduce(terms);
                grads.add_scaled(&g, 1.0);
            }
        }
    }
    if !loss.is_finite() {
        let name = params.first_non_finite().unwrap_or("loss");
        return Err(Error::NonFinite(name.to_string()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok(LossOutput {
        loss,
        masked_mse: (masked_n > 0).then(|| masked_sum / masked_n as f64),
        grads,
    })
}

/// Loss only, without gradients; used by finite-difference checks.
pub fn loss_only(batch: Batch<'_>, params: &ModelParams, opts: LossOptions) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let cfg = params.config();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    match batch {
        Batch::Pretrain(samples) => {
            for s in samples {
                let (z, _) = encoder_fwd(params, &s.input)?;
                let (pred, _) = decoder_fwd(params, &z);
                loss += pretrain_terms(cfg, s, &pred, opts)?.0 * scale;
            }
        }
        Batch::Finetune(samples) => {
            for s in samples {
                let (z, _) = encoder_fwd(params, &s.input)?;
                let act = action_fwd(params, &z, s.goal)?;
                loss += finetune_terms(&act.out, &s.action).0 * scale;
            }
        }
    }
    Ok(loss)
}
