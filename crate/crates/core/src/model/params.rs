//! Model configuration, the named parameter table and its initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patches::{check_patch, MaskStrategy};
use crate::pointcloud::PALETTE;
use crate::renderer::{CHANNELS, NUM_VIEWS};

/// Width of the action head output: 3 position, 4 quaternion, 1 open logit.
pub const ACTION_DIM: usize = 8;
pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub width: usize,
    pub height: usize,
    pub goal_vocab: usize,
    /// Fixes the reconstruction head width (3 or 10 channels per pixel).
    pub strategy: MaskStrategy,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            enc_layers: 2,
            dec_layers: 1,
            heads: 4,
            patch: 8,
            width: 64,
            height: 64,
            goal_vocab: PALETTE.len(),
            strategy: MaskStrategy::RgbOnly,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            hidden: 1024,
            enc_layers: 8,
            dec_layers: 2,
            heads: 8,
            patch: 10,
            width: 220,
            height: 220,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.goal_vocab == 0 {
            return Err(Error::Config("goal vocabulary must be non-empty".into()));
        }
        check_patch(self.width, self.height, self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.width / self.patch, self.height / self.patch)
    }

    /// Tokens per view, `N`.
    pub fn tokens_per_view(&self) -> usize {
        let (w, h) = self.grid_dims();
        w * h
    }

    /// Sequence length of the encoder, `5 N`.
    pub fn seq_len(&self) -> usize {
        NUM_VIEWS * self.tokens_per_view()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Per-token width of the reconstruction head.
    pub fn mae_out_dim(&self) -> usize {
        self.patch * self.patch * self.strategy.channels()
    }

    /// Fields that must agree for encoder weights to be interchangeable.
    pub fn encoder_mismatches(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut cmp = |name: &str, a: usize, b: usize| {
            if a != b {
                out.push(format!("model.{name} ({a} vs {b})"));
            }
        };
        cmp("hidden", self.hidden, other.hidden);
        cmp("enc_layers", self.enc_layers, other.enc_layers);
        cmp("heads", self.heads, other.heads);
        cmp("patch", self.patch, other.patch);
        cmp("width", self.width, other.width);
        cmp("height", self.height, other.height);
        out
    }
}

/// Which sub-network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Encoder,
    MaeDecoder,
    ActionDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIdx {
    pub ln1: NormIdx,
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub ln2: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub patch: LinearIdx,
    pub mask_emb: usize,
    pub view_emb: usize,
    pub pos_emb: usize,
    pub enc: Vec<BlockIdx>,
    pub enc_norm: NormIdx,
    pub dec: Vec<BlockIdx>,
    pub dec_norm: NormIdx,
    pub mae_head: LinearIdx,
    pub goal_emb: usize,
    pub act_block: BlockIdx,
    pub act_norm: NormIdx,
    pub act_head: LinearIdx,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    part: Part,
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
    part: Part,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec {
            name,
            shape,
            part: self.part,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> LinearIdx {
        LinearIdx {
            w: self.tensor(format!("{name}.w"), vec![in_dim, out_dim], Init::Normal),
            b: self.tensor(format!("{name}.b"), vec![out_dim], Init::Zeros),
            in_dim,
            out_dim,
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormIdx {
        NormIdx {
            g: self.tensor(format!("{name}.g"), vec![dim], Init::Ones),
            b: self.tensor(format!("{name}.b"), vec![dim], Init::Zeros),
        }
    }

    fn block(&mut self, name: &str, h: usize) -> BlockIdx {
        BlockIdx {
            ln1: self.norm(&format!("{name}.ln1"), h),
            q: self.linear(&format!("{name}.attn.q"), h, h),
            k: self.linear(&format!("{name}.attn.k"), h, h),
            v: self.linear(&format!("{name}.attn.v"), h, h),
            o: self.linear(&format!("{name}.attn.o"), h, h),
            ln2: self.norm(&format!("{name}.ln2"), h),
            fc1: self.linear(&format!("{name}.mlp.fc1"), h, MLP_RATIO * h),
            fc2: self.linear(&format!("{name}.mlp.fc2"), MLP_RATIO * h, h),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let h = cfg.hidden;
    let mut b = Builder {
        specs: Vec::new(),
        part: Part::Encoder,
    };
    let patch = b.linear("patch", cfg.token_dim(), h);
    let mask_emb = b.tensor("mask_emb".into(), vec![h], Init::Normal);
    let view_emb = b.tensor("view_emb".into(), vec![NUM_VIEWS, h], Init::Normal);
    let pos_emb = b.tensor("pos_emb".into(), vec![cfg.tokens_per_view(), h], Init::Normal);
    let enc = (0..cfg.enc_layers)
        .map(|i| b.block(&format!("enc.{i}"), h))
        .collect();
    let enc_norm = b.norm("enc_norm", h);

    b.part = Part::MaeDecoder;
    let dec = (0..cfg.dec_layers)
        .map(|i| b.block(&format!("dec.{i}"), h))
        .collect();
    let dec_norm = b.norm("dec_norm", h);
    let mae_head = b.linear("mae_head", h, cfg.mae_out_dim());

    b.part = Part::ActionDecoder;
    let goal_emb = b.tensor("goal_emb".into(), vec![cfg.goal_vocab, h], Init::Normal);
    let act_block = b.block("act", h);
    let act_norm = b.norm("act_norm", h);
    let act_head = b.linear("act_head", h, ACTION_DIM);

    (
        Layout {
            patch,
            mask_emb,
            view_emb,
            pos_emb,
            enc,
            enc_norm,
            dec,
            dec_norm,
            mae_head,
            goal_emb,
            act_block,
            act_norm,
            act_head,
        },
        b.specs,
    )
}

/// Total learned scalars for a configuration, without allocating them.
pub fn param_count(cfg: &ModelConfig) -> usize {
    build_layout(cfg)
        .1
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub part: Part,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Every learned tensor of the encoder, reconstruction decoder and action
/// decoder, in a fixed registration order. Gradients use the same type.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    pub(crate) layout: Layout,
    tensors: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl ModelParams {
    /// Truncated-normal (±2 std) weights and embeddings, zero biases and
    /// norm offsets, unit norm scales; rounded to `f32` precision.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal => (0..n)
                        .map(|_| loop {
                            let z: f64 = rng.sample(StandardNormal);
                            if z.abs() <= 2.0 {
                                break f64::from((z * INIT_STD) as f32);
                            }
                        })
                        .collect(),
                };
                Tensor {
                    name: s.name,
                    shape: s.shape,
                    part: s.part,
                    data,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data.fill(0.0);
        }
        out
    }

    /// Builds parameters from tensors given in registration order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let tensors = specs
            .into_iter()
            .zip(tensors)
            .map(|(s, (name, shape, data))| {
                if s.name != name || s.shape != shape || data.len() != shape.iter().product::<usize>() {
                    return Err(Error::Shape(format!(
                        "tensor '{name}' {shape:?} does not match expected '{}' {:?}",
                        s.name, s.shape
                    )));
                }
                Ok(Tensor {
                    name,
                    shape,
                    part: s.part,
                    data,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    #[inline]
    pub(crate) fn data(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    /// Rounds every entry to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// Copies all tensors of `part` from `other`, which must share the
    /// same names and shapes for that part.
    pub fn copy_part_from(&mut self, other: &ModelParams, part: Part) -> Result<()> {
        let src: Vec<&Tensor> = other.tensors.iter().filter(|t| t.part == part).collect();
        let dst: Vec<&mut Tensor> = self.tensors.iter_mut().filter(|t| t.part == part).collect();
        if src.len() != dst.len() {
            return Err(Error::Shape("parameter parts differ in tensor count".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.name != s.name || d.shape != s.shape {
                return Err(Error::Shape(format!(
                    "tensor '{}' {:?} vs '{}' {:?}",
                    d.name, d.shape, s.name, s.shape
                )));
            }
            d.data.copy_from_slice(&s.data);
        }
        Ok(())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }
}
