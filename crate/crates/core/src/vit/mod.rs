//! Toy-scale Vision Transformer backbone.

mod checkpoint;
mod forward;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint,
    write_checkpoint,
};
pub use forward::{
    attend, embed, encode_batch, encode_stage1, encoder_block, feed_forward, patchify,
    patchify_batch, unpatchify, BlockVars, ParamVars, TokenSequence,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// How the final block turns a (swapped) token sequence into a CLS vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinalAttention {
    /// Only the CLS token issues an attention query.
    #[default]
    ClassAttention,
    /// Run the whole block on every token and read back the CLS row.
    FullSelfAttention,
}

/// How per-class query/prototype CLS vectors are combined into scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreForm {
    /// `score(j) = Σ_i cos(q_i, p_j)` over every class-conditioned query vector.
    #[default]
    Summed,
    /// `score(j) = cos(q_j, p_j)`.
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismConfig {
    #[serde(default)]
    pub final_attention: FinalAttention,
    /// Wrap the final attention + FFN in the block's pre-norm residual structure.
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default)]
    pub score: ScoreForm,
}

fn default_true() -> bool {
    true
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            final_attention: FinalAttention::ClassAttention,
            residual: true,
            score: ScoreForm::Summed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Softmax scale applied to class scores before normalisation.
    pub temperature: f64,
    #[serde(default)]
    pub mechanism: MechanismConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32×32×3 images, 8-pixel patches, 4 blocks of width 64.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            temperature: 10.0,
            mechanism: MechanismConfig::default(),
        }
    }

    /// Smallest useful model: 8×8 images, four patches, two blocks of width 8.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            temperature: 10.0,
            mechanism: MechanismConfig::default(),
        }
    }

    /// ViT-Small geometry at 224 px with 16-pixel patches.
    pub fn vit_small() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            depth: 12,
            dim: 384,
            heads: 6,
            mlp_ratio: 4,
            temperature: 10.0,
            mechanism: MechanismConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return err("image_size, patch_size and channels must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.depth < 2 {
            return err(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    /// Patches per image.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let h = self.hidden_dim();
        let stem = self.patch_dim() * d + d + d + (self.num_patches() + 1) * d;
        let block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
        stem + self.depth * block
    }
}

/// Position of a tensor within a transformer block's parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockParam {
    Ln1Gamma,
    Ln1Beta,
    Wq,
    Bq,
    Wk,
    Bk,
    Wv,
    Bv,
    Wo,
    Bo,
    Ln2Gamma,
    Ln2Beta,
    W1,
    B1,
    W2,
    B2,
}

impl BlockParam {
    pub const ALL: [BlockParam; 16] = [
        BlockParam::Ln1Gamma,
        BlockParam::Ln1Beta,
        BlockParam::Wq,
        BlockParam::Bq,
        BlockParam::Wk,
        BlockParam::Bk,
        BlockParam::Wv,
        BlockParam::Bv,
        BlockParam::Wo,
        BlockParam::Bo,
        BlockParam::Ln2Gamma,
        BlockParam::Ln2Beta,
        BlockParam::W1,
        BlockParam::B1,
        BlockParam::W2,
        BlockParam::B2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockParam::Ln1Gamma => "ln1.gamma",
            BlockParam::Ln1Beta => "ln1.beta",
            BlockParam::Wq => "attn.wq",
            BlockParam::Bq => "attn.bq",
            BlockParam::Wk => "attn.wk",
            BlockParam::Bk => "attn.bk",
            BlockParam::Wv => "attn.wv",
            BlockParam::Bv => "attn.bv",
            BlockParam::Wo => "attn.wo",
            BlockParam::Bo => "attn.bo",
            BlockParam::Ln2Gamma => "ln2.gamma",
            BlockParam::Ln2Beta => "ln2.beta",
            BlockParam::W1 => "ffn.w1",
            BlockParam::B1 => "ffn.b1",
            BlockParam::W2 => "ffn.w2",
            BlockParam::B2 => "ffn.b2",
        }
    }

    fn shape(self, cfg: &ModelConfig) -> Vec<usize> {
        let d = cfg.dim;
        let h = cfg.hidden_dim();
        match self {
            BlockParam::Wq | BlockParam::Wk | BlockParam::Wv | BlockParam::Wo => vec![d, d],
            BlockParam::W1 => vec![d, h],
            BlockParam::B1 => vec![h],
            BlockParam::W2 => vec![h, d],
            _ => vec![d],
        }
    }
}

pub const PATCH_WEIGHT: usize = 0;
pub const PATCH_BIAS: usize = 1;
pub const CLS_TOKEN: usize = 2;
pub const POS_EMBED: usize = 3;
const STEM_LEN: usize = 4;

/// Flat index of a block parameter in [`ModelParams`] order.
pub fn block_param_index(block: usize, p: BlockParam) -> usize {
    STEM_LEN + block * BlockParam::ALL.len() + p as usize
}

/// Every learnable tensor of the model, stored in a fixed order: patch
/// projection weight and bias, CLS token, positional table, then each block's
/// sixteen tensors in [`BlockParam::ALL`] order. The same order is used for
/// checkpoints, optimiser state and trainable masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Truncated-normal (±2σ, σ = 0.02) weights and CLS token, N(0, 0.02²)
    /// positional table, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut trunc = |shape: &[usize]| -> Tensor {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                })
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let d = config.dim;
        let mut tensors = vec![
            trunc(&[config.patch_dim(), d]),
            Tensor::zeros(&[d]),
            trunc(&[d]),
        ];
        let pos_shape = [config.num_patches() + 1, d];
        let pos = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let n = pos_shape.iter().product();
            Tensor::new(
                pos_shape.to_vec(),
                (0..n).map(|_| normal.sample(&mut rng)).collect(),
            )
            .unwrap()
        };
        tensors.push(pos);
        for _ in 0..config.depth {
            for p in BlockParam::ALL {
                let shape = p.shape(config);
                tensors.push(match p {
                    BlockParam::Ln1Gamma | BlockParam::Ln2Gamma => Tensor::ones(&shape),
                    BlockParam::Wq
                    | BlockParam::Wk
                    | BlockParam::Wv
                    | BlockParam::Wo
                    | BlockParam::W1
                    | BlockParam::W2 => trunc(&shape),
                    _ => Tensor::zeros(&shape),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Builds params from tensors in canonical order, validating every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if shapes.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in param_names(&config).iter().zip(&shapes).zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the inference-time settings (temperature and mechanism flags);
    /// the architecture must stay the same.
    pub fn set_mechanism(&mut self, mechanism: MechanismConfig, temperature: f64) {
        self.config.mechanism = mechanism;
        self.config.temperature = temperature;
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn block(&self, block: usize, p: BlockParam) -> &Tensor {
        &self.tensors[block_param_index(block, p)]
    }

    pub fn block_mut(&mut self, block: usize, p: BlockParam) -> &mut Tensor {
        &mut self.tensors[block_param_index(block, p)]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the raw bits of every parameter, in canonical order.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Parameter names in canonical order.
pub fn param_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec![
        "patch_proj.weight".to_string(),
        "patch_proj.bias".to_string(),
        "cls_token".to_string(),
        "pos_embed".to_string(),
    ];
    for b in 0..config.depth {
        for p in BlockParam::ALL {
            names.push(format!("blocks.{b}.{}", p.name()));
        }
    }
    names
}

/// Parameter shapes in canonical order.
pub fn param_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let d = config.dim;
    let mut shapes = vec![
        vec![config.patch_dim(), d],
        vec![d],
        vec![d],
        vec![config.num_patches() + 1, d],
    ];
    for _ in 0..config.depth {
        for p in BlockParam::ALL {
            shapes.push(p.shape(config));
        }
    }
    shapes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::micro().validate().is_ok());
        assert!(ModelConfig::vit_small().validate().is_ok());
        let mut c = ModelConfig::desk();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.depth = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_counts() {
        assert_eq!(ModelConfig::desk().num_patches(), 16);
        assert_eq!(ModelConfig::micro().num_patches(), 4);
        assert_eq!(ModelConfig::vit_small().num_patches(), 196);
    }

    #[test]
    fn param_count_matches_enumeration() {
        for cfg in [ModelConfig::micro(), ModelConfig::desk()] {
            let p = ModelParams::init(&cfg, 1).unwrap();
            assert_eq!(p.num_scalars(), cfg.param_count());
            assert_eq!(p.tensors().len(), param_names(&cfg).len());
            let enumerated: usize = param_shapes(&cfg)
                .iter()
                .map(|s| s.iter().product::<usize>())
                .sum();
            assert_eq!(enumerated, cfg.param_count());
        }
        // ViT-Small at 224: patch stem 768·384+384, cls 384, pos 197·384,
        // 12 blocks of 1,774,464 scalars.
        assert_eq!(
            ModelConfig::vit_small().param_count(),
            768 * 384 + 384 + 384 + 197 * 384 + 12 * 1_774_464
        );
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let cfg = ModelConfig::micro();
        let a = ModelParams::init(&cfg, 9).unwrap();
        let b = ModelParams::init(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), ModelParams::init(&cfg, 10).unwrap().fingerprint());
        let w = a.block(0, BlockParam::Wq);
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.block(1, BlockParam::Bq).data().iter().all(|&v| v == 0.0));
        assert!(a.block(1, BlockParam::Ln2Gamma).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let cfg = ModelConfig::micro();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut ts = p.tensors().to_vec();
        assert!(ModelParams::from_tensors(cfg.clone(), ts.clone()).is_ok());
        ts[5] = Tensor::zeros(&[3]);
        assert!(ModelParams::from_tensors(cfg.clone(), ts).is_err());
    }
}
