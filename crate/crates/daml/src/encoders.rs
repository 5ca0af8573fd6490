//! The heterogeneous encoder pair: a convolutional teacher with local
//! receptive fields and a patch-attention student with a global one.
//!
//! Both expose the same contract: a batch of images in, a
//! `(batch, feature_dim)` matrix out, with different feature dimensions by
//! construction. Features are unnormalized; downstream consumers apply
//! cosine geometry where needed.

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ArrD, Tape, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{
    trunc_normal, Conv2d, InstanceNorm2d, LayerNorm, Linear, ParamStore, TransformerBlock,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Convolutional,
    PatchAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture configuration of one encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Output feature dimension (the subspace dimension).
    pub feature_dim: usize,
    /// Convolution layers, or transformer blocks.
    pub depth: usize,
    /// Patch edge in pixels (attention kind only).
    pub patch_size: Option<usize>,
    /// Base channel count (convolutional) or embedding width (attention).
    pub width: usize,
    /// Attention heads (attention kind only).
    pub heads: usize,
    /// (H, W) the encoder expects.
    pub input_size: (usize, usize),
}

impl EncoderConfig {
    /// Toy teacher: 4 convolution stages with instance-norm early stages,
    /// 2x downsampling per stage, global average pooling into 64 channels.
    pub fn conv_teacher(input_size: (usize, usize)) -> Self {
        Self {
            kind: EncoderKind::Convolutional,
            feature_dim: 64,
            depth: 4,
            patch_size: None,
            width: 16,
            heads: 0,
            input_size,
        }
    }

    /// Toy student: patch-8 attention encoder, 4 blocks, class-token pooling
    /// into 48 dimensions.
    pub fn attention_student(input_size: (usize, usize)) -> Self {
        Self {
            kind: EncoderKind::PatchAttention,
            feature_dim: 48,
            depth: 4,
            patch_size: Some(8),
            width: 48,
            heads: 4,
            input_size,
        }
    }

    /// Channel widths per convolution stage: width, 2*width, ...,
    /// ending at `feature_dim` so global average pooling is the feature.
    pub fn conv_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| {
                if i + 1 == self.depth {
                    self.feature_dim
                } else {
                    self.width * (i + 1)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.width == 0 {
            return Err(Error::InvalidConfig(
                "feature_dim and width must be positive".into(),
            ));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig("input_size must be positive".into()));
        }
        match self.kind {
            EncoderKind::Convolutional => {
                if self.depth == 0 {
                    return Err(Error::InvalidConfig(
                        "convolutional encoder needs depth >= 1".into(),
                    ));
                }
                let down = 1usize << self.depth;
                if h % down != 0 || w % down != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "input {h}x{w} must be divisible by 2^depth = {down}"
                    )));
                }
            }
            EncoderKind::PatchAttention => {
                let p = self.patch_size.ok_or_else(|| {
                    Error::InvalidConfig("patch_attention encoder needs patch_size".into())
                })?;
                if p == 0 || h % p != 0 || w % p != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "patch size {p} must divide input {h}x{w}"
                    )));
                }
                if self.depth == 0 {
                    return Err(Error::InvalidConfig(
                        "patch_attention encoder needs depth >= 1".into(),
                    ));
                }
                if self.width != self.feature_dim {
                    return Err(Error::InvalidConfig(
                        "attention width must equal feature_dim (class-token pooling)".into(),
                    ));
                }
                if self.heads == 0 || self.width % self.heads != 0 {
                    return Err(Error::InvalidConfig(
                        "heads must be positive and divide width".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let p = self.patch_size.unwrap_or(1);
        (self.input_size.0 / p) * (self.input_size.1 / p)
    }
}

/// The two configured subspaces must have different dimensions; the
/// asymmetry of the method is structural.
pub fn validate_pair(teacher: &EncoderConfig, student: &EncoderConfig) -> Result<()> {
    teacher.validate()?;
    student.validate()?;
    if teacher.feature_dim == student.feature_dim {
        return Err(Error::InvalidConfig(format!(
            "teacher and student feature dims must differ, both are {}",
            teacher.feature_dim
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ConvStage {
    conv: Conv2d,
    norm: Option<InstanceNorm2d>,
}

#[derive(Debug, Clone)]
enum Arch {
    Conv {
        stages: Vec<ConvStage>,
    },
    Attention {
        embed: Linear,
        cls: crate::nn::ParamId,
        pos: crate::nn::ParamId,
        blocks: Vec<TransformerBlock>,
        final_norm: LayerNorm,
    },
}

/// One encoder: architecture plus its parameter store and mode flag.
///
/// Extraction is a pure function of (parameters, images); there are no
/// batch statistics or stochastic layers, so eval-mode output for a sample
/// depends only on that sample's pixels.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub mode: Mode,
    arch: Arch,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let arch = match config.kind {
            EncoderKind::Convolutional => {
                let channels = config.conv_channels();
                let mut stages = Vec::with_capacity(config.depth);
                let mut in_ch = 3;
                for (i, &out_ch) in channels.iter().enumerate() {
                    let conv = Conv2d::new(
                        &mut params,
                        &mut rng,
                        &format!("stage{i}.conv"),
                        in_ch,
                        out_ch,
                        3,
                        1,
                        1,
                    );
                    // instance norm in the early half of the network
                    let norm = (i < config.depth.div_ceil(2)).then(|| {
                        InstanceNorm2d::new(&mut params, &format!("stage{i}.norm"), out_ch)
                    });
                    stages.push(ConvStage { conv, norm });
                    in_ch = out_ch;
                }
                Arch::Conv { stages }
            }
            EncoderKind::PatchAttention => {
                let p = config.patch_size.unwrap();
                let dim = config.width;
                let embed = Linear::new(&mut params, &mut rng, "embed", 3 * p * p, dim, true);
                let cls = params.add("cls_token", trunc_normal(&mut rng, &[1, dim], 0.02));
                let tokens = config.num_patches() + 1;
                let pos = params.add("pos_embed", trunc_normal(&mut rng, &[tokens, dim], 0.02));
                let blocks = (0..config.depth)
                    .map(|i| {
                        TransformerBlock::new(&mut params, &mut rng, &format!("block{i}"), dim,
                            config.heads, 4)
                    })
                    .collect();
                let final_norm = LayerNorm::new(&mut params, "final_norm", dim);
                Arch::Attention {
                    embed,
                    cls,
                    pos,
                    blocks,
                    final_norm,
                }
            }
        };
        Ok(Self {
            config,
            params,
            mode: Mode::Train,
            arch,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Stack images into an (N, 3, H, W) batch tensor, checking sizes.
    pub fn batch_tensor(&self, images: &[Image]) -> Result<ArrD> {
        let (h, w) = self.config.input_size;
        let n = images.len();
        let mut batch = Array4::<f64>::zeros((n, 3, h, w));
        for (i, img) in images.iter().enumerate() {
            if img.size() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "image {i} is {:?}, encoder expects ({h}, {w})",
                    img.size()
                )));
            }
            batch.index_axis_mut(Axis(0), i).assign(&img.data);
        }
        Ok(batch.into_dyn())
    }

    /// Differentiable forward pass: batch (N,3,H,W) -> features (N, feature_dim).
    pub fn forward(&self, leaves: &[Var], batch: &Var) -> Var {
        match &self.arch {
            Arch::Conv { stages } => {
                let mut x = batch.clone();
                for stage in stages {
                    x = stage.conv.forward(leaves, &x);
                    if let Some(norm) = &stage.norm {
                        x = norm.forward(leaves, &x);
                    }
                    x = x.relu();
                    x = avg_pool2(&x);
                }
                // global average pooling over the remaining spatial extent
                x.mean_axis(3, false).mean_axis(2, false)
            }
            Arch::Attention {
                embed,
                cls,
                pos,
                blocks,
                final_norm,
            } => {
                let shape = batch.shape();
                let n = shape[0];
                let p = self.config.patch_size.unwrap();
                let dim = self.config.width;
                let pt = self.config.num_patches();
                let patches = batch.im2col(p, p, 0); // (N*PT, 3*p*p)
                let tokens = embed.forward(leaves, &patches).reshape(&[n, pt, dim]);
                let cls_tok = leaves[cls.0].index_select0(&vec![0; n]).reshape(&[n, 1, dim]);
                let mut x = Var::concat(1, &[cls_tok, tokens]).add(&leaves[pos.0]);
                for block in blocks {
                    x = block.forward(leaves, &x);
                }
                let x = final_norm.forward(leaves, &x);
                // class token row
                x.permute(&[1, 0, 2]).index_select0(&[0]).reshape(&[n, dim])
            }
        }
    }

    /// Eval-style extraction without gradient tracking.
    pub fn extract_features(&self, images: &[Image]) -> Result<Array2<f64>> {
        let batch = self.batch_tensor(images)?;
        let tape = Tape::new();
        let leaves = self.params.leaves(&tape);
        let out = self.forward(&leaves, &tape.constant(batch));
        let v = out.value();
        Ok(v.into_dimensionality::<ndarray::Ix2>().unwrap())
    }
}

/// 2x2 average pooling with stride 2, composed from tape primitives.
fn avg_pool2(x: &Var) -> Var {
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    x.im2col(2, 2, 0) // (N*OH*OW, C*4)
        .reshape(&[n * oh * ow, c, 4])
        .mean_axis(2, false)
        .reshape(&[n, oh, ow, c])
        .permute(&[0, 3, 1, 2])
}

/// Receptive-field growth per layer, from kernel-extent arithmetic at unit
/// stride. Attention is global from the first block: every token attends to
/// every other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum FieldExtent {
    /// Square receptive field edge, in input pixels.
    Local(usize),
    Global,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReceptiveFieldReport {
    pub kind: EncoderKind,
    /// Field extent after each layer/block.
    pub per_layer: Vec<FieldExtent>,
}

impl ReceptiveFieldReport {
    /// Field extent at the output (Local(1) for an empty stack).
    pub fn final_extent(&self) -> FieldExtent {
        self.per_layer.last().cloned().unwrap_or(FieldExtent::Local(1))
    }
}

/// Structural locality diagnostic for a config: convolution stacks grow
/// their receptive field by (kernel - 1) per layer, attention is global
/// after its first block.
pub fn receptive_field_check(config: &EncoderConfig) -> ReceptiveFieldReport {
    match config.kind {
        EncoderKind::Convolutional => {
            let kernel = 3usize;
            let per_layer = (1..=config.depth)
                .map(|d| FieldExtent::Local(1 + d * (kernel - 1)))
                .collect();
            ReceptiveFieldReport {
                kind: config.kind,
                per_layer,
            }
        }
        EncoderKind::PatchAttention => ReceptiveFieldReport {
            kind: config.kind,
            per_layer: vec![FieldExtent::Global; config.depth],
        },
    }
}

/// Convenience: the default teacher/student pair at a given input size.
pub fn default_pair(input_size: (usize, usize), seed: u64) -> Result<(Encoder, Encoder)> {
    let tcfg = EncoderConfig::conv_teacher(input_size);
    let scfg = EncoderConfig::attention_student(input_size);
    validate_pair(&tcfg, &scfg)?;
    // distinct parameter streams for the two encoders
    let teacher = Encoder::new(tcfg, seed.wrapping_mul(2).wrapping_add(1))?;
    let student = Encoder::new(scfg, seed.wrapping_mul(2).wrapping_add(2))?;
    Ok((teacher, student))
}
