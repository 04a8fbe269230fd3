//! Miniature VGG-style and pre-activation residual feature extractors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    VggMini,
    ResnetMini,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub in_channels: usize,
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::VggMini,
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: 1,
            in_channels: 1,
            input_size: (64, 64),
        }
    }
}

impl BackboneConfig {
    pub fn vgg(input_size: (usize, usize)) -> Self {
        Self {
            input_size,
            ..Self::default()
        }
    }

    pub fn resnet(input_size: (usize, usize)) -> Self {
        Self {
            kind: BackboneKind::ResnetMini,
            input_size,
            ..Self::default()
        }
    }

    /// `(channels, height, width)` of the feature map this config produces.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be nonempty and positive".into()));
        }
        if self.blocks_per_stage == 0 || self.in_channels == 0 {
            return Err(Error::Config("blocks_per_stage and in_channels must be positive".into()));
        }
        let (mut h, mut w) = self.input_size;
        for _ in &self.stage_channels {
            if h < 2 || w < 2 {
                return Err(Error::dim(
                    "backbone",
                    format!(
                        "input {:?} smaller than the {}x downsampling of {} stages",
                        self.input_size,
                        1usize << self.stage_channels.len(),
                        self.stage_channels.len()
                    ),
                ));
            }
            (h, w) = match self.kind {
                BackboneKind::VggMini => (h / 2, w / 2),
                BackboneKind::ResnetMini => (h.div_ceil(2), w.div_ceil(2)),
            };
        }
        Ok((*self.stage_channels.last().unwrap(), h, w))
    }

    pub fn feature_len(&self) -> Result<usize> {
        let (c, h, w) = self.output_shape()?;
        Ok(c * h * w)
    }
}

/// Pre-activation residual block: `x + conv(relu(conv(relu(x))))`, with a
/// strided 1×1 projection on the skip path when the shape changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub projection: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(params, &format!("{name}.conv1"), in_channels, out_channels, 3, stride, 1);
        let conv2 = Conv2d::new(params, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1);
        let projection = (stride != 1 || in_channels != out_channels)
            .then(|| Conv2d::new(params, &format!("{name}.proj"), in_channels, out_channels, 1, stride, 0));
        Self {
            conv1,
            conv2,
            projection,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv1.forward(p, x.relu())?;
        let f = self.conv2.forward(p, h.relu())?;
        let skip = match &self.projection {
            Some(proj) => proj.forward(p, x)?,
            None => x,
        };
        skip.add(f)
    }
}

#[derive(Clone, Debug)]
enum Layers {
    Vgg(Vec<Vec<Conv2d>>),
    Resnet { stem: Conv2d, blocks: Vec<ResidualBlock> },
}

/// A feature extractor built from a [`BackboneConfig`].
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    layers: Layers,
}

impl Backbone {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.output_shape()?;
        let mut prev = cfg.in_channels;
        let layers = match cfg.kind {
            BackboneKind::VggMini => {
                let mut stages = Vec::new();
                for (s, &c) in cfg.stage_channels.iter().enumerate() {
                    let mut convs = Vec::new();
                    for b in 0..cfg.blocks_per_stage {
                        convs.push(Conv2d::new(params, &format!("{prefix}.stage{s}.conv{b}"), prev, c, 3, 1, 1));
                        prev = c;
                    }
                    stages.push(convs);
                }
                Layers::Vgg(stages)
            }
            BackboneKind::ResnetMini => {
                let c0 = cfg.stage_channels[0];
                let stem = Conv2d::new(params, &format!("{prefix}.stem"), prev, c0, 3, 1, 1);
                prev = c0;
                let mut blocks = Vec::new();
                for (s, &c) in cfg.stage_channels.iter().enumerate() {
                    for b in 0..cfg.blocks_per_stage {
                        let stride = if b == 0 { 2 } else { 1 };
                        blocks.push(ResidualBlock::new(params, &format!("{prefix}.stage{s}.block{b}"), prev, c, stride));
                        prev = c;
                    }
                }
                Layers::Resnet { stem, blocks }
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.cfg.output_shape().expect("validated at construction")
    }

    pub fn residual_blocks(&self) -> &[ResidualBlock] {
        match &self.layers {
            Layers::Resnet { blocks, .. } => blocks,
            Layers::Vgg(_) => &[],
        }
    }

    /// Feature map `[C×h×w]` for an image `[in_channels×H×W]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = image.shape();
        let (h, w) = self.cfg.input_size;
        if shape != [self.cfg.in_channels, h, w] {
            return Err(Error::dim(
                "backbone",
                format!("expected image [{}, {h}, {w}], got {shape:?}", self.cfg.in_channels),
            ));
        }
        match &self.layers {
            Layers::Vgg(stages) => {
                let mut x = image;
                for convs in stages {
                    for conv in convs {
                        x = conv.forward(p, x)?.relu();
                    }
                    x = x.max_pool2d(2, 2)?;
                }
                Ok(x)
            }
            Layers::Resnet { stem, blocks } => {
                let mut x = stem.forward(p, image)?;
                for block in blocks {
                    x = block.forward(p, x)?;
                }
                Ok(x.relu())
            }
        }
    }
}

/// Repeats a single-channel image `[1×H×W]` into `channels` identical planes.
pub fn replicate_channels<T: Scalar>(image: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::dim("replicate_channels", format!("expected [1, H, W], got {s:?}")));
    }
    let plane = image.data();
    let data = (0..channels).flat_map(|_| plane.iter().copied()).collect();
    Tensor::new(&[channels, s[1], s[2]], data)
}
