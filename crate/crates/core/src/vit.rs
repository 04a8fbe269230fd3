//! Patch embedding, multi-head self-attention, and the transformer classifier
//! used by the first branch.

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, BackboneConfig};
use crate::classifier::{BranchOutput, Classifier, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, one_hot, Bound, Dense, Init, LayerNorm, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Source index of every entry of the `[T×p²C]` token matrix, in raster
/// patch order with each patch flattened as (channel, row, column).
fn patch_index(shape: &[usize], patch: usize) -> Result<(Vec<usize>, usize, usize)> {
    let (c, h, w) = match shape {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::dim("patchify", format!("expected [C, H, W], got {shape:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "patchify",
            format!("H = {h} and W = {w} must be divisible by patch size p = {patch}"),
        ));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut index = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        index.push((ch * h + py * patch + dy) * w + px * patch + dx);
                    }
                }
            }
        }
    }
    Ok((index, ph * pw, dim))
}

/// Splits an image `[C×H×W]` into `[T×p²C]` flattened patches.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (index, t, dim) = patch_index(image.shape(), patch)?;
    let d = image.data();
    Tensor::new(&[t, dim], index.iter().map(|&i| d[i]).collect())
}

/// Inverse of [`patchify`] for an image of shape `[C×H×W]`.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, patch: usize, shape: &[usize]) -> Result<Tensor<T>> {
    let (index, t, dim) = patch_index(shape, patch)?;
    if tokens.shape() != [t, dim] {
        return Err(Error::dim(
            "unpatchify",
            format!("tokens {:?} do not tile an image {shape:?}", tokens.shape()),
        ));
    }
    let mut out = vec![T::zero(); index.len()];
    for (&src, &v) in index.iter().zip(tokens.data()) {
        out[src] = v;
    }
    Tensor::new(shape, out)
}

/// Differentiable [`patchify`].
pub fn patchify_var<'t, T: Scalar>(image: Var<'t, T>, patch: usize) -> Result<Var<'t, T>> {
    let (index, t, dim) = patch_index(&image.shape(), patch)?;
    image.gather(index, &[t, dim])
}

/// Feature map `[C×h×w]` to a token matrix `[h·w × C]`, one token per site.
pub fn feature_tokens<'t, T: Scalar>(features: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::dim("feature_tokens", format!("expected [C, h, w], got {s:?}")));
    }
    features.reshape(&[s[0], s[1] * s[2]])?.transpose()
}

/// Inverse of [`feature_tokens`].
pub fn tokens_to_map<'t, T: Scalar>(tokens: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::dim("tokens_to_map", format!("{s:?} is not {h}x{w} sites")));
    }
    tokens.transpose()?.reshape(&[s[1], h, w])
}

/// Multi-head self-attention. Projections are bias-free `[D×D]` matrices
/// applied as `x·Wᵀ` to row tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {d_model} is not divisible by {heads} heads"
            )));
        }
        let init = Init::Normal {
            std: (1.0 / d_model as f64).sqrt(),
        };
        let shape = [d_model, d_model];
        Ok(Self {
            heads,
            d_model,
            query: params.add(format!("{name}.q"), &shape, init),
            key: params.add(format!("{name}.k"), &shape, init),
            value: params.add(format!("{name}.v"), &shape, init),
            output: params.add(format!("{name}.o"), &shape, init),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_attention(p, tokens)?.0)
    }

    /// Output tokens plus the `[T×T]` attention matrix of every head.
    pub fn forward_with_attention<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        tokens: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let s = tokens.shape();
        if s.len() != 2 || s[1] != self.d_model {
            return Err(Error::dim(
                "mhsa",
                format!("tokens {s:?} for model dim {}", self.d_model),
            ));
        }
        let q = tokens.matmul_nt(p.get(self.query))?;
        let k = tokens.matmul_nt(p.get(self.key))?;
        let v = tokens.matmul_nt(p.get(self.value))?;
        let dk = self.head_dim();
        let scale = T::one() / T::of(dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dk, dk)?;
            let kh = k.slice_cols(h * dk, dk)?;
            let vh = v.slice_cols(h * dk, dk)?;
            let a = qh.matmul_nt(kh)?.scale(scale).softmax(1)?;
            outs.push(a.matmul(vh)?);
            attn.push(a);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
        Ok((merged.matmul_nt(p.get(self.output))?, attn))
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp_in: Dense,
    pub mlp_out: Dense,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), d_model),
            attention: MultiHeadAttention::new(params, &format!("{name}.attn"), d_model, heads)?,
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), d_model),
            mlp_in: Dense::new(params, &format!("{name}.mlp_in"), d_model, hidden),
            mlp_out: Dense::new(params, &format!("{name}.mlp_out"), hidden, d_model),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = x.add(self.attention.forward(p, self.norm1.forward(p, x)?)?)?;
        let h = self.mlp_in.forward(p, self.norm2.forward(p, x)?)?.relu();
        x.add(self.mlp_out.forward(p, h)?)
    }
}

/// Where the transformer's tokens come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    /// One token per spatial site of the backbone feature map.
    Features,
    /// Raw-image patches of `patch_size`.
    Patches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub token_source: TokenSource,
    pub patch_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub backbone: BackboneConfig,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            token_source: TokenSource::Features,
            patch_size: 4,
            d_model: 32,
            heads: 4,
            layers: 2,
            mlp_hidden: 64,
            backbone: BackboneConfig::vgg((64, 64)),
        }
    }
}

impl VitConfig {
    /// `(token count, token dim)` before projection to the model dim.
    pub fn token_layout(&self) -> Result<(usize, usize)> {
        match self.token_source {
            TokenSource::Features => {
                let (c, h, w) = self.backbone.output_shape()?;
                Ok((h * w, c))
            }
            TokenSource::Patches => {
                let (h, w) = self.backbone.input_size;
                let p = self.patch_size;
                if p == 0 || h % p != 0 || w % p != 0 {
                    return Err(Error::dim(
                        "patchify",
                        format!("H = {h} and W = {w} must be divisible by patch size p = {p}"),
                    ));
                }
                Ok(((h / p) * (w / p), p * p * self.backbone.in_channels))
            }
        }
    }
}

/// Branch 1: backbone features (or raw patches) → class token + positions →
/// encoder blocks → class-token head → softmax.
#[derive(Clone, Debug)]
pub struct VitClassifier<T> {
    cfg: VitConfig,
    params: ParamSet<T>,
    backbone: Option<Backbone>,
    embed: Dense,
    class_token: ParamId,
    positions: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    head: Dense,
}

impl<T: Scalar> VitClassifier<T> {
    pub fn new(cfg: &VitConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new(seed);
        let (tokens, token_dim) = cfg.token_layout()?;
        let backbone = match cfg.token_source {
            TokenSource::Features => Some(Backbone::new(&mut params, "backbone", &cfg.backbone)?),
            TokenSource::Patches => None,
        };
        let d = cfg.d_model;
        let embed = Dense::new(&mut params, "embed", token_dim, d);
        let class_token = params.add("class_token", &[1, d], Init::Normal { std: 0.02 });
        let positions = params.add("positions", &[tokens + 1, d], Init::Normal { std: 0.02 });
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock::new(&mut params, &format!("block{l}"), d, cfg.heads, cfg.mlp_hidden))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut params, "norm", d);
        let head = Dense::new(&mut params, "head", d, NUM_CLASSES);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            backbone,
            embed,
            class_token,
            positions,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Token matrix `[T×token_dim]` fed to the embedding.
    pub fn tokens<'t>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.backbone {
            Some(bb) => feature_tokens(bb.forward(p, image)?),
            None => patchify_var(image, self.cfg.patch_size),
        }
    }

    /// Encoded class token `[d_model]` before the head.
    pub fn encode<'t>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.embed.forward(p, self.tokens(p, image)?)?;
        let mut x = Var::concat_rows(&[p.get(self.class_token), x])?.add(p.get(self.positions))?;
        for block in &self.blocks {
            x = block.forward(p, x)?;
        }
        self.norm.forward(p, x)?.row(0)
    }
}

impl<T: Scalar> Classifier<T> for VitClassifier<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn input_shape(&self) -> [usize; 3] {
        let (h, w) = self.cfg.backbone.input_size;
        [self.cfg.backbone.in_channels, h, w]
    }

    fn forward<'t>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<BranchOutput<'t, T>> {
        let logits = self.head.forward(p, self.encode(p, image)?)?;
        Ok(BranchOutput {
            probs: logits.softmax(0)?,
            capsules: None,
        })
    }

    fn loss<'t>(&self, out: &BranchOutput<'t, T>, label: usize) -> Result<Var<'t, T>> {
        cross_entropy(out.probs, &one_hot(label, NUM_CLASSES)?)
    }
}
