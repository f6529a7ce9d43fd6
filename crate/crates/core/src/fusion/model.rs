//! Ground-aware encoder/decoder with analytic reverse-mode gradients.
//!
//! Every sublayer is pre-norm with a residual connection:
//!
//! * encoder layer: masked self-attention, then convolutional FFN;
//! * decoder layer: masked self-attention over the depth queries, masked
//!   cross-attention (queries from the decoder, keys from the encoder, values
//!   the channel concatenation of encoder- and decoder-derived projections
//!   followed by a `2C → C` projection), then convolutional FFN.
//!
//! Decoder queries are the flattened ground-depth map embedded by a `1 × C`
//! linear map plus bias, with the position encoding added.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::FusionError;
use crate::ground::GroundDepthMap;
use crate::scalar::Scalar;

use super::feature::FeatureMap;
use super::layers::{
    attention_backward, attention_forward, conv3x3_backward, conv3x3_forward, layer_norm_backward,
    layer_norm_forward, Conv3x3, LayerNorm, LayerNormCache, MaskMode,
};
use super::mask::AttentionMask;
use super::posenc::PositionEncoding;
use super::tensor::Mat;

/// Only pre-norm is implemented; the field exists so checkpoints record it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    #[default]
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub window_radius: usize,
    pub mask_mode: MaskMode,
    pub norm_placement: NormPlacement,
}

pub const DEFAULT_WINDOW_RADIUS: usize = 8;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            heads: 1,
            encoder_layers: 2,
            decoder_layers: 2,
            window_radius: DEFAULT_WINDOW_RADIUS,
            mask_mode: MaskMode::Renormalize,
            norm_placement: NormPlacement::Pre,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(FusionError::InvalidConfig(format!("channels must be even, got {}", self.channels)));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(FusionError::InvalidConfig(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.encoder_layers == 0 {
            return Err(FusionError::InvalidConfig("need at least one encoder layer".into()));
        }
        Ok(())
    }

    pub fn attention_options(&self) -> AttentionOptions {
        AttentionOptions { heads: self.heads, mode: self.mask_mode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionOptions {
    pub heads: usize,
    pub mode: MaskMode,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self { heads: 1, mode: MaskMode::Renormalize }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T> {
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn zeros(c: usize) -> Self {
        Self { wq: Mat::zeros(c, c), wk: Mat::zeros(c, c), wv: Mat::zeros(c, c) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<T> {
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv_enc: Mat<T>,
    pub wv_dec: Mat<T>,
    /// `2C × C` output projection of the concatenated values.
    pub wo: Mat<T>,
}

impl<T: Scalar> CrossAttention<T> {
    pub fn zeros(c: usize) -> Self {
        Self {
            wq: Mat::zeros(c, c),
            wk: Mat::zeros(c, c),
            wv_enc: Mat::zeros(c, c),
            wv_dec: Mat::zeros(c, c),
            wo: Mat::zeros(2 * c, c),
        }
    }
}

/// Two stacked 3×3 convolutions with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFfn<T> {
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
}

impl<T: Scalar> ConvFfn<T> {
    pub fn zeros(c: usize) -> Self {
        Self { conv1: Conv3x3::zeros(c, c), conv2: Conv3x3::zeros(c, c) }
    }
}

/// One encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub norm_attn: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub norm_ffn: LayerNorm<T>,
    pub ffn: ConvFfn<T>,
}

impl<T: Scalar> LayerWeights<T> {
    /// Zero projections and kernels, identity norms: the layer is a pure residual.
    pub fn zeros(c: usize) -> Self {
        Self {
            norm_attn: LayerNorm::identity(c),
            attn: SelfAttention::zeros(c),
            norm_ffn: LayerNorm::identity(c),
            ffn: ConvFfn::zeros(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerWeights<T> {
    pub norm_self: LayerNorm<T>,
    pub self_attn: SelfAttention<T>,
    pub norm_cross: LayerNorm<T>,
    pub cross: CrossAttention<T>,
    pub norm_ffn: LayerNorm<T>,
    pub ffn: ConvFfn<T>,
}

impl<T: Scalar> DecoderLayerWeights<T> {
    pub fn zeros(c: usize) -> Self {
        Self {
            norm_self: LayerNorm::identity(c),
            self_attn: SelfAttention::zeros(c),
            norm_cross: LayerNorm::identity(c),
            cross: CrossAttention::zeros(c),
            norm_ffn: LayerNorm::identity(c),
            ffn: ConvFfn::zeros(c),
        }
    }
}

/// Scalar ground depth to `C` channels: `d · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEmbedding<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DepthEmbedding<T> {
    pub fn zeros(c: usize) -> Self {
        Self { weight: vec![T::zero(); c], bias: vec![T::zero(); c] }
    }
}

/// Linear readout `h · weight + bias` at selected pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHead<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DepthHead<T> {
    pub fn zeros(c: usize) -> Self {
        Self { weight: vec![T::zero(); c], bias: vec![T::zero()] }
    }

    pub fn predict(&self, h: &Mat<T>, pixel: usize) -> T {
        super::tensor::dot(h.row(pixel), &self.weight) + self.bias[0]
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub encoder: Vec<LayerWeights<T>>,
    pub decoder: Vec<DecoderLayerWeights<T>>,
    pub embed: DepthEmbedding<T>,
    pub head: DepthHead<T>,
}

macro_rules! visit_tensors {
    ($self:ident, $f:ident, $as:ident) => {{
        fn ln<T>(prefix: &str, n: $as!(LayerNorm<T>), f: &mut dyn FnMut(String, $as!([T]))) {
            f(format!("{prefix}.gamma"), $as!(@field n.gamma));
            f(format!("{prefix}.beta"), $as!(@field n.beta));
        }
        fn conv<T>(prefix: &str, c: $as!(Conv3x3<T>), f: &mut dyn FnMut(String, $as!([T]))) {
            f(format!("{prefix}.kernel"), $as!(@field c.kernel));
            f(format!("{prefix}.bias"), $as!(@field c.bias));
        }
        for (i, l) in $as!(@iter $self.encoder).enumerate() {
            let p = format!("encoder.{i}");
            ln(&format!("{p}.norm_attn"), $as!(@ref l.norm_attn), $f);
            $f(format!("{p}.attn.wq"), $as!(@mat l.attn.wq));
            $f(format!("{p}.attn.wk"), $as!(@mat l.attn.wk));
            $f(format!("{p}.attn.wv"), $as!(@mat l.attn.wv));
            ln(&format!("{p}.norm_ffn"), $as!(@ref l.norm_ffn), $f);
            conv(&format!("{p}.ffn.conv1"), $as!(@ref l.ffn.conv1), $f);
            conv(&format!("{p}.ffn.conv2"), $as!(@ref l.ffn.conv2), $f);
        }
        for (i, l) in $as!(@iter $self.decoder).enumerate() {
            let p = format!("decoder.{i}");
            ln(&format!("{p}.norm_self"), $as!(@ref l.norm_self), $f);
            $f(format!("{p}.self_attn.wq"), $as!(@mat l.self_attn.wq));
            $f(format!("{p}.self_attn.wk"), $as!(@mat l.self_attn.wk));
            $f(format!("{p}.self_attn.wv"), $as!(@mat l.self_attn.wv));
            ln(&format!("{p}.norm_cross"), $as!(@ref l.norm_cross), $f);
            $f(format!("{p}.cross.wq"), $as!(@mat l.cross.wq));
            $f(format!("{p}.cross.wk"), $as!(@mat l.cross.wk));
            $f(format!("{p}.cross.wv_enc"), $as!(@mat l.cross.wv_enc));
            $f(format!("{p}.cross.wv_dec"), $as!(@mat l.cross.wv_dec));
            $f(format!("{p}.cross.wo"), $as!(@mat l.cross.wo));
            ln(&format!("{p}.norm_ffn"), $as!(@ref l.norm_ffn), $f);
            conv(&format!("{p}.ffn.conv1"), $as!(@ref l.ffn.conv1), $f);
            conv(&format!("{p}.ffn.conv2"), $as!(@ref l.ffn.conv2), $f);
        }
        $f("embed.weight".into(), $as!(@field $self.embed.weight));
        $f("embed.bias".into(), $as!(@field $self.embed.bias));
        $f("head.weight".into(), $as!(@field $self.head.weight));
        $f("head.bias".into(), $as!(@field $self.head.bias));
    }};
}

macro_rules! shared {
    (LayerNorm<$t:ident>) => { &LayerNorm<$t> };
    (Conv3x3<$t:ident>) => { &Conv3x3<$t> };
    ([$t:ident]) => { &[$t] };
    (@field $e:expr) => { &$e[..] };
    (@ref $e:expr) => { &$e };
    (@mat $e:expr) => { $e.data() };
    (@iter $e:expr) => { $e.iter() };
}

macro_rules! exclusive {
    (LayerNorm<$t:ident>) => { &mut LayerNorm<$t> };
    (Conv3x3<$t:ident>) => { &mut Conv3x3<$t> };
    ([$t:ident]) => { &mut [$t] };
    (@field $e:expr) => { &mut $e[..] };
    (@ref $e:expr) => { &mut $e };
    (@mat $e:expr) => { $e.data_mut() };
    (@iter $e:expr) => { $e.iter_mut() };
}

impl<T: Scalar> FusionParams<T> {
    /// Parameters that make every sublayer a pure residual.
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.channels;
        Self {
            encoder: (0..config.encoder_layers).map(|_| LayerWeights::zeros(c)).collect(),
            decoder: (0..config.decoder_layers).map(|_| DecoderLayerWeights::zeros(c)).collect(),
            embed: DepthEmbedding::zeros(c),
            head: DepthHead::zeros(c),
        }
    }

    /// Same shapes, every entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    /// Glorot-uniform projections and kernels, identity norms, zero biases.
    pub fn random<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let c = config.channels;
        let mut p = Self::zeros(config);
        p.for_each_tensor_mut(|name, t| {
            let limit = if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with("bias") {
                return;
            } else if name.ends_with(".kernel") {
                (6.0 / (18.0 * c as f64)).sqrt() * 0.5
            } else if name.ends_with(".wo") {
                (6.0 / (3.0 * c as f64)).sqrt()
            } else if name.starts_with("embed") || name.starts_with("head") {
                (6.0 / (1.0 + c as f64)).sqrt()
            } else {
                (6.0 / (2.0 * c as f64)).sqrt()
            };
            for v in t.iter_mut() {
                *v = T::lit(rng.gen_range(-limit..limit));
            }
        });
        p
    }

    pub fn for_each_tensor(&self, mut f: impl FnMut(String, &[T])) {
        let f = &mut f as &mut dyn FnMut(String, &[T]);
        visit_tensors!(self, f, shared);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut [T])) {
        let f = &mut f as &mut dyn FnMut(String, &mut [T]);
        visit_tensors!(self, f, exclusive);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(|n, _| names.push(n));
        names
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let mut flat = Vec::new();
        other.for_each_tensor(|_, t| flat.extend_from_slice(t));
        let mut at = 0;
        self.for_each_tensor_mut(|_, t| {
            for v in t.iter_mut() {
                *v += scale * flat[at];
                at += 1;
            }
        });
    }
}

#[derive(Debug, Clone)]
struct AttnBlockCache<T> {
    norm: LayerNormCache<T>,
    xn: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    weights: Vec<Mat<T>>,
}

fn attn_block_forward<T: Scalar>(
    x: &Mat<T>,
    norm: &LayerNorm<T>,
    w: &SelfAttention<T>,
    mask: &AttentionMask,
    opts: AttentionOptions,
) -> Result<(Mat<T>, AttnBlockCache<T>), FusionError> {
    let (xn, norm_cache) = layer_norm_forward(x, norm);
    let q = xn.matmul(&w.wq);
    let k = xn.matmul(&w.wk);
    let v = xn.matmul(&w.wv);
    let (o, weights) = attention_forward(&q, &k, &v, mask, opts.heads, opts.mode)?;
    Ok((x.add(&o), AttnBlockCache { norm: norm_cache, xn, q, k, v, weights }))
}

fn attn_block_backward<T: Scalar>(
    dy: &Mat<T>,
    cache: &AttnBlockCache<T>,
    norm: &LayerNorm<T>,
    w: &SelfAttention<T>,
    g_norm: &mut LayerNorm<T>,
    g: &mut SelfAttention<T>,
) -> Mat<T> {
    let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.weights, dy);
    g.wq.add_assign(&cache.xn.t_matmul(&dq));
    g.wk.add_assign(&cache.xn.t_matmul(&dk));
    g.wv.add_assign(&cache.xn.t_matmul(&dv));
    let mut dxn = dq.matmul_t(&w.wq);
    dxn.add_assign(&dk.matmul_t(&w.wk));
    dxn.add_assign(&dv.matmul_t(&w.wv));
    let mut dx = layer_norm_backward(&dxn, &cache.norm, norm, g_norm);
    dx.add_assign(dy);
    dx
}

#[derive(Debug, Clone)]
struct CrossBlockCache<T> {
    norm: LayerNormCache<T>,
    xn: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    vcat: Mat<T>,
    o: Mat<T>,
    weights: Vec<Mat<T>>,
}

/// Head `h` sees columns `[h·2d, (h+1)·2d)` of the concatenated values: its
/// slice of the encoder values followed by its slice of the decoder values.
fn interleave_values<T: Scalar>(ve: &Mat<T>, vd: &Mat<T>, heads: usize) -> Mat<T> {
    let d = ve.cols() / heads;
    Mat::from_fn(ve.rows(), 2 * ve.cols(), |r, col| {
        let (h, within) = (col / (2 * d), col % (2 * d));
        if within < d {
            ve.get(r, h * d + within)
        } else {
            vd.get(r, h * d + within - d)
        }
    })
}

fn split_values<T: Scalar>(dvcat: &Mat<T>, heads: usize) -> (Mat<T>, Mat<T>) {
    let c = dvcat.cols() / 2;
    let d = c / heads;
    let mut de = Mat::zeros(dvcat.rows(), c);
    let mut dd = Mat::zeros(dvcat.rows(), c);
    for r in 0..dvcat.rows() {
        for col in 0..dvcat.cols() {
            let (h, within) = (col / (2 * d), col % (2 * d));
            if within < d {
                de.set(r, h * d + within, dvcat.get(r, col));
            } else {
                dd.set(r, h * d + within - d, dvcat.get(r, col));
            }
        }
    }
    (de, dd)
}

fn cross_block_forward<T: Scalar>(
    x: &Mat<T>,
    memory: &Mat<T>,
    norm: &LayerNorm<T>,
    w: &CrossAttention<T>,
    mask: &AttentionMask,
    opts: AttentionOptions,
) -> Result<(Mat<T>, CrossBlockCache<T>), FusionError> {
    let (xn, norm_cache) = layer_norm_forward(x, norm);
    let q = xn.matmul(&w.wq);
    let k = memory.matmul(&w.wk);
    let ve = memory.matmul(&w.wv_enc);
    let vd = xn.matmul(&w.wv_dec);
    let vcat = interleave_values(&ve, &vd, opts.heads);
    let (o, weights) = attention_forward(&q, &k, &vcat, mask, opts.heads, opts.mode)?;
    let y = x.add(&o.matmul(&w.wo));
    Ok((y, CrossBlockCache { norm: norm_cache, xn, q, k, vcat, o, weights }))
}

#[allow(clippy::too_many_arguments)]
fn cross_block_backward<T: Scalar>(
    dy: &Mat<T>,
    cache: &CrossBlockCache<T>,
    memory: &Mat<T>,
    norm: &LayerNorm<T>,
    w: &CrossAttention<T>,
    heads: usize,
    g_norm: &mut LayerNorm<T>,
    g: &mut CrossAttention<T>,
) -> (Mat<T>, Mat<T>) {
    g.wo.add_assign(&cache.o.t_matmul(dy));
    let d_o = dy.matmul_t(&w.wo);
    let (dq, dk, dvcat) = attention_backward(&cache.q, &cache.k, &cache.vcat, &cache.weights, &d_o);
    let (dve, dvd) = split_values(&dvcat, heads);
    g.wq.add_assign(&cache.xn.t_matmul(&dq));
    g.wk.add_assign(&memory.t_matmul(&dk));
    g.wv_enc.add_assign(&memory.t_matmul(&dve));
    g.wv_dec.add_assign(&cache.xn.t_matmul(&dvd));
    let mut dxn = dq.matmul_t(&w.wq);
    dxn.add_assign(&dvd.matmul_t(&w.wv_dec));
    let mut d_memory = dk.matmul_t(&w.wk);
    d_memory.add_assign(&dve.matmul_t(&w.wv_enc));
    let mut dx = layer_norm_backward(&dxn, &cache.norm, norm, g_norm);
    dx.add_assign(dy);
    (dx, d_memory)
}

#[derive(Debug, Clone)]
struct FfnBlockCache<T> {
    norm: LayerNormCache<T>,
    xn: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
}

fn ffn_block_forward<T: Scalar>(
    x: &Mat<T>,
    ws: usize,
    hs: usize,
    norm: &LayerNorm<T>,
    w: &ConvFfn<T>,
) -> (Mat<T>, FfnBlockCache<T>) {
    let (xn, norm_cache) = layer_norm_forward(x, norm);
    let pre = conv3x3_forward(&xn, ws, hs, &w.conv1);
    let mut act = pre.clone();
    act.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    let out = conv3x3_forward(&act, ws, hs, &w.conv2);
    (x.add(&out), FfnBlockCache { norm: norm_cache, xn, pre, act })
}

#[allow(clippy::too_many_arguments)]
fn ffn_block_backward<T: Scalar>(
    dy: &Mat<T>,
    cache: &FfnBlockCache<T>,
    ws: usize,
    hs: usize,
    norm: &LayerNorm<T>,
    w: &ConvFfn<T>,
    g_norm: &mut LayerNorm<T>,
    g: &mut ConvFfn<T>,
) -> Mat<T> {
    let mut d_act = conv3x3_backward(&cache.act, ws, hs, &w.conv2, dy, &mut g.conv2);
    for (d, &p) in d_act.data_mut().iter_mut().zip(cache.pre.data()) {
        if p <= T::zero() {
            *d = T::zero();
        }
    }
    let dxn = conv3x3_backward(&cache.xn, ws, hs, &w.conv1, &d_act, &mut g.conv1);
    let mut dx = layer_norm_backward(&dxn, &cache.norm, norm, g_norm);
    dx.add_assign(dy);
    dx
}

fn check_map<T: Scalar>(x: &FeatureMap<T>, channels: usize, mask: &AttentionMask) -> Result<(), FusionError> {
    if x.channels() != channels {
        return Err(FusionError::DimensionMismatch(format!(
            "feature map has {} channels, weights expect {channels}",
            x.channels()
        )));
    }
    if mask.len() != x.len() {
        return Err(FusionError::DimensionMismatch(format!(
            "mask covers {} pixels, map has {}",
            mask.len(),
            x.len()
        )));
    }
    Ok(())
}

/// Pre-norm masked self-attention sublayer of an encoder layer, residual included.
pub fn masked_self_attention<T: Scalar>(
    x: &FeatureMap<T>,
    w: &LayerWeights<T>,
    mask: &AttentionMask,
    opts: AttentionOptions,
) -> Result<FeatureMap<T>, FusionError> {
    check_map(x, w.attn.wq.rows(), mask)?;
    let (y, _) = attn_block_forward(x.matrix(), &w.norm_attn, &w.attn, mask, opts)?;
    Ok(FeatureMap::from_parts(x.ws(), x.hs(), y))
}

/// Per-head attention weights of an encoder layer's self-attention.
pub fn self_attention_weights<T: Scalar>(
    x: &FeatureMap<T>,
    w: &LayerWeights<T>,
    mask: &AttentionMask,
    opts: AttentionOptions,
) -> Result<Vec<Mat<T>>, FusionError> {
    check_map(x, w.attn.wq.rows(), mask)?;
    let (_, cache) = attn_block_forward(x.matrix(), &w.norm_attn, &w.attn, mask, opts)?;
    Ok(cache.weights)
}

/// Pre-norm convolutional FFN sublayer of an encoder layer, residual included.
pub fn conv_ffn<T: Scalar>(x: &FeatureMap<T>, w: &LayerWeights<T>) -> FeatureMap<T> {
    let (y, _) = ffn_block_forward(x.matrix(), x.ws(), x.hs(), &w.norm_ffn, &w.ffn);
    FeatureMap::from_parts(x.ws(), x.hs(), y)
}

/// Encoder: adds the position encoding, then every layer in turn.
pub fn encode<T: Scalar>(
    img: &FeatureMap<T>,
    pe: &PositionEncoding<T>,
    layers: &[LayerWeights<T>],
    mask: &AttentionMask,
    opts: AttentionOptions,
) -> Result<FeatureMap<T>, FusionError> {
    let (out, _) = encode_traced(img, pe, layers, mask, opts)?;
    Ok(out)
}

/// Decoder with ground-depth location queries.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Scalar>(
    depth: &GroundDepthMap<T>,
    encoder_out: &FeatureMap<T>,
    pe: &PositionEncoding<T>,
    layers: &[DecoderLayerWeights<T>],
    embed: &DepthEmbedding<T>,
    mask: &AttentionMask,
    opts: AttentionOptions,
) -> Result<FeatureMap<T>, FusionError> {
    if depth.width() != encoder_out.ws() || depth.height() != encoder_out.hs() {
        return Err(FusionError::DimensionMismatch(format!(
            "depth map {}x{} vs encoder output {}x{}",
            depth.width(),
            depth.height(),
            encoder_out.ws(),
            encoder_out.hs()
        )));
    }
    let (out, _) = decode_traced(depth.encoded(), encoder_out, pe, layers, embed, mask, opts)?;
    Ok(out)
}

#[derive(Debug, Clone)]
struct EncoderTrace<T> {
    layers: Vec<(AttnBlockCache<T>, FfnBlockCache<T>)>,
}

#[derive(Debug, Clone)]
struct DecoderTrace<T> {
    layers: Vec<(AttnBlockCache<T>, CrossBlockCache<T>, FfnBlockCache<T>)>,
}

fn check_pe<T: Scalar>(x_ws: usize, x_hs: usize, c: usize, pe: &PositionEncoding<T>) -> Result<(), FusionError> {
    if pe.ws() != x_ws || pe.hs() != x_hs || pe.matrix().cols() != c {
        return Err(FusionError::DimensionMismatch(format!(
            "position encoding {}x{}x{} vs map {x_ws}x{x_hs}x{c}",
            pe.ws(),
            pe.hs(),
            pe.matrix().cols()
        )));
    }
    Ok(())
}

fn encode_traced<T: Scalar>(
    img: &FeatureMap<T>,
    pe: &PositionEncoding<T>,
    layers: &[LayerWeights<T>],
    mask: &AttentionMask,
    opts: AttentionOptions,
) -> Result<(FeatureMap<T>, EncoderTrace<T>), FusionError> {
    let first = layers
        .first()
        .ok_or_else(|| FusionError::InvalidConfig("encoder needs at least one layer".into()))?;
    check_map(img, first.attn.wq.rows(), mask)?;
    check_pe(img.ws(), img.hs(), img.channels(), pe)?;
    let (ws, hs) = (img.ws(), img.hs());
    let mut x = img.matrix().add(pe.matrix());
    let mut trace = EncoderTrace { layers: Vec::with_capacity(layers.len()) };
    for l in layers {
        let (x1, a) = attn_block_forward(&x, &l.norm_attn, &l.attn, mask, opts)?;
        let (x2, f) = ffn_block_forward(&x1, ws, hs, &l.norm_ffn, &l.ffn);
        trace.layers.push((a, f));
        x = x2;
    }
    Ok((FeatureMap::from_parts(ws, hs, x), trace))
}

fn decode_traced<T: Scalar>(
    depth: &[T],
    memory: &FeatureMap<T>,
    pe: &PositionEncoding<T>,
    layers: &[DecoderLayerWeights<T>],
    embed: &DepthEmbedding<T>,
    mask: &AttentionMask,
    opts: AttentionOptions,
) -> Result<(FeatureMap<T>, DecoderTrace<T>), FusionError> {
    let (ws, hs, c) = (memory.ws(), memory.hs(), memory.channels());
    if depth.len() != memory.len() {
        return Err(FusionError::DimensionMismatch(format!(
            "{} depth values for {} pixels",
            depth.len(),
            memory.len()
        )));
    }
    if embed.weight.len() != c {
        return Err(FusionError::DimensionMismatch(format!("embedding width {} vs {c} channels", embed.weight.len())));
    }
    check_pe(ws, hs, c, pe)?;
    if mask.len() != memory.len() {
        return Err(FusionError::DimensionMismatch("mask size vs decoder map".into()));
    }
    let mut x = Mat::from_fn(depth.len(), c, |i, ch| depth[i] * embed.weight[ch] + embed.bias[ch]);
    x.add_assign(pe.matrix());
    let mut trace = DecoderTrace { layers: Vec::with_capacity(layers.len()) };
    for l in layers {
        let (x1, a) = attn_block_forward(&x, &l.norm_self, &l.self_attn, mask, opts)?;
        let (x2, cr) = cross_block_forward(&x1, memory.matrix(), &l.norm_cross, &l.cross, mask, opts)?;
        let (x3, f) = ffn_block_forward(&x2, ws, hs, &l.norm_ffn, &l.ffn);
        trace.layers.push((a, cr, f));
        x = x3;
    }
    Ok((FeatureMap::from_parts(ws, hs, x), trace))
}

/// One training/evaluation example for the depth head.
#[derive(Debug, Clone)]
pub struct HeadExample<'a, T> {
    pub image: &'a FeatureMap<T>,
    /// Flattened encoded ground depth, one value per pixel.
    pub depth: &'a [T],
    /// `(pixel index, regression target)` pairs read out by the head.
    pub readouts: &'a [(usize, T)],
}

/// Gradients of the head loss with respect to parameters and inputs.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: FusionParams<T>,
    pub image: Mat<T>,
    pub depth: Vec<T>,
}

/// Encoder (+ decoder when it has layers) + depth head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T> {
    pub config: ModelConfig,
    pub params: FusionParams<T>,
}

/// Forward pass results kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    encoder: EncoderTrace<T>,
    decoder: Option<DecoderTrace<T>>,
    encoder_out: FeatureMap<T>,
    output: FeatureMap<T>,
}

impl<T: Scalar> Trace<T> {
    /// Smallest `|x|` over every ReLU input in the pass.
    pub fn min_abs_relu_input(&self) -> T {
        let enc = self.encoder.layers.iter().map(|(_, f)| &f.pre);
        let dec = self.decoder.iter().flat_map(|d| d.layers.iter().map(|(_, _, f)| &f.pre));
        enc.chain(dec)
            .flat_map(|m| m.data().iter())
            .fold(T::infinity(), |m, v| m.min(v.abs()))
    }

    /// Smallest row standard deviation entering any layer norm.
    pub fn min_layer_norm_std(&self) -> T {
        let mut stds = Vec::new();
        for (a, f) in &self.encoder.layers {
            stds.push(a.norm.min_std());
            stds.push(f.norm.min_std());
        }
        if let Some(d) = &self.decoder {
            for (a, c, f) in &d.layers {
                stds.extend([a.norm.min_std(), c.norm.min_std(), f.norm.min_std()]);
            }
        }
        stds.into_iter().fold(T::infinity(), |m, v| m.min(v))
    }

    /// Every attention matrix of the pass, one per head: encoder self-attention,
    /// then decoder self- and cross-attention layer by layer.
    pub fn attention_weights(&self) -> Vec<&Mat<T>> {
        let mut out: Vec<&Mat<T>> = self.encoder.layers.iter().flat_map(|(a, _)| &a.weights).collect();
        if let Some(d) = &self.decoder {
            for (a, c, _) in &d.layers {
                out.extend(&a.weights);
                out.extend(&c.weights);
            }
        }
        out
    }

    pub fn output(&self) -> &FeatureMap<T> {
        &self.output
    }

    pub fn encoder_output(&self) -> &FeatureMap<T> {
        &self.encoder_out
    }
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(config: ModelConfig, params: FusionParams<T>) -> Result<Self, FusionError> {
        config.validate()?;
        if params.encoder.len() != config.encoder_layers || params.decoder.len() != config.decoder_layers {
            return Err(FusionError::InvalidConfig("layer counts do not match the config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn random<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, FusionError> {
        config.validate()?;
        let params = FusionParams::random(&config, rng);
        Ok(Self { config, params })
    }

    pub fn uses_decoder(&self) -> bool {
        !self.params.decoder.is_empty()
    }

    pub fn forward(
        &self,
        image: &FeatureMap<T>,
        depth: &[T],
        pe: &PositionEncoding<T>,
        mask: &AttentionMask,
    ) -> Result<Trace<T>, FusionError> {
        let opts = self.config.attention_options();
        let (encoder_out, encoder) = encode_traced(image, pe, &self.params.encoder, mask, opts)?;
        let (output, decoder) = if self.uses_decoder() {
            let (out, tr) =
                decode_traced(depth, &encoder_out, pe, &self.params.decoder, &self.params.embed, mask, opts)?;
            (out, Some(tr))
        } else {
            (encoder_out.clone(), None)
        };
        Ok(Trace { encoder, decoder, encoder_out, output })
    }

    pub fn predict(&self, trace: &Trace<T>, pixel: usize) -> T {
        self.params.head.predict(trace.output.matrix(), pixel)
    }

    /// Mean squared error of the head over `ex.readouts`.
    pub fn loss(&self, ex: &HeadExample<'_, T>, pe: &PositionEncoding<T>, mask: &AttentionMask) -> Result<T, FusionError> {
        let trace = self.forward(ex.image, ex.depth, pe, mask)?;
        Ok(self.head_loss(&trace, ex.readouts))
    }

    fn head_loss(&self, trace: &Trace<T>, readouts: &[(usize, T)]) -> T {
        if readouts.is_empty() {
            return T::zero();
        }
        let n = T::from_usize(readouts.len()).unwrap();
        readouts
            .iter()
            .map(|&(p, t)| {
                let e = self.predict(trace, p) - t;
                e * e
            })
            .sum::<T>()
            / n
    }

    /// Loss and its analytic gradient with respect to every parameter and input.
    pub fn loss_and_gradients(
        &self,
        ex: &HeadExample<'_, T>,
        pe: &PositionEncoding<T>,
        mask: &AttentionMask,
    ) -> Result<(T, Gradients<T>), FusionError> {
        let trace = self.forward(ex.image, ex.depth, pe, mask)?;
        let loss = self.head_loss(&trace, ex.readouts);
        let c = self.config.channels;
        let mut d_out = Mat::zeros(trace.output.len(), c);
        let mut grads = self.params.zeros_like();
        if !ex.readouts.is_empty() {
            let n = T::from_usize(ex.readouts.len()).unwrap();
            for &(p, t) in ex.readouts {
                let e = T::lit(2.0) * (self.predict(&trace, p) - t) / n;
                let h = trace.output.matrix().row(p);
                for ch in 0..c {
                    grads.head.weight[ch] += e * h[ch];
                    let cur = d_out.get(p, ch);
                    d_out.set(p, ch, cur + e * self.params.head.weight[ch]);
                }
                grads.head.bias[0] += e;
            }
        }
        let (d_image, d_depth) = self.backward(&trace, ex.depth, &d_out, &mut grads)?;
        Ok((loss, Gradients { params: grads, image: d_image, depth: d_depth }))
    }

    /// Back-propagates `d_out` (gradient w.r.t. the model output) into `grads`
    /// and returns the gradients for the image features and the depth values.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        depth: &[T],
        d_out: &Mat<T>,
        grads: &mut FusionParams<T>,
    ) -> Result<(Mat<T>, Vec<T>), FusionError> {
        let (ws, hs) = (trace.output.ws(), trace.output.hs());
        let heads = self.config.heads;
        let memory = trace.encoder_out.matrix();
        let mut d_memory = Mat::zeros(memory.rows(), memory.cols());
        let mut d_depth = vec![T::zero(); depth.len()];

        if let Some(dec) = &trace.decoder {
            let mut dx = d_out.clone();
            for (i, (a, cr, f)) in dec.layers.iter().enumerate().rev() {
                let w = &self.params.decoder[i];
                let g = &mut grads.decoder[i];
                dx = ffn_block_backward(&dx, f, ws, hs, &w.norm_ffn, &w.ffn, &mut g.norm_ffn, &mut g.ffn);
                let (dx2, dm) =
                    cross_block_backward(&dx, cr, memory, &w.norm_cross, &w.cross, heads, &mut g.norm_cross, &mut g.cross);
                d_memory.add_assign(&dm);
                dx = attn_block_backward(&dx2, a, &w.norm_self, &w.self_attn, &mut g.norm_self, &mut g.self_attn);
            }
            // queries = depth · w + b + pe
            for (i, dd) in d_depth.iter_mut().enumerate() {
                let row = dx.row(i);
                for ch in 0..row.len() {
                    grads.embed.weight[ch] += row[ch] * depth[i];
                    grads.embed.bias[ch] += row[ch];
                    *dd += row[ch] * self.params.embed.weight[ch];
                }
            }
        } else {
            d_memory.add_assign(d_out);
        }

        let mut dx = d_memory;
        for (i, (a, f)) in trace.encoder.layers.iter().enumerate().rev() {
            let w = &self.params.encoder[i];
            let g = &mut grads.encoder[i];
            dx = ffn_block_backward(&dx, f, ws, hs, &w.norm_ffn, &w.ffn, &mut g.norm_ffn, &mut g.ffn);
            dx = attn_block_backward(&dx, a, &w.norm_attn, &w.attn, &mut g.norm_attn, &mut g.attn);
        }
        Ok((dx, d_depth))
    }
}
