//! Ground-aware transformer fusion at toy scale.

pub mod checkpoint;
pub mod feature;
pub mod gradcheck;
pub mod layers;
pub mod mask;
pub mod model;
pub mod posenc;
pub mod tensor;
pub mod train;

pub use feature::FeatureMap;
pub use layers::MaskMode;
pub use mask::AttentionMask;
pub use model::{
    conv_ffn, decode, encode, masked_self_attention, self_attention_weights, AttentionOptions, CrossAttention,
    DecoderLayerWeights, DepthEmbedding, DepthHead, FusionModel, FusionParams, Gradients, HeadExample,
    LayerWeights, ModelConfig, NormPlacement, SelfAttention, Trace,
};
pub use posenc::PositionEncoding;
pub use tensor::Mat;
