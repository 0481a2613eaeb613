use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::LAYER_NORM_EPS;
use super::VitError;
use crate::init::gaussian;
use crate::tokenizer::{EmbeddingParams, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    LAYER_NORM_EPS
}

impl ViTConfig {
    pub fn new(layers: usize, hidden: usize, mlp_dim: usize, heads: usize) -> Result<Self, VitError> {
        let cfg = Self { layers, hidden, mlp_dim, heads, layer_norm_eps: LAYER_NORM_EPS };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Two layers, width 8, two heads.
    pub fn tiny() -> Self {
        Self { layers: 2, hidden: 8, mlp_dim: 16, heads: 2, layer_norm_eps: LAYER_NORM_EPS }
    }

    /// ViT-Base: 12 layers, width 768, MLP 3072, 12 heads.
    pub fn base() -> Self {
        Self { layers: 12, hidden: 768, mlp_dim: 3072, heads: 12, layer_norm_eps: LAYER_NORM_EPS }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "base" => Some(Self::base()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        if self.hidden == 0 || self.mlp_dim == 0 || self.heads == 0 {
            return Err(VitError::InvalidConfig(format!("{self:?} has a zero dimension")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(VitError::InvalidConfig(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(VitError::InvalidConfig("layer-norm eps must be > 0".into()));
        }
        Ok(())
    }

    /// `K_h = P / n`.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn layer_param_count(&self) -> usize {
        LayerTensor::ALL.iter().map(|t| {
            let (r, c) = t.shape(self);
            r * c
        }).sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.layers * self.layer_param_count()
    }
}

/// The tensors of one encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerTensor {
    AttnNormGamma,
    AttnNormBeta,
    Query,
    Key,
    Value,
    AttnOut,
    MlpNormGamma,
    MlpNormBeta,
    MlpInWeight,
    MlpInBias,
    MlpOutWeight,
    MlpOutBias,
}

impl LayerTensor {
    pub const ALL: [LayerTensor; 12] = [
        Self::AttnNormGamma,
        Self::AttnNormBeta,
        Self::Query,
        Self::Key,
        Self::Value,
        Self::AttnOut,
        Self::MlpNormGamma,
        Self::MlpNormBeta,
        Self::MlpInWeight,
        Self::MlpInBias,
        Self::MlpOutWeight,
        Self::MlpOutBias,
    ];

    pub fn shape(self, cfg: &ViTConfig) -> (usize, usize) {
        let p = cfg.hidden;
        match self {
            Self::AttnNormGamma | Self::AttnNormBeta | Self::MlpNormGamma | Self::MlpNormBeta | Self::MlpOutBias => (1, p),
            Self::Query | Self::Key | Self::Value | Self::AttnOut => (p, p),
            Self::MlpInWeight => (p, cfg.mlp_dim),
            Self::MlpInBias => (1, cfg.mlp_dim),
            Self::MlpOutWeight => (cfg.mlp_dim, p),
        }
    }

    fn is_gain(self) -> bool {
        matches!(self, Self::AttnNormGamma | Self::MlpNormGamma)
    }

    fn is_weight(self) -> bool {
        matches!(self, Self::Query | Self::Key | Self::Value | Self::AttnOut | Self::MlpInWeight | Self::MlpOutWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gamma: Array2<f64>,
    pub attn_norm_beta: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_msa: Array2<f64>,
    pub mlp_norm_gamma: Array2<f64>,
    pub mlp_norm_beta: Array2<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array2<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array2<f64>,
}

impl LayerParams {
    fn build(cfg: &ViTConfig, mut make: impl FnMut(LayerTensor, (usize, usize)) -> Array2<f64>) -> Self {
        let mut next = |t: LayerTensor| make(t, t.shape(cfg));
        Self {
            attn_norm_gamma: next(LayerTensor::AttnNormGamma),
            attn_norm_beta: next(LayerTensor::AttnNormBeta),
            w_q: next(LayerTensor::Query),
            w_k: next(LayerTensor::Key),
            w_v: next(LayerTensor::Value),
            w_msa: next(LayerTensor::AttnOut),
            mlp_norm_gamma: next(LayerTensor::MlpNormGamma),
            mlp_norm_beta: next(LayerTensor::MlpNormBeta),
            mlp_w1: next(LayerTensor::MlpInWeight),
            mlp_b1: next(LayerTensor::MlpInBias),
            mlp_w2: next(LayerTensor::MlpOutWeight),
            mlp_b2: next(LayerTensor::MlpOutBias),
        }
    }

    pub fn zeros(cfg: &ViTConfig) -> Self {
        Self::build(cfg, |_, shape| Array2::zeros(shape))
    }

    pub fn get(&self, t: LayerTensor) -> &Array2<f64> {
        match t {
            LayerTensor::AttnNormGamma => &self.attn_norm_gamma,
            LayerTensor::AttnNormBeta => &self.attn_norm_beta,
            LayerTensor::Query => &self.w_q,
            LayerTensor::Key => &self.w_k,
            LayerTensor::Value => &self.w_v,
            LayerTensor::AttnOut => &self.w_msa,
            LayerTensor::MlpNormGamma => &self.mlp_norm_gamma,
            LayerTensor::MlpNormBeta => &self.mlp_norm_beta,
            LayerTensor::MlpInWeight => &self.mlp_w1,
            LayerTensor::MlpInBias => &self.mlp_b1,
            LayerTensor::MlpOutWeight => &self.mlp_w2,
            LayerTensor::MlpOutBias => &self.mlp_b2,
        }
    }

    pub fn get_mut(&mut self, t: LayerTensor) -> &mut Array2<f64> {
        match t {
            LayerTensor::AttnNormGamma => &mut self.attn_norm_gamma,
            LayerTensor::AttnNormBeta => &mut self.attn_norm_beta,
            LayerTensor::Query => &mut self.w_q,
            LayerTensor::Key => &mut self.w_k,
            LayerTensor::Value => &mut self.w_v,
            LayerTensor::AttnOut => &mut self.w_msa,
            LayerTensor::MlpNormGamma => &mut self.mlp_norm_gamma,
            LayerTensor::MlpNormBeta => &mut self.mlp_norm_beta,
            LayerTensor::MlpInWeight => &mut self.mlp_w1,
            LayerTensor::MlpInBias => &mut self.mlp_b1,
            LayerTensor::MlpOutWeight => &mut self.mlp_w2,
            LayerTensor::MlpOutBias => &mut self.mlp_b2,
        }
    }
}

/// Addresses one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    PatchProjection,
    Positional,
    Layer(usize, LayerTensor),
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PatchProjection => write!(f, "E"),
            Self::Positional => write!(f, "E_pos"),
            Self::Layer(j, t) => write!(f, "layer{j}.{t:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub layers: Vec<LayerParams>,
    pub embedding: Option<EmbeddingParams>,
}

impl ViTParams {
    /// Weights `N(0, 0.02²)`, biases 0, LayerNorm gain 1 and shift 0.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..cfg.layers)
            .map(|_| {
                LayerParams::build(cfg, |t, (r, c)| {
                    if t.is_weight() {
                        gaussian(r, c, INIT_STD, &mut rng)
                    } else if t.is_gain() {
                        Array2::ones((r, c))
                    } else {
                        Array2::zeros((r, c))
                    }
                })
            })
            .collect();
        Self { layers, embedding: None }
    }

    /// Every tensor random (gains around 1), for probing gradients away from
    /// the symmetric initialization.
    pub fn random(cfg: &ViTConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..cfg.layers)
            .map(|_| {
                LayerParams::build(cfg, |t, (r, c)| {
                    let noise = gaussian(r, c, std, &mut rng);
                    if t.is_gain() {
                        noise + 1.0
                    } else {
                        noise
                    }
                })
            })
            .collect();
        Self { layers, embedding: None }
    }

    pub fn with_embedding(mut self, embedding: EmbeddingParams) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        if self.embedding.is_some() {
            keys.push(ParamKey::PatchProjection);
            keys.push(ParamKey::Positional);
        }
        for j in 0..self.layers.len() {
            keys.extend(LayerTensor::ALL.iter().map(|&t| ParamKey::Layer(j, t)));
        }
        keys
    }

    pub fn tensor(&self, key: ParamKey) -> Option<&Array2<f64>> {
        match key {
            ParamKey::PatchProjection => self.embedding.as_ref().map(|e| &e.projection),
            ParamKey::Positional => self.embedding.as_ref().map(|e| &e.positional),
            ParamKey::Layer(j, t) => self.layers.get(j).map(|l| l.get(t)),
        }
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut Array2<f64>> {
        match key {
            ParamKey::PatchProjection => self.embedding.as_mut().map(|e| &mut e.projection),
            ParamKey::Positional => self.embedding.as_mut().map(|e| &mut e.positional),
            ParamKey::Layer(j, t) => self.layers.get_mut(j).map(|l| l.get_mut(t)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.keys().iter().map(|&k| self.tensor(k).map_or(0, |t| t.len())).sum()
    }

    pub fn check(&self, cfg: &ViTConfig) -> Result<(), VitError> {
        cfg.validate()?;
        if self.layers.len() != cfg.layers {
            return Err(VitError::ShapeMismatch(format!("{} layers, config says {}", self.layers.len(), cfg.layers)));
        }
        for (j, layer) in self.layers.iter().enumerate() {
            for t in LayerTensor::ALL {
                if layer.get(t).dim() != t.shape(cfg) {
                    return Err(VitError::ShapeMismatch(format!(
                        "layer {j} {t:?} is {:?}, expected {:?}",
                        layer.get(t).dim(),
                        t.shape(cfg)
                    )));
                }
            }
        }
        if let Some(e) = &self.embedding {
            if e.embed_dim() != cfg.hidden || e.positional.ncols() != cfg.hidden {
                return Err(VitError::ShapeMismatch(format!("embedding width {} vs hidden {}", e.embed_dim(), cfg.hidden)));
            }
        }
        Ok(())
    }
}
