//! XLM-R style post-LayerNorm transformer encoder with a linear
//! token-classification head, plus the fine-tuning trainer.
//!
//! Weights of linear layers are stored `[in × out]` so a layer computes
//! `x · W + b`. The masked-language-model decoder reuses the word embedding
//! matrix (`h · Eᵀ`), so it adds no parameters.

mod config;
mod forward;
mod train;

pub use config::EncoderConfig;
pub use forward::{Inputs, TokenClassifier};
pub use train::{
    finetune, pretrain_mlm, train_loop, MlmMasking, NoHooks, StepContext, TrainHooks, TrainSpec,
    TrainTrace,
};

pub(crate) use forward::{
    classify, encode, mlm_logits, mlm_mask_batch, Backend, BoundParams, Dropout,
};
pub(crate) use train::train_with;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// How a parameter is initialized and whether pruning may touch it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    /// Attention or FFN weight matrix.
    Linear,
    /// Classifier weight matrix.
    Head,
    Bias,
    NormGain,
    NormBias,
}

/// Canonical parameter names, shapes and kinds for a configuration.
pub fn param_layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let h = config.hidden_size;
    let f = config.ffn_size;
    let mut out = vec![
        (
            "embeddings.word".into(),
            vec![config.vocab_size, h],
            ParamKind::Embedding,
        ),
        (
            "embeddings.position".into(),
            vec![config.max_positions, h],
            ParamKind::Embedding,
        ),
        ("embeddings.norm.gain".into(), vec![h], ParamKind::NormGain),
        ("embeddings.norm.bias".into(), vec![h], ParamKind::NormBias),
    ];
    for l in 0..config.num_layers {
        for proj in ["query", "key", "value", "output"] {
            out.push((
                format!("layers.{l}.attention.{proj}.weight"),
                vec![h, h],
                ParamKind::Linear,
            ));
            out.push((
                format!("layers.{l}.attention.{proj}.bias"),
                vec![h],
                ParamKind::Bias,
            ));
        }
        out.push((
            format!("layers.{l}.attention.norm.gain"),
            vec![h],
            ParamKind::NormGain,
        ));
        out.push((
            format!("layers.{l}.attention.norm.bias"),
            vec![h],
            ParamKind::NormBias,
        ));
        out.push((
            format!("layers.{l}.ffn.up.weight"),
            vec![h, f],
            ParamKind::Linear,
        ));
        out.push((format!("layers.{l}.ffn.up.bias"), vec![f], ParamKind::Bias));
        out.push((
            format!("layers.{l}.ffn.down.weight"),
            vec![f, h],
            ParamKind::Linear,
        ));
        out.push((
            format!("layers.{l}.ffn.down.bias"),
            vec![h],
            ParamKind::Bias,
        ));
        out.push((
            format!("layers.{l}.ffn.norm.gain"),
            vec![h],
            ParamKind::NormGain,
        ));
        out.push((
            format!("layers.{l}.ffn.norm.bias"),
            vec![h],
            ParamKind::NormBias,
        ));
    }
    out.push((
        "classifier.weight".into(),
        vec![h, config.num_classes],
        ParamKind::Head,
    ));
    out.push((
        "classifier.bias".into(),
        vec![config.num_classes],
        ParamKind::Bias,
    ));
    out
}

/// Names of the attention and FFN weight matrices (the default pruning scope).
pub fn prunable_names(config: &EncoderConfig) -> Vec<String> {
    param_layout(config)
        .into_iter()
        .filter(|(_, _, k)| *k == ParamKind::Linear)
        .map(|(n, _, _)| n)
        .collect()
}

/// Encoder parameters in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: Vec<Param>,
}

impl EncoderModel {
    /// Fresh model: weight matrices from a truncated normal (std 0.02),
    /// biases zero, norm gains one.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape, kind)| {
                let mut value = Tensor::zeros(&shape);
                init_values(&mut value, kind, &mut rng);
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assemble from explicit tensors, which must match the canonical layout exactly.
    pub fn from_params(config: EncoderConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Data(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Param> {
        self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Exact number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.params.iter().map(|p| p.value.count_nonzero()).sum()
    }

    /// Re-initialize the classification head with a new number of classes.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let mut config = self.config;
        config.num_classes = num_classes;
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let h = config.hidden_size;
        let mut w = Tensor::zeros(&[h, num_classes]);
        init_values(&mut w, ParamKind::Head, &mut rng);
        let n = self.params.len();
        self.params[n - 2].value = w;
        self.params[n - 1].value = Tensor::zeros(&[num_classes]);
        self.config = config;
        Ok(())
    }

    pub fn set_dropout(&mut self, dropout: f32) -> Result<()> {
        let mut config = self.config;
        config.dropout = dropout;
        config.validate()?;
        self.config = config;
        Ok(())
    }
}

pub(crate) fn init_values(t: &mut Tensor, kind: ParamKind, rng: &mut Rng) {
    match kind {
        ParamKind::Embedding | ParamKind::Linear | ParamKind::Head => {
            for v in t.data_mut() {
                *v = rng.truncated_normal(INIT_STD);
            }
        }
        ParamKind::NormGain => t.data_mut().fill(1.0),
        ParamKind::Bias | ParamKind::NormBias => t.data_mut().fill(0.0),
    }
}
