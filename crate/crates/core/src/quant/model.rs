use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{
    absmax_quantize, int8_matmul, int8_matmul_with, quantize_with_outliers, QuantAxis,
    QuantizedTensor,
};
use crate::error::{Error, Result};
use crate::model::{
    classify, encode, param_layout, Backend, EncoderConfig, EncoderModel, Inputs, ParamKind,
    TokenClassifier,
};
use crate::tensor::{attention_core, AttentionDims, Tape, Tensor, Var};

/// How a model's matrix products are carried out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantMode {
    /// int8 linear weights; activations quantized per token at run time.
    Dynamic,
    /// Every matrix product runs in int8 with activation columns at or above
    /// `threshold` routed through fp32.
    Mixed { threshold: f32 },
}

impl QuantMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            QuantMode::Mixed { threshold } if !(threshold > 0.0) => Err(Error::Parameter(format!(
                "outlier threshold must be positive, got {threshold}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            QuantMode::Dynamic => "dynamic",
            QuantMode::Mixed { .. } => "int8-mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantValue {
    Float(Tensor),
    Int8(QuantizedTensor),
}

impl QuantValue {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            QuantValue::Float(t) => t.shape().to_vec(),
            QuantValue::Int8(q) => q.shape().to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// fp32 view; int8 values are dequantized.
    pub fn to_tensor(&self) -> Tensor {
        match self {
            QuantValue::Float(t) => t.clone(),
            QuantValue::Int8(q) => q.dequantize(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParam {
    pub name: String,
    pub value: QuantValue,
}

/// Immutable encoder whose matrices are stored in int8.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    config: EncoderConfig,
    mode: QuantMode,
    params: Vec<QuantParam>,
}

/// Which parameters a mode stores in int8, and along which axis.
fn int8_axis(kind: ParamKind, name: &str, mode: QuantMode) -> Option<QuantAxis> {
    match kind {
        ParamKind::Linear | ParamKind::Head => Some(QuantAxis::Columns),
        // the word table is also the operand of the tied masked-LM decoder
        ParamKind::Embedding
            if name == "embeddings.word" && matches!(mode, QuantMode::Mixed { .. }) =>
        {
            Some(QuantAxis::Rows)
        }
        _ => None,
    }
}

fn quantize(model: &EncoderModel, mode: QuantMode) -> Result<QuantizedModel> {
    mode.validate()?;
    let threshold = match mode {
        QuantMode::Dynamic => f32::INFINITY,
        QuantMode::Mixed { threshold } => threshold,
    };
    let layout = param_layout(model.config());
    let mut params = Vec::with_capacity(layout.len());
    for ((name, _, kind), p) in layout.iter().zip(model.params()) {
        if !p.value.is_finite() {
            return Err(Error::Data(format!("parameter {name} is not finite")));
        }
        let value = match int8_axis(*kind, name, mode) {
            Some(axis) => QuantValue::Int8(quantize_with_outliers(&p.value, axis, threshold, &[])?),
            None => QuantValue::Float(p.value.clone()),
        };
        params.push(QuantParam {
            name: name.clone(),
            value,
        });
    }
    Ok(QuantizedModel {
        config: *model.config(),
        mode,
        params,
    })
}

/// int8 linear weights with per-output-column scales; everything else fp32.
pub fn quantize_model_dynamic(model: &EncoderModel) -> Result<QuantizedModel> {
    quantize(model, QuantMode::Dynamic)
}

/// Vector-wise int8 with mixed-precision outlier decomposition.
///
/// Weight rows (input features) and word-embedding columns whose largest
/// magnitude reaches `threshold` are stored exactly in fp32.
pub fn quantize_model_int8_mixed(model: &EncoderModel, threshold: f32) -> Result<QuantizedModel> {
    quantize(model, QuantMode::Mixed { threshold })
}

impl QuantizedModel {
    /// Assemble from stored parts, checking names, shapes and storage kinds.
    pub fn from_parts(
        config: EncoderConfig,
        mode: QuantMode,
        params: Vec<QuantParam>,
    ) -> Result<Self> {
        config.validate()?;
        mode.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, kind), p) in layout.iter().zip(&params) {
            if *name != p.name || *shape != p.value.shape() {
                return Err(Error::Data(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            let expected = int8_axis(*kind, name, mode);
            let ok = match (&p.value, expected) {
                (QuantValue::Int8(q), Some(axis)) => q.axis == axis && q.validate().is_ok(),
                (QuantValue::Float(_), None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Data(format!(
                    "parameter {name} has the wrong storage for {} mode",
                    mode.name()
                )));
            }
        }
        Ok(Self {
            config,
            mode,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn params(&self) -> &[QuantParam] {
        &self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Nonzero stored values (int8 codes and fp32 values alike).
    pub fn count_nonzero(&self) -> usize {
        self.params
            .iter()
            .map(|p| match &p.value {
                QuantValue::Float(t) => t.count_nonzero(),
                QuantValue::Int8(q) => {
                    q.q.iter().filter(|v| **v != 0).count()
                        + q.outlier_values.iter().filter(|v| **v != 0.0).count()
                }
            })
            .sum()
    }

    /// fp32 model with every int8 tensor dequantized.
    pub fn dequantize(&self) -> Result<EncoderModel> {
        EncoderModel::from_params(
            self.config,
            self.params
                .iter()
                .map(|p| crate::model::Param {
                    name: p.name.clone(),
                    value: p.value.to_tensor(),
                })
                .collect(),
        )
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Data(format!("model has no parameter {name}")))
    }
}

struct QuantBackend<'m> {
    model: &'m QuantizedModel,
    vars: Vec<Option<Var>>,
}

impl Backend for QuantBackend<'_> {
    fn config(&self) -> &EncoderConfig {
        &self.model.config
    }

    fn tensor(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self.model.index_of(name)?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let v = tape.constant(self.model.params[i].value.to_tensor());
        self.vars[i] = Some(v);
        Ok(v)
    }

    fn linear(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = &self.model.params[self.model.index_of(&format!("{prefix}.weight"))?].value;
        let y = match w {
            QuantValue::Int8(wq) => {
                let xv = tape.value(x);
                let xq = match self.model.mode {
                    QuantMode::Dynamic => absmax_quantize(xv, QuantAxis::Rows)?,
                    QuantMode::Mixed { threshold } => {
                        quantize_with_outliers(xv, QuantAxis::Rows, threshold, &wq.outliers)?
                    }
                };
                let out = int8_matmul(&xq, wq)?;
                tape.constant(out)
            }
            QuantValue::Float(_) => {
                let wv = self.tensor(tape, &format!("{prefix}.weight"))?;
                tape.matmul(x, wv)?
            }
        };
        let b = self.tensor(tape, &format!("{prefix}.bias"))?;
        tape.add_bias(y, b)
    }

    fn attention(
        &mut self,
        tape: &mut Tape,
        qkv: [Var; 3],
        dims: AttentionDims,
        key_mask: &[bool],
    ) -> Result<Var> {
        let threshold = match self.model.mode {
            QuantMode::Dynamic => return tape.attention(qkv[0], qkv[1], qkv[2], dims, key_mask),
            QuantMode::Mixed { threshold } => threshold,
        };
        let (out, _) = attention_core(
            tape.value(qkv[0]).data(),
            tape.value(qkv[1]).data(),
            tape.value(qkv[2]).data(),
            dims,
            key_mask,
            &mut |a, b, m, k, n| {
                let at = Tensor::new(vec![m, k], a.to_vec())?;
                let bt = Tensor::new(vec![k, n], b.to_vec())?;
                let aq = quantize_with_outliers(&at, QuantAxis::Rows, threshold, &[])?;
                let bq = absmax_quantize(&bt, QuantAxis::Columns)?;
                Ok(int8_matmul_with(&aq, &bq, Some(b))?.into_data())
            },
        )?;
        Ok(tape.constant(Tensor::new(
            vec![dims.batch * dims.seq, dims.hidden()],
            out,
        )?))
    }
}

impl TokenClassifier for QuantizedModel {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn logits(&self, inputs: &Inputs<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut backend = QuantBackend {
            model: self,
            vars: vec![None; self.params.len()],
        };
        let (hidden, _) = encode(&mut backend, &mut tape, inputs, &mut None)?;
        let logits = classify(&mut backend, &mut tape, hidden)?;
        tape.value(logits)
            .clone()
            .reshape(&[inputs.batch, inputs.seq, self.config.num_classes])
    }
}
