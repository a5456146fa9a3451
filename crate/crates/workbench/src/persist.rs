//! The `SDCW` binary model format and the vocabulary/tag sidecar files.
//!
//! All integers and floats are little-endian. A file is
//!
//! ```text
//! "SDCW" | version u16 | config | mode u8 | threshold f32 | flags u8
//!        | [mask threshold f32 | target sparsity f64]   (flags bit 0)
//!        | record count u32 | records...
//! ```
//!
//! where the config block is layers, heads, hidden, ffn, vocab, positions and
//! classes as u32 followed by dropout as f32. Each record is
//!
//! ```text
//! name length u16 | name | dtype u8 | rank u8 | dims u32 * rank | payload
//! ```
//!
//! with payloads by dtype: 0 dense (f32 * n), 1 sparse (count u32, then
//! (index u32, value f32) pairs), 2 int8 (axis u8, scales f32 * vectors,
//! outlier count u32, outlier indices u32, outlier values f32, codes i8 * n),
//! 3 keep-mask bitmap (LSB first, one bit per element).

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use sdcw_core::data::{TagSet, Vocabulary};
use sdcw_core::model::{Param, TokenClassifier};
use sdcw_core::prune::{PruneMask, TensorMask};
use sdcw_core::quant::{
    QuantAxis, QuantMode, QuantParam, QuantValue, QuantizedModel, QuantizedTensor,
};
use sdcw_core::{EncoderConfig, EncoderModel, Tensor};

use crate::error::{WbError, WbResult};

pub const MAGIC: &[u8; 4] = b"SDCW";
pub const FORMAT_VERSION: u16 = 1;

pub const DTYPE_DENSE: u8 = 0;
pub const DTYPE_SPARSE: u8 = 1;
pub const DTYPE_INT8: u8 = 2;
pub const DTYPE_MASK: u8 = 3;

const MODE_FP32: u8 = 0;
const MODE_DYNAMIC: u8 = 1;
const MODE_MIXED: u8 = 2;
const FLAG_MASK: u8 = 1;
const MASK_PREFIX: &str = "mask:";

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Dense(EncoderModel),
    Quantized(QuantizedModel),
}

impl Weights {
    pub fn config(&self) -> &EncoderConfig {
        match self {
            Weights::Dense(m) => m.config(),
            Weights::Quantized(q) => q.config(),
        }
    }

    pub fn classifier(&self) -> &dyn TokenClassifier {
        match self {
            Weights::Dense(m) => m,
            Weights::Quantized(q) => q,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            Weights::Dense(_) => "fp32",
            Weights::Quantized(q) => q.mode().name(),
        }
    }

    pub fn total_params(&self) -> usize {
        match self {
            Weights::Dense(m) => m.count_params(),
            Weights::Quantized(q) => q.count_params(),
        }
    }

    pub fn nonzero_params(&self) -> usize {
        match self {
            Weights::Dense(m) => m.count_nonzero(),
            Weights::Quantized(q) => q.count_nonzero(),
        }
    }
}

/// Everything a model file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub weights: Weights,
    pub mask: Option<PruneMask>,
}

impl ModelFile {
    pub fn dense(model: EncoderModel) -> Self {
        Self {
            weights: Weights::Dense(model),
            mask: None,
        }
    }

    pub fn quantized(model: QuantizedModel) -> Self {
        Self {
            weights: Weights::Quantized(model),
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: PruneMask) -> Self {
        self.mask = Some(mask);
        self
    }
}

/// Bytes taken by `+0.0`-omitting sparse storage of `values`.
fn sparse_len(values: &[f32]) -> usize {
    4 + 8 * values.iter().filter(|v| v.to_bits() != 0).count()
}

/// Sparse storage is used when at least half the elements are `+0.0`.
pub fn prefers_sparse(values: &[f32]) -> bool {
    let zeros = values.iter().filter(|v| v.to_bits() == 0).count();
    !values.is_empty() && 2 * zeros >= values.len()
}

fn float_payload_len(values: &[f32]) -> usize {
    if prefers_sparse(values) {
        sparse_len(values)
    } else {
        4 * values.len()
    }
}

fn record_header_len(name: &str, rank: usize) -> usize {
    2 + name.len() + 1 + 1 + 4 * rank
}

fn int8_payload_len(q: &QuantizedTensor) -> usize {
    1 + 4 * q.scales.len() + 4 + 4 * q.outliers.len() + 4 * q.outlier_values.len() + q.q.len()
}

fn header_len(file: &ModelFile) -> usize {
    let mask = if file.mask.is_some() { 4 + 8 } else { 0 };
    4 + 2 + 7 * 4 + 4 + 1 + 4 + 1 + mask + 4
}

/// Exact size of the encoded file, from the layout alone.
pub fn encoded_len(file: &ModelFile) -> usize {
    let mut total = header_len(file);
    match &file.weights {
        Weights::Dense(m) => {
            for p in m.params() {
                total +=
                    record_header_len(&p.name, p.value.rank()) + float_payload_len(p.value.data());
            }
        }
        Weights::Quantized(q) => {
            for p in q.params() {
                total += match &p.value {
                    QuantValue::Float(t) => {
                        record_header_len(&p.name, t.rank()) + float_payload_len(t.data())
                    }
                    QuantValue::Int8(t) => record_header_len(&p.name, 2) + int8_payload_len(t),
                };
            }
        }
    }
    if let Some(mask) = &file.mask {
        for m in &mask.masks {
            total += record_header_len(&mask_record_name(&m.name), m.shape.len())
                + m.keep.len().div_ceil(8);
        }
    }
    total
}

fn mask_record_name(tensor: &str) -> String {
    format!("{MASK_PREFIX}{tensor}")
}

/// Counts bytes passing through to an inner writer.
struct Counting<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Write for Counting<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_record_header(
    w: &mut impl Write,
    name: &str,
    dtype: u8,
    shape: &[usize],
) -> io::Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| {
        io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("tensor name too long: {name}"),
        )
    })?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for d in shape {
        write_u32(w, *d)?;
    }
    Ok(())
}

fn write_float_record(w: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    let values = t.data();
    if prefers_sparse(values) {
        write_record_header(w, name, DTYPE_SPARSE, t.shape())?;
        write_u32(w, values.iter().filter(|v| v.to_bits() != 0).count())?;
        for (i, v) in values.iter().enumerate() {
            if v.to_bits() != 0 {
                write_u32(w, i)?;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    } else {
        write_record_header(w, name, DTYPE_DENSE, t.shape())?;
        write_f32s(w, values)
    }
}

fn write_int8_record(w: &mut impl Write, name: &str, q: &QuantizedTensor) -> io::Result<()> {
    write_record_header(w, name, DTYPE_INT8, &q.shape())?;
    w.write_all(&[match q.axis {
        QuantAxis::Rows => 0,
        QuantAxis::Columns => 1,
    }])?;
    write_f32s(w, &q.scales)?;
    write_u32(w, q.outliers.len())?;
    for i in &q.outliers {
        w.write_all(&i.to_le_bytes())?;
    }
    write_f32s(w, &q.outlier_values)?;
    let codes: Vec<u8> = q.q.iter().map(|v| *v as u8).collect();
    w.write_all(&codes)
}

/// Serialize into any writer; returns the byte count.
pub fn write_model(file: &ModelFile, out: impl Write) -> io::Result<u64> {
    let mut w = Counting {
        inner: BufWriter::new(out),
        written: 0,
    };
    let c = file.weights.config();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [
        c.num_layers,
        c.num_heads,
        c.hidden_size,
        c.ffn_size,
        c.vocab_size,
        c.max_positions,
        c.num_classes,
    ] {
        write_u32(&mut w, v)?;
    }
    w.write_all(&c.dropout.to_le_bytes())?;
    let (mode, threshold) = match &file.weights {
        Weights::Dense(_) => (MODE_FP32, 0.0),
        Weights::Quantized(q) => match q.mode() {
            QuantMode::Dynamic => (MODE_DYNAMIC, 0.0),
            QuantMode::Mixed { threshold } => (MODE_MIXED, threshold),
        },
    };
    w.write_all(&[mode])?;
    w.write_all(&f32::to_le_bytes(threshold))?;
    w.write_all(&[if file.mask.is_some() { FLAG_MASK } else { 0 }])?;
    if let Some(mask) = &file.mask {
        w.write_all(&mask.threshold.to_le_bytes())?;
        w.write_all(&mask.target_sparsity.to_le_bytes())?;
    }
    let n_params = match &file.weights {
        Weights::Dense(m) => m.params().len(),
        Weights::Quantized(q) => q.params().len(),
    };
    write_u32(
        &mut w,
        n_params + file.mask.as_ref().map_or(0, |m| m.masks.len()),
    )?;
    match &file.weights {
        Weights::Dense(m) => {
            for p in m.params() {
                write_float_record(&mut w, &p.name, &p.value)?;
            }
        }
        Weights::Quantized(q) => {
            for p in q.params() {
                match &p.value {
                    QuantValue::Float(t) => write_float_record(&mut w, &p.name, t)?,
                    QuantValue::Int8(t) => write_int8_record(&mut w, &p.name, t)?,
                }
            }
        }
    }
    if let Some(mask) = &file.mask {
        for m in &mask.masks {
            write_record_header(&mut w, &mask_record_name(&m.name), DTYPE_MASK, &m.shape)?;
            let mut bits = vec![0u8; m.keep.len().div_ceil(8)];
            for (i, keep) in m.keep.iter().enumerate() {
                if *keep {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&bits)?;
        }
    }
    w.flush()?;
    Ok(w.written)
}

/// Write `file` to `path`; returns the total bytes written.
pub fn save_model(file: &ModelFile, path: &Path) -> WbResult<u64> {
    let f = fs::File::create(path).map_err(|e| WbError::io(path, e))?;
    write_model(file, f).map_err(|e| WbError::io(path, e))
}

/// Size of the encoding without touching the filesystem.
pub fn serialized_size(file: &ModelFile) -> WbResult<u64> {
    write_model(file, io::sink()).map_err(|e| WbError::Format(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> WbResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| WbError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> WbResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> WbResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> WbResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> WbResult<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32(&mut self) -> WbResult<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> WbResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> WbResult<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| WbError::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

enum Payload {
    Float(Tensor),
    Int8(QuantizedTensor),
    Mask(Vec<bool>),
}

struct Record {
    name: String,
    shape: Vec<usize>,
    payload: Payload,
}

fn read_record(r: &mut Reader<'_>) -> WbResult<Record> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| WbError::Format("tensor name is not UTF-8".into()))?
        .to_string();
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let shape = (0..rank).map(|_| r.usize()).collect::<WbResult<Vec<_>>>()?;
    let n: usize = shape
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| WbError::Format(format!("{name}: shape overflow")))?;
    let payload = match dtype {
        DTYPE_DENSE => Payload::Float(Tensor::new(shape.clone(), r.f32s(n)?)?),
        DTYPE_SPARSE => {
            let count = r.usize()?;
            let mut values = vec![0.0f32; n];
            for _ in 0..count {
                let i = r.usize()?;
                let v = r.f32()?;
                *values.get_mut(i).ok_or_else(|| {
                    WbError::Format(format!("{name}: sparse index {i} out of range"))
                })? = v;
            }
            Payload::Float(Tensor::new(shape.clone(), values)?)
        }
        DTYPE_INT8 => {
            if rank != 2 {
                return Err(WbError::Format(format!(
                    "{name}: int8 record must be rank 2"
                )));
            }
            let axis = match r.u8()? {
                0 => QuantAxis::Rows,
                1 => QuantAxis::Columns,
                a => {
                    return Err(WbError::Format(format!(
                        "{name}: unknown quantization axis {a}"
                    )))
                }
            };
            let (rows, cols) = (shape[0], shape[1]);
            let vectors = match axis {
                QuantAxis::Rows => rows,
                QuantAxis::Columns => cols,
            };
            let scales = r.f32s(vectors)?;
            let n_out = r.usize()?;
            let outliers = (0..n_out).map(|_| r.u32()).collect::<WbResult<Vec<_>>>()?;
            let outlier_values = r.f32s(
                n_out
                    .checked_mul(vectors)
                    .ok_or_else(|| WbError::Format("length overflow".into()))?,
            )?;
            let q = r.take(n)?.iter().map(|b| *b as i8).collect();
            let t = QuantizedTensor {
                rows,
                cols,
                axis,
                q,
                scales,
                outliers,
                outlier_values,
            };
            t.validate()
                .map_err(|e| WbError::Format(format!("{name}: {e}")))?;
            Payload::Int8(t)
        }
        DTYPE_MASK => {
            let bits = r.take(n.div_ceil(8))?;
            Payload::Mask((0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect())
        }
        d => return Err(WbError::Format(format!("{name}: unknown dtype {d}"))),
    };
    Ok(Record {
        name,
        shape,
        payload,
    })
}

/// Decode a complete model file held in memory.
pub fn read_model(bytes: &[u8]) -> WbResult<ModelFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(WbError::Format("not an SDCW model file".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(WbError::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.usize()?;
    }
    let config = EncoderConfig {
        num_layers: dims[0],
        num_heads: dims[1],
        hidden_size: dims[2],
        ffn_size: dims[3],
        vocab_size: dims[4],
        max_positions: dims[5],
        num_classes: dims[6],
        dropout: r.f32()?,
    };
    let mode = r.u8()?;
    let threshold = r.f32()?;
    let flags = r.u8()?;
    let mask_meta = if flags & FLAG_MASK != 0 {
        Some((r.f32()?, r.f64()?))
    } else {
        None
    };
    let count = r.usize()?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        records.push(read_record(&mut r)?);
    }
    if r.pos != bytes.len() {
        return Err(WbError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut masks = Vec::new();
    let mut tensors = Vec::new();
    for rec in records {
        match (rec.name.strip_prefix(MASK_PREFIX), rec.payload) {
            (Some(name), Payload::Mask(keep)) => masks.push(TensorMask {
                name: name.to_string(),
                shape: rec.shape,
                keep,
            }),
            (None, Payload::Mask(_)) | (Some(_), _) => {
                return Err(WbError::Format(format!(
                    "{}: mask records need the mask prefix and dtype",
                    rec.name
                )))
            }
            (None, p) => tensors.push((rec.name, p)),
        }
    }

    let weights = match mode {
        MODE_FP32 => {
            let params = tensors
                .into_iter()
                .map(|(name, p)| match p {
                    Payload::Float(value) => Ok(Param { name, value }),
                    _ => Err(WbError::Format(format!(
                        "{name}: int8 record in an fp32 model"
                    ))),
                })
                .collect::<WbResult<Vec<_>>>()?;
            Weights::Dense(EncoderModel::from_params(config, params)?)
        }
        MODE_DYNAMIC | MODE_MIXED => {
            let quant_mode = if mode == MODE_DYNAMIC {
                QuantMode::Dynamic
            } else {
                QuantMode::Mixed { threshold }
            };
            let params = tensors
                .into_iter()
                .map(|(name, p)| {
                    let value = match p {
                        Payload::Float(t) => QuantValue::Float(t),
                        Payload::Int8(t) => QuantValue::Int8(t),
                        Payload::Mask(_) => unreachable!(),
                    };
                    QuantParam { name, value }
                })
                .collect();
            Weights::Quantized(QuantizedModel::from_parts(config, quant_mode, params)?)
        }
        m => return Err(WbError::Format(format!("unknown model mode {m}"))),
    };

    let mask = match mask_meta {
        Some((threshold, target_sparsity)) => {
            let mask = PruneMask {
                masks,
                threshold,
                target_sparsity,
            };
            for m in &mask.masks {
                let shape = match &weights {
                    Weights::Dense(model) => model.get(&m.name).map(|t| t.shape().to_vec()),
                    Weights::Quantized(q) => q
                        .params()
                        .iter()
                        .find(|p| p.name == m.name)
                        .map(|p| p.value.shape()),
                };
                if shape.as_deref() != Some(m.shape.as_slice()) {
                    return Err(WbError::Format(format!(
                        "mask for {} does not match the model",
                        m.name
                    )));
                }
            }
            Some(mask)
        }
        None if masks.is_empty() => None,
        None => return Err(WbError::Format("mask records without mask header".into())),
    };
    Ok(ModelFile { weights, mask })
}

pub fn load_model(path: &Path) -> WbResult<ModelFile> {
    let bytes = fs::read(path).map_err(|e| WbError::io(path, e))?;
    read_model(&bytes).map_err(|e| match e {
        WbError::Format(msg) => WbError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn vocab_path(model: &Path) -> PathBuf {
    model.with_extension("vocab")
}

pub fn tags_path(model: &Path) -> PathBuf {
    model.with_extension("tags")
}

fn write_lines(path: &Path, lines: &[String]) -> WbResult<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| WbError::io(path, e))
}

fn read_lines(path: &Path) -> WbResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| WbError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Vocabulary (one token per line, id order) and tag set (one label per line)
/// stored next to a model file.
pub fn save_sidecars(model: &Path, vocab: &Vocabulary, tags: &TagSet) -> WbResult<()> {
    write_lines(&vocab_path(model), vocab.tokens())?;
    write_lines(&tags_path(model), tags.labels())
}

pub fn load_sidecars(model: &Path) -> WbResult<(Vocabulary, TagSet)> {
    let vocab = Vocabulary::from_tokens(read_lines(&vocab_path(model))?)?;
    let tags = TagSet::from_labels(read_lines(&tags_path(model))?)?;
    Ok((vocab, tags))
}

/// Model file plus sidecars, checked against each other.
pub fn save_bundle(
    file: &ModelFile,
    path: &Path,
    vocab: &Vocabulary,
    tags: &TagSet,
) -> WbResult<u64> {
    let c = file.weights.config();
    if c.vocab_size != vocab.len() || c.num_classes != tags.len() {
        return Err(WbError::Format(format!(
            "model expects {} tokens and {} tags, sidecars have {} and {}",
            c.vocab_size,
            c.num_classes,
            vocab.len(),
            tags.len()
        )));
    }
    save_sidecars(path, vocab, tags)?;
    save_model(file, path)
}

pub fn load_bundle(path: &Path) -> WbResult<(ModelFile, Vocabulary, TagSet)> {
    let file = load_model(path)?;
    let (vocab, tags) = load_sidecars(path)?;
    let c = file.weights.config();
    if c.vocab_size != vocab.len() || c.num_classes != tags.len() {
        return Err(WbError::Format(format!(
            "{}: sidecar vocabulary or tag set does not match the model",
            path.display()
        )));
    }
    Ok((file, vocab, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sdcw_core::prune::{apply_mask, compute_mask, prunable_scope};
    use sdcw_core::quant::{quantize_model_dynamic, quantize_model_int8_mixed};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 16,
            ffn_size: 32,
            vocab_size: 40,
            max_positions: 16,
            num_classes: 5,
            dropout: 0.1,
        }
    }

    fn encode(file: &ModelFile) -> Vec<u8> {
        let mut out = Vec::new();
        let n = write_model(file, &mut out).unwrap();
        assert_eq!(n as usize, out.len());
        assert_eq!(encoded_len(file), out.len());
        out
    }

    #[test]
    fn dense_round_trip_is_bit_exact() {
        let mut model = EncoderModel::init(tiny(), 3).unwrap();
        model.get_mut("layers.0.ffn.up.bias").unwrap().data_mut()[0] = -0.0;
        let file = ModelFile::dense(model);
        let back = read_model(&encode(&file)).unwrap();
        let (Weights::Dense(a), Weights::Dense(b)) = (&file.weights, &back.weights) else {
            panic!("expected dense weights");
        };
        for (x, y) in a.params().iter().zip(b.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.value), bits(&y.value), "{}", x.name);
        }
    }

    #[test]
    fn header_layout() {
        let file = ModelFile::dense(EncoderModel::init(tiny(), 1).unwrap());
        let bytes = encode(&file);
        assert_eq!(&bytes[..4], b"SDCW");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 16);
        assert_eq!(f32::from_le_bytes(bytes[34..38].try_into().unwrap()), 0.1);
    }

    #[test]
    fn sparse_records_for_pruned_models() {
        let mut model = EncoderModel::init(tiny(), 2).unwrap();
        let scope = prunable_scope(&model);
        let dense_len = encoded_len(&ModelFile::dense(model.clone()));
        let mask = compute_mask(&model, 0.9, &scope).unwrap();
        apply_mask(&mut model, &mask).unwrap();
        let file = ModelFile::dense(model).with_mask(mask);
        let bytes = encode(&file);
        assert_eq!(read_model(&bytes).unwrap(), file);
        // 8 bytes per nonzero instead of 4 per element
        let mut saved = 0usize;
        if let Weights::Dense(m) = &file.weights {
            for name in &scope {
                let t = m.get(name).unwrap();
                saved += 4 * t.numel() - (4 + 8 * t.count_nonzero());
            }
        }
        let mask_bytes: usize = file
            .mask
            .as_ref()
            .unwrap()
            .masks
            .iter()
            .map(|m| {
                record_header_len(&mask_record_name(&m.name), m.shape.len())
                    + m.keep.len().div_ceil(8)
            })
            .sum();
        assert_eq!(bytes.len(), dense_len - saved + mask_bytes + 12);
    }

    #[test]
    fn sparse_threshold_is_half() {
        assert!(prefers_sparse(&[0.0, 1.0]));
        assert!(!prefers_sparse(&[0.0, 1.0, 2.0]));
        assert!(!prefers_sparse(&[-0.0, -0.0, 1.0]));
        assert!(!prefers_sparse(&[]));
    }

    #[test]
    fn quantized_round_trips() {
        let model = EncoderModel::init(tiny(), 4).unwrap();
        for q in [
            quantize_model_dynamic(&model).unwrap(),
            quantize_model_int8_mixed(&model, 0.05).unwrap(),
        ] {
            let file = ModelFile::quantized(q);
            assert_eq!(read_model(&encode(&file)).unwrap(), file);
        }
    }

    #[test]
    fn int8_payload_is_about_a_quarter() {
        let model = EncoderModel::init(tiny(), 4).unwrap();
        let q = quantize_model_dynamic(&model).unwrap();
        for p in q.params() {
            if let QuantValue::Int8(t) = &p.value {
                let fp = 4 * t.q.len();
                let outliers = 4 * (t.outliers.len() + t.outlier_values.len());
                assert_eq!(
                    int8_payload_len(t),
                    fp / 4 + 4 * t.scales.len() + outliers + 5
                );
            }
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode(&ModelFile::dense(EncoderModel::init(tiny(), 1).unwrap()));
        bytes[4] = 2;
        let err = read_model(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&ModelFile::dense(EncoderModel::init(tiny(), 1).unwrap()));
        assert!(read_model(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_model(&extra).is_err());
        assert!(read_model(b"NOPE").is_err());
    }
}
