//! Symmetric absmax int8 quantization, the mixed-precision int8 GEMM and
//! quantized encoder models.
//!
//! A [`QuantizedTensor`] is a matrix whose quantization vectors run along the
//! reduction dimension of the product it feeds: rows for a left operand
//! (activations, embedding tables), columns for a right operand (weights).
//! Outliers are whole slices across that dimension kept in fp32.

mod model;

pub use model::{
    quantize_model_dynamic, quantize_model_int8_mixed, QuantMode, QuantParam, QuantValue,
    QuantizedModel,
};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Largest reduction length whose int8 products cannot overflow an `i32` sum.
pub const MAX_REDUCTION: usize = (i32::MAX / (127 * 127)) as usize;

pub const DEFAULT_OUTLIER_THRESHOLD: f32 = 6.0;

/// Direction of the quantization vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantAxis {
    /// One scale per row; outliers are columns.
    Rows,
    /// One scale per column; outliers are rows.
    Columns,
}

/// int8 matrix with per-vector scales and exact fp32 outlier slices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub axis: QuantAxis,
    /// Row-major, zero at outlier positions.
    pub q: Vec<i8>,
    /// `127 / max|x|` per vector.
    pub scales: Vec<f32>,
    /// Sorted indices along the vector direction that are stored in fp32.
    pub outliers: Vec<u32>,
    /// For each outlier, the exact slice across the other dimension.
    pub outlier_values: Vec<f32>,
}

/// Round half away from zero and clamp to the symmetric int8 range.
pub fn quantize_value(x: f32, scale: f32) -> i8 {
    libm::round(x as f64 * scale as f64).clamp(-127.0, 127.0) as i8
}

fn absmax_scale(max_abs: f32) -> f32 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let s = 127.0 / max_abs;
    if s.is_finite() {
        s
    } else {
        f32::MAX
    }
}

impl QuantizedTensor {
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    /// Length of each quantization vector (the reduction length).
    pub fn vector_len(&self) -> usize {
        match self.axis {
            QuantAxis::Rows => self.cols,
            QuantAxis::Columns => self.rows,
        }
    }

    /// Number of quantization vectors.
    pub fn vector_count(&self) -> usize {
        match self.axis {
            QuantAxis::Rows => self.rows,
            QuantAxis::Columns => self.cols,
        }
    }

    fn slice_len(&self) -> usize {
        self.vector_count()
    }

    /// Flat row-major index of element `t` of vector `v`.
    fn index(&self, v: usize, t: usize) -> usize {
        match self.axis {
            QuantAxis::Rows => v * self.cols + t,
            QuantAxis::Columns => t * self.cols + v,
        }
    }

    pub fn is_outlier(&self, t: usize) -> bool {
        self.outliers.binary_search(&(t as u32)).is_ok()
    }

    /// Exact slice stored for outlier `t`, if any.
    pub fn outlier_slice(&self, t: usize) -> Option<&[f32]> {
        let pos = self.outliers.binary_search(&(t as u32)).ok()?;
        let n = self.slice_len();
        Some(&self.outlier_values[pos * n..(pos + 1) * n])
    }

    /// Values of slice `t` across the vectors: exact for outliers, dequantized otherwise.
    pub fn slice(&self, t: usize) -> Vec<f32> {
        if let Some(exact) = self.outlier_slice(t) {
            return exact.to_vec();
        }
        (0..self.vector_count())
            .map(|v| self.q[self.index(v, t)] as f32 / self.scales[v])
            .collect()
    }

    pub fn dequantize(&self) -> Tensor {
        let mut out = vec![0.0; self.rows * self.cols];
        for v in 0..self.vector_count() {
            let s = self.scales[v];
            for t in 0..self.vector_len() {
                let i = self.index(v, t);
                out[i] = self.q[i] as f32 / s;
            }
        }
        let n = self.slice_len();
        for (pos, &t) in self.outliers.iter().enumerate() {
            for v in 0..n {
                out[self.index(v, t as usize)] = self.outlier_values[pos * n + v];
            }
        }
        Tensor::new(vec![self.rows, self.cols], out).expect("shape is consistent")
    }

    /// Bytes of the int8 payload, scales and outlier data.
    pub fn payload_bytes(&self) -> usize {
        self.q.len()
            + 4 * self.scales.len()
            + 4 * self.outliers.len()
            + 4 * self.outlier_values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.q.len() == self.rows * self.cols
            && self.scales.len() == self.vector_count()
            && self.outliers.windows(2).all(|w| w[0] < w[1])
            && self
                .outliers
                .iter()
                .all(|t| (*t as usize) < self.vector_len())
            && self.outlier_values.len() == self.outliers.len() * self.slice_len()
            && self.q.iter().all(|q| *q >= -127)
            && self.scales.iter().all(|s| s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "inconsistent quantized tensor of shape [{}, {}]",
                self.rows, self.cols
            )))
        }
    }
}

/// Per-vector absmax quantization without outliers.
pub fn absmax_quantize(x: &Tensor, axis: QuantAxis) -> Result<QuantizedTensor> {
    quantize_with_outliers(x, axis, f32::INFINITY, &[])
}

/// Absmax quantization that keeps every slice whose largest magnitude is at
/// least `threshold` (plus the `forced` indices) in fp32. Outliers are left
/// out of the vector scales.
pub fn quantize_with_outliers(
    x: &Tensor,
    axis: QuantAxis,
    threshold: f32,
    forced: &[u32],
) -> Result<QuantizedTensor> {
    let (rows, cols) = x.dims2()?;
    if !x.is_finite() {
        return Err(Error::Data("cannot quantize non-finite values".into()));
    }
    let mut qt = QuantizedTensor {
        rows,
        cols,
        axis,
        q: vec![0; rows * cols],
        scales: Vec::new(),
        outliers: Vec::new(),
        outlier_values: Vec::new(),
    };
    let len = qt.vector_len();
    let count = qt.vector_count();
    let data = x.data();
    let mut slice_max = vec![0.0f32; len];
    for v in 0..count {
        for (t, m) in slice_max.iter_mut().enumerate() {
            *m = m.max(data[qt.index(v, t)].abs());
        }
    }
    let mut outlier = vec![false; len];
    for (t, m) in slice_max.iter().enumerate() {
        outlier[t] = *m >= threshold;
    }
    for &t in forced {
        if (t as usize) >= len {
            return Err(Error::Dimension(format!("forced outlier {t} beyond {len}")));
        }
        outlier[t as usize] = true;
    }
    qt.outliers = (0..len as u32).filter(|t| outlier[*t as usize]).collect();
    for &t in &qt.outliers {
        for v in 0..count {
            qt.outlier_values.push(data[qt.index(v, t as usize)]);
        }
    }
    qt.scales = Vec::with_capacity(count);
    for v in 0..count {
        let max_abs = (0..len)
            .filter(|t| !outlier[*t])
            .map(|t| data[qt.index(v, t)].abs())
            .fold(0.0f32, f32::max);
        let s = absmax_scale(max_abs);
        qt.scales.push(s);
        for t in 0..len {
            if !outlier[t] {
                let i = qt.index(v, t);
                qt.q[i] = quantize_value(data[i], s);
            }
        }
    }
    Ok(qt)
}

fn check_product(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<()> {
    if a.axis != QuantAxis::Rows || b.axis != QuantAxis::Columns {
        return Err(Error::Parameter(
            "int8 matmul needs a row-quantized left and column-quantized right operand".into(),
        ));
    }
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "int8 matmul inner dimensions differ: [{}, {}] x [{}, {}]",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.cols > MAX_REDUCTION {
        return Err(Error::Parameter(format!(
            "reduction length {} exceeds the overflow-safe bound {MAX_REDUCTION}",
            a.cols
        )));
    }
    Ok(())
}

/// `A · B` with int32 accumulation over regular columns and an fp32 product
/// over the outlier columns of either operand.
pub fn int8_matmul(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<Tensor> {
    int8_matmul_with(a, b, None)
}

/// As [`int8_matmul`]; `b_exact` optionally supplies the original right
/// operand so fp32 rows need not come from its int8 payload.
pub(crate) fn int8_matmul_with(
    a: &QuantizedTensor,
    b: &QuantizedTensor,
    b_exact: Option<&[f32]>,
) -> Result<Tensor> {
    check_product(a, b)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut split = Vec::with_capacity(a.outliers.len() + b.outliers.len());
    split.extend_from_slice(&a.outliers);
    split.extend_from_slice(&b.outliers);
    split.sort_unstable();
    split.dedup();
    let mut is_fp = vec![false; k];
    for &t in &split {
        is_fp[t as usize] = true;
    }

    let mut out = if split.is_empty() {
        vec![0.0; m * n]
    } else {
        let s = split.len();
        let mut a_fp = vec![0.0; m * s];
        for (c, &t) in split.iter().enumerate() {
            for (i, v) in a.slice(t as usize).into_iter().enumerate() {
                a_fp[i * s + c] = v;
            }
        }
        let mut b_fp = Vec::with_capacity(s * n);
        for &t in &split {
            match b_exact {
                Some(full) => b_fp.extend_from_slice(&full[t as usize * n..(t as usize + 1) * n]),
                None => b_fp.extend(b.slice(t as usize)),
            }
        }
        let mut o = vec![0.0; m * n];
        kernels::matmul(&a_fp, &b_fp, &mut o, m, s, n);
        o
    };

    let regular: Vec<usize> = (0..k).filter(|t| !is_fp[*t]).collect();
    if !regular.is_empty() {
        let mut acc = vec![0i32; n];
        for i in 0..m {
            acc.fill(0);
            for &t in &regular {
                let qa = a.q[i * k + t] as i32;
                if qa == 0 {
                    continue;
                }
                for (dst, qb) in acc.iter_mut().zip(&b.q[t * n..(t + 1) * n]) {
                    *dst += qa * *qb as i32;
                }
            }
            let sa = a.scales[i] as f64;
            for (j, &sum) in acc.iter().enumerate() {
                if sum != 0 {
                    out[i * n + j] += (sum as f64 / (sa * b.scales[j] as f64)) as f32;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}
