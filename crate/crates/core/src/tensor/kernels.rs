//! Slice-level numeric kernels shared by the tape, inference and quantized paths.
//!
//! All reductions run in a fixed order so results are bit-reproducible.

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in increasing order.
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let src = &b[p * n..(p + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += av * s;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_a_bt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_b_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dst = &mut out[p * n..(p + 1) * n];
            for (d, s) in dst.iter_mut().zip(br) {
                *d += av * s;
            }
        }
    }
}

/// In-place softmax of one contiguous row.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// In-place softmax over the middle axis of an `[outer × len × inner]` layout.
pub fn softmax_strided(x: &mut [f32], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for row in x.chunks_mut(len) {
            softmax_row(row);
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).fold(f32::NEG_INFINITY, |m, j| m.max(x[at(j)]));
            let mut sum = 0.0f32;
            for j in 0..len {
                let e = libm::expf(x[at(j)] - max);
                x[at(j)] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..len {
                x[at(j)] *= inv;
            }
        }
    }
}

/// Log-softmax of one row into `out`.
pub fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0f32;
    for v in row {
        sum += libm::expf(v - max);
    }
    let log_z = max + libm::logf(sum);
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - log_z;
    }
}

/// Mean and reciprocal standard deviation (biased variance) of a row.
pub fn mean_rstd(row: &[f32], eps: f32) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / libm::sqrtf(var + eps))
}

const INV_SQRT2: f32 = core::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

/// Exact (erf-based) GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * INV_SQRT2))
}

pub fn gelu_grad(x: f32) -> f32 {
    0.5 * (1.0 + libm::erff(x * INV_SQRT2)) + x * INV_SQRT_2PI * libm::expf(-0.5 * x * x)
}

/// Index of the largest element; first one wins on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut ab = vec![0.0; 4];
        matmul(&a, &b, &mut ab, 2, 3, 2);
        // bT as 2x3
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut ab2 = vec![0.0; 4];
        matmul_a_bt_acc(&a, &bt, &mut ab2, 2, 3, 2);
        assert_eq!(ab, ab2);
        // aT b with a viewed as 3x2: (aT)[2x3] . b[3x2]
        let mut atb = vec![0.0; 4];
        matmul_at_b_acc(&a, &b, &mut atb, 3, 2, 2);
        let at = [1.0, 3.0, 5.0, 2.0, 4.0, 6.0];
        let mut expect = vec![0.0; 4];
        matmul(&at, &b, &mut expect, 2, 3, 2);
        assert_eq!(atb, expect);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((gelu(-1.0) + 0.158_655_3).abs() < 1e-6);
    }
}
