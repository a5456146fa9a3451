//! Finite-difference checks for every differentiable tape op.

use sdcw_core::data::IGNORE_INDEX;
use sdcw_core::tensor::{gradcheck, AttentionDims, Tape, Var};
use sdcw_core::{Result, Rng, Tensor};

/// Large enough that f32 rounding in deep compositions stays well below
/// the tolerance; the fourth-order stencil keeps truncation error small.
const H: f32 = 1e-2;
const TOLERANCE: f64 = 1e-3;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn random(rng: &mut Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).unwrap()
}

fn assert_gradients(name: &str, shapes: &[&[usize]], build: &Build) {
    assert_gradients_with_step(name, shapes, H, build);
}

fn assert_gradients_with_step(name: &str, shapes: &[&[usize]], h: f32, build: &Build) {
    for seed in SEEDS {
        let mut rng = Rng::seed(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, 1.0)).collect();
        let check = gradcheck(&inputs, h, seed + 100, build).unwrap();
        assert!(
            check.max_rel_error() < TOLERANCE,
            "{name} seed {seed}: {:?}",
            check.rel_errors
        );
    }
}

#[test]
fn matmul() {
    assert_gradients_with_step("matmul", &[&[3, 4], &[4, 2]], 1e-3, &|t, v| {
        t.matmul(v[0], v[1])
    });
}

#[test]
fn matmul_transposed() {
    assert_gradients("matmul_bt", &[&[3, 4], &[5, 4]], &|t, v| {
        t.matmul_bt(v[0], v[1])
    });
}

#[test]
fn add_and_bias() {
    assert_gradients("add", &[&[3, 4], &[3, 4]], &|t, v| t.add(v[0], v[1]));
    assert_gradients("add_bias", &[&[2, 3, 4], &[4]], &|t, v| {
        t.add_bias(v[0], v[1])
    });
}

#[test]
fn scale() {
    assert_gradients("scale", &[&[2, 5]], &|t, v| t.scale(v[0], -1.7));
}

#[test]
fn gelu() {
    assert_gradients("gelu", &[&[4, 6]], &|t, v| t.gelu(v[0]));
}

#[test]
fn dropout() {
    let keep: Vec<f32> = (0..12)
        .map(|i| if i % 3 == 0 { 0.0 } else { 1.5 })
        .collect();
    assert_gradients("dropout", &[&[3, 4]], &move |t, v| {
        t.dropout(v[0], keep.clone())
    });
}

#[test]
fn layer_norm() {
    assert_gradients("layer_norm", &[&[3, 6], &[6], &[6]], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn softmax_on_each_axis() {
    assert_gradients("softmax last", &[&[3, 5]], &|t, v| t.softmax(v[0], 1));
    assert_gradients("softmax first", &[&[3, 5]], &|t, v| t.softmax(v[0], 0));
    assert_gradients("softmax middle", &[&[2, 3, 4]], &|t, v| t.softmax(v[0], 1));
}

#[test]
fn embedding_lookup() {
    assert_gradients("embedding", &[&[6, 3]], &|t, v| {
        t.embedding(v[0], &[0, 2, 2, 5, 1])
    });
}

#[test]
fn row_selection_and_reshape() {
    assert_gradients("select_rows", &[&[5, 3]], &|t, v| {
        t.select_rows(v[0], &[4, 0, 4])
    });
    assert_gradients("reshape", &[&[2, 6]], &|t, v| {
        let r = t.reshape(v[0], &[3, 4])?;
        t.gelu(r)
    });
}

#[test]
fn masked_multi_head_attention() {
    let dims = AttentionDims {
        batch: 2,
        seq: 3,
        heads: 2,
        head_dim: 2,
    };
    let mask = [true, true, false, true, true, true];
    assert_gradients("attention", &[&[6, 4], &[6, 4], &[6, 4]], &move |t, v| {
        t.attention(v[0], v[1], v[2], dims, &mask)
    });
}

#[test]
fn cross_entropy_with_ignored_positions() {
    let labels = [0, 3, IGNORE_INDEX, 4];
    assert_gradients("cross_entropy", &[&[4, 5]], &move |t, v| {
        t.cross_entropy(v[0], &labels, IGNORE_INDEX)
    });
}

#[test]
fn soft_target_kl() {
    for temperature in [1.0, 2.0, 8.0] {
        let mut rng = Rng::seed(77);
        let teacher = random(&mut rng, &[4, 5], 2.0);
        assert_gradients("kl", &[&[4, 5]], &move |t, v| {
            t.kl_soft_targets(v[0], &teacher, temperature)
        });
    }
}

#[test]
fn encoder_block_composition() {
    // x W + b → GELU → LayerNorm → attention over the result
    let dims = AttentionDims {
        batch: 1,
        seq: 4,
        heads: 1,
        head_dim: 3,
    };
    let mask = [true; 4];
    assert_gradients(
        "block",
        &[&[4, 5], &[5, 3], &[3], &[3], &[3]],
        &move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_bias(y, v[2])?;
            let y = t.gelu(y)?;
            let y = t.layer_norm(y, v[3], v[4], 1e-5)?;
            let a = t.attention(y, y, y, dims, &mask)?;
            t.add(a, y)
        },
    );
}
