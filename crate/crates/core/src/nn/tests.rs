use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Registers an input array as a trainable leaf so the checker perturbs it too.
fn input_param(store: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
    let n = shape.iter().product();
    store.insert(name.into(), shape.to_vec(), random_vec(rng, n))
}

#[test]
fn linear_identity_and_zero_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    let eye = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
    let zb = tape.constant(vec![0.0; 3], &[3]);
    let y = linear(&mut tape, x, eye, zb).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let z = tape.constant(vec![0.0; 6], &[2, 3]);
    let b = tape.constant(vec![0.5, -1.0, 2.0], &[3]);
    let y = linear(&mut tape, z, eye, b).unwrap();
    assert_eq!(tape.value(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn linear_dimension_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![0.0; 4], &[2, 2]);
    let w = tape.constant(vec![0.0; 6], &[3, 2]);
    let b = tape.constant(vec![0.0; 2], &[2]);
    assert!(matches!(linear(&mut tape, x, w, b), Err(crate::Error::DimensionMismatch(_))));
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let x = input_param(&mut store, "x", &[3, 4], &mut r);
    let w = input_param(&mut store, "w", &[4, 5], &mut r);
    let b = input_param(&mut store, "b", &[5], &mut r);
    let report = grad_check(
        &mut store,
        |tape, p| {
            let y = linear(tape, p.var(x), p.var(w), p.var(b))?;
            let y = tape.log_softmax(y);
            tape.nll(y, &[0, 3, 4])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
    assert_eq!(report.coords_checked(), 12 + 20 + 5);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(vec![1.0, 1.0], &[2]);
    let b = tape.constant(vec![0.0, 0.0], &[2]);
    let x = tape.constant(vec![1.0, -1.0], &[1, 2]);
    let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
    for (a, e) in tape.value(y).iter().zip([1.0, -1.0]) {
        assert!((a - e).abs() < 1e-4);
    }

    let g = tape.constant(vec![2.0; 3], &[3]);
    let b = tape.constant(vec![0.25, -0.5, 1.0], &[3]);
    let x = tape.constant(vec![7.0; 3], &[1, 3]);
    let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
    assert_eq!(tape.value(y), &[0.25, -0.5, 1.0]);
}

#[test]
fn layer_norm_statistics() {
    let mut r = rng(2);
    let d = 64;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random_vec(&mut r, 10 * d).iter().map(|v| v * 5.0 + 3.0).collect(), &[10, d]);
    let g = tape.constant(vec![1.0; d], &[d]);
    let b = tape.constant(vec![0.0; d], &[d]);
    let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
    for row in tape.value(y).chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn layer_norm_gradients() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let x = input_param(&mut store, "x", &[3, 6], &mut r);
    let g = input_param(&mut store, "g", &[6], &mut r);
    let b = input_param(&mut store, "b", &[6], &mut r);
    let report = grad_check(
        &mut store,
        |tape, p| {
            let y = tape.layer_norm(p.var(x), p.var(g), p.var(b), LN_EPS)?;
            let y = tape.log_softmax(y);
            tape.nll(y, &[1, 2, 5])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![0.0, 0.0], &[1, 2]);
    let y = tape.softmax(x);
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let base = vec![0.3, -1.2, 2.5, 0.0];
    let a = tape.constant(base.clone(), &[1, 4]);
    let b = tape.constant(base.iter().map(|v| v + 123.0).collect(), &[1, 4]);
    let ya = tape.softmax(a);
    let yb = tape.softmax(b);
    for (p, q) in tape.value(ya).iter().zip(tape.value(yb)) {
        assert!((p - q).abs() < 1e-7);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_keep_argmax() {
    let mut r = rng(4);
    let mut tape = Tape::<f64>::new();
    let vals: Vec<f64> = random_vec(&mut r, 50 * 9).iter().map(|v| v * 20.0).collect();
    let x = tape.constant(vals.clone(), &[50, 9]);
    let y = tape.softmax(x);
    for (row, orig) in tape.value(y).chunks(9).zip(vals.chunks(9)) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let am = |v: &[f64]| (0..9).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
        assert_eq!(am(row), am(orig));
    }
}

#[test]
fn nll_examples() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(vec![(0.1f64).ln(); 10], &[1, 10]);
    let loss = tape.nll(uniform, &[3]).unwrap();
    assert!((tape.value(loss)[0] - 10f64.ln()).abs() < 1e-12);

    let confident = tape.constant(vec![0.0, f64::NEG_INFINITY], &[1, 2]);
    let loss = tape.nll(confident, &[0]).unwrap();
    assert_eq!(tape.value(loss)[0], 0.0);

    // -(ln 0.5 + ln 0.25) / 2
    let mixed = tape.constant(vec![0.5f64.ln(), 0.5f64.ln(), 0.75f64.ln(), 0.25f64.ln()], &[2, 2]);
    let loss = tape.nll(mixed, &[1, 1]).unwrap();
    let expected = (-(0.5f64.ln()) + -(0.25f64.ln())) / 2.0;
    assert!((tape.value(loss)[0] - expected).abs() < 1e-15);
}

fn attention_fixture(seed: u64, width: usize, heads: usize) -> (ParamStore<f64>, MultiHeadAttention) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", width, heads, &mut r).unwrap();
    (store, attn)
}

#[test]
fn attention_single_token_passes_values_through() {
    let (store, attn) = attention_fixture(5, 8, 2);
    let mut tape = Tape::<f64>::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(random_vec(&mut rng(6), 8), &[1, 8]);
    let (out, weights) = attn.forward_with_weights(&mut tape, &p, x).unwrap();
    for w in &weights {
        assert_eq!(tape.value(*w), &[1.0]);
    }
    let v = attn.value.forward(&mut tape, &p, x).unwrap();
    let expected = attn.output.forward(&mut tape, &p, v).unwrap();
    assert_eq!(tape.value(out), tape.value(expected));
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, attn) = attention_fixture(7, 16, 4);
    let mut tape = Tape::<f64>::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(random_vec(&mut rng(8), 12 * 16).iter().map(|v| v * 3.0).collect(), &[12, 16]);
    let (_, weights) = attn.forward_with_weights(&mut tape, &p, x).unwrap();
    assert_eq!(weights.len(), 4);
    for w in weights {
        for row in tape.value(w).chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_rejects_indivisible_width() {
    let mut store = ParamStore::<f64>::new();
    assert!(MultiHeadAttention::new(&mut store, "a", 10, 3, &mut rng(0)).is_err());
}

#[test]
fn attention_gradients() {
    let (mut store, attn) = attention_fixture(9, 8, 2);
    let x = input_param(&mut store, "x", &[5, 8], &mut rng(10));
    let report = grad_check(
        &mut store,
        |tape, p| {
            let y = attn.forward(tape, p, p.var(x))?;
            let y = tape.log_softmax(y);
            tape.nll(y, &[0, 1, 2, 3, 4])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-3, "{:?}", report.worst());
}

fn block_fixture(seed: u64) -> (ParamStore<f64>, TransformerBlock) {
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::new(&mut store, "blk", 8, 2, &mut rng(seed)).unwrap();
    (store, block)
}

#[test]
fn zeroed_block_is_identity() {
    let (mut store, block) = block_fixture(11);
    for id in block.interior_params() {
        let n = store.get(id).len();
        store.set(id, vec![0.0; n]).unwrap();
    }
    for s in [1, 3, 17] {
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(random_vec(&mut rng(s as u64), s * 8), &[s, 8]);
        let y = block.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[s, 8]);
        assert_eq!(tape.value(y), tape.value(x));
    }
}

#[test]
fn block_gradients() {
    let (mut store, block) = block_fixture(12);
    let x = input_param(&mut store, "x", &[4, 8], &mut rng(13));
    let report = grad_check(
        &mut store,
        |tape, p| {
            let y = block.forward(tape, p, p.var(x))?;
            let y = tape.log_softmax(y);
            tape.nll(y, &[7, 0, 3, 3])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-3, "{:?}", report.worst());
}

fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.height || ix as usize >= g.width {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + ci) * g.height + iy as usize) * g.width + ix as usize;
                                let wi = co * g.in_channels * g.kernel * g.kernel + (ci * g.kernel + ky) * g.kernel + kx;
                                s += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * g.out_channels + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut r = rng(14);
    let geom = ConvGeom {
        batch: 2,
        in_channels: 3,
        out_channels: 4,
        height: 7,
        width: 6,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let x = random_vec(&mut r, 2 * 3 * 7 * 6);
    let w = random_vec(&mut r, 4 * 27);
    let b = random_vec(&mut r, 4);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone(), &[2, 3, 7, 6]);
    let wv = tape.constant(w.clone(), &[4, 27]);
    let bv = tape.constant(b.clone(), &[4]);
    let y = tape.conv2d(xv, wv, bv, 3, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4, 3]);
    let expected = naive_conv(&x, &w, &b, &geom);
    for (a, e) in tape.value(y).iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_and_pool_gradients() {
    let mut r = rng(15);
    let mut store = ParamStore::<f64>::new();
    let x = input_param(&mut store, "x", &[2, 2, 6, 5], &mut r);
    let w = input_param(&mut store, "w", &[3, 18], &mut r);
    let b = input_param(&mut store, "b", &[3], &mut r);
    let report = grad_check(
        &mut store,
        |tape, p| {
            let y = tape.conv2d(p.var(x), p.var(w), p.var(b), 3, 2, 1)?;
            let t = tape.pool_tokens(y, 2, 1)?;
            let t = tape.log_softmax(t);
            tape.nll(t, &[0, 1, 2, 0])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
}

#[test]
fn pool_windows_cover_input() {
    assert_eq!(pool_window(0, 2, 5), (0, 3));
    assert_eq!(pool_window(1, 2, 5), (2, 5));
    assert_eq!(pool_window(3, 4, 1), (0, 1));
}

#[test]
fn structural_ops_gradients() {
    let mut r = rng(16);
    let mut store = ParamStore::<f64>::new();
    let a = input_param(&mut store, "a", &[3, 4], &mut r);
    let b = input_param(&mut store, "b", &[2, 4], &mut r);
    let report = grad_check(
        &mut store,
        |tape, p| {
            let ab = tape.concat_rows(&[p.var(a), p.var(b)])?;
            let left = tape.slice_cols(ab, 0, 2)?;
            let right = tape.slice_cols(ab, 2, 2)?;
            let sw = tape.concat_cols(&[right, left])?;
            let mixed = tape.matmul_t(sw, true, ab, false)?;
            let top = tape.slice_rows(mixed, 1, 3)?;
            let pooled = tape.mean_rows(top)?;
            let flat = tape.reshape(pooled, &[1, 4])?;
            let act = tape.relu(flat);
            let s = tape.scale(act, 0.7);
            let z = tape.matmul_t(s, false, p.var(b), true)?;
            let z = tape.log_softmax(z);
            tape.nll(z, &[1])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
}

#[test]
fn forward_is_deterministic() {
    let (store, block) = block_fixture(17);
    let run = || {
        let st = store.cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let p = st.bind(&mut tape);
        let x = tape.constant((0..40).map(|i| (i as f32 * 0.37).sin()).collect(), &[5, 8]);
        let y = block.forward(&mut tape, &p, x).unwrap();
        tape.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
