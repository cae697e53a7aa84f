//! Finite-difference checks of every primitive on the tape.

use moodpipe::tensor::{grad_check, ParamId, Tape, Tensor, Var};
use moodpipe::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary tensor output to a scalar with fixed random weights,
/// so every output coordinate contributes to the checked gradient.
fn contract(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(&mut rng, &shape));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check_points<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 977);
    for point in 0..5 {
        let x = random(&mut rng, shape);
        let err = grad_check(&f, &x, EPS).unwrap();
        assert!(err < TOL, "{name} point {point}: max_rel_err {err:e}");
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&mut rng, &[4, 3]);
    check_points("matmul", &[2, 4], move |t, x| {
        let bv = t.constant(b.clone());
        let y = t.matmul(x, bv)?;
        contract(t, y, 11)
    });
    let a = random(&mut rng, &[2, 4]);
    check_points("matmul_rhs", &[4, 3], move |t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul(av, x)?;
        contract(t, y, 12)
    });
}

#[test]
fn add_and_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let other = random(&mut rng, &[3, 4]);
    check_points("add", &[3, 4], move |t, x| {
        let o = t.constant(other.clone());
        let y = t.add(x, o)?;
        let z = t.mul(y, y)?;
        t.sum(z)
    });
    let m = random(&mut rng, &[3, 4]);
    check_points("add_bias", &[4], move |t, b| {
        let mv = t.constant(m.clone());
        let y = t.add_bias(mv, b)?;
        let z = t.mul(y, y)?;
        t.sum(z)
    });
}

#[test]
fn relu_gradients() {
    check_points("relu", &[3, 5], |t, x| {
        let y = t.relu(x)?;
        contract(t, y, 3)
    });
}

#[test]
fn conv1d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random(&mut rng, &[3, 2, 5]);
    let bias = random(&mut rng, &[3]);
    let x0 = random(&mut rng, &[2, 9]);
    {
        let (w, bias) = (w.clone(), bias.clone());
        check_points("conv1d_input", &[2, 9], move |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(bias.clone());
            let y = t.conv1d(x, wv, bv)?;
            contract(t, y, 5)
        });
    }
    {
        let x0 = x0.clone();
        check_points("conv1d_weight", &[3, 2, 5], move |t, w| {
            let xv = t.constant(x0.clone());
            let bv = t.constant(bias.clone());
            let y = t.conv1d(xv, w, bv)?;
            contract(t, y, 6)
        });
    }
    check_points("conv1d_bias", &[3], move |t, b| {
        let xv = t.constant(x0.clone());
        let wv = t.constant(w.clone());
        let y = t.conv1d(xv, wv, b)?;
        contract(t, y, 7)
    });
}

#[test]
fn conv1d_even_kernel_and_short_input() {
    // Kernel longer than the sequence: every tap is partially outside.
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let w = random(&mut rng, &[2, 1, 6]);
    check_points("conv1d_wide", &[1, 3], move |t, x| {
        let wv = t.constant(w.clone());
        let bv = t.constant(Tensor::zeros(&[2]));
        let y = t.conv1d(x, wv, bv)?;
        contract(t, y, 41)
    });
}

#[test]
fn max_pool_gradients() {
    check_points("maxpool", &[3, 7], |t, x| {
        let y = t.max_pool(x, 2)?;
        contract(t, y, 8)
    });
}

#[test]
fn global_pool_gradients() {
    check_points("global_pool", &[4, 6], |t, x| {
        let y = t.global_pool(x)?;
        contract(t, y, 9)
    });
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gamma = random(&mut rng, &[5]);
    let beta = random(&mut rng, &[5]);
    {
        let (gamma, beta) = (gamma.clone(), beta.clone());
        check_points("layer_norm_input", &[3, 5], move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let y = t.layer_norm(x, g, b, 1e-5)?;
            contract(t, y, 13)
        });
    }
    let x0 = random(&mut rng, &[3, 5]);
    check_points("layer_norm_gamma", &[5], move |t, g| {
        let x = t.constant(x0.clone());
        let b = t.constant(beta.clone());
        let y = t.layer_norm(x, g, b, 1e-5)?;
        contract(t, y, 14)
    });
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let gamma = random(&mut rng, &[3]);
    let beta = random(&mut rng, &[3]);
    {
        let (gamma, beta) = (gamma.clone(), beta.clone());
        check_points("batch_norm_train", &[3, 8], move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let (y, _, _) = t.batch_norm(x, g, b, 1e-5)?;
            contract(t, y, 16)
        });
    }
    check_points("batch_norm_fixed", &[3, 8], move |t, x| {
        let g = t.constant(gamma.clone());
        let b = t.constant(beta.clone());
        let y = t.batch_norm_fixed(x, g, b, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
        contract(t, y, 17)
    });
}

#[test]
fn concat_and_slice_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let other = random(&mut rng, &[2, 4]);
    check_points("concat_slice", &[2, 3], move |t, x| {
        let o = t.constant(other.clone());
        let c = t.concat_time(&[x, o, x])?;
        let s = t.slice_time(c, 2, 5)?;
        contract(t, s, 19)
    });
}

#[test]
fn softmax_cross_entropy_gradients() {
    check_points("softmax_ce", &[3, 4], |t, x| t.softmax_cross_entropy(x, &[0, 3, 1]));
}

#[test]
fn softmax_cross_entropy_of_matrix_vector_product() {
    // f(W) = CE(softmax(W·v), y) for a random 4×4 W.
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let v = random(&mut rng, &[4, 1]);
    let w = random(&mut rng, &[4, 4]);
    let err = grad_check(
        |t, w| {
            let vv = t.constant(v.clone());
            let z = t.matmul(w, vv)?;
            let z = t.reshape(z, vec![1, 4])?;
            t.softmax_cross_entropy(z, &[2])
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max_rel_err {err:e}");
}

#[test]
fn dropout_eval_is_identity_and_train_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), Tensor::vector(vec![1.0, 2.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = tape.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(x, y);

    check_points("dropout_train", &[4, 4], |t, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y = t.dropout(x, 0.5, &mut rng)?;
        contract(t, y, 22)
    });
}

#[test]
fn embedding_gradients() {
    check_points("embedding", &[5, 3], |t, table| {
        let y = t.embedding(table, &[4, 0, 4, 2])?;
        contract(t, y, 23)
    });
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let k0 = random(&mut rng, &[5, 4]);
    let v0 = random(&mut rng, &[5, 4]);
    {
        let (k0, v0) = (k0.clone(), v0.clone());
        check_points("attention_q", &[5, 4], move |t, q| {
            let k = t.constant(k0.clone());
            let v = t.constant(v0.clone());
            let y = t.attention(q, k, v, 2)?;
            contract(t, y, 25)
        });
    }
    // Self-attention: the same input feeds queries, keys and values.
    check_points("attention_self", &[5, 4], |t, x| {
        let y = t.attention(x, x, x, 2)?;
        contract(t, y, 26)
    });
    let q0 = random(&mut rng, &[5, 4]);
    check_points("attention_kv", &[5, 4], move |t, k| {
        let q = t.constant(q0.clone());
        let v = t.constant(v0.clone());
        let y = t.attention(q, k, v, 1)?;
        let y2 = t.attention(q, k, k, 4)?;
        let s = t.add(y, y2)?;
        contract(t, s, 27)
    });
}

#[test]
fn select_row_scale_sum_squares() {
    check_points("select_row", &[3, 4], |t, x| {
        let r = t.select_row(x, 1)?;
        let s = t.scale(r, -2.5)?;
        let q = t.sum_squares(x)?;
        let c = contract(t, s, 28)?;
        t.add(c, q)
    });
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random(&mut rng, &[8, 16]);
    let w = random(&mut rng, &[4, 8, 5]);
    let run = || {
        let mut t = Tape::new();
        let xv = t.param(ParamId(0), x.clone());
        let wv = t.param(ParamId(1), w.clone());
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.conv1d(xv, wv, b).unwrap();
        let y = t.relu(y).unwrap();
        let p = t.global_pool(y).unwrap();
        let l = t.sum_squares(p).unwrap();
        t.backward(l).unwrap()
    };
    assert_eq!(run(), run());
}
