//! Finite-difference gradient checks for every differentiable building block,
//! in f64 with h = 1e-5 and elementwise relative tolerance 1e-3.

mod common;

use common::gradcheck;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfm_core::autograd::Tape;
use tfm_core::nn::{
    self, register_linear, register_transformer_layer, transformer_layer_forward, AttnKind,
    ParameterStore,
};
use tfm_core::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    store.insert("x", rand_tensor(&[3, 4], &mut rng)).unwrap();
    store.insert("w", rand_tensor(&[5, 4], &mut rng)).unwrap();
    store.insert("b", rand_tensor(&[5], &mut rng)).unwrap();
    gradcheck(
        &mut store,
        |tape, s| {
            let x = s.var(tape, "x")?;
            let w = s.var(tape, "w")?;
            let b = s.var(tape, "b")?;
            let y = tape.linear(x, w, b)?;
            let y = tape.gelu(y);
            Ok(tape.mean_all(y))
        },
        H,
        TOL,
    );
}

#[test]
fn linear_identity_and_hand_product() {
    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::from_vec([1, 2], vec![1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::from_vec([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::from_vec([2], vec![0.0, 0.0]).unwrap());
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::from_vec([1, 2], vec![1.0, 0.0]).unwrap());
    let w = tape.constant(Tensor::from_vec([2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap());
    let b = tape.constant(Tensor::from_vec([2], vec![1.0, 1.0]).unwrap());
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
}

#[test]
fn linear_bias_grad_is_ones() {
    // grad of sum(linear(x, W, b)) w.r.t. b is all-ones
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store: ParameterStore<f64> = ParameterStore::new();
    store.insert("b", rand_tensor(&[3], &mut rng)).unwrap();
    let x = rand_tensor(&[4, 2], &mut rng);
    let w = rand_tensor(&[3, 2], &mut rng);
    let tape = Tape::new(store.len());
    let xv = tape.constant(x);
    let wv = tape.constant(w);
    let bv = store.var(&tape, "b").unwrap();
    let y = tape.linear(xv, wv, bv).unwrap();
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(0).unwrap().data(), &[4.0, 4.0, 4.0]);
}

#[test]
fn conv1d_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::new();
    store.insert("x", rand_tensor(&[2, 11], &mut rng)).unwrap();
    store.insert("w", rand_tensor(&[3, 2, 4], &mut rng)).unwrap();
    store.insert("b", rand_tensor(&[3], &mut rng)).unwrap();
    gradcheck(
        &mut store,
        |tape, s| {
            let x = s.var(tape, "x")?;
            let w = s.var(tape, "w")?;
            let b = s.var(tape, "b")?;
            let y = tape.conv1d(x, w, b, 2)?;
            Ok(tape.mean_all(y))
        },
        H,
        TOL,
    );
}

#[test]
fn conv1d_output_length_and_sliding_sum() {
    // len=1000, k=200, stride=100 -> 9 frames
    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::zeros([1, 1000]));
    let w = tape.constant(Tensor::zeros([1, 1, 200]));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv1d(x, w, b, 100).unwrap();
    assert_eq!(tape.shape(y), vec![1, 9]);
    // zero input, zero bias -> zero output
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // all-ones kernel k=2 stride=1 over [1,2,3] -> [3,5]
    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::from_vec([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let w = tape.constant(Tensor::from_vec([1, 1, 2], vec![1.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv1d(x, w, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
}

#[test]
fn conv1d_short_input_is_contract_violation() {
    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::<f64>::zeros([1, 3]));
    let w = tape.constant(Tensor::zeros([1, 1, 5]));
    let b = tape.constant(Tensor::zeros([1]));
    assert!(tape.conv1d(x, w, b, 1).is_err());
}

#[test]
fn group_norm_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParameterStore::new();
    store.insert("x", rand_tensor(&[4, 5], &mut rng)).unwrap();
    store.insert("g", rand_tensor(&[4], &mut rng)).unwrap();
    store.insert("b", rand_tensor(&[4], &mut rng)).unwrap();
    gradcheck(
        &mut store,
        |tape, s| {
            let x = s.var(tape, "x")?;
            let g = s.var(tape, "g")?;
            let b = s.var(tape, "b")?;
            let y = tape.group_norm(x, 2, g, b, 1e-5)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        H,
        TOL,
    );
}

#[test]
fn group_norm_constant_input() {
    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::full([2, 3], 7.0));
    let g = tape.constant(Tensor::full([2], 1.0));
    let b = tape.constant(Tensor::zeros([2]));
    let y = tape.group_norm(x, 1, g, b, 1e-5).unwrap();
    // zero variance: normalized output is the eps-guarded zero
    assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-9));

    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::full([2, 3], 7.0));
    let g = tape.constant(Tensor::full([2], 1.0));
    let b = tape.constant(Tensor::full([2], 0.5));
    let y = tape.group_norm(x, 1, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-9));
}

#[test]
fn group_norm_already_standardized() {
    // x = [-1, 1] in one group has mean 0, std 1 already
    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::from_vec([1, 2], vec![-1.0, 1.0]).unwrap());
    let g = tape.constant(Tensor::full([1], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.group_norm(x, 1, g, b, 1e-12).unwrap();
    let out = tape.value(y);
    assert!((out.data()[0] + 1.0).abs() < 1e-5);
    assert!((out.data()[1] - 1.0).abs() < 1e-5);
}

#[test]
fn group_norm_bad_grouping_is_contract_violation() {
    let tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::<f64>::zeros([3, 4]));
    let g = tape.constant(Tensor::zeros([3]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(tape.group_norm(x, 2, g, b, 1e-5).is_err());
}

#[test]
fn softmax_attention_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParameterStore::new();
    let d = 8;
    register_transformer_layer(&mut store, "blk", d, &mut rng).unwrap();
    store.insert("x", rand_tensor(&[3, d], &mut rng)).unwrap();
    gradcheck(
        &mut store,
        |tape, s| {
            let x = s.var(tape, "x")?;
            let y = transformer_layer_forward(tape, s, "blk", x, 2, AttnKind::Softmax)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        H,
        TOL,
    );
}

#[test]
fn linear_attention_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParameterStore::new();
    let d = 8;
    register_transformer_layer(&mut store, "blk", d, &mut rng).unwrap();
    store.insert("x", rand_tensor(&[3, d], &mut rng)).unwrap();
    gradcheck(
        &mut store,
        |tape, s| {
            let x = s.var(tape, "x")?;
            let y = transformer_layer_forward(tape, s, "blk", x, 2, AttnKind::Linear)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        H,
        TOL,
    );
}

#[test]
fn cross_entropy_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParameterStore::new();
    store.insert("logits", rand_tensor(&[4, 6], &mut rng)).unwrap();
    for smoothing in [0.0, 0.1] {
        gradcheck(
            &mut store,
            move |tape, s| {
                let l = s.var(tape, "logits")?;
                tape.cross_entropy(l, &[0, 3, 5, 2], smoothing)
            },
            H,
            TOL,
        );
    }
}

#[test]
fn focal_and_mse_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParameterStore::new();
    store
        .insert(
            "p",
            Tensor::from_vec([4], (0..4).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap(),
        )
        .unwrap();
    gradcheck(
        &mut store,
        |tape, s| {
            let p = s.var(tape, "p")?;
            tape.focal_loss(p, &[true, false, true, false], 2.0, 0.25)
        },
        H,
        TOL,
    );

    let mut store = ParameterStore::new();
    store.insert("a", rand_tensor(&[2, 3], &mut rng)).unwrap();
    let target = rand_tensor(&[2, 3], &mut rng);
    let mask = vec![true, false, true, true, false, true];
    gradcheck(
        &mut store,
        move |tape, s| {
            let a = s.var(tape, "a")?;
            tape.mse_against(a, &target, Some(&mask))
        },
        H,
        TOL,
    );
}

#[test]
fn composite_encoder_decoder_mse() {
    // MSE(decoder(encoder(x))) with conv encoder and linear decoder
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    store.insert("x", rand_tensor(&[1, 12], &mut rng)).unwrap();
    store.insert("enc.w", rand_tensor(&[4, 1, 3], &mut rng)).unwrap();
    store.insert("enc.b", rand_tensor(&[4], &mut rng)).unwrap();
    register_linear(&mut store, "dec", 12, 16, &mut rng).unwrap();
    let target = rand_tensor(&[1, 12], &mut rng);
    gradcheck(
        &mut store,
        move |tape, s| {
            let x = s.var(tape, "x")?;
            let w = s.var(tape, "enc.w")?;
            let b = s.var(tape, "enc.b")?;
            let h = tape.conv1d(x, w, b, 3)?; // [4, 4]
            let h = tape.gelu(h);
            let h = tape.reshape(h, [1, 16])?;
            let y = nn::linear_forward(tape, s, "dec", h)?;
            tape.mse_against(y, &target, None)
        },
        H,
        TOL,
    );
}

#[test]
fn polynomial_and_constant_gradients() {
    // f(x) = x^2 at x = 3 -> df/dx = 6
    let mut store = ParameterStore::new();
    store.insert("x", Tensor::from_vec([1], vec![3.0]).unwrap()).unwrap();
    let tape = Tape::new(1);
    let x = store.var(&tape, "x").unwrap();
    let y = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(0).unwrap().data(), &[6.0]);

    // grad of a constant w.r.t. x is zero
    let tape = Tape::new(1);
    let _x = store.var(&tape, "x").unwrap();
    let c = tape.constant(Tensor::scalar(5.0));
    let loss = tape.sum_all(c);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get_or_zeros(0, &[1]).data(), &[0.0]);
}

#[test]
fn backward_twice_is_contract_violation() {
    let mut store = ParameterStore::new();
    store.insert("x", Tensor::from_vec([1], vec![2.0]).unwrap()).unwrap();
    let tape = Tape::new(1);
    let x = store.var(&tape, "x").unwrap();
    let loss = tape.sum_all(x);
    tape.backward(loss).unwrap();
    assert!(tape.backward(loss).is_err());
}
