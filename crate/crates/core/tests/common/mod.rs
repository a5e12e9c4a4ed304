#![allow(dead_code)]

//! Shared test oracles. Everything here is independent of the library's
//! backward pass: gradients are checked against central finite differences,
//! spectra against a naive windowed DFT.

use tfm_core::autograd::{Tape, Var};
use tfm_core::nn::ParameterStore;
use tfm_core::Result;

/// Evaluate a scalar-valued forward function at the store's current values.
pub fn eval_loss<F>(store: &ParameterStore<f64>, forward: &F) -> f64
where
    F: Fn(&Tape<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let tape = Tape::new(store.len());
    let loss = forward(&tape, store).expect("forward pass");
    tape.value(loss).item()
}

/// Compare reverse-mode gradients of `forward` w.r.t. every parameter in
/// `store` against central finite differences (step `h`). The relative error
/// uses |g| + |fd| as the scale with a 1e-6 floor so near-zero gradients are
/// judged on absolute error.
pub fn gradcheck<F>(store: &mut ParameterStore<f64>, forward: F, h: f64, tol: f64)
where
    F: Fn(&Tape<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let analytic: Vec<_> = {
        let tape = Tape::new(store.len());
        let loss = forward(&tape, store).expect("forward pass");
        let grads = tape.backward(loss).expect("backward pass");
        (0..store.len())
            .map(|i| {
                let shape = store.by_index(i).1.shape().to_vec();
                grads.get_or_zeros(i, &shape)
            })
            .collect()
    };
    for i in 0..store.len() {
        let n = store.by_index(i).1.len();
        for j in 0..n {
            let orig = store.by_index(i).1.data()[j];
            store.by_index_mut(i).1.data_mut()[j] = orig + h;
            let up = eval_loss(store, &forward);
            store.by_index_mut(i).1.data_mut()[j] = orig - h;
            let down = eval_loss(store, &forward);
            store.by_index_mut(i).1.data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[i].data()[j];
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-6);
            let (name, _) = store.by_index(i);
            assert!(
                rel <= tol,
                "gradcheck failed for {name}[{j}]: analytic {g:.9e} vs fd {fd:.9e} (rel {rel:.3e})"
            );
        }
    }
}

/// Naive O(L²) windowed-DFT magnitude oracle: one frame of the STFT.
pub fn dft_frame_magnitude(frame: &[f64], window: &[f64], bins: usize) -> Vec<f64> {
    let l = frame.len();
    assert_eq!(window.len(), l);
    (0..bins)
        .map(|f| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (l_idx, (&x, &w)) in frame.iter().zip(window.iter()).enumerate() {
                let angle = -2.0 * std::f64::consts::PI * f as f64 * l_idx as f64 / l as f64;
                re += x * w * angle.cos();
                im += x * w * angle.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}
