//! STFT implementation vs a naive O(L²) windowed-DFT oracle.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfm_core::signal::{hann_window, stft_magnitude, StftParams};

#[test]
fn stft_matches_naive_dft_on_random_signals() {
    let params = StftParams::default();
    let window = hann_window(params.fft_size).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let x: Vec<f32> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft_magnitude(&x, &params).unwrap();
        let n = spec.frames();
        for t in 0..n {
            let frame: Vec<f64> = x[t * params.hop..t * params.hop + params.fft_size]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let oracle = common::dft_frame_magnitude(&frame, &window, params.bins);
            for (bin, &expect) in oracle.iter().enumerate() {
                let got = spec.mags.data()[bin * n + t] as f64;
                assert!(
                    (got - expect).abs() <= 1e-5,
                    "frame {t} bin {bin}: {got} vs {expect}"
                );
            }
        }
    }
}
