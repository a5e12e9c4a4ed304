//! Rough wall-time probe for the three training phases at desk scale.
//! Run with --release; prints per-step timings so epoch budgets can be set.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tfm_core::config::RunConfig;
use tfm_core::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use tfm_core::downstream::{register_encoder, register_mtp_head, EncoderState};
use tfm_core::nn::ParameterStore;
use tfm_core::optim::{AdamHyper, AdamW};
use tfm_core::signal::stft_magnitude;
use tfm_core::tokenizer::{tokenizer_train_step, TokenizerState};
use tfm_core::train::segment_len_for;

fn main() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::default();
    spec.train_per_class = 20;
    let manifest = generate_synthetic(&spec, 0, dir.path()).unwrap();
    let data = Dataset::load(&manifest, Split::Train, segment_len_for(&cfg), true).unwrap();
    let stft = cfg.tokenizer.stft();
    let corpus: Vec<_> = data
        .segments
        .iter()
        .flat_map(|s| (0..1).map(|c| stft_magnitude(s.channel(c), &stft).unwrap()))
        .collect();
    println!("corpus: {} spectrograms", corpus.len());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = TokenizerState::init(cfg.tokenizer, &mut rng).unwrap();
    let mut opt = AdamW::new(&state.params, AdamHyper::default());
    for bs in [16usize, 64] {
        let batch: Vec<_> = corpus.iter().take(bs).cloned().collect();
        let t = Instant::now();
        let m = tokenizer_train_step(&mut state, &mut opt, &batch, 1e-3, &mut rng).unwrap();
        println!(
            "tokenizer step batch {bs}: {:.2}s (loss {:.4})",
            t.elapsed().as_secs_f64(),
            m.loss
        );
    }

    let mut params = ParameterStore::new();
    register_encoder(&mut params, &cfg.encoder, None, &mut rng).unwrap();
    register_mtp_head(&mut params, &cfg.encoder, &mut rng).unwrap();
    let mut enc = EncoderState { cfg: cfg.encoder, params };
    let mut eopt = AdamW::new(&enc.params, AdamHyper::default());
    let grid: Vec<Vec<u32>> = (0..4).map(|c| (0..9).map(|w| (c * 9 + w) as u32).collect()).collect();
    let batch: Vec<_> = (0..64).map(|_| grid.clone()).collect();
    let t = Instant::now();
    let m = tfm_core::downstream::mtp_pretrain_step(&mut enc, &mut eopt, &batch, 1e-3, &mut rng).unwrap();
    println!(
        "mtp step batch 64: {:.2}s (ce {:.4})",
        t.elapsed().as_secs_f64(),
        m.ce_loss
    );
}
