//! Single-channel motif tokenizer: dual-path (frequency/time) encoding of a
//! spectrogram into per-window embeddings, vector quantization against a
//! learned codebook with EMA updates, and a transformer decoder trained by
//! masked time–frequency reconstruction.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{contract, CoreError, Result};
use crate::nn::{
    conv1d_forward, group_norm_forward, linear_forward, register_conv1d, register_linear,
    register_norm, register_transformer_stack, transformer_stack_forward, uniform_init, AttnKind,
    ParameterStore,
};
use crate::optim::AdamW;
use crate::signal::{stft_magnitude, Recording, Spectrogram, StftParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// STFT frame length (samples).
    pub fft_size: usize,
    /// STFT hop (samples).
    pub hop: usize,
    /// Retained frequency bins F.
    pub freq_bins: usize,
    /// Bins per frequency patch; P = F / patch_bins patches per window.
    pub patch_bins: usize,
    /// Embedding width D.
    pub width: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Commitment loss weight.
    pub beta: f32,
    /// Codebook-loss weight for the non-EMA fallback; unused when EMA
    /// updates are active.
    pub alpha: f32,
    /// EMA decay for codebook statistics.
    pub ema_decay: f32,
    /// Frequency-band mask granularity (bins per band).
    pub mask_band: usize,
    /// Fraction of time windows masked.
    pub r_time: f32,
    /// Fraction of frequency bands masked.
    pub r_freq: f32,
    /// Attention heads in every tokenizer transformer.
    pub heads: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            fft_size: 200,
            hop: 100,
            freq_bins: 100,
            patch_bins: 5,
            width: 64,
            codebook_size: 8192,
            beta: 0.25,
            alpha: 1.0,
            ema_decay: 0.99,
            mask_band: 5,
            r_time: 0.5,
            r_freq: 0.25,
            heads: 8,
        }
    }
}

impl TokenizerConfig {
    /// Frequency patches per window, P = F / Δf.
    pub fn patches(&self) -> usize {
        self.freq_bins / self.patch_bins
    }

    /// Number of maskable frequency bands.
    pub fn n_bands(&self) -> usize {
        self.freq_bins / self.mask_band
    }

    pub fn stft(&self) -> StftParams {
        StftParams {
            fft_size: self.fft_size,
            hop: self.hop,
            bins: self.freq_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft().validate()?;
        if self.patch_bins == 0 || self.freq_bins % self.patch_bins != 0 {
            return Err(contract(format!(
                "patch size {} must divide {} bins",
                self.patch_bins, self.freq_bins
            )));
        }
        if self.mask_band == 0 || self.freq_bins % self.mask_band != 0 {
            return Err(contract(format!(
                "mask band {} must divide {} bins",
                self.mask_band, self.freq_bins
            )));
        }
        if self.width % self.heads != 0 {
            return Err(contract("width must be divisible by heads"));
        }
        if self.codebook_size == 0 {
            return Err(contract("codebook must be nonempty"));
        }
        if !(0.0..1.0).contains(&self.r_time) || !(0.0..1.0).contains(&self.r_freq) {
            return Err(contract("mask ratios must lie in [0,1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(contract("EMA decay must lie in [0,1)"));
        }
        Ok(())
    }
}

// ----- masking -----

/// One masking view: boolean selectors over time windows and frequency bands.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub time: Vec<bool>,
    pub bands: Vec<bool>,
}

impl MaskSpec {
    pub fn empty(n: usize, n_bands: usize) -> MaskSpec {
        MaskSpec {
            time: vec![false; n],
            bands: vec![false; n_bands],
        }
    }

    /// A spectrogram cell is hidden if its window or its band is masked.
    /// Layout matches the decoder output: window-major [N, F].
    pub fn cell_mask(&self, cfg: &TokenizerConfig) -> Vec<bool> {
        let n = self.time.len();
        let mut out = vec![false; n * cfg.freq_bins];
        for t in 0..n {
            for f in 0..cfg.freq_bins {
                out[t * cfg.freq_bins + f] = self.time[t] || self.bands[f / cfg.mask_band];
            }
        }
        out
    }
}

/// Sample a mask and its symmetric complement. |M_T| = round(r_T·N) windows
/// and |M_F| = round(r_F·N_F) bands, uniform without replacement; the
/// complement view masks exactly the unchosen indices.
pub fn sample_masks(
    n: usize,
    cfg: &TokenizerConfig,
    rng: &mut impl Rng,
) -> Result<(MaskSpec, MaskSpec)> {
    if n < 2 {
        return Err(contract("need at least two windows to mask"));
    }
    let pick = |count: usize, total: usize, rng: &mut dyn rand::RngCore| -> Vec<bool> {
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(&mut *rng);
        let mut sel = vec![false; total];
        for &i in &idx[..count] {
            sel[i] = true;
        }
        sel
    };
    let n_t = (cfg.r_time as f64 * n as f64).round() as usize;
    let n_f = (cfg.r_freq as f64 * cfg.n_bands() as f64).round() as usize;
    let time = pick(n_t, n, rng);
    let bands = pick(n_f, cfg.n_bands(), rng);
    let view = MaskSpec {
        time: time.clone(),
        bands: bands.clone(),
    };
    let complement = MaskSpec {
        time: time.iter().map(|b| !b).collect(),
        bands: bands.iter().map(|b| !b).collect(),
    };
    Ok((view, complement))
}

/// Zero the masked windows/bands of the spectrogram and the masked windows of
/// the raw patch matrix. Unmasked values pass through untouched.
pub fn apply_masks(
    spec: &Spectrogram,
    mask: &MaskSpec,
    cfg: &TokenizerConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let f = spec.bins();
    let n = spec.frames();
    if mask.time.len() != n || mask.bands.len() != cfg.n_bands() {
        return Err(contract("mask extents do not match spectrogram"));
    }
    let mut mags = spec.mags.clone();
    {
        let d = mags.data_mut();
        for b in 0..f {
            for t in 0..n {
                if mask.time[t] || mask.bands[b / cfg.mask_band] {
                    d[b * n + t] = 0.0;
                }
            }
        }
    }
    let mut patches = spec.patches.clone();
    {
        let l = patches.cols();
        let d = patches.data_mut();
        for (t, &hidden) in mask.time.iter().enumerate() {
            if hidden {
                d[t * l..(t + 1) * l].fill(0.0);
            }
        }
    }
    Ok((mags, patches))
}

// ----- model -----

/// Register all tokenizer weights (encoder, decoder) under fixed names.
pub fn register_tokenizer<S: Scalar>(
    store: &mut ParameterStore<S>,
    cfg: &TokenizerConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    let p = cfg.patches();
    // frequency path: patch conv, two 1x1 stages, position embedding, transformer
    register_conv1d(store, "fpe.conv", d, 1, cfg.patch_bins, rng)?;
    register_conv1d(store, "fpe.s1", d, d, 1, rng)?;
    register_norm(store, "fpe.n1", d)?;
    register_conv1d(store, "fpe.s2", d, d, 1, rng)?;
    register_norm(store, "fpe.n2", d)?;
    store.insert(
        "fpe.pos",
        uniform_init([p, d], 1.0 / (d as f64).sqrt(), rng),
    )?;
    register_transformer_stack(store, "ftr", 2, d, rng)?;
    // gated aggregation down to 32 features
    register_linear(store, "gate.g1", d, d, rng)?;
    register_linear(store, "gate.g2", d, d, rng)?;
    register_conv1d(store, "gate.conv", d / 2, d, 5, rng)?;
    register_linear(store, "gate.fuse", d / 2, (d / 2) * (p / 5), rng)?;
    // temporal path: patch projection then two 1x1 stages
    register_linear(store, "tpe.proj", d, cfg.fft_size, rng)?;
    register_norm(store, "tpe.n0", d)?;
    register_conv1d(store, "tpe.s1", d, d, 1, rng)?;
    register_norm(store, "tpe.n1", d)?;
    register_conv1d(store, "tpe.s2", d / 2, d, 1, rng)?;
    register_norm(store, "tpe.n2", d / 2)?;
    // fused temporal transformer (no positional encoding)
    register_transformer_stack(store, "ttr", 2, d, rng)?;
    // decoder: 8-layer transformer + per-position linear to F bins
    register_transformer_stack(store, "dec", 8, d, rng)?;
    register_linear(store, "dec.out", cfg.freq_bins, d, rng)
}

/// Frequency + temporal encoding of one (possibly masked) spectrogram view
/// into fused window embeddings Z [N, D].
pub fn encode_sequence<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    cfg: &TokenizerConfig,
    mags: &Tensor<S>,
    patches: &Tensor<S>,
) -> Result<Var> {
    let f = cfg.freq_bins;
    let n = mags.cols();
    let d = cfg.width;
    let p = cfg.patches();
    if mags.rows() != f || patches.rows() != n || patches.cols() != cfg.fft_size {
        return Err(contract(format!(
            "encode_sequence: got S[{}x{}], patches[{}x{}]; config wants F={f}, L={}",
            mags.rows(),
            mags.cols(),
            patches.rows(),
            patches.cols(),
            cfg.fft_size
        )));
    }
    let groups = |ch: usize| (ch / 8).max(1);

    // frequency path, one window at a time
    let mut freq_feats = Vec::with_capacity(n);
    for t in 0..n {
        let col: Vec<S> = (0..f).map(|b| mags.data()[b * n + t]).collect();
        let x = tape.constant(Tensor::from_vec([1, f], col)?);
        let mut h = conv1d_forward(tape, store, "fpe.conv", x, cfg.patch_bins)?; // [D, P]
        h = tape.gelu(conv1d_forward(tape, store, "fpe.s1", h, 1)?);
        h = group_norm_forward(tape, store, "fpe.n1", h, groups(d))?;
        h = tape.gelu(conv1d_forward(tape, store, "fpe.s2", h, 1)?);
        h = group_norm_forward(tape, store, "fpe.n2", h, groups(d))?;
        let mut e = tape.transpose(h)?; // [P, D]
        e = tape.add(e, store.var(tape, "fpe.pos")?)?;
        e = transformer_stack_forward(tape, store, "ftr", e, 2, cfg.heads, AttnKind::Softmax)?;
        // gate, then aggregate along the patch axis
        let gate = tape.sigmoid(linear_forward(tape, store, "gate.g1", e)?);
        let gated = tape.mul(gate, linear_forward(tape, store, "gate.g2", e)?)?; // [P, D]
        let agg = conv1d_forward(tape, store, "gate.conv", tape.transpose(gated)?, 5)?; // [D/2, P/5]
        let flat = tape.reshape(agg, [1, (d / 2) * (p / 5)])?;
        freq_feats.push(linear_forward(tape, store, "gate.fuse", flat)?); // [1, D/2]
    }
    let e_freq = tape.concat_rows(&freq_feats)?; // [N, D/2]

    // temporal path, all windows at once
    let mut h = linear_forward(tape, store, "tpe.proj", tape.constant(patches.clone()))?; // [N, D]
    h = tape.transpose(h)?; // [D, N]
    h = group_norm_forward(tape, store, "tpe.n0", tape.gelu(h), groups(d))?;
    h = tape.gelu(conv1d_forward(tape, store, "tpe.s1", h, 1)?);
    h = group_norm_forward(tape, store, "tpe.n1", h, groups(d))?;
    h = tape.gelu(conv1d_forward(tape, store, "tpe.s2", h, 1)?);
    h = group_norm_forward(tape, store, "tpe.n2", h, groups(d / 2))?;
    let e_time = tape.transpose(h)?; // [N, D/2]

    let fused = tape.concat_cols(e_freq, e_time)?; // [N, D]
    transformer_stack_forward(tape, store, "ttr", fused, 2, cfg.heads, AttnKind::Softmax)
}

/// Decode quantized embeddings Q [N, D] back to a spectrogram laid out
/// window-major [N, F].
pub fn decode_spectrogram<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    cfg: &TokenizerConfig,
    q: Var,
) -> Result<Var> {
    let h = transformer_stack_forward(tape, store, "dec", q, 8, cfg.heads, AttnKind::Softmax)?;
    linear_forward(tape, store, "dec.out", h)
}

// ----- codebook -----

/// Learned vocabulary with EMA statistics. The invariant
/// `vectors[k] = sums[k] / max(counts[k], 1e-5)` holds after every update.
#[derive(Clone, Debug)]
pub struct Codebook<S: Scalar> {
    /// [K, D] code vectors.
    pub vectors: Tensor<S>,
    /// EMA cluster sizes n_k.
    pub counts: Vec<S>,
    /// [K, D] EMA embedding sums m_k.
    pub sums: Tensor<S>,
}

impl<S: Scalar> Codebook<S> {
    /// Uniform(±1/√D) initialization; EMA state starts at n_k = 1, m_k = v_k
    /// so the ratio invariant holds from the first step.
    pub fn init(k: usize, d: usize, rng: &mut impl Rng) -> Codebook<S> {
        let vectors: Tensor<S> = uniform_init([k, d], 1.0 / (d as f64).sqrt(), rng);
        Codebook {
            sums: vectors.clone(),
            counts: vec![S::one(); k],
            vectors,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    /// Exact nearest code per row of `z` by L2 distance; equidistant codes
    /// resolve to the smallest index.
    pub fn nearest(&self, z: &Tensor<S>) -> Result<Vec<usize>> {
        if z.cols() != self.width() {
            return Err(contract("quantize width mismatch"));
        }
        let k = self.len();
        // argmin_k |z|^2 - 2 z·v_k + |v_k|^2; the |z|^2 term is constant per row
        let cross = Tensor::matmul(z, false, &self.vectors, true)?; // [n, K]
        let vsq: Vec<S> = (0..k)
            .map(|i| {
                self.vectors.data()[i * self.width()..(i + 1) * self.width()]
                    .iter()
                    .map(|&v| v * v)
                    .fold(S::zero(), |a, b| a + b)
            })
            .collect();
        let two = S::from_f64(2.0);
        Ok((0..z.rows())
            .map(|r| {
                let row = &cross.data()[r * k..(r + 1) * k];
                let mut best = 0;
                let mut best_d = vsq[0] - two * row[0];
                for (i, (&c, &v2)) in row.iter().zip(&vsq).enumerate().skip(1) {
                    let d = v2 - two * c;
                    if d < best_d {
                        best = i;
                        best_d = d;
                    }
                }
                best
            })
            .collect())
    }

    /// Rows of the codebook at `ids`, as a plain tensor.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor<S>> {
        let d = self.width();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.len() {
                return Err(contract(format!("token id {id} out of range")));
            }
            data.extend_from_slice(&self.vectors.data()[id * d..(id + 1) * d]);
        }
        Tensor::from_vec([ids.len(), d], data)
    }
}

/// Quantize embeddings: returns (ids, straight-through Q, commitment loss).
/// Q carries Z's gradient unchanged (Q = Z + sg(v − Z)); the commitment term
/// is mean_i ‖z_i − sg(v_{ids_i})‖².
pub fn quantize<S: Scalar>(
    tape: &Tape<S>,
    z: Var,
    cb: &Codebook<S>,
) -> Result<(Vec<usize>, Var, Var)> {
    let zv = tape.value(z);
    let ids = cb.nearest(&zv)?;
    let codes = cb.lookup(&ids)?;
    let delta = codes.zip_map(&zv, |c, z| c - z);
    let q = tape.add_const(z, delta)?;
    let commit = tape.mse_against(z, &codes, None)?;
    // mse_against averages over elements; the commitment term averages
    // squared norms over rows, a factor of D larger
    let commit = tape.scale(commit, S::from_f64(cb.width() as f64));
    Ok((ids, q, commit))
}

/// EMA codebook update from one batch of embeddings and their assignments:
/// n_k ← ρ n_k + (1−ρ) count_k, m_k ← ρ m_k + (1−ρ) Σ_{ids=k} z,
/// v_k ← m_k / max(n_k, 1e-5).
pub fn ema_codebook_update<S: Scalar>(
    cb: &mut Codebook<S>,
    z: &Tensor<S>,
    ids: &[usize],
    rho: f64,
) -> Result<()> {
    if z.rows() != ids.len() || z.cols() != cb.width() {
        return Err(contract("EMA update shape mismatch"));
    }
    let d = cb.width();
    let rho = S::from_f64(rho);
    let keep = S::one() - rho;
    let mut count = vec![S::zero(); cb.len()];
    let mut sum = vec![S::zero(); cb.len() * d];
    for (r, &id) in ids.iter().enumerate() {
        if id >= cb.len() {
            return Err(contract(format!("token id {id} out of range")));
        }
        count[id] += S::one();
        for c in 0..d {
            sum[id * d + c] += z.data()[r * d + c];
        }
    }
    let floor = S::from_f64(1e-5);
    let sums = cb.sums.data_mut();
    for k in 0..count.len() {
        cb.counts[k] = rho * cb.counts[k] + keep * count[k];
        for c in 0..d {
            sums[k * d + c] = rho * sums[k * d + c] + keep * sum[k * d + c];
        }
    }
    let n = cb.counts.clone();
    let sums = cb.sums.data().to_vec();
    let vecs = cb.vectors.data_mut();
    for k in 0..n.len() {
        let denom = if n[k] > floor { n[k] } else { floor };
        for c in 0..d {
            vecs[k * d + c] = sums[k * d + c] / denom;
        }
    }
    Ok(())
}

/// Re-seed codes whose EMA count fell below `threshold` from random rows of
/// `pool` (fresh statistics: n = 1, m = v). Returns how many were revived.
pub fn revive_dead_codes<S: Scalar>(
    cb: &mut Codebook<S>,
    pool: &Tensor<S>,
    threshold: f32,
    rng: &mut impl Rng,
) -> Result<usize> {
    if pool.rows() == 0 || pool.cols() != cb.width() {
        return Err(contract("revival pool shape mismatch"));
    }
    let d = cb.width();
    let thr = S::from_f64(threshold as f64);
    let mut revived = 0;
    for k in 0..cb.len() {
        if cb.counts[k] < thr {
            let r = rng.gen_range(0..pool.rows());
            let row = pool.data()[r * d..(r + 1) * d].to_vec();
            cb.vectors.data_mut()[k * d..(k + 1) * d].copy_from_slice(&row);
            cb.sums.data_mut()[k * d..(k + 1) * d].copy_from_slice(&row);
            cb.counts[k] = S::one();
            revived += 1;
        }
    }
    Ok(revived)
}

// ----- training -----

pub struct TokenizerState {
    pub cfg: TokenizerConfig,
    pub params: ParameterStore<f32>,
    pub codebook: Codebook<f32>,
}

impl TokenizerState {
    pub fn init(cfg: TokenizerConfig, rng: &mut impl Rng) -> Result<TokenizerState> {
        let mut params = ParameterStore::new();
        register_tokenizer(&mut params, &cfg, rng)?;
        let codebook = Codebook::init(cfg.codebook_size, cfg.width, rng);
        Ok(TokenizerState {
            cfg,
            params,
            codebook,
        })
    }
}

/// Collect fused window embeddings from frozen encoder forwards over (a
/// shuffled sample of) `corpus`, up to `cap` rows. Used to data-seed the
/// codebook and to refresh starved codes.
pub fn embedding_pool(
    state: &TokenizerState,
    corpus: &[Spectrogram],
    cap: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    if corpus.is_empty() || cap == 0 {
        return Err(contract("empty embedding pool request"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let d = state.cfg.width;
    let mut rows: Vec<f32> = Vec::new();
    for &i in &order {
        if rows.len() / d >= cap {
            break;
        }
        let spec = &corpus[i];
        let tape = Tape::<f32>::new(state.params.len());
        let z = encode_sequence(&tape, &state.params, &state.cfg, &spec.mags, &spec.patches)?;
        rows.extend_from_slice(tape.value(z).data());
    }
    rows.truncate((rows.len() / d).min(cap) * d);
    Tensor::from_vec([rows.len() / d, d], rows)
}

/// Replace the random codebook with rows drawn from actual encoder outputs
/// (cycled with small jitter when the pool is smaller than the vocabulary).
/// Without this, a uniform-random codebook leaves almost every code far from
/// the data manifold and permanently dead.
pub fn seed_codebook_from_data(
    state: &mut TokenizerState,
    pool: &Tensor<f32>,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = state.cfg.width;
    if pool.rows() == 0 || pool.cols() != d {
        return Err(contract("codebook seeding pool shape mismatch"));
    }
    let k = state.codebook.len();
    let jitter = 0.02f32;
    for c in 0..k {
        let src = c % pool.rows();
        let row: Vec<f32> = pool.data()[src * d..(src + 1) * d]
            .iter()
            .map(|&v| {
                if c < pool.rows() {
                    v
                } else {
                    v + rng.gen_range(-jitter..jitter)
                }
            })
            .collect();
        state.codebook.vectors.data_mut()[c * d..(c + 1) * d].copy_from_slice(&row);
        state.codebook.sums.data_mut()[c * d..(c + 1) * d].copy_from_slice(&row);
        state.codebook.counts[c] = 1.0;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct TokenizerStepMetrics {
    pub recon_loss: f64,
    pub commit_loss: f64,
    pub loss: f64,
    /// Distinct codes assigned in this step's batch.
    pub codes_used: usize,
}

/// Forward one masked view of one segment; returns the view loss plus the
/// fused embedding values and token ids for codebook bookkeeping.
fn forward_view<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    cb: &Codebook<S>,
    cfg: &TokenizerConfig,
    spec: &Spectrogram,
    mask: &MaskSpec,
) -> Result<(Var, Var, Tensor<S>, Vec<usize>)> {
    let (mags, patches) = apply_masks(spec, mask, cfg)?;
    let mags = cast_tensor::<S>(&mags);
    let patches = cast_tensor::<S>(&patches);
    let z = encode_sequence(tape, store, cfg, &mags, &patches)?;
    let (ids, q, commit) = quantize(tape, z, cb)?;
    let recon = decode_spectrogram(tape, store, cfg, q)?;
    // target in window-major layout to match the decoder
    let n = spec.frames();
    let f = spec.bins();
    let mut target = vec![S::zero(); n * f];
    for b in 0..f {
        for t in 0..n {
            target[t * f + b] = S::from_f64(spec.mags.data()[b * n + t] as f64);
        }
    }
    let target = Tensor::from_vec([n, f], target)?;
    let recon_loss = tape.mse_against(recon, &target, Some(&mask.cell_mask(cfg)))?;
    Ok((recon_loss, commit, tape.value(z), ids))
}

fn cast_tensor<S: Scalar>(t: &Tensor<f32>) -> Tensor<S> {
    Tensor::from_vec(
        t.shape().to_vec(),
        t.data().iter().map(|&v| S::from_f64(v as f64)).collect(),
    )
    .expect("cast shape")
}

/// Loss (recon + β·commit) over both symmetric views of both paths for one
/// segment, exposed for end-to-end finite-difference checks.
pub fn segment_loss<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    cb: &Codebook<S>,
    cfg: &TokenizerConfig,
    spec: &Spectrogram,
    masks: (&MaskSpec, &MaskSpec),
) -> Result<Var> {
    let beta = S::from_f64(cfg.beta as f64);
    let (r1, c1, _, _) = forward_view(tape, store, cb, cfg, spec, masks.0)?;
    let (r2, c2, _, _) = forward_view(tape, store, cb, cfg, spec, masks.1)?;
    let l1 = tape.add(r1, tape.scale(c1, beta))?;
    let l2 = tape.add(r2, tape.scale(c2, beta))?;
    Ok(tape.scale(tape.add(l1, l2)?, S::from_f64(0.5)))
}

/// One optimization step over a batch of single-channel segment spectrograms:
/// symmetric mask pair per segment, masked-cell reconstruction + commitment
/// loss, AdamW update, then an EMA codebook update from both views.
pub fn tokenizer_train_step(
    state: &mut TokenizerState,
    opt: &mut AdamW<f32>,
    batch: &[Spectrogram],
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<TokenizerStepMetrics> {
    if batch.is_empty() {
        return Err(contract("empty tokenizer batch"));
    }
    let cfg = state.cfg;
    // pre-draw masks so the parallel section stays deterministic
    let masks: Vec<(MaskSpec, MaskSpec)> = batch
        .iter()
        .map(|s| sample_masks(s.frames(), &cfg, rng))
        .collect::<Result<_>>()?;

    struct PerSegment {
        grads: Gradients<f32>,
        loss: f64,
        recon: f64,
        commit: f64,
        z: Tensor<f32>,
        ids: Vec<usize>,
    }

    let params = &state.params;
    let codebook = &state.codebook;
    let results: Vec<Result<PerSegment>> = batch
        .par_iter()
        .zip(&masks)
        .map(|(spec, (m1, m2))| {
            let tape = Tape::<f32>::new(params.len());
            let beta = cfg.beta;
            let (r1, c1, z1, ids1) = forward_view(&tape, params, codebook, &cfg, spec, m1)?;
            let (r2, c2, z2, ids2) = forward_view(&tape, params, codebook, &cfg, spec, m2)?;
            let l1 = tape.add(r1, tape.scale(c1, beta))?;
            let l2 = tape.add(r2, tape.scale(c2, beta))?;
            let loss = tape.scale(tape.add(l1, l2)?, 0.5);
            let grads = tape.backward(loss)?;
            let mut z = Tensor::zeros([z1.rows() + z2.rows(), z1.cols()]);
            z.data_mut()[..z1.len()].copy_from_slice(z1.data());
            z.data_mut()[z1.len()..].copy_from_slice(z2.data());
            let mut ids = ids1;
            ids.extend(ids2);
            Ok(PerSegment {
                grads,
                loss: tape.value(loss).item() as f64,
                recon: 0.5 * (tape.value(r1).item() + tape.value(r2).item()) as f64,
                commit: 0.5 * (tape.value(c1).item() + tape.value(c2).item()) as f64,
                z,
                ids,
            })
        })
        .collect();

    let mut merged: Option<Gradients<f32>> = None;
    let mut total_loss = 0.0;
    let mut total_recon = 0.0;
    let mut total_commit = 0.0;
    let mut all_z: Vec<Tensor<f32>> = Vec::new();
    let mut all_ids: Vec<usize> = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let seg = r.map_err(|e| {
            CoreError::NonFinite(format!("tokenizer step failed at batch index {i}: {e}"))
        })?;
        if !seg.loss.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "non-finite tokenizer loss at batch index {i} (ids sample {:?})",
                &seg.ids[..seg.ids.len().min(8)]
            )));
        }
        total_loss += seg.loss;
        total_recon += seg.recon;
        total_commit += seg.commit;
        match &mut merged {
            None => merged = Some(seg.grads),
            Some(m) => m.merge(seg.grads),
        }
        all_z.push(seg.z);
        all_ids.extend(seg.ids);
    }
    let mut grads = merged.expect("nonempty batch");
    grads.scale(1.0 / batch.len() as f32);
    opt.apply(&mut state.params, &grads, lr as f64)?;

    // EMA codebook update from every view's assignments
    let d = cfg.width;
    let rows: usize = all_z.iter().map(|z| z.rows()).sum();
    let mut z_all = Tensor::zeros([rows, d]);
    {
        let out = z_all.data_mut();
        let mut off = 0;
        for z in &all_z {
            out[off..off + z.len()].copy_from_slice(z.data());
            off += z.len();
        }
    }
    ema_codebook_update(&mut state.codebook, &z_all, &all_ids, cfg.ema_decay as f64)?;

    let mut used: Vec<bool> = vec![false; cfg.codebook_size];
    for &id in &all_ids {
        used[id] = true;
    }
    let n = batch.len() as f64;
    Ok(TokenizerStepMetrics {
        recon_loss: total_recon / n,
        commit_loss: total_commit / n,
        loss: total_loss / n,
        codes_used: used.iter().filter(|&&u| u).count(),
    })
}

// ----- inference -----

/// Token grid for one recording: `ids[c]` holds channel c's token sequence.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<Vec<u32>>,
}

/// Tokenize every channel independently with frozen weights and no masking.
pub fn tokenize_recording(
    params: &ParameterStore<f32>,
    cb: &Codebook<f32>,
    cfg: &TokenizerConfig,
    rec: &Recording,
) -> Result<TokenSequence> {
    if rec.samples < cfg.fft_size {
        return Err(contract(format!(
            "recording length {} shorter than one frame ({})",
            rec.samples, cfg.fft_size
        )));
    }
    let stft = cfg.stft();
    let ids: Vec<Result<Vec<u32>>> = (0..rec.channels)
        .into_par_iter()
        .map(|c| {
            let spec = stft_magnitude(rec.channel(c), &stft)?;
            let tape = Tape::<f32>::new(params.len());
            let mags = spec.mags.clone();
            let z = encode_sequence(&tape, params, cfg, &mags, &spec.patches)?;
            let ids = cb.nearest(&tape.value(z))?;
            Ok(ids.into_iter().map(|i| i as u32).collect())
        })
        .collect();
    Ok(TokenSequence {
        ids: ids.into_iter().collect::<Result<_>>()?,
    })
}
