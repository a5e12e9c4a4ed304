//! Deterministic signal front-end: periodic Hann windowing, one-sided
//! magnitude STFT, and raw-patch segmentation aligned so that spectral
//! window i is computed from exactly patch i's samples.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Multi-channel recording at a fixed sampling rate. Data is row-major
/// channel-major: channel c occupies samples `[c*T, (c+1)*T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f32,
    pub data: Vec<f32>,
    /// -1 encodes "unlabeled" on disk; `None` here.
    pub label: Option<i32>,
    pub subject: u32,
}

impl Recording {
    pub fn new(
        channels: usize,
        samples: usize,
        sample_rate_hz: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(contract("recording needs at least one channel"));
        }
        if data.len() != channels * samples {
            return Err(contract(format!(
                "recording payload {} != {}x{}",
                data.len(),
                channels,
                samples
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(contract("recording contains non-finite samples"));
        }
        Ok(Self {
            channels,
            samples,
            sample_rate_hz,
            data,
            label: None,
            subject: 0,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    /// Recording holding a single channel of this one.
    pub fn extract_channel(&self, c: usize) -> Recording {
        Recording {
            channels: 1,
            samples: self.samples,
            sample_rate_hz: self.sample_rate_hz,
            data: self.channel(c).to_vec(),
            label: self.label,
            subject: self.subject,
        }
    }
}

/// STFT configuration. The defaults mirror a 200 Hz sampling rate: one-second
/// FFT frames, half-frame hop, 100 retained bins (Nyquist dropped).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftParams {
    pub fft_size: usize,
    pub hop: usize,
    pub bins: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            fft_size: 200,
            hop: 100,
            bins: 100,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 {
            return Err(contract("fft size must be >= 2"));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(contract("hop must satisfy 0 < H <= L"));
        }
        if self.bins == 0 || self.bins > self.fft_size / 2 + 1 {
            return Err(contract("retained bins must satisfy 0 < F <= L/2+1"));
        }
        Ok(())
    }

    /// Frame count for a signal of `t` samples: ⌊(T−L)/H⌋+1.
    pub fn frames(&self, t: usize) -> Result<usize> {
        if t < self.fft_size {
            return Err(contract(format!(
                "signal length {t} shorter than fft size {}",
                self.fft_size
            )));
        }
        Ok((t - self.fft_size) / self.hop + 1)
    }
}

/// Single-channel magnitude spectrogram with the raw patches it was computed
/// from. `mags` is [F, N]; `patches` is [N, L]; patch i covers samples
/// [i·H, i·H+L).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub mags: Tensor<f32>,
    pub patches: Tensor<f32>,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.mags.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.mags.shape()[1]
    }
}

/// Periodic Hann window w(l) = 0.5 (1 − cos(2πl/L)).
pub fn hann_window(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(contract("hann window needs L >= 2"));
    }
    Ok((0..len)
        .map(|l| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * l as f64 / len as f64).cos()))
        .collect())
}

/// Overlapping patches of length L with hop H, each a copy of [i·H, i·H+L).
pub fn segment_patches(x: &[f32], len: usize, hop: usize) -> Result<Tensor<f32>> {
    let p = StftParams {
        fft_size: len,
        hop,
        bins: 1,
    };
    let n = p.frames(x.len())?;
    let mut data = Vec::with_capacity(n * len);
    for i in 0..n {
        data.extend_from_slice(&x[i * hop..i * hop + len]);
    }
    Tensor::from_vec([n, len], data)
}

/// Magnitude STFT (no centering, no zero padding): bins 0..F−1 of the
/// one-sided transform of Hann-windowed frames, plus the aligned raw patches.
pub fn stft_magnitude(x: &[f32], params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    let l = params.fft_size;
    let n = params.frames(x.len())?;
    let f = params.bins;
    let window = hann_window(l)?;
    let patches = segment_patches(x, l, params.hop)?;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(l);
    let mut mags = Tensor::zeros([f, n]);
    let md = mags.data_mut();
    let mut frame = vec![Complex::new(0.0, 0.0); l];
    for t in 0..n {
        let patch = &patches.data()[t * l..(t + 1) * l];
        for (j, slot) in frame.iter_mut().enumerate() {
            *slot = Complex::new(patch[j] as f64 * window[j], 0.0);
        }
        fft.process(&mut frame);
        for (bin, row) in frame.iter().take(f).enumerate() {
            md[bin * n + t] = row.norm() as f32;
        }
    }
    Ok(Spectrogram { mags, patches })
}
