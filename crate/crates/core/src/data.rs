//! Recording storage, dataset manifests, normalization, batching, and the
//! synthetic motif generator used for end-to-end verification.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};
use crate::signal::Recording;

const MAGIC: &[u8; 4] = b"TFMR";
const VERSION: u32 = 1;
/// magic + version + channels + samples + fs + label + subject, 4 bytes each.
pub const HEADER_BYTES: usize = 28;

pub fn write_recording(rec: &Recording, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_BYTES + 4 * rec.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(rec.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(rec.samples as u32).to_le_bytes());
    buf.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    buf.extend_from_slice(&rec.label.unwrap_or(-1).to_le_bytes());
    buf.extend_from_slice(&rec.subject.to_le_bytes());
    for &v in &rec.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn read_recording(path: &Path) -> Result<Recording> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_BYTES {
        return Err(CoreError::Format(format!(
            "{}: truncated header, {} bytes < {HEADER_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CoreError::Format(format!(
            "{}: bad magic {:?}, expected {MAGIC:?}",
            path.display(),
            &bytes[0..4]
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(CoreError::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let channels = u32_at(8) as usize;
    let samples = u32_at(12) as usize;
    let fs = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let label = i32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let subject = u32_at(24);
    let expected = HEADER_BYTES + 4 * channels * samples;
    if bytes.len() != expected {
        return Err(CoreError::Format(format!(
            "{}: expected {expected} bytes for {channels}x{samples} payload, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut rec = Recording::new(channels, samples, fs, data)?;
    rec.label = if label < 0 { None } else { Some(label) };
    rec.subject = subject;
    Ok(rec)
}

/// Write via a temp file in the same directory, then rename, so readers never
/// observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .map_err(|e| CoreError::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Config(format!(
                "unknown split {other:?} (expected train/val/test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub label: i32,
    pub subject: u32,
}

/// Dataset index: one JSON record per line, recording paths relative to `root`.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn build(root: PathBuf, entries: Vec<ManifestEntry>, subject_wise: bool) -> Result<Manifest> {
        let m = Manifest { root, entries };
        if subject_wise {
            m.check_subject_disjoint()?;
        }
        Ok(m)
    }

    pub fn check_subject_disjoint(&self) -> Result<()> {
        use std::collections::HashMap;
        let mut seen: HashMap<u32, Split> = HashMap::new();
        for e in &self.entries {
            match seen.get(&e.subject) {
                Some(&s) if s != e.split => {
                    return Err(contract(&format!(
                        "subject {} appears in both {s} and {} splits",
                        e.subject, e.split
                    )))
                }
                _ => {
                    seen.insert(e.subject, e.split);
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut buf, e).map_err(|e| CoreError::Format(e.to_string()))?;
            buf.push(b'\n');
        }
        atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        let root = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|err| {
                CoreError::Format(format!("{}:{}: {err}", path.display(), i + 1))
            })?;
            entries.push(e);
        }
        Ok(Manifest { root, entries })
    }

    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }
}

/// Divide each channel by its 95th-percentile absolute amplitude
/// (nearest-rank on the sorted values), floored at 1e-6 so silent channels
/// pass through unchanged.
pub fn normalize_segment(rec: &mut Recording) {
    for c in 0..rec.channels {
        let t = rec.samples;
        let ch = &mut rec.data[c * t..(c + 1) * t];
        let mut abs: Vec<f32> = ch.iter().map(|v| v.abs()).collect();
        abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.95 * t as f64).ceil() as usize).clamp(1, t) - 1;
        let scale = abs[rank].max(1e-6);
        for v in ch.iter_mut() {
            *v /= scale;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotifProgram {
    /// Gaussian-windowed sinusoid; per-sample center frequency is jittered
    /// within `bandwidth_hz` and onset within `onset_jitter_s`.
    Burst {
        center_hz: f32,
        bandwidth_hz: f32,
        amplitude: f32,
        duration_s: f32,
        onset_jitter_s: f32,
    },
    /// Narrow Gaussian transients at a fixed mean rate with timing jitter.
    SpikeTrain {
        rate_hz: f32,
        width_ms: f32,
        amplitude: f32,
    },
    /// Sharp spike followed by a slow half-wave, repeating at `period_s`.
    SpikeWave {
        period_s: f32,
        spike_width_ms: f32,
        amplitude: f32,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClass {
    pub name: String,
    pub motif: MotifProgram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<SyntheticClass>,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f32,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// RMS of the 1/f background noise.
    pub noise_level: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: vec![
                SyntheticClass {
                    name: "theta_burst".into(),
                    motif: MotifProgram::Burst {
                        center_hz: 5.0,
                        bandwidth_hz: 1.0,
                        amplitude: 2.5,
                        duration_s: 1.5,
                        onset_jitter_s: 1.0,
                    },
                },
                SyntheticClass {
                    name: "gamma_burst".into(),
                    motif: MotifProgram::Burst {
                        center_hz: 30.0,
                        bandwidth_hz: 2.0,
                        amplitude: 2.5,
                        duration_s: 1.5,
                        onset_jitter_s: 1.0,
                    },
                },
                SyntheticClass {
                    name: "spike_wave".into(),
                    motif: MotifProgram::SpikeWave {
                        period_s: 1.5,
                        spike_width_ms: 40.0,
                        amplitude: 3.0,
                    },
                },
            ],
            channels: 4,
            samples: 1000,
            sample_rate_hz: 200.0,
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 50,
            noise_level: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(contract("synthetic spec needs at least one class"));
        }
        for c in &self.classes {
            let f = match c.motif {
                MotifProgram::Burst { center_hz, .. } => center_hz,
                MotifProgram::SpikeTrain { rate_hz, .. } => rate_hz,
                MotifProgram::SpikeWave { period_s, .. } => 1.0 / period_s,
            };
            if !(f > 0.0 && f < self.sample_rate_hz / 2.0) {
                return Err(contract(&format!(
                    "class {:?}: motif frequency {f} Hz outside (0, fs/2)",
                    c.name
                )));
            }
        }
        if self.channels == 0 || self.samples == 0 || self.sample_rate_hz <= 0.0 {
            return Err(contract("synthetic spec dimensions must be positive"));
        }
        Ok(())
    }
}

/// Spectral synthesis of 1/f ("pink") noise: random-phase spectrum with
/// amplitude proportional to 1/sqrt(f), inverse FFT, then scaled to unit RMS.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut spectrum = vec![Complex::new(0.0f64, 0.0); n];
    for k in 1..=n / 2 {
        let amp = 1.0 / (k as f64).sqrt();
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let c = Complex::from_polar(amp, phase);
        spectrum[k] = c;
        if k != n - k {
            spectrum[n - k] = c.conj();
        } else {
            spectrum[k] = Complex::new(amp, 0.0);
        }
    }
    FftPlanner::new()
        .plan_fft_inverse(n)
        .process(&mut spectrum);
    let raw: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    raw.iter().map(|v| (v / rms) as f32).collect()
}

fn render_motif(motif: &MotifProgram, samples: usize, fs: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; samples];
    let dt = 1.0 / fs as f64;
    match *motif {
        MotifProgram::Burst {
            center_hz,
            bandwidth_hz,
            amplitude,
            duration_s,
            onset_jitter_s,
        } => {
            let total_s = samples as f64 * dt;
            let dur = duration_s as f64;
            let jitter = (onset_jitter_s as f64).min((total_s - dur).max(0.0));
            let onset = rng.gen_range(0.0..=jitter.max(1e-9));
            let center = onset + dur / 2.0;
            let sigma = dur / 4.0;
            let freq = center_hz as f64
                + rng.gen_range(-0.5..0.5) * bandwidth_hz as f64;
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for (i, v) in out.iter_mut().enumerate() {
                let t = i as f64 * dt;
                let env = (-((t - center) / sigma).powi(2) / 2.0).exp();
                *v = (amplitude as f64 * env * (std::f64::consts::TAU * freq * t + phase).sin())
                    as f32;
            }
        }
        MotifProgram::SpikeTrain {
            rate_hz,
            width_ms,
            amplitude,
        } => {
            let period = 1.0 / rate_hz as f64;
            let sigma = width_ms as f64 / 1000.0 / 2.0;
            let total_s = samples as f64 * dt;
            let mut t0 = rng.gen_range(0.0..period);
            while t0 < total_s {
                let center = t0 + rng.gen_range(-0.1..0.1) * period;
                for (i, v) in out.iter_mut().enumerate() {
                    let t = i as f64 * dt;
                    *v += (amplitude as f64 * (-((t - center) / sigma).powi(2) / 2.0).exp()) as f32;
                }
                t0 += period;
            }
        }
        MotifProgram::SpikeWave {
            period_s,
            spike_width_ms,
            amplitude,
        } => {
            let period = period_s as f64;
            let sigma = spike_width_ms as f64 / 1000.0 / 2.0;
            let wave_dur = period / 2.0;
            let total_s = samples as f64 * dt;
            let mut t0 = rng.gen_range(0.0..period * 0.5);
            while t0 < total_s {
                for (i, v) in out.iter_mut().enumerate() {
                    let t = i as f64 * dt;
                    let spike = amplitude as f64 * (-((t - t0) / sigma).powi(2) / 2.0).exp();
                    let rel = t - t0;
                    let wave = if rel > 0.0 && rel < wave_dur {
                        -0.6 * amplitude as f64 * (std::f64::consts::PI * rel / wave_dur).sin()
                    } else {
                        0.0
                    };
                    *v += (spike + wave) as f32;
                }
                t0 += period;
            }
        }
    }
    out
}

fn synth_recording(
    spec: &SyntheticSpec,
    class_idx: usize,
    subject: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Recording> {
    let motif = render_motif(
        &spec.classes[class_idx].motif,
        spec.samples,
        spec.sample_rate_hz,
        rng,
    );
    let mut data = Vec::with_capacity(spec.channels * spec.samples);
    for _ in 0..spec.channels {
        let noise = pink_noise(spec.samples, rng);
        let gain: f32 = rng.gen_range(0.6..1.0);
        for i in 0..spec.samples {
            data.push(gain * motif[i] + spec.noise_level * noise[i]);
        }
    }
    let mut rec = Recording::new(spec.channels, spec.samples, spec.sample_rate_hz, data)?;
    rec.label = Some(class_idx as i32);
    rec.subject = subject;
    Ok(rec)
}

/// Generate the synthetic dataset under `out_dir`: recordings in `data/`,
/// manifest at `out_dir/manifest.jsonl`. Deterministic per seed; splits are
/// subject-disjoint by construction (each split draws from its own subject
/// range).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir)?;
    let mut entries = Vec::new();
    let splits = [
        (Split::Train, spec.train_per_class, 0u32),
        (Split::Val, spec.val_per_class, 1000),
        (Split::Test, spec.test_per_class, 2000),
    ];
    for (split, per_class, subject_base) in splits {
        for (ci, _) in spec.classes.iter().enumerate() {
            for i in 0..per_class {
                // Ten subjects per (split, class) group, never reused elsewhere.
                let subject = subject_base + (ci * 10 + i % 10) as u32;
                let rec = synth_recording(spec, ci, subject, &mut rng)?;
                let name = format!("data/{split}_c{ci}_{i:04}.tfmr");
                write_recording(&rec, &out_dir.join(&name))?;
                entries.push(ManifestEntry {
                    path: name,
                    split,
                    label: ci as i32,
                    subject,
                });
            }
        }
    }
    let manifest = Manifest::build(out_dir.to_path_buf(), entries, true)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// One split loaded into memory and cut into fixed-length segments
/// (tail samples shorter than `segment_len` are dropped).
pub struct Dataset {
    pub segment_len: usize,
    pub segments: Vec<Recording>,
}

impl Dataset {
    pub fn load(
        manifest: &Manifest,
        split: Split,
        segment_len: usize,
        normalize: bool,
    ) -> Result<Dataset> {
        let mut segments = Vec::new();
        for entry in manifest.entries_for(split) {
            let rec = read_recording(&manifest.resolve(entry))?;
            for s in 0..rec.samples / segment_len {
                let mut data = Vec::with_capacity(rec.channels * segment_len);
                for c in 0..rec.channels {
                    let ch = rec.channel(c);
                    data.extend_from_slice(&ch[s * segment_len..(s + 1) * segment_len]);
                }
                let mut seg = Recording::new(rec.channels, segment_len, rec.sample_rate_hz, data)?;
                seg.label = Some(entry.label);
                seg.subject = entry.subject;
                if normalize {
                    normalize_segment(&mut seg);
                }
                segments.push(seg);
            }
        }
        if segments.is_empty() {
            return Err(contract(&format!("split {split} is empty")));
        }
        Ok(Dataset {
            segment_len,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Deterministic batch order for one epoch: Fisher–Yates shuffle seeded by
/// (seed, epoch), then contiguous chunks; the final short batch is kept.
pub fn iterate_batches(
    n: usize,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(contract("cannot batch an empty split"));
    }
    if batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_mul(0x9E3779B97F4A7C15) ^ epoch);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
