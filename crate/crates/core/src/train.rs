//! Three-phase training orchestration: tokenizer pretraining on masked
//! spectrogram reconstruction, frozen-tokenizer masked-token pretraining of
//! the sequence encoder, and classification fine-tuning — plus evaluation and
//! token-quality analysis over the resulting dumps.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;


use crate::analytics::{
    class_token_sets, class_token_uniqueness, classification_metrics, ranking_metrics,
    retrieval_precision_at_k, token_spectral_entropy, token_utilization, MetricReport,
    TokenSample,
};
use crate::config::{RngPolicy, RngPurpose, RunConfig};
use crate::data::{atomic_write, Dataset, Manifest, Split};
use crate::downstream::{
    finetune_step, mtp_pretrain_step, predict, register_cls_head, register_encoder,
    register_mtp_head, EncoderState, TaskKind,
};
use crate::error::{contract, Result};
use crate::nn::ParameterStore;
use crate::optim::{AdamHyper, AdamW, LrSchedule};
use crate::signal::{stft_magnitude, Spectrogram};
use crate::tokenizer::{
    embedding_pool, revive_dead_codes, seed_codebook_from_data, tokenize_recording,
    tokenizer_train_step, TokenizerState,
};

/// Codes with an EMA count below this are re-seeded from fresh encoder
/// outputs at the end of each tokenizer epoch.
pub const DEAD_CODE_THRESHOLD: f32 = 1e-3;

/// One metrics-log line; the log is one JSON record per epoch.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Phase-specific auxiliary value: commit loss, masked accuracy, …
    pub aux: f64,
    /// Mean distinct codes assigned per step (tokenizer phase only).
    #[serde(default)]
    pub codes: f64,
    pub wall_s: f64,
}

pub fn append_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| contract(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Segment length that yields exactly `max_windows` STFT frames.
pub fn segment_len_for(cfg: &RunConfig) -> usize {
    cfg.tokenizer.fft_size + (cfg.encoder.max_windows - 1) * cfg.tokenizer.hop
}

fn hyper_of(cfg: &RunConfig, finetune: bool) -> AdamHyper {
    AdamHyper {
        beta1: cfg.train.beta1,
        beta2: if finetune { cfg.train.finetune_beta2 } else { cfg.train.beta2 },
        weight_decay: cfg.train.weight_decay,
    }
}

fn schedule_for(cfg: &RunConfig, epochs: usize, steps_per_epoch: usize) -> Result<LrSchedule> {
    let total = (epochs * steps_per_epoch).max(1) as u64;
    let warmup = ((total as f64) * cfg.train.warmup_frac).round() as u64;
    LrSchedule::new(cfg.train.peak_lr, cfg.train.min_lr, warmup, total)
}

/// Phase 1: learn the discrete vocabulary. Every channel of every training
/// segment becomes an independent single-channel spectrogram; `channel_cap`
/// optionally limits how many channels per segment feed the tokenizer (the
/// tokenizer is channel-agnostic, so a subset is a faithful sample).
pub fn pretrain_tokenizer(
    cfg: &RunConfig,
    manifest: &Manifest,
    policy: &RngPolicy,
    channel_cap: Option<usize>,
) -> Result<(TokenizerState, Vec<EpochRecord>)> {
    let data = Dataset::load(manifest, Split::Train, segment_len_for(cfg), true)?;
    let stft = cfg.tokenizer.stft();
    let mut corpus: Vec<Spectrogram> = Vec::new();
    for seg in &data.segments {
        let take = channel_cap.unwrap_or(seg.channels).min(seg.channels);
        for c in 0..take {
            corpus.push(stft_magnitude(seg.channel(c), &stft)?);
        }
    }
    if corpus.is_empty() {
        return Err(contract("no tokenizer training spectrograms"));
    }
    let mut init_rng = policy.stream(RngPurpose::Init);
    let mut state = TokenizerState::init(cfg.tokenizer, &mut init_rng)?;
    // data-seed the vocabulary: random codes sit far from the encoder's
    // output distribution and would never win a nearest-neighbor assignment
    let seed_pool = embedding_pool(&state, &corpus, cfg.tokenizer.codebook_size, &mut init_rng)?;
    seed_codebook_from_data(&mut state, &seed_pool, &mut init_rng)?;
    let mut opt = AdamW::new(&state.params, hyper_of(cfg, false));
    let epochs = cfg.train.tokenizer_epochs;
    let steps_per_epoch = corpus.len().div_ceil(cfg.train.batch);
    let schedule = schedule_for(cfg, epochs, steps_per_epoch)?;
    let mut mask_rng = policy.stream(RngPurpose::Masking);
    let mut revive_rng = policy.stream(RngPurpose::Init);
    revive_rng.set_word_pos(1 << 20); // past the init draws
    let mut records = Vec::with_capacity(epochs);
    let mut step = 0u64;
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut commit_sum = 0.0;
        let mut codes_sum = 0.0;
        let mut batches = 0.0;
        for idx in crate::data::iterate_batches(corpus.len(), cfg.train.batch, cfg.train.seed, epoch as u64)? {
            let batch: Vec<Spectrogram> = idx.iter().map(|&i| corpus[i].clone()).collect();
            let lr = schedule.at(step) as f32;
            let m = tokenizer_train_step(&mut state, &mut opt, &batch, lr, &mut mask_rng)?;
            loss_sum += m.recon_loss;
            commit_sum += m.commit_loss;
            codes_sum += m.codes_used as f64;
            batches += 1.0;
            step += 1;
        }
        // revive starved codes from fresh encoder outputs so the vocabulary
        // stays live as the embedding distribution drifts
        let pool = embedding_pool(&state, &corpus, 512, &mut revive_rng)?;
        revive_dead_codes(&mut state.codebook, &pool, DEAD_CODE_THRESHOLD, &mut revive_rng)?;
        records.push(EpochRecord {
            phase: "tokenizer".into(),
            epoch,
            lr: schedule.at(step.saturating_sub(1)),
            loss: loss_sum / batches,
            aux: commit_sum / batches,
            codes: codes_sum / batches,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok((state, records))
}

/// One tokenized training example: the per-channel token grid plus labels.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TokenizedSample {
    pub sample: usize,
    pub label: i32,
    pub subject: u32,
    /// grid[c][w] = token id of window w in channel c
    pub grid: Vec<Vec<u32>>,
}

/// Phase-boundary artifact: tokenize a whole split with frozen weights.
pub fn tokenize_split(
    tok: &TokenizerState,
    cfg: &RunConfig,
    manifest: &Manifest,
    split: Split,
) -> Result<Vec<TokenizedSample>> {
    let data = Dataset::load(manifest, split, segment_len_for(cfg), true)?;
    let mut out = Vec::with_capacity(data.segments.len());
    for (i, seg) in data.segments.iter().enumerate() {
        let seq = tokenize_recording(&tok.params, &tok.codebook, &tok.cfg, seg)?;
        out.push(TokenizedSample {
            sample: i,
            label: seg.label.unwrap_or(-1),
            subject: seg.subject,
            grid: seq.ids,
        });
    }
    Ok(out)
}

/// Write a token dump: one JSON record per (sample, channel).
pub fn save_token_dump(path: &Path, samples: &[TokenizedSample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        for (c, ids) in s.grid.iter().enumerate() {
            let rec = serde_json::json!({
                "sample": s.sample,
                "channel": c,
                "label": s.label,
                "subject": s.subject,
                "ids": ids,
            });
            serde_json::to_writer(&mut out, &rec).map_err(|e| contract(e.to_string()))?;
            out.push(b'\n');
        }
    }
    atomic_write(path, &out)
}

/// Phase 2: masked-token pretraining of the sequence encoder on frozen token
/// grids, with the token-embedding table seeded from the codebook.
pub fn pretrain_encoder(
    cfg: &RunConfig,
    tok: &TokenizerState,
    samples: &[TokenizedSample],
    policy: &RngPolicy,
) -> Result<(EncoderState, Vec<EpochRecord>)> {
    if samples.is_empty() {
        return Err(contract("no tokenized samples for MTP pretraining"));
    }
    let mut init_rng = policy.stream(RngPurpose::Init);
    let mut params = ParameterStore::new();
    register_encoder(&mut params, &cfg.encoder, Some(&tok.codebook.vectors), &mut init_rng)?;
    register_mtp_head(&mut params, &cfg.encoder, &mut init_rng)?;
    let mut state = EncoderState { cfg: cfg.encoder, params };
    let mut opt = AdamW::new(&state.params, hyper_of(cfg, false));
    let epochs = cfg.train.mtp_epochs;
    let steps_per_epoch = samples.len().div_ceil(cfg.train.batch);
    let schedule = schedule_for(cfg, epochs, steps_per_epoch)?;
    let mut mask_rng = policy.stream(RngPurpose::Masking);
    mask_rng.set_word_pos(1 << 24); // independent of the tokenizer's mask draws
    let mut records = Vec::with_capacity(epochs);
    let mut step = 0u64;
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut batches = 0.0;
        for idx in crate::data::iterate_batches(samples.len(), cfg.train.batch, cfg.train.seed ^ 0xA5, epoch as u64)? {
            let batch: Vec<Vec<Vec<u32>>> = idx.iter().map(|&i| samples[i].grid.clone()).collect();
            let lr = schedule.at(step) as f32;
            let m = mtp_pretrain_step(&mut state, &mut opt, &batch, lr, &mut mask_rng)?;
            loss_sum += m.ce_loss;
            acc_sum += m.masked_acc;
            batches += 1.0;
            step += 1;
        }
        records.push(EpochRecord {
            phase: "mtp".into(),
            epoch,
            lr: schedule.at(step.saturating_sub(1)),
            loss: loss_sum / batches,
            aux: acc_sum / batches,
            codes: 0.0,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok((state, records))
}

fn label_to_class(label: i32, task: &TaskKind) -> Result<usize> {
    if label < 0 {
        return Err(contract("fine-tuning sample has no label"));
    }
    let l = label as usize;
    if l >= task.n_classes() {
        return Err(contract(format!("label {l} outside task with {} classes", task.n_classes())));
    }
    Ok(l)
}

/// Phase 3: attach a classification head and fine-tune (optionally head-only,
/// which leaves every trunk parameter bit-identical).
pub fn finetune(
    cfg: &RunConfig,
    state: &mut EncoderState,
    samples: &[TokenizedSample],
    policy: &RngPolicy,
    head_only: bool,
) -> Result<Vec<EpochRecord>> {
    if samples.is_empty() {
        return Err(contract("no tokenized samples for fine-tuning"));
    }
    let task = cfg.task;
    let mut init_rng = policy.stream(RngPurpose::Init);
    init_rng.set_word_pos(1 << 28); // distinct from trunk init draws
    if state.params.index_of("cls.w").is_err() {
        register_cls_head(&mut state.params, &cfg.encoder, &task, &mut init_rng)?;
    }
    let mut opt = AdamW::new(&state.params, hyper_of(cfg, true));
    let epochs = cfg.train.finetune_epochs;
    let steps_per_epoch = samples.len().div_ceil(cfg.train.batch);
    let schedule = schedule_for(cfg, epochs, steps_per_epoch)?;
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| label_to_class(s.label, &task))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(epochs);
    let mut step = 0u64;
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for idx in crate::data::iterate_batches(samples.len(), cfg.train.batch, cfg.train.seed ^ 0xC3, epoch as u64)? {
            let batch: Vec<Vec<Vec<u32>>> = idx.iter().map(|&i| samples[i].grid.clone()).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let lr = schedule.at(step) as f32;
            loss_sum += finetune_step(state, &mut opt, &batch, &batch_labels, &task, head_only, lr)?;
            batches += 1.0;
            step += 1;
        }
        records.push(EpochRecord {
            phase: "finetune".into(),
            epoch,
            lr: schedule.at(step.saturating_sub(1)),
            loss: loss_sum / batches,
            aux: 0.0,
            codes: 0.0,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(records)
}

/// Evaluate a fine-tuned model on tokenized samples: balanced accuracy,
/// kappa, weighted F1, and (for binary tasks) AUROC/AUC-PR.
pub fn evaluate(
    cfg: &RunConfig,
    state: &EncoderState,
    samples: &[TokenizedSample],
    dataset: &str,
    checkpoint: &str,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(contract("no samples to evaluate"));
    }
    let task = cfg.task;
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut pos_scores = Vec::with_capacity(samples.len());
    for s in samples {
        labels.push(label_to_class(s.label, &task)?);
        let p = predict(&state.params, &state.cfg, &task, &s.grid)?;
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        preds.push(argmax);
        pos_scores.push(*p.last().unwrap());
    }
    let m = classification_metrics(&preds, &labels)?;
    let mut report = MetricReport::new(dataset, checkpoint);
    report.insert("balanced_accuracy", m.balanced_accuracy)?;
    report.insert("kappa", m.kappa)?;
    report.insert("weighted_f1", m.weighted_f1)?;
    if matches!(task, TaskKind::Binary { .. }) {
        let bin: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let r = ranking_metrics(&pos_scores, &bin)?;
        report.insert("auroc", r.auroc)?;
        report.insert("auc_pr", r.auc_pr)?;
    }
    Ok(report)
}

/// Token-quality report over a dump: vocabulary utilization, per-class
/// uniqueness (with geometric mean), Jaccard retrieval precision@5, and mean
/// spectral entropy of the per-channel token sequences. Note the entropy acts
/// on raw integer ids, so it inherits their ordinal artifacts.
pub fn analyze_tokens(
    samples: &[TokenizedSample],
    vocab: usize,
    dataset: &str,
) -> Result<MetricReport> {
    let profiles: Vec<TokenSample> = samples
        .iter()
        .map(|s| {
            let flat: Vec<u32> = s.grid.iter().flatten().copied().collect();
            TokenSample::from_ids(s.sample, s.label.max(0) as usize, &flat)
        })
        .collect();
    let mut report = MetricReport::new(dataset, "token-dump");
    report.insert("token_utilization_pct", token_utilization(&profiles, vocab)?)?;
    let sets = class_token_sets(&profiles);
    if sets.len() >= 2 {
        let (per_class, gm) = class_token_uniqueness(&sets)?;
        report.insert("class_token_uniqueness_gm", gm)?;
        report.per_class.insert("class_token_uniqueness".into(), per_class);
    }
    let k_top = 5.min(profiles.len().saturating_sub(1));
    if k_top > 0 {
        report.insert(
            "retrieval_precision_at_5",
            retrieval_precision_at_k(&profiles, &profiles, k_top, false)?,
        )?;
    }
    let mut entropy_sum = 0.0;
    let mut entropy_n = 0.0;
    for s in samples {
        for ids in &s.grid {
            if ids.len() >= 4 {
                entropy_sum += token_spectral_entropy(ids)?;
                entropy_n += 1.0;
            }
        }
    }
    if entropy_n > 0.0 {
        report.insert("mean_token_spectral_entropy", entropy_sum / entropy_n)?;
    }
    Ok(report)
}

/// End-to-end artifact bundle from a full three-phase run.
pub struct PipelineOutcome {
    pub tokenizer: TokenizerState,
    pub encoder: EncoderState,
    pub records: Vec<EpochRecord>,
    pub test_report: MetricReport,
    pub token_report: MetricReport,
}

/// Run all three phases on one manifest and evaluate on its test split.
pub fn run_pipeline(
    cfg: &RunConfig,
    manifest: &Manifest,
    channel_cap: Option<usize>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let policy = RngPolicy::new(cfg.train.seed);
    let (tokenizer, mut records) = pretrain_tokenizer(cfg, manifest, &policy, channel_cap)?;
    let train_tokens = tokenize_split(&tokenizer, cfg, manifest, Split::Train)?;
    let test_tokens = tokenize_split(&tokenizer, cfg, manifest, Split::Test)?;
    let (mut encoder, mtp_records) = pretrain_encoder(cfg, &tokenizer, &train_tokens, &policy)?;
    records.extend(mtp_records);
    records.extend(finetune(cfg, &mut encoder, &train_tokens, &policy, false)?);
    let test_report = evaluate(cfg, &encoder, &test_tokens, "synthetic-test", "in-memory")?;
    let token_report = analyze_tokens(&test_tokens, cfg.tokenizer.codebook_size, "synthetic-test")?;
    Ok(PipelineOutcome {
        tokenizer,
        encoder,
        records,
        test_report,
        token_report,
    })
}
