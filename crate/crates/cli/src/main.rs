//! `tfm` — command-line driver for the three-phase training protocol:
//! tokenizer pretraining, masked-token encoder pretraining, and
//! classification fine-tuning, plus dataset generation and reporting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tfm_core::ckpt::{load_state, save_state, TrainState};
use tfm_core::config::{RngPolicy, RunConfig};
use tfm_core::data::{generate_synthetic, Manifest, Split, SyntheticSpec};
use tfm_core::downstream::EncoderState;
use tfm_core::error::CoreError;
use tfm_core::optim::AdamHyper;
use tfm_core::tokenizer::TokenizerState;
use tfm_core::train::{
    analyze_tokens, append_metrics, evaluate, finetune, pretrain_encoder, pretrain_tokenizer,
    save_token_dump, tokenize_split, EpochRecord,
};

#[derive(Parser)]
#[command(name = "tfm", version, about = "Time-frequency motif tokenizer pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest path
    #[arg(long)]
    data: PathBuf,
    /// Output directory for artifacts
    #[arg(long)]
    out: PathBuf,
    /// Master seed override (otherwise from config)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motif dataset and its manifest
    GenSynth {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Master seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Phase 1: train the spectrogram tokenizer
    PretrainTokenizer {
        #[command(flatten)]
        common: CommonArgs,
        /// Limit how many channels per segment feed tokenizer training
        #[arg(long)]
        channel_cap: Option<usize>,
    },
    /// Tokenize every split with a frozen tokenizer
    Tokenize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tokenizer_ckpt: Option<PathBuf>,
    },
    /// Phase 2: masked-token pretraining of the sequence encoder
    PretrainEncoder {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tokenizer_ckpt: Option<PathBuf>,
    },
    /// Phase 3: fine-tune for classification
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tokenizer_ckpt: Option<PathBuf>,
        /// Pretrained encoder checkpoint
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Train only the classification head; the trunk stays frozen
        #[arg(long)]
        head_only: bool,
    },
    /// Evaluate a fine-tuned classifier on the test split
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tokenizer_ckpt: Option<PathBuf>,
        /// Fine-tuned classifier checkpoint
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Token-quality report (utilization, uniqueness, retrieval, entropy)
    AnalyzeTokens {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tokenizer_ckpt: Option<PathBuf>,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_) | CoreError::Contract(_) => 3,
        _ => 1,
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CoreError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_flag<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CoreError> {
    value
        .as_deref()
        .ok_or_else(|| CoreError::Config(format!("missing required flag {flag}")))
}

fn load_tokenizer(path: &Path, cfg: &RunConfig) -> Result<TokenizerState, CoreError> {
    let state = load_state(path, AdamHyper::default())?;
    let codebook = state.codebook.ok_or_else(|| {
        CoreError::Format(format!("{} holds no codebook; not a tokenizer checkpoint", path.display()))
    })?;
    Ok(TokenizerState {
        cfg: cfg.tokenizer,
        params: state.params,
        codebook,
    })
}

fn save_tokenizer(path: &Path, state: &TokenizerState) -> Result<(), CoreError> {
    save_state(
        path,
        &TrainState {
            params: state.params.clone(),
            opt: None,
            codebook: Some(state.codebook.clone()),
        },
    )
}

fn load_encoder(path: &Path, cfg: &RunConfig) -> Result<EncoderState, CoreError> {
    let state = load_state(path, AdamHyper::default())?;
    Ok(EncoderState {
        cfg: cfg.encoder,
        params: state.params,
    })
}

fn save_encoder(path: &Path, state: &EncoderState) -> Result<(), CoreError> {
    save_state(
        path,
        &TrainState {
            params: state.params.clone(),
            opt: None,
            codebook: None,
        },
    )
}

fn write_report(path: &Path, report: &tfm_core::analytics::MetricReport) -> Result<(), CoreError> {
    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| CoreError::Format(e.to_string()))?;
    tfm_core::data::atomic_write(path, &json)
}

fn wall_record(phase: &str, start: Instant) -> EpochRecord {
    EpochRecord {
        phase: phase.into(),
        epoch: 0,
        lr: 0.0,
        loss: 0.0,
        aux: 0.0,
        codes: 0.0,
        wall_s: start.elapsed().as_secs_f64(),
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::GenSynth { out, seed } => {
            let manifest = generate_synthetic(&SyntheticSpec::default(), seed, &out)?;
            log::info!(
                "wrote {} recordings under {}",
                manifest.entries.len(),
                out.display()
            );
        }
        Command::PretrainTokenizer { common, channel_cap } => {
            let cfg = load_config(&common.config, common.seed)?;
            let manifest = Manifest::load(&common.data)?;
            std::fs::create_dir_all(&common.out)?;
            let policy = RngPolicy::new(cfg.train.seed);
            let (state, records) = pretrain_tokenizer(&cfg, &manifest, &policy, channel_cap)?;
            append_metrics(&common.out.join("metrics.jsonl"), &records)?;
            save_tokenizer(&common.out.join("tokenizer.tfmc"), &state)?;
        }
        Command::Tokenize { common, tokenizer_ckpt } => {
            let cfg = load_config(&common.config, common.seed)?;
            let ckpt = require_flag(&tokenizer_ckpt, "--tokenizer-ckpt")?;
            let manifest = Manifest::load(&common.data)?;
            std::fs::create_dir_all(&common.out)?;
            let start = Instant::now();
            let tok = load_tokenizer(ckpt, &cfg)?;
            for split in [Split::Train, Split::Val, Split::Test] {
                if manifest.entries_for(split).next().is_none() {
                    continue;
                }
                let samples = tokenize_split(&tok, &cfg, &manifest, split)?;
                save_token_dump(&common.out.join(format!("tokens_{split}.jsonl")), &samples)?;
            }
            append_metrics(&common.out.join("metrics.jsonl"), &[wall_record("tokenize", start)])?;
        }
        Command::PretrainEncoder { common, tokenizer_ckpt } => {
            let cfg = load_config(&common.config, common.seed)?;
            let ckpt = require_flag(&tokenizer_ckpt, "--tokenizer-ckpt")?;
            let manifest = Manifest::load(&common.data)?;
            std::fs::create_dir_all(&common.out)?;
            let tok = load_tokenizer(ckpt, &cfg)?;
            let samples = tokenize_split(&tok, &cfg, &manifest, Split::Train)?;
            let policy = RngPolicy::new(cfg.train.seed);
            let (state, records) = pretrain_encoder(&cfg, &tok, &samples, &policy)?;
            append_metrics(&common.out.join("metrics.jsonl"), &records)?;
            save_encoder(&common.out.join("encoder.tfmc"), &state)?;
        }
        Command::Finetune { common, tokenizer_ckpt, ckpt, head_only } => {
            let cfg = load_config(&common.config, common.seed)?;
            let tok_path = require_flag(&tokenizer_ckpt, "--tokenizer-ckpt")?;
            let enc_path = require_flag(&ckpt, "--ckpt")?;
            let manifest = Manifest::load(&common.data)?;
            std::fs::create_dir_all(&common.out)?;
            let tok = load_tokenizer(tok_path, &cfg)?;
            let mut state = load_encoder(enc_path, &cfg)?;
            let samples = tokenize_split(&tok, &cfg, &manifest, Split::Train)?;
            let policy = RngPolicy::new(cfg.train.seed);
            let records = finetune(&cfg, &mut state, &samples, &policy, head_only)?;
            append_metrics(&common.out.join("metrics.jsonl"), &records)?;
            save_encoder(&common.out.join("classifier.tfmc"), &state)?;
        }
        Command::Evaluate { common, tokenizer_ckpt, ckpt } => {
            let cfg = load_config(&common.config, common.seed)?;
            let tok_path = require_flag(&tokenizer_ckpt, "--tokenizer-ckpt")?;
            let cls_path = require_flag(&ckpt, "--ckpt")?;
            let manifest = Manifest::load(&common.data)?;
            std::fs::create_dir_all(&common.out)?;
            let start = Instant::now();
            let tok = load_tokenizer(tok_path, &cfg)?;
            let state = load_encoder(cls_path, &cfg)?;
            let samples = tokenize_split(&tok, &cfg, &manifest, Split::Test)?;
            let report = evaluate(
                &cfg,
                &state,
                &samples,
                &common.data.display().to_string(),
                &cls_path.display().to_string(),
            )?;
            write_report(&common.out.join("report.json"), &report)?;
            append_metrics(&common.out.join("metrics.jsonl"), &[wall_record("evaluate", start)])?;
        }
        Command::AnalyzeTokens { common, tokenizer_ckpt } => {
            let cfg = load_config(&common.config, common.seed)?;
            let tok_path = require_flag(&tokenizer_ckpt, "--tokenizer-ckpt")?;
            let manifest = Manifest::load(&common.data)?;
            std::fs::create_dir_all(&common.out)?;
            let start = Instant::now();
            let tok = load_tokenizer(tok_path, &cfg)?;
            let samples = tokenize_split(&tok, &cfg, &manifest, Split::Test)?;
            let report = analyze_tokens(
                &samples,
                cfg.tokenizer.codebook_size,
                &common.data.display().to_string(),
            )?;
            write_report(&common.out.join("token_report.json"), &report)?;
            append_metrics(
                &common.out.join("metrics.jsonl"),
                &[wall_record("analyze-tokens", start)],
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse(); // unknown commands/flags: usage text + exit 2
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
