//! Downstream token-sequence classifier: token/channel/position embeddings,
//! a linear-attention transformer trunk, masked-token-prediction pretraining,
//! and classification fine-tuning off the class token.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{contract, CoreError, Result};
use crate::nn::{
    layer_norm_forward, linear_forward, register_linear, register_norm,
    register_transformer_stack, transformer_stack_forward, uniform_init, AttnKind, ParameterStore,
};
use crate::optim::AdamW;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Token vocabulary size; must match the tokenizer codebook.
    pub vocab: usize,
    pub max_channels: usize,
    pub max_windows: usize,
    /// Fraction of token positions hidden during masked-token pretraining.
    pub r_mask: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            width: 64,
            heads: 8,
            vocab: 8192,
            max_channels: 16,
            max_windows: 9,
            r_mask: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(contract("width must be divisible by heads"));
        }
        if self.layers == 0 || self.vocab == 0 || self.max_channels == 0 || self.max_windows == 0 {
            return Err(contract("encoder extents must be positive"));
        }
        if !(0.0..1.0).contains(&self.r_mask) {
            return Err(contract("MTP mask ratio must lie in [0,1)"));
        }
        Ok(())
    }
}

/// Classification objective flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Softmax + label-smoothed (0.1) cross-entropy.
    Multiclass { classes: usize },
    /// Sigmoid output; plain binary CE, or focal (γ=2, α=0.25) when selected.
    Binary { focal: bool },
}

impl TaskKind {
    pub fn head_dim(&self) -> usize {
        match *self {
            TaskKind::Multiclass { classes } => classes,
            TaskKind::Binary { .. } => 1,
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            TaskKind::Multiclass { classes } => classes,
            TaskKind::Binary { .. } => 2,
        }
    }
}

/// Register the trunk: embedding tables, linear-attention stack, final norm.
/// When `codebook` is given the token-embedding table starts as an entrywise
/// copy of it.
pub fn register_encoder<S: Scalar>(
    store: &mut ParameterStore<S>,
    cfg: &EncoderConfig,
    codebook: Option<&Tensor<S>>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    let bound = 1.0 / (d as f64).sqrt();
    let tok = match codebook {
        Some(cb) => {
            if cb.shape() != [cfg.vocab, d] {
                return Err(contract(format!(
                    "codebook {:?} does not match vocab {}x{d}",
                    cb.shape(),
                    cfg.vocab
                )));
            }
            cb.clone()
        }
        None => uniform_init([cfg.vocab, d], bound, rng),
    };
    store.insert("emb.tok", tok)?;
    store.insert("emb.mask", uniform_init([1, d], bound, rng))?;
    store.insert("emb.cls", uniform_init([1, d], bound, rng))?;
    store.insert("emb.chan", uniform_init([cfg.max_channels, d], bound, rng))?;
    store.insert("emb.pos", uniform_init([cfg.max_windows, d], bound, rng))?;
    register_transformer_stack(store, "enc", cfg.layers, d, rng)?;
    register_norm(store, "out_ln", d)
}

/// Masked-token-prediction head, present only while pretraining.
pub fn register_mtp_head<S: Scalar>(
    store: &mut ParameterStore<S>,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    register_linear(store, "mtp", cfg.vocab, cfg.width, rng)
}

/// Classification head, present only for fine-tune/eval.
pub fn register_cls_head<S: Scalar>(
    store: &mut ParameterStore<S>,
    cfg: &EncoderConfig,
    task: &TaskKind,
    rng: &mut impl Rng,
) -> Result<()> {
    register_linear(store, "cls", task.head_dim(), cfg.width, rng)
}

/// Embed a C×N token grid into the encoder input: class token at index 0,
/// then all windows of channel 0, channel 1, … Each token position gets
/// token (or MASK) embedding + channel embedding + window-position embedding.
pub fn build_input<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    cfg: &EncoderConfig,
    grid: &[Vec<u32>],
    mask: Option<&[bool]>,
) -> Result<Var> {
    let c = grid.len();
    if c == 0 || c > cfg.max_channels {
        return Err(contract(format!(
            "channel count {c} outside [1, {}]",
            cfg.max_channels
        )));
    }
    let n = grid[0].len();
    if n == 0 || n > cfg.max_windows {
        return Err(contract(format!(
            "window count {n} outside [1, {}]",
            cfg.max_windows
        )));
    }
    if grid.iter().any(|row| row.len() != n) {
        return Err(contract("ragged token grid"));
    }
    if let Some(m) = mask {
        if m.len() != c * n {
            return Err(contract("MTP mask length must equal C*N"));
        }
    }
    let mut tok_ids = Vec::with_capacity(c * n);
    let mut chan_ids = Vec::with_capacity(c * n);
    let mut pos_ids = Vec::with_capacity(c * n);
    for (ci, row) in grid.iter().enumerate() {
        for (wi, &id) in row.iter().enumerate() {
            let id = id as usize;
            if id >= cfg.vocab {
                return Err(contract(format!("token id {id} outside vocab {}", cfg.vocab)));
            }
            let hidden = mask.map_or(false, |m| m[ci * n + wi]);
            // the MASK embedding lives at row `vocab` of the joined table
            tok_ids.push(if hidden { cfg.vocab } else { id });
            chan_ids.push(ci);
            pos_ids.push(wi);
        }
    }
    let table = tape.concat_rows(&[store.var(tape, "emb.tok")?, store.var(tape, "emb.mask")?])?;
    let tok = tape.gather_rows(table, tok_ids)?;
    let chan = tape.gather_rows(store.var(tape, "emb.chan")?, chan_ids)?;
    let pos = tape.gather_rows(store.var(tape, "emb.pos")?, pos_ids)?;
    let summed = tape.add(tape.add(tok, chan)?, pos)?;
    tape.concat_rows(&[store.var(tape, "emb.cls")?, summed])
}

/// Linear-attention trunk + final layer norm over all positions.
pub fn encoder_forward<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<Var> {
    let h = transformer_stack_forward(tape, store, "enc", x, cfg.layers, cfg.heads, AttnKind::Linear)?;
    layer_norm_forward(tape, store, "out_ln", h)
}

pub struct EncoderState {
    pub cfg: EncoderConfig,
    pub params: ParameterStore<f32>,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct MtpMetrics {
    pub ce_loss: f64,
    pub masked_acc: f64,
}

/// Draw a masked position set of round(r·C·N) positions, clamped so at least
/// one position is masked and one visible.
pub fn sample_mtp_mask(
    c: usize,
    n: usize,
    r_mask: f32,
    rng: &mut impl Rng,
) -> Result<Vec<bool>> {
    let total = c * n;
    if total < 2 {
        return Err(contract("token grid too small to mask"));
    }
    let count = ((r_mask as f64 * total as f64).round() as usize).clamp(1, total - 1);
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(rng);
    let mut m = vec![false; total];
    for &i in &idx[..count] {
        m[i] = true;
    }
    Ok(m)
}

/// Cross-entropy at the masked positions of one grid; returns (loss, correct,
/// masked-count).
fn mtp_grid_loss<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    cfg: &EncoderConfig,
    grid: &[Vec<u32>],
    mask: &[bool],
) -> Result<(Var, usize, usize)> {
    let n = grid[0].len();
    let x = build_input(tape, store, cfg, grid, Some(mask))?;
    let h = encoder_forward(tape, store, cfg, x)?;
    let masked_pos: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| if m { Some(i + 1) } else { None }) // +1 skips the class token
        .collect();
    if masked_pos.is_empty() {
        return Err(contract("MTP grid with no masked positions"));
    }
    let targets: Vec<usize> = masked_pos
        .iter()
        .map(|&p| {
            let flat = p - 1;
            grid[flat / n][flat % n] as usize
        })
        .collect();
    let hm = tape.gather_rows(h, masked_pos)?;
    let logits = linear_forward(tape, store, "mtp", hm)?;
    let loss = tape.cross_entropy(logits, &targets, S::zero())?;
    // top-1 accuracy at masked positions
    let lv = tape.value(logits);
    let k = cfg.vocab;
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| {
            let row = &lv.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for i in 1..k {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best == t
        })
        .count();
    Ok((loss, correct, targets.len()))
}

/// One masked-token-prediction step over a batch of token grids.
pub fn mtp_pretrain_step(
    state: &mut EncoderState,
    opt: &mut AdamW<f32>,
    batch: &[Vec<Vec<u32>>],
    lr: f32,
    rng: &mut ChaCha8Rng,
) -> Result<MtpMetrics> {
    if batch.is_empty() {
        return Err(contract("empty MTP batch"));
    }
    let cfg = state.cfg;
    let masks: Vec<Vec<bool>> = batch
        .iter()
        .map(|g| sample_mtp_mask(g.len(), g[0].len(), cfg.r_mask, rng))
        .collect::<Result<_>>()?;
    let params = &state.params;
    let results: Vec<Result<(Gradients<f32>, f64, usize, usize)>> = batch
        .par_iter()
        .zip(&masks)
        .map(|(grid, mask)| {
            let tape = Tape::<f32>::new(params.len());
            let (loss, correct, total) = mtp_grid_loss(&tape, params, &cfg, grid, mask)?;
            let grads = tape.backward(loss)?;
            Ok((grads, tape.value(loss).item() as f64, correct, total))
        })
        .collect();
    let mut merged: Option<Gradients<f32>> = None;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut masked = 0;
    for (i, r) in results.into_iter().enumerate() {
        let (g, l, c, t) = r?;
        if !l.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "non-finite MTP loss at batch index {i}"
            )));
        }
        loss_sum += l;
        correct += c;
        masked += t;
        match &mut merged {
            None => merged = Some(g),
            Some(m) => m.merge(g),
        }
    }
    let mut grads = merged.expect("nonempty batch");
    grads.scale(1.0 / batch.len() as f32);
    opt.apply(&mut state.params, &grads, lr as f64)?;
    Ok(MtpMetrics {
        ce_loss: loss_sum / batch.len() as f64,
        masked_acc: correct as f64 / masked as f64,
    })
}

/// Class-token logits for one grid with a frozen or training trunk.
fn class_logits<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    cfg: &EncoderConfig,
    grid: &[Vec<u32>],
) -> Result<Var> {
    let x = build_input(tape, store, cfg, grid, None)?;
    let h = encoder_forward(tape, store, cfg, x)?;
    let cls = tape.gather_rows(h, vec![0])?;
    linear_forward(tape, store, "cls", cls)
}

const LABEL_SMOOTHING: f32 = 0.1;
const FOCAL_GAMMA: f32 = 2.0;
const FOCAL_ALPHA: f32 = 0.25;

fn classification_loss<S: Scalar>(
    tape: &Tape<S>,
    logits: Var,
    label: usize,
    task: &TaskKind,
) -> Result<Var> {
    match *task {
        TaskKind::Multiclass { classes } => {
            if label >= classes {
                return Err(contract(format!("label {label} outside {classes} classes")));
            }
            tape.cross_entropy(logits, &[label], S::from_f64(LABEL_SMOOTHING as f64))
        }
        TaskKind::Binary { focal } => {
            if label > 1 {
                return Err(contract(format!("binary label {label} not in {{0,1}}")));
            }
            let p = tape.sigmoid(logits);
            let (gamma, alpha) = if focal {
                (FOCAL_GAMMA as f64, FOCAL_ALPHA as f64)
            } else {
                (0.0, 1.0)
            };
            tape.focal_loss(p, &[label == 1], S::from_f64(gamma), S::from_f64(alpha))
        }
    }
}

/// One fine-tuning step. With `head_only` the trunk is bit-frozen: only
/// parameters named `cls.*` change.
pub fn finetune_step(
    state: &mut EncoderState,
    opt: &mut AdamW<f32>,
    batch: &[Vec<Vec<u32>>],
    labels: &[usize],
    task: &TaskKind,
    head_only: bool,
    lr: f32,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(contract("batch/label length mismatch"));
    }
    let cfg = state.cfg;
    let params = &state.params;
    let results: Vec<Result<(Gradients<f32>, f64)>> = batch
        .par_iter()
        .zip(labels)
        .map(|(grid, &label)| {
            let tape = Tape::<f32>::new(params.len());
            let logits = class_logits(&tape, params, &cfg, grid)?;
            let loss = classification_loss(&tape, logits, label, task)?;
            let grads = tape.backward(loss)?;
            Ok((grads, tape.value(loss).item() as f64))
        })
        .collect();
    let mut merged: Option<Gradients<f32>> = None;
    let mut loss_sum = 0.0;
    for (i, r) in results.into_iter().enumerate() {
        let (g, l) = r?;
        if !l.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "non-finite fine-tune loss at batch index {i}"
            )));
        }
        loss_sum += l;
        match &mut merged {
            None => merged = Some(g),
            Some(m) => m.merge(g),
        }
    }
    let mut grads = merged.expect("nonempty batch");
    grads.scale(1.0 / batch.len() as f32);
    if head_only {
        opt.apply_filtered(&mut state.params, &grads, lr as f64, |name| {
            name.starts_with("cls.")
        })?;
    } else {
        opt.apply(&mut state.params, &grads, lr as f64)?;
    }
    Ok(loss_sum / batch.len() as f64)
}

/// Class probabilities for one token grid on frozen weights. Multiclass
/// probabilities softmax to 1; binary returns [1-p, p].
pub fn predict(
    params: &ParameterStore<f32>,
    cfg: &EncoderConfig,
    task: &TaskKind,
    grid: &[Vec<u32>],
) -> Result<Vec<f64>> {
    let tape = Tape::<f32>::new(params.len());
    let logits = class_logits(&tape, params, cfg, grid)?;
    match *task {
        TaskKind::Multiclass { .. } => {
            let probs = tape.softmax_rows(logits)?;
            Ok(tape.value(probs).data().iter().map(|&v| v as f64).collect())
        }
        TaskKind::Binary { .. } => {
            let p = tape.value(tape.sigmoid(logits)).item() as f64;
            Ok(vec![1.0 - p, p])
        }
    }
}
