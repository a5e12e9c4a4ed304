//! Checkpoint container: an ordered list of named f32 tensors in a small
//! binary format ("TFMC", little-endian, trailing CRC32), plus helpers that
//! pack and unpack whole training states (parameters, optimizer moments,
//! codebook statistics).

use std::collections::BTreeSet;
use std::path::Path;

use crate::data::atomic_write;
use crate::error::{CoreError, Result};
use crate::nn::ParameterStore;
use crate::optim::{AdamHyper, AdamW};
use crate::tensor::Tensor;
use crate::tokenizer::Codebook;

const MAGIC: &[u8; 4] = b"TFMC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn format_err(msg: impl Into<String>) -> CoreError {
    CoreError::Format(msg.into())
}

/// Serialize named tensors. Layout: magic, version u32, tensor count u32,
/// then per tensor: name length u32 + UTF-8 name, rank u32, extents u32…,
/// dtype tag u8, payload little-endian row-major; finally CRC32 (IEEE) over
/// all tensor records.
pub fn encode_tensors(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(format_err(format!("duplicate tensor name {name:?}")));
        }
    }
    let mut body = Vec::new();
    for (name, t) in entries {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            body.extend_from_slice(&(e as u32).to_le_bytes());
        }
        body.push(DTYPE_F32);
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(12 + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 {
        return Err(format_err("checkpoint truncated before header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(format_err(format!(
            "checkpoint CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = body
            .get(*pos..*pos + n)
            .ok_or_else(|| format_err("checkpoint truncated inside a tensor record"))?;
        *pos += n;
        Ok(s)
    };
    // the header is outside the CRC, so bound the count by the smallest
    // possible record (9 bytes) before trusting it with an allocation
    if count > body.len() / 9 + 1 {
        return Err(format_err(format!("implausible tensor count {count}")));
    }
    let mut out = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(format_err(format!("duplicate tensor name {name:?}")));
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(format_err(format!("unknown dtype tag {dtype}")));
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut pos, n * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if pos != body.len() {
        return Err(format_err(format!(
            "{} trailing bytes after the last tensor record",
            body.len() - pos
        )));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    atomic_write(path, &encode_tensors(entries)?)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_tensors(&std::fs::read(path)?)
}

/// A full training snapshot: model parameters in registration order, the
/// optimizer's moments and step count, and (for the tokenizer) EMA codebook
/// statistics.
pub struct TrainState {
    pub params: ParameterStore<f32>,
    pub opt: Option<AdamW<f32>>,
    pub codebook: Option<Codebook<f32>>,
}

/// Pack a training state into tensor records. Parameter order is preserved so
/// a reloaded store aligns slot-for-slot with fresh optimizer state; names are
/// prefixed to keep the namespaces apart.
pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut entries = Vec::new();
    for (name, t) in state.params.iter() {
        entries.push((format!("param.{name}"), t.clone()));
    }
    if let Some(opt) = &state.opt {
        entries.push((
            "opt.step".to_string(),
            Tensor::from_vec([1], vec![opt.step as f32])?,
        ));
        for (i, (name, _)) in state.params.iter().enumerate() {
            entries.push((format!("opt.m.{name}"), opt.m[i].clone()));
            entries.push((format!("opt.v.{name}"), opt.v[i].clone()));
        }
    }
    if let Some(cb) = &state.codebook {
        entries.push(("codebook.vectors".to_string(), cb.vectors.clone()));
        entries.push((
            "codebook.counts".to_string(),
            Tensor::from_vec([cb.counts.len()], cb.counts.clone())?,
        ));
        entries.push(("codebook.sums".to_string(), cb.sums.clone()));
    }
    write_tensors(path, &entries)
}

/// Rebuild a training state. Optimizer moments and codebook statistics are
/// restored when present; `hyper` supplies the non-tensor optimizer settings.
pub fn load_state(path: &Path, hyper: AdamHyper) -> Result<TrainState> {
    let entries = read_tensors(path)?;
    let mut params = ParameterStore::new();
    for (name, t) in &entries {
        if let Some(base) = name.strip_prefix("param.") {
            params.insert(base, t.clone())?;
        }
    }
    if params.len() == 0 {
        return Err(format_err("checkpoint contains no parameters"));
    }
    let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let opt = if let Some(step) = find("opt.step") {
        let mut opt = AdamW::new(&params, hyper);
        opt.step = step.item() as u64;
        for (i, (name, t)) in params.iter().enumerate() {
            let m = find(&format!("opt.m.{name}"))
                .ok_or_else(|| format_err(format!("missing optimizer moment for {name}")))?;
            let v = find(&format!("opt.v.{name}"))
                .ok_or_else(|| format_err(format!("missing optimizer moment for {name}")))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(format_err(format!("optimizer moment shape mismatch for {name}")));
            }
            opt.m[i] = m.clone();
            opt.v[i] = v.clone();
        }
        Some(opt)
    } else {
        None
    };
    let codebook = match (find("codebook.vectors"), find("codebook.counts"), find("codebook.sums")) {
        (Some(vectors), Some(counts), Some(sums)) => {
            if vectors.shape() != sums.shape() || vectors.shape()[0] != counts.len() {
                return Err(format_err("codebook record shapes disagree"));
            }
            Some(Codebook {
                vectors: vectors.clone(),
                counts: counts.data().to_vec(),
                sums: sums.clone(),
            })
        }
        (None, None, None) => None,
        _ => return Err(format_err("partial codebook records in checkpoint")),
    };
    Ok(TrainState { params, opt, codebook })
}
