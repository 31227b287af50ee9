//! ACT1 checkpoint files.
//!
//! Layout (little endian):
//!
//! ```text
//! "ACT1"  u32 version
//! u32 len, config text (key=value lines, UTF-8)
//! u32 count, then per parameter block:
//!     u32 name_len, name, u32 rows, u32 cols, rows*cols f32
//! u32 count, Adam moment blocks in the same encoding ("adam.m.*", "adam.v.*")
//! u64 Adam step
//! u64 RNG seed, 56 bytes RNG state (seed, stream, word position)
//! u64 completed epochs
//! u32 count, then per history entry: u64 epoch, f64 objective, ce, recon, entropy
//! ```
//!
//! Every field is stored at full precision, so save → load → save is
//! byte-identical.

use std::fs;
use std::path::Path;

use super::{AdamState, EpochLog, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParamSet, Rng, RngState, Tensor2};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_blocks<'a>(out: &mut Vec<u8>, blocks: impl Iterator<Item = (String, &'a Tensor2<f32>)>) {
    let blocks: Vec<_> = blocks.collect();
    put_u32(out, blocks.len());
    for (name, t) in blocks {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rows());
        put_u32(out, t.cols());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(cfg: &TrainConfig, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = cfg.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_blocks(
        &mut out,
        state
            .model
            .params
            .iter()
            .map(|p| (p.name.clone(), &p.value)),
    );
    let moments = state
        .adam
        .m
        .iter()
        .map(|p| (format!("{ADAM_M}{}", p.name), &p.value))
        .chain(
            state
                .adam
                .v
                .iter()
                .map(|p| (format!("{ADAM_V}{}", p.name), &p.value)),
        );
    put_blocks(&mut out, moments);
    out.extend_from_slice(&state.adam.step.to_le_bytes());
    out.extend_from_slice(&state.rng.seed().to_le_bytes());
    out.extend_from_slice(&state.rng.state().to_bytes());
    out.extend_from_slice(&state.epoch.to_le_bytes());
    put_u32(&mut out, state.history.len());
    for h in &state.history {
        out.extend_from_slice(&h.epoch.to_le_bytes());
        for v in [h.objective, h.ce, h.recon, h.entropy] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }

    fn blocks(&mut self) -> Result<Vec<(String, Tensor2<f32>)>> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.string()?;
            let rows = self.u32()?;
            let cols = self.u32()?;
            let raw = self.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor2::from_vec(rows, cols, data)?));
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(TrainConfig, TrainState)> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "ACT1",
        });
    }
    let mut r = Reader {
        bytes,
        pos: 4,
        path,
    };
    let version = r.u32()?;
    if version as u32 != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let cfg = TrainConfig::from_text(&r.string()?)?;

    let mut params = ParamSet::new();
    for (name, t) in r.blocks()? {
        params.push(name, t);
    }
    let model = Model {
        config: cfg.model.clone(),
        variant: cfg.variant,
        params,
    };
    model.validate()?;

    let mut m = model.params.zeros_like();
    let mut v = model.params.zeros_like();
    for (name, t) in r.blocks()? {
        let (target, base) = if let Some(b) = name.strip_prefix(ADAM_M) {
            (&mut m, b)
        } else if let Some(b) = name.strip_prefix(ADAM_V) {
            (&mut v, b)
        } else {
            return Err(Error::format(
                path,
                format!("unexpected optimizer block {name}"),
            ));
        };
        if !target.contains(base) || target.get(base).shape() != t.shape() {
            return Err(Error::format(
                path,
                format!("optimizer block {name} does not match the parameters"),
            ));
        }
        *target.get_mut(base) = t;
    }
    let mut adam = AdamState::new(&model.params);
    adam.m = m;
    adam.v = v;
    adam.step = r.u64()?;

    let seed = r.u64()?;
    let raw: &[u8; RngState::BYTES] = r.take(RngState::BYTES)?.try_into().unwrap();
    let rng = Rng::from_state(seed, &RngState::from_bytes(raw));
    let epoch = r.u64()?;
    let n = r.u32()?;
    let mut history = Vec::with_capacity(n);
    for _ in 0..n {
        history.push(EpochLog {
            epoch: r.u64()?,
            objective: r.f64()?,
            ce: r.f64()?,
            recon: r.f64()?,
            entropy: r.f64()?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok((
        cfg,
        TrainState {
            model,
            adam,
            rng,
            epoch,
            history,
        },
    ))
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &TrainConfig,
    state: &TrainState,
) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(cfg, state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainConfig, TrainState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
