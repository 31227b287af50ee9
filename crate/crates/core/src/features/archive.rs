//! On-disk formats: FTR1 matrices, utterance manifests, alignment and phone
//! inventory TSVs.
//!
//! FTR1 layout (little endian):
//!
//! ```text
//! bytes 0..4   "FTR1"
//! bytes 4..8   u32 rows (T)
//! bytes 8..12  u32 cols (d)
//! then         rows*cols f32, row-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

use super::FeatureSequence;

pub const FTR_MAGIC: &[u8; 4] = b"FTR1";
pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn encode_ftr(m: &Tensor2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.len());
    out.extend_from_slice(FTR_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_ftr(bytes: &[u8], path: &Path) -> Result<Tensor2<f32>> {
    if bytes.len() < 4 || &bytes[..4] != FTR_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "FTR1",
        });
    }
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "length mismatch: header declares {rows}x{cols} ({} bytes), file holds {} bytes",
                rows * cols * 4,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor2::from_vec(rows, cols, data)
}

pub fn write_ftr(path: impl AsRef<Path>, m: &Tensor2<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ftr(m)).map_err(|e| Error::io(path, e))
}

pub fn read_ftr(path: impl AsRef<Path>) -> Result<Tensor2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ftr(&bytes, path)
}

/// File name used for an utterance inside an archive directory.
fn utt_file_name(utt_id: &str) -> String {
    let safe: String = utt_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.ftr")
}

/// Write one FTR1 file per utterance plus `manifest.tsv` into `dir`.
/// Returns the manifest path.
pub fn archive_write(sequences: &[FeatureSequence], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut seen = HashMap::new();
    for seq in sequences {
        validate_utt_id(&seq.utt_id)?;
        let mut name = utt_file_name(&seq.utt_id);
        let n = seen.entry(name.clone()).or_insert(0usize);
        if *n > 0 {
            name = format!("{}.{n}.ftr", name.trim_end_matches(".ftr"));
        }
        *n += 1;
        write_ftr(dir.join(&name), &seq.frames)?;
        manifest.push_str(&format!("{}\t{name}\n", seq.utt_id));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn validate_utt_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!(
            "invalid utterance id {id:?}"
        )));
    }
    Ok(())
}

/// `(utt_id, path)` pairs from a manifest; paths are resolved against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rel) = line.split_once('\t').ok_or_else(|| {
            Error::format(
                path,
                format!("line {}: expected utt_id<TAB>path", lineno + 1),
            )
        })?;
        out.push((id.to_string(), base.join(rel)));
    }
    Ok(out)
}

pub fn archive_read(manifest: impl AsRef<Path>) -> Result<Vec<FeatureSequence>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|(utt_id, path)| {
            let frames = match fs::read(&path) {
                Ok(bytes) => decode_ftr(&bytes, &path)?,
                Err(e) => {
                    return Err(Error::Utterance {
                        utt: utt_id,
                        reason: format!("cannot read {}: {e}", path.display()),
                    })
                }
            };
            if frames.rows() == 0 {
                return Err(Error::Utterance {
                    utt: utt_id,
                    reason: "no frames".into(),
                });
            }
            Ok(FeatureSequence::new(utt_id, frames))
        })
        .collect()
}

/// Per-frame integer labels keyed by utterance (phone ids or code ids).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Alignments {
    entries: Vec<(String, Vec<usize>)>,
    index: HashMap<String, usize>,
}

impl Alignments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, utt_id: impl Into<String>, labels: Vec<usize>) {
        let utt_id = utt_id.into();
        match self.index.get(&utt_id) {
            Some(&i) => self.entries[i].1 = labels,
            None => {
                self.index.insert(utt_id.clone(), self.entries.len());
                self.entries.push((utt_id, labels));
            }
        }
    }

    pub fn get(&self, utt_id: &str) -> Option<&[usize]> {
        self.index
            .get(utt_id)
            .map(|&i| self.entries[i].1.as_slice())
    }

    /// Labels for `utt_id`, checked against the expected frame count.
    pub fn require(&self, utt_id: &str, frames: usize) -> Result<&[usize]> {
        let labels = self.get(utt_id).ok_or_else(|| Error::Utterance {
            utt: utt_id.to_string(),
            reason: "no alignment".into(),
        })?;
        if labels.len() != frames {
            return Err(Error::Utterance {
                utt: utt_id.to_string(),
                reason: format!(
                    "alignment has {} labels but features have {frames} frames",
                    labels.len()
                ),
            });
        }
        Ok(labels)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries.iter().map(|(u, l)| (u.as_str(), l.as_slice()))
    }

    pub fn max_label(&self) -> Option<usize> {
        self.entries
            .iter()
            .flat_map(|(_, l)| l.iter().copied())
            .max()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (utt, labels) in &self.entries {
            out.push_str(utt);
            out.push('\t');
            let joined: Vec<String> = labels.iter().map(usize::to_string).collect();
            out.push_str(&joined.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut out = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (utt, rest) = line.split_once('\t').ok_or_else(|| {
                Error::format(
                    path,
                    format!("line {}: expected utt_id<TAB>labels", lineno + 1),
                )
            })?;
            let labels = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| {
                        Error::format(path, format!("line {}: bad label {tok:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert(utt, labels);
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

/// Phone id → name table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhoneInventory {
    pub names: Vec<String>,
}

impl PhoneInventory {
    pub fn numbered(count: usize, prefix: &str) -> Self {
        Self {
            names: (0..count).map(|i| format!("{prefix}{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line
                .split_once('\t')
                .and_then(|(id, name)| Some((id.trim().parse::<usize>().ok()?, name)))
                .ok_or_else(|| {
                    Error::format(path, format!("line {}: expected id<TAB>name", lineno + 1))
                })?;
            pairs.push((id, name.to_string()));
        }
        pairs.sort_by_key(|p| p.0);
        for (expected, (id, _)) in pairs.iter().enumerate() {
            if *id != expected {
                return Err(Error::format(
                    path,
                    format!(
                        "phone ids must be 0..P without gaps; found {id} at position {expected}"
                    ),
                ));
            }
        }
        Ok(Self {
            names: pairs.into_iter().map(|p| p.1).collect(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (i, n) in self.names.iter().enumerate() {
            writeln!(f, "{i}\t{n}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
