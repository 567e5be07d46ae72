//! Corpus file layout (all integers u32 little-endian):
//!
//! ```text
//! "RCDS" | version=1 | n_pairs | d_v | d_l
//! n_pairs × (n_visual_items, n_text_items)
//! per pair: visual features (n_visual × d_v f32 LE, row-major),
//!           text features   (n_text × d_l f32 LE, row-major)
//! ```
//!
//! Metadata (split, noise rate, ids, labels, ground truth) lives in the JSON
//! sidecar `<stem>.meta.json`. A missing sidecar yields a train split with
//! sequential ids, label 1 and no ground truth.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Corpus, FeaturePair, GroundTruth, Split};
use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 4] = b"RCDS";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    split: Split,
    noise_rate: f64,
    pairs: Vec<PairMeta>,
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    pair_id: u32,
    label: u8,
    ground_truth: Option<GroundTruth>,
}

/// `dir/train.rcds` → `dir/train.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid_input(format!("{what} {v} exceeds u32")))
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    corpus.validate()?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(CORPUS_MAGIC)?;
    for v in [
        CORPUS_VERSION,
        to_u32(corpus.len(), "pair count")?,
        to_u32(corpus.visual_dim, "visual dim")?,
        to_u32(corpus.text_dim, "text dim")?,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for p in &corpus.pairs {
        out.write_all(&to_u32(p.visual_items(), "item count")?.to_le_bytes())?;
        out.write_all(&to_u32(p.text_items(), "item count")?.to_le_bytes())?;
    }
    for p in &corpus.pairs {
        for v in p.visual.iter().chain(p.text.iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;

    let sidecar = Sidecar {
        version: CORPUS_VERSION,
        split: corpus.split,
        noise_rate: corpus.noise_rate,
        pairs: corpus
            .pairs
            .iter()
            .map(|p| PairMeta {
                pair_id: p.pair_id,
                label: p.label,
                ground_truth: p.ground_truth.clone(),
            })
            .collect(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec(&sidecar)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.offset;
        if n > remaining {
            return Err(Error::format(
                self.offset as u64,
                format!("truncated file: missing {section} ({n} bytes needed, {remaining} left)"),
            ));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn matrix(&mut self, rows: usize, cols: usize, section: &str) -> Result<Array2<f32>> {
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(self.offset as u64, format!("{section} size overflows")))?;
        let raw = self.take(len, section)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked above"))
    }
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
    };
    if r.take(4, "magic")? != CORPUS_MAGIC {
        return Err(Error::format(0, "bad magic: not a corpus file"));
    }
    let version = r.u32("version")?;
    if version != CORPUS_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n_pairs = r.u32("pair count")? as usize;
    let visual_dim = r.u32("visual dim")? as usize;
    let text_dim = r.u32("text dim")? as usize;
    if visual_dim == 0 || text_dim == 0 {
        return Err(Error::format(12, "feature dimensions must be positive"));
    }

    // Bound the table by the bytes actually present before allocating.
    if n_pairs.saturating_mul(8) > bytes.len() - r.offset {
        return Err(Error::format(
            r.offset as u64,
            "truncated file: missing item count table",
        ));
    }
    let mut counts = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let table_offset = r.offset as u64;
        let nv = r.u32("item count table")? as usize;
        let nl = r.u32("item count table")? as usize;
        if nv == 0 || nl == 0 {
            return Err(Error::format(table_offset, "pair with zero items"));
        }
        counts.push((nv, nl));
    }

    let sidecar = match fs::read(sidecar_path(path)) {
        Ok(raw) => Some(serde_json::from_slice::<Sidecar>(&raw).map_err(|e| {
            Error::format(0, format!("unreadable sidecar {}: {e}", sidecar_path(path).display()))
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    if let Some(meta) = &sidecar {
        if meta.version != CORPUS_VERSION {
            return Err(Error::format(
                0,
                format!("sidecar: unsupported version {}", meta.version),
            ));
        }
        if meta.pairs.len() != n_pairs {
            return Err(Error::format(
                0,
                format!(
                    "sidecar lists {} pairs, feature file has {n_pairs}",
                    meta.pairs.len()
                ),
            ));
        }
    }

    let mut pairs = Vec::with_capacity(n_pairs);
    for (i, &(nv, nl)) in counts.iter().enumerate() {
        let visual = r.matrix(nv, visual_dim, &format!("visual features of pair {i}"))?;
        let text = r.matrix(nl, text_dim, &format!("text features of pair {i}"))?;
        let (pair_id, label, ground_truth) = match &sidecar {
            Some(meta) => {
                let m = &meta.pairs[i];
                (m.pair_id, m.label, m.ground_truth.clone())
            }
            None => (i as u32, 1, None),
        };
        pairs.push(FeaturePair {
            pair_id,
            visual,
            text,
            label,
            ground_truth,
        });
    }
    if r.offset != bytes.len() {
        return Err(Error::format(
            r.offset as u64,
            format!("{} trailing bytes after feature payload", bytes.len() - r.offset),
        ));
    }

    let (split, noise_rate) = sidecar
        .as_ref()
        .map_or((Split::Train, 0.0), |m| (m.split, m.noise_rate));
    Corpus::new(split, visual_dim, text_dim, noise_rate, pairs)
        .map_err(|e| Error::format(0, format!("inconsistent corpus: {e}")))
}
