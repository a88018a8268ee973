//! Embedding container files and prediction output.
//!
//! An embedding file is a 16-byte header followed by a row-major payload of
//! little-endian `f32`:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `TATA`                   |
//! | 4      | 2    | format version (`1`), LE u16   |
//! | 6      | 2    | element type (`1` = f32 LE)    |
//! | 8      | 4    | record count, LE u32           |
//! | 12     | 4    | dimension, LE u32              |
//!
//! Next to `foo.tata` sits a JSON manifest `foo.tata.json` with the sample ids
//! and optional labels, class names, bank kind and parallel text list.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adaptation::{PredictionRecord, Summary};
use crate::error::{Result, TataError};
use crate::numerics::{l2_normalize, norm, Embedding, Role};
use crate::textspace::TextBank;

pub const MAGIC: &[u8; 4] = b"TATA";
pub const VERSION: u16 = 1;
pub const DTYPE_F32_LE: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Images,
    Nouns,
    Attributes,
    /// Prompt-text lookup table for the fixture-cache encoder.
    Prompts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<FileKind>,
    pub ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl Manifest {
    pub fn new(kind: FileKind, ids: Vec<String>, dim: usize) -> Self {
        Self {
            count: ids.len(),
            dim,
            kind: Some(kind),
            ids,
            labels: None,
            class_names: None,
            texts: None,
            notes: None,
        }
    }

    /// A text bank manifest: ids are the row indices, texts carry the content.
    pub fn for_texts(kind: FileKind, texts: Vec<String>, dim: usize) -> Self {
        let ids = (0..texts.len()).map(|i| i.to_string()).collect();
        Self {
            texts: Some(texts),
            ..Self::new(kind, ids, dim)
        }
    }

    fn validate(&self, count: usize, dim: usize) -> Result<()> {
        let mismatch = |m: String| Err(TataError::ManifestMismatch(m));
        if self.count != count || self.ids.len() != count {
            return mismatch(format!(
                "header has {count} records, manifest count {} with {} ids",
                self.count,
                self.ids.len()
            ));
        }
        if self.dim != dim {
            return mismatch(format!("header dim {dim}, manifest dim {}", self.dim));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.ids.iter().find(|id| !seen.insert(id.as_str())) {
            return mismatch(format!("duplicate id {dup:?}"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != count {
                return mismatch(format!("{} labels for {count} records", labels.len()));
            }
            if let Some(names) = &self.class_names {
                if let Some(bad) = labels.iter().find(|&&l| l >= names.len()) {
                    return mismatch(format!("label {bad} outside {} classes", names.len()));
                }
            }
        }
        if let Some(texts) = &self.texts {
            if texts.len() != count {
                return mismatch(format!("{} texts for {count} records", texts.len()));
            }
        }
        Ok(())
    }
}

/// Raw file contents as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub manifest: Manifest,
    pub rows: Vec<Vec<f32>>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_payload(rows: &[Vec<f32>], dim: usize) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + rows.len() * dim * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    bytes.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        if row.len() != dim {
            return Err(TataError::DimensionMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        for x in row {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode_payload(bytes: &[u8], path: &Path) -> Result<(usize, Vec<Vec<f32>>)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(TataError::BadMagic(path.to_path_buf()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != VERSION {
        return Err(TataError::VersionUnsupported(version));
    }
    if u16_at(6) != DTYPE_F32_LE {
        return Err(TataError::InvalidValue {
            field: "element type",
            reason: format!("unsupported code {}", u16_at(6)),
        });
    }
    let count = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let expected = count as u64 * dim as u64 * 4;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if expected != actual {
        return Err(TataError::PayloadLength { expected, actual });
    }
    let rows = bytes[HEADER_LEN..]
        .chunks_exact(dim.max(1) * 4)
        .take(count)
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    Ok((dim, rows))
}

pub fn write_embedding_file(path: &Path, file: &EmbeddingFile) -> Result<()> {
    file.manifest.validate(file.rows.len(), file.manifest.dim)?;
    fs::write(path, encode_payload(&file.rows, file.manifest.dim)?)?;
    fs::write(
        manifest_path(path),
        serde_json::to_vec_pretty(&file.manifest)?,
    )?;
    Ok(())
}

/// Reads and validates a file without touching the values.
pub fn read_raw(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path)?;
    let (dim, rows) = decode_payload(&bytes, path)?;
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
    manifest.validate(rows.len(), dim)?;
    Ok(EmbeddingFile { manifest, rows })
}

/// Converts one stored row, re-normalizing if its norm is off by more than 1e-3.
pub fn row_to_embedding(row: &[f32], role: Role) -> Result<Embedding> {
    let values: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
    let n = norm(&values);
    if !n.is_finite() {
        return Err(TataError::NonFinite);
    }
    if (n - 1.0).abs() > 1e-3 {
        warn!("re-normalizing row with norm {n:.6}");
        l2_normalize(&values, role)
    } else {
        Embedding::from_raw(values, role)
    }
}

pub fn read_embedding_file(path: &Path, role: Role) -> Result<(Vec<Embedding>, Manifest)> {
    let file = read_raw(path)?;
    let embeddings = file
        .rows
        .iter()
        .map(|r| row_to_embedding(r, role))
        .collect::<Result<Vec<_>>>()?;
    Ok((embeddings, file.manifest))
}

pub fn to_f32_rows(embeddings: &[Embedding]) -> Vec<Vec<f32>> {
    embeddings
        .iter()
        .map(|e| e.as_slice().iter().map(|&x| x as f32).collect())
        .collect()
}

/// Loads a noun or attribute bank; texts come from the manifest.
pub fn read_bank(path: &Path) -> Result<TextBank> {
    let (embeddings, manifest) = read_embedding_file(path, Role::Text)?;
    let texts = manifest.texts.ok_or_else(|| {
        TataError::ManifestMismatch(format!("{} has no text list", path.display()))
    })?;
    TextBank::new(texts, embeddings)
}

pub fn write_bank(path: &Path, kind: FileKind, bank: &TextBank) -> Result<()> {
    let embeddings: Vec<Embedding> = (0..bank.len()).map(|i| bank.embedding(i).clone()).collect();
    let texts = (0..bank.len()).map(|i| bank.text(i).to_string()).collect();
    write_embedding_file(
        path,
        &EmbeddingFile {
            manifest: Manifest::for_texts(kind, texts, bank.dim()),
            rows: to_f32_rows(&embeddings),
        },
    )
}

/// Writes one JSON line per prediction and returns the accuracy summary.
pub fn write_predictions(predictions: &[PredictionRecord], path: &Path) -> Result<Summary> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(Summary::from_predictions(predictions))
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
