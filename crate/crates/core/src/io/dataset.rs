//! `dataset.json` descriptor plus `samples.bin` / `labels.bin`.
//!
//! ```text
//! samples.bin: "BSDS" | u32 version | u32 count | u32 rank | u32 extents[rank] | f32 payload
//! labels.bin:  "BSLB" | u32 count | u32 labels[count]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_json, read_file, sibling, to_json_bytes, write_file, IoError};
use crate::dataset::Dataset;
use crate::tensor::{element_count, Tensor};

pub const SAMPLES_MAGIC: &[u8; 4] = b"BSDS";
pub const LABELS_MAGIC: &[u8; 4] = b"BSLB";
const SAMPLES_VERSION: u32 = 1;
const DESCRIPTOR: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDoc {
    format: String,
    version: u32,
    class_count: usize,
    samples: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            IoError::invalid(
                self.path,
                what,
                format!("truncated file: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IoError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), IoError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(IoError::invalid(
                self.path,
                "magic",
                format!("expected {:?}, found {:?}", String::from_utf8_lossy(expected), String::from_utf8_lossy(found)),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), IoError> {
        if self.pos != self.bytes.len() {
            return Err(IoError::invalid(
                self.path,
                "payload",
                format!("{} trailing bytes after payload", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_samples(path: &Path) -> Result<Vec<Tensor<f32>>, IoError> {
    let bytes = read_file(path)?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    c.magic(SAMPLES_MAGIC)?;
    let version = c.u32("version")?;
    if version != SAMPLES_VERSION {
        return Err(IoError::invalid(path, "version", format!("unsupported version {version}")));
    }
    let count = c.u32("count")? as usize;
    let rank = c.u32("rank")? as usize;
    let shape = (0..rank).map(|_| c.u32("extents").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let per_sample = element_count(&shape);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let raw = c.take(per_sample * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape.clone(), data).map_err(|e| IoError::invalid(path, format!("sample {i}"), e.to_string()))?;
        samples.push(t);
    }
    c.finish()?;
    Ok(samples)
}

fn read_labels(path: &Path) -> Result<Vec<u32>, IoError> {
    let bytes = read_file(path)?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    c.magic(LABELS_MAGIC)?;
    let count = c.u32("count")? as usize;
    let labels = (0..count).map(|_| c.u32("labels")).collect::<Result<Vec<_>, _>>()?;
    c.finish()?;
    Ok(labels)
}

fn descriptor_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DESCRIPTOR)
    } else {
        path.to_path_buf()
    }
}

/// Loads a dataset from its `dataset.json` (or a directory containing one).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset<f32>, IoError> {
    let path = descriptor_path(path.as_ref());
    let doc: DatasetDoc = parse_json(&path, &read_file(&path)?)?;
    if doc.format != "bitstorm-dataset" || doc.version != 1 {
        return Err(IoError::invalid(
            &path,
            "format",
            format!("expected bitstorm-dataset version 1, found {} version {}", doc.format, doc.version),
        ));
    }
    let samples = read_samples(&sibling(&path, &doc.samples))?;
    let labels = doc.labels.as_deref().map(|l| read_labels(&sibling(&path, l))).transpose()?;
    Dataset::new(samples, labels, doc.class_count).map_err(|source| IoError::Dataset { path, source })
}

/// Writes `dataset.json`, `samples.bin` and (when labelled) `labels.bin`
/// into `dir`.
pub fn save_dataset(dataset: &Dataset<f32>, dir: impl AsRef<Path>) -> Result<(), IoError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;

    let shape = dataset.sample_shape();
    let mut bytes = Vec::with_capacity(16 + 4 * shape.len() + 4 * dataset.len() * element_count(shape));
    bytes.extend_from_slice(SAMPLES_MAGIC);
    for word in [SAMPLES_VERSION, dataset.len() as u32, shape.len() as u32] {
        bytes.extend_from_slice(&word.to_le_bytes());
    }
    for &d in shape {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in dataset.samples() {
        for v in s.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(&dir.join("samples.bin"), &bytes)?;

    if let Some(labels) = dataset.labels() {
        let mut bytes = Vec::with_capacity(8 + 4 * labels.len());
        bytes.extend_from_slice(LABELS_MAGIC);
        bytes.extend_from_slice(&(labels.len() as u32).to_le_bytes());
        for l in labels {
            bytes.extend_from_slice(&l.to_le_bytes());
        }
        write_file(&dir.join("labels.bin"), &bytes)?;
    }

    let doc = DatasetDoc {
        format: "bitstorm-dataset".into(),
        version: 1,
        class_count: dataset.class_count(),
        samples: "samples.bin".into(),
        labels: dataset.labels().map(|_| "labels.bin".into()),
    };
    write_file(&dir.join(DESCRIPTOR), &to_json_bytes(&doc))
}
