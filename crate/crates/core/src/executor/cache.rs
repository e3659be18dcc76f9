//! Layer output caches, spilled to disk in chunks that fit a memory budget.
//!
//! ```text
//! <dir>/cache_manifest.json
//! <dir>/chunk_<k>.bin   activations of consecutive samples, sample-major,
//!                       little-endian words of the scalar type
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExecError;
use crate::dataset::Dataset;
use crate::layers::LayerKind;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{element_count, Tensor};

pub const CACHE_MANIFEST: &str = "cache_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ChunkEntry {
    file: String,
    first_sample: usize,
    samples: usize,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheManifest {
    format: String,
    version: u32,
    dtype: String,
    layer: usize,
    shape: Vec<usize>,
    sample_count: usize,
    samples_per_chunk: usize,
    budget: u64,
    fingerprint: String,
    chunks: Vec<ChunkEntry>,
}

/// Handle on a built cache directory. Chunks are read on demand, one at a
/// time, so replay stays within the budget the cache was built with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationCache {
    dir: PathBuf,
    manifest: CacheManifest,
}

fn hash_tensor<T: Scalar>(h: &mut Sha256, t: &Tensor<T>) {
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    let mut buf = Vec::with_capacity(t.len() * T::byte_width());
    for v in t.data() {
        v.write_le(&mut buf);
    }
    h.update(&buf);
}

/// Digest of everything a cache at `layer` depends on: the scalar type,
/// layers `0..=layer` and the dataset samples.
pub fn cache_fingerprint<T: Scalar>(model: &Model<T>, dataset: &Dataset<T>, layer: usize) -> String {
    let mut h = Sha256::new();
    h.update(T::DTYPE.as_bytes());
    h.update(format!("{:?}", model.input_shape()).as_bytes());
    for spec in &model.layers()[..=layer.min(model.layer_count() - 1)] {
        h.update(spec.kind_name().as_bytes());
        match &spec.kind {
            LayerKind::Conv2D {
                kernel,
                bias,
                stride,
                padding,
                activation,
            } => {
                h.update(format!("{stride:?}{padding:?}{activation:?}").as_bytes());
                hash_tensor(&mut h, kernel);
                hash_tensor(&mut h, bias);
            }
            LayerKind::Dense {
                weights,
                bias,
                activation,
            } => {
                h.update(format!("{activation:?}").as_bytes());
                hash_tensor(&mut h, weights);
                hash_tensor(&mut h, bias);
            }
            LayerKind::MaxPool2D { window, stride } => h.update(format!("{window:?}{stride:?}").as_bytes()),
            LayerKind::PRelu { alpha } => hash_tensor(&mut h, alpha),
            LayerKind::Relu | LayerKind::Softmax | LayerKind::Flatten | LayerKind::Dropout { .. } => {}
        }
    }
    h.update((dataset.len() as u64).to_le_bytes());
    for s in dataset.samples() {
        hash_tensor(&mut h, s);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn chunk_name(k: usize) -> String {
    format!("chunk_{k}.bin")
}

fn remove_stale(dir: &Path) -> Result<(), ExecError> {
    let entries = std::fs::read_dir(dir).map_err(|e| ExecError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| ExecError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name == CACHE_MANIFEST || (name.starts_with("chunk_") && name.ends_with(".bin")) {
            std::fs::remove_file(entry.path()).map_err(|e| ExecError::io(entry.path(), e))?;
        }
    }
    Ok(())
}

/// Computes the output of `layer` for every sample and writes it to `dir`.
///
/// At most `budget` bytes of activations are held in memory at once; the
/// chunk size is the largest whole number of samples that fits.
pub fn build_cache<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    layer: usize,
    budget: u64,
    dir: impl AsRef<Path>,
) -> Result<ActivationCache, ExecError> {
    let dir = dir.as_ref();
    dataset.check_model(model)?;
    let shape = model.output_shape(layer)?.to_vec();
    let sample_bytes = (element_count(&shape) * T::byte_width()) as u64;
    let samples_per_chunk = (budget / sample_bytes) as usize;
    if samples_per_chunk == 0 {
        return Err(ExecError::BudgetTooSmall {
            budget,
            needed: sample_bytes,
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| ExecError::io(dir, e))?;
    remove_stale(dir)?;

    let mut chunks = Vec::new();
    for (k, samples) in dataset.samples().chunks(samples_per_chunk).enumerate() {
        let activations = samples
            .par_iter()
            .map(|x| model.head(layer, x))
            .collect::<Result<Vec<_>, _>>()?;
        let mut bytes = Vec::with_capacity(samples.len() * sample_bytes as usize);
        for a in &activations {
            for v in a.data() {
                v.write_le(&mut bytes);
            }
        }
        drop(activations);
        let file = chunk_name(k);
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| ExecError::io(&path, e))?;
        chunks.push(ChunkEntry {
            file,
            first_sample: k * samples_per_chunk,
            samples: samples.len(),
            bytes: bytes.len() as u64,
        });
    }

    let manifest = CacheManifest {
        format: "bitstorm-cache".into(),
        version: 1,
        dtype: T::DTYPE.into(),
        layer,
        shape,
        sample_count: dataset.len(),
        samples_per_chunk,
        budget,
        fingerprint: cache_fingerprint(model, dataset, layer),
        chunks,
    };
    let path = dir.join(CACHE_MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|e| ExecError::io(&path, e))?;
    Ok(ActivationCache {
        dir: dir.to_path_buf(),
        manifest,
    })
}

/// Reuses the cache in `dir` when it was built for the same model prefix,
/// dataset and layer with chunks that fit `budget`; rebuilds it otherwise.
pub fn open_or_build_cache<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    layer: usize,
    budget: u64,
    dir: impl AsRef<Path>,
) -> Result<ActivationCache, ExecError> {
    let dir = dir.as_ref();
    if let Ok(cache) = ActivationCache::open(dir) {
        let sample_bytes = (cache.shape().iter().product::<usize>() * T::byte_width()) as u64;
        let fits = cache.samples_per_chunk() as u64 * sample_bytes <= budget;
        if cache.layer() == layer
            && fits
            && cache.manifest.dtype == T::DTYPE
            && cache.fingerprint() == cache_fingerprint(model, dataset, layer)
        {
            return Ok(cache);
        }
    }
    build_cache(model, dataset, layer, budget, dir)
}

impl ActivationCache {
    /// Opens a cache directory written by [`build_cache`].
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ExecError> {
        let dir = dir.as_ref();
        let path = dir.join(CACHE_MANIFEST);
        let bytes = std::fs::read(&path).map_err(|e| ExecError::io(&path, e))?;
        let manifest: CacheManifest = serde_json::from_slice(&bytes).map_err(|e| ExecError::CacheFormat {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let bad = |reason: String| ExecError::CacheFormat {
            path: path.clone(),
            reason,
        };
        if manifest.format != "bitstorm-cache" || manifest.version != 1 {
            return Err(bad(format!("unsupported format {} v{}", manifest.format, manifest.version)));
        }
        let covered: usize = manifest.chunks.iter().map(|c| c.samples).sum();
        if covered != manifest.sample_count {
            return Err(bad(format!("chunks hold {covered} samples, manifest says {}", manifest.sample_count)));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn layer(&self) -> usize {
        self.manifest.layer
    }

    pub fn shape(&self) -> &[usize] {
        &self.manifest.shape
    }

    pub fn sample_count(&self) -> usize {
        self.manifest.sample_count
    }

    pub fn samples_per_chunk(&self) -> usize {
        self.manifest.samples_per_chunk
    }

    pub fn chunk_count(&self) -> usize {
        self.manifest.chunks.len()
    }

    pub fn chunk_path(&self, k: usize) -> PathBuf {
        self.dir.join(&self.manifest.chunks[k].file)
    }

    pub(crate) fn chunk_first_sample(&self, k: usize) -> usize {
        self.manifest.chunks[k].first_sample
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }

    /// Total bytes of activation data across all chunks.
    pub fn payload_bytes(&self) -> u64 {
        self.manifest.chunks.iter().map(|c| c.bytes).sum()
    }

    pub(crate) fn check_model<T: Scalar>(&self, model: &Model<T>) -> Result<(), ExecError> {
        let path = self.dir.join(CACHE_MANIFEST);
        if self.manifest.dtype != T::DTYPE {
            return Err(ExecError::CacheFormat {
                path,
                reason: format!("cache holds {} values, model uses {}", self.manifest.dtype, T::DTYPE),
            });
        }
        if model.output_shape(self.layer())? != self.shape() {
            return Err(ExecError::CacheFormat {
                path,
                reason: format!(
                    "cached shape {:?} is not the output shape of layer {}",
                    self.shape(),
                    self.layer()
                ),
            });
        }
        Ok(())
    }

    /// Reads the activations of chunk `k`.
    pub fn load_chunk<T: Scalar>(&self, k: usize) -> Result<Vec<Tensor<T>>, ExecError> {
        let entry = &self.manifest.chunks[k];
        let path = self.dir.join(&entry.file);
        if self.manifest.dtype != T::DTYPE {
            return Err(ExecError::CacheFormat {
                path,
                reason: format!("cache holds {} values, requested {}", self.manifest.dtype, T::DTYPE),
            });
        }
        let bytes = std::fs::read(&path).map_err(|e| ExecError::io(&path, e))?;
        let per_sample = element_count(&self.manifest.shape);
        let width = T::byte_width();
        if bytes.len() != entry.samples * per_sample * width {
            return Err(ExecError::CacheFormat {
                path,
                reason: format!("expected {} bytes, found {}", entry.samples * per_sample * width, bytes.len()),
            });
        }
        Ok(bytes
            .chunks_exact(per_sample * width)
            .map(|sample| {
                let data = sample.chunks_exact(width).map(T::read_le).collect();
                Tensor::new(self.manifest.shape.clone(), data).expect("shape from manifest")
            })
            .collect())
    }
}
