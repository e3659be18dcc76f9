//! `model.json` + `weights.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_json, read_file, sibling, to_json_bytes, write_file, IoError};
use crate::layers::{Activation, LayerKind, LayerSpec, Padding};
use crate::model::Model;
use crate::tensor::{element_count, Tensor};

pub const MANIFEST_FORMAT: &str = "bitstorm-model";
const MANIFEST_VERSION: u32 = 1;
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    format: String,
    version: u32,
    /// Weight blob, relative to the manifest.
    weights: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
}

/// Byte range of one tensor inside the weight blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PaddingDoc {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ActivationDoc {
    #[default]
    Linear,
    Relu,
    Softmax,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Conv2d {
        name: String,
        stride: [usize; 2],
        padding: PaddingDoc,
        #[serde(default)]
        activation: ActivationDoc,
        kernel: BlobRef,
        bias: BlobRef,
    },
    MaxPool2d {
        name: String,
        window: [usize; 2],
        stride: [usize; 2],
    },
    Dense {
        name: String,
        #[serde(default)]
        activation: ActivationDoc,
        weights: BlobRef,
        bias: BlobRef,
    },
    Relu {
        name: String,
    },
    Prelu {
        name: String,
        alpha: BlobRef,
    },
    Softmax {
        name: String,
    },
    Flatten {
        name: String,
    },
    Dropout {
        name: String,
        rate: f64,
    },
}

impl From<Padding> for PaddingDoc {
    fn from(p: Padding) -> Self {
        match p {
            Padding::Valid => PaddingDoc::Valid,
            Padding::Same => PaddingDoc::Same,
        }
    }
}

impl From<PaddingDoc> for Padding {
    fn from(p: PaddingDoc) -> Self {
        match p {
            PaddingDoc::Valid => Padding::Valid,
            PaddingDoc::Same => Padding::Same,
        }
    }
}

impl From<Activation> for ActivationDoc {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Linear => ActivationDoc::Linear,
            Activation::Relu => ActivationDoc::Relu,
            Activation::Softmax => ActivationDoc::Softmax,
        }
    }
}

impl From<ActivationDoc> for Activation {
    fn from(a: ActivationDoc) -> Self {
        match a {
            ActivationDoc::Linear => Activation::Linear,
            ActivationDoc::Relu => Activation::Relu,
            ActivationDoc::Softmax => Activation::Softmax,
        }
    }
}

struct BlobReader<'a> {
    path: &'a Path,
    blob: &'a [u8],
}

impl BlobReader<'_> {
    fn tensor(&self, field: &str, r: &BlobRef) -> Result<Tensor<f32>, IoError> {
        let count = element_count(&r.shape);
        if r.length != 4 * count as u64 {
            return Err(IoError::invalid(
                self.path,
                field,
                format!("length {} does not match shape {:?} ({} bytes)", r.length, r.shape, 4 * count),
            ));
        }
        let end = r.offset.checked_add(r.length).filter(|&e| e <= self.blob.len() as u64).ok_or_else(|| {
            IoError::invalid(
                self.path,
                field,
                format!(
                    "offset {} + length {} exceeds weight blob of {} bytes",
                    r.offset,
                    r.length,
                    self.blob.len()
                ),
            )
        })?;
        let bytes = &self.blob[r.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(r.shape.clone(), data).map_err(|e| IoError::invalid(self.path, field, e.to_string()))
    }
}

/// Reads a manifest and its weight blob into a shape-checked model.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<Model<f32>, IoError> {
    let path = manifest_path.as_ref();
    let doc: ManifestDoc = parse_json(path, &read_file(path)?)?;
    if doc.format != MANIFEST_FORMAT {
        return Err(IoError::invalid(
            path,
            "format",
            format!("expected \"{MANIFEST_FORMAT}\", found \"{}\"", doc.format),
        ));
    }
    if doc.version != MANIFEST_VERSION {
        return Err(IoError::invalid(
            path,
            "version",
            format!("unsupported version {}", doc.version),
        ));
    }
    let blob_path = sibling(path, &doc.weights);
    let blob = read_file(&blob_path)?;
    let reader = BlobReader { path, blob: &blob };

    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, entry) in doc.layers.iter().enumerate() {
        let field = |name: &str| format!("layers[{i}].{name}");
        let layer = match entry {
            LayerEntry::Conv2d {
                name,
                stride,
                padding,
                activation,
                kernel,
                bias,
            } => LayerSpec::new(
                name.clone(),
                LayerKind::Conv2D {
                    kernel: reader.tensor(&field("kernel"), kernel)?,
                    bias: reader.tensor(&field("bias"), bias)?,
                    stride: (stride[0], stride[1]),
                    padding: (*padding).into(),
                    activation: (*activation).into(),
                },
            ),
            LayerEntry::MaxPool2d { name, window, stride } => LayerSpec::new(
                name.clone(),
                LayerKind::MaxPool2D {
                    window: (window[0], window[1]),
                    stride: (stride[0], stride[1]),
                },
            ),
            LayerEntry::Dense {
                name,
                activation,
                weights,
                bias,
            } => LayerSpec::new(
                name.clone(),
                LayerKind::Dense {
                    weights: reader.tensor(&field("weights"), weights)?,
                    bias: reader.tensor(&field("bias"), bias)?,
                    activation: (*activation).into(),
                },
            ),
            LayerEntry::Relu { name } => LayerSpec::new(name.clone(), LayerKind::Relu),
            LayerEntry::Prelu { name, alpha } => LayerSpec::new(
                name.clone(),
                LayerKind::PRelu {
                    alpha: reader.tensor(&field("alpha"), alpha)?,
                },
            ),
            LayerEntry::Softmax { name } => LayerSpec::new(name.clone(), LayerKind::Softmax),
            LayerEntry::Flatten { name } => LayerSpec::new(name.clone(), LayerKind::Flatten),
            LayerEntry::Dropout { name, rate } => LayerSpec::new(name.clone(), LayerKind::Dropout { rate: *rate }),
        };
        layers.push(layer);
    }
    Model::new(doc.input_shape, layers).map_err(|source| IoError::Model {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Default)]
struct BlobWriter {
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, t: &Tensor<f32>) -> BlobRef {
        let offset = self.blob.len() as u64;
        for v in t.data() {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            shape: t.shape().to_vec(),
            offset,
            length: self.blob.len() as u64 - offset,
        }
    }
}

/// Writes `manifest_path` and a `weights.bin` next to it. Tensors are packed
/// in layer order without gaps.
pub fn save_model(model: &Model<f32>, manifest_path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = manifest_path.as_ref();
    let mut blob = BlobWriter::default();
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let name = l.name.clone();
            match &l.kind {
                LayerKind::Conv2D {
                    kernel,
                    bias,
                    stride,
                    padding,
                    activation,
                } => LayerEntry::Conv2d {
                    name,
                    stride: [stride.0, stride.1],
                    padding: (*padding).into(),
                    activation: (*activation).into(),
                    kernel: blob.push(kernel),
                    bias: blob.push(bias),
                },
                LayerKind::MaxPool2D { window, stride } => LayerEntry::MaxPool2d {
                    name,
                    window: [window.0, window.1],
                    stride: [stride.0, stride.1],
                },
                LayerKind::Dense {
                    weights,
                    bias,
                    activation,
                } => LayerEntry::Dense {
                    name,
                    activation: (*activation).into(),
                    weights: blob.push(weights),
                    bias: blob.push(bias),
                },
                LayerKind::Relu => LayerEntry::Relu { name },
                LayerKind::PRelu { alpha } => LayerEntry::Prelu {
                    name,
                    alpha: blob.push(alpha),
                },
                LayerKind::Softmax => LayerEntry::Softmax { name },
                LayerKind::Flatten => LayerEntry::Flatten { name },
                LayerKind::Dropout { rate } => LayerEntry::Dropout { name, rate: *rate },
            }
        })
        .collect();
    let doc = ManifestDoc {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        weights: WEIGHTS_FILE.into(),
        input_shape: model.input_shape().to_vec(),
        layers,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    write_file(&sibling(path, WEIGHTS_FILE), &blob.blob)?;
    write_file(path, &to_json_bytes(&doc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, manifest: &str, blob: &[f32]) -> std::path::PathBuf {
        let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join("weights.bin"), bytes).unwrap();
        let p = dir.join("model.json");
        std::fs::write(&p, manifest).unwrap();
        p
    }

    const IDENTITY: &str = r#"{
        "format": "bitstorm-model", "version": 1, "weights": "weights.bin",
        "input_shape": [2],
        "layers": [{"kind": "dense", "name": "id",
                    "weights": {"shape": [2, 2], "offset": 0, "length": 16},
                    "bias": {"shape": [2], "offset": 16, "length": 8}}]
    }"#;

    #[test]
    fn loads_identity_dense() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), IDENTITY, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let model = load_model(&p).unwrap();
        let x = Tensor::from_vec(vec![0.25f32, -8.0]).unwrap();
        assert!(model.forward(&x).unwrap().bit_identical(&x));
    }

    #[test]
    fn out_of_range_blob_reference() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), IDENTITY, &[1.0, 0.0, 0.0, 1.0, 0.0]);
        let err = load_model(&p).unwrap_err().to_string();
        assert!(err.contains("layers[0].bias") && err.contains("exceeds"), "{err}");
    }

    #[test]
    fn chain_error_names_both_layers() {
        let manifest = r#"{
            "format": "bitstorm-model", "version": 1, "weights": "weights.bin",
            "input_shape": [2],
            "layers": [
              {"kind": "dense", "name": "producer",
               "weights": {"shape": [2, 8], "offset": 0, "length": 64},
               "bias": {"shape": [8], "offset": 64, "length": 32}},
              {"kind": "dense", "name": "consumer",
               "weights": {"shape": [4, 2], "offset": 0, "length": 32},
               "bias": {"shape": [2], "offset": 0, "length": 8}}
            ]
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), manifest, &[0.0; 24]);
        let err = load_model(&p).unwrap_err().to_string();
        assert!(err.contains("producer") && err.contains("consumer"), "{err}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "{\n  \"format\": \"bitstorm-model\",\n  oops\n}", &[]);
        let err = load_model(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_fields_and_kinds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &IDENTITY.replace("\"dense\"", "\"lstm\""), &[0.0; 6]);
        assert!(load_model(&p).is_err());
        let p = write(dir.path(), &IDENTITY.replace("\"name\": \"id\"", "\"name\": \"id\", \"units\": 3"), &[0.0; 6]);
        assert!(load_model(&p).is_err());
    }
}
