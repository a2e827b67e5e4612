//! On-disk tensor container, bit-exact.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of
//! JSON mapping tensor names to `{"dtype", "shape", "data_offsets"}`, then
//! the raw little-endian row-major tensor payloads back to back, with
//! offsets relative to the payload start. The reserved `__metadata__` key
//! holds string-to-string pairs (adapter scale and rank live there).
//! Adapter factors are named `<layer>.lora_A` / `<layer>.lora_B`; anything
//! else is carried through save/load untouched.
//!
//! Tensor names are laid out in sorted order and the header is emitted
//! with sorted keys, so identical content always produces identical bytes.

use super::LoraAdapter;
use crate::numkit::Matrix;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("file too short: {len} bytes, need at least 8 for the header length")]
    FileTooShort { len: usize },
    #[error("header length {header_len} inconsistent with file size {file_len}")]
    HeaderLength { header_len: u64, file_len: usize },
    #[error("header is not valid UTF-8 (header spans bytes 8..{end})")]
    HeaderUtf8 { end: usize },
    #[error("header is not the expected JSON object (bytes 8..{end}): {source}")]
    HeaderJson {
        end: usize,
        source: serde_json::Error,
    },
    #[error("tensor '{name}': malformed descriptor: {detail}")]
    BadDescriptor { name: String, detail: String },
    #[error("tensor '{name}': unknown dtype '{dtype}'")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor '{name}': offsets [{begin}, {end}) reversed or oversized")]
    BadOffsets { name: String, begin: u64, end: u64 },
    #[error("tensor '{name}': {got} payload bytes, shape needs {want}")]
    SizeMismatch { name: String, want: u64, got: u64 },
    #[error("tensor '{name}': payload ends at byte {end} but only {payload_len} bytes exist (truncated payload)")]
    TruncatedPayload {
        name: String,
        end: u64,
        payload_len: usize,
    },
    #[error("tensors '{a}' and '{b}' overlap in the payload")]
    OffsetOverlap { a: String, b: String },
    #[error("adapter pair '{layer}' is missing its '{missing}' factor")]
    IncompletePair { layer: String, missing: String },
    #[error("adapter '{layer}': A is {a_r}x{a_n} but B is {b_m}x{b_r}; ranks disagree")]
    RankMismatch {
        layer: String,
        a_r: usize,
        a_n: usize,
        b_m: usize,
        b_r: usize,
    },
    #[error("adapter '{layer}': metadata rank {meta} disagrees with factor rank {actual}")]
    MetadataRank {
        layer: String,
        meta: String,
        actual: usize,
    },
    #[error("adapter '{layer}': metadata scale '{value}' is not a number")]
    MetadataScale { layer: String, value: String },
    #[error("expected exactly one adapter in file, found {0}")]
    NotSingleAdapter(usize),
    #[error("tensor '{name}': expected a 2-d shape, got {dims} dims")]
    NotTwoDim { name: String, dims: usize },
    #[error("non-finite value in tensor '{name}'")]
    NonFinite { name: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Payload element types the container understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorDtype {
    F32,
    F64,
}

impl TensorDtype {
    pub fn byte_size(self) -> usize {
        match self {
            TensorDtype::F32 => 4,
            TensorDtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorDtype::F32 => "F32",
            TensorDtype::F64 => "F64",
        }
    }

    fn parse(name: &str, s: &str) -> Result<Self, FormatError> {
        match s {
            "F32" => Ok(TensorDtype::F32),
            "F64" => Ok(TensorDtype::F64),
            other => Err(FormatError::UnknownDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            }),
        }
    }
}

/// One tensor as stored: name, dtype, shape and its raw little-endian
/// payload bytes, preserved verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: TensorDtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl RawTensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix, dtype: TensorDtype) -> Self {
        let mut data = Vec::with_capacity(m.data().len() * dtype.byte_size());
        match dtype {
            TensorDtype::F32 => {
                for &v in m.data() {
                    data.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            TensorDtype::F64 => {
                for &v in m.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Self {
            name: name.into(),
            dtype,
            shape: vec![m.rows(), m.cols()],
            data,
        }
    }

    /// Decode to a double-precision matrix, widening F32 payloads.
    pub fn to_matrix(&self) -> Result<Matrix, FormatError> {
        if self.shape.len() != 2 {
            return Err(FormatError::NotTwoDim {
                name: self.name.clone(),
                dims: self.shape.len(),
            });
        }
        let values: Vec<f64> = match self.dtype {
            TensorDtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            TensorDtype::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        };
        let m = Matrix::new(self.shape[0], self.shape[1], values).map_err(|_| {
            FormatError::SizeMismatch {
                name: self.name.clone(),
                want: (self.shape[0] * self.shape[1] * self.dtype.byte_size()) as u64,
                got: self.data.len() as u64,
            }
        })?;
        m.validate_finite().map_err(|_| FormatError::NonFinite {
            name: self.name.clone(),
        })?;
        Ok(m)
    }
}

/// A decoded adapter plus the dtypes its factors were stored with, so a
/// round trip re-encodes exactly what was read.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    pub adapter: LoraAdapter,
    pub dtype_a: TensorDtype,
    pub dtype_b: TensorDtype,
}

/// Full decoded contents of an adapter file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterFile {
    pub entries: Vec<AdapterEntry>,
    pub extras: Vec<RawTensor>,
    pub metadata: BTreeMap<String, String>,
}

// ---------------------------------------------------------------- raw io

fn read_path(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_path(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse the container layout out of raw bytes.
pub(crate) fn parse_container(
    bytes: &[u8],
) -> Result<(BTreeMap<String, String>, Vec<RawTensor>), FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::FileTooShort { len: bytes.len() });
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let body_len = (bytes.len() - 8) as u64;
    if header_len > body_len {
        return Err(FormatError::HeaderLength {
            header_len,
            file_len: bytes.len(),
        });
    }
    let header_end = 8 + header_len as usize;
    let header_str = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|_| FormatError::HeaderUtf8 { end: header_end })?;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_str(header_str)
        .map_err(|source| FormatError::HeaderJson {
            end: header_end,
            source,
        })?;
    let payload = &bytes[header_end..];

    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::new();
    let mut ranges: Vec<(u64, u64, String)> = Vec::new();

    for (name, value) in header {
        if name == "__metadata__" {
            metadata = serde_json::from_value(value).map_err(|e| FormatError::BadDescriptor {
                name,
                detail: format!("__metadata__ must map strings to strings: {e}"),
            })?;
            continue;
        }
        let desc: TensorDescriptor =
            serde_json::from_value(value).map_err(|e| FormatError::BadDescriptor {
                name: name.clone(),
                detail: e.to_string(),
            })?;
        let dtype = TensorDtype::parse(&name, &desc.dtype)?;
        let [begin, end] = desc.data_offsets;
        if end < begin || end - begin > u64::MAX / 2 {
            return Err(FormatError::BadOffsets { name, begin, end });
        }
        let elem_count: u64 = desc.shape.iter().map(|&d| d as u64).product();
        let want = elem_count.saturating_mul(dtype.byte_size() as u64);
        if end - begin != want {
            return Err(FormatError::SizeMismatch {
                name,
                want,
                got: end - begin,
            });
        }
        if end > payload.len() as u64 {
            return Err(FormatError::TruncatedPayload {
                name,
                end,
                payload_len: payload.len(),
            });
        }
        ranges.push((begin, end, name.clone()));
        tensors.push(RawTensor {
            name,
            dtype,
            shape: desc.shape,
            data: payload[begin as usize..end as usize].to_vec(),
        });
    }

    ranges.sort();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(FormatError::OffsetOverlap {
                a: pair[0].2.clone(),
                b: pair[1].2.clone(),
            });
        }
    }

    Ok((metadata, tensors))
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDescriptor {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Serialize tensors (sorted by name) and metadata into container bytes.
pub(crate) fn encode_container(
    metadata: &BTreeMap<String, String>,
    tensors: &[RawTensor],
) -> Vec<u8> {
    let mut sorted: Vec<&RawTensor> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));

    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(
            "__metadata__".to_string(),
            serde_json::to_value(metadata).expect("string map"),
        );
    }
    let mut offset = 0u64;
    for t in &sorted {
        let end = offset + t.data.len() as u64;
        header.insert(
            t.name.clone(),
            serde_json::json!({
                "dtype": t.dtype.as_str(),
                "shape": t.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    // serde_json's map is sorted, so these bytes are canonical.
    let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header)).expect("header");

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in &sorted {
        out.extend_from_slice(&t.data);
    }
    out
}

// ------------------------------------------------------------- typed io

const LORA_A_SUFFIX: &str = ".lora_A";
const LORA_B_SUFFIX: &str = ".lora_B";

/// Decode container bytes into adapters, extras and metadata.
pub(crate) fn decode_adapter_file(bytes: &[u8]) -> Result<AdapterFile, FormatError> {
    let (metadata, tensors) = parse_container(bytes)?;

    let mut a_parts: BTreeMap<String, RawTensor> = BTreeMap::new();
    let mut b_parts: BTreeMap<String, RawTensor> = BTreeMap::new();
    let mut extras = Vec::new();
    for t in tensors {
        if let Some(layer) = t.name.strip_suffix(LORA_A_SUFFIX) {
            a_parts.insert(layer.to_string(), t);
        } else if let Some(layer) = t.name.strip_suffix(LORA_B_SUFFIX) {
            b_parts.insert(layer.to_string(), t);
        } else {
            extras.push(t);
        }
    }

    for layer in b_parts.keys() {
        if !a_parts.contains_key(layer) {
            return Err(FormatError::IncompletePair {
                layer: layer.clone(),
                missing: format!("{layer}{LORA_A_SUFFIX}"),
            });
        }
    }

    let mut entries = Vec::new();
    for (layer, a_raw) in a_parts {
        let b_raw = b_parts
            .remove(&layer)
            .ok_or_else(|| FormatError::IncompletePair {
                layer: layer.clone(),
                missing: format!("{layer}{LORA_B_SUFFIX}"),
            })?;
        let a = a_raw.to_matrix()?;
        let b = b_raw.to_matrix()?;
        if a.rows() != b.cols() {
            return Err(FormatError::RankMismatch {
                layer,
                a_r: a.rows(),
                a_n: a.cols(),
                b_m: b.rows(),
                b_r: b.cols(),
            });
        }
        if let Some(meta_rank) = metadata.get(&format!("{layer}.rank")) {
            if meta_rank.parse::<usize>() != Ok(a.rows()) {
                return Err(FormatError::MetadataRank {
                    layer,
                    meta: meta_rank.clone(),
                    actual: a.rows(),
                });
            }
        }
        let scale = match metadata.get(&format!("{layer}.scale")) {
            Some(raw) => raw.parse::<f64>().map_err(|_| FormatError::MetadataScale {
                layer: layer.clone(),
                value: raw.clone(),
            })?,
            None => 1.0,
        };
        entries.push(AdapterEntry {
            adapter: LoraAdapter {
                name: layer,
                a,
                b,
                scale,
            },
            dtype_a: a_raw.dtype,
            dtype_b: b_raw.dtype,
        });
    }

    Ok(AdapterFile {
        entries,
        extras,
        metadata,
    })
}

pub(crate) fn encode_adapter_file(file: &AdapterFile) -> Vec<u8> {
    let mut metadata = file.metadata.clone();
    let mut tensors: Vec<RawTensor> = file.extras.clone();
    for entry in &file.entries {
        let layer = &entry.adapter.name;
        tensors.push(RawTensor::from_matrix(
            format!("{layer}{LORA_A_SUFFIX}"),
            &entry.adapter.a,
            entry.dtype_a,
        ));
        tensors.push(RawTensor::from_matrix(
            format!("{layer}{LORA_B_SUFFIX}"),
            &entry.adapter.b,
            entry.dtype_b,
        ));
        metadata.insert(
            format!("{layer}.scale"),
            serde_json::to_string(&entry.adapter.scale).expect("finite scale"),
        );
        metadata.insert(format!("{layer}.rank"), entry.adapter.rank().to_string());
    }
    encode_container(&metadata, &tensors)
}

pub fn save_adapter_file(path: impl AsRef<Path>, file: &AdapterFile) -> Result<(), FormatError> {
    write_path(path.as_ref(), &encode_adapter_file(file))
}

pub fn load_adapter_file(path: impl AsRef<Path>) -> Result<AdapterFile, FormatError> {
    decode_adapter_file(&read_path(path.as_ref())?)
}

/// Write one adapter to its own file, double precision.
pub fn save_adapter(path: impl AsRef<Path>, adapter: &LoraAdapter) -> Result<(), FormatError> {
    save_adapter_file(
        path,
        &AdapterFile {
            entries: vec![AdapterEntry {
                adapter: adapter.clone(),
                dtype_a: TensorDtype::F64,
                dtype_b: TensorDtype::F64,
            }],
            extras: Vec::new(),
            metadata: BTreeMap::new(),
        },
    )
}

/// Read a file that holds exactly one adapter.
pub fn load_adapter(path: impl AsRef<Path>) -> Result<LoraAdapter, FormatError> {
    let file = load_adapter_file(path)?;
    if file.entries.len() != 1 {
        return Err(FormatError::NotSingleAdapter(file.entries.len()));
    }
    Ok(file.entries.into_iter().next().unwrap().adapter)
}

/// Write plain (non-adapter) weights, one tensor per layer, double
/// precision. Shares the container layout with adapter files.
pub fn save_weights(
    path: impl AsRef<Path>,
    weights: &super::BaseWeights,
) -> Result<(), FormatError> {
    let tensors: Vec<RawTensor> = weights
        .layers()
        .iter()
        .map(|(name, m)| RawTensor::from_matrix(name.clone(), m, TensorDtype::F64))
        .collect();
    write_path(
        path.as_ref(),
        &encode_container(&BTreeMap::new(), &tensors),
    )
}

/// Read plain weights: every tensor in the file becomes a layer. Layers
/// come back in name-sorted order (the container's canonical layout).
pub fn load_weights(path: impl AsRef<Path>) -> Result<super::BaseWeights, FormatError> {
    let (_, tensors) = parse_container(&read_path(path.as_ref())?)?;
    let mut layers = Vec::new();
    for t in tensors {
        let m = t.to_matrix()?;
        layers.push((t.name, m));
    }
    super::BaseWeights::new(layers).map_err(|_| FormatError::BadDescriptor {
        name: "<weights>".into(),
        detail: "duplicate layer names".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn random_adapter(rng: &mut Rng, name: &str) -> LoraAdapter {
        let mut ad = LoraAdapter::init_standard(rng, name, 6, 10, 3, 0.5).unwrap();
        ad.b = rng.normal_matrix(6, 3, 1.0);
        ad.scale = 0.75;
        ad
    }

    #[test]
    fn round_trip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.lora");
        let mut rng = Rng::new(8);
        let ad = random_adapter(&mut rng, "layer0");
        save_adapter(&path, &ad).unwrap();
        let back = load_adapter(&path).unwrap();
        assert_eq!(ad, back);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.lora");
        let p2 = dir.path().join("b.lora");
        let mut rng = Rng::new(9);
        let ad = random_adapter(&mut rng, "layer0");
        save_adapter(&p1, &ad).unwrap();
        let file = load_adapter_file(&p1).unwrap();
        save_adapter_file(&p2, &file).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_length_inconsistent_is_an_error() {
        let mut rng = Rng::new(10);
        let ad = random_adapter(&mut rng, "layer0");
        let mut bytes = encode_adapter_file(&AdapterFile {
            entries: vec![AdapterEntry {
                adapter: ad,
                dtype_a: TensorDtype::F64,
                dtype_b: TensorDtype::F64,
            }],
            ..Default::default()
        });
        let huge = (bytes.len() as u64 + 100).to_le_bytes();
        bytes[..8].copy_from_slice(&huge);
        assert!(matches!(
            decode_adapter_file(&bytes),
            Err(FormatError::HeaderLength { .. })
        ));
    }

    #[test]
    fn f32_fixture_built_by_hand_loads_with_widening() {
        // Construct the file byte-by-byte from the format description; no
        // writer involved.
        let a_values: [f32; 4] = [1.0, -2.0, 0.5, 3.25]; // 1x4
        let b_values: [f32; 2] = [2.0, -0.25]; // 2x1
        let mut payload = Vec::new();
        for v in a_values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let a_end = payload.len();
        for v in b_values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let b_end = payload.len();
        let header = format!(
            "{{\"layer0.lora_A\":{{\"dtype\":\"F32\",\"shape\":[1,4],\"data_offsets\":[0,{a_end}]}},\
             \"layer0.lora_B\":{{\"dtype\":\"F32\",\"shape\":[2,1],\"data_offsets\":[{a_end},{b_end}]}}}}"
        );
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&payload);

        let file = decode_adapter_file(&bytes).unwrap();
        assert_eq!(file.entries.len(), 1);
        let ad = &file.entries[0].adapter;
        assert_eq!(ad.name, "layer0");
        assert_eq!(ad.a.shape(), (1, 4));
        assert_eq!(ad.b.shape(), (2, 1));
        assert_eq!(ad.a.data(), &[1.0, -2.0, 0.5, 3.25]);
        assert_eq!(ad.b.data(), &[2.0, -0.25]);
        assert_eq!(ad.scale, 1.0);
        assert_eq!(file.entries[0].dtype_a, TensorDtype::F32);
    }

    #[test]
    fn unknown_dtype_rejected() {
        let header = r#"{"x":{"dtype":"I8","shape":[1,1],"data_offsets":[0,1]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.push(0);
        assert!(matches!(
            parse_container(&bytes),
            Err(FormatError::UnknownDtype { .. })
        ));
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let header = r#"{"x":{"dtype":"F32","shape":[1,1],"data_offsets":[0,4]},"y":{"dtype":"F32","shape":[1,1],"data_offsets":[2,6]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 6]);
        assert!(matches!(
            parse_container(&bytes),
            Err(FormatError::OffsetOverlap { .. })
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let header = r#"{"x":{"dtype":"F64","shape":[2,2],"data_offsets":[0,32]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 16]); // half the payload
        assert!(matches!(
            parse_container(&bytes),
            Err(FormatError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn unknown_tensor_names_survive_round_trip() {
        let mut rng = Rng::new(11);
        let extra = RawTensor::from_matrix("stats.running", &rng.normal_matrix(2, 3, 1.0),
            TensorDtype::F32);
        let file = AdapterFile {
            entries: vec![AdapterEntry {
                adapter: random_adapter(&mut rng, "layer0"),
                dtype_a: TensorDtype::F64,
                dtype_b: TensorDtype::F64,
            }],
            extras: vec![extra.clone()],
            metadata: BTreeMap::new(),
        };
        let bytes = encode_adapter_file(&file);
        let back = decode_adapter_file(&bytes).unwrap();
        assert_eq!(back.extras, vec![extra]);
        assert_eq!(encode_adapter_file(&back), bytes);
    }

    #[test]
    fn lone_lora_b_is_incomplete() {
        let t = RawTensor::from_matrix("w.lora_B", &Matrix::zeros(2, 1), TensorDtype::F64);
        let bytes = encode_container(&BTreeMap::new(), &[t]);
        assert!(matches!(
            decode_adapter_file(&bytes),
            Err(FormatError::IncompletePair { .. })
        ));
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut rng = Rng::new(12);
        // Name-sorted construction; loading normalizes to this order.
        let weights = super::super::BaseWeights::new(vec![
            ("wk".into(), rng.normal_matrix(4, 4, 1.0)),
            ("wq".into(), rng.normal_matrix(4, 4, 1.0)),
        ])
        .unwrap();
        save_weights(&path, &weights).unwrap();
        assert_eq!(load_weights(&path).unwrap(), weights);
    }
}
