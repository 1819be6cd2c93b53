//! Checkpoint weight files and their layer/component index.
//!
//! The on-disk layout is the single-file safetensors container:
//!
//! ```text
//! [8 bytes LE u64: header length N]
//! [N bytes: UTF-8 JSON {name: {dtype, shape, data_offsets: [begin, end]}}]
//! [raw little-endian tensor bytes, offsets relative to the end of the header]
//! ```
//!
//! Tensor payloads are kept as raw bytes so that f16/bf16 tensors survive a
//! load/save cycle bit-for-bit. Arithmetic goes through [`TensorRecord::to_f32`]
//! and [`TensorRecord::from_f32`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "F32")]
    F32,
    #[serde(rename = "F16")]
    F16,
    #[serde(rename = "BF16")]
    BF16,
}

impl Dtype {
    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::format(format!("unsupported dtype `{other}`"))),
        }
    }
}

/// Component class of a parameter within a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentClass {
    Mlp,
    Att,
    Norm,
    Global,
}

impl ComponentClass {
    pub const ALL: [ComponentClass; 4] = [
        ComponentClass::Mlp,
        ComponentClass::Att,
        ComponentClass::Norm,
        ComponentClass::Global,
    ];
}

/// Maps a parameter name to its layer index and component class.
///
/// The layer index is the first all-digit path segment that follows a segment
/// equal to `layers`. Inside a layer, `mlp` wins over `attn`/`attention`, which
/// wins over `norm`; anything else in a layer lands in `Norm`.
pub fn classify_parameter(name: &str) -> (Option<usize>, ComponentClass) {
    let segments: Vec<&str> = name.split('.').collect();
    let layer = segments.windows(2).find_map(|w| {
        if w[0] == "layers" && !w[1].is_empty() && w[1].bytes().all(|b| b.is_ascii_digit()) {
            w[1].parse::<usize>().ok()
        } else {
            None
        }
    });
    let Some(layer) = layer else {
        return (None, ComponentClass::Global);
    };
    let lower = name.to_ascii_lowercase();
    let class = if lower.contains("mlp") {
        ComponentClass::Mlp
    } else if lower.contains("attn") || lower.contains("attention") {
        ComponentClass::Att
    } else {
        ComponentClass::Norm
    };
    (Some(layer), class)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl TensorRecord {
    /// Builds a record from raw little-endian bytes.
    pub fn from_raw(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let name = name.into();
        let expected = byte_len(&shape, dtype)
            .ok_or_else(|| Error::format(format!("tensor `{name}`: shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::format(format!(
                "tensor `{name}`: shape {shape:?} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dtype, shape, data })
    }

    /// Encodes f32 values into `dtype`, rounding to nearest-even for half types.
    pub fn from_f32(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * dtype.element_size());
        match dtype {
            Dtype::F32 => values.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            Dtype::F16 => values
                .iter()
                .for_each(|v| data.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
            Dtype::BF16 => values
                .iter()
                .for_each(|v| data.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
        }
        Self::from_raw(name, dtype, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => self
                .data
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }
}

fn byte_len(shape: &[usize], dtype: Dtype) -> Option<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))?
        .checked_mul(dtype.element_size())
}

/// Named tensor collection for one checkpoint. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    model_id: String,
    tensors: BTreeMap<String, TensorRecord>,
    layer_count: usize,
    index: BTreeMap<(usize, ComponentClass), Vec<String>>,
    globals: Vec<String>,
}

impl WeightStore {
    pub fn new(model_id: impl Into<String>, records: Vec<TensorRecord>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for record in records {
            if tensors.contains_key(&record.name) {
                return Err(Error::format(format!("duplicate tensor name `{}`", record.name)));
            }
            tensors.insert(record.name.clone(), record);
        }
        let mut index: BTreeMap<(usize, ComponentClass), Vec<String>> = BTreeMap::new();
        let mut globals = Vec::new();
        let mut layer_count = 0usize;
        for name in tensors.keys() {
            match classify_parameter(name) {
                (Some(layer), class) => {
                    layer_count = layer_count.max(layer.saturating_add(1));
                    index.entry((layer, class)).or_default().push(name.clone());
                }
                (None, _) => globals.push(name.clone()),
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            tensors,
            layer_count,
            index,
            globals,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Returns a copy of the store under a different model id.
    pub fn renamed(&self, model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..self.clone()
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorRecord> {
        self.tensors.values()
    }

    pub fn index(&self) -> &BTreeMap<(usize, ComponentClass), Vec<String>> {
        &self.index
    }

    pub fn globals(&self) -> &[String] {
        &self.globals
    }

    pub fn layer_tensors(&self, layer: usize, class: ComponentClass) -> &[String] {
        self.index.get(&(layer, class)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// True when both stores hold the same tensor names with the same shapes.
    pub fn same_architecture(&self, other: &WeightStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape)
    }

    /// Parses a container from memory.
    pub fn from_bytes(model_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("file too small to contain a header length"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len)
            .ok()
            .filter(|n| *n <= bytes.len() - 8)
            .ok_or_else(|| Error::format(format!("header length {header_len} exceeds file size")))?;
        let header = std::str::from_utf8(&bytes[8..8 + header_len])
            .map_err(|e| Error::format(format!("header is not UTF-8: {e}")))?;
        let data = &bytes[8 + header_len..];

        let RawHeader(entries) =
            serde_json::from_str(header).map_err(|e| Error::format(format!("header JSON: {e}")))?;

        let mut seen = HashSet::new();
        let mut spans = Vec::with_capacity(entries.len());
        let mut records = Vec::with_capacity(entries.len());
        for (name, value) in entries {
            if !seen.insert(name.clone()) {
                return Err(Error::format(format!("duplicate tensor name `{name}`")));
            }
            if name == METADATA_KEY {
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::format(format!("tensor `{name}`: {e}")))?;
            let dtype = Dtype::parse(&entry.dtype)?;
            let [begin, end] = entry.data_offsets;
            if begin > end || end > data.len() {
                return Err(Error::format(format!(
                    "tensor `{name}`: byte range [{begin}, {end}) outside data section of {} bytes",
                    data.len()
                )));
            }
            spans.push((begin, end, name.clone()));
            records.push(TensorRecord::from_raw(name, dtype, entry.shape, data[begin..end].to_vec())?);
        }

        spans.sort();
        for pair in spans.windows(2) {
            let (_, prev_end, ref prev) = pair[0];
            let (begin, end, ref name) = pair[1];
            if begin < end && begin < prev_end {
                return Err(Error::format(format!("byte ranges of `{prev}` and `{name}` overlap")));
            }
        }

        WeightStore::new(model_id, records)
    }

    /// Serializes the store. Tensors are laid out by decreasing element size,
    /// then by name, and the header is space-padded to a multiple of 8 bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut order: Vec<&TensorRecord> = self.tensors.values().collect();
        order.sort_by(|a, b| {
            b.dtype
                .element_size()
                .cmp(&a.dtype.element_size())
                .then_with(|| a.name.cmp(&b.name))
        });

        let mut header = String::from("{");
        let mut offset = 0usize;
        for (i, record) in order.iter().enumerate() {
            if i > 0 {
                header.push(',');
            }
            let end = offset + record.data.len();
            header.push_str(&serde_json::to_string(&record.name)?);
            header.push(':');
            header.push_str(&serde_json::to_string(&HeaderEntryOut {
                dtype: record.dtype.as_str(),
                shape: &record.shape,
                data_offsets: [offset, end],
            })?);
            offset = end;
        }
        header.push('}');
        while header.len() % 8 != 0 {
            header.push(' ');
        }

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for record in order {
            out.extend_from_slice(&record.data);
        }
        Ok(out)
    }
}

/// Loads a weight file; the model id is the file stem.
pub fn load_store(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_store_as(path, id)
}

pub fn load_store_as(path: impl AsRef<Path>, model_id: impl Into<String>) -> Result<WeightStore> {
    let bytes = fs::read(path)?;
    WeightStore::from_bytes(model_id, &bytes)
}

pub fn save_store(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes()?)?;
    Ok(())
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Serialize)]
struct HeaderEntryOut<'a> {
    dtype: &'a str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

/// Header entries in file order, duplicates preserved so they can be rejected.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_record(name: &str, values: &[f32]) -> TensorRecord {
        TensorRecord::from_f32(name, Dtype::F32, vec![values.len()], values).unwrap()
    }

    fn container(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn classify_standard_decoder_names() {
        assert_eq!(
            classify_parameter("model.layers.3.mlp.gate_proj.weight"),
            (Some(3), ComponentClass::Mlp)
        );
        assert_eq!(
            classify_parameter("model.layers.0.self_attn.q_proj.weight"),
            (Some(0), ComponentClass::Att)
        );
        assert_eq!(
            classify_parameter("model.layers.12.input_layernorm.weight"),
            (Some(12), ComponentClass::Norm)
        );
        assert_eq!(
            classify_parameter("model.layers.1.self_attn.rotary_emb.inv_freq"),
            (Some(1), ComponentClass::Att)
        );
        assert_eq!(
            classify_parameter("model.layers.2.feed_forward.w1"),
            (Some(2), ComponentClass::Norm)
        );
        assert_eq!(classify_parameter("model.embed_tokens.weight"), (None, ComponentClass::Global));
        assert_eq!(classify_parameter("lm_head.weight"), (None, ComponentClass::Global));
        assert_eq!(classify_parameter("layers.x.mlp"), (None, ComponentClass::Global));
        assert_eq!(classify_parameter(""), (None, ComponentClass::Global));
    }

    #[test]
    fn first_layer_segment_wins() {
        assert_eq!(
            classify_parameter("encoder.layers.4.block.layers.7.mlp.w"),
            (Some(4), ComponentClass::Mlp)
        );
    }

    #[test]
    fn layer_count_from_names() {
        let store = WeightStore::new(
            "m",
            vec![f32_record("model.layers.0.mlp.w", &[1.0]), f32_record("model.layers.1.mlp.w", &[2.0])],
        )
        .unwrap();
        assert_eq!(store.layer_count(), 2);
        assert!(store.globals().is_empty());

        let store = WeightStore::new("m", vec![f32_record("model.embed_tokens.weight", &[1.0])]).unwrap();
        assert_eq!(store.layer_count(), 0);
        assert_eq!(store.globals().len(), 1);
    }

    #[test]
    fn rejects_overlapping_ranges() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let err = WeightStore::from_bytes("m", &container(header, &[0u8; 8])).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn rejects_bad_dtype_and_duplicates() {
        let header = r#"{"a":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#;
        assert!(WeightStore::from_bytes("m", &container(header, &[0u8; 8])).is_err());

        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let err = WeightStore::from_bytes("m", &container(header, &[0u8; 8])).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn rejects_truncated_and_mismatched() {
        assert!(WeightStore::from_bytes("m", &[1, 2, 3]).is_err());
        let mut bytes = container("{}", &[]);
        bytes[0] = 200;
        assert!(WeightStore::from_bytes("m", &bytes).is_err());
        let header = r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        assert!(WeightStore::from_bytes("m", &container(header, &[0u8; 8])).is_err());
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        assert!(WeightStore::from_bytes("m", &container(header, &[0u8; 4])).is_err());
        assert!(WeightStore::from_bytes("m", &container("[1,2]", &[])).is_err());
    }

    #[test]
    fn metadata_entry_is_ignored() {
        let header = r#"{"__metadata__":{"format":"pt"},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let store = WeightStore::from_bytes("m", &container(header, &1.5f32.to_le_bytes())).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.get("a").unwrap().to_f32(), vec![1.5]);
    }

    #[test]
    fn empty_store_round_trip() {
        let store = WeightStore::new("empty", vec![]).unwrap();
        let bytes = store.to_bytes().unwrap();
        assert_eq!(bytes.len(), 16);
        let back = WeightStore::from_bytes("empty", &bytes).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn half_precision_encoding_rounds_to_nearest_even() {
        // 1 + 2^-11 lies exactly between two f16 values; ties go to the even mantissa (1.0).
        let r = TensorRecord::from_f32("h", Dtype::F16, vec![1], &[1.0 + 2f32.powi(-11)]).unwrap();
        assert_eq!(r.to_f32(), vec![1.0]);
        let r = TensorRecord::from_f32("b", Dtype::BF16, vec![1], &[1.0 + 2f32.powi(-8)]).unwrap();
        assert_eq!(r.to_f32(), vec![1.0]);
    }
}
