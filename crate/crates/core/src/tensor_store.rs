//! OTMB: a small, deterministic binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OTMB" | u32 version | u64 manifest_len | manifest (canonical JSON)
//! then, per record sorted by name:
//!   u32 name_len | name (UTF-8) | u8 dtype (0 = f32, 1 = f64) | u32 rank | u64 dims[rank] | payload
//! ```
//!
//! Records whose name has the form `layer.<index>.<module>.<kind>` are checked
//! against the manifest; any other name is a free-form record owned by the
//! producer (plan artifacts use this namespace).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OTMB";
pub const FORMAT_VERSION: u32 = 1;

const MAX_RANK: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Projection roles that can be aligned and fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    QProj,
    KProj,
    VProj,
    MlpIn,
    MlpOut,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 5] = [
        ModuleKind::QProj,
        ModuleKind::KProj,
        ModuleKind::VProj,
        ModuleKind::MlpIn,
        ModuleKind::MlpOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::QProj => "q_proj",
            ModuleKind::KProj => "k_proj",
            ModuleKind::VProj => "v_proj",
            ModuleKind::MlpIn => "mlp_in",
            ModuleKind::MlpOut => "mlp_out",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown module name {s:?}")))
    }
}

/// Which side of a projection an activation was captured on.
///
/// `Pre` is the module input (feeds the "in" transport plan), `Post` the
/// module output (feeds the "out" plan).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Pre,
    Post,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Pre => "pre",
            Side::Post => "post",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" | "in" => Ok(Side::Pre),
            "post" | "out" => Ok(Side::Post),
            _ => Err(Error::Validation(format!("unknown side {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDims {
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub modules: BTreeMap<ModuleKind, ModuleDims>,
}

/// Architecture description shared by every container of one model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_id: String,
    pub num_layers: usize,
    pub layers: Vec<LayerManifest>,
    pub sample_count: usize,
    /// Free-form provenance (content hashes, producer settings).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.num_layers {
            return Err(Error::Validation(format!(
                "manifest lists {} layers but num_layers = {}",
                self.layers.len(),
                self.num_layers
            )));
        }
        if self.sample_count < 2 {
            return Err(Error::Validation(format!(
                "sample_count must exceed 1, got {}",
                self.sample_count
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (module, dims) in &layer.modules {
                if dims.d_in == 0 || dims.d_out == 0 {
                    return Err(Error::Validation(format!(
                        "layer {l} {module} has a zero dimension"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self, layer: usize, module: ModuleKind) -> Option<ModuleDims> {
        self.layers.get(layer)?.modules.get(&module).copied()
    }

    /// Canonical JSON text: sorted keys, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        canonical_json(&value)
    }

    /// The same architecture under a different id and with no attributes.
    pub fn architecture(&self) -> ModelManifest {
        ModelManifest {
            attributes: BTreeMap::new(),
            ..self.clone()
        }
    }
}

/// Writes `value` as JSON with object keys sorted and no insignificant whitespace.
pub fn canonical_json(value: &serde_json::Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string serializes"));
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&serde_json::to_string(scalar).expect("scalar serializes")),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One named tensor with raw little-endian row-major payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let record = TensorRecord {
            name: name.into(),
            dtype: DType::F64,
            shape,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let record = TensorRecord {
            name: name.into(),
            dtype: DType::F32,
            shape,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn from_matrix(name: impl Into<String>, matrix: &Array2<f64>) -> Self {
        let values: Vec<f64> = matrix.iter().copied().collect();
        let shape = vec![matrix.nrows(), matrix.ncols()];
        TensorRecord::from_f64(name, shape, &values).expect("matrix shape matches payload")
    }

    pub fn from_vector(name: impl Into<String>, vector: &Array1<f64>) -> Self {
        let values: Vec<f64> = vector.iter().copied().collect();
        TensorRecord::from_f64(name, vec![values.len()], &values).expect("vector shape matches payload")
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        TensorRecord::from_f64(name, Vec::new(), &[value]).expect("scalar")
    }

    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Validation("tensor name is empty".into()));
        }
        let expected = self
            .numel()
            .and_then(|n| n.checked_mul(self.dtype.width()))
            .ok_or_else(|| Error::Validation(format!("{}: shape product overflows", self.name)))?;
        if expected != self.data.len() {
            return Err(Error::Validation(format!(
                "{}: shape {:?} needs {} bytes, payload has {}",
                self.name,
                self.shape,
                expected,
                self.data.len()
            )));
        }
        Ok(())
    }

    /// Payload as f64, widening f32 values.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self.dtype {
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Validation(format!(
                "{}: expected rank 2, got shape {:?}",
                self.name, self.shape
            )));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.to_f64_vec())
            .map_err(|e| Error::Validation(format!("{}: {e}", self.name)))
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Validation(format!(
                "{}: expected rank 1, got shape {:?}",
                self.name, self.shape
            )));
        }
        Ok(Array1::from(self.to_f64_vec()))
    }

    pub fn to_scalar(&self) -> Result<f64> {
        match self.to_f64_vec().as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Validation(format!("{}: expected a single value", self.name))),
        }
    }
}

/// Per-layer tensor kinds recognised in the `layer.` namespace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorKind {
    Weight,
    Bias,
    Delta,
    DeltaBias,
    Mask,
    Alpha,
    ActPre,
    ActPost,
}

impl TensorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TensorKind::Weight => "weight",
            TensorKind::Bias => "bias",
            TensorKind::Delta => "delta",
            TensorKind::DeltaBias => "delta_bias",
            TensorKind::Mask => "mask",
            TensorKind::Alpha => "alpha",
            TensorKind::ActPre => "act_pre",
            TensorKind::ActPost => "act_post",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            TensorKind::Weight,
            TensorKind::Bias,
            TensorKind::Delta,
            TensorKind::DeltaBias,
            TensorKind::Mask,
            TensorKind::Alpha,
            TensorKind::ActPre,
            TensorKind::ActPost,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }

    pub fn activation(side: Side) -> Self {
        match side {
            Side::Pre => TensorKind::ActPre,
            Side::Post => TensorKind::ActPost,
        }
    }

    fn expected_shape(self, dims: ModuleDims, samples: usize) -> Vec<usize> {
        match self {
            TensorKind::Weight | TensorKind::Delta => vec![dims.d_out, dims.d_in],
            TensorKind::Bias | TensorKind::DeltaBias | TensorKind::Mask => vec![dims.d_out],
            TensorKind::Alpha => Vec::new(),
            TensorKind::ActPre => vec![samples, dims.d_in],
            TensorKind::ActPost => vec![samples, dims.d_out],
        }
    }
}

/// Parsed form of `layer.<index>.<module>.<kind>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerTensorName {
    pub layer: usize,
    pub module: ModuleKind,
    pub kind: TensorKind,
}

impl LayerTensorName {
    pub fn new(layer: usize, module: ModuleKind, kind: TensorKind) -> Self {
        LayerTensorName { layer, module, kind }
    }

    /// `Ok(None)` for names outside the `layer.` namespace.
    pub fn parse(name: &str) -> Result<Option<Self>> {
        let mut parts = name.split('.');
        if parts.next() != Some("layer") {
            return Ok(None);
        }
        let rest: Vec<&str> = parts.collect();
        let [layer, module, kind] = rest.as_slice() else {
            return Err(Error::Validation(format!("malformed layer tensor name {name:?}")));
        };
        let layer = layer
            .parse::<usize>()
            .map_err(|_| Error::Validation(format!("bad layer index in {name:?}")))?;
        let module = module.parse::<ModuleKind>()?;
        let kind = TensorKind::parse(kind)
            .ok_or_else(|| Error::Validation(format!("unknown tensor kind in {name:?}")))?;
        Ok(Some(LayerTensorName { layer, module, kind }))
    }
}

impl fmt::Display for LayerTensorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer.{}.{}.{}", self.layer, self.module, self.kind.as_str())
    }
}

/// A decoded container.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: ModelManifest,
    pub records: Vec<TensorRecord>,
}

impl Container {
    pub fn new(manifest: ModelManifest, mut records: Vec<TensorRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.name.cmp(&b.name));
        validate_records(&records, &manifest)?;
        Ok(Container { manifest, records })
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records
            .binary_search_by(|r| r.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::MissingInput(format!("tensor {name} in {}", self.manifest.model_id)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.records, &self.manifest)
    }
}

fn validate_records(records: &[TensorRecord], manifest: &ModelManifest) -> Result<()> {
    manifest.validate()?;
    let mut seen = BTreeSet::new();
    for record in records {
        if !seen.insert(record.name.as_str()) {
            return Err(Error::ContainerIntegrity(format!("duplicate tensor name {}", record.name)));
        }
        record.validate()?;
        if let Some(parsed) = LayerTensorName::parse(&record.name)? {
            let dims = manifest.dims(parsed.layer, parsed.module).ok_or_else(|| {
                Error::Validation(format!(
                    "{}: layer {} module {} is not in the manifest",
                    record.name, parsed.layer, parsed.module
                ))
            })?;
            let expected = parsed.kind.expected_shape(dims, manifest.sample_count);
            if record.shape != expected {
                return Err(Error::Validation(format!(
                    "{}: shape {:?} does not match manifest shape {:?}",
                    record.name, record.shape, expected
                )));
            }
        }
    }
    Ok(())
}

fn encode(sorted: &[TensorRecord], manifest: &ModelManifest) -> Vec<u8> {
    let manifest_json = manifest.to_canonical_json();
    let payload: usize = sorted.iter().map(|r| r.data.len() + r.name.len() + 16).sum();
    let mut out = Vec::with_capacity(16 + manifest_json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest_json.as_bytes());
    for record in sorted {
        out.extend_from_slice(&(record.name.len() as u32).to_le_bytes());
        out.extend_from_slice(record.name.as_bytes());
        out.push(record.dtype.tag());
        out.extend_from_slice(&(record.shape.len() as u32).to_le_bytes());
        for &d in &record.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&record.data);
    }
    out
}

/// Serializes records and manifest into container bytes after validation.
pub fn encode_container(records: &[TensorRecord], manifest: &ModelManifest) -> Result<Vec<u8>> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    validate_records(&sorted, manifest)?;
    Ok(encode(&sorted, manifest))
}

pub fn write_container(records: &[TensorRecord], manifest: &ModelManifest, path: &Path) -> Result<()> {
    let bytes = encode_container(records, manifest)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::Corruption(format!(
                    "truncated {what}: need {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len().saturating_sub(self.pos)
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Corruption(format!("{what} exceeds address space")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(Error::Format("file too short for OTMB header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {:?}", &bytes[..4])));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let manifest_len = cur.len("manifest length")?;
    let manifest_bytes = cur.take(manifest_len, "manifest")?;
    let manifest: ModelManifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::Corruption(format!("manifest is not valid JSON: {e}")))?;

    let mut records = Vec::new();
    while !cur.done() {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_owned();
        let tag = cur.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Corruption(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = cur.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::Corruption(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.len("dimension"))
            .collect::<Result<Vec<usize>>>()?;
        let payload_len = shape
            .iter()
            .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corruption(format!("{name}: shape product overflows")))?;
        let data = cur.take(payload_len, &format!("payload of {name}"))?.to_vec();
        records.push(TensorRecord { name, dtype, shape, data });
    }
    if records.windows(2).any(|w| w[0].name > w[1].name) {
        return Err(Error::Corruption("records are not sorted by name".into()));
    }
    validate_records(&records, &manifest)?;
    Ok(Container { manifest, records })
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// A module's projection weight and optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

/// Projection weights of one model, keyed by (layer, module).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub manifest: ModelManifest,
    pub modules: BTreeMap<(usize, ModuleKind), Linear>,
}

impl WeightBundle {
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        for (&(layer, module), linear) in &self.modules {
            let dims = self.manifest.dims(layer, module).ok_or_else(|| {
                Error::Validation(format!("layer {layer} {module} is not in the manifest"))
            })?;
            if linear.weight.dim() != (dims.d_out, dims.d_in) {
                return Err(Error::Validation(format!(
                    "layer {layer} {module}: weight {:?} does not match manifest ({}, {})",
                    linear.weight.dim(),
                    dims.d_out,
                    dims.d_in
                )));
            }
            if let Some(bias) = &linear.bias {
                if bias.len() != dims.d_out {
                    return Err(Error::Validation(format!(
                        "layer {layer} {module}: bias length {} != d_out {}",
                        bias.len(),
                        dims.d_out
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, layer: usize, module: ModuleKind) -> Result<&Linear> {
        self.modules.get(&(layer, module)).ok_or_else(|| {
            Error::MissingInput(format!(
                "weight layer.{layer}.{module} in {}",
                self.manifest.model_id
            ))
        })
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut records = Vec::new();
        for (&(layer, module), linear) in &self.modules {
            records.push(TensorRecord::from_matrix(
                LayerTensorName::new(layer, module, TensorKind::Weight).to_string(),
                &linear.weight,
            ));
            if let Some(bias) = &linear.bias {
                records.push(TensorRecord::from_vector(
                    LayerTensorName::new(layer, module, TensorKind::Bias).to_string(),
                    bias,
                ));
            }
        }
        records
    }

    /// Collects `weight` / `bias` records; other kinds are ignored.
    pub fn from_container(container: &Container) -> Result<Self> {
        let mut modules = BTreeMap::new();
        for record in &container.records {
            let Some(name) = LayerTensorName::parse(&record.name)? else {
                continue;
            };
            if name.kind == TensorKind::Weight {
                let bias_name = LayerTensorName::new(name.layer, name.module, TensorKind::Bias).to_string();
                let bias = container.get(&bias_name).map(TensorRecord::to_vector).transpose()?;
                modules.insert(
                    (name.layer, name.module),
                    Linear {
                        weight: record.to_matrix()?,
                        bias,
                    },
                );
            }
        }
        let bundle = WeightBundle {
            manifest: container.manifest.clone(),
            modules,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_container(&self.to_records(), &self.manifest, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        WeightBundle::from_container(&read_container(path)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.modules
            .values()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }
}

/// T x n activations of one (layer, module, side).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub model_id: String,
    pub layer: usize,
    pub module: ModuleKind,
    pub side: Side,
    pub values: Array2<f64>,
}

/// All recorded activations of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub manifest: ModelManifest,
    pub matrices: BTreeMap<(usize, ModuleKind, Side), ActivationMatrix>,
}

impl ActivationSet {
    pub fn new(manifest: ModelManifest) -> Self {
        ActivationSet {
            manifest,
            matrices: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: usize, module: ModuleKind, side: Side, values: Array2<f64>) -> Result<()> {
        let dims = self.manifest.dims(layer, module).ok_or_else(|| {
            Error::Validation(format!("layer {layer} {module} is not in the manifest"))
        })?;
        let cols = match side {
            Side::Pre => dims.d_in,
            Side::Post => dims.d_out,
        };
        if values.dim() != (self.manifest.sample_count, cols) {
            return Err(Error::Validation(format!(
                "layer {layer} {module} {side}: activations {:?}, expected ({}, {cols})",
                values.dim(),
                self.manifest.sample_count
            )));
        }
        self.matrices.insert(
            (layer, module, side),
            ActivationMatrix {
                model_id: self.manifest.model_id.clone(),
                layer,
                module,
                side,
                values,
            },
        );
        Ok(())
    }

    pub fn get(&self, layer: usize, module: ModuleKind, side: Side) -> Result<&ActivationMatrix> {
        self.matrices.get(&(layer, module, side)).ok_or_else(|| {
            Error::MissingInput(format!(
                "activation layer.{layer}.{module}.{} in {}",
                TensorKind::activation(side).as_str(),
                self.manifest.model_id
            ))
        })
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.matrices
            .iter()
            .map(|(&(layer, module, side), m)| {
                TensorRecord::from_matrix(
                    LayerTensorName::new(layer, module, TensorKind::activation(side)).to_string(),
                    &m.values,
                )
            })
            .collect()
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let mut set = ActivationSet::new(container.manifest.clone());
        for record in &container.records {
            let Some(name) = LayerTensorName::parse(&record.name)? else {
                continue;
            };
            let side = match name.kind {
                TensorKind::ActPre => Side::Pre,
                TensorKind::ActPost => Side::Post,
                _ => continue,
            };
            set.insert(name.layer, name.module, side, record.to_matrix()?)?;
        }
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_container(&self.to_records(), &self.manifest, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        ActivationSet::from_container(&read_container(path)?)
    }
}
