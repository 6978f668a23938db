//! Safetensors checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! header, then the tensor byte buffer. The header maps tensor names to
//! `{"dtype", "shape", "data_offsets": [begin, end]}` (offsets relative to
//! the buffer) and may carry a `"__metadata__"` string map.
//!
//! Files are written canonically: metadata first, tensors in ascending
//! offset order with no gaps, header padded with spaces to a multiple of 8
//! bytes. Reading a canonical file and writing it back is byte-exact.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use half::{bf16, f16};
use serde_json::{Map, Value};

use crate::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(Error::parse(None, format!("unsupported dtype {other:?}"))),
        }
    }
}

/// Decodes little-endian storage bytes to f32.
pub fn decode_values(bytes: &[u8], dtype: DType) -> Vec<f32> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

/// Encodes f32 values to storage bytes, rounding to nearest-even for the
/// half-precision types.
pub fn encode_values(values: &[f32], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        match dtype {
            DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F16 => out.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
            DType::BF16 => out.extend_from_slice(&bf16::from_f32(v).to_le_bytes()),
        }
    }
    out
}

/// A tensor held in its storage representation.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_bytes(name: impl Into<String>, dtype: DType, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let name = name.into();
        let expected = numel(&shape) * dtype.size();
        if bytes.len() != expected {
            return Err(Error::Structural(format!(
                "tensor {name:?}: {} bytes for shape {shape:?} {dtype} (expected {expected})",
                bytes.len()
            )));
        }
        Ok(Self {
            name,
            dtype,
            shape,
            bytes,
        })
    }

    /// Stores `values` in `dtype`.
    pub fn from_values(name: impl Into<String>, dtype: DType, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let name = name.into();
        if values.len() != numel(&shape) {
            return Err(Error::Structural(format!(
                "tensor {name:?}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            dtype,
            shape,
            bytes: encode_values(values, dtype),
        })
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn values(&self) -> Vec<f32> {
        decode_values(&self.bytes, self.dtype)
    }

    pub fn info(&self) -> TensorInfo {
        TensorInfo {
            name: self.name.clone(),
            dtype: self.dtype,
            shape: self.shape.clone(),
            data_offsets: (0, self.bytes.len()),
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

impl TensorInfo {
    pub fn byte_len(&self) -> usize {
        self.data_offsets.1 - self.data_offsets.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Header {
    /// `__metadata__` entries in file order, if present.
    pub metadata: Option<Vec<(String, String)>>,
    /// Tensors in ascending offset order.
    pub tensors: Vec<TensorInfo>,
}

impl Header {
    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn buffer_len(&self) -> usize {
        self.tensors.iter().map(|t| t.data_offsets.1).max().unwrap_or(0)
    }

    /// Builds a canonical header for tensors laid out back to back.
    pub fn layout(
        metadata: Option<Vec<(String, String)>>,
        tensors: impl IntoIterator<Item = (String, DType, Vec<usize>)>,
    ) -> Result<Self> {
        let mut offset = 0;
        let mut infos: Vec<TensorInfo> = Vec::new();
        for (name, dtype, shape) in tensors {
            if name == METADATA_KEY || infos.iter().any(|t| t.name == name) {
                return Err(Error::Structural(format!("duplicate or reserved tensor name {name:?}")));
            }
            let len = numel(&shape) * dtype.size();
            infos.push(TensorInfo {
                name,
                dtype,
                shape,
                data_offsets: (offset, offset + len),
            });
            offset += len;
        }
        Ok(Self {
            metadata,
            tensors: infos,
        })
    }

    pub fn parse(json: &[u8]) -> Result<Self> {
        let root: Map<String, Value> = serde_json::from_slice(json)
            .map_err(|e| Error::parse(None, format!("safetensors header: {e}")))?;
        let mut metadata = None;
        let mut tensors = Vec::new();
        for (name, value) in root {
            if name == METADATA_KEY {
                let map = value
                    .as_object()
                    .ok_or_else(|| Error::parse(None, "__metadata__ must be an object"))?;
                let entries = map
                    .iter()
                    .map(|(k, v)| match v {
                        Value::String(s) => Ok((k.clone(), s.clone())),
                        _ => Err(Error::parse(None, format!("metadata value for {k:?} is not a string"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                metadata = Some(entries);
                continue;
            }
            tensors.push(parse_entry(name, &value)?);
        }
        tensors.sort_by_key(|t| t.data_offsets);
        for pair in tensors.windows(2) {
            if pair[1].data_offsets.0 < pair[0].data_offsets.1 {
                return Err(Error::Structural(format!(
                    "tensors {:?} and {:?} overlap",
                    pair[0].name, pair[1].name
                )));
            }
        }
        Ok(Self { metadata, tensors })
    }

    /// Canonical header bytes, space padded to a multiple of 8.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut root = Map::new();
        if let Some(meta) = &self.metadata {
            let map: Map<String, Value> = meta
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            root.insert(METADATA_KEY.into(), Value::Object(map));
        }
        for t in &self.tensors {
            let mut entry = Map::new();
            entry.insert("dtype".into(), Value::from(t.dtype.as_str()));
            entry.insert("shape".into(), Value::from(t.shape.clone()));
            entry.insert(
                "data_offsets".into(),
                Value::from(vec![t.data_offsets.0, t.data_offsets.1]),
            );
            root.insert(t.name.clone(), Value::Object(entry));
        }
        let mut bytes = serde_json::to_vec(&root)?;
        while bytes.len() % 8 != 0 {
            bytes.push(b' ');
        }
        Ok(bytes)
    }
}

fn parse_entry(name: String, value: &Value) -> Result<TensorInfo> {
    let bad = |what: &str| Error::parse(None, format!("tensor {name:?}: {what}"));
    let obj = value.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype: DType = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?
        .parse()?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("bad shape")))
        .collect::<Result<Vec<_>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| bad("missing data_offsets"))?;
    let begin = offsets[0].as_u64().ok_or_else(|| bad("bad data_offsets"))? as usize;
    let end = offsets[1].as_u64().ok_or_else(|| bad("bad data_offsets"))? as usize;
    if end < begin || end - begin != numel(&shape) * dtype.size() {
        return Err(Error::Structural(format!(
            "tensor {name:?}: offsets [{begin}, {end}] do not fit shape {shape:?} {dtype}"
        )));
    }
    Ok(TensorInfo {
        name,
        dtype,
        shape,
        data_offsets: (begin, end),
    })
}

/// A whole checkpoint in memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: Option<Vec<(String, String)>>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Self {
            metadata: None,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn header(&self) -> Result<Header> {
        Header::layout(
            self.metadata.clone(),
            self.tensors
                .iter()
                .map(|t| (t.name.clone(), t.dtype, t.shape.clone())),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header()?.to_bytes()?;
        let mut out = Vec::with_capacity(8 + header.len() + self.tensors.iter().map(|t| t.bytes.len()).sum::<usize>());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data_start) = split_header(bytes)?;
        let buffer = &bytes[data_start..];
        if header.buffer_len() > buffer.len() {
            return Err(Error::Structural(format!(
                "tensor data runs past the end of the buffer ({} > {})",
                header.buffer_len(),
                buffer.len()
            )));
        }
        let tensors = header
            .tensors
            .iter()
            .map(|t| {
                let (b, e) = t.data_offsets;
                NamedTensor::from_bytes(t.name.clone(), t.dtype, t.shape.clone(), buffer[b..e].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = CheckpointWriter::create(path, self.header()?)?;
        for t in &self.tensors {
            writer.write_tensor(t)?;
        }
        writer.finish()
    }
}

fn split_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 8 {
        return Err(Error::parse(None, "file too short for a safetensors header"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if n > MAX_HEADER_LEN || 8 + n as usize > bytes.len() {
        return Err(Error::parse(None, format!("invalid header length {n}")));
    }
    let end = 8 + n as usize;
    Ok((Header::parse(&bytes[8..end])?, end))
}

/// Reads tensors one at a time without loading the whole file.
#[derive(Debug)]
pub struct CheckpointReader {
    path: PathBuf,
    file: File,
    header: Header,
    data_start: u64,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut len = [0u8; 8];
        file.read_exact(&mut len).map_err(|e| Error::io(&path, e))?;
        let n = u64::from_le_bytes(len);
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if n > MAX_HEADER_LEN || 8 + n > file_len {
            return Err(Error::parse(None, format!("{}: invalid header length {n}", path.display())));
        }
        let mut json = vec![0u8; n as usize];
        file.read_exact(&mut json).map_err(|e| Error::io(&path, e))?;
        let header = Header::parse(&json)?;
        let data_start = 8 + n;
        if data_start + header.buffer_len() as u64 > file_len {
            return Err(Error::Structural(format!(
                "{}: tensor data runs past the end of the file",
                path.display()
            )));
        }
        Ok(Self {
            path,
            file,
            header,
            data_start,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn read(&mut self, name: &str) -> Result<NamedTensor> {
        let info = self
            .header
            .tensor(name)
            .ok_or_else(|| Error::Structural(format!("tensor {name:?} not found in {}", self.path.display())))?
            .clone();
        let mut bytes = vec![0u8; info.byte_len()];
        self.file
            .seek(SeekFrom::Start(self.data_start + info.data_offsets.0 as u64))
            .and_then(|_| self.file.read_exact(&mut bytes))
            .map_err(|e| Error::io(&self.path, e))?;
        NamedTensor::from_bytes(info.name, info.dtype, info.shape, bytes)
    }
}

/// Writes a checkpoint whose header is known up front, tensor by tensor.
/// Output goes to a sibling `.partial` file that is renamed on
/// [`CheckpointWriter::finish`] and removed if the writer is dropped first.
pub struct CheckpointWriter {
    path: PathBuf,
    partial: PathBuf,
    out: Option<BufWriter<File>>,
    header: Header,
    next: usize,
}

impl CheckpointWriter {
    pub fn create(path: impl AsRef<Path>, header: Header) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut partial = path.clone().into_os_string();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        let header_bytes = header.to_bytes()?;
        let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&header_bytes))
            .map_err(|e| Error::io(&partial, e))?;
        Ok(Self {
            path,
            partial,
            out: Some(out),
            header,
            next: 0,
        })
    }

    pub fn write_tensor(&mut self, tensor: &NamedTensor) -> Result<()> {
        let expected = self.header.tensors.get(self.next).ok_or_else(|| {
            Error::Structural(format!("unexpected extra tensor {:?}", tensor.name))
        })?;
        if expected.name != tensor.name || expected.dtype != tensor.dtype || expected.shape != tensor.shape {
            return Err(Error::Structural(format!(
                "expected tensor {:?} ({} {:?}), got {:?} ({} {:?})",
                expected.name, expected.dtype, expected.shape, tensor.name, tensor.dtype, tensor.shape
            )));
        }
        let out = self.out.as_mut().expect("writer is open");
        out.write_all(&tensor.bytes).map_err(|e| Error::io(&self.partial, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.header.tensors.len() {
            return Err(Error::Structural(format!(
                "only {} of {} tensors were written",
                self.next,
                self.header.tensors.len()
            )));
        }
        let out = self.out.take().expect("writer is open");
        out.into_inner()
            .map_err(|e| Error::io(&self.partial, e.into_error()))?
            .sync_all()
            .map_err(|e| Error::io(&self.partial, e))?;
        std::fs::rename(&self.partial, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for CheckpointWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = std::fs::remove_file(&self.partial);
        }
    }
}
