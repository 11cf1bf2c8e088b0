//! LSC1 batch container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LSC1" | version u8 = 1 | field_count u32
//! per field, ordered by path:
//!   path_len u16 | path | dtype u8 | ndim u8 | dims u64 x ndim
//!   | compression u8 | payload_len u64 | payload
//! ```
//!
//! Element data is row-major little-endian. Every field shares the leading
//! dimension (the batch size).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LSC1";
pub const VERSION: u8 = 1;
/// magic + version + field_count
pub const PREAMBLE_LEN: usize = 9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"LSC1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt container: {0}")]
    Corruption(String),
    #[error("batch shape mismatch: {path} has leading dimension {found}, expected {expected}")]
    BatchShape {
        path: String,
        expected: u64,
        found: u64,
    },
    #[error("unsupported dtype {0}")]
    DType(String),
}

/// Element type codes as stored on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    U64,
    I64,
    F32,
    F64,
}

impl DType {
    pub const ALL: [DType; 10] = [
        DType::U8,
        DType::I8,
        DType::U16,
        DType::I16,
        DType::U32,
        DType::I32,
        DType::U64,
        DType::I64,
        DType::F32,
        DType::F64,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<DType> {
        DType::ALL.get(code as usize).copied()
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 | DType::I8 => 1,
            DType::U16 | DType::I16 => 2,
            DType::U32 | DType::I32 | DType::F32 => 4,
            DType::U64 | DType::I64 | DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::I8 => "i8",
            DType::U16 => "u16",
            DType::I16 => "i16",
            DType::U32 => "u32",
            DType::I32 => "i32",
            DType::U64 => "u64",
            DType::I64 => "i64",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = ContainerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DType::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| ContainerError::DType(s.to_string()))
    }
}

/// Rust scalar types that map onto a [`DType`].
pub trait Element: Copy + Send + Sync + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

macro_rules! element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: DType = $d;
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

element!(u8, DType::U8);
element!(i8, DType::I8);
element!(u16, DType::U16);
element!(i16, DType::I16);
element!(u32, DType::U32);
element!(i32, DType::I32);
element!(u64, DType::U64);
element!(i64, DType::I64);
element!(f32, DType::F32);
element!(f64, DType::F64);

/// A typed, shaped, row-major array of little-endian elements.
#[derive(Clone, PartialEq, Eq)]
pub struct Array {
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub data: Vec<u8>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("bytes", &self.data.len())
            .finish()
    }
}

fn element_count(shape: &[u64]) -> Option<u64> {
    shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

impl Array {
    /// Builds an array, checking that `data` holds exactly `product(shape)` elements.
    pub fn new(dtype: DType, shape: Vec<u64>, data: Vec<u8>) -> Result<Self, ContainerError> {
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .ok_or_else(|| ContainerError::Format(format!("shape {shape:?} overflows")))?;
        if expected != data.len() as u64 {
            return Err(ContainerError::Corruption(format!(
                "shape {shape:?} of {dtype} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Array { dtype, shape, data })
    }

    pub fn from_slice<T: Element>(shape: Vec<u64>, values: &[T]) -> Result<Self, ContainerError> {
        let mut data = Vec::with_capacity(values.len() * T::DTYPE.size());
        for v in values {
            v.write_le(&mut data);
        }
        Array::new(T::DTYPE, shape, data)
    }

    /// Zero-dimensional array holding one value.
    pub fn scalar<T: Element>(value: T) -> Self {
        Array::from_slice(Vec::new(), &[value]).expect("scalar shape")
    }

    pub fn to_vec<T: Element>(&self) -> Option<Vec<T>> {
        if self.dtype != T::DTYPE {
            return None;
        }
        Some(self.data.chunks_exact(T::DTYPE.size()).map(T::read_le).collect())
    }

    pub fn len(&self) -> u64 {
        element_count(&self.shape).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leading dimension, or `None` for a zero-dimensional array.
    pub fn leading_dim(&self) -> Option<u64> {
        self.shape.first().copied()
    }

    /// Bytes of one row along the leading dimension.
    pub fn row_bytes(&self) -> usize {
        element_count(&self.shape[1.min(self.shape.len())..]).unwrap_or(0) as usize
            * self.dtype.size()
    }

    /// Row `i` along the leading dimension as its own array.
    pub fn row(&self, i: u64) -> Option<Array> {
        let n = self.leading_dim()?;
        if i >= n {
            return None;
        }
        let rb = self.row_bytes();
        let start = i as usize * rb;
        Some(Array {
            dtype: self.dtype,
            shape: self.shape[1..].to_vec(),
            data: self.data[start..start + rb].to_vec(),
        })
    }

    /// Stacks equally shaped arrays along a new leading dimension.
    pub fn stack(rows: &[Array]) -> Result<Array, ContainerError> {
        let first = rows
            .first()
            .ok_or_else(|| ContainerError::Format("cannot stack zero rows".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * rows.len());
        for r in rows {
            if r.dtype != first.dtype || r.shape != first.shape {
                return Err(ContainerError::Format(format!(
                    "cannot stack {} {:?} with {} {:?}",
                    r.dtype, r.shape, first.dtype, first.shape
                )));
            }
            data.extend_from_slice(&r.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(rows.len() as u64);
        shape.extend_from_slice(&first.shape);
        Ok(Array {
            dtype: first.dtype,
            shape,
            data,
        })
    }
}

/// Per-field payload compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Compression {
    #[default]
    None,
    Deflate {
        level: u32,
    },
}

impl Compression {
    pub fn code(self) -> u8 {
        match self {
            Compression::None => 0,
            Compression::Deflate { .. } => 1,
        }
    }
}

/// Named arrays sharing a leading dimension, keyed by container path.
pub type Batch = BTreeMap<String, Array>;

fn check_path(path: &str) -> Result<(), ContainerError> {
    if !path.starts_with('/') || path.contains('\0') || path.len() > u16::MAX as usize {
        return Err(ContainerError::Format(format!("invalid field path {path:?}")));
    }
    Ok(())
}

/// Leading dimension shared by every field, or an error naming the first misfit.
pub fn batch_size(batch: &Batch) -> Result<Option<u64>, ContainerError> {
    let mut expected = None;
    for (path, a) in batch {
        let lead = a.leading_dim().ok_or_else(|| {
            ContainerError::Format(format!("field {path} has no leading dimension"))
        })?;
        match expected {
            None => expected = Some(lead),
            Some(e) if e != lead => {
                return Err(ContainerError::BatchShape {
                    path: path.clone(),
                    expected: e,
                    found: lead,
                })
            }
            _ => {}
        }
    }
    Ok(expected)
}

/// Serialises a batch. Field order is the map's (lexicographic) order, so
/// equal batches always produce identical bytes.
pub fn encode_container(batch: &Batch, compression: Compression) -> Result<Vec<u8>, ContainerError> {
    batch_size(batch)?;
    let total: usize = batch.values().map(|a| a.data.len() + 64).sum();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + total);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    for (path, a) in batch {
        check_path(path)?;
        if element_count(&a.shape).map(|n| n * a.dtype.size() as u64) != Some(a.data.len() as u64) {
            return Err(ContainerError::Corruption(format!(
                "field {path}: data length does not match shape"
            )));
        }
        if a.shape.len() > u8::MAX as usize {
            return Err(ContainerError::Format(format!("field {path}: too many dimensions")));
        }
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(a.dtype.code());
        out.push(a.shape.len() as u8);
        for d in &a.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(compression.code());
        match compression {
            Compression::None => {
                out.extend_from_slice(&(a.data.len() as u64).to_le_bytes());
                out.extend_from_slice(&a.data);
            }
            Compression::Deflate { level } => {
                let mut enc = DeflateEncoder::new(Vec::new(), flate2::Compression::new(level.min(9)));
                enc.write_all(&a.data)
                    .and_then(|_| enc.finish())
                    .map(|z| {
                        out.extend_from_slice(&(z.len() as u64).to_le_bytes());
                        out.extend_from_slice(&z);
                    })
                    .map_err(|e| ContainerError::Format(format!("deflate failed: {e}")))?;
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ContainerError::Corruption(format!(
                "truncated {what} at offset {} ({} bytes wanted, {} left)",
                self.pos,
                n,
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses an LSC1 blob back into its batch, decompressing payloads.
pub fn decode_container(blob: &[u8]) -> Result<Batch, ContainerError> {
    let mut c = Cursor { buf: blob, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = c.u32("field count")?;
    let mut batch = Batch::new();
    for _ in 0..count {
        let path_len = c.u16("path length")? as usize;
        let path = std::str::from_utf8(c.take(path_len, "path")?)
            .map_err(|_| ContainerError::Format("field path is not UTF-8".into()))?
            .to_string();
        check_path(&path)?;
        let code = c.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| ContainerError::DType(format!("code {code}")))?;
        let ndim = c.u8("ndim")?;
        if ndim == 0 {
            return Err(ContainerError::Format(format!("field {path} has no dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(c.u64("dims")?);
        }
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .ok_or_else(|| ContainerError::Corruption(format!("field {path}: shape overflows")))?;
        let compression = c.u8("compression")?;
        let payload_len = c.u64("payload length")?;
        let payload_len = usize::try_from(payload_len)
            .map_err(|_| ContainerError::Corruption("payload length overflows".into()))?;
        let payload = c.take(payload_len, "payload")?;
        let data = match compression {
            0 => payload.to_vec(),
            1 => {
                let mut data = Vec::with_capacity(expected.min(1 << 24) as usize);
                DeflateDecoder::new(payload)
                    .take(expected.saturating_add(1))
                    .read_to_end(&mut data)
                    .map_err(|e| ContainerError::Corruption(format!("field {path}: inflate failed: {e}")))?;
                data
            }
            other => {
                return Err(ContainerError::Format(format!(
                    "field {path}: unknown compression code {other}"
                )))
            }
        };
        if data.len() as u64 != expected {
            return Err(ContainerError::Corruption(format!(
                "field {path}: payload holds {} bytes, shape needs {expected}",
                data.len()
            )));
        }
        if batch.contains_key(&path) {
            return Err(ContainerError::Format(format!("duplicate field path {path}")));
        }
        batch.insert(path, Array { dtype, shape, data });
    }
    if c.pos != blob.len() {
        return Err(ContainerError::Format(format!(
            "{} trailing bytes after last field",
            blob.len() - c.pos
        )));
    }
    batch_size(&batch).map_err(|e| match e {
        ContainerError::BatchShape { .. } => ContainerError::Format(e.to_string()),
        e => e,
    })?;
    Ok(batch)
}
