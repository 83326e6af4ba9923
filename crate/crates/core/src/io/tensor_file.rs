//! MDTB tensor records: encoding, decoding, and file round trips.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{MdError, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"MDTB";
pub const TENSOR_VERSION: u32 = 1;

/// A decoded MDTB record. Numeric tensors keep their stored precision;
/// `U32` carries label vectors and other integer payloads.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorRecord {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
    U32 { dims: Vec<usize>, data: Vec<u32> },
}

impl TensorRecord {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> TensorRecord {
        match S::DTYPE {
            // Same-type casts are exact copies; f32 values survive a trip
            // through f64 bit-for-bit.
            Dtype::Single => TensorRecord::Single(t.cast::<f32>()),
            Dtype::Double => TensorRecord::Double(t.cast::<f64>()),
            Dtype::Uint32 => unreachable!("no scalar tensor carries u32"),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorRecord::Single(_) => Dtype::Single,
            TensorRecord::Double(_) => Dtype::Double,
            TensorRecord::U32 { .. } => Dtype::Uint32,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            TensorRecord::Single(t) => t.dims(),
            TensorRecord::Double(t) => t.dims(),
            TensorRecord::U32 { dims, .. } => dims,
        }
    }

    /// Extract a numeric tensor, requiring the stored dtype to match `S`
    /// exactly. `what` names the record in error messages.
    pub fn to_tensor<S: Scalar>(&self, what: &str) -> Result<Tensor<S>> {
        if self.dtype() != S::DTYPE {
            return Err(MdError::format(
                what,
                format!("dtype is {:?}, expected {:?}", self.dtype(), S::DTYPE),
            ));
        }
        Ok(match self {
            TensorRecord::Single(t) => t.cast::<S>(),
            TensorRecord::Double(t) => t.cast::<S>(),
            TensorRecord::U32 { .. } => unreachable!(),
        })
    }

    pub fn to_labels(&self, what: &str) -> Result<Vec<u32>> {
        match self {
            TensorRecord::U32 { data, .. } => Ok(data.clone()),
            other => Err(MdError::format(
                what,
                format!("dtype is {:?}, expected Uint32", other.dtype()),
            )),
        }
    }

    /// Payload size in bytes (header excluded).
    pub fn payload_bytes(&self) -> usize {
        let n = match self {
            TensorRecord::Single(t) => t.len(),
            TensorRecord::Double(t) => t.len(),
            TensorRecord::U32 { data, .. } => data.len(),
        };
        n * self.dtype().size()
    }
}

/// Append the full MDTB encoding of `rec` (header + payload) to `out`.
pub fn encode_record(rec: &TensorRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    let dims = rec.dims();
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(rec.dtype().code());
    match rec {
        TensorRecord::Single(t) => {
            for &v in t.data() {
                v.write_le(out);
            }
        }
        TensorRecord::Double(t) => {
            for &v in t.data() {
                v.write_le(out);
            }
        }
        TensorRecord::U32 { data, .. } => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
    match end {
        Some(end) => {
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        }
        None => Err(MdError::format(
            what,
            format!(
                "truncated: wanted {n} bytes at offset {pos}, have {}",
                bytes.len()
            ),
        )),
    }
}

fn take_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(
        take(bytes, pos, 4, what)?.try_into().unwrap(),
    ))
}

/// Decode one MDTB record starting at `*pos`, advancing `*pos` past it.
/// `what` names the source (a path or checkpoint entry) for errors.
pub fn decode_record(bytes: &[u8], pos: &mut usize, what: &str) -> Result<TensorRecord> {
    let magic = take(bytes, pos, 4, what)?;
    if magic != TENSOR_MAGIC {
        return Err(MdError::format(
            what,
            format!("bad magic {:02x?}, expected \"MDTB\"", magic),
        ));
    }
    let version = take_u32(bytes, pos, what)?;
    if version != TENSOR_VERSION {
        return Err(MdError::format(
            what,
            format!("unsupported version {version}, expected {TENSOR_VERSION}"),
        ));
    }
    let rank = take_u32(bytes, pos, what)? as usize;
    if rank == 0 || rank > 4 {
        return Err(MdError::format(
            what,
            format!("rank {rank} out of range 1..=4"),
        ));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut len: usize = 1;
    for _ in 0..rank {
        let d = take_u32(bytes, pos, what)? as usize;
        if d == 0 {
            return Err(MdError::format(what, "zero dimension"));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| MdError::format(what, "dimension product overflows"))?;
        dims.push(d);
    }
    let code = take(bytes, pos, 1, what)?[0];
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| MdError::format(what, format!("unknown dtype code {code}")))?;
    let payload = take(bytes, pos, len * dtype.size(), what)?;
    Ok(match dtype {
        Dtype::Single => {
            let data = payload.chunks_exact(4).map(f32::read_le).collect();
            TensorRecord::Single(Tensor::new(&dims, data)?)
        }
        Dtype::Double => {
            let data = payload.chunks_exact(8).map(f64::read_le).collect();
            TensorRecord::Double(Tensor::new(&dims, data)?)
        }
        Dtype::Uint32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorRecord::U32 { dims, data }
        }
    })
}

/// Write `bytes` to `path` atomically: a temp file in the same directory
/// is written, flushed, and renamed over the destination.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{stem}.tmp-{}", std::process::id()));
    let tmp_err = |e: std::io::Error| MdError::io(tmp.display().to_string(), e);
    let mut f = fs::File::create(&tmp).map_err(tmp_err)?;
    f.write_all(bytes).map_err(tmp_err)?;
    f.sync_all().map_err(tmp_err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| MdError::io(path.display().to_string(), e))
}

pub fn save_record(path: &Path, rec: &TensorRecord) -> Result<()> {
    let mut buf = Vec::with_capacity(rec.payload_bytes() + 64);
    encode_record(rec, &mut buf);
    atomic_write(path, &buf)
}

pub fn load_record(path: &Path) -> Result<TensorRecord> {
    let bytes = fs::read(path).map_err(|e| MdError::io(path.display().to_string(), e))?;
    let what = path.display().to_string();
    let mut pos = 0;
    let rec = decode_record(&bytes, &mut pos, &what)?;
    if pos != bytes.len() {
        return Err(MdError::format(
            &what,
            format!("{} trailing bytes after record", bytes.len() - pos),
        ));
    }
    Ok(rec)
}

pub fn save_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    save_record(path, &TensorRecord::from_tensor(t))
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    load_record(path)?.to_tensor::<S>(&path.display().to_string())
}

pub fn save_labels(path: &Path, labels: &[u32]) -> Result<()> {
    if labels.is_empty() {
        return Err(MdError::Config("cannot save an empty label vector".into()));
    }
    let rec = TensorRecord::U32 {
        dims: vec![labels.len()],
        data: labels.to_vec(),
    };
    save_record(path, &rec)
}

pub fn load_labels(path: &Path) -> Result<Vec<u32>> {
    load_record(path)?.to_labels(&path.display().to_string())
}
