//! Portable noise container: an NPY v1.0 tensor plus a JSON sidecar.
//!
//! The tensor at `PATH` holds the batch in C order with shape `(k, d)` or
//! `(k, C, H, W)`; the sidecar at `PATH.json` records the spec, the random
//! stream, the generator family and a SHA-256 checksum of the tensor file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coupling::CouplingSpec;
use crate::error::CouplingError;
use crate::sampler::{
    sample, NoiseBatch, RandomStream, GAUSSIAN_TRANSFORM, RNG_FAMILY, RNG_VERSION,
};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checksum mismatch: sidecar records {expected}, tensor file hashes to {actual}")]
    Integrity { expected: String, actual: String },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

pub type Result<T, E = ContainerError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Dtype {
    #[default]
    #[serde(rename = "float32")]
    F32,
    #[serde(rename = "float64")]
    F64,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32" | "float32" => Some(Dtype::F32),
            "f64" | "float64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngInfo {
    pub family: String,
    pub version: String,
    pub gaussian_transform: String,
}

impl RngInfo {
    pub fn current() -> Self {
        RngInfo {
            family: RNG_FAMILY.into(),
            version: RNG_VERSION.into(),
            gaussian_transform: GAUSSIAN_TRANSFORM.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub spec: CouplingSpec,
    pub seed: u64,
    pub stream_id: u64,
    pub rng: RngInfo,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub created_unix_seconds: u64,
    pub checksum: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encodes `data` (C order) as an NPY v1.0 file image.
pub fn encode_npy(data: &[f64], shape: &[usize], dtype: Dtype) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
    let shape_txt = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_txt
    );
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.div_ceil(64) * 64 - unpadded));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + data.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match dtype {
        Dtype::F32 => data
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => data
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let tag = format!("'{key}':");
    let start = header
        .find(&tag)
        .ok_or_else(|| ContainerError::Format(format!("NPY header lacks {key}")))?;
    Ok(header[start + tag.len()..].trim_start())
}

/// Decodes an NPY v1.0 little-endian float tensor.
pub fn decode_npy(bytes: &[u8]) -> Result<(Vec<usize>, Dtype, Vec<f64>)> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(ContainerError::Format("not an NPY file".into()));
    }
    if bytes[6] != 1 {
        return Err(ContainerError::Format(format!(
            "unsupported NPY version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body = 10 + hlen;
    if bytes.len() < body {
        return Err(ContainerError::Format("truncated NPY header".into()));
    }
    let header = std::str::from_utf8(&bytes[10..body])
        .map_err(|_| ContainerError::Format("non-UTF-8 header".into()))?;

    let descr = header_value(header, "descr")?;
    let dtype = if descr.starts_with("'<f4'") {
        Dtype::F32
    } else if descr.starts_with("'<f8'") {
        Dtype::F64
    } else {
        return Err(ContainerError::Format(format!("unsupported dtype {descr}")));
    };
    if !header_value(header, "fortran_order")?.starts_with("False") {
        return Err(ContainerError::Format(
            "Fortran-ordered tensors are not supported".into(),
        ));
    }
    let shape_txt = header_value(header, "shape")?;
    let close = shape_txt
        .find(')')
        .ok_or_else(|| ContainerError::Format("bad shape".into()))?;
    let shape = shape_txt[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| ContainerError::Format(format!("bad shape entry {s}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let count: usize = shape.iter().product();
    let payload = &bytes[body..];
    if payload.len() != count * dtype.width() {
        return Err(ContainerError::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            count * dtype.width()
        )));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((shape, dtype, data))
}

fn resolve_shape(batch: &NoiseBatch, shape: Option<&[usize]>) -> Result<Vec<usize>> {
    let (k, d) = (batch.k(), batch.d());
    match shape {
        None => Ok(vec![k, d]),
        Some(trailing) => {
            let product: usize = trailing.iter().product();
            if trailing.is_empty() || product != d {
                return Err(ContainerError::Shape(format!(
                    "trailing shape {trailing:?} has {product} entries, d = {d}"
                )));
            }
            let mut full = vec![k];
            full.extend_from_slice(trailing);
            Ok(full)
        }
    }
}

fn tensor_bytes(batch: &NoiseBatch, shape: &[usize], dtype: Dtype) -> Vec<u8> {
    let flat: Vec<f64> = batch
        .vectors
        .row_iter()
        .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
        .collect();
    encode_npy(&flat, shape, dtype)
}

/// Writes the tensor at `path` and its sidecar at `path.json`.
/// `trailing_shape` splits `d` into e.g. `[C, H, W]`.
pub fn export_batch(
    batch: &NoiseBatch,
    path: &Path,
    dtype: Dtype,
    trailing_shape: Option<&[usize]>,
) -> Result<Sidecar> {
    let shape = resolve_shape(batch, trailing_shape)?;
    let bytes = tensor_bytes(batch, &shape, dtype);
    fs::write(path, &bytes).map_err(io_err(path))?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        spec: batch.spec.clone(),
        seed: batch.seed,
        stream_id: batch.stream_id,
        rng: RngInfo::current(),
        dtype,
        shape,
        created_unix_seconds: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        checksum: sha256_hex(&bytes),
    };
    let side = sidecar_path(path);
    let json =
        serde_json::to_vec_pretty(&sidecar).map_err(|e| ContainerError::Format(e.to_string()))?;
    fs::write(&side, json).map_err(io_err(&side))?;
    Ok(sidecar)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedContainer {
    pub batch: NoiseBatch,
    pub sidecar: Sidecar,
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(io_err(&side))?;
    let sidecar: Sidecar = serde_json::from_slice(&text)
        .map_err(|e| ContainerError::Format(format!("sidecar: {e}")))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(ContainerError::Format(format!(
            "unsupported format_version {}",
            sidecar.format_version
        )));
    }
    Ok(sidecar)
}

/// Loads and verifies a container: checksum first, then dtype and shape
/// against the sidecar and spec.
pub fn load_container(path: &Path) -> Result<LoadedContainer> {
    let sidecar = read_sidecar(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let actual = sha256_hex(&bytes);
    if actual != sidecar.checksum {
        return Err(ContainerError::Integrity {
            expected: sidecar.checksum.clone(),
            actual,
        });
    }
    let (shape, dtype, data) = decode_npy(&bytes)?;
    if dtype != sidecar.dtype || shape != sidecar.shape {
        return Err(ContainerError::Shape(format!(
            "tensor is {dtype:?} {shape:?}, sidecar records {:?} {:?}",
            sidecar.dtype, sidecar.shape
        )));
    }
    let (k, d) = (sidecar.spec.k(), sidecar.spec.d());
    if shape.first() != Some(&k) || shape[1..].iter().product::<usize>() != d || shape.len() < 2 {
        return Err(ContainerError::Shape(format!(
            "shape {shape:?} does not fit k = {k}, d = {d}"
        )));
    }
    let vectors = DMatrix::from_row_slice(k, d, &data);
    let batch = NoiseBatch::new(
        vectors,
        sidecar.spec.clone(),
        RandomStream::new(sidecar.seed, sidecar.stream_id),
    )?;
    Ok(LoadedContainer { batch, sidecar })
}

/// Re-samples from the sidecar's spec and stream and encodes the result the
/// same way. Returns the freshly encoded tensor bytes.
pub fn replay_tensor(sidecar: &Sidecar) -> Result<Vec<u8>> {
    if sidecar.rng != RngInfo::current() {
        return Err(ContainerError::Format(format!(
            "container was written with generator {:?}, this build uses {:?}",
            sidecar.rng,
            RngInfo::current()
        )));
    }
    let batch = sample(
        &sidecar.spec,
        RandomStream::new(sidecar.seed, sidecar.stream_id),
    )?;
    Ok(tensor_bytes(&batch, &sidecar.shape, sidecar.dtype))
}

/// True when re-sampling from the sidecar reproduces the tensor file byte for byte.
pub fn replay_matches(path: &Path) -> Result<bool> {
    let sidecar = read_sidecar(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(replay_tensor(&sidecar)? == bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_header_layout() {
        let bytes = encode_npy(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], Dtype::F64);
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes[10 + hlen - 1], b'\n');
        let header = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(header.starts_with("{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }"));
        let (shape, dtype, data) = decode_npy(&bytes).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_npy(b"hello world").is_err());
        let mut bytes = encode_npy(&[1.0, 2.0], &[1, 2], Dtype::F32);
        bytes.pop();
        assert!(decode_npy(&bytes).is_err());
    }

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn round_trip_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CouplingSpec::repulsive(3, 16).unwrap();
        let batch = sample(&spec, RandomStream::new(7, 0)).unwrap();
        for dtype in [Dtype::F32, Dtype::F64] {
            let path = dir.path().join(format!("n_{dtype:?}.npy"));
            let side = export_batch(&batch, &path, dtype, None).unwrap();
            assert_eq!(side.shape, vec![3, 16]);
            let loaded = load_container(&path).unwrap();
            let expected = match dtype {
                Dtype::F64 => batch.vectors.clone(),
                Dtype::F32 => batch.vectors.map(|v| v as f32 as f64),
            };
            assert_eq!(loaded.batch.vectors, expected);
            assert_eq!(loaded.sidecar, side);
            assert!(replay_matches(&path).unwrap());
        }
    }

    #[test]
    fn latent_shape_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CouplingSpec::repulsive(3, 4 * 8 * 8).unwrap();
        let batch = sample(&spec, RandomStream::new(1, 0)).unwrap();
        let path = dir.path().join("lat.npy");
        let side = export_batch(&batch, &path, Dtype::F32, Some(&[4, 8, 8])).unwrap();
        assert_eq!(side.shape, vec![3, 4, 8, 8]);
        assert_eq!(load_container(&path).unwrap().batch.d(), 256);
        assert!(matches!(
            export_batch(&batch, &path, Dtype::F32, Some(&[4, 8, 7])),
            Err(ContainerError::Shape(_))
        ));
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CouplingSpec::independent(2, 4).unwrap();
        let batch = sample(&spec, RandomStream::new(1, 0)).unwrap();
        let path = dir.path().join("t.npy");
        export_batch(&batch, &path, Dtype::F64, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_container(&path),
            Err(ContainerError::Integrity { .. })
        ));
    }

    #[test]
    fn missing_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_container(&dir.path().join("nope.npy")),
            Err(ContainerError::Io { .. })
        ));
    }
}
