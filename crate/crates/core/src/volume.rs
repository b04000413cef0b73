//! `VOL1` volume files: a 32-byte header (magic, `C,D,H,W` as little-endian `u32`,
//! 12 reserved zero bytes) followed by little-endian `f32` voxels in row-major order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VOL1";
pub const HEADER_LEN: usize = 32;

pub fn encode(volume: &Tensor) -> Result<Vec<u8>> {
    let s = volume.shape();
    if s.len() != 4 {
        return Err(Error::shape("volume", format!("expected [C,D,H,W], got {s:?}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(MAGIC);
    for &d in s {
        let d = u32::try_from(d).map_err(|_| Error::shape("volume", format!("extent {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&[0u8; 12]);
    for &v in volume.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fmt = |d: String| Error::Format { path: origin.to_path_buf(), detail: d };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(fmt("missing VOL1 header".into()));
    }
    let shape: Vec<usize> = (0..4)
        .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(fmt(format!("shape {shape:?} needs {} data bytes, found {}", 4 * n, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Tensor::new(shape, data).map_err(|e| fmt(e.to_string()))
}

pub fn write(path: &Path, volume: &Tensor) -> Result<()> {
    io::write_atomic(path, &encode(volume)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&io::read(path)?, path)
}

/// Rounds every voxel to `f32`, giving the values a file round trip would produce.
pub fn quantize(volume: &Tensor) -> Tensor {
    volume.map(|v| v as f32 as f64)
}

/// In-memory volumes keyed by scan reference.
#[derive(Debug, Clone, Default)]
pub struct VolumeSet {
    volumes: BTreeMap<String, Tensor>,
}

impl VolumeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, scan_ref: impl Into<String>, volume: Tensor) {
        self.volumes.insert(scan_ref.into(), volume);
    }

    pub fn get(&self, scan_ref: &str) -> Result<&Tensor> {
        self.volumes.get(scan_ref).ok_or_else(|| Error::UnknownScan(scan_ref.to_string()))
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Loads each reference, resolved relative to `base`.
    pub fn load<'a>(base: &Path, refs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = VolumeSet::new();
        for r in refs {
            if !set.volumes.contains_key(r) {
                let path: PathBuf = base.join(r);
                set.insert(r, read(&path)?);
            }
        }
        Ok(set)
    }
}

impl FromIterator<(String, Tensor)> for VolumeSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        VolumeSet { volumes: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let v = Tensor::new(vec![1, 2, 1, 3], vec![0.5, -1.0, 2.0, 0.0, 1.25, 3.0]).unwrap();
        let b = encode(&v).unwrap();
        assert_eq!(b.len(), 32 + 24);
        assert_eq!(&b[..4], b"VOL1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &3u32.to_le_bytes());
        assert_eq!(&b[20..32], &[0u8; 12]);
        assert_eq!(&b[32..36], &0.5f32.to_le_bytes());
        assert_eq!(decode(&b, Path::new("x")).unwrap(), v);
    }

    #[test]
    fn rejects_truncated_or_foreign() {
        let v = Tensor::zeros(&[1, 2, 2, 2]);
        let b = encode(&v).unwrap();
        assert!(decode(&b[..b.len() - 1], Path::new("x")).is_err());
        assert!(decode(b"NIFTI", Path::new("x")).is_err());
    }
}
