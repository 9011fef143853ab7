//! `DSGF` feature blobs: magic, u16 version, then w, n, d as u32, then `w·n·d` f32 values,
//! all little-endian, frame-major and patch-minor.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const BLOB_MAGIC: &[u8; 4] = b"DSGF";
pub const BLOB_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4;

/// Decoded blob header and `(w·n) × d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlob {
    pub window: usize,
    pub patches: usize,
    pub features: Tensor2,
}

impl FeatureBlob {
    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

pub fn encode_blob(window: usize, patches: usize, features: &Tensor2) -> Result<Vec<u8>> {
    if features.rows() != window * patches {
        return Err(Error::shape("encode_blob", format!("{} rows for {window}x{patches} nodes", features.rows())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * features.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    for v in [window, patches, features.cols()] {
        let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("blob dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<FeatureBlob> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("blob is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(Error::format(path, "missing DSGF magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BLOB_VERSION {
        return Err(Error::format(path, format!("unsupported blob version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (w, n, d) = (dim(0), dim(1), dim(2));
    let expected = w
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::format(path, "blob dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {expected} for w={w} n={n} d={d}", payload.len()),
        ));
    }
    let data: Vec<f64> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "blob contains non-finite values"));
    }
    Ok(FeatureBlob { window: w, patches: n, features: Tensor2::from_vec(w * n, d, data)? })
}

pub fn write_blob(path: &Path, window: usize, patches: usize, features: &Tensor2) -> Result<()> {
    let bytes = encode_blob(window, patches, features)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<FeatureBlob> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes, path)
}

/// Rounds every entry to the nearest f32, the precision blobs store.
pub fn round_to_f32(t: &Tensor2) -> Tensor2 {
    t.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor2 {
        round_to_f32(&Tensor2::from_fn(6, 3, |i, j| (i as f64 - 2.5) * 0.3 + j as f64 * 1e-3))
    }

    #[test]
    fn header_layout() {
        let bytes = encode_blob(2, 3, &sample()).unwrap();
        assert_eq!(&bytes[..4], b"DSGF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[3, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 18 + 6 * 3 * 4);
        assert_eq!(&bytes[18..22], &(sample()[(0, 0)] as f32).to_le_bytes());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let f = sample();
        let bytes = encode_blob(2, 3, &f).unwrap();
        let blob = decode_blob(&bytes, Path::new("x")).unwrap();
        assert_eq!((blob.window, blob.patches, blob.dim()), (2, 3, 3));
        assert_eq!(blob.features, f);
        assert_eq!(encode_blob(2, 3, &blob.features).unwrap(), bytes);
    }

    #[test]
    fn truncated_blob_names_file() {
        let mut bytes = encode_blob(2, 3, &sample()).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = decode_blob(&bytes, Path::new("clips/c7.dsgf")).unwrap_err().to_string();
        assert!(err.contains("clips/c7.dsgf"), "{err}");
        assert!(err.contains("expected"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_blob(1, 1, &Tensor2::zeros(1, 1)).unwrap();
        bytes[4] = 9;
        assert!(decode_blob(&bytes, Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(decode_blob(&bytes, Path::new("x")).is_err());
    }
}
