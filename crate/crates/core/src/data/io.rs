//! Tensor files: the five bytes `SSTF1`, a `u8` rank, little-endian `u32`
//! extents, then the row-major little-endian `f64` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 5] = b"SSTF1";

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape().len()).map_err(|_| {
        Error::invalid(format!(
            "rank {} does not fit the tensor format",
            t.shape().len()
        ))
    })?;
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::invalid(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn tensor_from_bytes(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    if bytes.len() < 5 || &bytes[..5] != TENSOR_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(5)]).into_owned();
        return Err(Error::format(
            origin,
            format!("bad magic {found:?}: expected `SSTF1` tensor header"),
        ));
    }
    let rank = *bytes
        .get(5)
        .ok_or_else(|| Error::format(origin, "truncated header: missing rank byte"))?
        as usize;
    let header = 6 + 4 * rank;
    let extents = bytes
        .get(6..header)
        .ok_or_else(|| Error::format(origin, "truncated header: missing extents"))?;
    let shape: Vec<usize> = extents
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * 8 {
        return Err(Error::format(
            origin,
            format!(
                "length mismatch: header shape {shape:?} needs {count} values but payload holds {} bytes ({} values)",
                payload.len(),
                payload.len() / 8
            ),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor_to_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sstf");
        let t = Tensor::from_fn(&[3, 16, 16], |i| ((i * 31 % 97) as f64).sqrt() - 4.0);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn wrong_magic_is_named() {
        let mut bytes = tensor_to_bytes(&Tensor::zeros(&[2])).unwrap();
        bytes[..5].copy_from_slice(b"NOPE!");
        let err = tensor_from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn short_payload_is_a_length_error() {
        let mut bytes = tensor_to_bytes(&Tensor::zeros(&[100])).unwrap();
        bytes.truncate(bytes.len() - 8);
        let err = tensor_from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
        assert!(err.to_string().contains("99 values"), "{err}");
    }

    proptest! {
        #[test]
        fn bytes_round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&shape, |i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2));
            let back = tensor_from_bytes(&tensor_to_bytes(&t).unwrap(), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
