//! `.npt` raw tensor files: `"NPT1"`, `u32` rank, `u32` extents, then
//! row-major `f32` payload. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const NPT_MAGIC: &[u8; 4] = b"NPT1";

pub fn encode_npt(array: &Array) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * array.rank() + 4 * array.numel());
    out.extend_from_slice(NPT_MAGIC);
    out.extend_from_slice(&(array.rank() as u32).to_le_bytes());
    for &e in array.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in array.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_npt(bytes: &[u8], path: &Path) -> Result<Array> {
    let fail = |detail: &str| Error::format(path, detail);
    let mut words = bytes
        .get(4..)
        .ok_or_else(|| fail("truncated header"))?
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]]);
    if &bytes[..4] != NPT_MAGIC {
        return Err(fail("bad magic, expected NPT1"));
    }
    let rank = u32::from_le_bytes(words.next().ok_or_else(|| fail("missing rank"))?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(words.next().ok_or_else(|| fail("missing extent"))?) as usize);
    }
    let n: usize = shape.iter().product();
    let header = 4 * (2 + rank);
    if bytes.len() != header + 4 * n {
        return Err(fail(&format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len().saturating_sub(header),
            4 * n
        )));
    }
    let data = words.take(n).map(|w| f32::from_le_bytes(w) as f64).collect();
    Array::new(shape, data)
}

pub fn read_npt(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_npt(&bytes, path)
}

pub fn write_npt(path: &Path, array: &Array) -> Result<()> {
    fs::write(path, encode_npt(array)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let a = Array::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let bytes = encode_npt(&a);
        assert_eq!(&bytes[..4], b"NPT1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-0.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let p = Path::new("x.npt");
        assert!(matches!(decode_npt(b"NPT", p), Err(Error::Format { .. })));
        assert!(matches!(
            decode_npt(b"NPT2\0\0\0\0", p),
            Err(Error::Format { .. })
        ));
        let mut bytes = encode_npt(&Array::vector(vec![1.0, 2.0]));
        bytes.pop();
        assert!(matches!(decode_npt(&bytes, p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in proptest::collection::vec(-1e3f32..1e3, 64),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = seed.iter().cycle().take(n).map(|&v| v as f64).collect();
            let a = Array::new(dims, data).unwrap();
            let back = decode_npt(&encode_npt(&a), Path::new("mem")).unwrap();
            prop_assert!(back.bit_eq(&a));
        }
    }
}
