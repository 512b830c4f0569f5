//! The RSAV volume file format.
//!
//! ```text
//! "RSAV"                      4 bytes
//! version = 1                 u32 LE
//! element width (4 | 8)       u8
//! rank (1..=5)                u8
//! extents                     rank × u64 LE
//! payload                     row-major, little-endian elements
//! CRC-32 of payload           u32 LE
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{check_shape, Element, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"RSAV";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(tensor: &Tensor<T>) -> Vec<u8> {
    let payload_len = tensor.len() * T::WIDTH as usize;
    let mut out = Vec::with_capacity(10 + 8 * tensor.rank() + payload_len + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::WIDTH);
    out.push(tensor.rank() as u8);
    for &extent in tensor.shape() {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    let payload_start = out.len();
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Header fields of an encoded volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub element_width: u8,
    pub shape: Vec<usize>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let slice = self.bytes.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Validates framing and checksum; returns the header and the payload bytes.
fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let element_width = r.u8()?;
    if element_width != 4 && element_width != 8 {
        return Err(Error::UnsupportedElementWidth(element_width));
    }
    let rank = r.u8()? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::UnsupportedRank(rank));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let extent = usize::try_from(r.u64()?).map_err(|_| Error::TruncatedFile)?;
        shape.push(extent);
    }
    let len = check_shape(&shape)?;
    let payload_len = len
        .checked_mul(element_width as usize)
        .ok_or(Error::TruncatedFile)?;
    let payload = r.take(payload_len)?;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - r.pos));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok((
        Header {
            element_width,
            shape,
        },
        payload,
    ))
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    split(bytes).map(|(h, _)| h)
}

/// Decodes a volume whose element width matches `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (header, payload) = split(bytes)?;
    if header.element_width != T::WIDTH {
        return Err(Error::ElementWidthMismatch {
            expected: T::WIDTH,
            found: header.element_width,
        });
    }
    let data = payload
        .chunks_exact(T::WIDTH as usize)
        .map(T::read_le)
        .collect();
    Tensor::new(&header.shape, data)
}

/// Decodes a volume of either width, converting to `T`.
pub fn decode_as<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    match decode_header(bytes)?.element_width {
        4 => decode::<f32>(bytes).map(|t| t.cast()),
        _ => decode::<f64>(bytes).map(|t| t.cast()),
    }
}

pub fn write_volume<T: Element>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_volume<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap()
    }

    #[test]
    fn layout_is_exact() {
        let t = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[0..4], b"RSAV");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 8);
        assert_eq!(bytes[9], 1);
        assert_eq!(&bytes[10..18], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[18..26], &1.0f64.to_le_bytes());
        assert_eq!(
            &bytes[26..30],
            &crc32fast::hash(&1.0f64.to_le_bytes()).to_le_bytes()
        );
        assert_eq!(bytes.len(), 30);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rsav");
        write_volume(&path, &sample()).unwrap();
        let back: Tensor<f32> = read_volume(&path).unwrap();
        assert_eq!(back.shape(), sample().shape());
        for (a, b) in back.data().iter().zip(sample().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_files() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode::<f32>(&bad),
            Err(Error::UnsupportedVersion(2))
        ));

        assert!(matches!(
            decode::<f32>(&bytes[..bytes.len() - 9]),
            Err(Error::TruncatedFile)
        ));
        assert!(matches!(
            decode::<f32>(&bytes[..2]),
            Err(Error::TruncatedFile)
        ));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 0x40;
        assert!(matches!(
            decode::<f32>(&bad),
            Err(Error::ChecksumMismatch { .. })
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode::<f32>(&bad), Err(Error::TrailingBytes(1))));

        assert!(matches!(
            decode::<f64>(&bytes),
            Err(Error::ElementWidthMismatch {
                expected: 8,
                found: 4
            })
        ));
        assert_eq!(decode_as::<f64>(&bytes).unwrap().shape(), &[2, 3]);
    }
}
