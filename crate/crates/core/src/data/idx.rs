//! IDX container: big-endian magic, big-endian u32 dimension sizes, raw bytes.

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

/// Parses an unsigned-byte IDX buffer whose magic must equal `magic`.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::format(
            0,
            format!(
                "file is {} bytes, too short for a magic number",
                bytes.len()
            ),
        ));
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if found != magic {
        return Err(Error::format(
            0,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(format!(
            "dimension header needs {header} bytes, file has {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(truncated(format!(
            "payload has {} bytes, dimensions {dims:?} require {expected}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::format(
            header + expected,
            "trailing bytes after payload",
        ));
    }
    Ok(IdxArray {
        dims,
        payload: payload.to_vec(),
    })
}

fn truncated(msg: String) -> Error {
    Error::io(
        "<buffer>",
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, msg),
    )
}

pub fn read_idx(path: &Path, magic: u32) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, magic).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Serializes an unsigned-byte IDX buffer.
pub fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let bytes = encode_idx(IMAGES_MAGIC, &[2, 2, 3], &[7; 12]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let arr = parse_idx(&bytes, IMAGES_MAGIC).unwrap();
        assert_eq!(arr.dims, vec![2, 2, 3]);
        assert_eq!(arr.payload, vec![7; 12]);
    }

    #[test]
    fn wrong_magic_at_offset_zero() {
        let bytes = encode_idx(IMAGES_MAGIC, &[1, 1, 1], &[0]);
        match parse_idx(&bytes, LABELS_MAGIC) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_idx(LABELS_MAGIC, &[5], &[1, 2, 3, 4, 5]);
        bytes.pop();
        assert!(matches!(
            parse_idx(&bytes, LABELS_MAGIC),
            Err(Error::Io { .. })
        ));
        assert!(matches!(
            parse_idx(&bytes[..6], LABELS_MAGIC),
            Err(Error::Io { .. })
        ));
        let mut long = encode_idx(LABELS_MAGIC, &[1], &[1]);
        long.push(0);
        assert!(matches!(
            parse_idx(&long, LABELS_MAGIC),
            Err(Error::Format { offset: 9, .. })
        ));
    }
}
