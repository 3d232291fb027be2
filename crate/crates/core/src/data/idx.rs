//! The IDX container: two zero bytes, a type code, a dimension count, the
//! dimensions as big-endian `u32`, then big-endian values.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Data(format!("IDX byte offset {offset}: {}", msg.into()))
}

fn element_size(code: u8) -> Option<usize> {
    match code {
        0x08 | 0x09 => Some(1),
        0x0B => Some(2),
        0x0C | 0x0D => Some(4),
        0x0E => Some(8),
        _ => None,
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(err(0, "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("magic must start with two zero bytes, got {:02x}{:02x}", bytes[0], bytes[1])));
    }
    let code = bytes[2];
    let size = element_size(code).ok_or_else(|| err(2, format!("unknown type code 0x{code:02x}")))?;
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("truncated header: {ndims} dimensions need {header} bytes")));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * size;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("dims {dims:?} need {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let body = &bytes[header..];
    let values = body
        .chunks_exact(size)
        .map(|c| match code {
            0x08 => f64::from(c[0]),
            0x09 => f64::from(c[0] as i8),
            0x0B => f64::from(i16::from_be_bytes([c[0], c[1]])),
            0x0C => f64::from(i32::from_be_bytes(c.try_into().expect("4 bytes"))),
            0x0D => f64::from(f32::from_be_bytes(c.try_into().expect("4 bytes"))),
            _ => f64::from_be_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(IdxArray { dims, values })
}

/// Encodes unsigned bytes (type code 0x08).
pub fn encode_idx_u8(dims: &[usize], values: &[u8]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), values.len(), "dims do not match data");
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(values);
    out
}
