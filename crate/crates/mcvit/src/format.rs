//! The repo-wide raw-tensor file format and atomic writes.
//!
//! A file is one ASCII header line
//!
//! ```text
//! MCVT1 f64 <rank> <dim0> <dim1> ...\n
//! ```
//!
//! followed by the elements as little-endian 64-bit floats in row-major
//! order. Round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use mcvit_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &str = "MCVT1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut header = String::from(MAGIC);
    header.push_str(" f64 ");
    header.push_str(&t.shape().len().to_string());
    for d in t.shape() {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(t.len() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::io("tensor file has no header line"))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| CliError::io("tensor header is not UTF-8"))?;
    let mut fields = header.split_ascii_whitespace();
    match fields.next() {
        Some(MAGIC) => {}
        other => {
            return Err(CliError::io(format!(
                "bad magic {other:?}, expected {MAGIC}"
            )))
        }
    }
    match fields.next() {
        Some("f64") => {}
        other => return Err(CliError::io(format!("unsupported dtype {other:?}"))),
    }
    let rank: usize = fields
        .next()
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| CliError::io("missing rank"))?;
    let shape: Vec<usize> = fields
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| CliError::io(format!("bad dimension {f:?}")))
        })
        .collect::<Result<_>>()?;
    if shape.len() != rank {
        return Err(CliError::io(format!(
            "header declares rank {rank} but lists {} dims",
            shape.len()
        )));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[newline + 1..];
    if payload.len() != count * 8 {
        return Err(CliError::io(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * 8
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(CliError::from)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

/// Write via a temporary file and rename, so failures never leave partial
/// output at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => String::from("tmp"),
    });
    let result = (|| -> Result<()> {
        let mut file = fs::File::create(&tmp)
            .map_err(|e| CliError::io(format!("{}: {e}", tmp.display())))?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcvit_core::SplitRng;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let bytes = encode_tensor(&t);
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[..header_end], b"MCVT1 f64 2 2 3");
        assert_eq!(bytes.len(), header_end + 1 + 6 * 8);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = SplitRng::new(5);
        for shape in [vec![7], vec![3, 4], vec![2, 3, 2, 2]] {
            let t = rng.normal_tensor(shape, 1.0);
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            assert_eq!(back.shape(), t.shape());
            let got: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes.pop();
        assert!(decode_tensor(&bytes).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(decode_tensor(b"NOPE f64 1 1\n12345678").is_err());
    }
}
