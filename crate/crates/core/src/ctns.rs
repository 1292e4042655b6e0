//! CTNS: a flat container of named f32 tensors.
//!
//! ```text
//! "CTNS"            4 bytes magic
//! version           u8, always 1
//! count             u32 LE
//! count × {
//!   name_len        u16 LE
//!   name            UTF-8, name_len bytes
//!   rank            u8 (0..=3)
//!   dims            rank × u32 LE
//!   payload         product(dims) × f32 LE, row-major
//! }
//! ```
//!
//! The file must end exactly where the last payload ends. Names are unique.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"CTNS";
pub const VERSION: u8 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Invalid("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Invalid(format!("duplicate tensor name `{name}`")));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Invalid(format!("tensor name too long: {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("`{name}`: dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: {what} needs {n} bytes, {remaining} remain"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"CTNS\"")));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("tensor count")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..count {
        let name_at = cur.pos as u64;
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format(name_at + 2, format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(name_at, format!("duplicate tensor name `{name}`")));
        }
        let rank_at = cur.pos as u64;
        let rank = cur.u8("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::format(rank_at, format!("tensor `{name}`: rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = cur.pos as u64;
            let d = cur.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, format!("tensor `{name}`: zero dimension")));
            }
            dims.push(d);
        }
        let payload_at = cur.pos;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(payload_at as u64, format!("tensor `{name}`: dims {dims:?} overflow")))?
            / 4;
        let remaining = bytes.len() - payload_at;
        if numel * 4 > remaining {
            return Err(Error::format(
                payload_at as u64,
                format!(
                    "tensor `{name}`: dims {dims:?} imply {} payload bytes, {remaining} remain",
                    numel * 4
                ),
            ));
        }
        let payload = cur.take(numel * 4, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::format(payload_at as u64, format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if cur.pos != bytes.len() {
        let last = out.last().map_or("<header>".to_string(), |(n, _)| format!("`{n}`"));
        return Err(Error::format(
            cur.pos as u64,
            format!(
                "{} trailing bytes after tensor {last}: payload does not match header dims",
                bytes.len() - cur.pos
            ),
        ));
    }
    Ok(out)
}

pub fn write_ctns(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ctns(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Looks up a tensor by name.
pub fn take_named(tensors: &mut NamedTensors, name: &str) -> Option<Tensor> {
    let i = tensors.iter().position(|(n, _)| n == name)?;
    Some(tensors.remove(i).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        vec![
            ("a".into(), Tensor::matrix(1, 1, vec![3.5]).unwrap()),
            ("b".into(), Tensor::new(vec![2, 1, 3], (0..6).map(|i| i as f32 * -0.25).collect()).unwrap()),
            ("s".into(), Tensor::scalar(7.0).unwrap()),
        ]
    }

    #[test]
    fn single_value_round_trip() {
        let one = vec![("x".to_string(), Tensor::matrix(1, 1, vec![3.5]).unwrap())];
        let back = decode(&encode(&one).unwrap()).unwrap();
        assert_eq!(back[0].1.data(), &[3.5]);
        assert_eq!(back[0].1.shape(), &[1, 1]);
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = encode(&sample()[..1]).unwrap();
        let mut want = b"CTNS".to_vec();
        want.push(1);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'a');
        want.push(2);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&3.5f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_at_offset_zero() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_mid_payload_reports_payload_offset() {
        let bytes = encode(&sample()[..1]).unwrap();
        // header: 4 magic + 1 version + 4 count + 2 len + 1 name + 1 rank + 8 dims
        let payload_at = 4 + 1 + 4 + 2 + 1 + 1 + 8;
        let cut = &bytes[..payload_at + 2];
        match decode(cut) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, payload_at as u64);
                assert!(msg.contains("`a`"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dims_payload_mismatch_names_tensor() {
        let mut bytes = encode(&sample()[..1]).unwrap();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn rejects_duplicate_names() {
        let t = Tensor::scalar(1.0).unwrap();
        assert!(encode(&[("x".into(), t.clone()), ("x".into(), t)]).is_err());
    }

    #[test]
    fn bad_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }
}
