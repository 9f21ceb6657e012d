//! Named-tensor archive (`.tpn`).
//!
//! All integers are little-endian.
//!
//! ```text
//! magic    4 bytes   "TPNA"
//! version  u32       1
//! count    u32       number of entries
//! entry    * count:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8      1 = f32 little-endian
//!   role     u8      0 = weight, 1 = bias
//!   ndim     u8, dims u64 * ndim
//!   nbytes   u64, raw element bytes
//! sha256   32 bytes  digest of every preceding byte
//! ```
//!
//! Entries keep the store's order; values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamSpec, ParamStore, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPNA";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 4 + store.len() * 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(match p.role {
            Role::Weight => 0,
            Role::Bias => 1,
        });
        out.push(p.tensor.rank() as u8);
        for &d in p.tensor.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&((p.tensor.len() * 4) as u64).to_le_bytes());
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decode an archive; `what` names the source in checksum errors.
pub fn decode(bytes: &[u8], what: &str) -> Result<ParamStore<f32>> {
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{what} is not a tensor archive")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(what.to_string()));
    }
    let mut cur = Cursor { buf: body, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("{name}: unsupported dtype tag {dtype}")));
        }
        let role = match cur.u8()? {
            0 => Role::Weight,
            1 => Role::Bias,
            r => return Err(Error::Format(format!("{name}: unknown role tag {r}"))),
        };
        let ndim = cur.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let nbytes = cur.u64()? as usize;
        let raw = cur.take(nbytes)?;
        if !nbytes.is_multiple_of(4) {
            return Err(Error::Format(format!(
                "{name}: {nbytes} bytes is not a whole number of f32"
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        store.insert(name, tensor, role)?;
    }
    if cur.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {count} entries",
            body.len() - cur.pos
        )));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::file(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Load and verify that exactly the declared tensors are present.
pub fn load_params_checked(path: &Path, specs: &[ParamSpec]) -> Result<ParamStore<f32>> {
    let store = load_params(path)?;
    store.check_against(specs)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "stage.conv.weight",
            Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * -0.5 + f32::EPSILON),
            Role::Weight,
        )
        .unwrap();
        s.insert(
            "stage.conv.bias",
            Tensor::new(vec![2], vec![-0.0, f32::MIN_POSITIVE]).unwrap(),
            Role::Bias,
        )
        .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = decode(&encode(&s), "mem").unwrap();
        assert_eq!(back, s);
        assert_eq!(
            back.tensor("stage.conv.bias").unwrap().data()[0].to_bits(),
            (-0.0f32).to_bits()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample());
        bytes[20] ^= 0x40;
        assert!(matches!(decode(&bytes, "mem"), Err(Error::Checksum(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        let n = bytes.len();
        let digest = Sha256::digest(&bytes[..n - 32]);
        bytes[n - 32..].copy_from_slice(&digest);
        assert!(matches!(decode(&bytes, "mem"), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn checked_load_names_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tpn");
        let mut s = sample();
        s.remove("stage.conv.bias");
        save_params(&s, &path).unwrap();
        let specs = vec![
            ParamSpec::weight("stage.conv.weight", [2, 1, 3, 3]),
            ParamSpec::bias("stage.conv.bias", 2),
        ];
        let err = load_params_checked(&path, &specs).unwrap_err();
        assert!(err.to_string().contains("stage.conv.bias"), "{err}");
    }
}
