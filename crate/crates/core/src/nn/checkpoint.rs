//! Portable network container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "RSNCKPT1"
//! role        u8       0 = teacher, 1 = student
//! spec_len    u32      length of the spec text
//! spec        UTF-8    NetworkSpec text form
//! count       u32      number of tensors
//! per tensor:
//!   name_len  u32, name UTF-8
//!   rank      u32, extents u64 × rank
//!   payload   f64 × product(extents), IEEE-754 little-endian
//! ```

use std::path::Path;

use super::{Network, NetworkSpec, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RSNCKPT1";

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(match net.role() {
        Role::Teacher => 0,
        Role::Student => 1,
    });
    let spec = net.spec().to_string();
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: format!("truncated checkpoint at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.bad("string is not UTF-8"))
    }

    fn bad(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Network> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.bad("bad checkpoint magic"));
    }
    let role = match r.take(1)?[0] {
        0 => Role::Teacher,
        1 => Role::Student,
        _ => return Err(r.bad("unknown role tag")),
    };
    let spec: NetworkSpec = r.string()?.parse()?;
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| r.bad("tensor too large"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.bad("trailing bytes after checkpoint"));
    }
    Network::from_params(spec, role, values)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::toy_student;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Network::build(toy_student(3), 42, Role::Student).unwrap();
        let bytes = to_bytes(&net);
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, net);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let net = Network::build(toy_student(3), 42, Role::Teacher).unwrap();
        let bytes = to_bytes(&net);
        assert!(from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, Path::new("mem")).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra, Path::new("mem")).is_err());
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/net.ckpt");
        let net = Network::build(toy_student(2), 1, Role::Student).unwrap();
        save(&net, &path).unwrap();
        assert_eq!(load(&path).unwrap(), net);
    }
}
