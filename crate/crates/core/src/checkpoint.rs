//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic   8 bytes  b"HIFICKP1"
//! u32     header length
//! header  UTF-8 key=value lines (the model config)
//! u32     tensor count
//! per tensor:
//!   u16     name length, then the UTF-8 dotted path
//!   u8      rank, then rank × u64 dims
//!   f32 LE  row-major data
//! u32     CRC32 of every preceding byte
//! ```
//!
//! Parameters are kept on the f32 grid in memory, so save → load is exact
//! elementwise.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::kv;
use crate::model::{shape_map, HifiConfig};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"HIFICKP1";

pub fn save(path: &Path, params: &ParamStore, cfg: &HifiConfig) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let header = kv::render(&cfg.to_kv());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.ndim() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(
                "file truncated (checksum region unreachable)".into(),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<(ParamStore, HifiConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short to be a checkpoint",
            path.display()
        )));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (corrupt or truncated file)",
            path.display()
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint)",
            path.display()
        )));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let cfg = HifiConfig::from_kv(&kv::parse(header)?)?;

    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches dims"),
        );
    }

    // validate the tensor set against the config's registry
    let expected = shape_map(&cfg);
    for (name, shape) in &expected {
        let got = params.get(name).map_err(|_| {
            Error::Checkpoint(format!("missing tensor {name} for the stored config"))
        })?;
        if got.shape() != &shape[..] {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, config requires {:?}",
                got.shape(),
                shape
            )));
        }
    }
    if params.len() != expected.len() {
        let extra: Vec<&str> = params
            .names()
            .filter(|n| !expected.contains_key(*n))
            .collect();
        return Err(Error::Checkpoint(format!(
            "unexpected tensors for the stored config: {extra:?}"
        )));
    }
    Ok((params, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Variant};

    fn tiny_cfg() -> HifiConfig {
        HifiConfig {
            w: 4,
            d: 3,
            d1: 4,
            d2: 4,
            d3: 6,
            d_k: 2,
            num_heads: 2,
            l: 1,
            alpha: 0.2,
            beta: 1.0,
            k_depth: 1,
            k_topk: 2,
            variant: Variant::Full,
            squared_recon: false,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &params, &cfg).unwrap();
        let (loaded, cfg2) = load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        for (name, tensor) in params.iter() {
            assert_eq!(tensor, loaded.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &params, &cfg).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &params, &cfg).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn config_tensor_mismatch_names_offending_path() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");

        // store a header that claims a wider d1 than the tensors have
        let mut wrong = cfg.clone();
        wrong.d1 = 8;
        wrong.d_k = 4;
        save(&path, &params, &wrong).unwrap();
        let err = load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("shape") || msg.contains("missing tensor"), "{msg}");
        assert!(msg.contains('.'), "should name a dotted path: {msg}");
    }
}
