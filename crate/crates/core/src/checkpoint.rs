//! Versioned checkpoint persistence: a manifest of named tensors with
//! explicit offsets, the config text that produced them, and a checksum
//! over the payload so truncation and bit rot surface as errors instead
//! of silently wrong weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"MSCKPT";
const VERSION: u16 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub entries: Vec<(String, Tensor)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::corruption(format!("checkpoint truncated reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new(config_text: String) -> Checkpoint {
        Checkpoint {
            config_text,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, t: Tensor) {
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = self.config_text.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len() as u64;
        }
        w.write_all(&(payload.len() as u64).to_le_bytes())?;
        w.write_all(&fnv1a(&payload).to_le_bytes())?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 6];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::corruption("not a checkpoint file".to_string()));
        }
        let mut vb = [0u8; 2];
        read_exact(r, &mut vb, "version")?;
        let version = u16::from_le_bytes(vb);
        if version != VERSION {
            return Err(Error::version(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let cfg_len = read_u32(r, "config length")? as usize;
        let mut cfg = vec![0u8; cfg_len];
        read_exact(r, &mut cfg, "config text")?;
        let config_text = String::from_utf8(cfg)
            .map_err(|_| Error::corruption("config text not UTF-8".to_string()))?;

        let n = read_u32(r, "entry count")? as usize;
        let mut metas: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(n);
        let mut expect_offset = 0u64;
        for i in 0..n {
            let name_len = read_u32(r, "name length")? as usize;
            let mut nb = vec![0u8; name_len];
            read_exact(r, &mut nb, "name")?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::corruption(format!("entry {i} name not UTF-8")))?;
            let rank = read_u32(r, "rank")? as usize;
            if rank > 8 {
                return Err(Error::corruption(format!("entry {name}: absurd rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r, "dim")? as usize);
            }
            let offset = read_u64(r, "offset")?;
            if offset != expect_offset {
                return Err(Error::corruption(format!(
                    "entry {name}: offset {offset} but expected {expect_offset}"
                )));
            }
            expect_offset += shape.iter().product::<usize>() as u64;
            metas.push((name, shape, offset));
        }
        let payload_len = read_u64(r, "payload length")? as usize;
        if payload_len != expect_offset as usize * 4 {
            return Err(Error::corruption(format!(
                "payload length {payload_len} disagrees with manifest ({} elements)",
                expect_offset
            )));
        }
        let checksum = read_u64(r, "checksum")?;
        let mut payload = vec![0u8; payload_len];
        read_exact(r, &mut payload, "payload")?;
        if fnv1a(&payload) != checksum {
            return Err(Error::corruption("payload checksum mismatch".to_string()));
        }
        let mut entries = Vec::with_capacity(n);
        for (name, shape, offset) in metas {
            let count: usize = shape.iter().product();
            let start = offset as usize * 4;
            let data: Vec<f32> = payload[start..start + count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            config_text,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }
}
