//! Index file format. All integers and floats little-endian.
//!
//! ```text
//! magic            4 bytes  "RBVX"
//! version          u32      1
//! kind             u8       0 = flat, 1 = hnsw
//! dim              u32
//! count            u64
//! m                u32      HNSW params, zero for flat
//! ef_construction  u32
//! ef_search        u32
//! seed             u64
//! vectors          count * dim * f32, unit-normalized, id order
//! ids              count * (u32 byte length, UTF-8 bytes)
//! -- hnsw only --
//! entry            u32      u32::MAX when empty
//! max_level        u32
//! per node:        u8 level, then for each layer 0..=level: u32 n, n * u32 neighbor
//! ```

use std::fs;
use std::path::Path;

use super::hnsw::HnswGraph;
use super::{HnswParams, IndexKind, VectorIndex};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"RBVX";
pub const INDEX_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_index(index: &VectorIndex) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + index.data.len() * 4);
    buf.extend_from_slice(INDEX_MAGIC);
    put_u32(&mut buf, INDEX_VERSION);
    buf.push(match index.kind() {
        IndexKind::Flat => 0,
        IndexKind::Hnsw => 1,
    });
    put_u32(&mut buf, index.dim as u32);
    put_u64(&mut buf, index.len() as u64);
    let p = index.hnsw_params();
    put_u32(&mut buf, p.map_or(0, |p| p.m as u32));
    put_u32(&mut buf, p.map_or(0, |p| p.ef_construction as u32));
    put_u32(&mut buf, p.map_or(0, |p| p.ef_search as u32));
    put_u64(&mut buf, p.map_or(0, |p| p.seed));
    for v in &index.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for id in &index.ids {
        put_u32(&mut buf, id.len() as u32);
        buf.extend_from_slice(id.as_bytes());
    }
    if let Some(g) = &index.graph {
        put_u32(&mut buf, g.entry.unwrap_or(u32::MAX));
        put_u32(&mut buf, g.max_level as u32);
        for layers in &g.links {
            buf.push((layers.len() - 1) as u8);
            for l in layers {
                put_u32(&mut buf, l.len() as u32);
                for &n in l {
                    put_u32(&mut buf, n);
                }
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_index(bytes: &[u8]) -> std::result::Result<VectorIndex, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != INDEX_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let kind = r.u8()?;
    let dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let params = HnswParams {
        m: r.u32()? as usize,
        ef_construction: r.u32()? as usize,
        ef_search: r.u32()? as usize,
        seed: r.u64()?,
        ..HnswParams::default()
    };
    let n_floats = count
        .checked_mul(dim)
        .ok_or("vector block size overflows")?;
    let raw = r.take(n_floats.checked_mul(4).ok_or("vector block size overflows")?)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let s = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?;
        ids.push(s.to_string());
    }
    let graph = match kind {
        0 => None,
        1 => {
            let entry = match r.u32()? {
                u32::MAX => None,
                e if (e as usize) < count => Some(e),
                e => return Err(format!("entry point {e} out of range")),
            };
            let max_level = r.u32()? as usize;
            let mut links = Vec::with_capacity(count);
            for _ in 0..count {
                let level = r.u8()? as usize;
                let mut layers = Vec::with_capacity(level + 1);
                for _ in 0..=level {
                    let n = r.u32()? as usize;
                    let mut l = Vec::with_capacity(n.min(1024));
                    for _ in 0..n {
                        let nb = r.u32()?;
                        if nb as usize >= count {
                            return Err(format!("neighbor {nb} out of range"));
                        }
                        l.push(nb);
                    }
                    layers.push(l);
                }
                links.push(layers);
            }
            Some(HnswGraph {
                params,
                entry,
                max_level,
                links,
            })
        }
        k => return Err(format!("unknown index kind {k}")),
    };
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(VectorIndex {
        dim,
        ids,
        data,
        graph,
    })
}

pub fn write_index(index: &VectorIndex, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_index(index)).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<VectorIndex> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_index(&bytes).map_err(|m| Error::parse(path, 0, m))
}
