//! Binary checkpoint format: magic "DESC", a u32 format version, then one
//! record per parameter (name length u32, UTF-8 name, rank u32, dims
//! u32 x rank, row-major little-endian f32 data). Unknown magic or version
//! is rejected outright; a truncated file never half-loads.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DESC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    BadVersion { expected: u32, found: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("record name is not UTF-8")]
    BadName,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>, CheckpointError> {
    let f = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(f);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { expected: *MAGIC, found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { expected: VERSION, found: version });
    }
    let mut store = ParamStore::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            4 => {}
            n => {
                // partial read at a record boundary may still be a short
                // tail; pull the rest or call it truncated
                let mut got = n;
                while got < 4 {
                    let m = r.read(&mut len_buf[got..])?;
                    if m == 0 {
                        return Err(CheckpointError::Truncated("record header".into()));
                    }
                    got += m;
                }
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, "name")?;
        let name = String::from_utf8(name_buf).map_err(|_| CheckpointError::BadName)?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, "data")?;
            data.push(f32::from_le_bytes(buf));
        }
        store.insert(&name, Tensor::new(shape, data));
    }
    Ok(store)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Truncated(what.to_string()))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}
