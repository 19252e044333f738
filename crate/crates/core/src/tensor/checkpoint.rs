//! Flat binary parameter container: a version header followed by
//! name -> (shape, little-endian f64 buffer) records. Round-trips
//! bit-exactly, which the reproducibility checks rely on.

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DPCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, value) in store.iter() {
        let name_bytes = name.as_bytes();
        f.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        f.write_all(name_bytes)?;
        f.write_all(&(value.shape().len() as u32).to_le_bytes())?;
        for &d in value.shape() {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in value.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Load a checkpoint into `(name, tensor)` pairs in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic in {}", path.display())));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} in {}",
            path.display()
        )));
    }
    let count = read_u32(&mut f)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?;
        let ndim = read_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            f.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

/// Restore a store in place. Names and shapes must match exactly.
pub fn restore_store(path: &Path, store: &mut ParamStore) -> Result<()> {
    let entries = load_checkpoint(path)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} params, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, tensor)) in ids.into_iter().zip(entries) {
        if store.name(id) != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: {} vs {}",
                store.name(id),
                name
            )));
        }
        store.set(id, tensor)?;
    }
    Ok(())
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
