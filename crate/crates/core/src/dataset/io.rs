//! Self-describing dataset container: a JSON header (env id, dims, episode
//! count, generator config, format version) followed by little-endian f64
//! blocks per episode. The loader validates header dims against block sizes.

use super::{DatasetMeta, EpisodeRecord, OfflineDataset};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DPDS";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_dataset(path: &Path, dataset: &OfflineDataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    let header = serde_json::to_vec(&dataset.meta)?;
    f.write_all(&(header.len() as u32).to_le_bytes())?;
    f.write_all(&header)?;
    for ep in &dataset.episodes {
        f.write_all(&(ep.len() as u32).to_le_bytes())?;
        f.write_all(&[ep.terminated as u8, ep.truncated as u8])?;
        for &v in ep.states.iter().chain(&ep.actions).chain(&ep.rewards) {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Load and rebuild the dataset (returns and normalizers are recomputed
/// deterministically from the stored episodes and metadata).
pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Dataset(format!("bad magic in {}", path.display())));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)?;
    let meta: DatasetMeta = serde_json::from_slice(&header)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset format version {}",
            meta.format_version
        )));
    }
    let mut episodes = Vec::with_capacity(meta.episode_count);
    for _ in 0..meta.episode_count {
        f.read_exact(&mut len_bytes)?;
        let l = u32::from_le_bytes(len_bytes) as usize;
        let mut flags = [0u8; 2];
        f.read_exact(&mut flags)?;
        let read_block = |f: &mut dyn Read, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                f.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let states = read_block(&mut f, l * meta.state_dim)?;
        let actions = read_block(&mut f, l * meta.action_dim)?;
        let rewards = read_block(&mut f, l)?;
        let ep = EpisodeRecord {
            states,
            actions,
            rewards,
            terminated: flags[0] != 0,
            truncated: flags[1] != 0,
        };
        ep.validate(meta.state_dim, meta.action_dim)?;
        episodes.push(ep);
    }
    // trailing data would mean a corrupt or mismatched header
    let mut probe = [0u8; 1];
    if f.read(&mut probe)? != 0 {
        return Err(Error::Dataset("trailing bytes after final episode".into()));
    }
    OfflineDataset::build(episodes, meta, true)
}

/// Flat CSV export for inspection: one row per environment step.
pub fn export_csv(path: &Path, dataset: &OfflineDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::error::Error::from)?;
    let ds = dataset.meta.state_dim;
    let da = dataset.meta.action_dim;
    let mut header = vec!["episode".to_string(), "step".to_string()];
    header.extend((0..ds).map(|d| format!("s{d}")));
    header.extend((0..da).map(|d| format!("a{d}")));
    header.push("reward".into());
    header.push("return".into());
    header.push("terminated".into());
    header.push("truncated".into());
    w.write_record(&header)?;
    for (ei, ep) in dataset.episodes.iter().enumerate() {
        for t in 0..ep.len() {
            let mut row = vec![ei.to_string(), t.to_string()];
            row.extend(ep.state(t, ds).iter().map(|v| v.to_string()));
            row.extend(ep.action(t, da).iter().map(|v| v.to_string()));
            row.push(ep.rewards[t].to_string());
            row.push(dataset.returns[ei][t].to_string());
            row.push(((ep.terminated && t + 1 == ep.len()) as u8).to_string());
            row.push(((ep.truncated && t + 1 == ep.len()) as u8).to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
