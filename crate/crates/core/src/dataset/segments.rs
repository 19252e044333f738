use super::OfflineDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One trajectory segment: an anchor step inside an episode, read at stride
/// `M` with repeat-last padding past the episode end. `pad_count` counts the
/// repeated terminal entries (positions whose clamped index duplicates the
/// previous one).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentHandle {
    pub episode: usize,
    pub anchor: usize,
    pub pad_count: usize,
}

/// Index over every valid segment of a dataset for a fixed (H, M, mode).
#[derive(Debug, Clone)]
pub struct SegmentSet {
    pub horizon: usize,
    pub stride: usize,
    /// Segments carry actions alongside states (joint action generation).
    pub joint: bool,
    pub segments: Vec<SegmentHandle>,
}

/// Enumerate segments: one per anchor step of each (clipped) episode.
/// Indices past the episode end repeat the final entry.
pub fn build_segments(
    dataset: &OfflineDataset,
    horizon: usize,
    stride: usize,
    joint: bool,
) -> Result<SegmentSet> {
    if horizon < 2 {
        return Err(Error::Contract(format!("horizon {horizon} must be >= 2")));
    }
    if stride < 1 {
        return Err(Error::Contract("stride must be >= 1".into()));
    }
    let mut segments = Vec::new();
    for (ei, ep) in dataset.episodes.iter().enumerate() {
        let len = dataset.clipped_len(ei);
        if ep.is_empty() {
            eprintln!("warning: skipping empty episode {ei}");
            continue;
        }
        for anchor in 0..len {
            let idx = segment_indices(anchor, horizon, stride, len);
            let pad_count = idx.windows(2).filter(|w| w[0] == w[1]).count();
            segments.push(SegmentHandle { episode: ei, anchor, pad_count });
        }
    }
    Ok(SegmentSet { horizon, stride, joint, segments })
}

/// Clamped index chain `t, t+M, ..., t+(H-1)M` for one segment.
pub fn segment_indices(anchor: usize, horizon: usize, stride: usize, len: usize) -> Vec<usize> {
    (0..horizon).map(|j| (anchor + j * stride).min(len - 1)).collect()
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Feature width per plan row: state dim (+ action dim in joint mode).
    pub fn row_width(&self, dataset: &OfflineDataset) -> usize {
        dataset.meta.state_dim + if self.joint { dataset.meta.action_dim } else { 0 }
    }

    pub fn indices(&self, dataset: &OfflineDataset, seg: &SegmentHandle) -> Vec<usize> {
        segment_indices(seg.anchor, self.horizon, self.stride, dataset.clipped_len(seg.episode))
    }

    /// Materialize a normalized batch: `[B, H, W]` plan tensor plus the
    /// normalized anchor return of each segment.
    pub fn gather(&self, dataset: &OfflineDataset, picks: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let w = self.row_width(dataset);
        let mut data = Vec::with_capacity(picks.len() * self.horizon * w);
        let mut returns = Vec::with_capacity(picks.len());
        for &p in picks {
            let seg = self
                .segments
                .get(p)
                .ok_or_else(|| Error::Contract(format!("segment index {p} out of range")))?;
            for &idx in &self.indices(dataset, seg) {
                data.extend(dataset.norm_state(seg.episode, idx));
                if self.joint {
                    data.extend(dataset.norm_action(seg.episode, idx));
                }
            }
            returns.push(dataset.norm_return(seg.episode, seg.anchor));
        }
        Ok((
            Tensor::from_vec(vec![picks.len(), self.horizon, w], data)?,
            returns,
        ))
    }
}
