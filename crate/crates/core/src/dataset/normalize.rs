use serde::{Deserialize, Serialize};

/// Per-dimension affine map onto [-1, 1] fitted by min/max. Constant
/// dimensions map to 0 (and back to their constant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxNormalizer {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    identity: bool,
}

const SPAN_EPS: f64 = 1e-12;

impl MinMaxNormalizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut mins = vec![f64::INFINITY; dim];
        let mut maxs = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for (d, &v) in row.iter().enumerate() {
                mins[d] = mins[d].min(v);
                maxs[d] = maxs[d].max(v);
            }
        }
        for d in 0..dim {
            if !mins[d].is_finite() {
                mins[d] = 0.0;
                maxs[d] = 0.0;
            }
        }
        Self { mins, maxs, identity: false }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mins: vec![0.0; dim], maxs: vec![0.0; dim], identity: true }
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        if self.identity {
            return x.to_vec();
        }
        x.iter()
            .enumerate()
            .map(|(d, &v)| {
                let span = self.maxs[d] - self.mins[d];
                if span < SPAN_EPS {
                    0.0
                } else {
                    2.0 * (v - self.mins[d]) / span - 1.0
                }
            })
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        if self.identity {
            return y.to_vec();
        }
        y.iter()
            .enumerate()
            .map(|(d, &v)| {
                let span = self.maxs[d] - self.mins[d];
                if span < SPAN_EPS {
                    self.mins[d]
                } else {
                    self.mins[d] + (v + 1.0) * 0.5 * span
                }
            })
            .collect()
    }

    /// Normalize in place over a flat `[n, dim]` buffer.
    pub fn normalize_rows(&self, buf: &mut [f64]) {
        if self.identity {
            return;
        }
        let dim = self.dim();
        for row in buf.chunks_mut(dim) {
            for (d, v) in row.iter_mut().enumerate() {
                let span = self.maxs[d] - self.mins[d];
                *v = if span < SPAN_EPS { 0.0 } else { 2.0 * (*v - self.mins[d]) / span - 1.0 };
            }
        }
    }
}

/// Scalar min-max map of returns onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnNormalizer {
    min: f64,
    max: f64,
}

impl ReturnNormalizer {
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() {
            min = 0.0;
            max = 0.0;
        }
        Self { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        self.max - self.min < SPAN_EPS
    }

    pub fn normalize(&self, r: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            2.0 * (r - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            self.min
        } else {
            self.min + (y + 1.0) * 0.5 * (self.max - self.min)
        }
    }
}
