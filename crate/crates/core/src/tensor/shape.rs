use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = dim_from_right(a, nd, i);
        let db = dim_from_right(b, nd, i);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], nd: usize, i: usize) -> usize {
    let pad = nd - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Flat index -> multi-index for `shape`, written into `coords`.
pub fn unravel(mut flat: usize, shape: &[usize], coords: &mut [usize]) {
    for d in (0..shape.len()).rev() {
        coords[d] = flat % shape[d];
        flat /= shape[d];
    }
}

/// Flat offset into a tensor of shape `shape` (padded on the left to `nd`
/// dims) for broadcast coordinates `coords` of the output shape.
pub fn broadcast_offset(coords: &[usize], shape: &[usize]) -> usize {
    let nd = coords.len();
    let pad = nd - shape.len();
    let mut off = 0usize;
    let mut stride = 1usize;
    for d in (pad..nd).rev() {
        let dim = shape[d - pad];
        let c = if dim == 1 { 0 } else { coords[d] };
        off += c * stride;
        stride *= dim;
    }
    off
}
