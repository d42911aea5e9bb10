//! Token-grid bookkeeping for (shifted) window attention.
//!
//! Tokens live in row-major order on an `res × res` grid. A window partition
//! is expressed as a gather index so that partition and its inverse become
//! plain row permutations on the autodiff tape.

use std::sync::Arc;

/// Row index that partitions a cyclically shifted grid into windows.
///
/// Output row `win * w*w + (i * w + j)` holds grid token
/// `((wr*w + i + shift) % res, (wc*w + j + shift) % res)`.
pub fn partition_index(res: usize, window: usize, shift: usize) -> Vec<usize> {
    let per_side = res / window;
    let mut idx = Vec::with_capacity(res * res);
    for wr in 0..per_side {
        for wc in 0..per_side {
            for i in 0..window {
                for j in 0..window {
                    let r = (wr * window + i + shift) % res;
                    let c = (wc * window + j + shift) % res;
                    idx.push(r * res + c);
                }
            }
        }
    }
    idx
}

pub fn inverse_index(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (k, &i) in index.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

/// Additive mask `[n_windows, 1, w*w, w*w]` for a shifted partition: tokens that
/// were wrapped around by the cyclic shift must not attend across the seam.
pub fn shift_mask(res: usize, window: usize, shift: usize) -> Vec<f64> {
    let label = |p: usize| -> usize {
        if p < res - window {
            0
        } else if p < res - shift {
            1
        } else {
            2
        }
    };
    let per_side = res / window;
    let t = window * window;
    let mut mask = Vec::with_capacity(per_side * per_side * t * t);
    for wr in 0..per_side {
        for wc in 0..per_side {
            let region: Vec<usize> = (0..t)
                .map(|k| label(wr * window + k / window) * 3 + label(wc * window + k % window))
                .collect();
            for a in 0..t {
                for b in 0..t {
                    mask.push(if region[a] == region[b] { 0.0 } else { f64::NEG_INFINITY });
                }
            }
        }
    }
    mask
}

/// Index into a `(2w-1)^2` relative-position table for every token pair of a window.
pub fn relative_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for a in 0..t {
        for b in 0..t {
            let dr = a / window + window - 1 - b / window;
            let dc = a % window + window - 1 - b % window;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Gather order for 2×2 patch merging: each output token concatenates
/// (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1).
pub fn merge_index(res: usize) -> Vec<usize> {
    let half = res / 2;
    let mut idx = Vec::with_capacity(res * res);
    for i in 0..half {
        for j in 0..half {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                idx.push((2 * i + dr) * res + 2 * j + dc);
            }
        }
    }
    idx
}

/// Gather order turning an `h × w × 3` image (rows of 3 channels) into patch rows
/// of `patch*patch*3` values ordered (py, px, channel).
pub fn patch_index(side: usize, patch: usize) -> Vec<usize> {
    let per = side / patch;
    let mut idx = Vec::with_capacity(side * side);
    for pr in 0..per {
        for pc in 0..per {
            for py in 0..patch {
                for px in 0..patch {
                    idx.push((pr * patch + py) * side + pc * patch + px);
                }
            }
        }
    }
    idx
}

pub(crate) fn arc(v: Vec<usize>) -> Arc<[usize]> {
    Arc::from(v.into_boxed_slice())
}
