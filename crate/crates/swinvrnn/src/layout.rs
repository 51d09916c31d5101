//! Row-index builders for spatial rearrangements.
//!
//! Feature maps are stored site-major as `[h*w, c]` matrices with sites in
//! row-major `(row, col)` order. Every spatial reshuffle (cyclic rolls,
//! window partitioning, patch merging, nearest-neighbor resizing, 3x3
//! neighborhood unfolding) is expressed as a row gather with an index
//! vector built here, which gives each op an exact scatter-add adjoint.
//!
//! An index of `-1` denotes a zero source row (used for padding).

/// Cyclic roll: output site `(i, j)` reads input site `(i-dy, j-dx)` mod size.
pub fn roll(h: usize, w: usize, dy: i64, dx: i64) -> Vec<i64> {
    let (hh, ww) = (h as i64, w as i64);
    let mut idx = Vec::with_capacity(h * w);
    for i in 0..hh {
        let si = (i - dy).rem_euclid(hh);
        for j in 0..ww {
            let sj = (j - dx).rem_euclid(ww);
            idx.push(si * ww + sj);
        }
    }
    idx
}

/// Partition into non-overlapping `win x win` windows. Output rows are
/// ordered `(window_row, window_col, in_window_row, in_window_col)`, so a
/// reshape to `[n_windows, win*win, c]` groups each window contiguously.
pub fn window_partition(h: usize, w: usize, win: usize) -> Vec<i64> {
    assert!(
        h % win == 0 && w % win == 0,
        "window partition requires divisible extent"
    );
    let mut idx = Vec::with_capacity(h * w);
    for wr in 0..h / win {
        for wc in 0..w / win {
            for r in 0..win {
                for c in 0..win {
                    idx.push(((wr * win + r) * w + wc * win + c) as i64);
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`window_partition`].
pub fn window_reverse(h: usize, w: usize, win: usize) -> Vec<i64> {
    let fwd = window_partition(h, w, win);
    invert(&fwd)
}

/// Inverts a permutation (all entries must be non-negative and unique).
pub fn invert(perm: &[i64]) -> Vec<i64> {
    let mut inv = vec![-1i64; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        debug_assert!(src >= 0 && inv[src as usize] == -1, "not a permutation");
        inv[src as usize] = dst as i64;
    }
    inv
}

/// Space-to-depth by factor `f`: each coarse site emits its `f x f` fine
/// sites consecutively, so a reshape to `[h/f * w/f, f*f*c]` stacks the
/// patch into channels.
pub fn space_to_depth(h: usize, w: usize, f: usize) -> Vec<i64> {
    assert!(h % f == 0 && w % f == 0, "space_to_depth requires divisible extent");
    let mut idx = Vec::with_capacity(h * w);
    for ci in 0..h / f {
        for cj in 0..w / f {
            for di in 0..f {
                for dj in 0..f {
                    idx.push(((ci * f + di) * w + (cj * f + dj)) as i64);
                }
            }
        }
    }
    idx
}

/// Nearest-neighbor resize between grids whose extents are integer
/// multiples of one another (in either direction).
pub fn resize_nearest(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Vec<i64> {
    assert!(
        (h_out % h_in == 0 || h_in % h_out == 0) && (w_out % w_in == 0 || w_in % w_out == 0),
        "resize_nearest requires integer scale factors"
    );
    let mut idx = Vec::with_capacity(h_out * w_out);
    for i in 0..h_out {
        let si = i * h_in / h_out;
        for j in 0..w_out {
            let sj = j * w_in / w_out;
            idx.push((si * w_in + sj) as i64);
        }
    }
    idx
}

/// 3x3 neighborhood unfold: each site emits its nine neighbors in
/// `(dy, dx)` raster order. Longitude (columns) wraps cyclically; latitude
/// (rows) pads with zero rows beyond the poles.
pub fn unfold3x3(h: usize, w: usize) -> Vec<i64> {
    let (hh, ww) = (h as i64, w as i64);
    let mut idx = Vec::with_capacity(h * w * 9);
    for i in 0..hh {
        for j in 0..ww {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let si = i + dy;
                    let sj = (j + dx).rem_euclid(ww);
                    if si < 0 || si >= hh {
                        idx.push(-1);
                    } else {
                        idx.push(si * ww + sj);
                    }
                }
            }
        }
    }
    idx
}

/// Rows picking the diagonal of `[ch, k, k]` flattened to `[ch*k*k, 1]`,
/// yielding `[ch*k, 1]`.
pub fn take_diag(ch: usize, k: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(ch * k);
    for c in 0..ch {
        for i in 0..k {
            idx.push((c * k * k + i * k + i) as i64);
        }
    }
    idx
}

/// Rows building diagonal matrices `[ch, k, k]` (flattened) from a packed
/// diagonal `[ch*k, 1]`; off-diagonal entries read the zero row.
pub fn make_diag(ch: usize, k: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(ch * k * k);
    for c in 0..ch {
        for i in 0..k {
            for j in 0..k {
                idx.push(if i == j { (c * k + i) as i64 } else { -1 });
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_by_one_column() {
        // 2x3 grid: rolling right by one maps (i, j) <- (i, j-1)
        let idx = roll(2, 3, 0, 1);
        assert_eq!(idx, vec![2, 0, 1, 5, 3, 4]);
    }

    #[test]
    fn partition_reverse_is_identity() {
        for (h, w, win) in [(8, 8, 8), (16, 16, 8), (8, 16, 4), (4, 8, 2), (2, 2, 1)] {
            let fwd = window_partition(h, w, win);
            let rev = window_reverse(h, w, win);
            for site in 0..h * w {
                assert_eq!(rev[fwd[site] as usize], site as i64);
            }
        }
    }

    #[test]
    fn partition_covers_every_site_once() {
        let idx = window_partition(8, 16, 8);
        let mut seen = vec![false; 8 * 16];
        for &i in &idx {
            assert!(!seen[i as usize]);
            seen[i as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn resize_round_trip_subsample_of_upsample() {
        // upsample by 2 then subsample by 2 recovers the identity mapping
        let up = resize_nearest(2, 4, 4, 8);
        let down = resize_nearest(4, 8, 2, 4);
        for site in 0..8 {
            assert_eq!(up[down[site] as usize], site as i64);
        }
    }

    #[test]
    fn unfold_pads_poles_and_wraps_longitude() {
        let idx = unfold3x3(2, 3);
        // site (0, 0): northern neighbors are padding
        let first: &[i64] = &idx[0..9];
        assert_eq!(first, &[-1, -1, -1, 2, 0, 1, 5, 3, 4]);
    }

    #[test]
    fn diag_indices() {
        assert_eq!(take_diag(1, 3), vec![0, 4, 8]);
        assert_eq!(make_diag(1, 2), vec![0, -1, -1, 1]);
    }
}
