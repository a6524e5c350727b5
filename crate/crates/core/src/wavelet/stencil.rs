//! One-dimensional filtering-with-resampling applied along one axis of a
//! 3D grid, together with its two adjoints (with respect to the input and
//! with respect to the taps).
//!
//! Both analysis (filter then keep odd phases) and synthesis (upsample then
//! filter, trimmed to a target length) have the form
//! `out[o] = sum_j taps[j] * in[idx(o, j)]`, where `idx` may be undefined.
//! A [`Stencil`] stores that index table.

use rayon::prelude::*;

use crate::grid::Grid3;

/// Half-sample symmetric reflection into `0..n`.
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let p = 2 * n as i64;
    let r = i.rem_euclid(p);
    if r < n as i64 {
        r as usize
    } else {
        (p - 1 - r) as usize
    }
}

/// Output length of one analysis step on `n` samples with `len` taps.
#[inline]
pub fn analysis_len(n: usize, len: usize) -> usize {
    (n + len - 1) / 2
}

#[derive(Debug)]
pub(crate) struct Stencil {
    n_in: usize,
    n_out: usize,
    len: usize,
    /// `n_out * len` input indices, `NONE` where the tap falls off the signal.
    fwd: Vec<u32>,
    /// Transposed table: for input `i`, entries `adj[adj_ptr[i]..adj_ptr[i+1]]`
    /// are `(o, j)` pairs reading `i`.
    adj_ptr: Vec<usize>,
    adj: Vec<(u32, u32)>,
}

const NONE: u32 = u32::MAX;
/// Rows per work item when parallelizing over grid rows.
const ROW_BLOCK: usize = 64;

impl Stencil {
    fn from_fwd(n_in: usize, n_out: usize, len: usize, fwd: Vec<u32>) -> Self {
        let mut counts = vec![0usize; n_in + 1];
        for &i in &fwd {
            if i != NONE {
                counts[i as usize + 1] += 1;
            }
        }
        for i in 0..n_in {
            counts[i + 1] += counts[i];
        }
        let adj_ptr = counts.clone();
        let mut fill = counts;
        let mut adj = vec![(0u32, 0u32); fwd.iter().filter(|&&i| i != NONE).count()];
        for o in 0..n_out {
            for j in 0..len {
                let i = fwd[o * len + j];
                if i != NONE {
                    adj[fill[i as usize]] = (o as u32, j as u32);
                    fill[i as usize] += 1;
                }
            }
        }
        Self {
            n_in,
            n_out,
            len,
            fwd,
            adj_ptr,
            adj,
        }
    }

    /// `y[k] = sum_j h[j] x[refl(2k + 1 - j + offset)]`.
    pub(crate) fn analysis(n: usize, len: usize, offset: i64) -> Self {
        let m = analysis_len(n, len);
        let mut fwd = Vec::with_capacity(m * len);
        for k in 0..m {
            for j in 0..len {
                fwd.push(reflect(2 * k as i64 + 1 - j as i64 + offset, n) as u32);
            }
        }
        Self::from_fwd(n, m, len, fwd)
    }

    /// `x[i] = sum_k g[i + len - 2 - 2k - offset] c[k]`, for `i < n_out`.
    pub(crate) fn synthesis(m: usize, n_out: usize, len: usize, offset: i64) -> Self {
        let mut fwd = vec![NONE; n_out * len];
        for i in 0..n_out {
            for j in 0..len {
                let twice_k = i as i64 + len as i64 - 2 - j as i64 - offset;
                if twice_k >= 0 && twice_k % 2 == 0 && ((twice_k / 2) as usize) < m {
                    fwd[i * len + j] = (twice_k / 2) as u32;
                }
            }
        }
        Self::from_fwd(m, n_out, len, fwd)
    }

    #[cfg(test)]
    pub(crate) fn n_in(&self) -> usize {
        self.n_in
    }
}

/// `(inner, outer)`: products of the dimensions before and after `axis`.
fn split(dims: [usize; 3], axis: usize) -> (usize, usize) {
    let inner = dims[..axis].iter().product();
    let outer = dims[axis + 1..].iter().product();
    (inner, outer)
}

pub(crate) fn output_dims(st: &Stencil, dims: [usize; 3], axis: usize) -> [usize; 3] {
    let mut d = dims;
    d[axis] = st.n_out;
    d
}

/// `dst += S_taps(src)` along `axis`.
pub(crate) fn apply(st: &Stencil, taps: &[f64], axis: usize, src: &Grid3, dst: &mut Grid3) {
    let dims = src.dims();
    debug_assert_eq!(dims[axis], st.n_in);
    debug_assert_eq!(dst.dims(), output_dims(st, dims, axis));
    let (inner, _) = split(dims, axis);
    let src = src.data();
    let (n_in, n_out, len) = (st.n_in, st.n_out, st.len);
    dst.data_mut()
        .par_chunks_mut(inner)
        .with_min_len(ROW_BLOCK.div_ceil(inner).max(1))
        .enumerate()
        .for_each(|(c, row)| {
            let o = c % n_out;
            let base = (c / n_out) * n_in;
            for j in 0..len {
                let i = st.fwd[o * len + j];
                let t = taps[j];
                if i == NONE || t == 0.0 {
                    continue;
                }
                let s = &src[(base + i as usize) * inner..][..inner];
                for (r, v) in row.iter_mut().zip(s) {
                    *r += t * v;
                }
            }
        });
}

/// `gsrc += S_taps^T(gdst)` along `axis`.
pub(crate) fn apply_adjoint(
    st: &Stencil,
    taps: &[f64],
    axis: usize,
    gdst: &Grid3,
    gsrc: &mut Grid3,
) {
    let dims = gsrc.dims();
    debug_assert_eq!(gdst.dims(), output_dims(st, dims, axis));
    let (inner, _) = split(dims, axis);
    let gd = gdst.data();
    let (n_in, n_out) = (st.n_in, st.n_out);
    gsrc.data_mut()
        .par_chunks_mut(inner)
        .with_min_len(ROW_BLOCK.div_ceil(inner).max(1))
        .enumerate()
        .for_each(|(c, row)| {
            let i = c % n_in;
            let base = (c / n_in) * n_out;
            for &(o, j) in &st.adj[st.adj_ptr[i]..st.adj_ptr[i + 1]] {
                let t = taps[j as usize];
                if t == 0.0 {
                    continue;
                }
                let g = &gd[(base + o as usize) * inner..][..inner];
                for (r, v) in row.iter_mut().zip(g) {
                    *r += t * v;
                }
            }
        });
}

/// `d <gdst, S_taps(src)> / d taps`.
///
/// Partial sums are formed over fixed row blocks and reduced in order, so the
/// result does not depend on the thread count.
pub(crate) fn tap_gradient(st: &Stencil, axis: usize, gdst: &Grid3, src: &Grid3) -> Vec<f64> {
    let dims = src.dims();
    let (inner, _) = split(dims, axis);
    let s = src.data();
    let (n_in, n_out, len) = (st.n_in, st.n_out, st.len);
    let rows_per_block = ROW_BLOCK.div_ceil(inner).max(1);
    let partials: Vec<Vec<f64>> = gdst
        .data()
        .par_chunks(inner * rows_per_block)
        .enumerate()
        .map(|(b, block)| {
            let mut acc = vec![0.0; len];
            for (r, g) in block.chunks(inner).enumerate() {
                let c = b * rows_per_block + r;
                let o = c % n_out;
                let base = (c / n_out) * n_in;
                for j in 0..len {
                    let i = st.fwd[o * len + j];
                    if i == NONE {
                        continue;
                    }
                    let x = &s[(base + i as usize) * inner..][..inner];
                    acc[j] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}
