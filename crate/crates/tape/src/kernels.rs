//! Dense kernels shared by forward and backward passes.

use crate::Scalar;

/// 3x3 same-padded im2col over an NHWC tensor.
///
/// Column layout is `(ky * 3 + kx) * c + ch`.
pub fn im2col3x3<T: Scalar>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); b * h * w * 9 * c];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((n * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`].
pub fn col2im3x3<T: Scalar>(cols: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut x = vec![T::zero(); b * h * w * c];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for i in 0..c {
                            x[dst + i] = x[dst + i] + cols[src + i];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2x2 space-to-depth: `(b, h, w, c) -> (b, h/2, w/2, 4c)`.
///
/// With `inverse` set, performs the exact inverse permutation.
pub fn space_to_depth<T: Scalar>(
    x: &[T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    inverse: bool,
) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for n in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let fine = ((n * h + 2 * i + dy) * w + 2 * j + dx) * c;
                        let coarse = ((n * ho + i) * wo + j) * 4 * c + (dy * 2 + dx) * c;
                        if inverse {
                            out[fine..fine + c].copy_from_slice(&x[coarse..coarse + c]);
                        } else {
                            out[coarse..coarse + c].copy_from_slice(&x[fine..fine + c]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-ray emission-absorption quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayResult<T> {
    pub rgb: [T; 3],
    /// Sum of compositing weights.
    pub opacity: T,
    /// Weight-averaged sample distance (unnormalized: `sum w_i d_i`).
    pub depth: T,
}

/// Composites one ray. `samples` holds `[sigma, r, g, b]` per sample.
pub fn composite_ray<T: Scalar>(
    samples: &[T],
    deltas: &[T],
    distances: Option<&[T]>,
    background: [T; 3],
) -> RayResult<T> {
    let mut trans = T::one();
    let mut rgb = [T::zero(); 3];
    let mut opacity = T::zero();
    let mut depth = T::zero();
    for (i, s) in samples.chunks_exact(4).enumerate() {
        let att = (-s[0] * deltas[i]).exp();
        let wgt = trans * (T::one() - att);
        for ch in 0..3 {
            rgb[ch] = rgb[ch] + wgt * s[1 + ch];
        }
        opacity = opacity + wgt;
        if let Some(d) = distances {
            depth = depth + wgt * d[i];
        }
        trans = trans * att;
    }
    for ch in 0..3 {
        rgb[ch] = rgb[ch] + (T::one() - opacity) * background[ch];
    }
    RayResult { rgb, opacity, depth }
}

/// Gradient of [`composite_ray`]'s color with respect to its samples.
///
/// With `e_i = <g, c_i - bg>`, `dL/dc_i = w_i g` and
/// `dL/dsigma_k = delta_k (T_{k+1} e_k - sum_{i>k} w_i e_i)`.
pub fn composite_ray_backward<T: Scalar>(
    samples: &[T],
    deltas: &[T],
    background: [T; 3],
    g: [T; 3],
    grad_samples: &mut [T],
    scratch: &mut Vec<(T, T, T)>,
) {
    scratch.clear();
    let mut trans = T::one();
    for (i, s) in samples.chunks_exact(4).enumerate() {
        let att = (-s[0] * deltas[i]).exp();
        let wgt = trans * (T::one() - att);
        let e = g[0] * (s[1] - background[0])
            + g[1] * (s[2] - background[1])
            + g[2] * (s[3] - background[2]);
        trans = trans * att;
        scratch.push((wgt, trans, e));
    }
    let mut tail = T::zero();
    for (k, &(wgt, trans_next, e)) in scratch.iter().enumerate().rev() {
        let gs = &mut grad_samples[4 * k..4 * k + 4];
        gs[0] = gs[0] + deltas[k] * (trans_next * e - tail);
        for ch in 0..3 {
            gs[1 + ch] = gs[1 + ch] + wgt * g[ch];
        }
        tail = tail + wgt * e;
    }
}

/// Sum of `n` values in a canonical (sorted) order so the result does not
/// depend on the order the values arrive in.
pub fn order_invariant_sum<T: Scalar>(vals: &mut [T]) -> T {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals.iter().fold(T::zero(), |acc, &v| acc + v)
}
