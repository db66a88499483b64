use crate::{Scalar, Tensor};

/// Fixed sparse linear map between row sets, applied channel-wise.
///
/// Output row `r` is `sum_k weights[k] * input[indices[k]]` over
/// `k in offsets[r]..offsets[r + 1]`. The same map can be applied to
/// `blocks` independent stacked copies of the input (e.g. a batch of scenes
/// sharing one camera rig).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap<T> {
    in_rows: usize,
    offsets: Vec<u32>,
    indices: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn builder(in_rows: usize) -> SparseMapBuilder<T> {
        SparseMapBuilder {
            map: SparseMap { in_rows, offsets: vec![0], indices: Vec::new(), weights: Vec::new() },
        }
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.offsets[r] as usize, self.offsets[r + 1] as usize);
        self.indices[a..b].iter().zip(&self.weights[a..b]).map(|(&i, &w)| (i as usize, w))
    }

    /// Number of stacked blocks in `x`, whose leading dimension must be a
    /// multiple of `in_rows`.
    fn blocks_of(&self, rows: usize) -> usize {
        assert!(
            self.in_rows > 0 && rows % self.in_rows == 0,
            "sparse map expects a multiple of {} rows, got {rows}",
            self.in_rows
        );
        rows / self.in_rows
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = x.last_dim();
        let rows = x.numel() / c;
        let blocks = self.blocks_of(rows);
        let out_rows = self.out_rows();
        let mut out = vec![T::zero(); blocks * out_rows * c];
        let xd = x.data();
        for b in 0..blocks {
            let xin = &xd[b * self.in_rows * c..(b + 1) * self.in_rows * c];
            let yout = &mut out[b * out_rows * c..(b + 1) * out_rows * c];
            for r in 0..out_rows {
                let dst = &mut yout[r * c..(r + 1) * c];
                for (i, w) in self.row(r) {
                    let src = &xin[i * c..(i + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + w * s;
                    }
                }
            }
        }
        Tensor::new(vec![blocks * out_rows, c], out)
    }

    /// Transposed application, used for the backward pass.
    pub fn apply_transpose(&self, gy: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
        let c = gy.last_dim();
        let out_rows = self.out_rows();
        let blocks = gy.numel() / c / out_rows.max(1);
        let mut gx = vec![T::zero(); blocks * self.in_rows * c];
        let gd = gy.data();
        for b in 0..blocks {
            let gin = &mut gx[b * self.in_rows * c..(b + 1) * self.in_rows * c];
            let gout = &gd[b * out_rows * c..(b + 1) * out_rows * c];
            for r in 0..out_rows {
                let src = &gout[r * c..(r + 1) * c];
                for (i, w) in self.row(r) {
                    let dst = &mut gin[i * c..(i + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + w * s;
                    }
                }
            }
        }
        Tensor::new(x_shape.to_vec(), gx)
    }
}

pub struct SparseMapBuilder<T> {
    map: SparseMap<T>,
}

impl<T: Scalar> SparseMapBuilder<T> {
    /// Appends one output row with the given `(input_row, weight)` taps.
    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, T)>) {
        for (i, w) in taps {
            assert!(i < self.map.in_rows, "tap index {i} out of range");
            self.map.indices.push(i as u32);
            self.map.weights.push(w);
        }
        self.map.offsets.push(self.map.indices.len() as u32);
    }

    pub fn finish(self) -> SparseMap<T> {
        self.map
    }
}
