//! im2col/col2im for strided 1-D convolution with "same" zero padding, and the
//! reshapes between conv feature maps and dense inputs.

use ndarray::{Array2, ArrayView2};

/// Geometry of one strided convolution from `len_in` to `len_out` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// Output length `ceil(len_in / stride)`; total padding split with the
    /// extra element on the right.
    pub fn same(channels: usize, len_in: usize, kernel: usize, stride: usize) -> Self {
        let len_out = len_in.div_ceil(stride);
        let pad_total = ((len_out - 1) * stride + kernel).saturating_sub(len_in);
        Self {
            channels,
            len_in,
            len_out,
            kernel,
            stride,
            pad_left: pad_total / 2,
        }
    }

    #[inline]
    fn source(&self, j: usize, i: usize) -> Option<usize> {
        let pos = (j * self.stride + i) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.len_in).then_some(pos as usize)
    }
}

/// `(channels, batch * len_in)` → `(channels * kernel, batch * len_out)`.
pub(crate) fn im2col(input: ArrayView2<f64>, g: &ConvGeometry, batch: usize) -> Array2<f64> {
    debug_assert_eq!(input.dim(), (g.channels, batch * g.len_in));
    let mut col = Array2::zeros((g.channels * g.kernel, batch * g.len_out));
    let input = input.as_standard_layout();
    let src = input.as_slice().unwrap();
    let out_cols = batch * g.len_out;
    let dst = col.as_slice_mut().unwrap();
    for c in 0..g.channels {
        let src_row = &src[c * batch * g.len_in..(c + 1) * batch * g.len_in];
        for i in 0..g.kernel {
            let dst_row =
                &mut dst[(c * g.kernel + i) * out_cols..(c * g.kernel + i + 1) * out_cols];
            for b in 0..batch {
                let s = &src_row[b * g.len_in..(b + 1) * g.len_in];
                let d = &mut dst_row[b * g.len_out..(b + 1) * g.len_out];
                for (j, v) in d.iter_mut().enumerate() {
                    if let Some(p) = g.source(j, i) {
                        *v = s[p];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input positions.
pub(crate) fn col2im(col: ArrayView2<f64>, g: &ConvGeometry, batch: usize) -> Array2<f64> {
    debug_assert_eq!(col.dim(), (g.channels * g.kernel, batch * g.len_out));
    let mut out = Array2::zeros((g.channels, batch * g.len_in));
    let col = col.as_standard_layout();
    let src = col.as_slice().unwrap();
    let out_cols = batch * g.len_out;
    let dst = out.as_slice_mut().unwrap();
    for c in 0..g.channels {
        let dst_row = &mut dst[c * batch * g.len_in..(c + 1) * batch * g.len_in];
        for i in 0..g.kernel {
            let src_row = &src[(c * g.kernel + i) * out_cols..(c * g.kernel + i + 1) * out_cols];
            for b in 0..batch {
                let s = &src_row[b * g.len_out..(b + 1) * g.len_out];
                let d = &mut dst_row[b * g.len_in..(b + 1) * g.len_in];
                for (j, v) in s.iter().enumerate() {
                    if let Some(p) = g.source(j, i) {
                        d[p] += v;
                    }
                }
            }
        }
    }
    out
}

/// `(channels, batch * len)` → `(channels * len, batch)`, feature index `c * len + j`.
pub(crate) fn flatten(
    a: ArrayView2<f64>,
    channels: usize,
    len: usize,
    batch: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((channels * len, batch));
    for c in 0..channels {
        for b in 0..batch {
            for j in 0..len {
                out[[c * len + j, b]] = a[[c, b * len + j]];
            }
        }
    }
    out
}

/// Inverse of [`flatten`].
pub(crate) fn unflatten(
    f: ArrayView2<f64>,
    channels: usize,
    len: usize,
    batch: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((channels, batch * len));
    for c in 0..channels {
        for b in 0..batch {
            for j in 0..len {
                out[[c, b * len + j]] = f[[c * len + j, b]];
            }
        }
    }
    out
}

pub(crate) fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the forward ReLU output was not positive.
pub(crate) fn relu_backward(grad: &mut Array2<f64>, output: &Array2<f64>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Column sums as a `(rows, 1)` bias gradient.
pub(crate) fn row_sums(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn direct_conv(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        (0..g.len_out)
            .map(|j| {
                (0..g.kernel)
                    .filter_map(|i| g.source(j, i).map(|p| x[p] * w[i]))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn same_padding_halves_length() {
        let g = ConvGeometry::same(1, 128, 3, 2);
        assert_eq!((g.len_out, g.pad_left), (64, 0));
        let g = ConvGeometry::same(1, 1, 3, 2);
        assert_eq!((g.len_out, g.pad_left), (1, 1));
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let g = ConvGeometry::same(1, 9, 3, 2);
        let x: Vec<f64> = (0..18).map(|v| v as f64 * 0.5 - 2.0).collect();
        let input = Array2::from_shape_vec((1, 18), x.clone()).unwrap();
        let w = [0.3, -1.0, 2.0];
        let col = im2col(input.view(), &g, 2);
        let out = Array2::from_shape_vec((1, 3), w.to_vec())
            .unwrap()
            .dot(&col);
        for b in 0..2 {
            let expect = direct_conv(&x[b * 9..(b + 1) * 9], &w, &g);
            for j in 0..g.len_out {
                assert!((out[[0, b * g.len_out + j]] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry::same(3, 7, 3, 2);
        let batch = 2;
        let x = Array2::from_shape_fn((3, batch * 7), |(i, j)| {
            ((i * 31 + j * 7) % 11) as f64 - 5.0
        });
        let y = Array2::from_shape_fn((9, batch * g.len_out), |(i, j)| {
            ((i * 13 + j * 3) % 7) as f64 - 3.0
        });
        let lhs = (&im2col(x.view(), &g, batch) * &y).sum();
        let rhs = (&x * &col2im(y.view(), &g, batch)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn flatten_roundtrip() {
        let a = Array2::from_shape_fn((4, 3 * 2), |(i, j)| (i * 10 + j) as f64);
        let f = flatten(a.view(), 4, 2, 3);
        assert_eq!(f.dim(), (8, 3));
        assert_eq!(unflatten(f.view(), 4, 2, 3), a);
    }
}
