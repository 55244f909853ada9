//! Raw numeric loops behind the graph operations.
//!
//! Everything here works on flat row-major slices. Accumulation order is
//! fixed so results are bit-reproducible.

/// `out[m, n] = a[m, k] @ b[k, n]`, accumulated in `k` order for each cell.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `grad_a[m, k] += g[m, n] @ b[k, n]^T`
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `grad_b[k, n] += a[m, k]^T @ g[m, n]`
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Geometry of a stride-1 "same"-padded 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub length: usize,
    pub kernel: usize,
}

impl ConvDims {
    /// Zero padding on the left; the remainder `kernel - 1 - left` goes right.
    pub fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Valid output positions `[lo, hi)` for kernel tap `k`.
    fn tap_range(&self, k: usize) -> (usize, usize, isize) {
        let shift = k as isize - self.pad_left() as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (self.length as isize - shift).min(self.length as isize).max(0) as usize;
        (lo, hi, shift)
    }
}

pub(crate) fn conv1d(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    d: ConvDims,
) -> Vec<f64> {
    let ConvDims {
        batch,
        in_channels,
        out_channels,
        length,
        kernel: ksize,
    } = d;
    let mut out = vec![0.0; batch * out_channels * length];
    for n in 0..batch {
        for co in 0..out_channels {
            let orow = &mut out[(n * out_channels + co) * length..][..length];
            if let Some(b) = bias {
                orow.iter_mut().for_each(|o| *o = b[co]);
            }
            for ci in 0..in_channels {
                let irow = &input[(n * in_channels + ci) * length..][..length];
                for k in 0..ksize {
                    let w = kernel[(co * in_channels + ci) * ksize + k];
                    let (lo, hi, shift) = d.tap_range(k);
                    for l in lo..hi {
                        orow[l] += w * irow[(l as isize + shift) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients of [`conv1d`].
pub(crate) fn conv1d_backward(
    g: &[f64],
    input: &[f64],
    kernel: &[f64],
    d: ConvDims,
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let ConvDims {
        batch,
        in_channels,
        out_channels,
        length,
        kernel: ksize,
    } = d;
    for n in 0..batch {
        for co in 0..out_channels {
            let grow = &g[(n * out_channels + co) * length..][..length];
            if let Some(gb) = grad_bias.as_deref_mut() {
                gb[co] += grow.iter().sum::<f64>();
            }
            for ci in 0..in_channels {
                let ioff = (n * in_channels + ci) * length;
                for k in 0..ksize {
                    let widx = (co * in_channels + ci) * ksize + k;
                    let (lo, hi, shift) = d.tap_range(k);
                    if let Some(gk) = grad_kernel.as_deref_mut() {
                        let irow = &input[ioff..ioff + length];
                        let mut acc = 0.0;
                        for l in lo..hi {
                            acc += grow[l] * irow[(l as isize + shift) as usize];
                        }
                        gk[widx] += acc;
                    }
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let w = kernel[widx];
                        let girow = &mut gi[ioff..ioff + length];
                        for l in lo..hi {
                            girow[(l as isize + shift) as usize] += w * grow[l];
                        }
                    }
                }
            }
        }
    }
}

/// Max over non-overlapping windows of `size`; ties resolve to the lowest index.
/// Returns pooled values and the flat argmax of each output cell.
pub(crate) fn maxpool1d(input: &[f64], rows: usize, length: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = length / size;
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        for j in 0..out_len {
            let start = r * length + j * size;
            let mut best = start;
            for idx in start + 1..start + size {
                if input[idx] > input[best] {
                    best = idx;
                }
            }
            out.push(input[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let own = strides(shape);
    (0..nd)
        .map(|i| {
            if i + shape.len() < nd {
                0
            } else {
                let j = i + shape.len() - nd;
                if shape[j] == 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Visits every output cell with the flat indices of both operands.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let nd = out_shape.len();
    let mut coord = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        // odometer increment
        for ax in (0..nd).rev() {
            coord[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            coord[ax] = 0;
        }
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn broadcast_visit_row_vector() {
        let mut seen = Vec::new();
        for_each_broadcast(&[2, 3], &[2, 3], &[1, 3], |i, a, b| seen.push((i, a, b)));
        assert_eq!(seen[4], (4, 4, 1));
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn even_kernel_pads_more_on_the_right() {
        let d = ConvDims {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            length: 4,
            kernel: 2,
        };
        // pad_left = 0: out[l] = w0*x[l] + w1*x[l+1]
        let out = conv1d(&[1.0, 2.0, 3.0, 4.0], &[1.0, 10.0], None, d);
        assert_eq!(out, vec![21.0, 32.0, 43.0, 4.0]);
    }
}
