//! Raw numeric kernels shared by the tape's forward and backward passes.

/// `c (m×n) = op(a) · op(b) (+ c if accumulate)`.
///
/// `a` is stored row-major as `m×k`, or as `k×m` when `a_t` is set (so the
/// product uses its transpose). Same convention for `b` with `k×n` / `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the chosen strides never address outside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes (right-aligned, extents 1 stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index of the broadcast source
/// element in a tensor of shape `src`.
pub(crate) fn broadcast_index(out_shape: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        src_strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        idx.push(pos);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            pos -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Same-padding geometry for a window of `size` taps moved by `stride`.
/// Returns `(out_len, pad_left)`; any odd padding element goes on the right.
pub(crate) fn same_padding(len: usize, size: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = ((out - 1) * stride + size).saturating_sub(len);
    (out, needed / 2)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Conv geometry shared by forward and backward.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_len: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    fn cols_for(&self, x: &[f64], b: usize, cols: &mut [f64]) {
        let Self {
            in_ch,
            len,
            kernel,
            stride,
            out_len,
            pad_left,
            ..
        } = *self;
        let xb = &x[b * in_ch * len..(b + 1) * in_ch * len];
        for c in 0..in_ch {
            for k in 0..kernel {
                let row = &mut cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
                for (o, slot) in row.iter_mut().enumerate() {
                    let pos = (o * stride + k) as isize - pad_left as isize;
                    *slot = if pos >= 0 && (pos as usize) < len {
                        xb[c * len + pos as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let ck = g.in_ch * g.kernel;
    let mut cols = vec![0.0; ck * g.out_len];
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_len];
    for b in 0..g.batch {
        g.cols_for(x, b, &mut cols);
        let ob = &mut out[b * g.out_ch * g.out_len..(b + 1) * g.out_ch * g.out_len];
        for (oc, row) in ob.chunks_mut(g.out_len).enumerate() {
            row.fill(bias[oc]);
        }
        gemm(g.out_ch, ck, g.out_len, w, false, &cols, false, ob, true);
    }
    out
}

/// Accumulates conv gradients into the provided buffers (any may be absent).
pub(crate) fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let ck = g.in_ch * g.kernel;
    let mut cols = vec![0.0; ck * g.out_len];
    let mut dcols = vec![0.0; ck * g.out_len];
    for b in 0..g.batch {
        let gb = &grad_out[b * g.out_ch * g.out_len..(b + 1) * g.out_ch * g.out_len];
        if let Some(db) = db.as_deref_mut() {
            for (oc, row) in gb.chunks(g.out_len).enumerate() {
                db[oc] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            g.cols_for(x, b, &mut cols);
            gemm(g.out_ch, g.out_len, ck, gb, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(ck, g.out_ch, g.out_len, w, true, gb, false, &mut dcols, false);
            let dxb = &mut dx[b * g.in_ch * g.len..(b + 1) * g.in_ch * g.len];
            for c in 0..g.in_ch {
                for k in 0..g.kernel {
                    let row = &dcols[(c * g.kernel + k) * g.out_len..(c * g.kernel + k + 1) * g.out_len];
                    for (o, &v) in row.iter().enumerate() {
                        let pos = (o * g.stride + k) as isize - g.pad_left as isize;
                        if pos >= 0 && (pos as usize) < g.len {
                            dxb[c * g.len + pos as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over the last axis of a `(rows, len)` view. Returns pooled
/// values and the flat source index of each maximum (first index on ties).
pub(crate) fn max_pool_forward(
    x: &[f64],
    rows: usize,
    len: usize,
    size: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize) {
    let (out_len, pad_left) = same_padding(len, size, stride);
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        for o in 0..out_len {
            let start = (o * stride) as isize - pad_left as isize;
            let mut best = f64::NEG_INFINITY;
            let mut best_at = usize::MAX;
            for j in 0..size as isize {
                let pos = start + j;
                if pos < 0 || pos as usize >= len {
                    continue;
                }
                let v = row[pos as usize];
                if best_at == usize::MAX || v > best {
                    best = v;
                    best_at = pos as usize;
                }
            }
            debug_assert!(best_at != usize::MAX, "pool window entirely padding");
            out.push(best);
            arg.push(r * len + best_at);
        }
    }
    (out, arg, out_len)
}

/// Per-channel batch statistics for a `(batch, channels, inner)` view:
/// mean and biased variance over the batch and inner axes.
pub(crate) fn channel_moments(
    x: &[f64],
    batch: usize,
    channels: usize,
    inner: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * inner) as f64;
    let mut mean = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            mean[c] += x[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            var[c] += x[base..base + inner]
                .iter()
                .map(|v| (v - mean[c]) * (v - mean[c]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_index(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn same_padding_puts_extra_on_right() {
        assert_eq!(same_padding(3, 2, 1), (3, 0));
        assert_eq!(same_padding(3, 3, 1), (3, 1));
        assert_eq!(same_padding(5, 2, 2), (3, 0));
        assert_eq!(same_padding(12, 2, 2), (6, 0));
    }
}
