//! Dense row-major helpers. Matrices are `rows × cols` slices.

/// `out = W x`
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `dx += Wᵀ dy`
pub(crate) fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), cols);
    for (r, &g) in dy.iter().enumerate().take(rows) {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, &a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// `dW += dy xᵀ`
pub(crate) fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for (r, &g) in dy.iter().enumerate().take(rows) {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, &a) in row.iter_mut().zip(x) {
            *d += g * a;
        }
    }
}

/// `out = W[:, offset..offset + x.len()] x` for a matrix with row stride `stride`.
pub(crate) fn matvec_block(
    w: &[f64],
    rows: usize,
    stride: usize,
    offset: usize,
    x: &[f64],
    out: &mut [f64],
) {
    let k = x.len();
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * stride + offset..r * stride + offset + k];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `dx += W[:, block]ᵀ dy`
pub(crate) fn matvec_t_block_acc(
    w: &[f64],
    rows: usize,
    stride: usize,
    offset: usize,
    dy: &[f64],
    dx: &mut [f64],
) {
    let k = dx.len();
    for (r, &g) in dy.iter().enumerate().take(rows) {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * stride + offset..r * stride + offset + k];
        for (d, &a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// `dW[:, block] += dy xᵀ`
pub(crate) fn outer_block_acc(
    dw: &mut [f64],
    rows: usize,
    stride: usize,
    offset: usize,
    dy: &[f64],
    x: &[f64],
) {
    let k = x.len();
    for (r, &g) in dy.iter().enumerate().take(rows) {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[r * stride + offset..r * stride + offset + k];
        for (d, &a) in row.iter_mut().zip(x) {
            *d += g * a;
        }
    }
}

/// `dst += src`
pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `dst += a * src`
pub(crate) fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column `c` of a row-major matrix, added into `out` scaled by `a`.
pub(crate) fn add_column(w: &[f64], rows: usize, cols: usize, c: usize, a: f64, out: &mut [f64]) {
    for r in 0..rows {
        out[r] += a * w[r * cols + c];
    }
}

/// `dW[:, c] += dy`
pub(crate) fn column_acc(dw: &mut [f64], rows: usize, cols: usize, c: usize, dy: &[f64]) {
    for r in 0..rows {
        dw[r * cols + c] += dy[r];
    }
}

/// Softmax with max subtraction.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        // [[1,2,3],[4,5,6]]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 2];
        matvec(&w, 2, 3, &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut dx = [0.0; 3];
        matvec_t_acc(&w, 2, 3, &[1.0, 1.0], &mut dx);
        assert_eq!(dx, [5.0, 7.0, 9.0]);
        let mut dw = [0.0; 6];
        outer_acc(&mut dw, 2, 3, &[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(dw, [1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[1001.0, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
