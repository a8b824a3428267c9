// Raw slice kernels shared by the differentiable ops and the layers.

/// `out[m×p] += a[m×n] · b[n×p]`, all row-major.
pub(crate) fn gemm_acc(m: usize, n: usize, p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    // four output rows share each pass over a row of `b`
    let mut rows = out.chunks_exact_mut(4 * p);
    let mut i = 0;
    for block in &mut rows {
        let (r0, rest) = block.split_at_mut(p);
        let (r1, rest) = rest.split_at_mut(p);
        let (r2, r3) = rest.split_at_mut(p);
        for k in 0..n {
            let (a0, a1, a2, a3) = (a[i * n + k], a[(i + 1) * n + k], a[(i + 2) * n + k], a[(i + 3) * n + k]);
            let b_row = &b[k * p..(k + 1) * p];
            for j in 0..p {
                let bv = b_row[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for (row, i) in rows.into_remainder().chunks_exact_mut(p).zip(i..) {
        let a_row = &a[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×p] += a[m×n] · b[p×n]ᵀ`.
pub(crate) fn gemm_nt_acc(m: usize, n: usize, p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * p + j] += dot;
        }
    }
}

/// `out[n×p] += a[m×n]ᵀ · b[m×p]`.
pub(crate) fn gemm_tn_acc(m: usize, n: usize, p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(out.len(), n * p);
    let mut k = 0;
    // four rows of `a`/`b` per pass over each output row
    while k + 4 <= m {
        let bs = [
            &b[k * p..][..p],
            &b[(k + 1) * p..][..p],
            &b[(k + 2) * p..][..p],
            &b[(k + 3) * p..][..p],
        ];
        for i in 0..n {
            let (a0, a1, a2, a3) = (a[k * n + i], a[(k + 1) * n + i], a[(k + 2) * n + i], a[(k + 3) * n + i]);
            let row = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                row[j] += a0 * bs[0][j] + a1 * bs[1][j] + a2 * bs[2][j] + a3 * bs[3][j];
            }
        }
        k += 4;
    }
    for k in k..m {
        let a_row = &a[k * n..(k + 1) * n];
        let b_row = &b[k * p..(k + 1) * p];
        for (i, &aki) in a_row.iter().enumerate() {
            let row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Physically reorders `data` so that output axis `i` is input axis `order[i]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], order: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    // stride in the input for each output axis
    let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = [0.0; 4];
        gemm_acc(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2×3 = bᵀ
        let mut c2 = [0.0; 4];
        gemm_nt_acc(2, 3, 2, &a, &bt, &mut c2);
        assert_eq!(c, c2);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3×2 = aᵀ
        let mut c3 = [0.0; 4];
        gemm_tn_acc(3, 2, 2, &at, &b, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (s, out) = permute_data(&data, &shape, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], data[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn stable_scalar_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
