//! Row-major matrix kernels. Reductions always run in index order so results
//! are reproducible bit for bit.

/// `out[r×c] += a[r×k] · b[k×c]`
pub(crate) fn gemm_nn(r: usize, k: usize, c: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[r×k] += g[r×c] · b[k×c]ᵀ`
pub(crate) fn gemm_nt(r: usize, c: usize, k: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(g.len(), r * c);
    debug_assert_eq!(b.len(), k * c);
    debug_assert_eq!(out.len(), r * k);
    for i in 0..r {
        let g_row = &g[i * c..(i + 1) * c];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * c..(p + 1) * c];
            *o += dot(g_row, b_row);
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · g[r×c]`
pub(crate) fn gemm_tn(r: usize, k: usize, c: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(g.len(), r * c);
    debug_assert_eq!(out.len(), k * c);
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * c..(i + 1) * c];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * c..(p + 1) * c];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
