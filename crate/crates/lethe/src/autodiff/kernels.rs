//! Raw matrix kernels shared by forward and backward passes. Loop order is
//! chosen so the inner loop streams contiguous slices and auto-vectorizes.

use super::tensor::Scalar;

/// out(m×n) += a(m×k) · b(k×n)
pub fn mm_nn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// out(m×n) += a(m×k) · b(n×k)ᵀ
pub fn mm_nt<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out(k×n) += a(m×k)ᵀ · b(m×n)
pub fn mm_tn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == E::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_on_small_case() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut nn = [0.0; 4];
        mm_nn(&a, &b, &mut nn, 2, 2, 2);
        assert_eq!(nn, [19.0, 22.0, 43.0, 50.0]);

        // a · bᵀ
        let mut nt = [0.0; 4];
        mm_nt(&a, &b, &mut nt, 2, 2, 2);
        assert_eq!(nt, [17.0, 23.0, 39.0, 53.0]);

        // aᵀ · b
        let mut tn = [0.0; 4];
        mm_tn(&a, &b, &mut tn, 2, 2, 2);
        assert_eq!(tn, [26.0, 30.0, 38.0, 44.0]);
    }
}
