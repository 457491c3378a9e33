//! Small dense symmetric eigenproblems.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending. Only the upper triangle is read.
pub fn symmetric_eigenvalues<T: Scalar>(a: &Matrix<T>) -> Vec<T> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "eigenvalues need a square matrix");
    let mut m = Matrix::from_fn(n, n, |i, j| if i <= j { a[(i, j)] } else { a[(j, i)] });
    let scale = m.frobenius_norm();
    let tol = T::epsilon().as_f64() * scale;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[(i, j)].as_f64().powi(2)).sum();
        if off.sqrt() <= tol || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                m[(p, p)] -= t * apq;
                m[(q, q)] += t * apq;
                m[(p, q)] = T::zero();
                m[(q, p)] = T::zero();
                for k in (0..n).filter(|&k| k != p && k != q) {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(p, k)] = m[(k, p)];
                    m[(k, q)] = s * mkp + c * mkq;
                    m[(q, k)] = m[(k, q)];
                }
            }
        }
    }
    let mut eig: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    eig
}

/// Squared largest singular value of `x`: the top eigenvalue of the
/// smaller of its two Gram matrices.
pub fn largest_singular_value_sq<T: Scalar>(x: &Matrix<T>) -> T {
    if x.is_empty() {
        return T::zero();
    }
    let gram = if x.cols() <= x.rows() { x.matmul_tn(x) } else { x.matmul_nt(x) };
    symmetric_eigenvalues(&gram)[0].max(T::zero())
}

pub fn largest_singular_value<T: Scalar>(x: &Matrix<T>) -> T {
    largest_singular_value_sq(x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn hand_examples() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let e = symmetric_eigenvalues(&a);
        assert!((e[0] - 3.0_f64).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
        let diag = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 4.0]]);
        assert_eq!(symmetric_eigenvalues(&diag), vec![4.0, -1.0]);
    }

    proptest! {
        #[test]
        fn matches_nalgebra(n in 1usize..14, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = Matrix::<f64>::randn(n, n, 1.0, &mut rng);
            let a = b.matmul_tn(&b);
            let ours = symmetric_eigenvalues(&a);
            let oracle = DMatrix::from_row_slice(n, n, a.as_slice()).symmetric_eigen();
            let mut theirs: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
            theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (x, y) in ours.iter().zip(&theirs) {
                prop_assert!((x - y).abs() <= 1e-10 * theirs[0].abs().max(1.0));
            }
        }

        #[test]
        fn singular_value_matches_svd(rows in 1usize..9, cols in 1usize..14, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::<f64>::randn(rows, cols, 1.0, &mut rng);
            let svd = DMatrix::from_row_slice(rows, cols, x.as_slice()).svd(false, false);
            let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
            prop_assert!((largest_singular_value(&x) - top).abs() <= 1e-10 * top.max(1.0));
        }
    }
}
