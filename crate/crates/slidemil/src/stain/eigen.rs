//! Jacobi eigendecomposition for symmetric 3x3 matrices, the only
//! eigenproblem the stain estimator needs.

/// Eigenvalues (descending) and matching eigenvectors (columns of the
/// returned matrix) of a symmetric 3x3 matrix. Cyclic Jacobi rotations,
/// iterated until the off-diagonal norm falls below 1e-12 relative to the
/// matrix norm.
pub fn sym_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    // v accumulates the rotations; columns end up as eigenvectors.
    let mut v = [[0.0; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let norm: f64 = m
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);

    for _ in 0..100 {
        let off = (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]).sqrt();
        if off <= 1e-14 * norm {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            // Rotation angle that zeroes a[p][q].
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }

    let mut pairs: Vec<(f64, [f64; 3])> = (0..3)
        .map(|i| (a[i][i], [v[0][i], v[1][i], v[2][i]]))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let values = [pairs[0].0, pairs[1].0, pairs[2].0];
    let mut vectors = [[0.0; 3]; 3];
    for (i, (_, vec)) in pairs.iter().enumerate() {
        for r in 0..3 {
            vectors[r][i] = vec[r];
        }
    }
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column(v: &[[f64; 3]; 3], i: usize) -> [f64; 3] {
        [v[0][i], v[1][i], v[2][i]]
    }

    fn matvec(m: &[[f64; 3]; 3], x: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r] += m[r][c] * x[c];
            }
        }
        out
    }

    #[test]
    fn diagonal_matrix_is_already_solved() {
        let (vals, vecs) = sym_eigen3([[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(vals, [3.0, 2.0, 1.0]);
        assert_eq!(column(&vecs, 0).map(f64::abs), [1.0, 0.0, 0.0]);
        assert_eq!(column(&vecs, 1).map(f64::abs), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn random_matrices_satisfy_eigen_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let mut m = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in r..3 {
                    let x: f64 = rng.random_range(-5.0..5.0);
                    m[r][c] = x;
                    m[c][r] = x;
                }
            }
            let (vals, vecs) = sym_eigen3(m);
            assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
            for i in 0..3 {
                let v = column(&vecs, i);
                let mv = matvec(&m, &v);
                for r in 0..3 {
                    assert!(
                        (mv[r] - vals[i] * v[r]).abs() <= 1e-10,
                        "residual too large: {m:?}"
                    );
                }
            }
            // Orthonormality of the eigenbasis.
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|r| vecs[r][i] * vecs[r][j]).sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() <= 1e-12);
                }
            }
            // Trace and determinant are preserved by the spectrum.
            let trace = m[0][0] + m[1][1] + m[2][2];
            assert!((vals.iter().sum::<f64>() - trace).abs() <= 1e-10);
        }
    }

    #[test]
    fn rank_one_matrix_has_two_zero_eigenvalues() {
        // Outer product of (1,2,3) with itself.
        let u = [1.0, 2.0, 3.0];
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = u[r] * u[c];
            }
        }
        let (vals, _) = sym_eigen3(m);
        assert!((vals[0] - 14.0).abs() <= 1e-10);
        assert!(vals[1].abs() <= 1e-10 && vals[2].abs() <= 1e-10);
    }
}
