//! Small dense helpers shared by the statistics and scan modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Orthonormal basis (m x (m-1), Helmert construction) of the zero-sum
/// subspace of R^m.
pub fn zero_mean_basis(m: usize) -> DMatrix<f64> {
    assert!(m >= 2);
    DMatrix::from_fn(m, m - 1, |i, k| {
        // Column k contrasts entries 0..=k against entry k+1.
        let len = (k + 1) as f64;
        let norm = (len * (len + 1.0)).sqrt();
        if i <= k {
            1.0 / norm
        } else if i == k + 1 {
            -len / norm
        } else {
            0.0
        }
    })
}

/// Projector onto the zero-sum subspace, `I - 11^T / m`.
pub fn average_reference_projector(m: usize) -> DMatrix<f64> {
    let mut p = DMatrix::from_element(m, m, -1.0 / m as f64);
    for i in 0..m {
        p[(i, i)] += 1.0;
    }
    p
}

pub fn average_reference(v: &mut DVector<f64>) {
    let mean = v.mean();
    v.add_scalar_mut(-mean);
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Full spectral decomposition of a symmetric matrix, eigenvalues in
/// descending order. Each eigenvector is signed so that its largest-magnitude
/// entry (lowest index on ties) is positive.
pub fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = a.nrows();
    if a.ncols() != m {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m,
            a.ncols()
        )));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if max_asymmetry(a) > 1e-9 * scale {
        return Err(Error::Input(format!(
            "matrix is not symmetric (max asymmetry {:e}, scale {:e})",
            max_asymmetry(a),
            scale
        )));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = DVector::from_iterator(m, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(m, m);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let mut pivot = 0;
        for i in 1..m {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok((values, vectors))
}
