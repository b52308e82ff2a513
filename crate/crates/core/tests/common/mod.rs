//! Reference computations shared by the integration tests. Nothing here
//! calls into the crate's numerics.

#![allow(dead_code)]

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in decreasing order and the matching eigenvectors as
/// columns of a row-major `n × n` table.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n).map(|r| order.iter().map(|&i| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Sample covariance (divided by `n`) of the rows of `x`.
pub fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| x.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Sine of the largest principal angle between the column spans of two
/// `d × k` matrices with orthonormal columns.
pub fn max_principal_angle_sin(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a.len();
    let k = a[0].len();
    // Residual of b after projecting onto span(a).
    let coef: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| (0..d).map(|r| a[r][i] * b[r][j]).sum()).collect())
        .collect();
    let resid: Vec<Vec<f64>> = (0..d)
        .map(|r| (0..k).map(|j| b[r][j] - (0..k).map(|i| a[r][i] * coef[i][j]).sum::<f64>()).collect())
        .collect();
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| (0..d).map(|r| resid[r][i] * resid[r][j]).sum()).collect())
        .collect();
    jacobi_eigen(&gram).0[0].max(0.0).sqrt()
}

/// Mean per-class recall from an explicit confusion matrix.
pub fn confusion_balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> f64 {
    let k = y_true.iter().chain(y_pred).max().map_or(0, |m| m + 1);
    let mut m = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    let recalls: Vec<f64> = m
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().sum::<usize>() > 0)
        .map(|(c, row)| row[c] as f64 / row.iter().sum::<usize>() as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}
