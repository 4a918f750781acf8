// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-only oracles, independent of the code paths they check.

#![allow(dead_code, clippy::needless_range_loop)]

use latsteer::rng::GaussianStream;
use latsteer::ActivationMatrix;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
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
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    (values, vectors)
}

/// Sample covariance (divisor N - 1) built explicitly.
pub fn covariance(acts: &ActivationMatrix) -> Vec<Vec<f64>> {
    let (n, d) = (acts.rows(), acts.dim());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += acts.row(i)[j] / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        let r = acts.row(i);
        for a in 0..d {
            let xa = r[a] - mean[a];
            for b in 0..d {
                cov[a][b] += xa * (r[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    cov
}

pub struct OracleFit {
    pub components: Vec<Vec<f64>>,
    pub ratios: Vec<f64>,
}

pub fn oracle_pca(acts: &ActivationMatrix, k: usize) -> OracleFit {
    let cov = covariance(acts);
    let trace: f64 = (0..cov.len()).map(|i| cov[i][i]).sum();
    let (values, vectors) = jacobi_eigen(&cov);
    OracleFit {
        components: vectors[..k].to_vec(),
        ratios: values[..k].iter().map(|v| v / trace).collect(),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).abs() / (dot(a, a) * dot(b, b)).sqrt()
}

/// Gaussian matrix with a random per-column scale, so spectra are spread.
pub fn random_matrix(seed: u64, rows: usize, dim: usize) -> ActivationMatrix {
    let mut g = GaussianStream::new(seed);
    let scales: Vec<f64> = (0..dim).map(|_| 0.2 + 2.0 * g.uniform()).collect();
    let data = (0..rows * dim)
        .map(|i| scales[i % dim] * g.standard_normal())
        .collect();
    ActivationMatrix::new(0, rows, dim, data, vec!["r".to_string(); rows]).unwrap()
}

/// Pooled separation along one projected axis: smallest gap between language
/// means over the RMS within-language spread.
pub fn axis_separation(values: &[f64], labels: &[String]) -> f64 {
    let mut langs: Vec<&String> = Vec::new();
    for l in labels {
        if !langs.contains(&l) {
            langs.push(l);
        }
    }
    let means: Vec<f64> = langs
        .iter()
        .map(|l| {
            let xs: Vec<f64> = values
                .iter()
                .zip(labels)
                .filter(|(_, m)| m == l)
                .map(|(v, _)| *v)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        })
        .collect();
    let mut ss = 0.0;
    for (v, l) in values.iter().zip(labels) {
        let idx = langs.iter().position(|m| *m == l).unwrap();
        ss += (v - means[idx]).powi(2);
    }
    let within = (ss / values.len() as f64).sqrt();
    let mut gap = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            gap = gap.min((means[i] - means[j]).abs());
        }
    }
    gap / within
}
