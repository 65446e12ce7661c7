//! Two-component PCA of feature matrices, by power iteration with deflation
//! on the centered covariance.

use equimodal::numerics::Tensor;

/// Total variance at or below this is treated as a degenerate covariance.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;
const MAX_ITERS: usize = 5000;
const TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Unit-norm principal directions, `d` entries each.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub mean: Vec<f64>,
    pub degenerate: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn mat_vec(cov: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    cov.iter().map(|row| dot(row, v)).collect()
}

/// Remove the projections on `basis` (assumed orthonormal).
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Flip so the largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenvector of `cov` orthogonal to `basis`.
fn power_iteration(cov: &[Vec<f64>], basis: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let d = cov.len();
    // Deterministic start with support on every coordinate.
    let mut v: Vec<f64> = (0..d).map(|k| 1.0 + k as f64 / d as f64).collect();
    orthogonalize(&mut v, basis);
    if normalize(&mut v) == 0.0 {
        v = vec![0.0; d];
        if let Some(k) = (0..d).find(|&k| basis.iter().all(|b| b[k].abs() < 0.5)) {
            v[k] = 1.0;
        }
        orthogonalize(&mut v, basis);
        normalize(&mut v);
    }
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        let mut w = mat_vec(cov, &v);
        orthogonalize(&mut w, basis);
        let norm = normalize(&mut w);
        if norm == 0.0 {
            // Null space: any unit vector orthogonal to `basis` is an eigenvector.
            return (v, 0.0);
        }
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        lambda = norm;
        if delta < TOL {
            break;
        }
    }
    // Re-orthogonalize once more to clean up accumulated rounding.
    orthogonalize(&mut v, basis);
    normalize(&mut v);
    canonical_sign(&mut v);
    (v, lambda)
}

/// PCA of the columns of `features` (`d × m`, one column per sample).
pub fn pca(features: &Tensor) -> Pca {
    let (d, m) = (features.rows(), features.cols());
    let mean: Vec<f64> = (0..d).map(|r| (0..m).map(|q| features.get(r, q)).sum::<f64>() / m.max(1) as f64).collect();
    let denom = (m.max(2) - 1) as f64;
    let mut cov = vec![vec![0.0; d]; d];
    for q in 0..m {
        let x: Vec<f64> = (0..d).map(|r| features.get(r, q) - mean[r]).collect();
        for a in 0..d {
            for b in a..d {
                cov[a][b] += x[a] * x[b] / denom;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[a][b] = cov[b][a];
        }
    }
    let trace: f64 = (0..d).map(|k| cov[k][k]).sum();
    if !(trace > DEGENERATE_VARIANCE) || d < 2 {
        let mut e0 = vec![0.0; d];
        let mut e1 = vec![0.0; d];
        if d > 0 {
            e0[0] = 1.0;
        }
        if d > 1 {
            e1[1] = 1.0;
        }
        return Pca {
            components: [e0, e1],
            eigenvalues: [0.0, 0.0],
            mean,
            degenerate: true,
        };
    }
    let (v1, l1) = power_iteration(&cov, &[]);
    let (v2, l2) = power_iteration(&cov, std::slice::from_ref(&v1));
    Pca {
        components: [v1, v2],
        eigenvalues: [l1, l2],
        mean,
        degenerate: false,
    }
}

impl Pca {
    /// `(pc1, pc2)` per sample; all zeros when degenerate.
    pub fn project(&self, features: &Tensor) -> Vec<(f64, f64)> {
        (0..features.cols())
            .map(|q| {
                if self.degenerate {
                    return (0.0, 0.0);
                }
                let x: Vec<f64> = (0..features.rows()).map(|r| features.get(r, q) - self.mean[r]).collect();
                (dot(&x, &self.components[0]), dot(&x, &self.components[1]))
            })
            .collect()
    }
}

pub const PROJECTION_HEADER: &str = "epoch,modality,pc1,pc2,degenerate";

/// CSV rows for one feature matrix.
pub fn projection_rows(epoch: usize, modality: &str, features: &Tensor, out: &mut String) {
    let p = pca(features);
    for (a, b) in p.project(features) {
        out.push_str(&format!("{epoch},{modality},{a},{b},{}\n", p.degenerate as u8));
    }
}
