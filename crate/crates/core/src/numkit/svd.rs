use super::matrix::{dot, norm};
use super::{Matrix, NumError, SVD_DIM_LIMIT};

/// Full singular value decomposition `m = U * diag(sigma) * V^T`.
///
/// `u` is rows x rows, `v` is cols x cols, both with orthonormal columns;
/// `sigma` has length `min(rows, cols)`, sorted descending, non-negative.
///
/// The algorithm is one-sided Jacobi applied to the smaller dimension:
/// cyclic rotations orthogonalize the working columns, singular values are
/// their norms, and left vectors follow by normalization. Columns that end
/// up numerically zero (and the extra columns of a full tall `U`) are
/// completed to an orthonormal basis with modified Gram-Schmidt.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

/// Jacobi sweep budget; exceeding it is a hard numeric error.
const MAX_SWEEPS: usize = 60;
/// Relative off-diagonal threshold for a column pair to count as orthogonal.
const OFF_DIAG_TOL: f64 = 1e-12;
/// Columns with norm below this fraction of sigma_max are treated as dead.
const DEAD_COLUMN_TOL: f64 = 1e-13;

impl Svd {
    pub fn compute(m: &Matrix) -> Result<Svd, NumError> {
        m.validate_finite()?;
        let small = m.rows().min(m.cols());
        if small > SVD_DIM_LIMIT {
            return Err(NumError::TooLarge(small));
        }
        if m.rows() >= m.cols() {
            compute_tall(m)
        } else {
            let t = compute_tall(&m.transpose())?;
            Ok(Svd {
                u: t.v,
                sigma: t.sigma,
                v: t.u,
            })
        }
    }

    /// Reconstruction `U * diag(sigma) * V^T`, mostly for diagnostics.
    pub fn reconstruct(&self) -> Matrix {
        let rows = self.u.rows();
        let cols = self.v.rows();
        Matrix::from_fn(rows, cols, |i, j| {
            self.sigma
                .iter()
                .enumerate()
                .map(|(k, s)| self.u.get(i, k) * s * self.v.get(j, k))
                .sum()
        })
    }

    /// Numerical rank under the standard `max(dim) * sigma_max * 1e-12`
    /// threshold.
    pub fn rank(&self, rows: usize, cols: usize) -> usize {
        let tau = rank_threshold(rows, cols, self.sigma.first().copied().unwrap_or(0.0));
        self.sigma.iter().filter(|&&s| s > tau).count()
    }
}

impl Matrix {
    pub fn svd(&self) -> Result<Svd, NumError> {
        Svd::compute(self)
    }
}

/// Rank cutoff `max(rows, cols) * sigma_max * 1e-12`.
pub fn rank_threshold(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * 1e-12
}

fn compute_tall(m: &Matrix) -> Result<Svd, NumError> {
    let (rows, cols) = m.shape();
    debug_assert!(rows >= cols);
    if cols == 0 {
        return Ok(Svd {
            u: Matrix::identity(rows),
            sigma: Vec::new(),
            v: Matrix::identity(0),
        });
    }

    // Work on columns: w[j] is the j-th column of the evolving matrix.
    let mut w: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let frob = m.frobenius_norm();
    let dead_floor = 1e-14 * frob;

    if frob > 0.0 {
        let mut converged = false;
        let mut residual = 0.0f64;
        for _sweep in 0..MAX_SWEEPS {
            let mut rotated = false;
            residual = 0.0;
            for p in 0..cols - 1 {
                for q in p + 1..cols {
                    let a = dot(&w[p], &w[p]);
                    let b = dot(&w[q], &w[q]);
                    let d = dot(&w[p], &w[q]);
                    let scale = (a * b).sqrt();
                    if scale <= dead_floor * dead_floor {
                        continue;
                    }
                    let cosine = d.abs() / scale;
                    residual = residual.max(cosine);
                    if cosine <= OFF_DIAG_TOL {
                        continue;
                    }
                    let zeta = (b - a) / (2.0 * d);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate_pair(&mut w, p, q, c, s);
                    rotate_pair(&mut v, p, q, c, s);
                    rotated = true;
                }
            }
            if !rotated {
                converged = true;
                break;
            }
        }
        if !converged {
            // One clean pass to report the worst remaining cosine.
            let mut worst = residual;
            for p in 0..cols - 1 {
                for q in p + 1..cols {
                    let scale = (dot(&w[p], &w[p]) * dot(&w[q], &w[q])).sqrt();
                    if scale > dead_floor * dead_floor {
                        let cosine = dot(&w[p], &w[q]).abs() / scale;
                        if cosine > OFF_DIAG_TOL {
                            worst = worst.max(cosine);
                        } else {
                            worst = worst.max(0.0);
                        }
                    }
                }
            }
            if worst > OFF_DIAG_TOL {
                return Err(NumError::NoConvergence {
                    sweeps: MAX_SWEEPS,
                    residual: worst,
                });
            }
        }
    }

    // Singular values and descending sort.
    let mut order: Vec<usize> = (0..cols).collect();
    let sigmas: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]));
    let sigma: Vec<f64> = order.iter().map(|&j| sigmas[j]).collect();
    let w: Vec<Vec<f64>> = order.iter().map(|&j| std::mem::take(&mut w[j])).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&j| std::mem::take(&mut v[j])).collect();

    // Left vectors: normalized working columns where sigma carries signal,
    // orthonormal completion elsewhere (and for the tall extension).
    let sigma_max = sigma[0];
    let keep_floor = DEAD_COLUMN_TOL * sigma_max;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for (j, col) in w.iter().enumerate() {
        if sigma[j] > keep_floor {
            u_cols.push(col.iter().map(|x| x / sigma[j]).collect());
        }
    }
    complete_basis(&mut u_cols, rows);

    let u = Matrix::from_fn(rows, rows, |i, j| u_cols[j][i]);
    let v = Matrix::from_fn(cols, cols, |i, j| v[j][i]);
    Ok(Svd { u, sigma, v })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (head, tail) = cols.split_at_mut(hi);
    let (wp, wq) = (&mut head[lo], &mut tail[0]);
    for (x, y) in wp.iter_mut().zip(wq.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

/// Extend `basis` (orthonormal vectors of length `dim`) to `dim` vectors
/// using standard-basis candidates, modified Gram-Schmidt, two passes.
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize) {
    let orthogonalize = |basis: &[Vec<f64>], v: &mut Vec<f64>| {
        for u in basis {
            let c = dot(u, v);
            for (x, y) in v.iter_mut().zip(u) {
                *x -= c * y;
            }
        }
    };
    // Greedy pass: accept candidates that keep a healthy residual.
    for k in 0..dim {
        if basis.len() == dim {
            return;
        }
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        orthogonalize(basis, &mut v);
        orthogonalize(basis, &mut v);
        let n = norm(&v);
        if n > 0.5 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    // Fallback for nearly-covered directions: take whatever candidate keeps
    // the largest residual, then re-orthogonalize after normalizing.
    while basis.len() < dim {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..dim {
            let mut v = vec![0.0; dim];
            v[k] = 1.0;
            orthogonalize(basis, &mut v);
            orthogonalize(basis, &mut v);
            let n = norm(&v);
            if best.as_ref().map_or(true, |(bn, _)| n > *bn) {
                best = Some((n, v));
            }
        }
        let (n, mut v) = best.expect("dim > 0");
        v.iter_mut().for_each(|x| *x /= n);
        orthogonalize(basis, &mut v);
        let n2 = norm(&v);
        v.iter_mut().for_each(|x| *x /= n2);
        basis.push(v);
    }
}

/// Orthonormal basis of the row space of `m`, one basis vector per row of
/// the returned matrix. Rank is decided by [`rank_threshold`]; a zero
/// matrix yields a 0 x cols result.
pub fn orthonormal_rowspace_basis(m: &Matrix) -> Result<Matrix, NumError> {
    let svd = Svd::compute(m)?;
    let k = svd.rank(m.rows(), m.cols());
    Ok(Matrix::from_fn(k, m.cols(), |i, j| svd.v.get(j, i)))
}
