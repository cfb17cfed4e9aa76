//! Dense symmetric linear algebra: Cholesky, cyclic Jacobi eigensolver and
//! the symmetric-definite generalized eigenproblem `A W = B W Λ`.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Square `dim × dim` matrix.
pub type SquareMatrix = Array2<f64>;

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 64;

/// Generalized eigenpairs sorted by ascending eigenvalue; column `j` of
/// `eigenvectors` belongs to `eigenvalues[j]` and the columns are
/// `B`-orthonormal.
#[derive(Debug, Clone)]
pub struct GenEigResult {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

pub fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn check_square(m: &Array2<f64>, what: &str) -> Result<usize> {
    let (r, c) = m.dim();
    if r != c || r == 0 {
        return Err(Error::shape(format!("{what} must be square and non-empty, got {r}x{c}")));
    }
    Ok(r)
}

/// Checks symmetry against a scale-aware tolerance and returns `(M + Mᵀ)/2`.
pub fn symmetrized(m: &Array2<f64>) -> Result<Array2<f64>> {
    check_square(m, "matrix")?;
    let asym = m
        .iter()
        .zip(m.t().iter())
        .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
    if asym > SYMMETRY_TOL * max_abs(m).max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok((m + &m.t()) * 0.5)
}

/// Lower-triangular `L` with `L Lᵀ = B`.
pub fn cholesky(b: &SquareMatrix) -> Result<SquareMatrix> {
    let b = symmetrized(b)?;
    let n = b.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = b[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j + 1 });
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut s = b[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L X = R` for lower-triangular `L`.
pub fn solve_lower(l: &SquareMatrix, rhs: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = rhs.clone();
    for mut col in x.axis_iter_mut(Axis(1)) {
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[[i, k]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
    }
    x
}

/// Solves `Lᵀ X = R` for lower-triangular `L`.
pub fn solve_upper_t(l: &SquareMatrix, rhs: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = rhs.clone();
    for mut col in x.axis_iter_mut(Axis(1)) {
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l[[k, i]] * col[k];
            }
            col[i] = s / l[[i, i]];
        }
    }
    x
}

/// Solves `B X = R` for symmetric positive definite `B`.
pub fn spd_solve(b: &SquareMatrix, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let l = cholesky(b)?;
    Ok(solve_upper_t(&l, &solve_lower(&l, rhs)))
}

pub fn spd_inverse(b: &SquareMatrix) -> Result<SquareMatrix> {
    let inv = spd_solve(b, &Array2::eye(b.nrows()))?;
    Ok((&inv + &inv.t()) * 0.5)
}

/// Flips each column so its largest-magnitude entry is positive.
fn normalize_signs(v: &mut Array2<f64>) {
    for mut col in v.axis_iter_mut(Axis(1)) {
        let mut pivot = 0.0_f64;
        for &x in col.iter() {
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        if pivot < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

fn sort_ascending(values: Array1<f64>, vectors: Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let sorted_values = order.iter().map(|&i| values[i]).collect();
    let sorted_vectors = vectors.select(Axis(1), &order);
    (sorted_values, sorted_vectors)
}

/// Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric
/// matrix by cyclic Jacobi rotations.
pub fn sym_eig(c: &SquareMatrix) -> Result<(Array1<f64>, SquareMatrix)> {
    let mut a = symmetrized(c)?;
    let n = a.nrows();
    let mut v = Array2::<f64>::eye(n);

    let off_norm = |a: &Array2<f64>| {
        let mut s = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                s += a[[p, q]] * a[[p, q]];
            }
        }
        s.sqrt()
    };

    let mut converged = n == 1;
    for _sweep in 0..MAX_SWEEPS {
        if off_norm(&a) == 0.0 {
            converged = true;
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[[p, p]], a[[q, q]]);
                // Negligible against both diagonal entries: annihilate without rotating.
                let tiny = 1e2 * apq.abs();
                if app.abs() + tiny == app.abs() && aqq.abs() + tiny == aqq.abs() {
                    a[[p, q]] = 0.0;
                    a[[q, p]] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = cs * akp - sn * akq;
                    a[[k, q]] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = cs * apk - sn * aqk;
                    a[[q, k]] = sn * apk + cs * aqk;
                }
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = cs * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + cs * vkq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            off_norm: off_norm(&a),
        });
    }

    let (values, mut vectors) = sort_ascending(a.diag().to_owned(), v);
    normalize_signs(&mut vectors);
    Ok((values, vectors))
}

/// Solves `A W = B W Λ` for symmetric `A` and symmetric positive definite `B`
/// via `B = L Lᵀ`, `C = L⁻¹ A L⁻ᵀ`, `W = L⁻ᵀ V`.
pub fn gen_eig(a: &SquareMatrix, b: &SquareMatrix) -> Result<GenEigResult> {
    let a = symmetrized(a)?;
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "A is {:?} but B is {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let l = cholesky(b)?;
    let la = solve_lower(&l, &a);
    let c = solve_lower(&l, &la.t().to_owned());
    let c = (&c + &c.t()) * 0.5;
    let (eigenvalues, v) = sym_eig(&c)?;
    let mut eigenvectors = solve_upper_t(&l, &v);
    normalize_signs(&mut eigenvectors);
    Ok(GenEigResult {
        eigenvalues,
        eigenvectors,
    })
}
