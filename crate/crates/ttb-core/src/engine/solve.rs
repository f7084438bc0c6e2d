//! Dense symmetric positive-definite solves for the per-slice mean
//! systems. Small systems get an exact Cholesky; larger ones use
//! Gauss-Seidel warm-started from the current means, which converges on
//! any SPD system and is cheap once the sweep is near its fixed point.

use ndarray::Array2;

const CHOLESKY_MAX: usize = 256;
const GS_TOL: f64 = 1e-14;
const GS_MAX_SWEEPS: usize = 4000;

pub(crate) fn solve_spd(
    s: &Array2<f64>,
    rhs: &[f64],
    warm: &[f64],
) -> Result<Vec<f64>, String> {
    let n = rhs.len();
    debug_assert_eq!(s.dim(), (n, n));
    if n <= CHOLESKY_MAX {
        cholesky_solve(s, rhs)
    } else {
        Ok(gauss_seidel(s, rhs, warm))
    }
}

fn cholesky_solve(s: &Array2<f64>, rhs: &[f64]) -> Result<Vec<f64>, String> {
    let n = rhs.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s[[i, j]];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(format!("nonpositive pivot {sum} at {i}"));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // forward: L y = rhs
    let mut y = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    // backward: L^T x = y
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    Ok(y)
}

fn gauss_seidel(s: &Array2<f64>, rhs: &[f64], warm: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut x = warm.to_vec();
    for _ in 0..GS_MAX_SWEEPS {
        let mut max_delta = 0.0f64;
        let mut max_x = 0.0f64;
        for i in 0..n {
            let row = s.row(i);
            let mut acc = rhs[i];
            for j in 0..n {
                if j != i {
                    acc -= row[j] * x[j];
                }
            }
            let new = acc / row[i];
            max_delta = max_delta.max((new - x[i]).abs());
            x[i] = new;
            max_x = max_x.max(new.abs());
        }
        if max_delta <= GS_TOL * (max_x + 1e-300) {
            break;
        }
    }
    x
}
