//! Deterministic L2-regularized logistic regression.
//!
//! Damped Newton on the objective 0.5 ||w||^2 + C * sum_i log(1 + exp(-y_i
//! (x_i.w + b))) with y in {-1, +1}; the intercept is unpenalized. Full-batch,
//! fixed iteration cap, fixed tolerance: the same data always produces the
//! same weights.

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log1p_exp(z: f64) -> f64 {
    // log(1 + exp(z)) without overflow.
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// In-place Cholesky solve of the symmetric positive definite system A x = b.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::numeric("Hessian not positive definite"));
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= a[i * n + k] * b[k];
        }
        b[i] = sum / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in i + 1..n {
            sum -= a[k * n + i] * b[k];
        }
        b[i] = sum / a[i * n + i];
    }
    Ok(())
}

/// Fit on rows `x` (n x d, row-major) with binary labels. `c` is the inverse
/// regularization strength: larger c, weaker regularization.
pub fn fit_logistic(
    x: &[f64],
    d: usize,
    labels: &[u8],
    c: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LogisticModel> {
    let n = labels.len();
    if n == 0 || x.len() != n * d {
        return Err(Error::validation("feature matrix shape mismatch"));
    }
    if c <= 0.0 {
        return Err(Error::validation("inverse regularization C must be > 0"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == n {
        return Err(Error::validation(
            "logistic regression needs both classes in the training data",
        ));
    }

    let dim = d + 1; // weights then bias
    let mut theta = vec![0.0f64; dim];
    let mut margins = vec![0.0f64; n];

    let objective = |theta: &[f64], margins: &mut [f64]| -> f64 {
        let mut obj = 0.5 * theta[..d].iter().map(|w| w * w).sum::<f64>();
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let m = row.iter().zip(&theta[..d]).map(|(v, w)| v * w).sum::<f64>() + theta[d];
            margins[i] = m;
            let y = if labels[i] == 1 { 1.0 } else { -1.0 };
            obj += c * log1p_exp(-y * m);
        }
        obj
    };

    let mut obj = objective(&theta, &mut margins);
    let mut iterations = 0;
    let mut converged = false;

    let mut grad = vec![0.0f64; dim];
    let mut hess = vec![0.0f64; dim * dim];

    while iterations < max_iter {
        iterations += 1;

        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        for (g, w) in grad[..d].iter_mut().zip(&theta[..d]) {
            *g = *w;
        }
        for i in 0..d {
            hess[i * dim + i] = 1.0;
        }
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let p = sigmoid(margins[i]);
            let t = f64::from(labels[i]);
            let r = c * (p - t);
            let w_h = c * p * (1.0 - p);
            for (j, &xv) in row.iter().enumerate() {
                grad[j] += r * xv;
                for (k, &xk) in row.iter().enumerate().skip(j) {
                    hess[j * dim + k] += w_h * xv * xk;
                }
                hess[j * dim + d] += w_h * xv;
            }
            grad[d] += r;
            hess[d * dim + d] += w_h;
        }
        // Mirror the upper triangle and add a tiny ridge for separable data.
        for j in 0..dim {
            hess[j * dim + j] += 1e-10;
            for k in j + 1..dim {
                hess[k * dim + j] = hess[j * dim + k];
            }
        }

        let grad_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf < tol {
            converged = true;
            break;
        }

        let mut step = grad.clone();
        let mut chol = hess.clone();
        cholesky_solve(&mut chol, &mut step, dim)?;

        // Backtracking line search on the Newton direction.
        let mut t_step = 1.0f64;
        let mut improved = false;
        let mut candidate = vec![0.0f64; dim];
        let mut cand_margins = vec![0.0f64; n];
        for _ in 0..40 {
            for j in 0..dim {
                candidate[j] = theta[j] - t_step * step[j];
            }
            let cand_obj = objective(&candidate, &mut cand_margins);
            if cand_obj < obj {
                let rel_drop = (obj - cand_obj) / obj.abs().max(1.0);
                theta.copy_from_slice(&candidate);
                margins.copy_from_slice(&cand_margins);
                obj = cand_obj;
                improved = true;
                if rel_drop < 1e-12 {
                    converged = true;
                }
                break;
            }
            t_step *= 0.5;
        }
        if !improved || converged {
            converged = converged || !improved;
            break;
        }
    }

    Ok(LogisticModel {
        weights: theta[..d].to_vec(),
        bias: theta[d],
        c,
        iterations,
        converged,
    })
}
