use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Krylov method for the symmetric positive definite noise system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrylovMethod {
    ConjugateGradient,
    /// Minimizes the residual norm, so it never increases between iterations.
    ConjugateResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrylovReport {
    pub method: KrylovMethod,
    pub iterations: usize,
    /// Residual 2-norm before the first and after every iteration.
    pub residual_norms: Vec<f64>,
    pub converged: bool,
}

// iterations over which the residual must have decreased
const STALL_WINDOW: usize = 10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Solves `M x = b` for SPD `M` given as `apply(v, out)`.
pub fn solve(
    apply: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    method: KrylovMethod,
    max_iterations: usize,
    tolerance: f64,
) -> Result<(Vec<f64>, KrylovReport)> {
    solve_preconditioned(apply, |v, out| out.copy_from_slice(v), b, method, max_iterations, tolerance)
}

/// As [`solve`], with an SPD preconditioner `precond(v, out)` approximating
/// `M^-1 v`. Convergence is judged on the unpreconditioned residual.
pub fn solve_preconditioned(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    mut precond: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    method: KrylovMethod,
    max_iterations: usize,
    tolerance: f64,
) -> Result<(Vec<f64>, KrylovReport)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = dot(b, b).sqrt();
    let mut report = KrylovReport {
        method,
        iterations: 0,
        residual_norms: vec![b_norm],
        converged: false,
    };
    if b_norm == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut mp = vec![0.0; n];
    match method {
        KrylovMethod::ConjugateGradient => {
            let mut rz = dot(&r, &z);
            for it in 1..=max_iterations {
                apply(&p, &mut mp);
                let alpha = rz / dot(&p, &mp);
                axpy(&mut x, alpha, &p);
                axpy(&mut r, -alpha, &mp);
                if !track(&mut report, dot(&r, &r).sqrt(), b_norm, tolerance, it)? {
                    break;
                }
                precond(&r, &mut z);
                let rz_new = dot(&r, &z);
                let beta = rz_new / rz;
                rz = rz_new;
                for (pi, zi) in p.iter_mut().zip(&z) {
                    *pi = zi + beta * *pi;
                }
            }
        }
        KrylovMethod::ConjugateResidual => {
            let mut mz = vec![0.0; n];
            let mut q = vec![0.0; n];
            apply(&z, &mut mz);
            mp.copy_from_slice(&mz);
            let mut zmz = dot(&z, &mz);
            for it in 1..=max_iterations {
                precond(&mp, &mut q);
                let alpha = zmz / dot(&mp, &q);
                axpy(&mut x, alpha, &p);
                axpy(&mut r, -alpha, &mp);
                axpy(&mut z, -alpha, &q);
                if !track(&mut report, dot(&r, &r).sqrt(), b_norm, tolerance, it)? {
                    break;
                }
                apply(&z, &mut mz);
                let zmz_new = dot(&z, &mz);
                let beta = zmz_new / zmz;
                zmz = zmz_new;
                for i in 0..n {
                    p[i] = z[i] + beta * p[i];
                    mp[i] = mz[i] + beta * mp[i];
                }
            }
        }
    }
    Ok((x, report))
}

/// Records an iteration; `Ok(false)` means converged.
fn track(report: &mut KrylovReport, norm: f64, b_norm: f64, tolerance: f64, it: usize) -> Result<bool> {
    report.iterations = it;
    report.residual_norms.push(norm);
    if !norm.is_finite() {
        return Err(Error::non_finite("Krylov residual"));
    }
    if norm <= tolerance * b_norm {
        report.converged = true;
        return Ok(false);
    }
    let h = &report.residual_norms;
    if h.len() > STALL_WINDOW && norm >= h[h.len() - 1 - STALL_WINDOW] {
        return Err(Error::CgStalled(STALL_WINDOW));
    }
    Ok(true)
}
