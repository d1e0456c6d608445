//! Equality-constrained minimization `min f(z) s.t. c(z) = 0` by an augmented
//! Lagrangian with a BFGS inner solver, followed by a Gauss-Newton projection
//! back onto the constraint set.

use nalgebra::{DMatrix, DVector};

pub type ValueGrad<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;
/// Constraint residual and its Jacobian (`m × n`).
pub type Constraint<'a> = dyn Fn(&[f64]) -> (Vec<f64>, DMatrix<f64>) + 'a;

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub grad_tol: f64,
    pub mu0: f64,
    pub mu_max: f64,
    /// Stop the outer loop once `‖c‖ / scale` drops below this.
    pub outer_tol: f64,
    pub polish_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer: 40,
            max_inner: 400,
            grad_tol: 1e-10,
            mu0: 10.0,
            mu_max: 1e10,
            outer_tol: 1e-11,
            polish_steps: 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub z: Vec<f64>,
    pub value: f64,
    /// `‖c(z)‖ / scale`.
    pub residual: f64,
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quasi-Newton minimization with Armijo backtracking.
pub fn bfgs(f: &ValueGrad, x0: Vec<f64>, max_iter: usize, grad_tol: f64) -> Vec<f64> {
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return x;
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut trial = vec![0.0; n];
    for _ in 0..max_iter {
        if g.iter().all(|v| v.abs() < grad_tol) {
            break;
        }
        let gv = DVector::from_column_slice(&g);
        let mut p: Vec<f64> = (-(&h * &gv)).iter().copied().collect();
        let mut slope = dotv(&g, &p);
        if !(slope < 0.0) {
            h.fill_with_identity();
            p = g.iter().map(|v| -v).collect();
            slope = -dotv(&g, &g);
        }
        let mut alpha = 1.0;
        let accepted = loop {
            for ((t, xi), pi) in trial.iter_mut().zip(&x).zip(&p) {
                *t = xi + alpha * pi;
            }
            let (ft, gt) = f(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope {
                break Some((ft, gt));
            }
            alpha *= 0.5;
            if alpha < 1e-20 {
                break None;
            }
        };
        let Some((fnew, gnew)) = accepted else {
            break;
        };
        let s: Vec<f64> = p.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dotv(&s, &y);
        if sy > 1e-14 * dotv(&s, &s).sqrt() * dotv(&y, &y).sqrt() {
            let rho = 1.0 / sy;
            let sv = DVector::from_column_slice(&s);
            let yv = DVector::from_column_slice(&y);
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H' = H - ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h -= rho * (&hy * sv.transpose() + &sv * hy.transpose());
            h += (rho * rho * yhy + rho) * (&sv * sv.transpose());
        }
        let stalled = (fx - fnew).abs() <= 1e-16 * (1.0 + fx.abs());
        x.copy_from_slice(&trial);
        fx = fnew;
        g = gnew;
        if stalled && alpha < 1e-8 {
            break;
        }
    }
    x
}

/// Minimizes `f` subject to `c = 0` from `z0`. `scale` normalizes the residual.
pub fn augmented_lagrangian(
    f: &ValueGrad,
    c: &Constraint,
    z0: Vec<f64>,
    scale: f64,
    opts: &SolverOptions,
) -> Solution {
    let (c0, _) = c(&z0);
    let mut lambda = vec![0.0; c0.len()];
    let mut mu = opts.mu0;
    let mut z = z0;
    let mut prev = f64::INFINITY;
    for _ in 0..opts.max_outer {
        let lag = |x: &[f64]| {
            let (fv, mut g) = f(x);
            let (cv, jac) = c(x);
            let w: Vec<f64> = cv.iter().zip(&lambda).map(|(ci, li)| li + mu * ci).collect();
            let value = fv + dotv(&lambda, &cv) + 0.5 * mu * dotv(&cv, &cv);
            let jt = jac.transpose() * DVector::from_column_slice(&w);
            for (gi, ji) in g.iter_mut().zip(jt.iter()) {
                *gi += ji;
            }
            (value, g)
        };
        z = bfgs(&lag, z, opts.max_inner, opts.grad_tol);
        let (cv, _) = c(&z);
        let res = dotv(&cv, &cv).sqrt() / scale;
        if !res.is_finite() {
            break;
        }
        if res < opts.outer_tol {
            break;
        }
        for (l, ci) in lambda.iter_mut().zip(&cv) {
            *l += mu * ci;
        }
        if res > 0.25 * prev {
            mu = (mu * 10.0).min(opts.mu_max);
        }
        prev = res;
    }
    polish(c, &mut z, scale, opts.polish_steps);
    let (cv, _) = c(&z);
    Solution {
        value: f(&z).0,
        residual: dotv(&cv, &cv).sqrt() / scale,
        z,
    }
}

/// Minimum-norm Gauss-Newton steps on `c(z) = 0`; keeps the best iterate.
fn polish(c: &Constraint, z: &mut Vec<f64>, scale: f64, steps: usize) {
    let (cv, _) = c(z);
    let mut best = dotv(&cv, &cv).sqrt() / scale;
    for _ in 0..steps {
        if !(best > 1e-14) {
            return;
        }
        let (cv, jac) = c(z);
        let svd = jac.svd(true, true);
        let Ok(delta) = svd.solve(&DVector::from_column_slice(&cv), 1e-12) else {
            return;
        };
        let cand: Vec<f64> = z.iter().zip(delta.iter()).map(|(a, d)| a - d).collect();
        let (cn, _) = c(&cand);
        let res = dotv(&cn, &cn).sqrt() / scale;
        if res < best {
            best = res;
            *z = cand;
        } else {
            return;
        }
    }
}
