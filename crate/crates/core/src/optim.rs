//! Small unconstrained minimizer used for covariance updates.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub(crate) x: DVector<f64>,
    pub(crate) converged: bool,
}

/// Central-difference gradient with step `h` per coordinate.
pub(crate) fn central_gradient(
    f: &impl Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        g[i] = if plus.is_finite() && minus.is_finite() {
            (plus - minus) / (2.0 * h)
        } else {
            0.0
        };
    }
    g
}

/// BFGS with Armijo backtracking. `f` may return `+inf` outside its domain;
/// the line search halves the step until it lands inside.
pub(crate) fn minimize_bfgs(
    f: &impl Fn(&DVector<f64>) -> f64,
    grad: &impl Fn(&DVector<f64>) -> DVector<f64>,
    x0: DVector<f64>,
    max_iter: usize,
    gtol: f64,
) -> Minimum {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = grad(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        if g.amax() < gtol {
            return Minimum {
                x,
                converged: true,
            };
        }
        let mut dir = -(&h_inv * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = -g.norm_squared();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            return Minimum {
                x,
                converged: false,
            };
        };
        let g_new = grad(&x_new);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let done = (fx - f_new).abs() <= 1e-15 * (1.0 + fx.abs());
        x = x_new;
        fx = f_new;
        g = g_new;
        if done {
            return Minimum {
                x,
                converged: true,
            };
        }
    }
    Minimum {
        x,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &DVector<f64>| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let g = |x: &DVector<f64>| {
            DVector::from_vec(vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ])
        };
        let m = minimize_bfgs(&f, &g, DVector::from_vec(vec![-1.2, 1.0]), 500, 1e-10);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
        assert!(f(&m.x) < 1e-12 && m.converged);
    }

    #[test]
    fn respects_domain() {
        let f = |x: &DVector<f64>| if x[0] <= 0.0 { f64::INFINITY } else { x[0] - x[0].ln() };
        let m = minimize_bfgs(&f, &|x| central_gradient(&f, x, 1e-7), DVector::from_vec(vec![5.0]), 200, 1e-8);
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }
}
