//! Small unconstrained minimisers used by the maximum-likelihood fits.

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Stop when the spread of simplex values falls below this (absolute + relative).
    pub f_tol: f64,
    /// Stop when the simplex diameter falls below this.
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_iter: 2000,
            f_tol: 1e-12,
            x_tol: 1e-10,
        }
    }
}

/// Downhill simplex with standard coefficients. Non-finite objective values
/// are treated as `+inf`.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: &[f64], opts: NelderMeadOptions) -> Minimum {
    let d = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += step[i];
        simplex.push(x);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fv = order.iter().map(|&i| fv[i]).collect();

        let spread = (fv[d] - fv[0]).abs();
        let diam = simplex[1..]
            .iter()
            .map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if fv[0].is_finite() && spread <= opts.f_tol * (1.0 + fv[0].abs()) && diam <= opts.x_tol.max(1e-4) {
            converged = true;
            break;
        }
        if diam <= opts.x_tol {
            converged = fv[0].is_finite();
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|x| x[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let fr = eval(&xr);
        if fr < fv[0] {
            let xe = along(gamma);
            let fe = eval(&xe);
            if fe < fr {
                simplex[d] = xe;
                fv[d] = fe;
            } else {
                simplex[d] = xr;
                fv[d] = fr;
            }
            continue;
        }
        if fr < fv[d - 1] {
            simplex[d] = xr;
            fv[d] = fr;
            continue;
        }
        let (xc, fc) = if fr < fv[d] {
            let x = along(rho);
            let v = eval(&x);
            (x, v)
        } else {
            let x = along(-rho);
            let v = eval(&x);
            (x, v)
        };
        if fc < fv[d].min(fr) {
            simplex[d] = xc;
            fv[d] = fc;
            continue;
        }
        for i in 1..=d {
            let x: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[i])
                .map(|(b, v)| b + sigma * (v - b))
                .collect();
            fv[i] = eval(&x);
            simplex[i] = x;
        }
    }
    let best = (0..=d).min_by(|&a, &b| fv[a].total_cmp(&fv[b])).unwrap();
    Minimum {
        x: simplex[best].clone(),
        value: fv[best],
        iterations,
        converged,
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[piv][col].abs() > 0.0) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let m = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= m * a[col][c];
            }
            b[r] -= m * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Damped Newton iterations from `x0` with a finite-difference Hessian of
/// `grad`. Converged when the gradient max-norm drops below `grad_tol` or the
/// accepted step is below `step_tol` in every coordinate.
pub fn newton_refine(
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    max_iter: usize,
    grad_tol: f64,
    step_tol: f64,
) -> Minimum {
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut iterations = 0;
    let mut converged = false;
    let norm = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    while iterations < max_iter {
        let g = grad(&x);
        if !g.iter().all(|v| v.is_finite()) {
            break;
        }
        if norm(&g) < grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut hess = vec![vec![0.0; d]; d];
        for j in 0..d {
            let h = 1e-5 * (1.0 + x[j].abs());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let (gp, gm) = (grad(&xp), grad(&xm));
            for i in 0..d {
                hess[i][j] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        for i in 0..d {
            for j in 0..i {
                let s = 0.5 * (hess[i][j] + hess[j][i]);
                hess[i][j] = s;
                hess[j][i] = s;
            }
        }
        // Levenberg damping until the step is a descent direction that lowers f
        let scale = (0..d).map(|i| hess[i][i].abs()).fold(1e-12, f64::max);
        let mut lambda = 0.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut a = hess.clone();
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += lambda;
            }
            if let Some(step) = solve_linear(a, g.iter().map(|v| -v).collect()) {
                let descent: f64 = step.iter().zip(&g).map(|(s, gi)| s * gi).sum();
                if descent < 0.0 {
                    let xn: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + s).collect();
                    let fnew = f(&xn);
                    if fnew.is_finite() && fnew <= fx + 1e-4 * descent {
                        accepted = Some((xn, fnew, step));
                        break;
                    }
                }
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { lambda * 10.0 };
        }
        let Some((xn, fnew, step)) = accepted else {
            break;
        };
        let small = step
            .iter()
            .zip(&xn)
            .all(|(s, v)| s.abs() <= step_tol * (1.0 + v.abs()));
        x = xn;
        fx = fnew;
        if small {
            converged = true;
            break;
        }
    }
    Minimum {
        x,
        value: fx,
        iterations,
        converged,
    }
}
