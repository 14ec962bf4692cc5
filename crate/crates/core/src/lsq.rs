//! Small dense Levenberg-Marquardt solver shared by the PSF and Lorentzian fits.

/// Least-squares model: fills residuals and the row-major Jacobian
/// (`n_residuals x n_params`) at `params`.
pub(crate) trait Model {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn evaluate(&self, params: &[f64], residuals: &mut [f64], jacobian: &mut [f64]);
    /// Rejects parameter vectors outside the model's domain.
    fn admissible(&self, _params: &[f64]) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub params: Vec<f64>,
    /// Half the sum of squared residuals at `params`.
    #[cfg_attr(not(test), allow(dead_code))]
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Settings {
    pub max_iterations: usize,
    /// Converged once an accepted step changes the cost by less than this
    /// relative amount.
    pub rel_tol: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            max_iterations: 100,
            rel_tol: 1e-8,
        }
    }
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

pub(crate) fn solve<M: Model>(model: &M, init: &[f64], settings: Settings) -> Outcome {
    let n = model.n_params();
    let m = model.n_residuals();
    let mut params = init.to_vec();
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut r_trial = vec![0.0; m];
    let mut jac_trial = vec![0.0; m * n];
    model.evaluate(&params, &mut r, &mut jac);
    let mut cost = cost_of(&r);
    let mut lambda = 1e-3;
    let mut jtj = vec![0.0; n * n];
    let mut jtr = vec![0.0; n];
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        iterations += 1;
        if cost == 0.0 {
            return Outcome {
                params,
                cost,
                iterations,
                converged: true,
            };
        }
        jtj.iter_mut().for_each(|x| *x = 0.0);
        jtr.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..m {
            let row = &jac[k * n..(k + 1) * n];
            for i in 0..n {
                jtr[i] += row[i] * r[k];
                for j in 0..=i {
                    jtj[i * n + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                jtj[j * n + i] = jtj[i * n + j];
            }
        }

        // Inner loop: raise damping until a step lowers the cost.
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[i * n + i] += lambda * jtj[i * n + i].max(1e-300);
            }
            let Some(delta) = solve_spd(&mut a, &jtr, n) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = params.iter().zip(&delta).map(|(p, d)| p - d).collect();
            if !model.admissible(&trial) {
                lambda *= 10.0;
                continue;
            }
            model.evaluate(&trial, &mut r_trial, &mut jac_trial);
            let trial_cost = cost_of(&r_trial);
            if trial_cost.is_finite() && trial_cost <= cost {
                let rel_change = (cost - trial_cost) / cost;
                params = trial;
                std::mem::swap(&mut r, &mut r_trial);
                std::mem::swap(&mut jac, &mut jac_trial);
                cost = trial_cost;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel_change < settings.rel_tol {
                    return Outcome {
                        params,
                        cost,
                        iterations,
                        converged: true,
                    };
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left at any damping: a stationary point.
            return Outcome {
                params,
                cost,
                iterations,
                converged: true,
            };
        }
    }
    Outcome {
        params,
        cost,
        iterations,
        converged: false,
    }
}

/// Cholesky solve of the `n x n` SPD system `a x = b`; `None` when not positive definite.
fn solve_spd(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Some(y)
}
