//! Bounded Levenberg–Marquardt solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A nonlinear least-squares objective `½‖r(p)‖²`.
pub trait LeastSquares {
    fn n_params(&self) -> usize;

    fn n_residuals(&self) -> usize;

    fn residuals(&self, params: &[f64], out: &mut [f64]);

    /// Analytic Jacobian `∂rᵢ/∂pⱼ` (rows = residuals). Returns `false` when the
    /// problem has none, in which case central differences are used.
    fn jacobian(&self, _params: &[f64], _jac: &mut DMatrix<f64>) -> bool {
        false
    }
}

/// Solver configuration for one fit.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub initial: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub max_iterations: usize,
    /// Relative cost decrease below which an accepted step counts as stalled.
    pub tolerance: f64,
    pub names: Vec<String>,
}

impl FitProblem {
    pub fn new(initial: Vec<f64>) -> Self {
        let n = initial.len();
        Self {
            initial,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            max_iterations: 200,
            tolerance: 1e-10,
            names: (0..n).map(|i| format!("p{i}")).collect(),
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_names<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.names = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.initial.len();
        if n == 0 {
            return Err(Error::InvalidInput("fit has no parameters".into()));
        }
        if self.lower.len() != n || self.upper.len() != n || self.names.len() != n {
            return Err(Error::InvalidInput(
                "bounds and names must match the parameter count".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        for i in 0..n {
            let (lo, p, hi) = (self.lower[i], self.initial[i], self.upper[i]);
            if !(lo <= p && p <= hi) {
                return Err(Error::InvalidInput(format!(
                    "initial value of `{}` = {p} outside [{lo}, {hi}]",
                    self.names[i]
                )));
            }
        }
        Ok(())
    }

    fn project(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Outcome of [`lm_fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: Vec<f64>,
    /// `(JᵀJ)⁻¹ · cost / (m − n)` at the solution.
    pub covariance: DMatrix<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Half-width of the 95.4 % interval, `2·√covᵢᵢ`.
    pub ci95: Vec<f64>,
    pub names: Vec<String>,
    /// Cost after every accepted step (starting with the initial cost).
    pub cost_history: Vec<f64>,
}

impl FitResult {
    pub fn std_err(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }

    pub fn reduced_chi2(&self, n_residuals: usize) -> f64 {
        let dof = n_residuals.saturating_sub(self.params.len()).max(1);
        self.cost / dof as f64
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn finite_difference_jacobian<P: LeastSquares + ?Sized>(
    problem: &P,
    params: &[f64],
    jac: &mut DMatrix<f64>,
) {
    let m = problem.n_residuals();
    let mut p = params.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for j in 0..params.len() {
        let h = 1e-6 * params[j].abs().max(1e-3);
        p[j] = params[j] + h;
        problem.residuals(&p, &mut plus);
        p[j] = params[j] - h;
        problem.residuals(&p, &mut minus);
        p[j] = params[j];
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
}

fn evaluate_jacobian<P: LeastSquares + ?Sized>(problem: &P, params: &[f64], jac: &mut DMatrix<f64>) {
    if !problem.jacobian(params, jac) {
        finite_difference_jacobian(problem, params, jac);
    }
}

/// Solves `(A + λI)·δ = −g`; `None` when the system is not positive definite.
fn damped_step(a: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += lambda;
    }
    let chol = m.cholesky()?;
    let step = chol.solve(&(-g));
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Inverts `JᵀJ` after scaling it to unit diagonal, naming the parameter that
/// carries the null direction when the matrix is singular.
pub(crate) fn invert_normal_matrix(a: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut scale = vec![0.0; n];
    for i in 0..n {
        let d = a[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::RankDeficient {
                parameter: names[i].clone(),
            });
        }
        scale[i] = d.sqrt();
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (scale[i] * scale[j]));
    let eig = scaled.clone().symmetric_eigen();
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    if lmin < 1e-13 * n as f64 {
        let v = eig.eigenvectors.column(imin);
        let worst = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        return Err(Error::RankDeficient {
            parameter: names[worst].clone(),
        });
    }
    let inv = scaled
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient {
            parameter: names[imin.min(n - 1)].clone(),
        })?;
    Ok(DMatrix::from_fn(n, n, |i, j| inv[(i, j)] / (scale[i] * scale[j])))
}

/// Damped Gauss–Newton minimization of `‖r(p)‖²` with box constraints.
///
/// Damping starts at `10⁻³·max diag(JᵀJ)`, is multiplied by 10 after a
/// rejected step and divided by 10 after an accepted one. Every iteration
/// also probes the undamped Gauss–Newton step and keeps whichever trial point
/// has the lower cost, so problems that are linear in their parameters finish
/// in a single iteration. Bounds are enforced by projecting trial points.
pub fn lm_fit<P: LeastSquares + ?Sized>(problem: &P, fit: &FitProblem) -> Result<FitResult> {
    fit.validate()?;
    let n = fit.initial.len();
    if problem.n_params() != n {
        return Err(Error::InvalidInput(format!(
            "problem has {} parameters but {} initial values were given",
            problem.n_params(),
            n
        )));
    }
    let m = problem.n_residuals();
    if m == 0 {
        return Err(Error::InvalidInput("fit has no residuals".into()));
    }

    let mut params = fit.initial.clone();
    fit.project(&mut params);
    let mut r = vec![0.0; m];
    problem.residuals(&params, &mut r);
    let mut cost = sum_sq(&r);
    if !cost.is_finite() {
        return Err(Error::InvalidInput(
            "residuals are not finite at the initial parameters".into(),
        ));
    }

    let mut jac = DMatrix::zeros(m, n);
    evaluate_jacobian(problem, &params, &mut jac);
    let mut jtj = jac.tr_mul(&jac);
    let mut grad = jac.tr_mul(&DVector::from_column_slice(&r));
    let max_diag = (0..n).map(|i| jtj[(i, i)]).fold(0.0_f64, f64::max);
    let mut lambda = 1e-3 * if max_diag > 0.0 { max_diag } else { 1.0 };

    let mut history = vec![cost];
    let mut iterations = 0;
    let mut converged = cost == 0.0;
    let mut stalled_steps = 0;
    let mut trial = params.clone();
    let mut trial_r = vec![0.0; m];
    let mut gn = params.clone();
    let mut gn_r = vec![0.0; m];

    while !converged && iterations < fit.max_iterations {
        iterations += 1;

        let damped_cost = match damped_step(&jtj, &grad, lambda) {
            Some(step) => {
                for i in 0..n {
                    trial[i] = params[i] + step[i];
                }
                fit.project(&mut trial);
                problem.residuals(&trial, &mut trial_r);
                sum_sq(&trial_r)
            }
            None => f64::INFINITY,
        };
        let gn_cost = match damped_step(&jtj, &grad, 0.0) {
            Some(step) => {
                for i in 0..n {
                    gn[i] = params[i] + step[i];
                }
                fit.project(&mut gn);
                problem.residuals(&gn, &mut gn_r);
                sum_sq(&gn_r)
            }
            None => f64::INFINITY,
        };

        let (best_cost, use_gn) = if gn_cost.is_finite() && gn_cost < damped_cost {
            (gn_cost, true)
        } else {
            (damped_cost, false)
        };

        if best_cost.is_finite() && best_cost < cost {
            let rel = (cost - best_cost) / cost;
            if use_gn {
                params.copy_from_slice(&gn);
                r.copy_from_slice(&gn_r);
            } else {
                params.copy_from_slice(&trial);
                r.copy_from_slice(&trial_r);
            }
            cost = best_cost;
            history.push(cost);
            lambda = (lambda / 10.0).max(1e-300);

            // residuals at rounding level of the starting cost: nothing left to fit
            if cost == 0.0 || cost <= 1e-28 * history[0] {
                converged = true;
                break;
            }
            if rel < fit.tolerance {
                stalled_steps += 1;
                if stalled_steps >= 2 {
                    converged = true;
                    break;
                }
            } else {
                stalled_steps = 0;
            }
            evaluate_jacobian(problem, &params, &mut jac);
            jtj = jac.tr_mul(&jac);
            grad = jac.tr_mul(&DVector::from_column_slice(&r));
        } else {
            lambda *= 10.0;
            // No representable improvement left: the current point is a minimum
            // to machine precision.
            let scale = (0..n).map(|i| jtj[(i, i)]).fold(0.0_f64, f64::max).max(1e-300);
            if lambda > 1e16 * scale {
                converged = true;
                break;
            }
        }
    }

    evaluate_jacobian(problem, &params, &mut jac);
    let jtj = jac.tr_mul(&jac);
    let inv = invert_normal_matrix(&jtj, &fit.names)?;
    let dof = m.saturating_sub(n).max(1) as f64;
    let covariance = inv * (cost / dof);
    let ci95 = (0..n)
        .map(|i| 2.0 * covariance[(i, i)].max(0.0).sqrt())
        .collect();

    Ok(FitResult {
        params,
        covariance,
        cost,
        iterations,
        converged,
        ci95,
        names: fit.names.clone(),
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        x: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquares for Linear {
        fn n_params(&self) -> usize {
            1
        }
        fn n_residuals(&self) -> usize {
            self.x.len()
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            for ((o, x), y) in out.iter_mut().zip(&self.x).zip(&self.y) {
                *o = p[0] * x - y;
            }
        }
        fn jacobian(&self, _p: &[f64], jac: &mut DMatrix<f64>) -> bool {
            for (i, &x) in self.x.iter().enumerate() {
                jac[(i, 0)] = x;
            }
            true
        }
    }

    struct Rosenbrock;

    impl LeastSquares for Rosenbrock {
        fn n_params(&self) -> usize {
            2
        }
        fn n_residuals(&self) -> usize {
            2
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            out[0] = 10.0 * (p[1] - p[0] * p[0]);
            out[1] = 1.0 - p[0];
        }
        fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) -> bool {
            jac[(0, 0)] = -20.0 * p[0];
            jac[(0, 1)] = 10.0;
            jac[(1, 0)] = -1.0;
            jac[(1, 1)] = 0.0;
            true
        }
    }

    #[test]
    fn linear_model_is_exact_in_one_iteration() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let res = lm_fit(&Linear { x, y }, &FitProblem::new(vec![0.0])).unwrap();
        assert_eq!(res.iterations, 1, "{res:?}");
        assert!(res.converged);
        assert!((res.params[0] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn rosenbrock_converges() {
        let res = lm_fit(&Rosenbrock, &FitProblem::new(vec![-1.2, 1.0])).unwrap();
        assert!(res.converged);
        assert!((res.params[0] - 1.0).abs() < 1e-6);
        assert!((res.params[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cost_history_is_non_increasing() {
        let res = lm_fit(&Rosenbrock, &FitProblem::new(vec![-1.2, 1.0])).unwrap();
        for w in res.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn bounds_are_respected() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let fit = FitProblem::new(vec![0.0]).with_bounds(vec![-1.0], vec![1.0]);
        let res = lm_fit(&Linear { x, y }, &fit).unwrap();
        assert_eq!(res.params[0], 1.0);
    }

    #[test]
    fn inconsistent_bounds_rejected() {
        let fit = FitProblem::new(vec![5.0]).with_bounds(vec![-1.0], vec![1.0]);
        let err = lm_fit(&Rosenbrock, &fit.clone().with_names(&["a"])).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    struct Degenerate;

    impl LeastSquares for Degenerate {
        fn n_params(&self) -> usize {
            2
        }
        fn n_residuals(&self) -> usize {
            5
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            // only the sum of the two parameters is observable
            for (i, o) in out.iter_mut().enumerate() {
                *o = (p[0] + p[1]) * i as f64 - 3.0 * i as f64;
            }
        }
    }

    #[test]
    fn rank_deficiency_names_parameter() {
        let fit = FitProblem::new(vec![0.0, 0.0]).with_names(&["left", "right"]);
        match lm_fit(&Degenerate, &fit) {
            Err(Error::RankDeficient { parameter }) => {
                assert!(parameter == "left" || parameter == "right")
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn max_iterations_flags_non_convergence() {
        let fit = FitProblem::new(vec![-1.2, 1.0]).with_max_iterations(1);
        let res = lm_fit(&Rosenbrock, &fit).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 1, "{res:?}");
    }
}
