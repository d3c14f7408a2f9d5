//! Projected limited-memory BFGS for box-constrained minimization.
//!
//! Each iteration fixes the variables sitting on a bound with the gradient
//! pushing outward, builds a two-loop L-BFGS direction on the remaining
//! free variables, and backtracks along the projected path
//! `P(x + t d)` until the Armijo condition holds.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct BoxLbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the infinity norm of the projected gradient drops below this.
    pub pg_tolerance: f64,
    /// Stop once an iteration's relative decrease drops below this.
    pub f_rel_tolerance: f64,
}

impl Default for BoxLbfgsOptions {
    fn default() -> Self {
        BoxLbfgsOptions {
            memory: 10,
            max_iterations: 200,
            pg_tolerance: 1e-8,
            f_rel_tolerance: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ProjectedGradient,
    RelativeDecrease,
    /// No step along a descent direction reduced the objective.
    LineSearchStall,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct BoxLbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl BoxLbfgsResult {
    pub fn converged(&self) -> bool {
        self.termination != Termination::IterationLimit
    }
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Minimizes `fg` over the box `[lower, upper]`. `fg(x, g)` returns `f(x)`
/// and writes the gradient into `g`.
pub fn minimize<F>(
    mut fg: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &BoxLbfgsOptions,
) -> BoxLbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);

    let project = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };

    let mut x = x0.to_vec();
    project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g);
    let mut evaluations = 1;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    let mut termination = Termination::IterationLimit;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0))
            .collect();
        let pg_norm = (0..n)
            .filter(|&i| !active[i])
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg_norm <= opts.pg_tolerance {
            termination = Termination::ProjectedGradient;
            break;
        }
        iterations += 1;

        let free_grad: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { g[i] }).collect();
        let mut d = two_loop(&free_grad, &memory);
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        if dot(&d, &g) >= 0.0 {
            // Curvature pairs no longer give a descent direction.
            memory.clear();
            d = free_grad.iter().map(|v| -v).collect();
        }

        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut t = if memory.is_empty() { (1.0 / dmax).min(1.0) } else { 1.0 };

        let mut accepted = None;
        let mut g_new = vec![0.0; n];
        for _ in 0..MAX_BACKTRACKS {
            let mut x_new: Vec<f64> = (0..n).map(|i| x[i] + t * d[i]).collect();
            project(&mut x_new);
            let step: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
            let decrease = dot(&g, &step);
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            let f_new = fg(&x_new, &mut g_new);
            evaluations += 1;
            if f_new.is_finite() && f_new <= f + ARMIJO_C1 * decrease {
                accepted = Some((x_new, f_new, step));
                break;
            }
            t *= 0.5;
        }

        let Some((x_new, f_new, s)) = accepted else {
            termination = Termination::LineSearchStall;
            break;
        };
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y) && sy > 0.0 {
            if memory.len() == opts.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let f_old = f;
        x = x_new;
        f = f_new;
        std::mem::swap(&mut g, &mut g_new);

        let scale = f_old.abs().max(f.abs()).max(1.0);
        if (f_old - f) <= opts.f_rel_tolerance * scale {
            termination = Termination::RelativeDecrease;
            break;
        }
    }

    BoxLbfgsResult {
        x,
        f,
        iterations,
        evaluations,
        termination,
    }
}

/// `-H g` from the stored curvature pairs.
fn two_loop(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter().map(|v| -v).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Central finite-difference gradient with step `h`.
pub fn central_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], h: f64, g: &mut [f64]) {
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn unconstrained_minimum_inside_box() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &BoxLbfgsOptions::default());
        assert!(r.converged());
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r);
    }

    #[test]
    fn active_bound_is_respected() {
        // Minimum of the unconstrained problem is at (1, 1); the box caps x0 at 0.5.
        let r = minimize(rosenbrock, &[0.0, 0.0], &[-2.0, -2.0], &[0.5, 2.0], &BoxLbfgsOptions::default());
        assert!(r.converged());
        assert!((r.x[0] - 0.5).abs() < 1e-9);
        assert!((r.x[1] - 0.25).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn quadratic_with_finite_differences() {
        let target = [0.3, 1.4, -0.2];
        let mut f = |x: &[f64]| -> f64 { x.iter().zip(&target).map(|(a, b)| (a - b).powi(2) * 3.0).sum() };
        let r = minimize(
            |x, g| {
                central_gradient(&mut f, x, 1e-6, g);
                f(x)
            },
            &[0.9, 0.9, 0.9],
            &[0.0; 3],
            &[1.0; 3],
            &BoxLbfgsOptions::default(),
        );
        let expect = [0.3, 1.0, 0.0];
        for (a, b) in r.x.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{:?}", r.x);
        }
    }

    #[test]
    fn flat_function_converges_immediately() {
        let r = minimize(|_, g| { g.iter_mut().for_each(|v| *v = 0.0); 1.0 }, &[0.5], &[0.0], &[1.0], &BoxLbfgsOptions::default());
        assert_eq!(r.termination, Termination::ProjectedGradient);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let opts = BoxLbfgsOptions { max_iterations: 1, ..Default::default() };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &opts);
        assert_eq!(r.termination, Termination::IterationLimit);
        assert!(!r.converged());
    }
}
