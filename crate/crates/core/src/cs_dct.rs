//! LASSO reconstruction in the 5D-DCT basis with OWL-QN.
//!
//! Solves `min_α ‖l* − m ⊙ Ψα‖² + λ‖α‖₁` where `l*` is the coded light field
//! recovered from its spectral projection by [`coding::lift`]. The solver is
//! the orthant-wise limited-memory quasi-Newton method of Andrew and Gao:
//! L-BFGS directions on the smooth part, computed from the pseudo-gradient of
//! the full objective, restricted to the current orthant, with a projected
//! backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::coding::{self, CodingMask};
use crate::transforms::{self, Dct5};
use crate::{Error, Result, Tensor5};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OwlqnOptions {
    /// ℓ1 coupling `λ ≥ 0`.
    pub lambda: f64,
    pub max_iters: usize,
    /// Number of stored `(s, y)` correction pairs.
    pub memory: usize,
    /// Threshold on `‖pseudo-gradient‖∞`. `None` selects `1e-5·√N·min(1, λ)`
    /// for `λ > 0` and `1e-5·√N` for `λ = 0`: the pseudo-gradient of any
    /// dense warm start already has magnitude `λ`, so an absolute threshold
    /// above `λ` would stop before the first step.
    pub grad_tol: Option<f64>,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per backtrack.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for OwlqnOptions {
    fn default() -> Self {
        OwlqnOptions {
            lambda: 1e-3,
            max_iters: 500,
            memory: 10,
            grad_tol: None,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 50,
        }
    }
}

impl OwlqnOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::arg(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.memory == 0 {
            return Err(Error::arg("memory must be >= 1"));
        }
        if let Some(tol) = self.grad_tol {
            if !(tol > 0.0) {
                return Err(Error::arg("grad_tol must be > 0"));
            }
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) || !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::arg("line-search constants must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    MaxIters,
    LineSearchFailed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub objective: Vec<f64>,
    pub final_objective: f64,
    pub termination: Termination,
    pub pseudo_grad_inf_norm: f64,
}

/// Pseudo-gradient of `f + λ‖·‖₁`.
fn pseudo_gradient(x: &[f64], g: &[f64], lambda: f64, out: &mut [f64]) {
    for ((p, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
        *p = if xi > 0.0 {
            gi + lambda
        } else if xi < 0.0 {
            gi - lambda
        } else if gi + lambda < 0.0 {
            gi + lambda
        } else if gi - lambda > 0.0 {
            gi - lambda
        } else {
            0.0
        };
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l1(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// Minimise `f(x) + λ‖x‖₁` for a smooth convex `f`.
///
/// `fg(x, grad)` returns `f(x)` and writes `∇f(x)` into `grad`.
pub fn owlqn_minimize<F>(mut fg: F, x0: Vec<f64>, opts: &OwlqnOptions) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut Vec<f64>) -> f64,
{
    opts.validate()?;
    let n = x0.len();
    let lambda = opts.lambda;
    let scale = if opts.lambda > 0.0 { opts.lambda.min(1.0) } else { 1.0 };
    let tol = opts.grad_tol.unwrap_or(1e-5 * (n as f64).sqrt() * scale);

    let mut x = x0;
    let mut g = Vec::with_capacity(n);
    let mut fx = fg(&x, &mut g) + lambda * l1(&x);
    if !fx.is_finite() {
        return Err(Error::Numerical("initial objective is not finite".into()));
    }

    let mut pg = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = Vec::with_capacity(n);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut alphas = vec![0.0; opts.memory];
    let mut objective = vec![fx];
    let mut iterations = 0;

    let termination = loop {
        pseudo_gradient(&x, &g, lambda, &mut pg);
        let pg_inf = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if pg_inf <= tol {
            break Termination::GradTol;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIters;
        }

        // Two-loop recursion: dir = -H pg.
        for (d, p) in dir.iter_mut().zip(&pg) {
            *d = -p;
        }
        for (i, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alphas[i] = a;
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= a * yi;
            }
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / dot(&pg, &pg).sqrt(),
        };
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (i, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (alphas[i] - b) * si;
            }
        }
        // Keep only coordinates that descend along the pseudo-gradient.
        let mut any = false;
        for (d, &p) in dir.iter_mut().zip(&pg) {
            if *d * p >= 0.0 {
                *d = 0.0;
            } else {
                any = true;
            }
        }
        if !any {
            for (d, &p) in dir.iter_mut().zip(&pg) {
                *d = -p * gamma.abs();
            }
        }

        // Projected backtracking line search on the orthant of x (or of -pg at zeros).
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            for i in 0..n {
                let orthant = if x[i] != 0.0 { x[i].signum() } else { -pg[i].signum() };
                let xi = x[i] + step * dir[i];
                x_new[i] = if xi * orthant > 0.0 { xi } else { 0.0 };
            }
            let f_new = fg(&x_new, &mut g_new) + lambda * l1(&x_new);
            let decrease: f64 = pg.iter().zip(&x_new).zip(&x).map(|((p, a), b)| p * (a - b)).sum();
            if f_new.is_finite() && f_new <= fx + opts.c1 * decrease {
                accepted = Some(f_new);
                break;
            }
            step *= opts.backtrack;
        }
        let Some(f_new) = accepted else {
            break Termination::LineSearchFailed;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        objective.push(fx);
        iterations += 1;
    };

    pseudo_gradient(&x, &g, lambda, &mut pg);
    let report = SolveReport {
        iterations,
        final_objective: fx,
        objective,
        termination,
        pseudo_grad_inf_norm: pg.iter().fold(0.0f64, |m, v| m.max(v.abs())),
    };
    Ok((x, report))
}

/// DCT coefficients `α̂` of the LASSO reconstruction from a coded measurement
/// `l_star` (non-projected, same dims as the light field).
pub fn owlqn_coefficients(l_star: &Tensor5, m: &CodingMask, opts: &OwlqnOptions) -> Result<(Vec<f64>, SolveReport)> {
    let dims = l_star.dims();
    let mask = transforms::broadcast_mask(dims, m)?;
    let plan = Dct5::new(dims);
    let target: Vec<f64> = l_star
        .data()
        .iter()
        .zip(&mask)
        .map(|(&y, &o)| if o { y as f64 } else { 0.0 })
        .collect();
    // Warm start consistent with the measurement.
    let mut x0 = target.clone();
    plan.forward(&mut x0);
    owlqn_minimize(
        |a, g| transforms::fidelity_value_grad(&plan, &mask, &target, a, g),
        x0,
        opts,
    )
}

/// Reconstruct the full light field `L̂ = Ψα̂` from its spectral projection.
pub fn owlqn_reconstruct(l_star_p: &Tensor5, m: &CodingMask, opts: &OwlqnOptions) -> Result<(Tensor5, SolveReport)> {
    let l_star = coding::lift(l_star_p, m)?;
    let (mut alpha, report) = owlqn_coefficients(&l_star, m, opts)?;
    Dct5::new(l_star.dims()).inverse(&mut alpha);
    let out = Tensor5::from_vec(l_star.dims(), transforms::to_f32(&alpha))
        .map_err(|_| Error::Numerical("reconstruction is not finite".into()))?;
    Ok((out, report))
}
