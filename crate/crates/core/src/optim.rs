//! Minimizers: a derivative-free simplex search for the offline design fits
//! and an L-BFGS front end for smooth objectives with gradients.

use std::cell::RefCell;

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;

use crate::error::{Result, SacError};

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_evals: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_evals: 4000,
            x_tol: 1e-8,
            f_tol: 1e-11,
            initial_step: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

impl NelderMead {
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, start: &[f64]) -> Minimum {
        let n = start.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((start.to_vec(), eval(start, &mut evals)));
        for i in 0..n {
            let mut p = start.to_vec();
            let step = if p[i] != 0.0 { self.initial_step * p[i].abs().max(0.1) } else { self.initial_step };
            p[i] += step;
            let v = eval(&p, &mut evals);
            simplex.push((p, v));
        }
        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            let spread = simplex
                .iter()
                .skip(1)
                .flat_map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if (worst - best).abs() <= self.f_tol && spread <= self.x_tol {
                break;
            }
            if spread <= self.x_tol * 1e-3 {
                break;
            }
            let mut centroid = vec![0.0; n];
            for (p, _) in &simplex[..n] {
                for (c, v) in centroid.iter_mut().zip(p) {
                    *c += v / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };
            let xr = along(-alpha);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(-gamma);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(-rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
                continue;
            }
            let x0 = simplex[0].0.clone();
            for item in simplex.iter_mut().skip(1) {
                let p: Vec<f64> = x0.iter().zip(&item.0).map(|(a, b)| a + sigma * (b - a)).collect();
                let v = eval(&p, &mut evals);
                *item = (p, v);
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, f) = simplex.swap_remove(0);
        Minimum { x, f, evals }
    }
}

/// Objective returning value and gradient; the last evaluation is reused
/// when the solver asks for both at the same point.
struct Smooth<F> {
    f: RefCell<F>,
    last: RefCell<Option<(Vec<f64>, f64, Vec<f64>)>>,
    failure: RefCell<Option<SacError>>,
    best: RefCell<Option<(f64, Vec<f64>)>>,
    evals: RefCell<usize>,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Smooth<F> {
    fn eval(&self, p: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
        if let Some((x, v, g)) = self.last.borrow().as_ref() {
            if x.as_slice() == p {
                return Ok((*v, g.clone()));
            }
        }
        match (self.f.borrow_mut())(p) {
            Ok((v, g)) => {
                *self.evals.borrow_mut() += 1;
                let better = self.best.borrow().as_ref().is_none_or(|b| v < b.0);
                if better {
                    *self.best.borrow_mut() = Some((v, p.to_vec()));
                }
                *self.last.borrow_mut() = Some((p.to_vec(), v, g.clone()));
                Ok((v, g))
            }
            Err(e) => {
                let msg = e.to_string();
                *self.failure.borrow_mut() = Some(e);
                Err(argmin::core::Error::msg(msg))
            }
        }
    }
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> CostFunction for &Smooth<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        self.eval(p).map(|r| r.0)
    }
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Gradient for &Smooth<F> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        self.eval(p).map(|r| r.1)
    }
}

/// L-BFGS with a More-Thuente line search. Returns the best point evaluated;
/// a line search that stalls on a kink ends the run without error.
pub fn lbfgs<F>(f: F, start: &[f64], max_iters: u64) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let problem = Smooth {
        f: RefCell::new(f),
        last: RefCell::new(None),
        failure: RefCell::new(None),
        best: RefCell::new(None),
        evals: RefCell::new(0),
    };
    problem.eval(start).map_err(|_| take_failure(&problem))?;
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(1e-14)
        .and_then(|s| s.with_tolerance_cost(1e-16))
        .map_err(|e| SacError::InvalidArgument(e.to_string()))?;
    let run = Executor::new(&problem, solver)
        .configure(|s| s.param(start.to_vec()).max_iters(max_iters))
        .run();
    if run.is_err() {
        if let Some(e) = problem.failure.borrow_mut().take() {
            return Err(e);
        }
    }
    let (f, x) = problem.best.borrow_mut().take().expect("start was evaluated");
    let evals = *problem.evals.borrow();
    Ok(Minimum { x, f, evals })
}

fn take_failure<F>(p: &Smooth<F>) -> SacError {
    p.failure
        .borrow_mut()
        .take()
        .unwrap_or_else(|| SacError::InvalidArgument("objective failed".into()))
}
