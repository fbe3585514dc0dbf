//! Bracketed, safeguarded Newton iteration for increasing scalar functions.

use crate::error::{Result, SacError};

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    /// Absolute tolerance on the unknown.
    pub x_abs: f64,
    /// Absolute tolerance on the function value.
    pub f_abs: f64,
    pub max_iter: usize,
    pub max_expansions: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            x_abs: 1e-12,
            f_abs: 0.0,
            max_iter: 200,
            max_expansions: 200,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Root {
    pub x: f64,
    pub f: f64,
    pub slope: f64,
    pub iterations: usize,
}

/// Finds `x` with `f(x) = 0` for a nondecreasing `f` that returns
/// `(value, derivative)`. `step` is the initial bracket expansion step.
pub fn solve_increasing<F>(
    mut f: F,
    guess: f64,
    step: f64,
    tol: Tolerance,
    what: &'static str,
) -> Result<Root>
where
    F: FnMut(f64) -> (f64, f64),
{
    let (f0, d0) = f(guess);
    if f0 == 0.0 || f0.abs() <= tol.f_abs {
        return Ok(Root {
            x: guess,
            f: f0,
            slope: d0,
            iterations: 0,
        });
    }
    if !f0.is_finite() {
        return Err(SacError::NoConvergence {
            what,
            iterations: 0,
            residual: f0,
        });
    }

    // Bracket: [lo, hi] with f(lo) < 0 < f(hi).
    let mut lo;
    let mut hi;
    let mut f_lo;
    let mut f_hi;
    let mut x = guess;
    let mut fx = f0;
    let mut dx = d0;
    let mut step = step.abs().max(tol.x_abs * 4.0);
    if f0 < 0.0 {
        lo = guess;
        f_lo = f0;
        // try Newton first, it usually lands past the root
        let mut probe = if d0 > 0.0 { guess - f0 / d0 } else { guess + step };
        if !(probe > guess) || !probe.is_finite() {
            probe = guess + step;
        }
        probe = probe.min(guess + 64.0 * step);
        let mut n = 0;
        loop {
            let (fp, dp) = f(probe);
            if !fp.is_finite() {
                n += 1;
                if n > tol.max_expansions {
                    return Err(SacError::BracketNotFound { what, expansions: n });
                }
                probe = 0.5 * (lo + probe);
                step = 0.5 * (probe - lo);
                continue;
            }
            if fp >= 0.0 {
                hi = probe;
                f_hi = fp;
                if fp.abs() < fx.abs() {
                    x = probe;
                    fx = fp;
                    dx = dp;
                }
                break;
            }
            lo = probe;
            f_lo = fp;
            x = probe;
            fx = fp;
            dx = dp;
            n += 1;
            if n > tol.max_expansions {
                return Err(SacError::BracketNotFound {
                    what,
                    expansions: n,
                });
            }
            probe = lo + step;
            step *= 2.0;
        }
    } else {
        hi = guess;
        f_hi = f0;
        let mut probe = if d0 > 0.0 { guess - f0 / d0 } else { guess - step };
        if !(probe < guess) || !probe.is_finite() {
            probe = guess - step;
        }
        probe = probe.max(guess - 64.0 * step);
        let mut n = 0;
        loop {
            let (fp, dp) = f(probe);
            if !fp.is_finite() {
                n += 1;
                if n > tol.max_expansions {
                    return Err(SacError::BracketNotFound { what, expansions: n });
                }
                probe = 0.5 * (hi + probe);
                step = 0.5 * (hi - probe);
                continue;
            }
            if fp <= 0.0 {
                lo = probe;
                f_lo = fp;
                if fp.abs() < fx.abs() {
                    x = probe;
                    fx = fp;
                    dx = dp;
                }
                break;
            }
            hi = probe;
            f_hi = fp;
            x = probe;
            fx = fp;
            dx = dp;
            n += 1;
            if n > tol.max_expansions {
                return Err(SacError::BracketNotFound {
                    what,
                    expansions: n,
                });
            }
            probe = hi - step;
            step *= 2.0;
        }
    }
    if fx == 0.0 {
        return Ok(Root {
            x,
            f: fx,
            slope: dx,
            iterations: 0,
        });
    }

    let _ = (f_lo, f_hi);
    let mut dx_old = hi - lo;
    let mut dx_cur = dx_old;
    for it in 1..=tol.max_iter {
        // Newton unless it leaves the bracket or is not shrinking fast enough
        let newton_ok = dx > 0.0
            && ((x - hi) * dx - fx) * ((x - lo) * dx - fx) < 0.0
            && (2.0 * fx).abs() <= (dx_old * dx).abs();
        dx_old = dx_cur;
        let next = if newton_ok {
            dx_cur = fx / dx;
            x - dx_cur
        } else {
            dx_cur = 0.5 * (hi - lo);
            lo + dx_cur
        };
        let moved = (next - x).abs();
        let (fn_, dn) = f(next);
        x = next;
        fx = fn_;
        dx = dn;
        if fx == 0.0 || fx.abs() <= tol.f_abs {
            return Ok(Root {
                x,
                f: fx,
                slope: dx,
                iterations: it,
            });
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let scale = tol.x_abs * x.abs().max(1.0);
        if (newton_ok && moved <= scale) || hi - lo <= scale {
            return Ok(Root {
                x,
                f: fx,
                slope: dx,
                iterations: it,
            });
        }
    }
    Err(SacError::NoConvergence {
        what,
        iterations: tol.max_iter,
        residual: fx,
    })
}
