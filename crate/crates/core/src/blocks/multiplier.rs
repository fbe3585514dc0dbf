//! Four-quadrant multiplier from four shifted proto-shapes.
//!
//! `y = h(A+w+x) - h(A+w-x) + h(A-w-x) - h(A-w+x)` with `A = 2C`. Even-order
//! terms of the shape cancel, leaving a product-like odd-odd function.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::differential::DifferentialSignal;
use crate::design::SplineDesign;
use crate::device::{make_model, Regime, TransistorModel};
use crate::error::{invalid, Result, SacError};
use crate::gmp::{ProtoShape, SacNodeConfig, Scratch};
use crate::optim::NelderMead;

const TERMS: [&str; 4] = ["h(2C+w+x)", "h(2C+w-x)", "h(2C-w-x)", "h(2C-w+x)"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierConfig {
    /// Proto-shape node shared by the four terms.
    pub node: SacNodeConfig,
    pub bias_c: f64,
    pub x_range: f64,
    pub w_range: f64,
    pub gain_map: Option<GainMap>,
}

/// Input points of the large-signal calibration sweep.
const CAL_X: usize = 41;
/// Calibration grid used when choosing a design.
const DESIGN_X: usize = 81;
const DESIGN_W: usize = 21;

impl MultiplierConfig {
    pub fn new(node: SacNodeConfig) -> Self {
        Self {
            node,
            bias_c: 1.0,
            x_range: 1.0,
            w_range: 0.5,
            gain_map: None,
        }
    }

    /// Picks the shape width and input delay for `splines` splines by a
    /// grid search over the calibrated error in the rectifier limit, refined
    /// by a local search, then binds the result to `model`. A single spline
    /// keeps zero offsets, so only its width is searched.
    pub fn design(splines: usize, model: TransistorModel) -> Result<Self> {
        static CACHE: Mutex<BTreeMap<usize, (f64, f64)>> = Mutex::new(BTreeMap::new());
        let base = SplineDesign::canonical(splines)?;
        let known = CACHE.lock().ok().and_then(|m| m.get(&splines).copied());
        let (width, shift) = match known {
            Some(v) => v,
            None => {
                let v = Self::search(&base, splines)?;
                if let Ok(mut m) = CACHE.lock() {
                    m.insert(splines, v);
                }
                v
            }
        };
        Ok(Self::new(base.node(width, shift, model)))
    }

    fn search(base: &SplineDesign, splines: usize) -> Result<(f64, f64)> {
        let rect = make_model(Regime::Rect, crate::device::DEFAULT_TEMPERATURE)?;
        let xs = linspace(-1.0, 1.0, DESIGN_X);
        let ws = linspace(-0.5, 0.5, DESIGN_W);
        let mut best: Option<(f64, f64, f64)> = None;
        for wi in 0..=28 {
            let width = 0.2 + 0.1 * wi as f64;
            let shifts = if splines == 1 { 0 } else { 5 };
            for si in 0..=shifts {
                let shift = 0.5 * si as f64;
                let cfg = Self::new(base.node(width, shift, rect));
                // placements whose knee misses the operating range have no gain
                let Ok(err) = calibrated_error(&cfg, &xs, &ws) else {
                    continue;
                };
                if best.is_none_or(|b| err < b.0 - 1e-12) {
                    best = Some((err, width, shift));
                }
            }
        }
        let (err, width, shift) = best.expect("non-empty grid");
        let objective = |p: &[f64]| -> f64 {
            let shift = p.get(1).copied().unwrap_or(0.0);
            if !(p[0] > 0.05 && shift >= 0.0) {
                return f64::INFINITY;
            }
            calibrated_error(&Self::new(base.node(p[0], shift, rect)), &xs, &ws).unwrap_or(f64::INFINITY)
        };
        let nm = NelderMead {
            max_evals: 300,
            initial_step: 0.1,
            x_tol: 1e-6,
            f_tol: 1e-9,
        };
        let start: &[f64] = if splines == 1 { &[width] } else { &[width, shift] };
        let refined = nm.minimize(objective, start);
        let (width, shift) = if refined.f < err {
            (refined.x[0], refined.x.get(1).copied().unwrap_or(0.0))
        } else {
            (width, shift)
        };
        Ok((width, shift))
    }

    pub fn with_model(&self, model: TransistorModel) -> Self {
        Self {
            node: self.node.clone().with_model(model),
            ..self.clone()
        }
    }
}

/// Prepared multiplier; evaluates values and partial derivatives.
#[derive(Debug, Clone)]
pub struct Multiplier {
    shape: ProtoShape,
    offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Product {
    pub y: f64,
    pub dx: f64,
    pub dw: f64,
}

impl Multiplier {
    pub fn new(config: &MultiplierConfig) -> Result<Self> {
        if !(config.bias_c > 0.0) {
            return Err(invalid("multiplier bias must be positive"));
        }
        let m = Self {
            shape: ProtoShape::new(&config.node)?,
            offset: 2.0 * config.bias_c,
        };
        if m.offset < config.x_range + config.w_range {
            return Err(invalid("bias too small for the declared input range"));
        }
        Ok(m)
    }

    fn args(&self, x: f64, w: f64) -> Result<[f64; 4]> {
        let p = self.offset + w;
        let m = self.offset - w;
        let a = [p + x, p - x, m - x, m + x];
        for (k, v) in a.iter().enumerate() {
            if !(*v >= 0.0) {
                return Err(SacError::RangeViolation {
                    term: TERMS[k].into(),
                    value: *v,
                });
            }
        }
        Ok(a)
    }

    pub fn eval(&self, x: f64, w: f64) -> Result<f64> {
        let mut buf = Vec::new();
        let mut sc = Scratch::default();
        self.eval_grad(x, w, &mut buf, &mut sc).map(|p| p.y)
    }

    pub fn eval_grad(&self, x: f64, w: f64, buf: &mut Vec<f64>, sc: &mut Scratch) -> Result<Product> {
        let a = self.args(x, w)?;
        let mut h = [0.0; 4];
        let mut d = [0.0; 4];
        for k in 0..4 {
            let (v, s) = self.shape.eval_into(a[k], buf, sc)?;
            h[k] = v;
            d[k] = s;
        }
        Ok(Product {
            y: (h[0] - h[1]) + (h[2] - h[3]),
            dx: (d[0] + d[1]) - (d[2] + d[3]),
            dw: (d[0] - d[1]) - (d[2] - d[3]),
        })
    }
}

pub fn multiply(x: f64, w: f64, config: &MultiplierConfig) -> Result<f64> {
    Multiplier::new(config)?.eval(x, w)
}

/// Summed multiplier outputs, reduced left to right.
pub fn mac(x: &[DifferentialSignal], w: &[f64], config: &MultiplierConfig) -> Result<f64> {
    if x.len() != w.len() {
        return Err(invalid("mac needs equal-length inputs and weights"));
    }
    let m = Multiplier::new(config)?;
    let mut acc = 0.0;
    for (xi, wi) in x.iter().zip(w) {
        acc += m.eval(xi.value(), *wi)?;
    }
    Ok(acc)
}

/// Small-signal gain of the multiplier as a function of the stored weight,
/// plus the large-signal scale used for ideal-product comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMap {
    pub w: Vec<f64>,
    pub gain: Vec<f64>,
    /// Least-squares `k` in `y(x, w) = 2 k x w` over the calibration sweep.
    /// Piecewise-linear shapes have a staircase small-signal gain, so the
    /// scale is fitted on the full input range instead.
    pub scale: f64,
}

impl GainMap {
    /// Stored weight giving a target gain, by linear interpolation on the
    /// strictly increasing part of the table.
    pub fn inverse(&self, g: f64) -> f64 {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(self.w.len());
        for (&w, &v) in self.w.iter().zip(&self.gain) {
            if pts.last().is_none_or(|p| v > p.1) {
                pts.push((w, v));
            }
        }
        if g <= pts[0].1 {
            return pts[0].0;
        }
        for win in pts.windows(2) {
            let (a, b) = (win[0], win[1]);
            if g <= b.1 {
                return a.0 + (g - a.1) * (b.0 - a.0) / (b.1 - a.1);
            }
        }
        pts[pts.len() - 1].0
    }

    /// Calibrated ideal product.
    pub fn ideal(&self, x: f64, w: f64) -> f64 {
        2.0 * self.scale * x * w
    }
}

pub fn multiply_calibrate(config: &MultiplierConfig, w_grid: &[f64]) -> Result<GainMap> {
    if w_grid.is_empty() {
        return Err(invalid("empty calibration grid"));
    }
    if w_grid.iter().any(|w| w.abs() > config.w_range + 1e-12) {
        return Err(invalid("calibration grid outside the weight range"));
    }
    let m = Multiplier::new(config)?;
    let eps = 1e-4 * config.x_range;
    let mut w = w_grid.to_vec();
    w.sort_by(f64::total_cmp);
    let gain = w
        .iter()
        .map(|&wi| Ok(m.eval(eps, wi)? / (2.0 * eps)))
        .collect::<Result<Vec<_>>>()?;
    for pair in gain.windows(2) {
        if pair[1] < pair[0] - 1e-9 {
            return Err(SacError::Calibration(format!(
                "measured gain decreases from {} to {}",
                pair[0], pair[1]
            )));
        }
    }
    let xs = linspace(-config.x_range, config.x_range, CAL_X);
    let mut num = 0.0;
    let mut den = 0.0;
    for &wi in &w {
        for &x in &xs {
            let ideal = 2.0 * x * wi;
            num += m.eval(x, wi)? * ideal;
            den += ideal * ideal;
        }
    }
    if !(den > 0.0) || !(num > 0.0) {
        return Err(SacError::Calibration("multiplier shows no gain".into()));
    }
    Ok(GainMap {
        w,
        gain,
        scale: num / den,
    })
}

/// Mean absolute deviation from the calibrated ideal product over the grid,
/// as a fraction of the largest ideal product.
pub fn calibrated_error(config: &MultiplierConfig, xs: &[f64], ws: &[f64]) -> Result<f64> {
    let mut ws_in: Vec<f64> = ws.to_vec();
    ws_in.sort_by(f64::total_cmp);
    let map = multiply_calibrate(config, &ws_in)?;
    let m = Multiplier::new(config)?;
    let mut sum = 0.0;
    let mut peak: f64 = 0.0;
    for &w in ws {
        for &x in xs {
            let ideal = map.ideal(x, w);
            sum += (m.eval(x, w)? - ideal).abs();
            peak = peak.max(ideal.abs());
        }
    }
    Ok(sum / (xs.len() * ws.len()) as f64 / peak)
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| if n == 1 { a } else { a + (b - a) * k as f64 / (n - 1) as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(regime: Regime, s: usize) -> MultiplierConfig {
        MultiplierConfig::design(s, make_model(regime, 300.0).unwrap()).unwrap()
    }

    #[test]
    fn zero_operand_gives_zero() {
        for regime in Regime::ALL {
            let c = config(regime, 3);
            let m = Multiplier::new(&c).unwrap();
            for k in 0..5 {
                let v = -0.4 + 0.2 * k as f64;
                assert_eq!(m.eval(v, 0.0).unwrap(), 0.0);
                assert_eq!(m.eval(0.0, v).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn single_spline_rectifier_is_signed_minimum() {
        // a sharp ramp with its knee at 2C turns the four terms into
        // sign(xw) min(|x|, |w|), doubled
        let rect = make_model(Regime::Rect, 300.0).unwrap();
        let node = SacNodeConfig::proto(vec![-2.0], vec![0.0], 1e-9, rect);
        let m = Multiplier::new(&MultiplierConfig::new(node)).unwrap();
        for &(x, w) in &[(0.7f64, 0.3f64), (-0.2, 0.45), (0.9, -0.5), (-0.1, -0.4)] {
            let expected = 2.0 * (x * w).signum() * f64::min(x.abs(), w.abs());
            assert!((m.eval(x, w).unwrap() - expected).abs() < 1e-8, "{x} {w}");
        }
    }

    #[test]
    fn range_violation_names_the_term() {
        let mut c = config(Regime::Rect, 1);
        c.bias_c = 0.8;
        let m = Multiplier::new(&c).unwrap();
        match m.eval(1.0, 0.7) {
            Err(SacError::RangeViolation { term, .. }) => assert_eq!(term, "h(2C-w-x)"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_falls_with_spline_count() {
        let xs = linspace(-1.0, 1.0, 41);
        let ws = linspace(-0.5, 0.5, 5);
        for regime in [Regime::Rect, Regime::Wi] {
            let e: Vec<f64> = (1..=3)
                .map(|s| calibrated_error(&config(regime, s), &xs, &ws).unwrap())
                .collect();
            assert!(e[2] < e[1] && e[1] < e[0], "{regime:?} {e:?}");
        }
    }

    #[test]
    fn gain_map_is_odd_and_compressive() {
        let c = config(Regime::Si, 3);
        let grid = linspace(-0.5, 0.5, 11);
        let g = multiply_calibrate(&c, &grid).unwrap();
        assert_eq!(g.gain[5], 0.0);
        for k in 0..11 {
            assert!((g.gain[k] + g.gain[10 - k]).abs() < 1e-12);
            assert!(g.gain[k].abs() <= 1.0 + 1e-9);
        }
        for k in 1..11 {
            if g.gain[k] > g.gain[k - 1] && (k == 10 || g.gain[k + 1] > g.gain[k]) {
                assert!((g.inverse(g.gain[k]) - g.w[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for regime in Regime::ALL {
            let m = Multiplier::new(&config(regime, 3)).unwrap();
            let mut buf = Vec::new();
            let mut sc = Scratch::default();
            let (x, w) = (0.37, -0.21);
            let p = m.eval_grad(x, w, &mut buf, &mut sc).unwrap();
            let e = 1e-6;
            let fx = (m.eval(x + e, w).unwrap() - m.eval(x - e, w).unwrap()) / (2.0 * e);
            let fw = (m.eval(x, w + e).unwrap() - m.eval(x, w - e).unwrap()) / (2.0 * e);
            assert!((p.dx - fx).abs() < 1e-6, "{regime:?}");
            assert!((p.dw - fw).abs() < 1e-6, "{regime:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn exactly_antisymmetric(x in -1.0f64..1.0, w in -0.5f64..0.5, r in 0usize..4) {
            let m = Multiplier::new(&config(Regime::ALL[r], 2)).unwrap();
            let y = m.eval(x, w).unwrap();
            prop_assert_eq!(m.eval(-x, w).unwrap(), -y);
            prop_assert_eq!(m.eval(x, -w).unwrap(), -y);
        }
    }
}
