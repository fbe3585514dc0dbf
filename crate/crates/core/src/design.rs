//! Spline offset designs for single-input nodes.
//!
//! A design holds the offsets of the input bank and the constraint `c` of a
//! unit-width shape. The canonical designs make the normalized shape track
//! `ln(1 + e^x)` as closely as `S` splines allow in the rectifier limit.

use serde::{Deserialize, Serialize};

use crate::device::{softplus, TransistorModel};
use crate::error::{invalid, Result};
use crate::gmp::{solve_rectifier_closed_form, SacNodeConfig};
use crate::optim::NelderMead;

pub const MAX_SPLINES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineDesign {
    pub offsets: Vec<f64>,
    pub c: f64,
}

const CANONICAL: [(&[f64], f64); 4] = [
    (&[0.0], 1.710_933_208_857_971_2),
    (&[0.0, -1.377_966_41], 3.046_841_696_868_557),
    (&[0.0, -1.837_965_62, -2.086_069_99], 3.631_714_168_841_526),
    (&[0.0, -1.432_891_18, -1.970_808_24, -1.703_028_33], 5.981_255_449_404_411),
];

impl SplineDesign {
    /// Canonical unit-width design for `splines` splines.
    pub fn canonical(splines: usize) -> Result<Self> {
        match splines {
            1..=4 => {
                let (o, c) = CANONICAL[splines - 1];
                Ok(Self {
                    offsets: o.to_vec(),
                    c,
                })
            }
            5..=MAX_SPLINES => Ok(fit_softplus(splines, 6)),
            _ => Err(invalid(format!("spline count must be in 1..={MAX_SPLINES}"))),
        }
    }

    pub fn splines(&self) -> usize {
        self.offsets.len()
    }

    /// Shape of width `width` whose input bank is delayed by `shift`.
    pub fn node(&self, width: f64, shift: f64, model: TransistorModel) -> SacNodeConfig {
        let reference: Vec<f64> = self.offsets.iter().map(|o| o * width).collect();
        let input = reference.iter().map(|o| o - shift).collect();
        SacNodeConfig::proto(input, reference, self.c * width, model)
    }

    /// Normalized rectifier-limit shape of the unit design.
    pub fn shape_closed_form(&self, x: f64) -> f64 {
        let floor = solve_rectifier_closed_form(&self.offsets, self.c).expect("valid design");
        let mut v: Vec<f64> = self.offsets.iter().map(|o| x + o).collect();
        v.extend_from_slice(&self.offsets);
        solve_rectifier_closed_form(&v, self.c).expect("valid design") - floor
    }

    /// Largest deviation from `ln(1 + e^x)` on [-8, 8].
    pub fn softplus_error(&self) -> f64 {
        (0..=320)
            .map(|k| {
                let x = -8.0 + 0.05 * k as f64;
                (self.shape_closed_form(x) - softplus(x)).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn unpack(p: &[f64], splines: usize) -> SplineDesign {
    let mut offsets = vec![0.0];
    offsets.extend_from_slice(&p[..splines - 1]);
    SplineDesign {
        offsets,
        c: p[splines - 1].abs().max(1e-6),
    }
}

/// Minimax fit of the unit design to `ln(1 + e^x)` from `restarts`
/// deterministic starting points.
pub fn fit_softplus(splines: usize, restarts: usize) -> SplineDesign {
    let nm = NelderMead {
        max_evals: 3000 * splines,
        ..NelderMead::default()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..restarts.max(1) {
        let spread = 1.0 + 0.5 * r as f64;
        let mut p: Vec<f64> = (1..splines)
            .map(|j| -spread * j as f64 / splines as f64)
            .collect();
        p.push(1.0 + r as f64);
        let m = nm.minimize(|q| unpack(q, splines).softplus_error(), &p);
        if best.as_ref().is_none_or(|b| m.f < b.0) {
            best = Some((m.f, m.x));
        }
    }
    unpack(&best.expect("at least one restart").1, splines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_errors_shrink_with_splines() {
        let errs: Vec<f64> = (1..=4)
            .map(|s| SplineDesign::canonical(s).unwrap().softplus_error())
            .collect();
        assert!((errs[0] - 0.162).abs() < 2e-3, "{errs:?}");
        for w in errs.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(errs[3] < 0.06);
    }

    #[test]
    fn local_fit_does_not_beat_canonical_by_much() {
        // A fresh fit must land near the frozen minimax values.
        for s in 1..=2 {
            let fresh = fit_softplus(s, 4).softplus_error();
            let frozen = SplineDesign::canonical(s).unwrap().softplus_error();
            assert!(fresh >= frozen - 2e-3, "{s}: {fresh} vs {frozen}");
        }
    }

    #[test]
    fn single_spline_shape_is_a_smoothed_ramp() {
        let d = SplineDesign::canonical(1).unwrap();
        assert!(d.shape_closed_form(-10.0).abs() < 1e-12);
        assert!((d.shape_closed_form(10.0) - 10.0).abs() < 1e-12);
    }
}
