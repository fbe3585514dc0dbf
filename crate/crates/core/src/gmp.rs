//! Margin-propagation node solver.
//!
//! Each branch carries an input current `x`, a mirror transistor whose gate
//! sits at the shared node voltage and a diode into the constraint node. With
//! `d` the diode voltage, the branch obeys `h - F(-d) + D(d) = x`, where `h` is
//! the output current `F(v_b)`. The diode currents must add up to `c`.
//!
//! The solver iterates on `h` (outer) and on every `d` (inner). Both levels are
//! monotone scalar problems. The rectifier closed form is a lower bound for `h`
//! under every law and is used as the starting point.

use serde::{Deserialize, Serialize};

use crate::device::{DiodeLaw, DiodeModel, Law, TransistorModel};
use crate::error::{invalid, Result, SacError};
use crate::root::{solve_increasing, Tolerance};

const REL_RESIDUAL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacNodeConfig {
    /// Per-input spline offsets, one row of length `S` per input.
    pub offsets: Vec<Vec<f64>>,
    pub c: f64,
    /// Adds a bank driven by a zero input, giving the node a finite floor.
    pub include_zero_bank: bool,
    /// Spline offsets of the zero bank.
    pub reference_offsets: Vec<f64>,
    pub model: TransistorModel,
    pub diode: DiodeModel,
}

impl SacNodeConfig {
    pub fn new(offsets: Vec<Vec<f64>>, c: f64, model: TransistorModel) -> Self {
        Self {
            offsets,
            c,
            include_zero_bank: false,
            reference_offsets: Vec::new(),
            diode: DiodeModel::matched(&model),
            model,
        }
    }

    /// Single-input node with a zero bank, as used for proto-shapes.
    pub fn proto(offsets: Vec<f64>, reference_offsets: Vec<f64>, c: f64, model: TransistorModel) -> Self {
        Self {
            offsets: vec![offsets],
            c,
            include_zero_bank: true,
            reference_offsets,
            diode: DiodeModel::matched(&model),
            model,
        }
    }

    pub fn with_model(mut self, model: TransistorModel) -> Self {
        self.diode = DiodeModel::matched(&model);
        self.model = model;
        self
    }

    pub fn n_inputs(&self) -> usize {
        self.offsets.len()
    }

    pub fn n_splines(&self) -> usize {
        self.offsets.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(invalid("c must be positive"));
        }
        let s = self.n_splines();
        if self.offsets.is_empty() || s == 0 {
            return Err(invalid("node needs at least one input and one spline"));
        }
        if self.offsets.iter().any(|row| row.len() != s) {
            return Err(invalid("offset matrix must be N x S"));
        }
        if self
            .offsets
            .iter()
            .flatten()
            .chain(&self.reference_offsets)
            .any(|v| !v.is_finite())
        {
            return Err(invalid("offsets must be finite"));
        }
        if self.include_zero_bank && self.reference_offsets.is_empty() {
            return Err(invalid("zero bank needs reference offsets"));
        }
        self.diode.validate()
    }
}

/// Precomputed constants for one device pairing.
#[derive(Debug, Clone)]
pub struct Kernel {
    model: TransistorModel,
    diode: DiodeModel,
    /// signal units -> normalized current
    scale: f64,
    /// normalized voltage -> diode exponent
    diode_k: f64,
    /// diode saturation current in normalized units
    diode_r: f64,
}

/// Per-branch state left behind by [`Kernel::solve`].
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    /// Normalized diode voltages.
    pub d: Vec<f64>,
    /// Branch diode currents in signal units.
    pub rho: Vec<f64>,
    /// Sensitivity of each branch current to its own input.
    pub gain: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    sorted: Vec<f64>,
}

impl Scratch {
    /// Share of a unit input perturbation on each branch that reaches `h`.
    /// `None` when the conductances are all zero.
    pub fn gain_total(&self) -> Option<f64> {
        let t: f64 = self.gain.iter().sum();
        (t > 1e-300 && t.is_finite()).then_some(t)
    }
}

impl Kernel {
    pub fn new(model: &TransistorModel, diode: &DiodeModel) -> Self {
        let vs = model.voltage_scale();
        let cs = model.current_scale();
        let (diode_k, diode_r) = match diode.law {
            DiodeLaw::ExponentialDiode => (vs / diode.thermal_voltage, diode.saturation_current / cs),
            DiodeLaw::IdealRectifier => (vs, 1.0 / cs),
        };
        Self {
            model: *model,
            diode: *diode,
            scale: model.signal_scale(),
            diode_k,
            diode_r,
        }
    }

    pub fn model(&self) -> &TransistorModel {
        &self.model
    }

    #[inline]
    fn diode_value(&self, x: f64) -> (f64, f64) {
        match self.diode.law {
            DiodeLaw::ExponentialDiode => {
                if x <= 0.0 {
                    (0.0, 0.0)
                } else {
                    let kx = self.diode_k * x;
                    let e = kx.exp();
                    (self.diode_r * kx.exp_m1(), self.diode_r * self.diode_k * e)
                }
            }
            DiodeLaw::IdealRectifier => {
                if x <= 0.0 {
                    (0.0, 0.0)
                } else {
                    (self.diode_r * self.diode_k * x, self.diode_r * self.diode_k)
                }
            }
        }
    }

    #[inline]
    fn diode_inverse(&self, y: f64) -> f64 {
        match self.diode.law {
            DiodeLaw::ExponentialDiode => (y / self.diode_r).ln_1p() / self.diode_k,
            DiodeLaw::IdealRectifier => y / (self.diode_r * self.diode_k),
        }
    }

    /// Solves one branch for normalized target `t = x - h`.
    /// Returns (diode voltage, diode current, sensitivity, iterations).
    #[inline]
    fn branch(&self, t: f64, warm: Option<f64>) -> Result<(f64, f64, f64, usize)> {
        let m = &self.model;
        let guess = if let Some(w) = warm {
            w
        } else if t > 0.0 {
            self.diode_inverse(t)
        } else if t < 0.0 {
            -m.law_inverse(-t).unwrap_or(0.0)
        } else {
            0.0
        };
        let phi = |x: f64| {
            let (dv, dd) = self.diode_value(x);
            (dv - m.law_value(-x) - t, dd + m.law_slope(-x))
        };
        // exponential diodes need far tighter voltages than the current
        // tolerance suggests
        let tol = Tolerance {
            x_abs: 1e-15,
            f_abs: 1e-15 * t.abs(),
            max_iter: 200,
            max_expansions: 200,
        };
        let r = solve_increasing(phi, guess, 0.5, tol, "branch voltage")?;
        let (dv, dd) = self.diode_value(r.x);
        let ds = m.law_slope(-r.x);
        let gain = if dd + ds > 0.0 { dd / (dd + ds) } else { f64::NAN };
        Ok((r.x, dv, gain, r.iterations))
    }

    /// True when every branch current is exactly `max(x - h, 0)`: the
    /// rectifier law, or the square law (which conducts nothing in reverse)
    /// paired with a clamped diode.
    pub fn is_piecewise_linear(&self) -> bool {
        match self.model.law {
            Law::IdealRectifier => self.diode.law == DiodeLaw::IdealRectifier && self.diode_r * self.diode_k == 1.0,
            Law::StrongInversionSquareLaw => true,
            _ => false,
        }
    }

    fn solve_piecewise_linear(&self, inputs: &[f64], c: f64, scratch: &mut Scratch) -> f64 {
        let h = water_fill(&mut scratch.sorted, c);
        let s = self.scale;
        for (k, &x) in inputs.iter().enumerate() {
            let t = x - h;
            let tn = t * s;
            scratch.rho[k] = t.max(0.0);
            scratch.gain[k] = if t > 0.0 {
                1.0
            } else if t < 0.0 {
                0.0
            } else {
                f64::NAN
            };
            scratch.d[k] = if self.model.is_rectifier() {
                tn
            } else if tn > 0.0 {
                self.diode_inverse(tn)
            } else if tn < 0.0 {
                -self.model.law_inverse(-tn).unwrap_or(0.0)
            } else {
                0.0
            };
        }
        scratch.iterations = 0;
        let total: f64 = scratch.rho.iter().sum();
        scratch.residual = (total - c).abs();
        h
    }

    /// Solves the node for branch inputs and constraint `c`, both in signal
    /// units. Returns the output current in signal units.
    pub fn solve(&self, inputs: &[f64], c: f64, scratch: &mut Scratch) -> Result<f64> {
        self.solve_with(inputs, c, scratch, true)
    }

    /// As [`Kernel::solve`]; `exact_path = false` forces the iterative solver
    /// even where the closed form is exact.
    pub fn solve_with(&self, inputs: &[f64], c: f64, scratch: &mut Scratch, exact_path: bool) -> Result<f64> {
        if inputs.is_empty() {
            return Err(invalid("node has no active branches"));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid("c must be positive"));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(invalid("inputs must be finite"));
        }
        let s = self.scale;
        let cn = c * s;
        let n = inputs.len();
        scratch.d.resize(n, 0.0);
        scratch.rho.resize(n, 0.0);
        scratch.gain.resize(n, 0.0);
        scratch.sorted.clear();
        if exact_path && self.is_piecewise_linear() {
            scratch.sorted.extend_from_slice(inputs);
            return Ok(self.solve_piecewise_linear(inputs, c, scratch));
        }
        scratch.sorted.extend(inputs.iter().map(|v| v * s));
        let h0 = water_fill(&mut scratch.sorted, cn);
        let warm = std::cell::Cell::new(false);
        let inner_iters = std::cell::Cell::new(0usize);
        let failure: std::cell::RefCell<Option<SacError>> = std::cell::RefCell::new(None);

        let eval = |h: f64, scratch: &mut Scratch| -> (f64, f64) {
            let mut sum = 0.0;
            let mut slope = 0.0;
            let use_warm = warm.get();
            for (k, &x) in inputs.iter().enumerate() {
                let w = if use_warm { Some(scratch.d[k]) } else { None };
                match self.branch(x * s - h, w) {
                    Ok((d, rho, g, it)) => {
                        scratch.d[k] = d;
                        scratch.rho[k] = rho;
                        scratch.gain[k] = g;
                        sum += rho;
                        slope += if g.is_nan() { 0.0 } else { g };
                        inner_iters.set(inner_iters.get() + it);
                    }
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        return (f64::NAN, 0.0);
                    }
                }
            }
            warm.set(true);
            (cn - sum, slope)
        };

        let tol = Tolerance {
            x_abs: 1e-13,
            f_abs: 1e-13 * cn,
            max_iter: 200,
            max_expansions: 200,
        };
        // `h0` is a lower bound, so the residual there is never positive.
        let outer = {
            let sc = &mut *scratch;
            solve_increasing(|h| eval(h, sc), h0, cn.max(1e-300), tol, "output current")
        };
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        let outer = outer?;
        // make the scratch state consistent with the accepted root
        let (g, _) = eval(outer.x, scratch);
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        let inner_iters = inner_iters.get();
        let residual = g.abs() / s;
        scratch.iterations = outer.iterations + inner_iters;
        scratch.residual = residual;
        for r in scratch.rho.iter_mut() {
            *r /= s;
        }
        if residual > REL_RESIDUAL * c {
            return Err(SacError::NoConvergence {
                what: "output current",
                iterations: outer.iterations,
                residual,
            });
        }
        Ok(outer.x / s)
    }

    /// Node voltage for an output current in signal units, if it exists.
    pub fn gate_voltage(&self, h: f64) -> Option<f64> {
        self.model
            .law_inverse(h * self.scale)
            .map(|x| x * self.model.voltage_scale())
    }
}

/// Rectifier water-filling on a scratch copy; sorts `v` in place.
pub(crate) fn water_fill(v: &mut [f64], c: f64) -> f64 {
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for k in 0..v.len() {
        acc += v[k];
        let z = (acc - c) / (k + 1) as f64;
        if k + 1 == v.len() || z >= v[k + 1] {
            return z;
        }
    }
    unreachable!()
}

/// Exact node output when both elements are ideal rectifiers: the unique `h`
/// with `sum(max(x - h, 0)) = c`.
pub fn solve_rectifier_closed_form(inputs: &[f64], c: f64) -> Result<f64> {
    if inputs.is_empty() {
        return Err(invalid("no inputs"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(invalid("c must be positive"));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(invalid("inputs must be finite"));
    }
    let mut v = inputs.to_vec();
    Ok(water_fill(&mut v, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    /// Node inputs the solution belongs to.
    pub inputs: Vec<f64>,
    /// Output current in signal units.
    pub h: f64,
    /// Shared node voltage, volts. Absent when the output current is not
    /// positive, since the device cannot produce it.
    pub v_b: Option<f64>,
    /// Diode voltages `V_ij - v_b` per input and spline, volts.
    pub diode_voltage: Vec<Vec<f64>>,
    /// Diode voltages of the zero bank, volts.
    pub reference_voltage: Vec<f64>,
    /// Diode currents per input and spline, signal units.
    pub branch_current: Vec<Vec<f64>>,
    pub reference_current: Vec<f64>,
    /// Per-branch sensitivity of the diode current to its own input.
    pub branch_gain: Vec<Vec<f64>>,
    pub reference_gain: Vec<f64>,
    /// `|sum of diode currents - c|`, signal units.
    pub residual: f64,
    pub iterations: usize,
}

impl SolveResult {
    /// Internal node voltages `V_ij`.
    pub fn v_internal(&self) -> Option<Vec<Vec<f64>>> {
        let vb = self.v_b?;
        Some(
            self.diode_voltage
                .iter()
                .map(|row| row.iter().map(|d| d + vb).collect())
                .collect(),
        )
    }
}

fn branch_inputs(config: &SacNodeConfig, inputs: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for (x, row) in inputs.iter().zip(&config.offsets) {
        out.extend(row.iter().map(|o| x + o));
    }
    if config.include_zero_bank {
        out.extend(config.reference_offsets.iter().copied());
    }
}

pub fn solve_node(config: &SacNodeConfig, inputs: &[f64]) -> Result<SolveResult> {
    config.validate()?;
    if inputs.len() != config.n_inputs() {
        return Err(invalid(format!(
            "expected {} inputs, got {}",
            config.n_inputs(),
            inputs.len()
        )));
    }
    let kernel = Kernel::new(&config.model, &config.diode);
    let mut flat = Vec::new();
    branch_inputs(config, inputs, &mut flat);
    let mut sc = Scratch::default();
    let h = kernel.solve(&flat, config.c, &mut sc)?;
    let vs = config.model.voltage_scale();
    let s = config.n_splines();
    let n = config.n_inputs();
    let rows = |v: &[f64], k: f64| -> Vec<Vec<f64>> {
        (0..n).map(|i| v[i * s..(i + 1) * s].iter().map(|x| x * k).collect()).collect()
    };
    let tail = |v: &[f64], k: f64| -> Vec<f64> { v[n * s..].iter().map(|x| x * k).collect() };
    Ok(SolveResult {
        inputs: inputs.to_vec(),
        h,
        v_b: kernel.gate_voltage(h),
        diode_voltage: rows(&sc.d, vs),
        reference_voltage: tail(&sc.d, vs),
        branch_current: rows(&sc.rho, 1.0),
        reference_current: tail(&sc.rho, 1.0),
        branch_gain: rows(&sc.gain, 1.0),
        reference_gain: tail(&sc.gain, 1.0),
        residual: sc.residual,
        iterations: sc.iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jacobian {
    pub sensitivities: Vec<f64>,
    /// Set when the analytic form was singular and finite differences were used.
    pub finite_difference: bool,
}

/// Sensitivity of `h` to each input, by implicit differentiation of the
/// solved node.
pub fn jacobian(config: &SacNodeConfig, solution: &SolveResult) -> Result<Jacobian> {
    let inputs = &solution.inputs;
    let analytic = {
        let all = solution
            .branch_gain
            .iter()
            .flatten()
            .chain(&solution.reference_gain);
        let total: f64 = all.clone().sum();
        if total.is_finite() && total > 1e-300 && all.clone().all(|g| g.is_finite()) {
            Some(
                solution
                    .branch_gain
                    .iter()
                    .map(|row| row.iter().sum::<f64>() / total)
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        }
    };
    if let Some(sensitivities) = analytic {
        return Ok(Jacobian {
            sensitivities,
            finite_difference: false,
        });
    }
    let mut sens = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let step = 1e-6 * inputs[i].abs().max(1.0);
        probe[i] = inputs[i] + step;
        let up = solve_node(config, &probe)?.h;
        probe[i] = inputs[i] - step;
        let dn = solve_node(config, &probe)?.h;
        probe[i] = inputs[i];
        sens.push((up - dn) / (2.0 * step));
    }
    Ok(Jacobian {
        sensitivities: sens,
        finite_difference: true,
    })
}

/// Single-input shape normalized so that its left asymptote is zero.
///
/// The floor is the node output with the input bank removed, which is the
/// exact limit of `h(x)` as `x` goes to minus infinity.
#[derive(Debug, Clone)]
pub struct ProtoShape {
    kernel: Kernel,
    offsets: Vec<f64>,
    reference: Vec<f64>,
    c: f64,
    floor: f64,
}

impl ProtoShape {
    pub fn new(config: &SacNodeConfig) -> Result<Self> {
        config.validate()?;
        if config.n_inputs() != 1 {
            return Err(invalid("proto-shape needs a single-input node"));
        }
        if !config.include_zero_bank {
            return Err(invalid("proto-shape needs the zero bank"));
        }
        let kernel = Kernel::new(&config.model, &config.diode);
        let mut sc = Scratch::default();
        let floor = kernel.solve(&config.reference_offsets, config.c, &mut sc)?;
        Ok(Self {
            kernel,
            offsets: config.offsets[0].clone(),
            reference: config.reference_offsets.clone(),
            c: config.c,
            floor,
        })
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn model(&self) -> &TransistorModel {
        self.kernel.model()
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let mut sc = Scratch::default();
        let mut buf = Vec::new();
        self.eval_into(x, &mut buf, &mut sc).map(|(v, _)| v)
    }

    /// Value and slope, reusing caller-owned buffers.
    pub fn eval_into(&self, x: f64, buf: &mut Vec<f64>, sc: &mut Scratch) -> Result<(f64, f64)> {
        buf.clear();
        buf.extend(self.offsets.iter().map(|o| x + o));
        buf.extend(self.reference.iter().copied());
        let h = self.kernel.solve(buf, self.c, sc)?;
        let m = self.offsets.len();
        let slope = match sc.gain_total() {
            Some(t) if sc.gain.iter().all(|g| g.is_finite()) => sc.gain[..m].iter().sum::<f64>() / t,
            _ => {
                let step = 1e-6 * x.abs().max(1.0);
                let mut tmp = Scratch::default();
                let mut b2 = Vec::new();
                b2.extend(self.offsets.iter().map(|o| x + step + o));
                b2.extend(self.reference.iter().copied());
                let up = self.kernel.solve(&b2, self.c, &mut tmp)?;
                b2.clear();
                b2.extend(self.offsets.iter().map(|o| x - step + o));
                b2.extend(self.reference.iter().copied());
                let dn = self.kernel.solve(&b2, self.c, &mut tmp)?;
                (up - dn) / (2.0 * step)
            }
        };
        Ok((h - self.floor, slope))
    }
}

pub fn proto_shape(x: f64, config: &SacNodeConfig) -> Result<f64> {
    ProtoShape::new(config)?.eval(x)
}

/// Ordered samples of the proto-shape on an evenly spaced grid.
pub fn sweep(config: &SacNodeConfig, x_min: f64, x_max: f64, n: usize) -> Result<Vec<(f64, f64)>> {
    if n < 2 || !(x_max > x_min) {
        return Err(invalid("sweep needs n >= 2 and x_max > x_min"));
    }
    let shape = ProtoShape::new(config)?;
    let mut buf = Vec::new();
    let mut sc = Scratch::default();
    (0..n)
        .map(|k| {
            let x = x_min + (x_max - x_min) * k as f64 / (n - 1) as f64;
            shape.eval_into(x, &mut buf, &mut sc).map(|(y, _)| (x, y))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTerm {
    pub weight: f64,
    pub x_shift: f64,
    pub y_shift: f64,
    pub base: SacNodeConfig,
}

/// Weighted sum of shifted proto-shapes.
#[derive(Debug, Clone)]
pub struct ComposedShape {
    terms: Vec<(f64, f64, f64, ProtoShape)>,
}

impl ComposedShape {
    pub fn eval(&self, x: f64) -> Result<f64> {
        let mut acc = 0.0;
        for (w, xs, ys, shape) in &self.terms {
            acc += w * shape.eval(x - xs)? + ys;
        }
        Ok(acc)
    }
}

pub fn compose_shape(terms: &[ShapeTerm]) -> Result<ComposedShape> {
    if terms.is_empty() {
        return Err(invalid("no shape terms"));
    }
    let terms = terms
        .iter()
        .map(|t| Ok((t.weight, t.x_shift, t.y_shift, ProtoShape::new(&t.base)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComposedShape { terms })
}
