//! Compressive logarithmic DAC.
//!
//! Bit `i` (least significant first) drives `S` branches at levels
//! `i + delta_ij` with `sum_j 2^delta_ij = 1`, and an always-on bank at level
//! `delta_j` stands for the constant one. The node output then approximates
//! `log2(1 + code)` up to an affine map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SacError};
use crate::gmp::{water_fill, Kernel, SacNodeConfig, Scratch};
use crate::optim::NelderMead;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacConfig {
    pub n_bits: usize,
    pub n_splines: usize,
    /// Branch levels per bit, least significant bit first.
    pub offsets: Vec<Vec<f64>>,
    /// Branch levels of the always-on bank.
    pub reference_offsets: Vec<f64>,
    pub base: f64,
    /// Supplies the constraint, transistor and diode; its own offsets are
    /// not used.
    pub node: SacNodeConfig,
}

impl DacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bits == 0 || self.n_bits > 24 {
            return Err(invalid("n_bits must be in 1..=24"));
        }
        if self.offsets.len() != self.n_bits
            || self.offsets.iter().any(|r| r.len() != self.n_splines)
            || self.reference_offsets.len() != self.n_splines
        {
            return Err(invalid("DAC offsets must be n_bits x n_splines"));
        }
        if !(self.base > 1.0) {
            return Err(invalid("base must exceed 1"));
        }
        if !(self.node.c > 0.0) {
            return Err(invalid("c must be positive"));
        }
        Ok(())
    }

    pub fn full_scale_code(&self) -> u64 {
        (1u64 << self.n_bits) - 1
    }

    pub fn with_node(&self, node: SacNodeConfig) -> Self {
        Self { node, ..self.clone() }
    }

    /// Same converter on another device; the constraint is kept.
    pub fn with_model(&self, model: crate::device::TransistorModel) -> Self {
        self.with_node(self.node.clone().with_model(model))
    }
}

/// Prepared converter.
#[derive(Debug, Clone)]
pub struct Dac {
    config: DacConfig,
    kernel: Kernel,
    floor: f64,
    full: f64,
}

impl Dac {
    pub fn new(config: &DacConfig) -> Result<Self> {
        config.validate()?;
        let kernel = Kernel::new(&config.node.model, &config.node.diode);
        let mut dac = Self {
            config: config.clone(),
            kernel,
            floor: 0.0,
            full: 0.0,
        };
        dac.floor = dac.raw_code(0)?;
        dac.full = dac.raw_code(config.full_scale_code())?;
        if !(dac.full > dac.floor) {
            return Err(invalid("DAC has no output span"));
        }
        Ok(dac)
    }

    pub fn config(&self) -> &DacConfig {
        &self.config
    }

    fn branches(&self, code: u64, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.config.reference_offsets);
        for (i, row) in self.config.offsets.iter().enumerate() {
            if code >> i & 1 == 1 {
                out.extend_from_slice(row);
            }
        }
    }

    /// Node output for a code, signal units.
    pub fn raw_code(&self, code: u64) -> Result<f64> {
        if code > self.config.full_scale_code() {
            return Err(invalid("code exceeds the DAC range"));
        }
        let mut buf = Vec::new();
        let mut sc = Scratch::default();
        self.branches(code, &mut buf);
        self.kernel.solve(&buf, self.config.node.c, &mut sc)
    }

    pub fn raw(&self, bits: &[bool]) -> Result<f64> {
        if bits.len() != self.config.n_bits {
            return Err(invalid(format!(
                "expected {} bits, got {}",
                self.config.n_bits,
                bits.len()
            )));
        }
        let code = bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | (u64::from(b) << i));
        self.raw_code(code)
    }

    /// Output mapped so that code 0 reads 0 and full scale reads 1.
    pub fn normalized(&self, code: u64) -> Result<f64> {
        Ok((self.raw_code(code)? - self.floor) / (self.full - self.floor))
    }

    /// Normalized output in the generic base of the config.
    pub fn rebased(&self, code: u64) -> Result<f64> {
        dac_rebase(self.normalized(code)?, self.config.base)
    }

    /// Normalized outputs for every code.
    pub fn sweep(&self) -> Result<Vec<f64>> {
        let mut buf = Vec::new();
        let mut sc = Scratch::default();
        let span = self.full - self.floor;
        (0..=self.config.full_scale_code())
            .map(|code| {
                self.branches(code, &mut buf);
                Ok((self.kernel.solve(&buf, self.config.node.c, &mut sc)? - self.floor) / span)
            })
            .collect()
    }

    pub fn max_deviation(&self) -> Result<f64> {
        let n = self.config.n_bits;
        Ok(self
            .sweep()?
            .iter()
            .enumerate()
            .map(|(code, v)| (v - ideal_log_curve(code as u64, n)).abs())
            .fold(0.0, f64::max))
    }
}

pub fn dac_convert(bits: &[bool], config: &DacConfig) -> Result<f64> {
    Dac::new(config)?.raw(bits)
}

/// `log2(1 + code) / n_bits`.
pub fn ideal_log_curve(code: u64, n_bits: usize) -> f64 {
    (1.0 + code as f64).log2() / n_bits as f64
}

/// Converts a normalized base-2 output to base `theta`.
pub fn dac_rebase(value: f64, theta: f64) -> Result<f64> {
    if !(theta > 1.0 && theta.is_finite()) {
        return Err(invalid("base must exceed 1"));
    }
    Ok(value / 2f64.log(theta))
}

#[derive(Debug, Clone, Copy)]
pub struct DacFitOptions {
    pub seed: u64,
    pub restarts: usize,
    pub max_evals: usize,
    /// Also fit each bit's offsets separately after the shared fit.
    pub per_bit: bool,
}

impl Default for DacFitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            restarts: 6,
            max_evals: 2500,
            per_bit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacFit {
    pub config: DacConfig,
    /// Largest deviation from the ideal curve over the fitted codes, in the
    /// rectifier limit.
    pub max_deviation: f64,
}

const FIT_LIMIT: f64 = 0.2;

/// Codes used for fitting: all of them up to 12 bits, otherwise 4096 codes
/// split between linear and logarithmic spacing.
fn fit_codes(n_bits: usize) -> Vec<u64> {
    let full = (1u64 << n_bits) - 1;
    if n_bits <= 12 {
        return (0..=full).collect();
    }
    let mut v: Vec<u64> = (0..2048u64)
        .map(|k| (k as f64 * full as f64 / 2047.0).round() as u64)
        .chain((0..2048u64).map(|k| {
            ((k as f64 / 2047.0 * (full as f64 + 1.0).log2()).exp2() - 1.0).round() as u64
        }))
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Shifts a row so that `sum_j 2^row_j = 1`.
fn partition(row: &mut [f64]) {
    let s: f64 = row.iter().map(|d| d.exp2()).sum();
    let k = s.log2();
    for d in row.iter_mut() {
        *d -= k;
    }
}

struct Objective {
    n_bits: usize,
    codes: Vec<u64>,
    ideal: Vec<f64>,
    buf: Vec<f64>,
}

impl Objective {
    fn new(n_bits: usize) -> Self {
        let codes = fit_codes(n_bits);
        let ideal = codes.iter().map(|&c| ideal_log_curve(c, n_bits)).collect();
        Self {
            n_bits,
            codes,
            ideal,
            buf: Vec::new(),
        }
    }

    /// Rows for bits 0..n plus the reference row last, each partitioned.
    fn rows(&self, deltas: &[Vec<f64>]) -> Vec<Vec<f64>> {
        deltas
            .iter()
            .map(|d| {
                let mut r = vec![0.0];
                r.extend_from_slice(d);
                partition(&mut r);
                r
            })
            .collect()
    }

    fn eval_code(&mut self, rows: &[Vec<f64>], code: u64, c: f64) -> f64 {
        self.buf.clear();
        self.buf.extend_from_slice(&rows[self.n_bits]);
        for (i, row) in rows[..self.n_bits].iter().enumerate() {
            if code >> i & 1 == 1 {
                self.buf.extend(row.iter().map(|d| d + i as f64));
            }
        }
        water_fill(&mut self.buf, c)
    }

    fn max_error(&mut self, deltas: &[Vec<f64>], c: f64) -> f64 {
        let rows = self.rows(deltas);
        let full = (1u64 << self.n_bits) - 1;
        let z0 = self.eval_code(&rows, 0, c);
        let z1 = self.eval_code(&rows, full, c);
        let span = z1 - z0;
        if !(span > 0.0) {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for k in 0..self.codes.len() {
            let code = self.codes[k];
            let z = self.eval_code(&rows, code, c);
            worst = worst.max(((z - z0) / span - self.ideal[k]).abs());
        }
        worst
    }
}

/// Fits DAC offsets in the rectifier limit with default options.
pub fn dac_fit_offsets(n_bits: usize, n_splines: usize, node: &SacNodeConfig) -> Result<DacFit> {
    dac_fit_offsets_with(n_bits, n_splines, node, DacFitOptions::default())
}

/// Starts from equally spaced spline offsets shared by all bits, minimizes
/// the largest deviation from `log2(1 + code) / n_bits` over the shared
/// offsets and the constraint, then optionally frees each bit's offsets.
pub fn dac_fit_offsets_with(
    n_bits: usize,
    n_splines: usize,
    node: &SacNodeConfig,
    opts: DacFitOptions,
) -> Result<DacFit> {
    if n_bits == 0 || n_bits > 24 {
        return Err(invalid("n_bits must be in 1..=24"));
    }
    if n_splines == 0 {
        return Err(invalid("n_splines must be at least 1"));
    }
    let mut obj = Objective::new(n_bits);
    let free = n_splines - 1;
    let shared = |p: &[f64]| -> Vec<Vec<f64>> { vec![p[..free].to_vec(); n_bits + 1] };
    let unpack_c = |v: f64| v.abs().max(1e-6);

    // coarse grid over equal spacing and constraint
    let mut starts: Vec<(f64, Vec<f64>)> = Vec::new();
    for si in 1..=8 {
        let spacing = 0.5 * si as f64;
        for ci in 0..=10 {
            let c = 0.5 * 1.3f64.powi(ci) * n_splines as f64;
            let mut p: Vec<f64> = (1..n_splines).map(|j| -spacing * j as f64).collect();
            p.push(c);
            let e = obj.max_error(&shared(&p), unpack_c(c));
            starts.push((e, p));
        }
    }
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let nm = NelderMead {
        max_evals: opts.max_evals,
        initial_step: 0.3,
        ..NelderMead::default()
    };
    let mut best = starts[0].clone();
    if free > 0 || n_splines == 1 {
        for r in 0..opts.restarts.max(1) {
            let mut p = starts[r.min(starts.len() - 1)].1.clone();
            if r >= 3 {
                for v in p.iter_mut() {
                    *v *= 1.0 + 0.3 * (rng.random::<f64>() - 0.5);
                }
            }
            let m = nm.minimize(|q| obj.max_error(&shared(q), unpack_c(q[free])), &p);
            if m.f < best.0 {
                best = (m.f, m.x);
            }
        }
    }
    let mut deltas = shared(&best.1);
    let mut c = unpack_c(best.1[free]);
    let mut err = best.0;

    if opts.per_bit && free > 0 {
        let mut p: Vec<f64> = deltas.iter().flatten().copied().collect();
        p.push(c);
        let rows_of = |q: &[f64]| -> Vec<Vec<f64>> { q[..q.len() - 1].chunks(free).map(|r| r.to_vec()).collect() };
        let per = NelderMead {
            max_evals: opts.max_evals * 4,
            initial_step: 0.05,
            ..NelderMead::default()
        };
        for _ in 0..3 {
            let m = per.minimize(|q| obj.max_error(&rows_of(q), unpack_c(q[q.len() - 1])), &p);
            if m.f < err {
                err = m.f;
                p = m.x;
            }
        }
        deltas = rows_of(&p);
        c = unpack_c(p[p.len() - 1]);
    }

    if !(err <= FIT_LIMIT) {
        return Err(SacError::FitFailed {
            max_deviation: err,
            limit: FIT_LIMIT,
        });
    }
    let rows = obj.rows(&deltas);
    let offsets = rows[..n_bits]
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().map(|d| d + i as f64).collect())
        .collect();
    let mut template = node.clone();
    template.c = c;
    Ok(DacFit {
        config: DacConfig {
            n_bits,
            n_splines,
            offsets,
            reference_offsets: rows[n_bits].clone(),
            base: 2.0,
            node: template,
        },
        max_deviation: err,
    })
}

/// Compressive reference curves over normalized 16-bit codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogCurves {
    pub x: Vec<f64>,
    pub ideal: Vec<f64>,
    pub bfloat16: Vec<f64>,
    pub ieee754: Vec<f64>,
}

const REF_BITS: u32 = 16;

/// Piecewise-linear log2 read off a float's exponent and truncated mantissa.
fn segmented_log2(v: f64, mantissa_bits: u32) -> f64 {
    let e = v.log2().floor();
    let frac = v / e.exp2() - 1.0;
    let q = (mantissa_bits as f64).exp2();
    e + (frac * q).floor() / q
}

pub fn reference_log_curves(n_points: usize) -> Result<LogCurves> {
    if n_points < 2 {
        return Err(invalid("need at least two points"));
    }
    let full = (REF_BITS as f64).exp2() - 1.0;
    let scale = REF_BITS as f64;
    let mut out = LogCurves {
        x: Vec::with_capacity(n_points),
        ideal: Vec::with_capacity(n_points),
        bfloat16: Vec::with_capacity(n_points),
        ieee754: Vec::with_capacity(n_points),
    };
    for k in 0..n_points {
        let u = k as f64 / (n_points - 1) as f64;
        let v = 1.0 + u * full;
        out.x.push(u);
        out.ideal.push(v.log2() / scale);
        out.bfloat16.push(segmented_log2(v, 7) / scale);
        out.ieee754.push(segmented_log2(v, 23) / scale);
    }
    Ok(out)
}
