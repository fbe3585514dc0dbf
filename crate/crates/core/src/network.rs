//! Small feed-forward networks built from multipliers, soft ReLUs and
//! log-domain weight DACs, with hardware-in-the-loop training.
//!
//! Every weight is stored as a sign and a DAC code linear in its magnitude.
//! The converter output is log-compressed and the multiplier input expands it
//! again, so the multiplier sees `w_range * sign * expand(level(code))` where
//! `level` is the converter's normalized output on the network's device. Any
//! converter error is therefore amplified by the expansion. Training keeps a
//! continuous copy of each stored value and passes gradients straight through
//! the rounding.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    dac_fit_offsets_with, multiply_calibrate, to_differential, Dac, DacConfig,
    DacFitOptions, GainMap, Multiplier, MultiplierConfig, SoftRelu,
};
use crate::design::SplineDesign;
use crate::device::{make_model, Regime, TransistorModel};
use crate::error::{invalid, Result, SacError};
use crate::gmp::Scratch;

/// Fraction of samples in the training split.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Training loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
    pub seed: u64,
    /// The first `n_train` samples form the training split.
    pub n_train: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn train(&self) -> (&[[f64; 2]], &[f64]) {
        (&self.inputs[..self.n_train], &self.targets[..self.n_train])
    }

    pub fn test(&self) -> (&[[f64; 2]], &[f64]) {
        (&self.inputs[self.n_train..], &self.targets[self.n_train..])
    }
}

/// Multi-start schedule: short runs from several initializations and a full
/// run continuing the one with the lowest training loss, both on continuous
/// stored values, then a rounded phase on the converter codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRecipe {
    pub starts: usize,
    pub start_epochs: usize,
    pub start_lr: f64,
    pub hyper: TrainHyper,
    pub finish_epochs: usize,
    pub finish_lr: f64,
    /// Mismatch drawn into every initialization; 0 disables it.
    pub mismatch_sigma: f64,
    pub mismatch_seed: u64,
}

impl Default for FitRecipe {
    fn default() -> Self {
        Self {
            starts: 8,
            start_epochs: 40,
            start_lr: 0.02,
            hyper: TrainHyper {
                lr: 0.01,
                epochs: 300,
                ..TrainHyper::default()
            },
            finish_epochs: 40,
            finish_lr: 0.002,
            mismatch_sigma: 0.0,
            mismatch_seed: 0,
        }
    }
}

pub fn fit(spec: &NetworkSpec, data: &Dataset, recipe: FitRecipe) -> Result<TrainedNetwork> {
    let settled = fit_continuous(spec, data, recipe)?;
    finish(&settled, spec, data, recipe)
}

/// The multi-start and full phases of [`fit`], on continuous stored values.
pub fn fit_continuous(spec: &NetworkSpec, data: &Dataset, recipe: FitRecipe) -> Result<TrainedNetwork> {
    let continuous = NetworkSpec {
        weight_bits: 0,
        ..spec.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.hyper.seed);
    let mut best: Option<TrainedNetwork> = None;
    for _ in 0..recipe.starts.max(1) {
        let seed: u64 = rng.random();
        let net = inject_mismatch(
            &TrainedNetwork::init(&continuous, seed)?,
            recipe.mismatch_sigma,
            recipe.mismatch_seed,
        )?;
        let hyper = TrainHyper {
            lr: recipe.start_lr,
            epochs: recipe.start_epochs,
            seed,
            ..recipe.hyper
        };
        let t = match train(&net, data, hyper) {
            Ok(t) => t,
            // a divergent start is simply not selected
            Err(SacError::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        let loss = |n: &TrainedNetwork| n.metrics.map_or(f64::INFINITY, |m| m.train_mse);
        if best.as_ref().is_none_or(|b| loss(&t) < loss(b)) {
            best = Some(t);
        }
    }
    let start = best.ok_or_else(|| invalid("every start diverged"))?;
    train(&start, data, recipe.hyper)
}

/// Rounds a continuous network onto the converter codes of `spec` and runs
/// the rounded phase of [`fit`].
pub fn finish(settled: &TrainedNetwork, spec: &NetworkSpec, data: &Dataset, recipe: FitRecipe) -> Result<TrainedNetwork> {
    if spec.weight_bits == 0 {
        return Ok(settled.clone());
    }
    let mut rounded = TrainedNetwork::init(spec, 0)?;
    rounded.weights = settled.weights.clone();
    rounded.mismatch = settled.mismatch.clone();
    rounded.refresh_codes()?;
    let hyper = TrainHyper {
        lr: recipe.finish_lr,
        epochs: recipe.finish_epochs,
        ..recipe.hyper
    };
    train(&rounded, data, hyper)
}

pub fn sine_target(x1: f64, x2: f64) -> f64 {
    (2.0 * PI * x1).sin() * (2.0 * PI * x2).sin()
}

/// `n` uniform samples of `sin(2 pi x1) sin(2 pi x2)` on the unit square,
/// split 80/20.
pub fn make_sine_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let targets = inputs.iter().map(|p| sine_target(p[0], p[1])).collect();
    let n_train = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n);
    Ok(Dataset {
        inputs,
        targets,
        seed,
        n_train,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    /// Spline count of the multipliers and activations.
    pub splines: usize,
    /// Knee width of the hidden soft ReLUs; the activation approximates
    /// `width * softplus(x / width)`.
    pub relu_width: f64,
    /// DAC resolution of the weight magnitudes; 0 keeps weights continuous.
    pub weight_bits: usize,
    pub dac_splines: usize,
    /// Swing of the input and hidden signals fed to the multipliers. For
    /// low spline counts the product is min-like, so signals wider than the
    /// weight range saturate.
    pub signal_range: f64,
    /// Nominal gain from `sum x * s` to the activation input, with `x` the
    /// signal normalized to `[-1, 1]`.
    pub pre_gain: f64,
    /// Nominal gain from `sum x * s` to the output.
    pub out_gain: f64,
    pub train_regime: Regime,
    pub eval_regime: Regime,
    pub temperature: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            layer_sizes: vec![2, 6, 1],
            splines: 3,
            relu_width: 0.15,
            weight_bits: 8,
            dac_splines: 4,
            signal_range: 1.0,
            pre_gain: 2.0,
            out_gain: 10.0,
            train_regime: Regime::Si,
            eval_regime: Regime::Si,
            temperature: crate::device::DEFAULT_TEMPERATURE,
        }
    }
}

impl NetworkSpec {
    /// Default layout with the signal swing and output gain that trained
    /// best for the given spline count. The single-spline product is
    /// min-like and wants a narrower swing and a smaller output gain.
    pub fn for_splines(splines: usize) -> Self {
        let (signal_range, out_gain) = if splines == 1 { (0.6, 5.0) } else { (1.0, 10.0) };
        Self {
            splines,
            signal_range,
            out_gain,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 || self.layer_sizes.contains(&0) {
            return Err(invalid("a network needs at least one hidden layer and non-empty layers"));
        }
        if self.splines == 0 || self.dac_splines == 0 {
            return Err(invalid("spline counts must be at least 1"));
        }
        if self.weight_bits > 20 {
            return Err(invalid("weight_bits must be at most 20"));
        }
        for (name, v) in [
            ("relu_width", self.relu_width),
            ("signal_range", self.signal_range),
            ("pre_gain", self.pre_gain),
            ("out_gain", self.out_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.signal_range > 1.0 {
            return Err(invalid("signal_range must not exceed the multiplier input range of 1"));
        }
        make_model(self.train_regime, self.temperature)?;
        make_model(self.eval_regime, self.temperature)?;
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 500,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Current-mirror ratios between blocks, fixed at design time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    /// Calibrated multiplier scale `k` in `y = 2 k x w`.
    pub product_scale: f64,
    /// MAC current to activation input.
    pub mac: f64,
    /// Activation output to next-layer input.
    pub hidden: f64,
    /// Constant current added to every next-layer input, so that the
    /// activation range spans the full multiplier input range.
    pub hidden_offset: f64,
    /// MAC current to network output.
    pub output: f64,
}

/// Multiplicative mirror-gain errors per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub sigma: f64,
    pub seed: u64,
    /// One factor per multiplier, `[layer][node][input]`.
    pub products: Vec<Vec<Vec<f64>>>,
    /// One factor per activation, `[layer][node]`.
    pub activations: Vec<Vec<f64>>,
}

impl Mismatch {
    fn none(spec: &NetworkSpec) -> Self {
        let l = &spec.layer_sizes;
        Self {
            sigma: 0.0,
            seed: 0,
            products: (0..spec.n_layers()).map(|i| vec![vec![1.0; l[i] + 1]; l[i + 1]]).collect(),
            activations: (0..spec.n_layers() - 1).map(|i| vec![1.0; l[i + 1]]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNetwork {
    pub spec: NetworkSpec,
    /// Continuous stored values in `[-1, 1]`, `[layer][node][input]`; the
    /// last input of every node is the always-on bias.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Signed DAC codes derived from `weights`.
    pub codes: Vec<Vec<Vec<i64>>>,
    pub gains: Gains,
    pub dac: DacConfig,
    pub gain_map: GainMap,
    pub mismatch: Mismatch,
    pub hyper: Option<TrainHyper>,
    pub history: Vec<f64>,
    pub metrics: Option<Metrics>,
}

const CAL_POINTS: usize = 21;

fn fitted_dac(bits: usize, splines: usize) -> Result<DacConfig> {
    static CACHE: Mutex<BTreeMap<(usize, usize), DacConfig>> = Mutex::new(BTreeMap::new());
    if let Some(c) = CACHE.lock().ok().and_then(|m| m.get(&(bits, splines)).cloned()) {
        return Ok(c);
    }
    let rect = make_model(Regime::Rect, crate::device::DEFAULT_TEMPERATURE)?;
    let node = SplineDesign::canonical(1)?.node(1.0, 0.0, rect);
    let fit = dac_fit_offsets_with(bits, splines, &node, DacFitOptions::default())?;
    if let Ok(mut m) = CACHE.lock() {
        m.insert((bits, splines), fit.config.clone());
    }
    Ok(fit.config)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

impl TrainedNetwork {
    /// Fresh network with stored values drawn uniformly from `[-0.5, 0.5]`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let model = make_model(spec.train_regime, spec.temperature)?;
        let mult = MultiplierConfig::design(spec.splines, model)?;
        let gain_map = multiply_calibrate(&mult, &linspace(-mult.w_range, mult.w_range, CAL_POINTS))?;
        let k = gain_map.scale;
        let sr = spec.signal_range;
        let nominal = 2.0 * k * mult.w_range * sr;

        // largest product magnitude bounds every MAC current
        let m = Multiplier::new(&mult)?;
        let mut ymax: f64 = 0.0;
        for &x in &linspace(-sr, sr, CAL_POINTS) {
            for &w in &linspace(-mult.w_range, mult.w_range, CAL_POINTS) {
                ymax = ymax.max(m.eval(x, w)?.abs());
            }
        }
        let mac = spec.pre_gain / nominal;
        let fan_in = spec.layer_sizes[..spec.n_layers() - 1].iter().max().copied().unwrap_or(1) + 1;
        let relu = relu_block(spec, model)?;
        let r_max = relu.eval(mac * fan_in as f64 * ymax * 1.01)?;
        let gains = Gains {
            product_scale: k,
            mac,
            hidden: 2.0 * sr / r_max,
            hidden_offset: -sr,
            output: spec.out_gain / nominal,
        };

        let dac = if spec.weight_bits > 0 {
            fitted_dac(spec.weight_bits, spec.dac_splines)?
        } else {
            // continuous weights still record a converter for the file format
            fitted_dac(1, 1)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = &spec.layer_sizes;
        let weights: Vec<Vec<Vec<f64>>> = (0..spec.n_layers())
            .map(|i| {
                (0..l[i + 1])
                    .map(|_| (0..=l[i]).map(|_| rng.random::<f64>() - 0.5).collect())
                    .collect()
            })
            .collect();
        let mut net = Self {
            spec: spec.clone(),
            codes: Vec::new(),
            weights,
            gains,
            dac,
            gain_map,
            mismatch: Mismatch::none(spec),
            hyper: None,
            history: Vec::new(),
            metrics: None,
        };
        net.refresh_codes()?;
        Ok(net)
    }

    /// Programs every stored value to the code nearest on the training
    /// device's converter.
    fn refresh_codes(&mut self) -> Result<()> {
        if self.spec.weight_bits == 0 {
            self.codes = self.weights.iter().map(|l| l.iter().map(|r| vec![0; r.len()]).collect()).collect();
            return Ok(());
        }
        let table = code_table(self)?;
        self.codes = self
            .weights
            .iter()
            .map(|layer| layer.iter().map(|row| row.iter().map(|&s| table.code(s)).collect()).collect())
            .collect();
        Ok(())
    }

    pub fn n_weights(&self) -> usize {
        self.weights.iter().flatten().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SacError::WeightFile(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text).map_err(|e| SacError::WeightFile(e.to_string()))?;
        net.spec.validate()?;
        let shape_ok = net.weights.len() == net.spec.n_layers()
            && net.weights.iter().enumerate().all(|(i, layer)| {
                layer.len() == net.spec.layer_sizes[i + 1]
                    && layer.iter().all(|r| r.len() == net.spec.layer_sizes[i] + 1)
            });
        if !shape_ok {
            return Err(SacError::WeightFile("weight shape does not match layer sizes".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn relu_block(spec: &NetworkSpec, model: TransistorModel) -> Result<SoftRelu> {
    let node = SplineDesign::canonical(spec.splines)?.node(spec.relu_width, 0.0, model);
    SoftRelu::new(node.c, &node)
}

/// Expanded weight magnitude of every code on the device the weights are
/// programmed on, with a sorted index for nearest-value lookup.
#[derive(Debug)]
struct CodeTable {
    levels: Vec<f64>,
    sorted: Vec<u32>,
}

impl CodeTable {
    fn build(dac: &DacConfig, model: TransistorModel) -> Result<Self> {
        let d = Dac::new(&dac.with_model(model))?;
        let full = (1u64 << dac.n_bits) - 1;
        let levels = (0..=full)
            .map(|c| Ok(expand(d.normalized(c)?, dac.n_bits)))
            .collect::<Result<Vec<f64>>>()?;
        let mut sorted: Vec<u32> = (0..=full as u32).collect();
        sorted.sort_by(|&i, &j| levels[i as usize].total_cmp(&levels[j as usize]));
        Ok(Self { levels, sorted })
    }

    /// Code whose expanded level is closest to `m`.
    fn nearest(&self, m: f64) -> u64 {
        let at = self.sorted.partition_point(|&c| self.levels[c as usize] < m);
        let mut best = None::<(f64, u32)>;
        for &c in &self.sorted[at.saturating_sub(1)..(at + 1).min(self.sorted.len())] {
            let d = (self.levels[c as usize] - m).abs();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
        best.map_or(0, |(_, c)| c as u64)
    }

    /// Signed code of the stored value `s`.
    fn code(&self, s: f64) -> i64 {
        let c = self.nearest(s.abs().min(1.0)) as i64;
        if s < 0.0 {
            -c
        } else {
            c
        }
    }
}

/// Code tables are costly for wide converters and shared between engines.
fn code_table(net: &TrainedNetwork) -> Result<Arc<CodeTable>> {
    type Key = (String, String, u64);
    static CACHE: Mutex<BTreeMap<Key, Arc<CodeTable>>> = Mutex::new(BTreeMap::new());
    let key = (
        serde_json::to_string(&net.dac).map_err(|e| SacError::WeightFile(e.to_string()))?,
        format!("{:?}", net.spec.train_regime),
        net.spec.temperature.to_bits(),
    );
    if let Some(t) = CACHE.lock().ok().and_then(|m| m.get(&key).cloned()) {
        return Ok(t);
    }
    let model = make_model(net.spec.train_regime, net.spec.temperature)?;
    let table = Arc::new(CodeTable::build(&net.dac, model)?);
    if let Ok(mut m) = CACHE.lock() {
        m.insert(key, table.clone());
    }
    Ok(table)
}

/// Weight magnitude recovered from a compressed converter output `v`:
/// inverse of the ideal log curve, normalized to full scale.
fn expand(v: f64, bits: usize) -> f64 {
    let full = ((1u64 << bits) - 1) as f64;
    ((v * bits as f64).exp2() - 1.0) / full
}

/// A network bound to one device: the blocks it needs plus cached DAC levels.
pub struct Engine<'a> {
    net: &'a TrainedNetwork,
    mult: Multiplier,
    w_range: f64,
    relu: SoftRelu,
    dac: Option<Dac>,
    table: Option<Arc<CodeTable>>,
    levels: HashMap<u64, f64>,
    quantize: bool,
    buf: Vec<f64>,
    sc: Scratch,
}

/// Per-sample intermediate values kept for the backward pass.
#[derive(Default)]
struct Tape {
    /// Layer inputs including the bias entry.
    inputs: Vec<Vec<f64>>,
    dx: Vec<Vec<Vec<f64>>>,
    dw: Vec<Vec<Vec<f64>>>,
    act_slope: Vec<Vec<f64>>,
}

impl<'a> Engine<'a> {
    pub fn new(net: &'a TrainedNetwork, regime: Regime) -> Result<Self> {
        let model = make_model(regime, net.spec.temperature)?;
        let cfg = MultiplierConfig::design(net.spec.splines, model)?;
        let (dac, table) = if net.spec.weight_bits > 0 {
            (Some(Dac::new(&net.dac.with_model(model))?), Some(code_table(net)?))
        } else {
            (None, None)
        };
        Ok(Self {
            net,
            table,
            mult: Multiplier::new(&cfg)?,
            w_range: cfg.w_range,
            relu: relu_block(&net.spec, model)?,
            dac,
            levels: HashMap::new(),
            quantize: true,
            buf: Vec::new(),
            sc: Scratch::default(),
        })
    }

    /// Uses the continuous stored values directly; for gradient checks.
    pub fn without_quantization(mut self) -> Self {
        self.quantize = false;
        self
    }

    fn level(&mut self, code: u64) -> Result<f64> {
        if let Some(v) = self.levels.get(&code) {
            return Ok(*v);
        }
        let v = match &self.dac {
            Some(d) => expand(d.normalized(code)?, self.net.spec.weight_bits),
            None => 0.0,
        };
        self.levels.insert(code, v);
        Ok(v)
    }

    /// Weights seen by the multipliers.
    fn effective(&mut self, weights: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(weights.len());
        for layer in weights {
            let mut l = Vec::with_capacity(layer.len());
            for row in layer {
                let mut r = Vec::with_capacity(row.len());
                for &s in row {
                    let s = s.clamp(-1.0, 1.0);
                    let v = match &self.table {
                        Some(t) if self.quantize => {
                            let code = t.code(s);
                            self.level(code.unsigned_abs())? * code.signum() as f64
                        }
                        _ => s,
                    };
                    r.push(self.w_range * v);
                }
                l.push(r);
            }
            out.push(l);
        }
        Ok(out)
    }

    fn forward_one(&mut self, w: &[Vec<Vec<f64>>], input: [f64; 2], tape: Option<&mut Tape>) -> Result<Vec<f64>> {
        let net = self.net;
        let g = net.gains;
        let mut x: Vec<f64> = Vec::with_capacity(input.len() + 1);
        for v in input {
            x.push(to_differential(net.spec.signal_range * (2.0 * v - 1.0), 1.0)?.value());
        }
        x.push(1.0);
        let mut tape = tape;
        if let Some(t) = tape.as_deref_mut() {
            t.inputs.clear();
            t.dx.clear();
            t.dw.clear();
            t.act_slope.clear();
        }
        let n_layers = w.len();
        for (li, layer) in w.iter().enumerate() {
            let last = li + 1 == n_layers;
            let mut next = Vec::with_capacity(layer.len() + 1);
            let mut dxs = Vec::with_capacity(layer.len());
            let mut dws = Vec::with_capacity(layer.len());
            let mut slopes = Vec::with_capacity(layer.len());
            for (j, row) in layer.iter().enumerate() {
                let mu = &net.mismatch.products[li][j];
                let mut acc = 0.0;
                let mut dx = Vec::with_capacity(row.len());
                let mut dw = Vec::with_capacity(row.len());
                for (k, (&xk, &wk)) in x.iter().zip(row).enumerate() {
                    let p = self.mult.eval_grad(xk, wk, &mut self.buf, &mut self.sc)?;
                    acc += mu[k] * p.y;
                    dx.push(mu[k] * p.dx);
                    dw.push(mu[k] * p.dw);
                }
                if last {
                    next.push(g.output * acc);
                } else {
                    let alpha = net.mismatch.activations[li][j];
                    let (r, slope) = self.relu.eval_with_slope(g.mac * acc, &mut self.buf, &mut self.sc)?;
                    next.push(g.hidden * alpha * r + g.hidden_offset);
                    slopes.push(g.hidden * alpha * slope * g.mac);
                }
                dxs.push(dx);
                dws.push(dw);
            }
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(x.clone());
                t.dx.push(dxs);
                t.dw.push(dws);
                t.act_slope.push(slopes);
            }
            if !last {
                next.push(1.0);
            }
            x = next;
        }
        Ok(x)
    }

    /// Network output for one input pair.
    pub fn predict(&mut self, input: [f64; 2]) -> Result<f64> {
        let w = self.effective(&self.net.weights)?;
        Ok(self.forward_one(&w, input, None)?[0])
    }

    pub fn predict_all(&mut self, inputs: &[[f64; 2]]) -> Result<Vec<f64>> {
        let w = self.effective(&self.net.weights)?;
        inputs.iter().map(|&p| Ok(self.forward_one(&w, p, None)?[0])).collect()
    }

    pub fn mse(&mut self, inputs: &[[f64; 2]], targets: &[f64]) -> Result<f64> {
        self.mse_with(&self.net.weights, inputs, targets)
    }

    pub fn mse_with(&mut self, weights: &[Vec<Vec<f64>>], inputs: &[[f64; 2]], targets: &[f64]) -> Result<f64> {
        let w = self.effective(weights)?;
        let mut sum = 0.0;
        for (&p, &t) in inputs.iter().zip(targets) {
            let e = self.forward_one(&w, p, None)?[0] - t;
            sum += e * e;
        }
        Ok(sum / inputs.len().max(1) as f64)
    }

    /// Mean squared error over the batch and its gradient with respect to
    /// the stored values, evaluated at `weights`.
    pub fn loss_and_grad(
        &mut self,
        weights: &[Vec<Vec<f64>>],
        inputs: &[[f64; 2]],
        targets: &[f64],
    ) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
        if inputs.is_empty() {
            return Err(invalid("empty batch"));
        }
        let w = self.effective(weights)?;
        let mut grad: Vec<Vec<Vec<f64>>> = w.iter().map(|l| l.iter().map(|r| vec![0.0; r.len()]).collect()).collect();
        let mut tape = Tape::default();
        let n = inputs.len() as f64;
        let mut loss = 0.0;
        for (&p, &t) in inputs.iter().zip(targets) {
            let out = self.forward_one(&w, p, Some(&mut tape))?;
            let e = out[0] - t;
            loss += e * e / n;
            let mut upstream = vec![2.0 * e / n * self.net.gains.output];
            for li in (0..w.len()).rev() {
                let x = &tape.inputs[li];
                let mut down = vec![0.0; x.len() - 1];
                for (j, u) in upstream.iter().enumerate() {
                    for k in 0..x.len() {
                        grad[li][j][k] += u * tape.dw[li][j][k] * self.w_range;
                        if k + 1 < x.len() {
                            down[k] += u * tape.dx[li][j][k];
                        }
                    }
                }
                if li > 0 {
                    for (k, d) in down.iter_mut().enumerate() {
                        *d *= tape.act_slope[li - 1][k];
                    }
                }
                upstream = down;
            }
        }
        for (li, layer) in grad.iter().enumerate() {
            for (j, row) in layer.iter().enumerate() {
                if let Some(k) = row.iter().position(|g| !g.is_finite()) {
                    return Err(invalid(format!("non-finite gradient at layer {li} node {j} input {k}")));
                }
            }
        }
        Ok((loss, grad))
    }
}

/// Minibatch Adam on the stored values with straight-through rounding to
/// DAC codes, run on the spec's training device. The step size follows a
/// cosine decay from `lr` to zero. Each history entry is the full training
/// split MSE after that epoch; the returned weights are those of the best
/// epoch (or the start, if no epoch improved on it).
pub fn train(net: &TrainedNetwork, data: &Dataset, hyper: TrainHyper) -> Result<TrainedNetwork> {
    if !(hyper.lr >= 0.0 && hyper.lr.is_finite()) || hyper.batch_size == 0 {
        return Err(invalid("learning rate must be nonnegative and batch size positive"));
    }
    let (xs, ys) = data.train();
    if xs.is_empty() {
        return Err(invalid("empty training split"));
    }
    let mut out = net.clone();
    let mut weights = net.weights.clone();
    let mut m1: Vec<Vec<Vec<f64>>> = weights.iter().map(|l| l.iter().map(|r| vec![0.0; r.len()]).collect()).collect();
    let mut m2 = m1.clone();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let steps_per_epoch = xs.len().div_ceil(hyper.batch_size);
    let total = (steps_per_epoch * hyper.epochs).max(1) as f64;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut engine = Engine::new(net, net.spec.train_regime)?;
    let mut best = (engine.mse_with(&weights, xs, ys)?, weights.clone());
    let mut bx = Vec::with_capacity(hyper.batch_size);
    let mut by = Vec::with_capacity(hyper.batch_size);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.push(xs[i]);
                by.push(ys[i]);
            }
            let (_, g) = engine.loss_and_grad(&weights, &bx, &by)?;
            step += 1;
            let lr = hyper.lr * 0.5 * (1.0 + (PI * (step - 1) as f64 / total).cos());
            let c1 = 1.0 - b1.powi(step as i32);
            let c2 = 1.0 - b2.powi(step as i32);
            for li in 0..weights.len() {
                for j in 0..weights[li].len() {
                    for k in 0..weights[li][j].len() {
                        let gk = g[li][j][k];
                        let a = &mut m1[li][j][k];
                        *a = b1 * *a + (1.0 - b1) * gk;
                        let v = &mut m2[li][j][k];
                        *v = b2 * *v + (1.0 - b2) * gk * gk;
                        let upd = lr * (m1[li][j][k] / c1) / ((m2[li][j][k] / c2).sqrt() + eps);
                        let s = &mut weights[li][j][k];
                        *s = (*s - upd).clamp(-1.0, 1.0);
                    }
                }
            }
        }
        let loss = engine.mse_with(&weights, xs, ys)?;
        history.push(loss);
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(SacError::Divergence { epoch, loss, history });
        }
        if loss < best.0 {
            best = (loss, weights.clone());
        }
    }
    out.weights = best.1;
    out.refresh_codes()?;
    out.history = history;
    out.hyper = Some(hyper);
    let mut engine = Engine::new(&out, out.spec.train_regime)?;
    let train_mse = engine.mse(xs, ys)?;
    let (tx, ty) = data.test();
    let test_mse = if tx.is_empty() { f64::NAN } else { engine.mse(tx, ty)? };
    out.metrics = Some(Metrics { train_mse, test_mse });
    Ok(out)
}

/// Draws lognormal mirror-gain factors `exp(sigma * N(0, 1))` for every
/// multiplier and activation. `sigma = 0` restores the nominal gains.
pub fn inject_mismatch(net: &TrainedNetwork, sigma: f64, seed: u64) -> Result<TrainedNetwork> {
    if !(0.0..=0.2).contains(&sigma) {
        return Err(invalid("mismatch sigma must be within [0, 0.2]"));
    }
    let mut out = net.clone();
    let mut mm = Mismatch::none(&net.spec);
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (sigma * { let z: f64 = StandardNormal.sample(&mut rng); z }).exp();
        for v in mm.products.iter_mut().flatten().flatten() {
            *v = draw();
        }
        for v in mm.activations.iter_mut().flatten() {
            *v = draw();
        }
        mm.sigma = sigma;
        mm.seed = seed;
    }
    out.mismatch = mm;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub predictions: Vec<f64>,
}

/// Test-split MSE on the spec's evaluation device or on `regime` if given.
/// Stored codes are left untouched.
pub fn evaluate(net: &TrainedNetwork, data: &Dataset, regime: Option<Regime>) -> Result<Evaluation> {
    let (xs, ys) = data.test();
    evaluate_on(net, xs, ys, regime.unwrap_or(net.spec.eval_regime))
}

pub fn evaluate_on(net: &TrainedNetwork, xs: &[[f64; 2]], ys: &[f64], regime: Regime) -> Result<Evaluation> {
    let mut engine = Engine::new(net, regime)?;
    let predictions = engine.predict_all(xs)?;
    let mse = predictions.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / xs.len().max(1) as f64;
    Ok(Evaluation { mse, predictions })
}

/// Plain-arithmetic network with the same layout: affine layers and a
/// softplus hidden activation. Serves as the accuracy reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceNet {
    pub hidden_w: Vec<[f64; 3]>,
    pub out_w: Vec<f64>,
}

impl ReferenceNet {
    pub fn predict(&self, p: [f64; 2]) -> f64 {
        let u = [2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0];
        let n = self.hidden_w.len();
        let mut y = self.out_w[n];
        for (w, o) in self.hidden_w.iter().zip(&self.out_w) {
            y += o * crate::device::softplus(w[0] * u[0] + w[1] * u[1] + w[2]);
        }
        y
    }

    pub fn mse(&self, xs: &[[f64; 2]], ys: &[f64]) -> f64 {
        xs.iter().zip(ys).map(|(&p, y)| (self.predict(p) - y).powi(2)).sum::<f64>() / xs.len().max(1) as f64
    }
}

impl ReferenceNet {
    fn unpack(p: &[f64], hidden: usize) -> Self {
        Self {
            hidden_w: (0..hidden).map(|j| [p[3 * j], p[3 * j + 1], p[3 * j + 2]]).collect(),
            out_w: p[3 * hidden..].to_vec(),
        }
    }
}

fn reference_loss_grad(p: &[f64], hidden: usize, xs: &[[f64; 2]], ys: &[f64]) -> (f64, Vec<f64>) {
    let net = ReferenceNet::unpack(p, hidden);
    let mut g = vec![0.0; p.len()];
    let n = xs.len() as f64;
    let mut loss = 0.0;
    for (&q, &y) in xs.iter().zip(ys) {
        let u = [2.0 * q[0] - 1.0, 2.0 * q[1] - 1.0];
        let r = net.predict(q) - y;
        loss += r * r / n;
        let e = 2.0 * r / n;
        for j in 0..hidden {
            let w = net.hidden_w[j];
            let a = w[0] * u[0] + w[1] * u[1] + w[2];
            let back = e * net.out_w[j] * crate::device::logistic(a);
            g[3 * j] += back * u[0];
            g[3 * j + 1] += back * u[1];
            g[3 * j + 2] += back;
            g[3 * hidden + j] += e * crate::device::softplus(a);
        }
        g[4 * hidden] += e;
    }
    (loss, g)
}

/// Trains the reference network from `starts` random initializations with
/// full-batch Adam followed by L-BFGS; keeps the lowest training loss.
pub fn train_reference(data: &Dataset, hidden: usize, starts: usize, seed: u64) -> Result<ReferenceNet> {
    let (xs, ys) = data.train();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..starts.max(1) {
        let in_bound = 1.0 / 2f64.sqrt();
        let out_bound = 1.0 / (hidden as f64).sqrt();
        let mut p: Vec<f64> = (0..hidden * 4 + 1)
            .map(|i| {
                let b = if i < 3 * hidden { in_bound } else { out_bound };
                b * (2.0 * rng.random::<f64>() - 1.0)
            })
            .collect();
        let mut adam = Adam::new(p.len());
        for _ in 0..2000 {
            let (_, g) = reference_loss_grad(&p, hidden, xs, ys);
            adam.step(&mut p, &g, 0.05);
        }
        let m = crate::optim::lbfgs(|q| Ok(reference_loss_grad(q, hidden, xs, ys)), &p, 3000)?;
        if best.as_ref().is_none_or(|b| m.f < b.0) {
            best = Some((m.f, m.x));
        }
    }
    Ok(ReferenceNet::unpack(&best.expect("at least one start").1, hidden))
}

/// Adam moment estimates over a flat parameter vector.
struct Adam {
    m1: Vec<f64>,
    m2: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m1: vec![0.0; n],
            m2: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - 0.9f64.powi(self.t);
        let c2 = 1.0 - 0.999f64.powi(self.t);
        for i in 0..p.len() {
            self.m1[i] = 0.9 * self.m1[i] + 0.1 * g[i];
            self.m2[i] = 0.999 * self.m2[i] + 0.001 * g[i] * g[i];
            p[i] -= lr * (self.m1[i] / c1) / ((self.m2[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Central-difference gradient of the batch MSE; the oracle for
/// [`Engine::loss_and_grad`].
pub fn finite_difference_grad(
    engine: &mut Engine<'_>,
    weights: &[Vec<Vec<f64>>],
    inputs: &[[f64; 2]],
    targets: &[f64],
    step: f64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut w = weights.to_vec();
    let mut out: Vec<Vec<Vec<f64>>> = w.iter().map(|l| l.iter().map(|r| vec![0.0; r.len()]).collect()).collect();
    for li in 0..w.len() {
        for j in 0..w[li].len() {
            for k in 0..w[li][j].len() {
                let base = w[li][j][k];
                w[li][j][k] = base + step;
                let up = engine.mse_with(&w, inputs, targets)?;
                w[li][j][k] = base - step;
                let dn = engine.mse_with(&w, inputs, targets)?;
                w[li][j][k] = base;
                out[li][j][k] = (up - dn) / (2.0 * step);
            }
        }
    }
    Ok(out)
}

pub fn max_abs(a: &[Vec<Vec<f64>>]) -> f64 {
    a.iter().flatten().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
