//! Experiment runner: TOML configs, curve files and summaries.
//!
//! Every curve is rounded to nine significant digits before it is written,
//! and every summary number is computed from those rounded values, so a
//! summary can be rebuilt from the CSV files alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::blocks::{
    dac_fit_offsets_with, ideal_log_curve, Dac, DacConfig, DacFitOptions, Multiplier, MultiplierConfig, SoftRelu,
};
use crate::design::SplineDesign;
use crate::device::{make_model, Regime, TransistorModel, DEFAULT_TEMPERATURE};
use crate::error::{invalid, Result, SacError};
use crate::gmp::ProtoShape;
use crate::network::{evaluate, fit, make_sine_dataset, FitRecipe, NetworkSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Largest share of failed solver points an experiment tolerates.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// Normalized deviation allowed between regimes or temperatures.
pub const INVARIANCE_LIMIT: f64 = 0.05;

/// Published test MSEs of the sine regression for one and three splines.
pub const PUBLISHED_MSE: [(usize, f64); 2] = [(1, 0.00781), (3, 0.00034)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ProtoShape,
    Dac,
    Multiplier,
    Relu,
    Regression,
    Temperature,
    InvarianceReport,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::ProtoShape,
        ExperimentKind::Dac,
        ExperimentKind::Multiplier,
        ExperimentKind::Relu,
        ExperimentKind::Regression,
        ExperimentKind::Temperature,
        ExperimentKind::InvarianceReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ProtoShape => "proto-shape",
            ExperimentKind::Dac => "dac",
            ExperimentKind::Multiplier => "multiplier",
            ExperimentKind::Relu => "relu",
            ExperimentKind::Regression => "regression",
            ExperimentKind::Temperature => "temperature",
            ExperimentKind::InvarianceReport => "invariance-report",
        }
    }

    fn default_sweep(self) -> Sweep {
        let (x_min, x_max, points) = match self {
            ExperimentKind::ProtoShape => (-6.0, 6.0, 241),
            ExperimentKind::Multiplier => (-1.0, 1.0, 41),
            _ => (-1.0, 1.0, 201),
        };
        Sweep { x_min, x_max, points }
    }
}

impl FromStr for ExperimentKind {
    type Err = SacError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown experiment '{s}'")))
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Input sweep of the shape-like experiments. The DAC sweeps codes instead
/// and the regression experiment ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DacSection {
    pub bits: usize,
    /// Sweeps wider than this many codes are subsampled.
    pub max_codes: usize,
}

impl Default for DacSection {
    fn default() -> Self {
        Self { bits: 8, max_codes: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiplierSection {
    pub weights: Vec<f64>,
}

impl Default for MultiplierSection {
    fn default() -> Self {
        Self {
            weights: vec![-0.5, -0.25, 0.0, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReluSection {
    /// Knee constraint; smaller values sharpen the corner.
    pub c: f64,
}

impl Default for ReluSection {
    fn default() -> Self {
        Self { c: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSection {
    pub samples: usize,
    pub data_seed: u64,
    pub weight_bits: usize,
    pub train_regime: Regime,
    pub recipe: FitRecipe,
}

impl Default for RegressionSection {
    fn default() -> Self {
        Self {
            samples: 1024,
            data_seed: 0,
            weight_bits: 8,
            train_regime: Regime::Si,
            recipe: FitRecipe::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    ProtoShape,
    Relu,
    Multiplier,
    Dac,
}

impl Block {
    fn name(self) -> &'static str {
        match self {
            Block::ProtoShape => "protoshape",
            Block::Relu => "relu",
            Block::Multiplier => "multiplier",
            Block::Dac => "dac",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSection {
    pub blocks: Vec<Block>,
    /// Stored weight of the multiplier curve.
    pub weight: f64,
}

impl Default for TemperatureSection {
    fn default() -> Self {
        Self {
            blocks: vec![Block::Relu, Block::Multiplier, Block::Dac],
            weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvarianceSection {
    /// Curve files to compare, relative to the working directory.
    pub inputs: Vec<PathBuf>,
}

/// Parsed experiment config. Fields left out of the file are filled with
/// per-experiment defaults by [`ExperimentConfig::resolve`], and the
/// resolved config is what gets hashed and echoed into the summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimes: Option<Vec<Regime>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spline_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_points: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Not part of the hash: moving the output does not change the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub dac: DacSection,
    #[serde(default)]
    pub multiplier: MultiplierSection,
    #[serde(default)]
    pub relu: ReluSection,
    #[serde(default)]
    pub regression: RegressionSection,
    #[serde(default)]
    pub temperature: TemperatureSection,
    #[serde(default)]
    pub invariance: InvarianceSection,
}

/// Line of the first `key = ...` assignment or `[key]` header in `text`.
fn key_line(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            let rest = l.strip_prefix(key).map(str::trim_start);
            matches!(rest, Some(r) if r.starts_with('='))
                || l.trim_end() == format!("[{key}]")
        })
        .map_or(1, |i| i + 1)
}

fn config_error(text: &str, key: &str, message: impl Into<String>) -> SacError {
    SacError::Config {
        line: key_line(text, key),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SacError::Config {
            line: e.span().map_or(1, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().trim().to_string(),
        })?;
        cfg.check_fields().map_err(|(key, msg)| config_error(text, key, msg))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Checks that do not depend on the experiment; keyed for error lines.
    fn check_fields(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.regimes.as_ref().is_some_and(|r| r.is_empty()) {
            return Err(("regimes", "regimes must not be empty".into()));
        }
        if let Some(s) = &self.spline_counts {
            if s.is_empty() || s.iter().any(|&k| !(1..=4).contains(&k)) {
                return Err(("spline_counts", "spline_counts must be a non-empty list within 1..=4".into()));
            }
        }
        if let Some(t) = &self.temperature_points {
            if t.is_empty() || t.iter().any(|&t| !(200.0..=450.0).contains(&t)) {
                return Err((
                    "temperature_points",
                    "temperature_points must be a non-empty list within 200-450 K".into(),
                ));
            }
        }
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(("seeds", "seeds must not be empty".into()));
        }
        if let Some(s) = &self.sweep {
            if !(s.x_min.is_finite() && s.x_max.is_finite() && s.x_max > s.x_min) {
                return Err(("x_min", "sweep needs finite x_min < x_max".into()));
            }
            if s.points < 2 {
                return Err(("points", "sweep needs at least 2 points".into()));
            }
        }
        if !(1..=16).contains(&self.dac.bits) {
            return Err(("bits", "dac bits must be within 1..=16".into()));
        }
        if self.dac.max_codes < 2 {
            return Err(("max_codes", "max_codes must be at least 2".into()));
        }
        if self.multiplier.weights.is_empty() || self.multiplier.weights.iter().any(|w| !(w.abs() <= 0.5)) {
            return Err(("weights", "multiplier weights must be a non-empty list within [-0.5, 0.5]".into()));
        }
        if !(self.relu.c > 0.0 && self.relu.c.is_finite()) {
            return Err(("c", "relu c must be positive".into()));
        }
        if self.regression.samples < 10 {
            return Err(("samples", "regression needs at least 10 samples".into()));
        }
        if self.regression.weight_bits > 16 {
            return Err(("weight_bits", "weight_bits must be within 0..=16".into()));
        }
        if self.temperature.blocks.is_empty() {
            return Err(("blocks", "temperature blocks must not be empty".into()));
        }
        if !(self.temperature.weight.abs() <= 0.5) {
            return Err(("weight", "temperature weight must be within [-0.5, 0.5]".into()));
        }
        Ok(())
    }

    /// Fills every unset field with the defaults of `kind`. A config that
    /// names a different experiment is rejected.
    pub fn resolve(mut self, kind: ExperimentKind) -> Result<Self> {
        if let Some(k) = self.experiment {
            if k != kind {
                return Err(invalid(format!("config is for '{k}', not '{kind}'")));
            }
        }
        self.experiment = Some(kind);
        let regimes = match kind {
            ExperimentKind::Regression => vec![Regime::Si, Regime::Mi, Regime::Wi],
            _ => Regime::DEVICE.to_vec(),
        };
        self.regimes.get_or_insert(regimes);
        let splines = match kind {
            ExperimentKind::Regression => vec![1, 3],
            ExperimentKind::Dac => vec![4],
            _ => vec![3],
        };
        self.spline_counts.get_or_insert(splines);
        let temps = match kind {
            ExperimentKind::Temperature => vec![250.0, 300.0, 350.0, 400.0],
            _ => vec![DEFAULT_TEMPERATURE],
        };
        self.temperature_points.get_or_insert(temps);
        self.seeds.get_or_insert(vec![0]);
        self.sweep.get_or_insert(kind.default_sweep());
        if kind == ExperimentKind::InvarianceReport && self.invariance.inputs.len() < 2 {
            return Err(invalid("invariance-report needs at least two [invariance] inputs"));
        }
        self.check_fields().map_err(|(_, m)| invalid(m))?;
        Ok(self)
    }

    pub fn kind(&self) -> Result<ExperimentKind> {
        self.experiment.ok_or_else(|| invalid("config does not name an experiment"))
    }

    fn list<T: Clone>(v: &Option<Vec<T>>) -> Result<Vec<T>> {
        v.clone().ok_or_else(|| invalid("config is not resolved"))
    }

    /// Hex SHA-256 of the resolved config without its output directory.
    pub fn hash(&self) -> Result<String> {
        let text = self.canonical_toml()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    pub fn canonical_toml(&self) -> Result<String> {
        let cfg = Self {
            out_dir: None,
            ..self.clone()
        };
        toml::to_string(&cfg).map_err(|e| invalid(format!("config does not serialize: {e}")))
    }
}

/// One two-column curve plus the labels that place it in the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecord {
    pub experiment: String,
    pub regime: String,
    pub splines: usize,
    pub temperature: f64,
    /// Extra qualifier such as a weight or a seed; may be empty.
    pub tag: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl CurveRecord {
    pub fn new(experiment: &str, regime: &str, splines: usize, temperature: f64, tag: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            regime: regime.to_string(),
            splines,
            temperature,
            tag: tag.to_string(),
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() {
            return Err(invalid("curve columns differ in length"));
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(invalid("curve holds non-finite values"));
        }
        if self.x.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("curve rows are not sorted by x"));
        }
        Ok(())
    }

    pub fn file_name(&self) -> String {
        let mut s = format!(
            "{}_{}_s{}_t{}",
            self.experiment, self.regime, self.splines, self.temperature
        );
        if !self.tag.is_empty() {
            s.push('_');
            s.push_str(&self.tag);
        }
        s.push_str(".csv");
        s
    }

    /// Short identifier used in summaries.
    pub fn label(&self) -> String {
        self.file_name().trim_end_matches(".csv").to_string()
    }

    /// Rounds both columns to the precision of the CSV files.
    pub fn rounded(mut self) -> Self {
        for v in self.x.iter_mut().chain(self.y.iter_mut()) {
            *v = round_sig(*v);
        }
        self
    }
}

pub fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

/// Value as it reads back from a CSV file.
pub fn round_sig(v: f64) -> f64 {
    format_value(v).parse().unwrap_or(v)
}

pub fn curve_csv(record: &CurveRecord, config_hash: &str) -> Result<String> {
    record.validate()?;
    let mut s = format!(
        "# config_hash={config_hash}\n# sacforge={VERSION} experiment={} regime={} splines={} temperature={} tag={}\nx,y\n",
        record.experiment, record.regime, record.splines, record.temperature, record.tag
    );
    for (x, y) in record.x.iter().zip(&record.y) {
        let _ = writeln!(s, "{},{}", format_value(*x), format_value(*y));
    }
    Ok(s)
}

pub fn emit_curve_csv(record: &CurveRecord, config_hash: &str, path: &Path) -> Result<()> {
    fs::write(path, curve_csv(record, config_hash)?)?;
    Ok(())
}

/// Reads a file written by [`emit_curve_csv`].
pub fn read_curve_csv(path: &Path) -> Result<CurveRecord> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, m: &str| invalid(format!("{}:{line}: {m}", path.display()));
    let mut rec = CurveRecord::new("", "", 0, 0.0, "");
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                let Some((k, v)) = kv.split_once('=') else { continue };
                match k {
                    "experiment" => rec.experiment = v.to_string(),
                    "regime" => rec.regime = v.to_string(),
                    "splines" => rec.splines = v.parse().map_err(|_| bad(i + 1, "bad splines"))?,
                    "temperature" => rec.temperature = v.parse().map_err(|_| bad(i + 1, "bad temperature"))?,
                    "tag" => rec.tag = v.to_string(),
                    _ => {}
                }
            }
        } else if !header {
            if line.trim() != "x,y" {
                return Err(bad(i + 1, "missing x,y header"));
            }
            header = true;
        } else {
            let (a, b) = line.split_once(',').ok_or_else(|| bad(i + 1, "expected two columns"))?;
            rec.x.push(a.trim().parse().map_err(|_| bad(i + 1, "bad x value"))?);
            rec.y.push(b.trim().parse().map_err(|_| bad(i + 1, "bad y value"))?);
        }
    }
    if !header {
        return Err(bad(1, "missing x,y header"));
    }
    rec.validate()?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDeviation {
    pub a: String,
    pub b: String,
    pub max_abs: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceSummary {
    pub pairs: Vec<PairDeviation>,
    pub max_abs: f64,
    pub mean_abs: f64,
}

const RESAMPLE_POINTS: usize = 201;

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v < x);
    if k == 0 {
        return ys[0];
    }
    if k >= xs.len() {
        return ys[xs.len() - 1];
    }
    let (x0, x1) = (xs[k - 1], xs[k]);
    if x1 == x0 {
        return ys[k];
    }
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|a| (a - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Pairwise deviation between curves after mapping each one affinely onto
/// the unit square. Curves on different grids are resampled linearly onto
/// a uniform grid; their raw x ranges must overlap.
pub fn invariance_report(curves: &[CurveRecord]) -> Result<InvarianceSummary> {
    if curves.len() < 2 {
        return Err(invalid("invariance report needs at least two curves"));
    }
    for c in curves {
        c.validate()?;
        if c.len() < 2 || c.x[c.len() - 1] <= c.x[0] {
            return Err(SacError::NoOverlap(format!("{} spans no x range", c.label())));
        }
    }
    let lo = curves.iter().map(|c| c.x[0]).fold(f64::NEG_INFINITY, f64::max);
    let hi = curves.iter().map(|c| c.x[c.len() - 1]).fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return Err(SacError::NoOverlap(format!("common x range [{lo}, {hi}] is empty")));
    }
    let same_grid = curves.iter().all(|c| c.x == curves[0].x);
    let normalized: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| {
            if same_grid {
                unit(&c.y)
            } else {
                let u = unit(&c.x);
                let y = unit(&c.y);
                (0..RESAMPLE_POINTS)
                    .map(|k| interp(&u, &y, k as f64 / (RESAMPLE_POINTS - 1) as f64))
                    .collect()
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..curves.len() {
        for j in i + 1..curves.len() {
            let d: Vec<f64> = normalized[i].iter().zip(&normalized[j]).map(|(a, b)| (a - b).abs()).collect();
            pairs.push(PairDeviation {
                a: curves[i].label(),
                b: curves[j].label(),
                max_abs: d.iter().copied().fold(0.0, f64::max),
                mean_abs: d.iter().sum::<f64>() / d.len() as f64,
            });
        }
    }
    Ok(InvarianceSummary {
        max_abs: pairs.iter().map(|p| p.max_abs).fold(0.0, f64::max),
        mean_abs: pairs.iter().map(|p| p.mean_abs).sum::<f64>() / pairs.len() as f64,
        pairs,
    })
}

/// One pass/fail line of the invariant suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            pass: value <= limit,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            pass: value >= limit,
        }
    }

    fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            pass: value < limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub summary: Value,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Counts solver points; failed points are left out of the curves.
#[derive(Debug, Default)]
struct Tally {
    failed: usize,
    total: usize,
}

impl Tally {
    fn point(&mut self, r: Result<f64>) -> Result<Option<f64>> {
        self.total += 1;
        match r {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            Ok(_)
            | Err(SacError::NoConvergence { .. })
            | Err(SacError::BracketNotFound { .. })
            | Err(SacError::RangeViolation { .. }) => {
                self.failed += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn curve(&mut self, rec: &mut CurveRecord, xs: &[f64], mut f: impl FnMut(f64) -> Result<f64>) -> Result<()> {
        for &x in xs {
            if let Some(y) = self.point(f(x))? {
                rec.x.push(x);
                rec.y.push(y);
            }
        }
        Ok(())
    }
}

struct Writer {
    dir: PathBuf,
    hash: String,
    files: Vec<PathBuf>,
}

impl Writer {
    /// Rounds, writes and returns the curve as it reads back.
    fn emit(&mut self, rec: CurveRecord) -> Result<CurveRecord> {
        let rec = rec.rounded();
        let path = self.dir.join(rec.file_name());
        emit_curve_csv(&rec, &self.hash, &path)?;
        self.files.push(path);
        Ok(rec)
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| if n == 1 { a } else { a + (b - a) * k as f64 / (n - 1) as f64 })
        .collect()
}

fn model(regime: Regime, t: f64) -> Result<TransistorModel> {
    make_model(regime, t)
}

fn proto_shape(s: usize, m: TransistorModel) -> Result<ProtoShape> {
    ProtoShape::new(&SplineDesign::canonical(s)?.node(1.0, 0.0, m))
}

fn relu(s: usize, c: f64, m: TransistorModel) -> Result<SoftRelu> {
    SoftRelu::new(c, &SplineDesign::canonical(s)?.node(1.0, 0.0, m))
}

/// Rectifier-limit DAC fit, computed once per bit and spline count.
fn dac_template(bits: usize, splines: usize) -> Result<DacConfig> {
    let rect = make_model(Regime::Rect, DEFAULT_TEMPERATURE)?;
    let node = SplineDesign::canonical(1)?.node(1.0, 0.0, rect);
    Ok(dac_fit_offsets_with(bits, splines, &node, DacFitOptions::default())?.config)
}

fn dac_codes(bits: usize, max_codes: usize) -> Vec<u64> {
    let full = (1u64 << bits) - 1;
    if full < max_codes as u64 {
        return (0..=full).collect();
    }
    let mut v: Vec<u64> = (0..max_codes)
        .map(|k| (k as f64 * full as f64 / (max_codes - 1) as f64).round() as u64)
        .collect();
    v.dedup();
    v
}

fn dac_curve(tally: &mut Tally, rec: &mut CurveRecord, dac: &Dac, codes: &[u64]) -> Result<()> {
    for &code in codes {
        if let Some(y) = tally.point(dac.normalized(code))? {
            rec.x.push(code as f64);
            rec.y.push(y);
        }
    }
    Ok(())
}

/// Largest deviation of a normalized DAC curve from the ideal log curve,
/// with codes read from the x column.
pub fn dac_curve_deviation(rec: &CurveRecord, bits: usize) -> f64 {
    rec.x
        .iter()
        .zip(&rec.y)
        .map(|(&x, &y)| (y - ideal_log_curve(x as u64, bits)).abs())
        .fold(0.0, f64::max)
}

/// Steps of a curve that fall by more than the solver tolerance. Codes
/// whose low bits are swamped by a high one give flat plateaus, which are
/// allowed.
pub fn decreasing_steps(rec: &CurveRecord) -> usize {
    rec.y.windows(2).filter(|p| p[1] < p[0] - 1e-8).count()
}

/// Calibrated multiplier error from curves `y(x)` at the given weights:
/// the mean absolute deviation from `2 k x w` with `k` fitted by least
/// squares, as a fraction of the largest ideal product.
pub fn multiplier_curve_error(curves: &[(f64, &CurveRecord)]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (w, c) in curves {
        for (x, y) in c.x.iter().zip(&c.y) {
            let ideal = 2.0 * x * w;
            num += y * ideal;
            den += ideal * ideal;
        }
    }
    if !(den > 0.0) {
        return f64::NAN;
    }
    let k = num / den;
    let (mut sum, mut n, mut peak) = (0.0, 0usize, 0.0f64);
    for (w, c) in curves {
        for (x, y) in c.x.iter().zip(&c.y) {
            let ideal = 2.0 * k * x * w;
            sum += (y - ideal).abs();
            peak = peak.max(ideal.abs());
            n += 1;
        }
    }
    sum / n as f64 / peak
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / a.len().max(1) as f64
}

fn json_error(e: serde_json::Error) -> SacError {
    invalid(format!("summary does not serialize: {e}"))
}

fn invariance_json(s: &InvarianceSummary) -> Value {
    json!({ "max_abs": s.max_abs, "mean_abs": s.mean_abs, "pairs": s.pairs })
}

/// Writes the curves of the resolved `config` plus `summary.json` into
/// `out` and returns the invariant checks. Point failures up to
/// [`MAX_FAILURE_RATE`] are tolerated and reported.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Report> {
    let kind = config.kind()?;
    let config = config.clone().resolve(kind)?;
    fs::create_dir_all(out)?;
    let hash = config.hash()?;
    let mut w = Writer {
        dir: out.to_path_buf(),
        hash: hash.clone(),
        files: Vec::new(),
    };
    let mut tally = Tally::default();
    let mut checks = Vec::new();
    let results = match kind {
        ExperimentKind::ProtoShape | ExperimentKind::Relu => shape_experiment(&config, &mut w, &mut tally, &mut checks)?,
        ExperimentKind::Multiplier => multiplier_experiment(&config, &mut w, &mut tally, &mut checks)?,
        ExperimentKind::Dac => dac_experiment(&config, &mut w, &mut tally, &mut checks)?,
        ExperimentKind::Temperature => temperature_experiment(&config, &mut w, &mut tally, &mut checks)?,
        ExperimentKind::Regression => regression_experiment(&config, &mut w, &mut checks)?,
        ExperimentKind::InvarianceReport => {
            let curves = config
                .invariance
                .inputs
                .iter()
                .map(|p| read_curve_csv(p))
                .collect::<Result<Vec<_>>>()?;
            let s = invariance_report(&curves)?;
            checks.push(Check::at_most("invariance max deviation", s.max_abs, INVARIANCE_LIMIT));
            json!({ "invariance": invariance_json(&s) })
        }
    };
    if tally.failed as f64 > MAX_FAILURE_RATE * tally.total as f64 {
        return Err(SacError::TooManyFailures {
            failed: tally.failed,
            total: tally.total,
        });
    }
    let echoed = ExperimentConfig {
        out_dir: None,
        ..config.clone()
    };
    let resolved = serde_json::to_value(&echoed).map_err(json_error)?;
    let summary = json!({
        "experiment": kind.name(),
        "config_hash": hash,
        "version": VERSION,
        "config": resolved,
        "points": { "total": tally.total, "failed": tally.failed },
        "results": results,
        "checks": checks,
    });
    let summary_path = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).map_err(json_error)?;
    text.push('\n');
    fs::write(&summary_path, text)?;
    Ok(Report {
        out_dir: out.to_path_buf(),
        files: w.files,
        summary_path,
        summary,
        checks,
    })
}

struct Grid {
    regimes: Vec<Regime>,
    splines: Vec<usize>,
    temps: Vec<f64>,
    xs: Vec<f64>,
}

impl Grid {
    fn of(config: &ExperimentConfig) -> Result<Self> {
        let sweep = config.sweep.ok_or_else(|| invalid("config is not resolved"))?;
        Ok(Self {
            regimes: ExperimentConfig::list(&config.regimes)?,
            splines: ExperimentConfig::list(&config.spline_counts)?,
            temps: ExperimentConfig::list(&config.temperature_points)?,
            xs: linspace(sweep.x_min, sweep.x_max, sweep.points),
        })
    }
}

fn add_invariance(
    table: &mut BTreeMap<String, Value>,
    checks: &mut Vec<Check>,
    key: String,
    curves: &[CurveRecord],
) -> Result<()> {
    if curves.len() < 2 {
        return Ok(());
    }
    let s = invariance_report(curves)?;
    checks.push(Check::at_most(format!("{key} max deviation"), s.max_abs, INVARIANCE_LIMIT));
    table.insert(key, invariance_json(&s));
    Ok(())
}

fn shape_experiment(config: &ExperimentConfig, w: &mut Writer, tally: &mut Tally, checks: &mut Vec<Check>) -> Result<Value> {
    let kind = config.kind()?;
    let g = Grid::of(config)?;
    let mut table = BTreeMap::new();
    let mut ramp = BTreeMap::new();
    for &s in &g.splines {
        for &t in &g.temps {
            let mut curves = Vec::new();
            for &r in &g.regimes {
                let m = model(r, t)?;
                let mut rec = CurveRecord::new(kind.name(), r.name(), s, t, "");
                if kind == ExperimentKind::Relu {
                    let f = relu(s, config.relu.c, m)?;
                    tally.curve(&mut rec, &g.xs, |x| f.eval(x))?;
                } else {
                    let f = proto_shape(s, m)?;
                    tally.curve(&mut rec, &g.xs, |x| f.eval(x))?;
                }
                let rec = w.emit(rec)?;
                if kind == ExperimentKind::Relu && r == Regime::Rect {
                    let d = rec.x.iter().zip(&rec.y).map(|(x, y)| (y - x.max(0.0)).abs()).fold(0.0, f64::max);
                    ramp.insert(rec.label(), d);
                }
                curves.push(rec);
            }
            add_invariance(&mut table, checks, format!("s{s} t{t} regimes"), &curves)?;
        }
    }
    let mut v = json!({ "invariance": table });
    if !ramp.is_empty() {
        v["ramp_deviation"] = json!(ramp);
    }
    Ok(v)
}

fn multiplier_experiment(config: &ExperimentConfig, w: &mut Writer, tally: &mut Tally, checks: &mut Vec<Check>) -> Result<Value> {
    let g = Grid::of(config)?;
    let weights = &config.multiplier.weights;
    let mut table = BTreeMap::new();
    let mut errors: BTreeMap<String, f64> = BTreeMap::new();
    let mut by_s: BTreeMap<usize, f64> = BTreeMap::new();
    for &s in &g.splines {
        for &t in &g.temps {
            let mut per_w: Vec<Vec<CurveRecord>> = vec![Vec::new(); weights.len()];
            for &r in &g.regimes {
                let m = Multiplier::new(&MultiplierConfig::design(s, model(r, t)?)?)?;
                let mut recs = Vec::new();
                for (k, &wv) in weights.iter().enumerate() {
                    let mut rec = CurveRecord::new("multiplier", r.name(), s, t, &format!("w{wv:+}"));
                    tally.curve(&mut rec, &g.xs, |x| m.eval(x, wv))?;
                    let rec = w.emit(rec)?;
                    per_w[k].push(rec.clone());
                    recs.push(rec);
                }
                let pairs: Vec<(f64, &CurveRecord)> = weights.iter().copied().zip(&recs).collect();
                let e = 100.0 * multiplier_curve_error(&pairs);
                errors.insert(format!("{}_s{s}_t{t}", r.name()), e);
                let worst = by_s.entry(s).or_insert(0.0);
                *worst = worst.max(e);
            }
            for (k, curves) in per_w.iter().enumerate() {
                // a zero weight gives a flat curve with nothing to compare
                if weights[k] != 0.0 {
                    add_invariance(&mut table, checks, format!("s{s} t{t} w{:+} regimes", weights[k]), curves)?;
                }
            }
        }
    }
    if let Some(&e3) = by_s.get(&3) {
        checks.push(Check::at_most("s3 calibrated error percent", e3, 5.0));
        if let Some(&e1) = by_s.get(&1) {
            checks.push(Check::below("s3 error over s1 error", e3 / e1, 1.0));
        }
    }
    Ok(json!({ "error_percent": errors, "invariance": table }))
}

fn dac_experiment(config: &ExperimentConfig, w: &mut Writer, tally: &mut Tally, checks: &mut Vec<Check>) -> Result<Value> {
    let g = Grid::of(config)?;
    let bits = config.dac.bits;
    let codes = dac_codes(bits, config.dac.max_codes);
    let mut table = BTreeMap::new();
    let mut deviation = BTreeMap::new();
    for &s in &g.splines {
        let template = dac_template(bits, s)?;
        for &t in &g.temps {
            let mut curves = Vec::new();
            for &r in &g.regimes {
                let dac = Dac::new(&template.with_model(model(r, t)?))?;
                let mut rec = CurveRecord::new("dac", r.name(), s, t, &format!("b{bits}"));
                dac_curve(tally, &mut rec, &dac, &codes)?;
                let rec = w.emit(rec)?;
                let d = dac_curve_deviation(&rec, bits);
                let drops = decreasing_steps(&rec);
                checks.push(Check::at_most(format!("{} decreasing steps", rec.label()), drops as f64, 0.0));
                if s == 4 {
                    checks.push(Check::at_most(format!("{} max deviation", rec.label()), d, 0.02));
                }
                deviation.insert(rec.label(), d);
                curves.push(rec);
            }
            add_invariance(&mut table, checks, format!("s{s} t{t} regimes"), &curves)?;
        }
    }
    Ok(json!({ "max_deviation": deviation, "invariance": table }))
}

fn temperature_experiment(config: &ExperimentConfig, w: &mut Writer, tally: &mut Tally, checks: &mut Vec<Check>) -> Result<Value> {
    let g = Grid::of(config)?;
    let bits = config.dac.bits;
    let codes = dac_codes(bits, config.dac.max_codes);
    let wv = config.temperature.weight;
    let mut table = BTreeMap::new();
    for &block in &config.temperature.blocks {
        for &s in &g.splines {
            let template = if block == Block::Dac { Some(dac_template(bits, s)?) } else { None };
            for &r in &g.regimes {
                let mut curves = Vec::new();
                for &t in &g.temps {
                    let m = model(r, t)?;
                    let mut rec = CurveRecord::new("temperature", r.name(), s, t, block.name());
                    match block {
                        Block::ProtoShape => {
                            let f = proto_shape(s, m)?;
                            tally.curve(&mut rec, &g.xs, |x| f.eval(x))?;
                        }
                        Block::Relu => {
                            let f = relu(s, config.relu.c, m)?;
                            tally.curve(&mut rec, &g.xs, |x| f.eval(x))?;
                        }
                        Block::Multiplier => {
                            let f = Multiplier::new(&MultiplierConfig::design(s, m)?)?;
                            rec.tag = format!("multiplier_w{wv:+}");
                            tally.curve(&mut rec, &g.xs, |x| f.eval(x, wv))?;
                        }
                        Block::Dac => {
                            let dac = Dac::new(&template.as_ref().expect("dac template").with_model(m))?;
                            rec.tag = format!("dac_b{bits}");
                            dac_curve(tally, &mut rec, &dac, &codes)?;
                        }
                    }
                    curves.push(w.emit(rec)?);
                }
                add_invariance(&mut table, checks, format!("{} {} s{s} temperatures", block.name(), r.name()), &curves)?;
            }
        }
    }
    Ok(json!({ "invariance": table }))
}

fn regression_experiment(config: &ExperimentConfig, w: &mut Writer, checks: &mut Vec<Check>) -> Result<Value> {
    let rc = &config.regression;
    let regimes = ExperimentConfig::list(&config.regimes)?;
    let splines = ExperimentConfig::list(&config.spline_counts)?;
    let seeds = ExperimentConfig::list(&config.seeds)?;
    let data = make_sine_dataset(rc.samples, rc.data_seed)?;
    let (_, ys) = data.test();
    let index: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
    let mut target = CurveRecord::new("regression", "target", 0, DEFAULT_TEMPERATURE, "test");
    target.x = index.clone();
    target.y = ys.to_vec();
    let target = w.emit(target)?;
    let mut table = BTreeMap::new();
    let mut selected_mse: BTreeMap<usize, f64> = BTreeMap::new();
    let mut published = BTreeMap::new();
    for &s in &splines {
        let spec = NetworkSpec {
            weight_bits: rc.weight_bits,
            train_regime: rc.train_regime,
            eval_regime: rc.train_regime,
            ..NetworkSpec::for_splines(s)
        };
        let mut runs = Vec::new();
        for &seed in &seeds {
            let recipe = FitRecipe {
                hyper: crate::network::TrainHyper { seed, ..rc.recipe.hyper },
                ..rc.recipe
            };
            let net = fit(&spec, &data, recipe)?;
            net.save(&w.dir.join(format!("regression_s{s}_seed{seed}.weights.json")))?;
            w.files.push(w.dir.join(format!("regression_s{s}_seed{seed}.weights.json")));
            let mut hist = CurveRecord::new("regression", rc.train_regime.name(), s, spec.temperature, &format!("seed{seed}_history"));
            hist.x = (1..=net.history.len()).map(|e| e as f64).collect();
            hist.y = net.history.clone();
            let hist = w.emit(hist)?;
            let train_loss = hist.y.iter().copied().fold(f64::INFINITY, f64::min);
            let mut test = BTreeMap::new();
            let mut preds = BTreeMap::new();
            for &r in &regimes {
                let e = evaluate(&net, &data, Some(r))?;
                let mut rec = CurveRecord::new("regression", r.name(), s, spec.temperature, &format!("seed{seed}_test"));
                rec.x = index.clone();
                rec.y = e.predictions;
                let rec = w.emit(rec)?;
                test.insert(r.name().to_string(), mse(&rec.y, &target.y));
                preds.insert(r, rec.y);
            }
            runs.push((seed, train_loss, test, preds));
        }
        let mut per_seed = BTreeMap::new();
        for (seed, loss, test, _) in &runs {
            per_seed.insert(format!("seed{seed}"), json!({ "train_mse": loss, "test_mse": test }));
        }
        let best = runs
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one seed");
        let mut entry = json!({ "seeds": per_seed, "selected_seed": best.0 });
        let train_name = rc.train_regime.name();
        if let Some(&m) = best.2.get(train_name) {
            selected_mse.insert(s, m);
            entry["selected_test_mse"] = json!(m);
            if let Some(&(_, reference)) = PUBLISHED_MSE.iter().find(|p| p.0 == s) {
                let factor = runs
                    .iter()
                    .filter_map(|r| r.2.get(train_name))
                    .map(|&m| (m / reference).max(reference / m))
                    .fold(f64::INFINITY, f64::min);
                published.insert(format!("s{s}"), json!({ "reference": reference, "closest_factor": factor }));
                checks.push(Check::at_most(format!("s{s} published mse bracket factor"), factor, 3.0));
            }
        }
        if let Some(si) = best.3.get(&rc.train_regime) {
            let mut transfer = BTreeMap::new();
            for (&r, p) in &best.3 {
                if r == rc.train_regime {
                    continue;
                }
                let ratio = best.2[r.name()] / best.2[train_name];
                let corr = pearson(p, si);
                checks.push(Check::at_most(format!("s{s} {} over {train_name} mse ratio", r.name()), ratio, 2.0));
                checks.push(Check::at_least(format!("s{s} {} prediction correlation", r.name()), corr, 0.98));
                transfer.insert(r.name().to_string(), json!({ "mse_ratio": ratio, "correlation": corr }));
            }
            entry["transfer"] = json!(transfer);
        }
        table.insert(format!("s{s}"), entry);
    }
    if let Some(&m1) = selected_mse.get(&1) {
        checks.push(Check::at_most("s1 test mse", m1, 0.02));
    }
    if let Some(&m3) = selected_mse.get(&3) {
        checks.push(Check::at_most("s3 test mse", m3, 0.002));
        if let Some(&m1) = selected_mse.get(&1) {
            checks.push(Check::below("s3 over s1 test mse", m3 / m1, 1.0));
        }
    }
    Ok(json!({ "splines": table, "published": published }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(x: &[f64], y: &[f64]) -> CurveRecord {
        let mut c = CurveRecord::new("t", "si", 1, 300.0, "");
        c.x = x.to_vec();
        c.y = y.to_vec();
        c
    }

    #[test]
    fn config_errors_carry_line_numbers() {
        let text = "experiment = \"relu\"\nregimes = [\"wi\"]\nbogus = 3\n";
        match ExperimentConfig::from_toml_str(text) {
            Err(SacError::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "experiment = \"relu\"\n\nregimes = []\n";
        match ExperimentConfig::from_toml_str(text) {
            Err(SacError::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "[sweep]\nx_min = 1.0\nx_max = 0.0\npoints = 5\n";
        match ExperimentConfig::from_toml_str(text) {
            Err(SacError::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn regimes_accept_both_rectifier_spellings() {
        let c = ExperimentConfig::from_toml_str("regimes = [\"rect\", \"rectifier\", \"si\"]").unwrap();
        assert_eq!(c.regimes.unwrap(), vec![Regime::Rect, Regime::Rect, Regime::Si]);
    }

    #[test]
    fn hash_covers_defaults_but_not_output() {
        let a = ExperimentConfig::from_toml_str("").unwrap().resolve(ExperimentKind::Relu).unwrap();
        let b = ExperimentConfig::from_toml_str("regimes = [\"wi\", \"mi\", \"si\"]\nout_dir = \"x\"")
            .unwrap()
            .resolve(ExperimentKind::Relu)
            .unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = ExperimentConfig::from_toml_str("[relu]\nc = 0.2").unwrap().resolve(ExperimentKind::Relu).unwrap();
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn resolved_config_round_trips() {
        let a = ExperimentConfig::default().resolve(ExperimentKind::Regression).unwrap();
        let back = ExperimentConfig::from_toml_str(&a.canonical_toml().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn mismatched_experiment_is_rejected() {
        let c = ExperimentConfig::from_toml_str("experiment = \"dac\"").unwrap();
        assert!(c.resolve(ExperimentKind::Relu).is_err());
    }

    #[test]
    fn csv_format() {
        let empty = curve(&[], &[]);
        let text = curve_csv(&empty, "abc").unwrap();
        assert!(text.starts_with("# config_hash=abc\n"));
        assert!(text.ends_with("x,y\n"));
        let two = curve(&[0.0, 1.0], &[1.0 / 3.0, -2.5e-7]);
        let text = curve_csv(&two, "abc").unwrap();
        let rows: Vec<&str> = text.lines().skip_while(|l| *l != "x,y").skip(1).collect();
        assert_eq!(rows, vec!["0.00000000e0,3.33333333e-1", "1.00000000e0,-2.50000000e-7"]);
    }

    #[test]
    fn unsorted_curve_is_invalid() {
        assert!(curve_csv(&curve(&[1.0, 0.0], &[0.0, 0.0]), "h").is_err());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = curve(&[-1.0, 0.5, 2.0], &[0.1, 0.2, 0.123456789012]);
        c.tag = "w+0.5".into();
        let path = dir.path().join(c.file_name());
        emit_curve_csv(&c, "h", &path).unwrap();
        assert_eq!(read_curve_csv(&path).unwrap(), c.rounded());
    }

    #[test]
    fn invariance_of_identical_and_affine_curves() {
        let x: Vec<f64> = linspace(-2.0, 2.0, 41);
        let y: Vec<f64> = x.iter().map(|v: &f64| v.tanh() + 0.1 * v * v).collect();
        let a = curve(&x, &y);
        let s = invariance_report(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(s.max_abs, 0.0);
        let b = curve(
            &x.iter().map(|v| 0.5 * v + 0.3).collect::<Vec<_>>(),
            &y.iter().map(|v| 3.0 * v - 7.0).collect::<Vec<_>>(),
        );
        let s = invariance_report(&[a.clone(), b]).unwrap();
        assert!(s.max_abs < 1e-12, "{}", s.max_abs);
        let c = curve(&x, &x.clone());
        assert!(invariance_report(&[a, c]).unwrap().max_abs > 0.1);
    }

    #[test]
    fn disjoint_curves_do_not_overlap() {
        let a = curve(&[0.0, 1.0], &[0.0, 1.0]);
        let b = curve(&[2.0, 3.0], &[0.0, 1.0]);
        assert!(matches!(invariance_report(&[a, b]), Err(SacError::NoOverlap(_))));
    }

    #[test]
    fn multiplier_error_of_an_exact_product_is_zero() {
        let x = linspace(-1.0, 1.0, 11);
        let ws = [-0.5, 0.25, 0.5];
        let recs: Vec<CurveRecord> = ws
            .iter()
            .map(|w| curve(&x, &x.iter().map(|v| 1.3 * v * w).collect::<Vec<_>>()))
            .collect();
        let pairs: Vec<(f64, &CurveRecord)> = ws.iter().copied().zip(&recs).collect();
        assert!(multiplier_curve_error(&pairs) < 1e-12);
    }

    #[test]
    fn ideal_dac_curve_has_no_deviation() {
        let x: Vec<f64> = (0..16).map(|c| c as f64).collect();
        let y: Vec<f64> = (0..16).map(|c| ideal_log_curve(c, 4)).collect();
        assert_eq!(dac_curve_deviation(&curve(&x, &y), 4), 0.0);
    }
}
