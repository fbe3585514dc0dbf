//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported, not hidden; the process exits nonzero
//! only when `SACFORGE_STRICT` is set or a criterion cannot be evaluated.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacforge::device::channel_current;
use sacforge::experiment::PUBLISHED_MSE;
use sacforge::gmp::Scratch;
use sacforge::network::{evaluate_on, finite_difference_grad, max_abs, max_abs_diff};
use sacforge::*;

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = fn(&mut Shared) -> Result<Outcome>;

/// Fits reused by several criteria.
#[derive(Default)]
struct Shared {
    fits: BTreeMap<usize, Vec<Fitted>>,
    data: Option<Dataset>,
}

struct Fitted {
    seed: u64,
    net: TrainedNetwork,
    train_mse: f64,
    test_mse: f64,
    test_mse_16: f64,
}

fn recipe(seed: u64) -> FitRecipe {
    let base = FitRecipe::default();
    FitRecipe {
        hyper: TrainHyper { seed, ..base.hyper },
        ..base
    }
}

impl Shared {
    fn data(&mut self) -> Result<Dataset> {
        if self.data.is_none() {
            self.data = Some(make_sine_dataset(1024, 0)?);
        }
        Ok(self.data.clone().expect("dataset"))
    }

    /// Five seeds at 8 bits, each also rounded to 16 bits from the same
    /// continuous solution.
    fn fits(&mut self, splines: usize) -> Result<&[Fitted]> {
        if !self.fits.contains_key(&splines) {
            let data = self.data()?;
            let spec = NetworkSpec::for_splines(splines);
            let spec16 = NetworkSpec { weight_bits: 16, ..spec.clone() };
            let mut out = Vec::new();
            for seed in 0..SEEDS {
                let r = recipe(seed);
                let settled = fit_continuous(&spec, &data, r)?;
                let net = finish(&settled, &spec, &data, r)?;
                let net16 = finish(&settled, &spec16, &data, r)?;
                let m = net.metrics.expect("trained network has metrics");
                out.push(Fitted {
                    seed,
                    train_mse: m.train_mse,
                    test_mse: m.test_mse,
                    test_mse_16: net16.metrics.expect("metrics").test_mse,
                    net,
                });
            }
            self.fits.insert(splines, out);
        }
        Ok(&self.fits[&splines])
    }

    /// Seed with the lowest training loss.
    fn selected(&mut self, splines: usize) -> Result<&Fitted> {
        let fits = self.fits(splines)?;
        Ok(fits
            .iter()
            .min_by(|a, b| a.train_mse.total_cmp(&b.train_mse))
            .expect("at least one seed"))
    }
}

fn regression_trend(sh: &mut Shared) -> Result<Outcome> {
    let mut detail = Vec::new();
    let mut pass = true;
    let mut selected = BTreeMap::new();
    for (s, limit) in [(1usize, 0.02), (3, 0.002)] {
        let reference = PUBLISHED_MSE.iter().find(|p| p.0 == s).expect("published value").1;
        let fits = sh.fits(s)?;
        let tests: Vec<String> = fits.iter().map(|f| format!("{:.5}", f.test_mse)).collect();
        let bracketed = fits
            .iter()
            .any(|f| f.test_mse <= 3.0 * reference && f.test_mse >= reference / 3.0);
        let best = sh.selected(s)?;
        selected.insert(s, best.test_mse);
        pass &= best.test_mse <= limit && bracketed;
        detail.push(format!(
            "S={s} seeds [{}] selected seed {} mse {:.5} (limit {limit}), {reference} bracketed x3: {bracketed}",
            tests.join(" "),
            best.seed,
            best.test_mse
        ));
    }
    let ordered = selected[&3] < selected[&1];
    pass &= ordered;
    detail.push(format!("S3 < S1: {ordered}"));
    Ok(outcome(pass, detail.join("; ")))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    ab / (aa * bb).sqrt()
}

fn bias_scalable(sh: &mut Shared) -> Result<Outcome> {
    let data = sh.data()?;
    let (xs, ys) = data.test();
    let mut pass = true;
    let mut detail = Vec::new();
    for s in [1usize, 3] {
        let net = sh.selected(s)?.net.clone();
        let si = evaluate_on(&net, xs, ys, Regime::Si)?;
        for r in [Regime::Mi, Regime::Wi] {
            let e = evaluate_on(&net, xs, ys, r)?;
            let ratio = e.mse / si.mse;
            let corr = pearson(&e.predictions, &si.predictions);
            pass &= e.mse.is_finite() && ratio <= 2.0 && corr >= 0.98;
            detail.push(format!("S={s} {r}: mse ratio {ratio:.4}, r {corr:.6}"));
        }
    }
    Ok(outcome(pass, detail.join("; ")))
}

fn multiplier_accuracy(_: &mut Shared) -> Result<Outcome> {
    // 41 interior points of (-1, 1) and 5 weights spanning [-0.5, 0.5]
    let xs: Vec<f64> = (1..=41).map(|k| -1.0 + 2.0 * k as f64 / 42.0).collect();
    let ws = [-0.5, -0.25, 0.0, 0.25, 0.5];
    let mut pass = true;
    let mut detail = Vec::new();
    for r in Regime::DEVICE {
        let m = make_model(r, DEFAULT_TEMPERATURE)?;
        let e3 = calibrated_error(&MultiplierConfig::design(3, m)?, &xs, &ws)?;
        let e1 = calibrated_error(&MultiplierConfig::design(1, m)?, &xs, &ws)?;
        pass &= e3 <= 0.05 && e1 > e3;
        detail.push(format!("{r}: S3 {:.2}% S1 {:.2}%", 100.0 * e3, 100.0 * e1));
    }
    Ok(outcome(pass, detail.join("; ")))
}

fn dac_fidelity(_: &mut Shared) -> Result<Outcome> {
    let rect = make_model(Regime::Rect, DEFAULT_TEMPERATURE)?;
    let node = SplineDesign::canonical(1)?.node(1.0, 0.0, rect);
    let mut pass = true;
    let mut detail = Vec::new();
    let mut drops = 0usize;
    for s in 1..=4 {
        let fit = dac_fit_offsets_with(8, s, &node, DacFitOptions::default())?;
        for r in Regime::ALL {
            let dac = Dac::new(&fit.config.with_model(make_model(r, DEFAULT_TEMPERATURE)?))?;
            let sweep = dac.sweep()?;
            drops += sweep.windows(2).filter(|w| w[1] < w[0] - 1e-9).count();
            if s == 4 {
                // independent oracle: log2(1 + code) / bits
                let dev = sweep
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (v - (1.0 + c as f64).log2() / 8.0).abs())
                    .fold(0.0, f64::max);
                pass &= dev <= 0.02;
                detail.push(format!("S4 {r} max dev {:.2}%", 100.0 * dev));
            }
        }
    }
    pass &= drops == 0;
    detail.push(format!("decreasing steps over all laws and S: {drops}"));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for theta in [2.0, 4.0, std::f64::consts::E, 10.0] {
        for _ in 0..1000 {
            let v: f64 = rng.random_range(-2.0..2.0);
            worst = worst.max((dac_rebase(v, theta)? - v * theta.ln() / 2f64.ln()).abs());
        }
    }
    pass &= worst <= 1e-12;
    detail.push(format!("rebase error {worst:.1e}"));
    Ok(outcome(pass, detail.join("; ")))
}

fn run_quiet(toml: &str, kind: ExperimentKind, out: &Path) -> Result<Report> {
    let cfg = ExperimentConfig::from_toml_str(toml)?.resolve(kind)?;
    run_experiment(&cfg, out)
}

fn regime_invariance(_: &mut Shared) -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut pass = true;
    let mut detail = Vec::new();
    let runs = [
        (ExperimentKind::ProtoShape, "regimes = [\"wi\", \"si\"]\nspline_counts = [1, 2, 3, 4]"),
        (ExperimentKind::Relu, "regimes = [\"wi\", \"si\"]\nspline_counts = [1, 2, 3, 4]"),
        (ExperimentKind::Multiplier, "regimes = [\"wi\", \"si\"]\nspline_counts = [1, 3]"),
        (ExperimentKind::Dac, "regimes = [\"wi\", \"si\"]\nspline_counts = [4]"),
        (ExperimentKind::Temperature, "spline_counts = [3]"),
    ];
    for (kind, toml) in runs {
        let report = run_quiet(toml, kind, &dir.path().join(kind.name()))?;
        let inv: Vec<&Check> = report.checks.iter().filter(|c| c.name.ends_with("max deviation")).collect();
        let worst = inv.iter().map(|c| c.value).fold(0.0, f64::max);
        pass &= !inv.is_empty() && inv.iter().all(|c| c.pass);
        detail.push(format!("{kind} {:.2e} over {} comparisons", worst, inv.len()));
    }
    Ok(outcome(pass, detail.join("; ")))
}

fn solver_correctness(_: &mut Shared) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_res: f64 = 0.0;
    let mut worst_cf: f64 = 0.0;
    for k in 0..10_000 {
        let r = Regime::ALL[k % 4];
        let t = rng.random_range(200.0..450.0);
        let n = rng.random_range(1..5usize);
        let s = rng.random_range(1..4usize);
        let c = rng.random_range(0.05..3.0);
        let offsets: Vec<Vec<f64>> = (0..n).map(|_| (0..s).map(|_| rng.random_range(-1.5..0.5)).collect()).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cfg = SacNodeConfig::new(offsets.clone(), c, make_model(r, t)?);
        let sol = solve_node(&cfg, &x)?;
        let total: f64 = sol.branch_current.iter().flatten().chain(&sol.reference_current).sum();
        worst_res = worst_res.max((total - c).abs() / c);
        if r == Regime::Rect {
            let flat: Vec<f64> = x.iter().zip(&offsets).flat_map(|(xi, row)| row.iter().map(move |o| xi + o)).collect();
            let cf = solve_rectifier_closed_form(&flat, c)?;
            worst_cf = worst_cf.max((sol.h - cf).abs() / cf.abs().max(1e-300).max(c * 1e-3));
        }
    }
    let mut slope_lo = f64::INFINITY;
    let mut slope_hi = f64::NEG_INFINITY;
    let mut asym: f64 = 0.0;
    let (mut buf, mut sc) = (Vec::new(), Scratch::default());
    for r in Regime::ALL {
        for s in 1..=4 {
            let p = ProtoShape::new(&SplineDesign::canonical(s)?.node(1.0, 0.0, make_model(r, DEFAULT_TEMPERATURE)?))?;
            for k in 0..=400 {
                let (_, d) = p.eval_into(-8.0 + 0.04 * k as f64, &mut buf, &mut sc)?;
                slope_lo = slope_lo.min(d);
                slope_hi = slope_hi.max(d);
            }
            let (_, left) = p.eval_into(-40.0, &mut buf, &mut sc)?;
            let (_, right) = p.eval_into(40.0, &mut buf, &mut sc)?;
            asym = asym.max(left.abs()).max((right - 1.0).abs());
        }
    }
    let pass = worst_res <= 1e-9 && worst_cf <= 1e-6 && slope_lo >= -1e-6 && slope_hi <= 1.0 + 1e-6 && asym <= 1e-3;
    Ok(outcome(
        pass,
        format!(
            "residual/C {worst_res:.1e}, closed form rel {worst_cf:.1e}, slopes [{slope_lo:.2e}, {:.2e}], asymptote error {asym:.1e}",
            slope_hi
        ),
    ))
}

fn gradients(_: &mut Shared) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_j: f64 = 0.0;
    for k in 0..300 {
        let r = Regime::DEVICE[k % 3];
        let n = rng.random_range(1..4usize);
        let offsets: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(-1.0..0.3)).collect()).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = SacNodeConfig::new(offsets, rng.random_range(0.3..2.0), make_model(r, 300.0)?);
        let sol = solve_node(&cfg, &x)?;
        let j = jacobian(&cfg, &sol)?;
        let mut fd = Vec::new();
        for i in 0..n {
            let mut p = x.clone();
            p[i] += 1e-6;
            let up = solve_node(&cfg, &p)?.h;
            p[i] -= 2e-6;
            let dn = solve_node(&cfg, &p)?.h;
            fd.push((up - dn) / 2e-6);
        }
        let scale = j.sensitivities.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (a, b) in fd.iter().zip(&j.sensitivities) {
            worst_j = worst_j.max((a - b).abs() / scale);
        }
    }
    let data = make_sine_dataset(24, 5)?;
    let (xs, ys) = data.train();
    let mut worst_n: f64 = 0.0;
    for k in 0..30u64 {
        let spec = NetworkSpec {
            layer_sizes: vec![2, 2 + (k % 3) as usize, 1],
            splines: 1 + (k % 4) as usize,
            weight_bits: 0,
            train_regime: Regime::Mi,
            eval_regime: Regime::Mi,
            ..NetworkSpec::default()
        };
        let net = TrainedNetwork::init(&spec, 100 + k)?;
        let mut e = Engine::new(&net, Regime::Mi)?.without_quantization();
        let (_, g) = e.loss_and_grad(&net.weights, xs, ys)?;
        let fd = finite_difference_grad(&mut e, &net.weights, xs, ys, 1e-5)?;
        worst_n = worst_n.max(max_abs_diff(&fd, &g) / max_abs(&g));
    }
    Ok(outcome(
        worst_j <= 1e-5 && worst_n <= 1e-4,
        format!("node Jacobian rel {worst_j:.1e} (300 nodes), network rel {worst_n:.1e} (30 nets)"),
    ))
}

fn symmetries(_: &mut Shared) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mult_bad = 0;
    for r in Regime::ALL {
        for s in [1usize, 3] {
            let m = Multiplier::new(&MultiplierConfig::design(s, make_model(r, 300.0)?)?)?;
            for _ in 0..200 {
                let x = rng.random_range(-1.0..1.0);
                let w = rng.random_range(-0.5..0.5);
                let y = m.eval(x, w)?;
                if m.eval(-x, w)? != -y || m.eval(x, -w)? != -y {
                    mult_bad += 1;
                }
            }
        }
    }
    let mut chan_bad = 0;
    for r in Regime::ALL {
        let m = make_model(r, rng.random_range(200.0..450.0))?;
        for _ in 0..500 {
            let (g, a, b) = (rng.random_range(-0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            if channel_current(&m, g, a, b)? != -channel_current(&m, g, b, a)? {
                chan_bad += 1;
            }
        }
    }
    let mut relu_dev = Vec::new();
    for r in Regime::ALL {
        let mut worst: f64 = 0.0;
        for s in 1..=4 {
            let node = SplineDesign::canonical(s)?.node(1.0, 0.0, make_model(r, 300.0)?);
            let f = SoftRelu::new(1e-6, &node)?;
            for k in 0..=40 {
                let x = -1.0 + 0.05 * k as f64;
                worst = worst.max((f.eval(x)? - x.max(0.0)).abs());
            }
        }
        relu_dev.push((r, worst));
    }
    let relu_ok = relu_dev.iter().all(|(_, d)| *d <= 1e-5);
    let per_law: Vec<String> = relu_dev.iter().map(|(r, d)| format!("{r} {d:.1e}")).collect();
    Ok(outcome(
        mult_bad == 0 && chan_bad == 0 && relu_ok,
        format!(
            "multiplier violations {mult_bad}, channel violations {chan_bad}, soft-ReLU c=1e-6 deviation on [-1, 1]: {}",
            per_law.join(" ")
        ),
    ))
}

fn tree_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?);
    }
    Ok(out)
}

fn reproducibility(_: &mut Shared) -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let runs = [
        (ExperimentKind::Relu, ""),
        (ExperimentKind::Multiplier, "spline_counts = [1, 3]"),
        (ExperimentKind::Dac, ""),
        (
            ExperimentKind::Regression,
            "seeds = [3]\nspline_counts = [2]\n[regression]\nsamples = 200\n[regression.recipe]\nstarts = 2\nstart_epochs = 3\nstart_lr = 0.02\nfinish_epochs = 3\nfinish_lr = 0.002\nmismatch_sigma = 0.02\nmismatch_seed = 1\n[regression.recipe.hyper]\nlr = 0.01\nepochs = 5\nbatch_size = 32\nseed = 0\n",
        ),
    ];
    let mut files = 0;
    let mut differing = Vec::new();
    for (kind, toml) in runs {
        let a = dir.path().join(format!("{}-a", kind.name()));
        let b = dir.path().join(format!("{}-b", kind.name()));
        run_quiet(toml, kind, &a)?;
        run_quiet(toml, kind, &b)?;
        let (ta, tb) = (tree_bytes(&a)?, tree_bytes(&b)?);
        files += ta.len();
        if ta != tb {
            differing.push(kind.name());
        }
    }
    Ok(outcome(
        differing.is_empty(),
        format!("{files} files compared (CSVs, summaries, weight files), differing experiments {differing:?}"),
    ))
}

/// Network-level properties outside the numbered criteria.
fn network_extras(sh: &mut Shared) -> Result<Vec<(String, Outcome)>> {
    let data = sh.data()?;
    let mut out = Vec::new();
    let fits = sh.fits(3)?;
    let mean8 = fits.iter().map(|f| f.test_mse).sum::<f64>() / fits.len() as f64;
    let mean16 = fits.iter().map(|f| f.test_mse_16).sum::<f64>() / fits.len() as f64;
    out.push((
        "16-bit weights no worse than 8-bit + 10%".into(),
        outcome(mean16 <= 1.1 * mean8, format!("mean test mse 16-bit {mean16:.5}, 8-bit {mean8:.5}")),
    ));
    let (txs, tys) = data.train();
    let mut slack = f64::NEG_INFINITY;
    for f in fits {
        let e = evaluate_on(&f.net, txs, tys, f.net.spec.eval_regime)?;
        slack = slack.max(e.mse - f.net.history.last().copied().unwrap_or(f64::INFINITY));
    }
    out.push((
        "train-split mse within final history loss".into(),
        outcome(slack <= 1e-9, format!("largest excess {slack:.2e}")),
    ));
    let spec = NetworkSpec::for_splines(3);
    let mut mm = Vec::new();
    for seed in 0..SEEDS {
        let r = FitRecipe {
            mismatch_sigma: 0.02,
            mismatch_seed: seed,
            ..recipe(seed)
        };
        mm.push(fit(&spec, &data, r)?.metrics.expect("metrics").test_mse);
    }
    let mean_mm = mm.iter().sum::<f64>() / mm.len() as f64;
    out.push((
        "sigma=0.02 mismatch retrained mse within 2x".into(),
        outcome(mean_mm <= 2.0 * mean8, format!("mean test mse {mean_mm:.5} vs {mean8:.5}")),
    ));
    let reference = train_reference(&data, 6, 4, 0)?;
    let (xs, ys) = data.test();
    let rm = reference.mse(xs, ys);
    out.push(("ideal-arithmetic 6-unit reference below 1e-3".into(), outcome(rm < 1e-3, format!("test mse {rm:.2e}"))));
    Ok(out)
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("regression S-trend", regression_trend),
        ("bias-scalable inference", bias_scalable),
        ("multiplier accuracy", multiplier_accuracy),
        ("DAC fidelity", dac_fidelity),
        ("regime and temperature invariance", regime_invariance),
        ("solver correctness", solver_correctness),
        ("gradient correctness", gradients),
        ("symmetry suite", symmetries),
        ("reproducibility", reproducibility),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut errored = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        match f(&mut shared) {
            Ok(o) => {
                failed += usize::from(!o.pass);
                println!(
                    "{} criterion {}: {name} ({:.1} s): {}",
                    if o.pass { "PASS" } else { "FAIL" },
                    i + 1,
                    t.elapsed().as_secs_f64(),
                    o.detail
                );
            }
            Err(e) => {
                errored += 1;
                println!("FAIL criterion {}: {name}: error: {e}", i + 1);
            }
        }
    }
    match network_extras(&mut shared) {
        Ok(v) => {
            for (name, o) in v {
                failed += usize::from(!o.pass);
                println!("{} network: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            }
        }
        Err(e) => {
            errored += 1;
            println!("FAIL network: error: {e}");
        }
    }
    println!("acceptance: {failed} failing, {errored} errored");
    let strict = std::env::var_os("SACFORGE_STRICT").is_some_and(|v| !v.is_empty() && v != "0");
    if errored > 0 || (strict && failed > 0) {
        std::process::exit(1);
    }
}
