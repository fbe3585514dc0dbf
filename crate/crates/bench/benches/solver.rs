use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sacforge::gmp::Scratch;
use sacforge::*;

fn node_solve(c: &mut Criterion) {
    for r in Regime::ALL {
        let cfg = SacNodeConfig::new(
            vec![vec![0.0, -0.5, -1.1]; 4],
            1.0,
            make_model(r, DEFAULT_TEMPERATURE).unwrap(),
        );
        let x = [0.3, -0.2, 0.7, 0.1];
        c.bench_function(&format!("solve_node 4x3 {r}"), |b| b.iter(|| solve_node(&cfg, black_box(&x)).unwrap()));
    }
}

fn proto_shape_eval(c: &mut Criterion) {
    for r in [Regime::Wi, Regime::Si] {
        let p = ProtoShape::new(&SplineDesign::canonical(3).unwrap().node(1.0, 0.0, make_model(r, 300.0).unwrap())).unwrap();
        let (mut buf, mut sc) = (Vec::new(), Scratch::default());
        c.bench_function(&format!("proto-shape value+slope {r}"), |b| {
            b.iter(|| p.eval_into(black_box(0.37), &mut buf, &mut sc).unwrap())
        });
    }
}

fn multiplier_eval(c: &mut Criterion) {
    let m = Multiplier::new(&MultiplierConfig::design(3, make_model(Regime::Mi, 300.0).unwrap()).unwrap()).unwrap();
    c.bench_function("multiplier S3 mi", |b| b.iter(|| m.eval(black_box(0.4), black_box(-0.2)).unwrap()));
}

fn dac_sweep(c: &mut Criterion) {
    let rect = make_model(Regime::Rect, 300.0).unwrap();
    let node = SplineDesign::canonical(1).unwrap().node(1.0, 0.0, rect);
    let fit = dac_fit_offsets(8, 4, &node).unwrap();
    let dac = Dac::new(&fit.config.with_model(make_model(Regime::Wi, 300.0).unwrap())).unwrap();
    c.bench_function("dac 8-bit sweep wi", |b| b.iter(|| dac.sweep().unwrap()));
}

fn network_forward(c: &mut Criterion) {
    let net = TrainedNetwork::init(&NetworkSpec::for_splines(3), 0).unwrap();
    let data = make_sine_dataset(64, 0).unwrap();
    let (xs, ys) = data.train();
    let mut e = Engine::new(&net, Regime::Si).unwrap();
    c.bench_function("network forward 2-6-1 x51", |b| b.iter(|| e.predict_all(black_box(xs)).unwrap()));
    let mut e = Engine::new(&net, Regime::Si).unwrap();
    c.bench_function("network loss+grad 2-6-1 x51", |b| {
        b.iter(|| e.loss_and_grad(&net.weights, black_box(xs), ys).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = node_solve, proto_shape_eval, multiplier_eval, dac_sweep, network_forward
}
criterion_main!(benches);
