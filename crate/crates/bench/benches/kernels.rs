use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use roadfuse::evalkit::stitch_probabilities;
use roadfuse::geodata::rasterize_pixels;
use roadfuse::synth::{synth_region, SynthConfig};
use roadfuse::trainer::{BatchSource, TileSetSource};
use roadfuse::*;
use roadfuse_bench::{pattern, tiles};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for (cin, cout, hw) in [(16usize, 16usize, 224usize), (64, 64, 56), (256, 256, 14)] {
        let x = pattern::<f32>(Shape::new(1, cin, hw, hw), 1);
        let w = pattern::<f32>(Shape::new(cout, cin, 3, 3), 2);
        let b = Tensor::zeros(Shape::new(1, cout, 1, 1));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{cin}->{cout}@{hw}")), &(), |bench, _| {
            bench.iter(|| {
                let mut g = Graph::inference();
                let (x, w, b) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
                g.conv3x3(x, w, b).unwrap()
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (name, widths) in [("reduced", Widths::REDUCED), ("quarter", Widths::QUARTER)] {
        let mut m = DualMapper::<f32>::new(ModelConfig { widths, init_seed: 0 });
        let img = pattern::<f32>(Shape::new(1, 3, 224, 224), 3).map(|v| v.abs());
        let traj = pattern::<f32>(Shape::new(1, 1, 224, 224), 4).map(|v| v.abs());
        group.bench_function(name, |bench| bench.iter(|| m.predict(&img, &traj).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let set = tiles(224, 4);
    let model = DualMapper::new(ModelConfig { widths: Widths::QUARTER, init_seed: 0 });
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, cfg, LossWeights::default()).unwrap();
    let mut source = TileSetSource { tiles: set, seed: 0 };
    let batch = source.batch(0, 4).unwrap();
    group.bench_function("quarter_b4_224", |bench| bench.iter(|| trainer.train_step(&batch, 1).unwrap()));
    group.finish();
}

fn geodata(c: &mut Criterion) {
    let points: Vec<(f64, f64)> = (0..100_000).map(|i| ((i * 37 % 896) as f64 + 0.3, (i * 91 % 896) as f64 + 0.6)).collect();
    c.bench_function("rasterize_100k", |bench| bench.iter(|| rasterize_pixels(&points, 896, 896)));

    let rasters = synth_region(&SynthConfig::default(), 128, 128, 1).unwrap().rasters;
    let mut m = DualMapper::<f32>::new(ModelConfig { widths: Widths::QUARTER, init_seed: 0 });
    let rect = Rect::new(0, 0, 128, 128);
    let mut group = c.benchmark_group("stitch");
    group.sample_size(10);
    group.bench_function("quarter_128_cell32", |bench| bench.iter(|| stitch_probabilities(&mut m, &rasters, &rect, 32, None).unwrap()));
    group.finish();
}

criterion_group!(benches, conv, forward, train_step, geodata);
criterion_main!(benches);
