use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use edgestereo::data::{Dataset, GeneratorConfig};
use edgestereo::train::{run_phase, PhasePlan};
use edgestereo::{EdgeStereo, ModelConfig, Tensor};

fn forward(c: &mut Criterion) {
    let toy = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
    let data = Dataset::synthetic(&GeneratorConfig::toy(), 2, 0).unwrap();
    let b = data.batch(&[0, 1]).unwrap();
    c.bench_function("toy_predict_2x32x64", |bench| {
        bench.iter(|| black_box(toy.predict(&b.left, &b.right).unwrap()))
    });

    let full = EdgeStereo::<f32>::new(ModelConfig::full()).unwrap();
    let img = Tensor::from_fn(&[1, 3, 256, 512], |i| (i % 255) as f32 / 255.0);
    let mut group = c.benchmark_group("full");
    group.sample_size(10);
    group.bench_function("predict_256x512", |bench| {
        bench.iter(|| black_box(full.predict(&img, &img).unwrap()))
    });
    group.finish();
}

fn train_steps(c: &mut Criterion) {
    let data = Dataset::synthetic(&GeneratorConfig::toy(), 8, 0).unwrap();
    let plan = PhasePlan::three_phase([10, 10, 10], 2, 1e-3, true);
    let mut group = c.benchmark_group("toy_train_10_iterations");
    group.sample_size(10);
    for phase in &plan.phases {
        group.bench_function(format!("phase{}", phase.id), |bench| {
            bench.iter(|| {
                let mut model = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
                black_box(run_phase(&mut model, phase, &data, 0).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train_steps);
criterion_main!(benches);
