use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use edgestereo::{ConvParams, Graph, Tensor};

fn ramp(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5)
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ch, hw) in [(16, 32), (32, 64), (64, 64)] {
        let x = ramp(&[2, ch, hw, hw]);
        let w = ramp(&[ch, ch, 3, 3]);
        group.bench_with_input(BenchmarkId::new("forward", format!("{ch}c_{hw}px")), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                black_box(g.conv2d(xv, wv, None, ConvParams::same(3, 1)).unwrap())
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", format!("{ch}c_{hw}px")), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (xv, wv) = (g.variable(x.clone()), g.variable(w.clone()));
                let y = g.conv2d(xv, wv, None, ConvParams::same(3, 1)).unwrap();
                let l = g.sum(y).unwrap();
                black_box(g.backward(l).unwrap())
            })
        });
    }
    group.finish();
}

fn correlation(c: &mut Criterion) {
    let mut group = c.benchmark_group("correlation1d");
    for max_disp in [8, 40] {
        let l = ramp(&[1, 32, 64, 128]);
        let r = ramp(&[1, 32, 64, 128]);
        group.bench_with_input(BenchmarkId::from_parameter(max_disp), &max_disp, |b, &d| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (lv, rv) = (g.constant(l.clone()), g.constant(r.clone()));
                black_box(g.correlation1d(lv, rv, d).unwrap())
            })
        });
    }
    group.finish();
}

fn warp(c: &mut Criterion) {
    let img = ramp(&[2, 3, 128, 256]);
    let d = Tensor::from_fn(&[2, 1, 128, 256], |i| (i % 37) as f32 * 0.7);
    c.bench_function("warp_right_to_left", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let (iv, dv) = (g.constant(img.clone()), g.constant(d.clone()));
            black_box(g.warp_right_to_left(iv, dv).unwrap())
        })
    });
}

criterion_group!(benches, conv, correlation, warp);
criterion_main!(benches);
