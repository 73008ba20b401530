use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use amel_bench::random;
use amel_core::autodiff::Tape;
use amel_core::model::dea;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for &(b, ch, hw) in &[(8, 8, 32), (24, 8, 16), (24, 32, 16)] {
        let x = random(&[b, ch, hw, hw], 1);
        let k = random(&[ch, ch, 3, 3], 2);
        let bias = random(&[ch], 3);
        let id = format!("b{}_c{}_{}x{}", b, ch, hw, hw);
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv, bv) = (tape.leaf(x.clone(), false), tape.leaf(k.clone(), false), tape.leaf(bias.clone(), false));
                tape.conv2d(xv, kv, bv, 1, 1).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv, bv) = (tape.leaf(x.clone(), true), tape.leaf(k.clone(), true), tape.leaf(bias.clone(), true));
                let y = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
                let s = tape.sum(y);
                tape.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn aggregation(c: &mut Criterion) {
    let mut group = c.benchmark_group("dea");
    for &(b, k) in &[(8, 3), (32, 3), (32, 8)] {
        let common = random(&[b, 8, 8, 8], 4);
        let feats: Vec<_> = (0..k).map(|i| random(&[b, 8, 8, 8], 10 + i as u64)).collect();
        group.bench_function(BenchmarkId::from_parameter(format!("b{}_k{}", b, k)), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let fc = tape.leaf(common.clone(), true);
                let fv: Vec<_> = feats.iter().map(|f| tape.leaf(f.clone(), true)).collect();
                let agg = dea(&mut tape, fc, &fv).unwrap();
                let s = tape.sum(agg.features);
                tape.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, aggregation);
criterion_main!(benches);
