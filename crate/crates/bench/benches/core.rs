use candle_core::{Device, Tensor};
use cgpn::evaluation::{cmc_map, distance_matrix, EvalProtocol};
use cgpn::losses::{batch_hard_triplet, mse_supervision, softmax_loss, MseConfig, Reduction, TripletBatchSpec};
use cgpn::network::{BackboneConfig, CgpnModel, ModelConfig};
use cgpn::partition::{enumerate_windows, Fraction};
use cgpn::Variant;
use cgpn_bench::{metas, pk_labels, rng, uniform_array, uniform_tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn partition(c: &mut Criterion) {
    let mut g = c.benchmark_group("enumerate_windows");
    for n in [4, 12, 64] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| enumerate_windows(black_box(n), Fraction::HALF).unwrap())
        });
    }
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut r = rng(1);
    let q = uniform_array(&mut r, 100, 256);
    let gal = uniform_array(&mut r, 1000, 256);
    let qm = metas(&mut r, 100, 50);
    let gm = metas(&mut r, 1000, 50);
    let dist = distance_matrix(q.view(), gal.view(), false).unwrap();
    let protocol = EvalProtocol::default();
    c.bench_function("distance_matrix 100x1000x256", |b| {
        b.iter(|| distance_matrix(black_box(q.view()), black_box(gal.view()), false).unwrap())
    });
    c.bench_function("cmc_map 100x1000", |b| b.iter(|| cmc_map(black_box(&dist), &qm, &gm, &protocol).unwrap()));
}

fn losses(c: &mut Criterion) {
    let mut r = rng(2);
    let spec = TripletBatchSpec::default();
    let labels = pk_labels(spec.p, spec.k);
    let logits = uniform_tensor(&mut r, 64, 751);
    let feats = uniform_tensor(&mut r, 64, 2048);
    c.bench_function("softmax 64x751", |b| b.iter(|| softmax_loss(&logits, &labels, Reduction::Mean).unwrap()));
    c.bench_function("batch_hard_triplet 64x2048", |b| {
        b.iter(|| batch_hard_triplet(&feats, &labels, &spec, Reduction::Mean).unwrap())
    });
    let parts = |r: &mut _| -> Vec<Vec<Tensor>> {
        (0..3).map(|_| (0..2).map(|_| uniform_tensor(r, 64, 2048)).collect()).collect()
    };
    let globals = parts(&mut r);
    let targets = parts(&mut r);
    c.bench_function("mse_supervision 3x2x64x2048", |b| {
        b.iter(|| mse_supervision(&globals, &targets, &MseConfig::default(), Reduction::Mean).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let model = CgpnModel::new(ModelConfig::new(Variant::Cgpn, BackboneConfig::width_reduced(8), 4), 0).unwrap();
    let x = Tensor::zeros((2, 3, 384, 128), candle_core::DType::F32, &Device::Cpu).unwrap();
    let mut g = c.benchmark_group("forward width 8");
    g.sample_size(10);
    g.bench_function("embed batch 2", |b| b.iter(|| model.embed(&x).unwrap()));
    g.bench_function("train forward and backward batch 2", |b| {
        b.iter(|| {
            let out = model.forward(&x, true).unwrap();
            let total = out.logits.iter().fold(Tensor::new(0f32, &Device::Cpu).unwrap(), |acc, l| {
                (acc + l.sum_all().unwrap()).unwrap()
            });
            total.backward().unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, partition, retrieval, losses, forward);
criterion_main!(benches);
