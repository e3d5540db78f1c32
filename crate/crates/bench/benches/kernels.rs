use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drn_core::ctc::{ctc_loss_grad_raw, LabelSeq};
use drn_core::kernels::conv::{conv2d_backward, conv2d_forward, depthwise_forward};
use drn_core::kernels::{log_softmax_rows, BatchNormConfig, ConvGeometry, Mode};
use drn_core::nn::{Pass, Rrdb, RrdbSpec};
use drn_core::{ParamStore, Rng, Tensor};

fn random(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let mut group = c.benchmark_group("conv3x3");
    for channels in [12, 24, 48] {
        let x = random(vec![32, channels, 28, 28], &mut rng);
        let w = random(vec![12, channels, 3, 3], &mut rng);
        let b = random(vec![12], &mut rng);
        let g = ConvGeometry::same(3);
        let y = conv2d_forward(&x, &w, Some(&b), &g).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", channels), &channels, |bench, _| {
            bench.iter(|| conv2d_forward(&x, &w, Some(&b), &g).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward", channels), &channels, |bench, _| {
            bench.iter(|| conv2d_backward(&x, &w, &g, &y).unwrap())
        });
        let dw = random(vec![channels, 1, 3, 3], &mut rng);
        group.bench_with_input(BenchmarkId::new("depthwise", channels), &channels, |bench, _| {
            bench.iter(|| depthwise_forward(&x, &dw, &g).unwrap())
        });
    }
    group.finish();
}

fn rrdb(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::<f32>::new();
    let block = Rrdb::build(&mut store, "b", RrdbSpec::new(4, 12, 16), &mut rng).unwrap();
    let x = random(vec![32, 16, 28, 28], &mut rng);
    c.bench_function("rrdb_forward_backward_b32", |bench| {
        bench.iter(|| {
            let mut pass = Pass::new(&mut store, Mode::Train, BatchNormConfig::default());
            let input = pass.input(x.clone(), false);
            let y = block.forward(&mut pass, input).unwrap();
            let loss = pass.tape.sum_all(y).unwrap();
            pass.backward(loss).unwrap();
        })
    });
}

fn ctc(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let (frames, vocab) = (40, 11);
    let logits: Vec<f64> = (0..frames * vocab).map(|_| rng.normal()).collect();
    let lp = log_softmax_rows(&logits, vocab);
    let target = LabelSeq::new(vec![3, 1, 4, 1, 5], vocab).unwrap();
    c.bench_function("ctc_t40_v11_len5", |bench| {
        bench.iter(|| ctc_loss_grad_raw(&lp, frames, vocab, &target).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, rrdb, ctc
}
criterion_main!(benches);
