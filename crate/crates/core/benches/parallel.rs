//! Parallel against sequential execution of the hot paths.
//!
//! With the default `parallel` feature each benchmark runs on rayon's global
//! pool (`all-threads`) and inside a one-thread pool (`one-thread`). Built
//! with `--no-default-features` the same benchmarks run the plain loops
//! (`sequential`).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use opsearch_core::data::{load_dataset, Split};
use opsearch_core::network::{preset, Model, Route, SearchMode, Trainable};
use opsearch_core::operators::{apply_operator, ConvGeometry, LayerKind, OperatorKind};
use opsearch_core::tensor::{Graph, Tensor};
use opsearch_core::train::evaluate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Runs `f` under every execution mode this build supports.
fn modes(c: &mut Criterion, group: &str, param: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    #[cfg(feature = "parallel")]
    {
        g.bench_function(BenchmarkId::new("all-threads", param), |b| b.iter(&mut f));
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::new("one-thread", param), |b| b.iter(|| one.install(&mut f)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::new("sequential", param), |b| b.iter(&mut f));
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, &[256, 256]), random(&mut rng, &[256, 256]));
    modes(c, "matmul", "256", || {
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        std::hint::black_box(g.matmul(x, y).unwrap());
    });
}

fn conv_layer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[64, 8, 8, 8]);
    let w = random(&mut rng, &[16, 72]);
    let geom = ConvGeometry { kernel: 3, stride: 1, padding: 1 };
    for kind in [OperatorKind::Typical, OperatorKind::MultiplicationFree] {
        modes(c, "conv_forward_backward", kind.token(), || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(w.clone());
            let y = apply_operator(&mut g, kind, LayerKind::Conv2d, xv, wv, None, Some(geom), &Default::default()).unwrap();
            let s = g.sum(y);
            std::hint::black_box(g.backward(s).unwrap());
        });
    }
}

fn mixture_step(c: &mut Criterion) {
    let ds = load_dataset("synthetic:digits", 3).unwrap();
    let net = preset("mini-squeeze", ds.shape, ds.classes).unwrap().resolve().unwrap();
    let model = Model::new(net, SearchMode::Hybrid, Default::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let idx: Vec<usize> = ds.split(Split::Train)[..32].to_vec();
    let (x, labels) = ds.batch(&idx);
    modes(c, "mixture_train_step", "mini-squeeze/32", || {
        let mut g = Graph::new();
        let p = model.bind(&mut g, Trainable::BOTH);
        let xv = g.constant(x.clone());
        let logits = model.forward(&mut g, &p, xv, Route::Mixture, false).unwrap();
        let loss = g.cross_entropy(logits, &labels).unwrap();
        std::hint::black_box(g.backward(loss).unwrap());
    });
}

fn evaluation(c: &mut Criterion) {
    let ds = load_dataset("synthetic:digits", 4).unwrap();
    let net = preset("mini-squeeze", ds.shape, ds.classes).unwrap().resolve().unwrap();
    let model = Model::new(net, SearchMode::Digital, Default::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let assignment = model.argmax();
    modes(c, "evaluate", "digits/train", || {
        std::hint::black_box(evaluate(&model, &ds, Split::Train, Route::Assigned(&assignment), false).unwrap());
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, conv_layer, mixture_step, evaluation
}
criterion_main!(benches);
