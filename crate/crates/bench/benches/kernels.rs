use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use tokenmix_core::arch::{build_mixer, Model, ModelConfig, Scale};
use tokenmix_core::nn::Init;
use tokenmix_core::ops;
use tokenmix_core::stm::StmKind;
use tokenmix_core::Tape;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let mut init = Init::new(0);
        let a = init.uniform(&[n, n], -1.0, 1.0);
        let b = init.uniform(&[n, n], -1.0, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| ops::matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn mixers(c: &mut Criterion) {
    let mut group = c.benchmark_group("mixer_56x56x64");
    let x = Init::new(1).uniform(&[1, 56, 56, 64], -1.0, 1.0);
    for stm in StmKind::ALL {
        let config = ModelConfig::preset(stm, Scale::Tiny);
        let mixer = build_mixer(&mut Init::new(2), &config, 0, 0).unwrap();
        group.bench_function(stm.to_string(), |bench| {
            bench.iter(|| {
                let mut tape = Tape::inference();
                let v = tape.constant(x.clone());
                mixer.forward(&mut tape, &v).unwrap().into_tensor()
            })
        });
    }
    group.finish();
}

fn micro_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("micro_forward_224");
    group.sample_size(10);
    let x = Init::new(3).uniform(&[1, 3, 224, 224], -1.0, 1.0);
    for stm in StmKind::ALL {
        let model = Model::build(&ModelConfig::preset(stm, Scale::Micro), 0).unwrap();
        group.bench_function(stm.to_string(), |bench| bench.iter(|| model.forward_classify(black_box(&x)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matmul, mixers, micro_forward);
criterion_main!(benches);
