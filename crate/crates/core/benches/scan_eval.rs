use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use manta_core::config::RunConfig;
use manta_core::ssm::SsmParams;
use manta_core::train::{evaluate, init_params};
use manta_core::{Exec, Tensor};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn scans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ssm = SsmParams::init(16, 16, false, &mut rng);
    let batch: Vec<Tensor> = (0..64).map(|_| Tensor::uniform(&[256, 16], 1.0, &mut rng)).collect();
    let mut group = c.benchmark_group("scan_64x256x16");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map_items(&batch, |x| ssm.scan(x).unwrap().y))
        });
    }
    group.finish();
}

fn eval(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let params = init_params(&cfg).unwrap();
    let mut group = c.benchmark_group("eval_16_episodes");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&params, &cfg, 16, exec).unwrap().mean)
        });
    }
    group.finish();
}

criterion_group!(benches, scans, eval);
criterion_main!(benches);
