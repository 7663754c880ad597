use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use codesign::ca::{CaInit, CaParameterization};
use codesign::data::{synthetic_dataset, Dataset};
use codesign::decoder::{init_network, Activation};
use codesign::expand;
use codesign::par;
use codesign::regularizers::{RegularizerKind, RegularizerSpec, RhoSchedule};
use codesign::sensing::{SensingKind, SensingModel};
use codesign::trainer::{batch_gradients, gradient_check, infer, GradCheckInstance, Task, TrainConfig};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn mnist_like(batch: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let scenes = Array2::from_shape_simple_fn(
        (batch, 784),
        || if rng.random::<f64>() < 0.2 { rng.random() } else { 0.0 },
    );
    let labels = (0..batch).map(|_| rng.random_range(0..10)).collect();
    (scenes, labels)
}

fn spc_batch_gradients(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let param = CaParameterization::init_dense(196, 28, 28, 1, CaInit::ZeroOne, &mut rng).unwrap();
    let net = init_network(&[196, 128, 10], &[Activation::Relu, Activation::Softmax], &mut rng).unwrap();
    let (scenes, labels) = mnist_like(256, &mut rng);
    let config = TrainConfig {
        regularizers: vec![RegularizerSpec {
            kind: RegularizerKind::Binary01 { p1: 1.8, p2: 1.0 },
            rho: RhoSchedule::constant(1e-6),
        }],
        chunk_size: 32,
        measurement_scale: 1.0 / 28.0,
        ..Default::default()
    };
    let mut group = c.benchmark_group("spc_batch_gradients_256");
    for (name, seq) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| {
                batch_gradients(
                    &config,
                    &param,
                    &net,
                    SensingKind::Spc,
                    scenes.view(),
                    Some(&labels),
                    0,
                    None,
                )
                .unwrap()
            });
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn cassi_inference(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Dataset = synthetic_dataset(512, 16, 16, 8, 3, &mut rng).unwrap();
    let param = CaParameterization::init_kronecker(2, 16, 16, 4, 4, 1, CaInit::ZeroOne, &mut rng).unwrap();
    let ca = expand(&param).unwrap();
    let kind = SensingKind::Cassi { bands: 8 };
    let m = SensingModel::new(kind, &ca).unwrap().measurement_len();
    let net = init_network(
        &[m, 64, 16 * 16 * 8],
        &[Activation::Relu, Activation::Identity],
        &mut rng,
    )
    .unwrap();
    let mut group = c.benchmark_group("cassi_inference_512");
    for (name, seq) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| infer(&ca, kind, &net, data.scenes.view(), 0.1).unwrap());
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn finite_difference_check(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = synthetic_dataset(8, 4, 4, 1, 2, &mut rng).unwrap();
    let inst = GradCheckInstance {
        param: CaParameterization::init_dense(4, 4, 4, 1, CaInit::ZeroOne, &mut rng).unwrap(),
        net: init_network(&[4, 8, 16], &[Activation::Sigmoid, Activation::Identity], &mut rng).unwrap(),
        kind: SensingKind::Spc,
        data,
        epoch: 0,
    };
    let config = TrainConfig {
        task: Task::Reconstruction,
        regularizers: vec![RegularizerSpec {
            kind: RegularizerKind::Conditionality,
            rho: RhoSchedule::constant(0.01),
        }],
        ..Default::default()
    };
    let mut group = c.benchmark_group("gradient_check_tiny");
    group.sample_size(10);
    for (name, seq) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| gradient_check(&config, &inst, 1e-5).unwrap());
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, spc_batch_gradients, cassi_inference, finite_difference_check);
criterion_main!(benches);
