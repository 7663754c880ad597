use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use codesign::ca::transmittance_of;
use codesign::data::synthetic_dataset;
use codesign::decoder::init_network;
use codesign::par;
use codesign::trainer::batch_gradients;
use codesign::*;

fn reconstruction_net(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> DecoderNetwork {
    init_network(&[inputs, 8, outputs], &[Activation::Relu, Activation::Identity], rng).unwrap()
}

#[test]
fn transmittance_term_alone_reaches_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = synthetic_dataset(16, 16, 16, 1, 2, &mut rng).unwrap();
    let param = CaParameterization::init_dense(3, 16, 16, 1, CaInit::ZeroOne, &mut rng).unwrap();
    let net = reconstruction_net(3, 256, &mut rng);
    let config = TrainConfig {
        epochs: 200,
        batch_size: 16,
        task: Task::Reconstruction,
        task_weight: 0.0,
        optimizer: OptimizerKind::Sgd { lr: 1.0, momentum: 0.0 },
        regularizers: vec![RegularizerSpec {
            kind: RegularizerKind::Transmittance { target: 0.3 },
            rho: RhoSchedule::constant(100.0),
        }],
        ..Default::default()
    };
    let out = train_e2e(&config, &data, param, SensingKind::Spc, net).unwrap();
    let ca = expand(&out.param).unwrap();
    for s in 0..3 {
        let t = transmittance_of(&ca, s).unwrap();
        assert!((t - 0.3).abs() < 0.01, "shot {s} transmittance {t}");
    }
}

#[test]
fn strong_group_penalty_gates_a_shot() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = synthetic_dataset(64, 6, 6, 1, 2, &mut rng).unwrap();
    let param = CaParameterization::init_dense(16, 6, 6, 1, CaInit::ZeroOne, &mut rng).unwrap();
    let net = reconstruction_net(16, 36, &mut rng);
    let config = TrainConfig {
        epochs: 60,
        task: Task::Reconstruction,
        optimizer: OptimizerKind::Adam {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        gate: Some(GateSpec {
            threshold: 0.1,
            literal: false,
        }),
        regularizers: vec![RegularizerSpec {
            kind: RegularizerKind::SnapshotGroup,
            rho: RhoSchedule::constant(0.05),
        }],
        ..Default::default()
    };
    let out = train_e2e(&config, &data, param, SensingKind::Spc, net).unwrap();
    let ca = out.effective_aperture().unwrap();
    let zero = (0..16).filter(|&s| ca.shot_slice(s).iter().all(|&v| v == 0.0)).count();
    assert!(zero >= 1);
    assert_eq!(out.history.last().unwrap().active_shots, 16 - zero);
}

#[test]
fn thread_count_does_not_change_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let scenes = Array2::from_shape_simple_fn((50, 25), || rng.random::<f64>());
    let labels: Vec<usize> = (0..50).map(|i| i % 4).collect();
    let param = CaParameterization::init_kronecker(6, 5, 5, 1, 5, 1, CaInit::ZeroOne, &mut rng).unwrap();
    let net = init_network(&[6, 10, 4], &[Activation::Sigmoid, Activation::Softmax], &mut rng).unwrap();
    let config = TrainConfig {
        chunk_size: 7,
        regularizers: vec![RegularizerSpec {
            kind: RegularizerKind::Binary01 { p1: 1.5, p2: 1.0 },
            rho: RhoSchedule::constant(0.1),
        }],
        ..Default::default()
    };
    let run = || {
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
    };
    let parallel = run();
    par::set_sequential(true);
    let sequential = run();
    par::set_sequential(false);
    assert_eq!(parallel.objective.to_bits(), sequential.objective.to_bits());
    assert_eq!(parallel.trainable_grad, sequential.trainable_grad);
    assert_eq!(parallel.net_grad.layers, sequential.net_grad.layers);
}

#[test]
fn frozen_aperture_stays_put() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let data = synthetic_dataset(20, 4, 4, 1, 2, &mut rng).unwrap();
    let param = CaParameterization::init_dense(4, 4, 4, 1, CaInit::ZeroOne, &mut rng).unwrap();
    let net = reconstruction_net(4, 16, &mut rng);
    let config = TrainConfig {
        epochs: 3,
        task: Task::Reconstruction,
        ca_lr_multiplier: 0.0,
        regularizers: vec![RegularizerSpec {
            kind: RegularizerKind::Binary01 { p1: 1.0, p2: 1.0 },
            rho: RhoSchedule::constant(1.0),
        }],
        ..Default::default()
    };
    let out = train_e2e(&config, &data, param.clone(), SensingKind::Spc, net.clone()).unwrap();
    assert_eq!(out.param, param);
    assert_ne!(out.net, net);
}
