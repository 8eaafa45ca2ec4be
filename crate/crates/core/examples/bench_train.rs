// Stage-level throughput probe at experiment scale.
use fcgno_core::problems::{make_poisson_instance, GridDescriptor};
use fcgno_core::spectral::SnoParams;
use fcgno_core::training::adam::AdamState;
use fcgno_core::training::{generate_krylov_dataset, LossKind, Trainer};
use std::time::Instant;

fn main() {
    let grid = GridDescriptor::new(32).unwrap();
    let problems: Vec<_> = (0..2)
        .map(|j| make_poisson_instance::<f64>(&grid, j).unwrap())
        .collect();
    let samples = generate_krylov_dataset(&problems, 100, 1).unwrap();
    let params = SnoParams::<f64>::init(2, 32, 20, 4, 0);
    let trainer = Trainer::new(&problems, &samples, 20).unwrap();
    let batch: Vec<usize> = (0..32).collect();
    let mut ws = trainer.engine.workspace(&params, 32);
    let mut grads = params.zeros_like();

    // fwd+loss only
    trainer.loss(&params, &batch, LossKind::Notay).unwrap();
    let t = Instant::now();
    for _ in 0..10 {
        trainer.loss(&params, &batch, LossKind::Notay).unwrap();
    }
    println!("fwd+loss: {:.1?}", t.elapsed() / 10);

    // full grad
    trainer
        .loss_gradient(&params, &batch, LossKind::Notay, &mut ws, &mut grads)
        .unwrap();
    let t = Instant::now();
    for _ in 0..10 {
        trainer
            .loss_gradient(&params, &batch, LossKind::Notay, &mut ws, &mut grads)
            .unwrap();
    }
    println!("fwd+loss+bwd: {:.1?}", t.elapsed() / 10);

    // adam
    let mut adam = AdamState::new(&params);
    let mut p2 = params.clone();
    adam.step(&mut p2, &grads, 1e-3, 1e-2);
    let t = Instant::now();
    for _ in 0..10 {
        adam.step(&mut p2, &grads, 1e-3, 1e-2);
    }
    println!("adam step: {:.1?}", t.elapsed() / 10);

    // zeroing grads
    let t = Instant::now();
    for _ in 0..10 {
        for v in grads.tensors_mut() {
            for x in v.iter_mut() {
                *x = 0.0;
            }
        }
    }
    println!("grad zero: {:.1?}", t.elapsed() / 10);
}
