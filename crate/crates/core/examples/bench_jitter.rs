use fcgno_core::problems::{make_poisson_instance, GridDescriptor};
use fcgno_core::spectral::SnoParams;
use fcgno_core::training::{generate_krylov_dataset, LossKind, Trainer};
use std::time::Instant;

fn main() {
    let grid = GridDescriptor::new(32).unwrap();
    let problems: Vec<_> = (0..2).map(|j| make_poisson_instance::<f64>(&grid, j).unwrap()).collect();
    let samples = generate_krylov_dataset(&problems, 100, 1).unwrap();
    let params = SnoParams::<f64>::init(2, 32, 20, 4, 0);
    let trainer = Trainer::new(&problems, &samples, 20).unwrap();
    let batch: Vec<usize> = (0..32).collect();
    let mut ws = trainer.engine.workspace(&params, 32);
    let mut grads = params.zeros_like();
    let mut times = Vec::new();
    for _ in 0..50 {
        let t = Instant::now();
        trainer.loss_gradient(&params, &batch, LossKind::Notay, &mut ws, &mut grads).unwrap();
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("min {:.0}ms p25 {:.0} median {:.0} p75 {:.0} max {:.0}",
        times[0], times[12], times[25], times[37], times[49]);
}
