// Short-schedule training probe: does a partially trained operator already
// beat the classical baselines on fresh instances?
use fcgno_core::krylov::{fcg, iterations_to_threshold, random_initial_guess, FcgConfig};
use fcgno_core::precond::SymmetricGaussSeidelPreconditioner;
use fcgno_core::problems::{make_poisson_instance, mix_seed, GridDescriptor};
use fcgno_core::spectral::SnoPreconditioner;
use fcgno_core::training::{generate_krylov_dataset, train, TrainConfig};
use fcgno_core::training::notay_loss;
use fcgno_core::problems::ProblemKind;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let grid = GridDescriptor::new(32).unwrap();
    let t0 = Instant::now();
    let problems: Vec<_> = (0..32)
        .map(|j| make_poisson_instance::<f64>(&grid, mix_seed(7, 0x100 + j)).unwrap())
        .collect();
    let samples = generate_krylov_dataset(&problems, 100, 7).unwrap();
    println!("dataset: {} samples in {:.1?}", samples.len(), t0.elapsed());

    let mut config = TrainConfig::recipe(ProblemKind::Poisson, 32);
    config.epochs = epochs;
    config.seed = 7;
    let t1 = Instant::now();
    let (params, curve) = train(&problems, &samples, &config).unwrap();
    println!("trained {} epochs in {:.1?}", epochs, t1.elapsed());
    for c in curve.iter().step_by(5.max(epochs / 10)) {
        println!("  epoch {:3}  loss {:.4}  lr {:.2e}", c.epoch, c.mean_loss, c.lr);
    }
    println!("  final loss {:.4}", curve.last().unwrap().mean_loss);
    let train_loss = notay_loss(&params, &problems[..2], &samples[..200]).unwrap();
    println!("  eval loss on first problems: {train_loss:.4}");

    // Bench on 20 fresh instances.
    let params = Arc::new(params);
    let mut no_iters = Vec::new();
    let mut gs4_iters = Vec::new();
    let mut eps_ok = 0;
    for t in 0..20u64 {
        let p = make_poisson_instance::<f64>(&grid, mix_seed(7, 0x9000 + t)).unwrap();
        let u_exact = fcgno_core::sparse::reference_solve(&p.matrix, p.rhs()).unwrap();
        let u0 = random_initial_guess::<f64>(p.grid.unknowns(), mix_seed(7, 0xA000 + t));
        let no = SnoPreconditioner::new(params.clone(), &p).unwrap();
        let cfg = FcgConfig { m_max: 20, tol: 1e-13, max_iter: 64, u_exact: Some(&u_exact) };
        let (_, rec) = fcg(&p.matrix, p.rhs(), &no, &u0, &cfg).unwrap();
        let it = iterations_to_threshold(&rec, 1e-6);
        let eps = rec.epsilon.as_ref().unwrap();
        let crossing = it.unwrap_or(eps.len() - 1);
        if eps[..crossing].iter().all(|&e| e < 1.0) {
            eps_ok += 1;
        }
        no_iters.push(it);

        let gs4 = SymmetricGaussSeidelPreconditioner::new(&p.matrix, 4).unwrap();
        let cfg2 = FcgConfig::new(20, 1e-13, 320);
        let (_, rec2) = fcg(&p.matrix, p.rhs(), &gs4, &u0, &cfg2).unwrap();
        gs4_iters.push(iterations_to_threshold(&rec2, 1e-6));
    }
    println!("NO+FCG iters@1e-6: {:?}", no_iters);
    println!("GS(4)  iters@1e-6: {:?}", gs4_iters);
    println!("epsilon<1 instances: {eps_ok}/20");
}
