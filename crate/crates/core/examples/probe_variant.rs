// Init-variant trainer: same data and schedule as the published recipe but
// with adjustable initialization scales, to map the optimization landscape
// quickly. Args: epochs mix_scale_mult bypass_mult [label]
use fcgno_core::bench::{run_bench, ExperimentConfig};
use fcgno_core::problems::{make_poisson_instance, mix_seed, GridDescriptor, ProblemKind};
use fcgno_core::spectral::SnoParams;
use fcgno_core::training::adam::AdamState;
use fcgno_core::training::{generate_krylov_dataset, LossKind, Trainer, TrainConfig};
use rand::{Rng, SeedableRng};
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let mix_mult: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let bypass_mult: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    println!("variant: epochs {epochs}, mix x{mix_mult}, bypass x{bypass_mult}");

    let grid = GridDescriptor::new(32).unwrap();
    let problems: Vec<_> = (0..32)
        .map(|j| make_poisson_instance::<f64>(&grid, mix_seed(7, 0x100 + j)).unwrap())
        .collect();
    let samples = generate_krylov_dataset(&problems, 100, 7).unwrap();
    let config = TrainConfig {
        epochs,
        seed: 7,
        ..TrainConfig::recipe(ProblemKind::Poisson, 32)
    };

    let mut params = SnoParams::<f64>::init(2, config.width, config.modes, config.layers, mix_seed(7, 0x13));
    for layer in params.layers.iter_mut() {
        for v in layer.mix_re.iter_mut().chain(layer.mix_im.iter_mut()) {
            *v *= mix_mult;
        }
        for v in layer.bypass.weight.iter_mut() {
            *v *= bypass_mult;
        }
    }

    let trainer = Trainer::new(&problems, &samples, config.modes).unwrap();
    let mut adam = AdamState::new(&params);
    let mut grads = params.zeros_like();
    let mut ws = trainer.engine.workspace(&params, config.batch_size);
    let n = trainer.sample_count();
    let mut order: Vec<usize> = (0..n).collect();
    let t0 = Instant::now();
    for epoch in 0..epochs {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(7, 0x14 + epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr = config.lr_at_epoch(epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < config.batch_size {
                continue;
            }
            for t in grads.tensors_mut() {
                for v in t.iter_mut() {
                    *v = 0.0;
                }
            }
            let loss = trainer
                .loss_gradient(&params, chunk, LossKind::Notay, &mut ws, &mut grads)
                .unwrap();
            adam.step(&mut params, &grads, lr, config.weight_decay);
            total += loss;
            batches += 1;
        }
        if epoch % 10 == 0 || epoch + 1 == epochs {
            println!("  epoch {epoch:3}  loss {:.4}  lr {lr:.2e}  ({:.0?})", total / batches as f64, t0.elapsed());
        }
    }

    let mut bench_config = ExperimentConfig::new(ProblemKind::Poisson, 32, 32);
    bench_config.seed = 7;
    let report = run_bench(&bench_config, Some(Arc::new(params)), None).unwrap();
    for m in &report.methods {
        if m.method == "no_fcg" || m.method == "gs4" {
            let meds: Vec<String> = m
                .stats
                .iter()
                .map(|s| s.median.map(|v| format!("{v:.0}")).unwrap_or("nc".into()))
                .collect();
            println!("  {:8} medians: {}", m.method, meds.join(" / "));
        }
    }
}
