// Full-recipe training run with end-of-run diagnostics and a saved
// checkpoint, used to calibrate the acceptance thresholds.
use fcgno_core::bench::{run_bench, ExperimentConfig};
use fcgno_core::io;
use fcgno_core::krylov::{fcg, iterations_to_threshold, random_initial_guess, FcgConfig};
use fcgno_core::problems::{make_poisson_instance, mix_seed, GridDescriptor, ProblemKind};
use fcgno_core::spectral::SnoPreconditioner;
use fcgno_core::training::{generate_krylov_dataset, train, LossKind, Trainer, TrainConfig};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let loss: LossKind = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(LossKind::Notay);
    let out = args.get(3).cloned().unwrap_or_else(|| "/tmp/ckpt_probe".into());

    let grid = GridDescriptor::new(32).unwrap();
    let problems: Vec<_> = (0..32)
        .map(|j| make_poisson_instance::<f64>(&grid, mix_seed(7, 0x100 + j)).unwrap())
        .collect();
    let samples = generate_krylov_dataset(&problems, 100, 7).unwrap();

    let mut config = TrainConfig::recipe(ProblemKind::Poisson, 32);
    config.epochs = epochs;
    config.seed = 7;
    config.loss = loss;
    let t = Instant::now();
    let (params, curve) = train(&problems, &samples, &config).unwrap();
    println!("trained {} epochs ({loss}) in {:.1?}", epochs, t.elapsed());
    for c in curve.iter().step_by(10) {
        println!("  epoch {:3}  loss {:.4}  lr {:.2e}", c.epoch, c.mean_loss, c.lr);
    }
    println!("  final loss {:.4}", curve.last().unwrap().mean_loss);

    // Per-bucket training-set eval.
    let trainer = Trainer::new(&problems, &samples, config.modes).unwrap();
    for (lo, hi) in [(1usize, 5usize), (6, 20), (21, 50), (51, 75), (76, 100)] {
        let batch: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.source_iteration >= lo && s.source_iteration <= hi)
            .map(|(i, _)| i)
            .collect();
        let l = trainer.loss(&params, &batch, LossKind::Notay).unwrap();
        println!("  bucket {lo:3}-{hi:3}: eval loss {l:.4}");
    }

    io::save_checkpoint(
        Path::new(&out),
        &params,
        &io::CheckpointMeta {
            width: params.width,
            modes: params.modes,
            layers: params.layers.len(),
            in_channels: params.in_ch,
            grid: 32,
            dataset_kind: ProblemKind::Poisson,
            train_config: config.clone(),
        },
    )
    .unwrap();
    println!("checkpoint saved to {out}");

    // Epsilon series on two fresh instances.
    let arc = Arc::new(params);
    for t in 0..2u64 {
        let p = make_poisson_instance::<f64>(&grid, mix_seed(7, 0x9000 + t)).unwrap();
        let u_exact = fcgno_core::sparse::reference_solve(&p.matrix, p.rhs()).unwrap();
        let u0 = random_initial_guess::<f64>(p.grid.unknowns(), mix_seed(7, 0xA000 + t));
        let no = SnoPreconditioner::new(arc.clone(), &p).unwrap();
        let cfg = FcgConfig { m_max: 20, tol: 1e-13, max_iter: 64, u_exact: Some(&u_exact) };
        let (_, rec) = fcg(&p.matrix, p.rhs(), &no, &u0, &cfg).unwrap();
        let eps: Vec<String> = rec.epsilon.as_ref().unwrap().iter().take(24).map(|e| format!("{e:.2}")).collect();
        println!("instance {t}: iters@1e-6 {:?}; eps: {}", iterations_to_threshold(&rec, 1e-6), eps.join(" "));
    }

    // Full bench.
    let mut bench_config = ExperimentConfig::new(ProblemKind::Poisson, 32, 32);
    bench_config.seed = 7;
    let report = run_bench(&bench_config, Some(arc), None).unwrap();
    for m in &report.methods {
        let meds: Vec<String> = m
            .stats
            .iter()
            .map(|s| s.median.map(|v| format!("{v:.0}")).unwrap_or_else(|| format!("nc({})", s.not_converged)))
            .collect();
        println!("  {:10} medians [1e-3, 1e-6, 1e-12]: {}", m.method, meds.join(" / "));
    }
}
