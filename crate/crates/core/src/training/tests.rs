use super::*;
use crate::problems::{make_poisson_instance, GridDescriptor, ScalarField};
use crate::sparse::CsrMatrix;

fn toy_setup(
    n_problems: usize,
    m_cg: usize,
) -> (Vec<ProblemInstance<f64>>, Vec<KrylovSample<f64>>) {
    let grid = GridDescriptor::new(7).unwrap();
    let problems: Vec<_> = (0..n_problems)
        .map(|j| make_poisson_instance::<f64>(&grid, 100 + j as u64).unwrap())
        .collect();
    let samples = generate_krylov_dataset(&problems, m_cg, 7).unwrap();
    (problems, samples)
}

#[test]
fn krylov_dataset_counts_and_consistency() {
    let (problems, samples) = toy_setup(2, 4);
    assert_eq!(samples.len(), 8);
    for s in &samples {
        assert!(s.consistency(&problems[s.problem_index]) < 1e-10);
    }
    // m_cg = 1 keeps only first-iteration residuals.
    let one = generate_krylov_dataset(&problems, 1, 3).unwrap();
    assert_eq!(one.len(), 2);
    assert!(one.iter().all(|s| s.source_iteration == 1));
}

#[test]
fn krylov_residual_norms_shrink_with_iteration() {
    let (_, samples) = toy_setup(2, 30);
    for j in 0..2 {
        let norms: Vec<f64> = samples
            .iter()
            .filter(|s| s.problem_index == j)
            .map(|s| vecops::norm2(&s.r))
            .collect();
        assert_eq!(norms.len(), 30);
        // The small grid converges to the round-off floor well before 30
        // iterations; the trend check only applies above that floor.
        let floor = norms[0] * 1e-13;
        for w in norms.windows(2) {
            if w[0] > floor {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-10),
                    "residual norm increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
        assert!(norms[29] < 0.5 * norms[0]);
    }
}

#[test]
fn random_dataset_counts_and_separation() {
    let grid = GridDescriptor::new(9).unwrap();
    let problems: Vec<_> = (0..3)
        .map(|j| make_poisson_instance::<f64>(&grid, 500 + j as u64).unwrap())
        .collect();
    let random = generate_random_dataset(&problems, 5, 11).unwrap();
    assert_eq!(random.len(), 15);
    for s in &random {
        assert!(s.consistency(&problems[s.problem_index]) < 1e-10);
    }
    // Late Krylov residuals are much smaller than fresh random residuals.
    let krylov = generate_krylov_dataset(&problems, 40, 11).unwrap();
    let late_mean: f64 = krylov
        .iter()
        .filter(|s| s.source_iteration > 30)
        .map(|s| vecops::norm2(&s.r))
        .sum::<f64>()
        / krylov.iter().filter(|s| s.source_iteration > 30).count() as f64;
    let random_mean: f64 =
        random.iter().map(|s| vecops::norm2(&s.r)).sum::<f64>() / random.len() as f64;
    assert!(
        random_mean > 10.0 * late_mean,
        "random {random_mean:e} vs late-Krylov {late_mean:e}"
    );
}

#[test]
fn zero_params_give_unit_loss() {
    let (problems, samples) = toy_setup(1, 3);
    let params = SnoParams::<f64>::init(2, 4, 3, 2, 1).zeros_like();
    let notay = notay_loss(&params, &problems, &samples).unwrap();
    let l2 = l2_loss(&params, &problems, &samples).unwrap();
    assert!((notay - 1.0).abs() < 1e-12, "notay loss {notay}");
    assert!((l2 - 1.0).abs() < 1e-12, "l2 loss {l2}");
}

/// A 1-unknown problem assembled by hand; the grid validator does not allow
/// n = 1, which is exactly why this bypasses the constructor.
fn unit_problem(rho: f64, v: f64) -> (Vec<ProblemInstance<f64>>, Vec<KrylovSample<f64>>) {
    let matrix = CsrMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]).unwrap();
    let problem = ProblemInstance {
        grid: GridDescriptor { n: 1 },
        a: ScalarField { n: 1, values: vec![1.0] },
        f: ScalarField { n: 1, values: vec![rho] },
        matrix,
    };
    let sample = KrylovSample {
        problem_index: 0,
        r: vec![rho],
        e: vec![v],
        source_iteration: 1,
    };
    (vec![problem], vec![sample])
}

#[test]
fn exact_match_is_a_stationary_point() {
    // All parameters zero except the decoder bias chosen so the wrapped
    // output reproduces e exactly: the loss is 0 and the (sub)gradient is 0.
    let (problems, samples) = unit_problem(0.5, -3.0);
    let mut params = SnoParams::<f64>::init(2, 1, 1, 1, 0).zeros_like();
    params.decoder.bias[0] = -3.0 / 0.5;
    let (loss, grads) = loss_gradient(&params, &problems, &samples, LossKind::L2).unwrap();
    assert!(loss < 1e-14);
    let gnorm: f64 = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    assert!(gnorm < 1e-10, "gradient norm {gnorm:e} at exact fit");
}

#[test]
fn doubled_output_gives_unit_l2_loss() {
    let (problems, samples) = unit_problem(0.5, -3.0);
    let mut params = SnoParams::<f64>::init(2, 1, 1, 1, 0).zeros_like();
    params.decoder.bias[0] = 2.0 * (-3.0) / 0.5;
    let l2 = l2_loss(&params, &problems, &samples).unwrap();
    assert!((l2 - 1.0).abs() < 1e-12);
}

#[test]
fn losses_match_dense_oracle() {
    // Recompute both losses with plain dense arithmetic and the public
    // forward evaluation, independent of the batched loss path.
    let (problems, samples) = toy_setup(1, 4);
    let params = dense_toy_params(4, 3, 2, 9);
    let engine = SnoEngine::new(3, 7).unwrap();
    let p = &problems[0];
    let mut dense = vec![vec![0.0f64; 49]; 49];
    for r in 0..49 {
        for k in p.matrix.row_ptr[r]..p.matrix.row_ptr[r + 1] {
            dense[r][p.matrix.col_idx[k]] = p.matrix.vals[k];
        }
    }
    let quad = |x: &[f64]| -> f64 {
        let mut q = 0.0;
        for i in 0..49 {
            for j in 0..49 {
                q += x[i] * dense[i][j] * x[j];
            }
        }
        q.max(0.0).sqrt()
    };
    let mut want_notay = 0.0;
    let mut want_l2 = 0.0;
    for s in &samples {
        let rn = vecops::norm2(&s.r);
        let unit: Vec<f64> = s.r.iter().map(|v| v / rn).collect();
        let out = crate::spectral::sno_forward(&params, &engine, &[&unit, &p.a.values]).unwrap();
        let d: Vec<f64> = (0..49).map(|i| rn * out[i] - s.e[i]).collect();
        want_notay += quad(&d) / quad(&s.e);
        let dn: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let en: f64 = s.e.iter().map(|v| v * v).sum::<f64>().sqrt();
        want_l2 += dn / en;
    }
    want_notay /= samples.len() as f64;
    want_l2 /= samples.len() as f64;
    let got_notay = notay_loss(&params, &problems, &samples).unwrap();
    let got_l2 = l2_loss(&params, &problems, &samples).unwrap();
    assert!((got_notay - want_notay).abs() < 1e-10 * want_notay.max(1.0));
    assert!((got_l2 - want_l2).abs() < 1e-10 * want_l2.max(1.0));
}

/// Random parameters with a non-degenerate read-out layer (the training
/// default zero-initializes the decoder, which would null most gradients).
fn dense_toy_params(width: usize, modes: usize, layers: usize, seed: u64) -> SnoParams<f64> {
    use rand::{Rng, SeedableRng};
    let mut params = SnoParams::<f64>::init(2, width, modes, layers, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xdec0de);
    for w in params.decoder.weight.iter_mut().chain(params.decoder.bias.iter_mut()) {
        *w = rng.random_range(-0.5..0.5);
    }
    params
}

#[test]
fn gradient_matches_central_finite_differences() {
    let (problems, samples) = toy_setup(2, 3);
    for kind in [LossKind::Notay, LossKind::L2] {
        let params = dense_toy_params(4, 3, 4, 17);
        let (_, grads) = loss_gradient(&params, &problems, &samples, kind).unwrap();
        let flat_grads: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect();
        let total = flat_grads.len();

        // 50 deterministic pseudo-random coordinates spread over all tensors.
        let mut coords = Vec::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        while coords.len() < 50 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let idx = (state >> 17) as usize % total;
            if !coords.contains(&idx) {
                coords.push(idx);
            }
        }

        let h = 1e-5;
        for &coord in &coords {
            let eval = |delta: f64| -> f64 {
                let mut perturbed = params.clone();
                let mut seen = 0usize;
                for t in perturbed.tensors_mut() {
                    if coord < seen + t.len() {
                        t[coord - seen] += delta;
                        break;
                    }
                    seen += t.len();
                }
                match kind {
                    LossKind::Notay => notay_loss(&perturbed, &problems, &samples).unwrap(),
                    LossKind::L2 => l2_loss(&perturbed, &problems, &samples).unwrap(),
                }
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let g = flat_grads[coord];
            // Central differences of an O(1) loss carry ~5e-10 of absolute
            // round-off at this step size, so coordinates with gradients
            // near that floor are held to the absolute bound instead.
            let denom = g.abs().max(fd.abs());
            assert!(
                (g - fd).abs() < (1e-5 * denom).max(1e-9),
                "{kind}: coord {coord}: grad {g:e} vs fd {fd:e}"
            );
        }
    }
}

#[test]
fn gradient_is_linear_in_the_batch() {
    let (problems, samples) = toy_setup(2, 4);
    let params = dense_toy_params(4, 3, 2, 23);
    let (la, ga) = loss_gradient(&params, &problems, &samples[0..3], LossKind::Notay).unwrap();
    let (lb, gb) = loss_gradient(&params, &problems, &samples[3..8], LossKind::Notay).unwrap();
    let (lab, gab) = loss_gradient(&params, &problems, &samples[0..8], LossKind::Notay).unwrap();
    let want_loss = (3.0 * la + 5.0 * lb) / 8.0;
    assert!((lab - want_loss).abs() < 1e-10 * want_loss.max(1.0));
    let fa: Vec<f64> = ga.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let fb: Vec<f64> = gb.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let fab: Vec<f64> = gab.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let scale = fab.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    for i in 0..fa.len() {
        let want = (3.0 * fa[i] + 5.0 * fb[i]) / 8.0;
        assert!(
            (fab[i] - want).abs() <= 1e-10 * scale.max(1e-12),
            "coord {i}: {} vs {want}",
            fab[i]
        );
    }
}

#[test]
fn losses_invariant_under_residual_rescaling() {
    let (problems, mut samples) = toy_setup(1, 3);
    let params = dense_toy_params(4, 3, 2, 29);
    let base_notay = notay_loss(&params, &problems, &samples).unwrap();
    let base_l2 = l2_loss(&params, &problems, &samples).unwrap();
    for s in samples.iter_mut() {
        for v in s.r.iter_mut() {
            *v *= 1e6;
        }
        for v in s.e.iter_mut() {
            *v *= 1e6;
        }
    }
    let scaled_notay = notay_loss(&params, &problems, &samples).unwrap();
    let scaled_l2 = l2_loss(&params, &problems, &samples).unwrap();
    assert!((scaled_notay - base_notay).abs() < 1e-10 * base_notay);
    assert!((scaled_l2 - base_l2).abs() < 1e-10 * base_l2);
}

#[test]
fn exact_inverse_preconditioner_has_tiny_notay_loss() {
    let (problems, samples) = toy_setup(1, 5);
    let p = &problems[0];
    let mut total = 0.0;
    for s in &samples {
        let b = reference_solve(&p.matrix, &s.r).unwrap();
        let d = vecops::sub(&b, &s.e);
        total += a_norm(&p.matrix, &d).unwrap() / a_norm(&p.matrix, &s.e).unwrap();
    }
    total /= samples.len() as f64;
    assert!(total < 1e-8, "exact-inverse loss {total:e}");
}

#[test]
fn single_sample_overfit_reaches_low_loss() {
    let (problems, samples) = toy_setup(1, 1);
    // Modes cover the whole grid-7 spectrum, so one pair is memorizable.
    let config = TrainConfig {
        loss: LossKind::Notay,
        sampling: SamplingKind::Krylov,
        width: 8,
        modes: 7,
        layers: 4,
        lr: 1e-2,
        lr_decay_factor: 0.5,
        lr_decay_every: 60,
        weight_decay: 0.0,
        epochs: 500,
        batch_size: 1,
        m_cg: 1,
        seed: 3,
    };
    let (params, curve) = train(&problems, &samples, &config).unwrap();
    let final_loss = notay_loss(&params, &problems, &samples).unwrap();
    assert!(final_loss < 0.1, "overfit loss {final_loss}");
    assert!(curve.iter().all(|c| c.mean_loss.is_finite()));
    let min_loss = curve.iter().map(|c| c.mean_loss).fold(f64::INFINITY, f64::min);
    assert!(min_loss <= curve[0].mean_loss);
}

#[test]
fn training_is_bitwise_deterministic() {
    let (problems, samples) = toy_setup(2, 3);
    let config = TrainConfig {
        loss: LossKind::Notay,
        sampling: SamplingKind::Krylov,
        width: 4,
        modes: 3,
        layers: 2,
        lr: 1e-3,
        lr_decay_factor: 0.5,
        lr_decay_every: 4,
        weight_decay: 1e-2,
        epochs: 6,
        batch_size: 4,
        m_cg: 3,
        seed: 12,
    };
    let (p1, c1) = train(&problems, &samples, &config).unwrap();
    let (p2, c2) = train(&problems, &samples, &config).unwrap();
    for ((_, a), (_, b)) in p1.tensors().iter().zip(p2.tensors().iter()) {
        assert_eq!(a, b, "parameters differ between identical runs");
    }
    for (x, y) in c1.iter().zip(c2.iter()) {
        assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits());
    }
}

#[test]
fn lr_schedule_halves_every_interval() {
    let config = TrainConfig::recipe(ProblemKind::Poisson, 32);
    assert_eq!(config.width, 32);
    assert_eq!(config.epochs, 200);
    assert_eq!(config.batch_size, 32);
    assert_eq!(config.modes, 20);
    assert!((config.lr_at_epoch(0) - 1e-3).abs() < 1e-18);
    assert!((config.lr_at_epoch(49) - 1e-3).abs() < 1e-18);
    assert!((config.lr_at_epoch(50) - 5e-4).abs() < 1e-18);
    assert!((config.lr_at_epoch(150) - 1.25e-4).abs() < 1e-18);
    let d = TrainConfig::recipe(ProblemKind::Diffusion, 64);
    assert_eq!((d.width, d.epochs, d.batch_size), (48, 150, 16));
    let d128 = TrainConfig::recipe(ProblemKind::Diffusion, 128);
    assert_eq!((d128.width, d128.batch_size), (85, 4));
}
