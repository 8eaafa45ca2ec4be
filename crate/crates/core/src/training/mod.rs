//! Training pipeline for the learned preconditioner: residual/error sample
//! generation from solver runs, the two relative losses and their exact
//! reverse-mode gradients, and the optimizer loop.

pub mod adam;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{cg_observed, random_initial_guess};
use crate::problems::{mix_seed, sample_trig_field, ProblemInstance, ProblemKind, TrigPolySpec};
use crate::problems::{FIELD_ALPHA, FIELD_N1, FIELD_N2};
use crate::scalar::Scalar;
use crate::sparse::{a_norm, reference_solve, reference_solve_from};
use crate::spectral::{max_modes_for_grid, SnoEngine, SnoParams};
use crate::vecops;
use adam::AdamState;

const SALT_U0: u64 = 0x10;
const SALT_RANDOM_U: u64 = 0x11;
const SALT_RANDOM_F: u64 = 0x12;
const SALT_INIT: u64 = 0x13;
const SALT_SHUFFLE: u64 = 0x14;

/// Relative consistency required of every generated sample.
pub const SAMPLE_CONSISTENCY_TOL: f64 = 1e-10;

/// One training pair: a residual and its exact error `e = A^{-1} r`.
#[derive(Debug, Clone)]
pub struct KrylovSample<T> {
    pub problem_index: usize,
    pub r: Vec<T>,
    pub e: Vec<T>,
    /// Solver iteration the residual came from (0 for random residuals).
    pub source_iteration: usize,
}

impl<T: Scalar> KrylovSample<T> {
    /// `||A e - r|| / ||r||`, the defining consistency of the pair.
    pub fn consistency(&self, problem: &ProblemInstance<T>) -> T {
        let ae = problem.matrix.spmv(&self.e).expect("sample dims");
        vecops::norm2(&vecops::sub(&ae, &self.r)) / vecops::norm2(&self.r)
    }
}

/// Residuals harvested from `m_cg` plain-CG iterations per problem, paired
/// with errors from warm-started reference solves. Samples are ordered by
/// (problem, iteration).
pub fn generate_krylov_dataset<T: Scalar>(
    problems: &[ProblemInstance<T>],
    m_cg: usize,
    seed: u64,
) -> Result<Vec<KrylovSample<T>>> {
    let per_problem: Vec<Result<Vec<KrylovSample<T>>>> = problems
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            let n = p.grid.unknowns();
            let u_exact = reference_solve(&p.matrix, p.rhs())?;
            let u0 = random_initial_guess::<T>(n, mix_seed(seed, SALT_U0 + j as u64));
            let mut samples = Vec::with_capacity(m_cg);
            let mut inner: Result<()> = Ok(());
            let _ = cg_observed(&p.matrix, p.rhs(), &u0, 0.0, m_cg, |i, u, r| {
                if inner.is_err() {
                    return;
                }
                let warm = vecops::sub(&u_exact, u);
                match reference_solve_from(&p.matrix, r, Some(&warm)) {
                    Ok(e) => samples.push(KrylovSample {
                        problem_index: j,
                        r: r.to_vec(),
                        e,
                        source_iteration: i,
                    }),
                    Err(err) => inner = Err(err),
                }
            })?;
            inner?;
            for s in &samples {
                let c = s.consistency(p);
                if c > T::lit(SAMPLE_CONSISTENCY_TOL) {
                    return Err(Error::InvalidData(format!(
                        "sample consistency {c:e} above tolerance (problem {j}, iter {})",
                        s.source_iteration
                    )));
                }
            }
            Ok(samples)
        })
        .collect();
    let mut all = Vec::with_capacity(problems.len() * m_cg);
    for chunk in per_problem {
        all.extend(chunk?);
    }
    Ok(all)
}

/// Residuals from random iterate/right-hand-side pairs (`r = f - A u`,
/// `u ~ N(0, I)`, `f` a fresh random field), errors from reference solves.
pub fn generate_random_dataset<T: Scalar>(
    problems: &[ProblemInstance<T>],
    count_per_problem: usize,
    seed: u64,
) -> Result<Vec<KrylovSample<T>>> {
    let per_problem: Vec<Result<Vec<KrylovSample<T>>>> = problems
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            let n = p.grid.unknowns();
            let mut samples = Vec::with_capacity(count_per_problem);
            for i in 0..count_per_problem {
                let tag = ((j as u64) << 20) | i as u64;
                let u = random_initial_guess::<T>(n, mix_seed(seed, SALT_RANDOM_U + tag));
                let f_spec = TrigPolySpec::new(
                    FIELD_N1,
                    FIELD_N2,
                    FIELD_ALPHA,
                    0.0,
                    mix_seed(seed, SALT_RANDOM_F + tag),
                );
                let f = sample_trig_field::<T>(&f_spec, &p.grid);
                let au = p.matrix.spmv(&u)?;
                let r = vecops::sub(&f.values, &au);
                let e = reference_solve(&p.matrix, &r)?;
                samples.push(KrylovSample { problem_index: j, r, e, source_iteration: 0 });
            }
            for s in &samples {
                let c = s.consistency(p);
                if c > T::lit(SAMPLE_CONSISTENCY_TOL) {
                    return Err(Error::InvalidData(format!(
                        "random sample consistency {c:e} above tolerance (problem {j})"
                    )));
                }
            }
            Ok(samples)
        })
        .collect();
    let mut all = Vec::with_capacity(problems.len() * count_per_problem);
    for chunk in per_problem {
        all.extend(chunk?);
    }
    Ok(all)
}

/// Which relative norm the objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Energy-norm form `||B(r) - e||_A / ||e||_A`.
    Notay,
    /// Euclidean form `||B(r) - e||_2 / ||e||_2`.
    L2,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Notay => write!(f, "notay"),
            LossKind::L2 => write!(f, "l2"),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "notay" => Ok(LossKind::Notay),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::InvalidConfig(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// How training residuals are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingKind {
    /// From plain-CG iterations (Krylov subspace samples).
    Krylov,
    /// From random iterate/right-hand-side pairs.
    Random,
}

impl std::fmt::Display for SamplingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingKind::Krylov => write!(f, "krylov"),
            SamplingKind::Random => write!(f, "random"),
        }
    }
}

impl std::str::FromStr for SamplingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "krylov" => Ok(SamplingKind::Krylov),
            "random" => Ok(SamplingKind::Random),
            other => Err(Error::InvalidConfig(format!("unknown sampling kind '{other}'"))),
        }
    }
}

/// Optimizer and architecture settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub sampling: SamplingKind,
    pub width: usize,
    pub modes: usize,
    pub layers: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub m_cg: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Published hyperparameters for a problem family at a given grid.
    pub fn recipe(kind: ProblemKind, grid: usize) -> Self {
        let width = match kind {
            ProblemKind::Poisson => 32,
            ProblemKind::Diffusion => match grid {
                0..=32 => 32,
                33..=64 => 48,
                _ => 85,
            },
        };
        let (epochs, batch_size) = match kind {
            ProblemKind::Poisson => (200, if grid >= 128 { 8 } else { 32 }),
            ProblemKind::Diffusion => (150, if grid >= 128 { 4 } else { 16 }),
        };
        Self {
            loss: LossKind::Notay,
            sampling: SamplingKind::Krylov,
            width,
            modes: 20.min(max_modes_for_grid(grid)),
            layers: 4,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 50,
            weight_decay: 1e-2,
            epochs,
            batch_size,
            m_cg: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0
            || self.lr_decay_factor <= 0.0
            || self.lr_decay_every == 0
            || self.weight_decay < 0.0
            || self.epochs == 0
            || self.batch_size == 0
            || self.width == 0
            || self.modes == 0
            || self.layers == 0
            || self.m_cg == 0
        {
            return Err(Error::InvalidConfig("non-positive training setting".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Per-sample quantities fixed over training, precomputed once.
struct SampleCache<T> {
    problem_index: usize,
    r_unit: Vec<T>,
    r_norm: T,
    e: Vec<T>,
    e_norm_a: T,
    e_norm_2: T,
}

fn build_cache<T: Scalar>(
    problems: &[ProblemInstance<T>],
    samples: &[KrylovSample<T>],
) -> Result<Vec<SampleCache<T>>> {
    samples
        .iter()
        .map(|s| {
            let p = &problems[s.problem_index];
            let r_norm = vecops::norm2(&s.r);
            if r_norm <= T::zero() {
                return Err(Error::DegenerateSample { quadratic_form: 0.0 });
            }
            let e_norm_a = a_norm(&p.matrix, &s.e)?;
            let e_norm_2 = vecops::norm2(&s.e);
            if e_norm_a <= T::zero() || e_norm_2 <= T::zero() {
                return Err(Error::DegenerateSample {
                    quadratic_form: (e_norm_a * e_norm_a).to_f64().unwrap_or(0.0),
                });
            }
            Ok(SampleCache {
                problem_index: s.problem_index,
                r_unit: s.r.iter().map(|&v| v / r_norm).collect(),
                r_norm,
                e: s.e.clone(),
                e_norm_a,
                e_norm_2,
            })
        })
        .collect()
}

/// Assemble the `[channel][sample][node]` input planes for a batch.
fn assemble_input<T: Scalar>(
    problems: &[ProblemInstance<T>],
    cache: &[SampleCache<T>],
    batch: &[usize],
    nn: usize,
    x: &mut Vec<T>,
) {
    let b = batch.len();
    x.clear();
    x.resize(2 * b * nn, T::zero());
    for (slot, &idx) in batch.iter().enumerate() {
        let s = &cache[idx];
        x[slot * nn..(slot + 1) * nn].copy_from_slice(&s.r_unit);
        let a_vals = &problems[s.problem_index].a.values;
        x[(b + slot) * nn..(b + slot + 1) * nn].copy_from_slice(a_vals);
    }
}

/// Mean loss of a batch and, when requested, the loss gradient with respect
/// to the network output (scaled by the wrapper and the batch mean).
fn loss_head<T: Scalar>(
    problems: &[ProblemInstance<T>],
    cache: &[SampleCache<T>],
    batch: &[usize],
    out: &[T],
    nn: usize,
    kind: LossKind,
    g_out: Option<&mut Vec<T>>,
) -> Result<T> {
    let b = batch.len();
    let inv_b = T::one() / T::lit(b as f64);
    let mut scratch = Vec::new();
    let (want_grad, g_buf) = match g_out {
        Some(buf) => {
            buf.clear();
            buf.resize(b * nn, T::zero());
            (true, buf)
        }
        None => {
            scratch.resize(b * nn, T::zero());
            (false, &mut scratch)
        }
    };
    let results: Vec<Result<T>> = batch
        .par_iter()
        .zip(out.par_chunks(nn).zip(g_buf.par_chunks_mut(nn)))
        .map(|(&idx, (out_b, g_b))| {
            let s = &cache[idx];
            let p = &problems[s.problem_index];
            // d = r_norm * out - e
            let mut d = vec![T::zero(); nn];
            for i in 0..nn {
                d[i] = s.r_norm * out_b[i] - s.e[i];
            }
            match kind {
                LossKind::Notay => {
                    let ad = p.matrix.spmv(&d)?;
                    let q = vecops::dot(&d, &ad).max(T::zero());
                    let dn = q.sqrt();
                    if want_grad && dn > T::zero() {
                        let scale = s.r_norm * inv_b / (dn * s.e_norm_a);
                        for i in 0..nn {
                            g_b[i] = scale * ad[i];
                        }
                    }
                    Ok(dn / s.e_norm_a)
                }
                LossKind::L2 => {
                    let dn = vecops::norm2(&d);
                    if want_grad && dn > T::zero() {
                        let scale = s.r_norm * inv_b / (dn * s.e_norm_2);
                        for i in 0..nn {
                            g_b[i] = scale * d[i];
                        }
                    }
                    Ok(dn / s.e_norm_2)
                }
            }
        })
        .collect();
    let mut total = T::zero();
    for r in results {
        total += r?;
    }
    Ok(total * inv_b)
}

/// Context shared by the loss/gradient entry points: the problems, the
/// evaluation engine, and precomputed per-sample norms.
pub struct Trainer<'a, T: Scalar> {
    pub problems: &'a [ProblemInstance<T>],
    pub engine: SnoEngine<T>,
    cache: Vec<SampleCache<T>>,
    nn: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        problems: &'a [ProblemInstance<T>],
        samples: &[KrylovSample<T>],
        modes: usize,
    ) -> Result<Self> {
        if problems.is_empty() || samples.is_empty() {
            return Err(Error::InvalidConfig("empty training inputs".into()));
        }
        let n = problems[0].grid.n;
        if problems.iter().any(|p| p.grid.n != n) {
            return Err(Error::InvalidConfig("mixed grids in one training set".into()));
        }
        Ok(Self {
            engine: SnoEngine::new(modes, n)?,
            cache: build_cache(problems, samples)?,
            problems,
            nn: n * n,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.cache.len()
    }

    /// Mean loss of a batch (indices into the sample list).
    pub fn loss(&self, params: &SnoParams<T>, batch: &[usize], kind: LossKind) -> Result<T> {
        let mut x = Vec::new();
        assemble_input(self.problems, &self.cache, batch, self.nn, &mut x);
        let mut ws = self.engine.workspace(params, batch.len());
        self.engine.forward(params, &x, &mut ws)?;
        loss_head(self.problems, &self.cache, batch, &ws.out, self.nn, kind, None)
    }

    /// Mean loss and its exact reverse-mode gradient for a batch.
    pub fn loss_gradient(
        &self,
        params: &SnoParams<T>,
        batch: &[usize],
        kind: LossKind,
        ws: &mut crate::spectral::sno::BatchWorkspace<T>,
        grads: &mut SnoParams<T>,
    ) -> Result<T> {
        let mut x = Vec::new();
        assemble_input(self.problems, &self.cache, batch, self.nn, &mut x);
        self.engine.forward(params, &x, ws)?;
        let mut g_out = Vec::new();
        let loss = loss_head(
            self.problems,
            &self.cache,
            batch,
            &ws.out,
            self.nn,
            kind,
            Some(&mut g_out),
        )?;
        self.engine.backward(params, &x, &g_out, ws, grads)?;
        if !grads.all_finite() {
            return Err(Error::NonFiniteGradient { context: "loss_gradient" });
        }
        Ok(loss)
    }
}

/// Mean energy-norm loss over a whole sample set.
pub fn notay_loss<T: Scalar>(
    params: &SnoParams<T>,
    problems: &[ProblemInstance<T>],
    samples: &[KrylovSample<T>],
) -> Result<T> {
    let trainer = Trainer::new(problems, samples, params.modes)?;
    let batch: Vec<usize> = (0..samples.len()).collect();
    trainer.loss(params, &batch, LossKind::Notay)
}

/// Euclidean counterpart of [`notay_loss`].
pub fn l2_loss<T: Scalar>(
    params: &SnoParams<T>,
    problems: &[ProblemInstance<T>],
    samples: &[KrylovSample<T>],
) -> Result<T> {
    let trainer = Trainer::new(problems, samples, params.modes)?;
    let batch: Vec<usize> = (0..samples.len()).collect();
    trainer.loss(params, &batch, LossKind::L2)
}

/// Gradient of the selected loss over a batch of samples.
pub fn loss_gradient<T: Scalar>(
    params: &SnoParams<T>,
    problems: &[ProblemInstance<T>],
    samples: &[KrylovSample<T>],
    kind: LossKind,
) -> Result<(T, SnoParams<T>)> {
    let trainer = Trainer::new(problems, samples, params.modes)?;
    let batch: Vec<usize> = (0..samples.len()).collect();
    let mut ws = trainer.engine.workspace(params, batch.len());
    let mut grads = params.zeros_like();
    let loss = trainer.loss_gradient(params, &batch, kind, &mut ws, &mut grads)?;
    Ok((loss, grads))
}

/// One point of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Full optimizer loop: shuffled mini-batches, Adam with decoupled weight
/// decay, halved learning rate on the configured schedule. Deterministic
/// for fixed inputs and seed.
pub fn train<T: Scalar>(
    problems: &[ProblemInstance<T>],
    samples: &[KrylovSample<T>],
    config: &TrainConfig,
) -> Result<(SnoParams<T>, Vec<CurvePoint>)> {
    config.validate()?;
    let trainer = Trainer::new(problems, samples, config.modes)?;
    let mut params = SnoParams::<T>::init(
        crate::spectral::INPUT_CHANNELS,
        config.width,
        config.modes,
        config.layers,
        mix_seed(config.seed, SALT_INIT),
    );
    let mut adam = AdamState::new(&params);
    let mut grads = params.zeros_like();
    let n_samples = trainer.sample_count();
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    // Workspaces for the full batch size and the ragged tail, if any.
    let full = config.batch_size.min(n_samples);
    let mut ws_full = trainer.engine.workspace(&params, full);
    let tail = n_samples % full;
    let mut ws_tail = if tail > 0 {
        Some(trainer.engine.workspace(&params, tail))
    } else {
        None
    };

    for epoch in 0..config.epochs {
        shuffle(&mut order, mix_seed(config.seed, SALT_SHUFFLE + epoch as u64));
        let lr = T::lit(config.lr_at_epoch(epoch));
        let wd = T::lit(config.weight_decay);
        let mut epoch_loss = T::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(full) {
            let ws = if chunk.len() == full {
                &mut ws_full
            } else {
                ws_tail.as_mut().expect("tail workspace")
            };
            zero_params(&mut grads);
            let loss = trainer.loss_gradient(&params, chunk, config.loss, ws, &mut grads)?;
            adam.step(&mut params, &grads, lr, wd);
            epoch_loss += loss;
            batches += 1;
        }
        curve.push(CurvePoint {
            epoch,
            mean_loss: (epoch_loss / T::lit(batches as f64)).to_f64().unwrap_or(f64::NAN),
            lr: config.lr_at_epoch(epoch),
        });
        if !params.all_finite() {
            return Err(Error::NonFiniteGradient { context: "train step" });
        }
    }
    Ok((params, curve))
}

fn zero_params<T: Scalar>(p: &mut SnoParams<T>) {
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = T::zero();
        }
    }
}

fn shuffle(order: &mut [usize], seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests;
