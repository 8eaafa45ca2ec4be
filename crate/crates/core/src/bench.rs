//! Experiment harness: configuration parsing, the benchmark runner that
//! compares the learned preconditioner with the classical baselines over
//! fresh test instances, and report rendering.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::krylov::{
    cg, fcg, iterations_to_threshold, random_initial_guess, ConvergenceRecord, FcgConfig,
    IdentityPreconditioner, Preconditioner,
};
use crate::precond::{
    ilu_factor, JacobiPreconditioner, SymmetricGaussSeidelPreconditioner, ILU_DEFAULT_DROP_TOL,
};
use crate::problems::{mix_seed, GridDescriptor, ProblemKind};
use crate::sparse::reference_solve;
use crate::spectral::SnoPreconditioner;
use crate::training::{
    generate_krylov_dataset, generate_random_dataset, train, SamplingKind, TrainConfig,
};
use crate::{Problem, Real, SnoParams};

const SALT_TRAIN_PROBLEM: u64 = 0x100;
const SALT_TEST_PROBLEM: u64 = 0x9000;
const SALT_TEST_U0: u64 = 0xA000;

/// Everything one experiment needs: problem family, grids, sample counts,
/// solver policy, and the training recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: ProblemKind,
    pub train_grid: usize,
    pub test_grid: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub m_max: usize,
    /// Residual-drop thresholds, sorted descending.
    pub thresholds: Vec<f64>,
    pub seed: u64,
    /// Iteration cap for the learned-preconditioner rows; defaults to
    /// 2*test_grid on matched grids and 300 across grids.
    pub max_iter_no: Option<usize>,
    /// Iteration cap for CG and the classical rows; defaults to
    /// max(300, 10*test_grid) so the slowest baseline can reach the
    /// tightest threshold.
    pub max_iter_classical: Option<usize>,
    /// Grids above the desk-scale defaults must be opted into.
    pub allow_large: bool,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(dataset: ProblemKind, train_grid: usize, test_grid: usize) -> Self {
        let mut train = TrainConfig::recipe(dataset, train_grid);
        train.seed = 7;
        Self {
            dataset,
            train_grid,
            test_grid,
            n_train: train_grid,
            n_test: 20,
            m_max: 20,
            thresholds: vec![1e-3, 1e-6, 1e-12],
            seed: 7,
            max_iter_no: None,
            max_iter_classical: None,
            allow_large: false,
            train,
        }
    }

    pub fn max_iter_no(&self) -> usize {
        self.max_iter_no.unwrap_or(if self.train_grid == self.test_grid {
            2 * self.test_grid
        } else {
            300
        })
    }

    pub fn max_iter_classical(&self) -> usize {
        self.max_iter_classical.unwrap_or((10 * self.test_grid).max(300))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_test < 1 {
            return Err(Error::InvalidConfig("n_test must be >= 1".into()));
        }
        for w in self.thresholds.windows(2) {
            if w[0] <= w[1] {
                return Err(Error::InvalidConfig("thresholds must be sorted descending".into()));
            }
        }
        if !self.allow_large && (self.train_grid > 32 || self.test_grid > 64) {
            return Err(Error::InvalidConfig(
                "grids beyond the desk-scale defaults (train 32 / test 64) need allow_large = true"
                    .into(),
            ));
        }
        self.train.validate()
    }

    /// Parse the plain `key = value` format (with `#` comments).
    pub fn parse(text: &str) -> Result<Self> {
        let mut dataset = ProblemKind::Poisson;
        let mut train_grid = 32usize;
        let mut test_grid = None::<usize>;
        // First pass gets the shape keys so the recipe defaults line up.
        let entries: Vec<(String, String)> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (k, v) = l.split_once('=').ok_or_else(|| {
                    Error::InvalidConfig(format!("expected 'key = value', got '{l}'"))
                })?;
                Ok((k.trim().to_string(), v.trim().to_string()))
            })
            .collect::<Result<_>>()?;
        for (k, v) in &entries {
            match k.as_str() {
                "dataset" => dataset = v.parse()?,
                "train_grid" => train_grid = parse_num(k, v)?,
                "test_grid" => test_grid = Some(parse_num(k, v)?),
                _ => {}
            }
        }
        let mut config = Self::new(dataset, train_grid, test_grid.unwrap_or(train_grid));
        for (k, v) in &entries {
            config.set(k, v)?;
        }
        Ok(config)
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = value.parse()?,
            "train_grid" => self.train_grid = parse_num(key, value)?,
            "test_grid" => self.test_grid = parse_num(key, value)?,
            "n_train" => self.n_train = parse_num(key, value)?,
            "n_test" => self.n_test = parse_num(key, value)?,
            "m_max" => self.m_max = parse_num(key, value)?,
            "m_cg" => self.train.m_cg = parse_num(key, value)?,
            "seed" => {
                self.seed = parse_num(key, value)?;
                self.train.seed = self.seed;
            }
            "thresholds" => {
                self.thresholds = value
                    .split(',')
                    .map(|t| parse_num::<f64>("thresholds", t.trim()))
                    .collect::<Result<_>>()?;
            }
            "loss" => self.train.loss = value.parse()?,
            "sampling" => self.train.sampling = value.parse()?,
            "width" => self.train.width = parse_num(key, value)?,
            "modes" => self.train.modes = parse_num(key, value)?,
            "layers" => self.train.layers = parse_num(key, value)?,
            "lr" => self.train.lr = parse_num(key, value)?,
            "lr_decay_factor" => self.train.lr_decay_factor = parse_num(key, value)?,
            "lr_decay_every" => self.train.lr_decay_every = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "max_iter_no" => self.max_iter_no = Some(parse_num(key, value)?),
            "max_iter_classical" => self.max_iter_classical = Some(parse_num(key, value)?),
            "allow_large" => {
                self.allow_large = value
                    .parse::<bool>()
                    .map_err(|_| Error::InvalidConfig(format!("bad bool for {key}: '{value}'")))?;
            }
            other => return Err(Error::InvalidConfig(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Render the resolved configuration back to the text format.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        format!(
            "dataset = {}\ntrain_grid = {}\ntest_grid = {}\nn_train = {}\nn_test = {}\n\
             m_max = {}\nm_cg = {}\nthresholds = {}\nseed = {}\nloss = {}\nsampling = {}\n\
             width = {}\nmodes = {}\nlayers = {}\nlr = {:e}\nlr_decay_factor = {}\n\
             lr_decay_every = {}\nweight_decay = {:e}\nepochs = {}\nbatch_size = {}\n\
             max_iter_no = {}\nmax_iter_classical = {}\nallow_large = {}\n",
            self.dataset,
            self.train_grid,
            self.test_grid,
            self.n_train,
            self.n_test,
            self.m_max,
            t.m_cg,
            self.thresholds
                .iter()
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>()
                .join(","),
            self.seed,
            t.loss,
            t.sampling,
            t.width,
            t.modes,
            t.layers,
            t.lr,
            t.lr_decay_factor,
            t.lr_decay_every,
            t.weight_decay,
            t.epochs,
            t.batch_size,
            self.max_iter_no(),
            self.max_iter_classical(),
            self.allow_large,
        )
    }

    pub fn train_problems(&self) -> Result<Vec<Problem>> {
        let grid = GridDescriptor::new(self.train_grid)?;
        (0..self.n_train)
            .map(|j| self.dataset.make(&grid, mix_seed(self.seed, SALT_TRAIN_PROBLEM + j as u64)))
            .collect()
    }

    pub fn test_problems(&self) -> Result<Vec<Problem>> {
        let grid = GridDescriptor::new(self.test_grid)?;
        (0..self.n_test)
            .map(|t| self.dataset.make(&grid, mix_seed(self.seed, SALT_TEST_PROBLEM + t as u64)))
            .collect()
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("bad value for {key}: '{value}'")))
}

// ---------------------------------------------------------------------------
// Bench runner
// ---------------------------------------------------------------------------

/// One table cell: iteration medians over the test instances at a threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdStat {
    pub threshold: f64,
    /// Median iterations, absent when at least half the runs never reached
    /// the threshold.
    pub median: Option<f64>,
    pub min: Option<usize>,
    pub max: Option<usize>,
    pub not_converged: usize,
    /// Per-instance counts (None marks a run that missed the threshold).
    pub counts: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub stats: Vec<ThresholdStat>,
    /// Relative record CSV paths, one per instance, when persisted.
    pub record_files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub dataset: ProblemKind,
    pub train_grid: usize,
    pub test_grid: usize,
    pub n_test: usize,
    pub thresholds: Vec<f64>,
    pub checkpoint_used: bool,
    pub methods: Vec<MethodResult>,
    pub config_text: String,
}

/// Median with missing values treated as +inf; `None` when the median
/// itself lands on a missing value.
pub fn median_iterations(counts: &[Option<usize>]) -> Option<f64> {
    let mut vals: Vec<f64> = counts
        .iter()
        .map(|c| c.map(|v| v as f64).unwrap_or(f64::INFINITY))
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    let m = if n % 2 == 1 {
        vals[n / 2]
    } else {
        (vals[n / 2 - 1] + vals[n / 2]) / 2.0
    };
    m.is_finite().then_some(m)
}

fn stat_for(threshold: f64, counts: Vec<Option<usize>>) -> ThresholdStat {
    let reached: Vec<usize> = counts.iter().flatten().copied().collect();
    ThresholdStat {
        threshold,
        median: median_iterations(&counts),
        min: reached.iter().min().copied(),
        max: reached.iter().max().copied(),
        not_converged: counts.iter().filter(|c| c.is_none()).count(),
        counts,
    }
}

/// The method rows of the comparison table, in report order.
pub const BENCH_METHODS: [&str; 7] = ["cg", "jacobi4", "gs1", "gs4", "ilu1", "ilu8", "no_fcg"];

/// Run the full method suite over fresh test instances. Solver breakdowns
/// are recorded as non-converged runs rather than aborting the bench. When
/// `out_dir` is given, every run's convergence record is written under
/// `records/`.
pub fn run_bench(
    config: &ExperimentConfig,
    checkpoint: Option<Arc<SnoParams>>,
    out_dir: Option<&Path>,
) -> Result<BenchReport> {
    config.validate()?;
    let problems = config.test_problems()?;
    let max_iter_no = config.max_iter_no();
    let max_iter_classical = config.max_iter_classical();
    let tol = *config.thresholds.last().unwrap_or(&1e-12) * 0.1;
    let m_max = config.m_max;

    struct InstanceRuns {
        records: Vec<(String, Option<ConvergenceRecord>)>,
    }

    let instances: Vec<InstanceRuns> = problems
        .par_iter()
        .enumerate()
        .map(|(t, p)| {
            let n = p.grid.unknowns();
            let u0 = random_initial_guess::<Real>(n, mix_seed(config.seed, SALT_TEST_U0 + t as u64));
            let u_exact = reference_solve(&p.matrix, p.rhs()).ok();
            let mut records: Vec<(String, Option<ConvergenceRecord>)> = Vec::new();

            // Plain CG row.
            let cg_rec = cg(&p.matrix, p.rhs(), &u0, tol, max_iter_classical)
                .ok()
                .map(|(_, rec)| rec);
            records.push(("cg".into(), cg_rec));

            // Flexible runs share a closure; diagnostics attach when the
            // reference solve succeeded.
            let run_fcg = |b: &dyn Preconditioner<Real>, max_iter: usize| {
                let cfg = FcgConfig {
                    m_max,
                    tol,
                    max_iter,
                    u_exact: u_exact.as_deref(),
                };
                fcg(&p.matrix, p.rhs(), b, &u0, &cfg).ok().map(|(_, rec)| rec)
            };

            let jacobi = JacobiPreconditioner::new(&p.matrix, 4).ok();
            records.push((
                "jacobi4".into(),
                jacobi.as_ref().and_then(|b| run_fcg(b, max_iter_classical)),
            ));
            for sweeps in [1usize, 4] {
                let gs = SymmetricGaussSeidelPreconditioner::new(&p.matrix, sweeps).ok();
                records.push((
                    format!("gs{sweeps}"),
                    gs.as_ref().and_then(|b| run_fcg(b, max_iter_classical)),
                ));
            }
            for ff in [1.0f64, 8.0] {
                let ilu = ilu_factor(&p.matrix, ff, ILU_DEFAULT_DROP_TOL).ok();
                records.push((
                    format!("ilu{}", ff as usize),
                    ilu.as_ref().and_then(|b| run_fcg(b, max_iter_classical)),
                ));
            }
            if let Some(params) = checkpoint.as_ref() {
                let no = SnoPreconditioner::new(params.clone(), p).ok();
                records.push((
                    "no_fcg".into(),
                    no.as_ref().and_then(|b| run_fcg(b, max_iter_no)),
                ));
            }
            // Identity-preconditioned flexible run: the plain-CG view of the
            // deviation diagnostic, persisted for the figure data only.
            records.push(("cg_diag".into(), run_fcg(&IdentityPreconditioner, max_iter_classical)));

            InstanceRuns { records }
        })
        .collect();

    // Persist records and assemble per-method statistics.
    let mut methods: Vec<MethodResult> = Vec::new();
    let method_names: Vec<String> = instances[0]
        .records
        .iter()
        .map(|(name, _)| name.clone())
        .collect();
    for name in &method_names {
        let mut record_files = Vec::new();
        let mut per_instance: Vec<Option<&ConvergenceRecord>> = Vec::new();
        for (t, inst) in instances.iter().enumerate() {
            let rec = inst
                .records
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, r)| r.as_ref());
            if let (Some(dir), Some(r)) = (out_dir, rec) {
                let rel = format!("records/{name}_i{t:02}.csv");
                io::write_record_csv(&dir.join(&rel), r)?;
                record_files.push(rel);
            }
            per_instance.push(rec);
        }
        let stats = config
            .thresholds
            .iter()
            .map(|&tau| {
                let counts: Vec<Option<usize>> = per_instance
                    .iter()
                    .map(|rec| rec.and_then(|r| iterations_to_threshold(r, tau)))
                    .collect();
                stat_for(tau, counts)
            })
            .collect();
        methods.push(MethodResult { method: name.clone(), stats, record_files });
    }

    let report = BenchReport {
        dataset: config.dataset,
        train_grid: config.train_grid,
        test_grid: config.test_grid,
        n_test: config.n_test,
        thresholds: config.thresholds.clone(),
        checkpoint_used: checkpoint.is_some(),
        methods,
        config_text: config.to_text(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(dir.join("report.md"), render_markdown(std::slice::from_ref(&report)))?;
        fs::write(dir.join("config.resolved"), &report.config_text)?;
    }
    Ok(report)
}

/// Markdown comparison table(s); several reports render side by side.
pub fn render_markdown(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    for report in reports {
        out.push_str(&format!(
            "## {} | train grid {} | test grid {} | {} instances\n\n",
            report.dataset, report.train_grid, report.test_grid, report.n_test
        ));
        out.push_str("| method |");
        for tau in &report.thresholds {
            out.push_str(&format!(" {tau:.0e} |"));
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in &report.thresholds {
            out.push_str("---|");
        }
        out.push('\n');
        for m in &report.methods {
            if m.method == "cg_diag" {
                continue;
            }
            if m.method == "no_fcg" && !report.checkpoint_used {
                continue;
            }
            out.push_str(&format!("| {} |", m.method));
            for s in &m.stats {
                match s.median {
                    Some(v) => {
                        if s.not_converged > 0 {
                            out.push_str(&format!(
                                " {v:.0} ({}/{} nc) |",
                                s.not_converged,
                                s.counts.len()
                            ));
                        } else {
                            out.push_str(&format!(" {v:.0} |"));
                        }
                    }
                    None => out.push_str(" not converged |"),
                }
            }
            out.push('\n');
        }
        if !report.checkpoint_used {
            out.push_str("| no_fcg | (skipped: no checkpoint) |\n");
        }
        out.push('\n');
    }
    out
}

/// Median per-iteration series across the record CSVs of one method.
fn median_series(records: &[Vec<(f64, Option<f64>)>]) -> Vec<(f64, Option<f64>)> {
    let longest = records.iter().map(|r| r.len()).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let mut rels: Vec<f64> = records.iter().filter_map(|r| r.get(i).map(|x| x.0)).collect();
            rels.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rel = rels[rels.len() / 2];
            let mut epss: Vec<f64> = records
                .iter()
                .filter_map(|r| r.get(i).and_then(|x| x.1))
                .collect();
            epss.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let eps = (!epss.is_empty()).then(|| epss[epss.len() / 2]);
            (rel, eps)
        })
        .collect()
}

fn parse_record_csv(path: &Path) -> Result<Vec<(f64, Option<f64>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 5 {
            continue;
        }
        let rel: f64 = cols[1]
            .parse()
            .map_err(|_| Error::InvalidData(format!("bad rel_residual in {}", path.display())))?;
        let eps = if cols[3].is_empty() { None } else { cols[3].parse::<f64>().ok() };
        rows.push((rel, eps));
    }
    Ok(rows)
}

/// Load reports, render the combined markdown table, and emit per-method
/// figure CSVs (`iter, median_rel_residual, median_epsilon`).
pub fn build_report(report_paths: &[PathBuf], out_dir: &Path) -> Result<String> {
    if report_paths.is_empty() {
        return Err(Error::InvalidConfig("no report paths given".into()));
    }
    let mut reports = Vec::new();
    for path in report_paths {
        if !path.exists() {
            return Err(Error::InvalidData(format!("missing report {}", path.display())));
        }
        let report: BenchReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        reports.push((path.clone(), report));
    }
    fs::create_dir_all(out_dir)?;
    let markdown = render_markdown(&reports.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
    fs::write(out_dir.join("tables.md"), &markdown)?;

    for (ri, (path, report)) in reports.iter().enumerate() {
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &report.methods {
            if m.record_files.is_empty() {
                continue;
            }
            let mut parsed = Vec::new();
            for rel in &m.record_files {
                parsed.push(parse_record_csv(&base.join(rel))?);
            }
            let series = median_series(&parsed);
            let mut csv = String::from("iter,median_rel_residual,median_epsilon\n");
            for (i, (rel, eps)) in series.iter().enumerate() {
                let eps_s = eps.map(|e| format!("{e:e}")).unwrap_or_default();
                csv.push_str(&format!("{i},{rel:e},{eps_s}\n"));
            }
            fs::write(out_dir.join(format!("fig_r{ri}_{}.csv", m.method)), csv)?;
        }
    }
    Ok(markdown)
}

// ---------------------------------------------------------------------------
// Command-level drivers shared by the CLI and tests
// ---------------------------------------------------------------------------

/// Generate and persist a training dataset; returns the dataset directory.
pub fn cmd_gen_data(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let problems = config.train_problems()?;
    let samples = match config.train.sampling {
        SamplingKind::Krylov => generate_krylov_dataset(&problems, config.train.m_cg, config.seed)?,
        SamplingKind::Random => {
            generate_random_dataset(&problems, config.train.m_cg, config.seed)?
        }
    };
    let dir = out_dir.join("dataset");
    io::save_dataset(
        &dir,
        config.dataset,
        config.train.sampling,
        config.seed,
        &problems,
        &samples,
    )?;
    Ok(dir)
}

/// Train on a persisted dataset; returns the checkpoint directory.
pub fn cmd_train(config: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let (meta, problems, samples) = io::load_dataset(data_dir)?;
    if meta.grid != config.train_grid {
        return Err(Error::InvalidConfig(format!(
            "dataset grid {} does not match configured train_grid {}",
            meta.grid, config.train_grid
        )));
    }
    if meta.kind != config.dataset {
        return Err(Error::InvalidConfig(format!(
            "dataset kind {} does not match configured dataset {}",
            meta.kind, config.dataset
        )));
    }
    let (params, curve) = train(&problems, &samples, &config.train)?;
    let ckpt = out_dir.join("checkpoint");
    io::save_checkpoint(
        &ckpt,
        &params,
        &io::CheckpointMeta {
            width: params.width,
            modes: params.modes,
            layers: params.layers.len(),
            in_channels: params.in_ch,
            grid: config.train_grid,
            dataset_kind: config.dataset,
            train_config: config.train.clone(),
        },
    )?;
    io::write_curve_csv(&out_dir.join("training_curve.csv"), &curve)?;
    Ok(ckpt)
}

/// Run the benchmark, optionally with a trained checkpoint.
pub fn cmd_bench(
    config: &ExperimentConfig,
    checkpoint_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<BenchReport> {
    let checkpoint = match checkpoint_dir {
        Some(dir) => {
            let (meta, params) = io::load_checkpoint(dir)?;
            if meta.dataset_kind != config.dataset {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint was trained on {}, bench configured for {}",
                    meta.dataset_kind, config.dataset
                )));
            }
            Some(Arc::new(params))
        }
        None => None,
    };
    run_bench(config, checkpoint, Some(out_dir))
}
