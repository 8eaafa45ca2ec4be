//! Random elliptic problem instances on the unit square.
//!
//! A problem is a coefficient field `a`, a right-hand side `f`, and the
//! sparse SPD system obtained by a 5-point finite-difference discretization
//! of `-div(a grad u) = f` with homogeneous Dirichlet boundary data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

/// Deterministic seed mixer (splitmix64), used to derive independent
/// sub-seeds from one experiment seed.
#[inline]
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform interior grid on (0,1)^2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDescriptor {
    /// Interior points per dimension; total unknowns are `n^2`.
    pub n: usize,
}

impl GridDescriptor {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("grid n must be >= 2, got {n}")));
        }
        Ok(Self { n })
    }

    /// Mesh spacing 1/(n+1).
    #[inline]
    pub fn h<T: Scalar>(&self) -> T {
        T::one() / T::lit((self.n + 1) as f64)
    }

    #[inline]
    pub fn unknowns(&self) -> usize {
        self.n * self.n
    }
}

/// Parameters of a random trigonometric polynomial field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigPolySpec {
    pub n1: usize,
    pub n2: usize,
    pub alpha: f64,
    pub offset: f64,
    pub seed: u64,
}

impl TrigPolySpec {
    pub fn new(n1: usize, n2: usize, alpha: f64, offset: f64, seed: u64) -> Self {
        Self { n1, n2, alpha, offset, seed }
    }
}

/// A real field sampled at the interior grid nodes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    pub n: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> ScalarField<T> {
    pub fn constant(n: usize, value: T) -> Self {
        Self { n, values: vec![value; n * n] }
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }
}

/// One sampled PDE instance: coefficients, right-hand side, assembled system.
#[derive(Debug, Clone)]
pub struct ProblemInstance<T> {
    pub grid: GridDescriptor,
    pub a: ScalarField<T>,
    pub f: ScalarField<T>,
    pub matrix: CsrMatrix<T>,
}

impl<T: Scalar> ProblemInstance<T> {
    /// Right-hand side flattened to the unknown ordering (row-major).
    #[inline]
    pub fn rhs(&self) -> &[T] {
        &self.f.values
    }
}

/// Sample the real part of
/// `sum_{m,n} c_mn exp(2 pi i (m x1 + n x2)) / (1+m+n)^alpha` at the interior
/// nodes `x = (i h, j h)`, plus the configured offset. The complex
/// coefficients have independent standard-normal real and imaginary
/// parts, drawn in (m, n) row-major order.
pub fn sample_trig_field<T: Scalar>(spec: &TrigPolySpec, grid: &GridDescriptor) -> ScalarField<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m1 = spec.n1 + 1;
    let m2 = spec.n2 + 1;

    // Decayed coefficients d_mn = c_mn / (1+m+n)^alpha.
    let mut d_re = vec![T::zero(); m1 * m2];
    let mut d_im = vec![T::zero(); m1 * m2];
    for m in 0..m1 {
        for nn in 0..m2 {
            let u: T = T::standard_normal(&mut rng);
            let v: T = T::standard_normal(&mut rng);
            let decay = T::lit(1.0 / ((1 + m + nn) as f64).powf(spec.alpha));
            d_re[m * m2 + nn] = u * decay;
            d_im[m * m2 + nn] = v * decay;
        }
    }

    let n = grid.n;
    let h: T = grid.h();
    let two_pi = T::lit(2.0) * T::PI();

    // Phase tables e1[i][m] = exp(2 pi i m x1_i), e2[j][nn] likewise.
    let table = |count: usize| -> (Vec<T>, Vec<T>) {
        let mut cs = vec![T::zero(); n * count];
        let mut sn = vec![T::zero(); n * count];
        for i in 0..n {
            let x = T::lit((i + 1) as f64) * h;
            for m in 0..count {
                let phase = two_pi * T::lit(m as f64) * x;
                cs[i * count + m] = phase.cos();
                sn[i * count + m] = phase.sin();
            }
        }
        (cs, sn)
    };
    let (c1, s1) = table(m1);
    let (c2, s2) = table(m2);

    let offset = T::lit(spec.offset);
    let mut values = vec![T::zero(); n * n];
    let mut row_re = vec![T::zero(); m2];
    let mut row_im = vec![T::zero(); m2];
    for i in 0..n {
        // Contract the m index first: row[nn] = sum_m d_mn * e1[i][m].
        for nn in 0..m2 {
            row_re[nn] = T::zero();
            row_im[nn] = T::zero();
        }
        for m in 0..m1 {
            let (cr, ci) = (c1[i * m1 + m], s1[i * m1 + m]);
            for nn in 0..m2 {
                let (dr, di) = (d_re[m * m2 + nn], d_im[m * m2 + nn]);
                row_re[nn] += dr * cr - di * ci;
                row_im[nn] += dr * ci + di * cr;
            }
        }
        for j in 0..n {
            let mut acc = T::zero();
            for nn in 0..m2 {
                // Re( row * exp(2 pi i nn x2) )
                acc += row_re[nn] * c2[j * m2 + nn] - row_im[nn] * s2[j * m2 + nn];
            }
            values[i * n + j] = acc + offset;
        }
    }
    ScalarField { n, values }
}

/// Assemble the 5-point stencil for `-div(a grad u)` with zero Dirichlet
/// boundary. Off-diagonal coupling toward an interior neighbour is
/// `-mean(a_here, a_there)/h^2`; ghost values of `a` outside the boundary
/// equal the adjacent interior value; the diagonal is the negated sum of the
/// four couplings. Symmetric by construction.
pub fn assemble_fdm<T: Scalar>(a: &ScalarField<T>, grid: &GridDescriptor) -> Result<CsrMatrix<T>> {
    let n = grid.n;
    assert_eq!(a.n, n, "coefficient field does not match grid");
    let amin = a.min();
    if amin <= T::zero() {
        return Err(Error::NonPositiveCoefficient {
            min: amin.to_f64().unwrap_or(f64::NAN),
        });
    }
    let h: T = grid.h();
    let inv_h2 = T::one() / (h * h);
    let half = T::lit(0.5);

    let unknowns = n * n;
    let mut row_ptr = Vec::with_capacity(unknowns + 1);
    let mut col_idx = Vec::with_capacity(5 * unknowns);
    let mut vals = Vec::with_capacity(5 * unknowns);
    row_ptr.push(0);

    for i in 0..n {
        for j in 0..n {
            let here = a.at(i, j);
            // Coupling per direction; boundary-facing directions use the
            // ghost convention a_ghost = a_here.
            let coup = |other: Option<T>| -> T {
                let there = other.unwrap_or(here);
                half * (here + there) * inv_h2
            };
            let north = coup((i > 0).then(|| a.at(i - 1, j)));
            let west = coup((j > 0).then(|| a.at(i, j - 1)));
            let east = coup((j + 1 < n).then(|| a.at(i, j + 1)));
            let south = coup((i + 1 < n).then(|| a.at(i + 1, j)));
            let diag = north + west + east + south;

            let idx = i * n + j;
            if i > 0 {
                col_idx.push(idx - n);
                vals.push(-north);
            }
            if j > 0 {
                col_idx.push(idx - 1);
                vals.push(-west);
            }
            col_idx.push(idx);
            vals.push(diag);
            if j + 1 < n {
                col_idx.push(idx + 1);
                vals.push(-east);
            }
            if i + 1 < n {
                col_idx.push(idx + n);
                vals.push(-south);
            }
            row_ptr.push(col_idx.len());
        }
    }
    CsrMatrix::from_csr(unknowns, unknowns, row_ptr, col_idx, vals)
}

/// Trig-polynomial parameters used by both problem families.
pub const FIELD_N1: usize = 5;
pub const FIELD_N2: usize = 5;
pub const FIELD_ALPHA: f64 = 2.0;
/// Additive offset of the diffusion coefficient field.
pub const DIFFUSION_OFFSET: f64 = 10.0;
/// Positivity floor that triggers a resample of the coefficient field.
pub const COEFF_MIN: f64 = 1e-3;

const SALT_RHS: u64 = 0x01;
const SALT_COEFF: u64 = 0x02;

/// Constant-coefficient instance: `a = 1`, `f` a random trig polynomial.
pub fn make_poisson_instance<T: Scalar>(grid: &GridDescriptor, seed: u64) -> Result<ProblemInstance<T>> {
    let a = ScalarField::constant(grid.n, T::one());
    let f_spec = TrigPolySpec::new(FIELD_N1, FIELD_N2, FIELD_ALPHA, 0.0, mix_seed(seed, SALT_RHS));
    let f = sample_trig_field(&f_spec, grid);
    let matrix = assemble_fdm(&a, grid)?;
    Ok(ProblemInstance { grid: *grid, a, f, matrix })
}

/// Variable-coefficient instance: `a` a random trig polynomial shifted by 10
/// (resampled with the next derived seed while `min(a) <= 1e-3`), `f` a
/// random trig polynomial.
pub fn make_diffusion_instance<T: Scalar>(grid: &GridDescriptor, seed: u64) -> Result<ProblemInstance<T>> {
    let mut a = None;
    for attempt in 0..100u64 {
        let spec = TrigPolySpec::new(
            FIELD_N1,
            FIELD_N2,
            FIELD_ALPHA,
            DIFFUSION_OFFSET,
            mix_seed(seed, SALT_COEFF + (attempt << 8)),
        );
        let field = sample_trig_field::<T>(&spec, grid);
        if field.min() > T::lit(COEFF_MIN) {
            a = Some(field);
            break;
        }
    }
    let a = a.ok_or(Error::ResampleLimitExceeded { attempts: 100 })?;
    let f_spec = TrigPolySpec::new(FIELD_N1, FIELD_N2, FIELD_ALPHA, 0.0, mix_seed(seed, SALT_RHS));
    let f = sample_trig_field(&f_spec, grid);
    let matrix = assemble_fdm(&a, grid)?;
    Ok(ProblemInstance { grid: *grid, a, f, matrix })
}

/// Which problem family an experiment draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Poisson,
    Diffusion,
}

impl ProblemKind {
    pub fn make<T: Scalar>(&self, grid: &GridDescriptor, seed: u64) -> Result<ProblemInstance<T>> {
        match self {
            ProblemKind::Poisson => make_poisson_instance(grid, seed),
            ProblemKind::Diffusion => make_diffusion_instance(grid, seed),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProblemKind::Poisson => write!(f, "poisson"),
            ProblemKind::Diffusion => write!(f, "diffusion"),
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(ProblemKind::Poisson),
            "diffusion" => Ok(ProblemKind::Diffusion),
            other => Err(Error::InvalidConfig(format!("unknown dataset kind '{other}'"))),
        }
    }
}
