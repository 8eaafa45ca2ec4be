//! Quadrature-backed analysis/synthesis for orthogonal polynomial bases.
//!
//! For basis functions `p_i` with weight `w`, synthesis is `f = S c` with
//! `S[j][i] = p_i(x_j)`, and analysis is `c = D^{-1} S^T (f ⊙ w)` where `D`
//! is the diagonal of discrete norms. When the quadrature integrates
//! products of basis functions exactly, analysis is a left inverse of
//! synthesis. This module carries the Gauss-Legendre instance; the trained
//! operator path uses the Fourier instance instead.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Nodes, weights, basis values and discrete norms of one 1D basis.
#[derive(Debug, Clone)]
pub struct QuadratureBasis<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
    /// `basis[i][j] = p_i(nodes[j])`.
    pub basis: Vec<Vec<T>>,
    /// Discrete norms `D_ii = sum_j w_j p_i(x_j)^2`.
    pub norms: Vec<T>,
}

impl<T: Scalar> QuadratureBasis<T> {
    /// Legendre polynomials with Gauss-Legendre quadrature on [-1, 1].
    /// Exact for polynomial degree up to `2 * n_nodes - 1`, so
    /// `n_nodes >= n_basis` makes analysis a left inverse of synthesis.
    pub fn gauss_legendre(n_basis: usize, n_nodes: usize) -> Result<Self> {
        if n_basis < 1 || n_nodes < n_basis {
            return Err(Error::InvalidConfig(
                "need n_nodes >= n_basis >= 1 for Gauss-Legendre".into(),
            ));
        }
        let (nodes, weights) = gauss_legendre_rule::<T>(n_nodes);
        let mut basis = vec![vec![T::zero(); n_nodes]; n_basis];
        for (j, &x) in nodes.iter().enumerate() {
            let mut prev = T::one();
            let mut cur = x;
            for i in 0..n_basis {
                let val = match i {
                    0 => T::one(),
                    1 => x,
                    _ => {
                        // (i) P_i = ((2i-1) x P_{i-1} - (i-1) P_{i-2}) / i
                        let i_t = T::lit(i as f64);
                        let next = (T::lit((2 * i - 1) as f64) * x * cur
                            - T::lit((i - 1) as f64) * prev)
                            / i_t;
                        prev = cur;
                        cur = next;
                        next
                    }
                };
                basis[i][j] = if i < 2 { val } else { cur };
            }
        }
        let norms = basis
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&weights)
                    .map(|(&p, &w)| w * p * p)
                    .fold(T::zero(), |a, b| a + b)
            })
            .collect();
        Ok(Self { nodes, weights, basis, norms })
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// `c = D^{-1} S^T (f ⊙ w)`.
    pub fn analysis(&self, f: &[T]) -> Result<Vec<T>> {
        if f.len() != self.n_nodes() {
            return Err(Error::DimensionMismatch {
                context: "quadrature analysis",
                expected: self.n_nodes(),
                got: f.len(),
            });
        }
        Ok(self
            .basis
            .iter()
            .zip(&self.norms)
            .map(|(row, &h)| {
                let mut acc = T::zero();
                for j in 0..f.len() {
                    acc += row[j] * f[j] * self.weights[j];
                }
                acc / h
            })
            .collect())
    }

    /// `f = S c` evaluated at the quadrature nodes.
    pub fn synthesis(&self, c: &[T]) -> Result<Vec<T>> {
        if c.len() > self.n_basis() {
            return Err(Error::DimensionMismatch {
                context: "quadrature synthesis",
                expected: self.n_basis(),
                got: c.len(),
            });
        }
        let mut f = vec![T::zero(); self.n_nodes()];
        for (i, &ci) in c.iter().enumerate() {
            for j in 0..f.len() {
                f[j] += self.basis[i][j] * ci;
            }
        }
        Ok(f)
    }
}

/// Gauss-Legendre nodes and weights by Newton iteration on `P_n`.
fn gauss_legendre_rule<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let n_f = n as f64;
    for i in 0..n.div_ceil(2) {
        // Chebyshev-flavored initial guess for the i-th positive root.
        let mut x = T::lit((std::f64::consts::PI * (i as f64 + 0.75) / (n_f + 0.5)).cos());
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let step = p / d;
            x = x - step;
            if step.abs() <= T::lit(1e-15) {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = T::lit(2.0) / ((T::one() - x * x) * dp * dp);
        nodes[i] = -x;
        weights[i] = w;
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        let mid = n / 2;
        nodes[mid] = T::zero();
        let (_, d) = legendre_with_derivative(n, T::zero());
        weights[mid] = T::lit(2.0) / (d * d);
    }
    (nodes, weights)
}

fn legendre_with_derivative<T: Scalar>(n: usize, x: T) -> (T, T) {
    let mut p_prev = T::one();
    let mut p = x;
    if n == 0 {
        return (T::one(), T::zero());
    }
    for k in 2..=n {
        let k_t = T::lit(k as f64);
        let next = (T::lit((2 * k - 1) as f64) * x * p - T::lit((k - 1) as f64) * p_prev) / k_t;
        p_prev = p;
        p = next;
    }
    // P'_n(x) = n (x P_n - P_{n-1}) / (x^2 - 1)
    let d = T::lit(n as f64) * (x * p - p_prev) / (x * x - T::one());
    (p, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rule_integrates_polynomials_exactly() {
        let (nodes, weights) = gauss_legendre_rule::<f64>(8);
        // integral of x^k over [-1,1]
        for k in 0..=15usize {
            let got: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| w * x.powi(k as i32))
                .sum();
            let want = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
            assert!((got - want).abs() < 1e-13, "degree {k}: {got} vs {want}");
        }
    }

    #[test]
    fn analysis_left_inverts_synthesis() {
        let basis = QuadratureBasis::<f64>::gauss_legendre(12, 16).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        let c: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = basis.synthesis(&c).unwrap();
        let c2 = basis.analysis(&f).unwrap();
        for i in 0..12 {
            assert!((c[i] - c2[i]).abs() < 1e-12, "slot {i}: {} vs {}", c[i], c2[i]);
        }
    }

    #[test]
    fn discrete_norms_match_analytic_legendre_norms() {
        let basis = QuadratureBasis::<f64>::gauss_legendre(10, 12).unwrap();
        for i in 0..10 {
            let want = 2.0 / (2.0 * i as f64 + 1.0);
            assert!((basis.norms[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adjointness_under_quadrature_inner_product() {
        // <S c, f>_w == <c, D * analysis(f)>
        let basis = QuadratureBasis::<f64>::gauss_legendre(9, 14).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let c: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..14).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sc = basis.synthesis(&c).unwrap();
        let lhs: f64 = sc
            .iter()
            .zip(&f)
            .zip(&basis.weights)
            .map(|((&a, &b), &w)| a * b * w)
            .sum();
        let af = basis.analysis(&f).unwrap();
        let rhs: f64 = c
            .iter()
            .zip(&af)
            .zip(&basis.norms)
            .map(|((&ci, &ai), &d)| ci * d * ai)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn truncation_projection_idempotent() {
        let basis = QuadratureBasis::<f64>::gauss_legendre(5, 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let f: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let once = basis.synthesis(&basis.analysis(&f).unwrap()).unwrap();
        let twice = basis.synthesis(&basis.analysis(&once).unwrap()).unwrap();
        for j in 0..12 {
            assert!((once[j] - twice[j]).abs() < 1e-12);
        }
    }
}
