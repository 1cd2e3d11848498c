//! Spline-based hash head: B-spline basis expansion per input, learnable
//! coefficients per (output, input) edge, summation, tanh squashing and sign
//! binarization with a straight-through backward pass.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Evaluate all B-spline basis functions of `degree` over `knots` at `x`.
///
/// The valid domain is `[knots[degree], knots[len - degree - 1]]`; `x` outside it
/// is clamped to the nearest boundary.
pub fn bspline_basis(x: f64, knots: &[f64], degree: usize) -> Result<Vec<f64>> {
    validate_knots(knots, degree)?;
    let nb = knots.len() - degree - 1;
    let mut basis = vec![0.0; nb];
    let mut lower = vec![0.0; nb + 1];
    cox_de_boor(x, knots, degree, &mut basis, &mut lower);
    Ok(basis)
}

fn validate_knots(knots: &[f64], degree: usize) -> Result<()> {
    if knots.len() < degree + 2 {
        return domain_err(format!(
            "{} knots cannot support degree {degree}",
            knots.len()
        ));
    }
    if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
        return domain_err("knot vector must be finite and strictly increasing");
    }
    Ok(())
}

/// Fills `basis` (degree `degree`) and `lower` (degree `degree - 1`, one longer).
/// Returns whether `x` was clamped onto the domain boundary.
fn cox_de_boor(x: f64, t: &[f64], degree: usize, basis: &mut [f64], lower: &mut [f64]) -> bool {
    let m = t.len();
    let (lo, hi) = (t[degree], t[m - degree - 1]);
    let clamped = !(lo..=hi).contains(&x);
    let x = x.clamp(lo, hi);

    // Degree 0 over all m-1 intervals; the right domain end belongs to the last interval.
    let mut work = vec![0.0; m - 1];
    let span = if x >= hi {
        m - degree - 2
    } else {
        (0..m - 1).find(|&j| t[j] <= x && x < t[j + 1]).unwrap_or(m - 2)
    };
    work[span] = 1.0;
    for d in 1..=degree {
        if d == degree {
            lower[..m - d].copy_from_slice(&work[..m - d]);
        }
        for j in 0..m - 1 - d {
            let left = (x - t[j]) / (t[j + d] - t[j]) * work[j];
            let right = (t[j + d + 1] - x) / (t[j + d + 1] - t[j + 1]) * work[j + 1];
            work[j] = left + right;
        }
    }
    basis.copy_from_slice(&work[..m - degree - 1]);
    clamped
}

/// Uniform knot grid over `[-range, range]`, extended by `degree` knots on each side.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    config: KanConfig,
    knots: Vec<f64>,
}

/// Shape of the spline grid shared by every edge of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanConfig {
    pub range: f64,
    pub grid_size: usize,
    pub degree: usize,
}

impl Default for KanConfig {
    fn default() -> Self {
        KanConfig {
            range: 2.0,
            grid_size: 8,
            degree: 3,
        }
    }
}

impl SplineGrid {
    pub fn new(config: KanConfig) -> Result<Self> {
        if !(config.range > 0.0) || config.grid_size == 0 {
            return domain_err(format!("invalid spline grid {config:?}"));
        }
        let h = 2.0 * config.range / config.grid_size as f64;
        let knots: Vec<f64> = (0..=config.grid_size + 2 * config.degree)
            .map(|m| -config.range + (m as f64 - config.degree as f64) * h)
            .collect();
        validate_knots(&knots, config.degree)?;
        Ok(SplineGrid { config, knots })
    }

    pub fn config(&self) -> KanConfig {
        self.config
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.config.grid_size + self.config.degree
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let nb = self.num_basis();
        let (mut b, mut db) = (vec![0.0; nb], vec![0.0; nb]);
        self.eval_into(x, &mut b, &mut db);
        b
    }

    /// Basis values and their derivatives in `x`. The derivative is zero where the
    /// input was clamped.
    pub fn eval_into(&self, x: f64, basis: &mut [f64], dbasis: &mut [f64]) {
        let p = self.config.degree;
        let t = &self.knots;
        let mut lower = vec![0.0; basis.len() + 1];
        let clamped = cox_de_boor(x, t, p, basis, &mut lower);
        if clamped || p == 0 {
            dbasis.iter_mut().for_each(|d| *d = 0.0);
            return;
        }
        let pf = p as f64;
        for (j, d) in dbasis.iter_mut().enumerate() {
            *d = pf / (t[j + p] - t[j]) * lower[j] - pf / (t[j + p + 1] - t[j + 1]) * lower[j + 1];
        }
    }
}

/// One spline layer mapping an embedding to `out_bits` continuous code entries.
#[derive(Clone, Debug)]
pub struct KanLayer {
    grid: Arc<SplineGrid>,
    /// `[out_bits, in_dim, num_basis]`
    coeffs: Tensor,
}

impl KanLayer {
    pub fn new(grid: Arc<SplineGrid>, coeffs: Tensor) -> Result<Self> {
        let s = coeffs.shape();
        if s.len() != 3 || s[2] != grid.num_basis() {
            return shape_err(format!(
                "coefficients {s:?} do not match a grid with {} basis functions",
                grid.num_basis()
            ));
        }
        Ok(KanLayer { grid, coeffs })
    }

    /// Gaussian coefficients scaled so the pre-squash sum has roughly unit variance.
    pub fn init_coeffs(in_dim: usize, out_bits: usize, grid: &SplineGrid, rng: &mut impl Rng) -> Tensor {
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let nb = grid.num_basis();
        let data = (0..out_bits * in_dim * nb).map(|_| normal.sample(rng)).collect();
        Tensor::new(vec![out_bits, in_dim, nb], data).expect("coefficient shape")
    }

    pub fn in_dim(&self) -> usize {
        self.coeffs.shape()[1]
    }

    pub fn out_bits(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn grid(&self) -> &Arc<SplineGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    /// `out[o] = tanh(Σ_i Σ_j c[o][i][j] · B_j(x_i))`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return shape_err(format!("kan input of length {} for in_dim {}", x.len(), self.in_dim()));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let cv = tape.constant(self.coeffs.clone());
        let out = kan_forward(&mut tape, xv, cv, &self.grid)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Differentiable spline layer followed by tanh: `[N, in] -> [N, out]` in `[-1, 1]`.
pub fn kan_forward(tape: &mut Tape, x: Var, coeffs: Var, grid: &Arc<SplineGrid>) -> Result<Var> {
    let s = tape.kan(x, coeffs, grid)?;
    Ok(tape.tanh(s))
}

/// Elementwise sign with the tie `sign(0) = +1`.
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Forward sign binarization with identity backward, recorded on the tape.
pub fn binarize_ste(tape: &mut Tape, continuous: Var) -> Var {
    tape.sign_ste(continuous)
}

/// A single code: continuous squashed values and their signs.
#[derive(Clone, Debug, PartialEq)]
pub struct HashCode {
    continuous: Vec<f64>,
    signs: Vec<f64>,
}

impl HashCode {
    pub fn from_continuous(continuous: Vec<f64>) -> Self {
        let signs = continuous.iter().map(|&v| sign(v)).collect();
        HashCode { continuous, signs }
    }

    pub fn bits(&self) -> usize {
        self.signs.len()
    }

    pub fn continuous(&self) -> &[f64] {
        &self.continuous
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Cardinal cubic B-spline on unit spacing, support [0, 4).
    fn cardinal_cubic(u: f64) -> f64 {
        match u {
            u if (0.0..1.0).contains(&u) => u.powi(3) / 6.0,
            u if (1.0..2.0).contains(&u) => (-3.0 * u.powi(3) + 12.0 * u * u - 12.0 * u + 4.0) / 6.0,
            u if (2.0..3.0).contains(&u) => (3.0 * u.powi(3) - 24.0 * u * u + 60.0 * u - 44.0) / 6.0,
            u if (3.0..4.0).contains(&u) => (4.0 - u).powi(3) / 6.0,
            _ => 0.0,
        }
    }

    #[test]
    fn degree_zero_is_interval_indicator() {
        let knots = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(bspline_basis(0.5, &knots, 0).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(bspline_basis(1.0, &knots, 0).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(bspline_basis(2.7, &knots, 0).unwrap(), vec![0.0, 0.0, 1.0]);
        // right domain end stays in the last interval
        assert_eq!(bspline_basis(3.0, &knots, 0).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn cubic_matches_closed_form_on_uniform_knots() {
        let grid = SplineGrid::new(KanConfig::default()).unwrap();
        let h = 0.5;
        for &x in &[-2.0, -1.37, -0.25, 0.0, 0.6, 1.999] {
            let b = grid.eval(x);
            for (j, &v) in b.iter().enumerate() {
                let expected = cardinal_cubic((x - grid.knots()[j]) / h);
                assert!((v - expected).abs() < 1e-12, "x={x} j={j}: {v} vs {expected}");
            }
        }
        // x = 0.6 sits in [0.5, 1.0): u = (0.6 - 0.5)/0.5 = 0.2
        let b = grid.eval(0.6);
        let u: f64 = 0.2;
        let hand = [
            (1.0 - u).powi(3) / 6.0,
            (3.0 * u.powi(3) - 6.0 * u * u + 4.0) / 6.0,
            (-3.0 * u.powi(3) + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
            u.powi(3) / 6.0,
        ];
        // nonzero basis functions are j = 5..=8 for the span starting at knot index 8
        for (k, &v) in hand.iter().enumerate() {
            assert!((b[5 + k] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_of_unity_for_low_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for degree in 0..=3 {
            let grid = SplineGrid::new(KanConfig { degree, ..KanConfig::default() }).unwrap();
            for _ in 0..1000 {
                let x: f64 = rng.random_range(-2.0..=2.0);
                let b = grid.eval(x);
                assert!(b.iter().all(|&v| v >= 0.0));
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn inputs_outside_domain_are_clamped() {
        let grid = SplineGrid::new(KanConfig::default()).unwrap();
        assert_eq!(grid.eval(5.0), grid.eval(2.0));
        assert_eq!(grid.eval(-9.0), grid.eval(-2.0));
        let nb = grid.num_basis();
        let (mut b, mut db) = (vec![0.0; nb], vec![0.0; nb]);
        grid.eval_into(3.0, &mut b, &mut db);
        assert!(db.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let grid = SplineGrid::new(KanConfig::default()).unwrap();
        let nb = grid.num_basis();
        for &x in &[-1.8, -0.3, 0.77, 1.4] {
            let (mut b, mut db) = (vec![0.0; nb], vec![0.0; nb]);
            grid.eval_into(x, &mut b, &mut db);
            let (p, m) = (grid.eval(x + 1e-6), grid.eval(x - 1e-6));
            for j in 0..nb {
                let fd = (p[j] - m[j]) / 2e-6;
                assert!((fd - db[j]).abs() < 1e-6, "x={x} j={j}");
            }
        }
    }

    #[test]
    fn malformed_knots_are_rejected() {
        assert!(bspline_basis(0.0, &[0.0, 1.0, 1.0, 2.0], 1).is_err());
        assert!(bspline_basis(0.0, &[0.0, 1.0], 3).is_err());
        assert!(bspline_basis(0.0, &[0.0, f64::NAN, 2.0], 0).is_err());
    }

    #[test]
    fn zero_coefficients_give_zero_output() {
        let grid = Arc::new(SplineGrid::new(KanConfig::default()).unwrap());
        let layer = KanLayer::new(grid.clone(), Tensor::zeros(&[4, 3, grid.num_basis()])).unwrap();
        assert_eq!(layer.forward(&[0.3, -1.0, 7.0]).unwrap(), vec![0.0; 4]);
    }

    /// Solve a small dense system by Gaussian elimination with partial pivoting.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            x[r] = (b[r] - (r + 1..n).map(|c| a[r][c] * x[c]).sum::<f64>()) / a[r][r];
        }
        x
    }

    #[test]
    fn fitted_linear_coefficients_reproduce_tanh_of_linear() {
        let grid = Arc::new(SplineGrid::new(KanConfig::default()).unwrap());
        let nb = grid.num_basis();
        let slope = 0.7;
        let samples: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
        let rows: Vec<Vec<f64>> = samples.iter().map(|&x| grid.eval(x)).collect();
        let mut ata = vec![vec![0.0; nb]; nb];
        let mut atb = vec![0.0; nb];
        for (row, &x) in rows.iter().zip(&samples) {
            for i in 0..nb {
                atb[i] += row[i] * slope * x;
                for j in 0..nb {
                    ata[i][j] += row[i] * row[j];
                }
            }
        }
        let c = solve(ata, atb);
        let layer = KanLayer::new(grid, Tensor::new(vec![1, 1, nb], c).unwrap()).unwrap();
        for &x in &[-1.9, -0.4, 0.0, 1.3] {
            let y = layer.forward(&[x]).unwrap()[0];
            assert!((y - (slope * x).tanh()).abs() < 1e-9, "x={x}: {y}");
        }
    }

    #[test]
    fn kan_output_is_continuous() {
        let grid = Arc::new(SplineGrid::new(KanConfig::default()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = KanLayer::new(grid.clone(), KanLayer::init_coeffs(3, 5, &grid, &mut rng)).unwrap();
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.5..2.5)).collect();
            let xe: Vec<f64> = x.iter().map(|v| v + 1e-7).collect();
            let (a, b) = (layer.forward(&x).unwrap(), layer.forward(&xe).unwrap());
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn kan_golden_output() {
        let grid = Arc::new(SplineGrid::new(KanConfig::default()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let layer = KanLayer::new(grid.clone(), KanLayer::init_coeffs(4, 8, &grid, &mut rng)).unwrap();
        let out = layer.forward(&[0.5, -1.25, 1.9, 0.0]).unwrap();
        let checksum: f64 = out.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
        assert!(out.iter().all(|v| v.abs() <= 1.0));
        assert!((checksum - KAN_GOLDEN).abs() < 1e-9, "checksum {checksum:.15}");
    }

    const KAN_GOLDEN: f64 = 6.362136073639116;

    #[test]
    fn ste_backward_is_exact_identity() {
        use crate::numerics::ParamStore;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut p = ParamStore::new();
        p.insert("u", Tensor::from_vec(u));
        let (_, g) = crate::numerics::forward_backward(&p, |t, v| {
            let s = binarize_ste(t, v["u"]);
            let w = t.constant(Tensor::from_vec(upstream.clone()));
            let prod = t.mul(s, w)?;
            Ok(t.sum(prod))
        })
        .unwrap();
        assert_eq!(g["u"].data(), upstream.as_slice());
    }

    #[test]
    fn ste_composed_squared_error_gradient() {
        use crate::numerics::ParamStore;
        let u = vec![0.4, -0.2, 0.0, -0.9];
        let target = vec![1.0, 1.0, -1.0, 0.5];
        let mut p = ParamStore::new();
        p.insert("u", Tensor::from_vec(u.clone()));
        let (_, g) = crate::numerics::forward_backward(&p, |t, v| {
            let s = binarize_ste(t, v["u"]);
            let tv = t.constant(Tensor::from_vec(target.clone()));
            let d = t.sub(s, tv)?;
            let sq = t.mul(d, d)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        let expected: Vec<f64> = u.iter().zip(&target).map(|(&x, &y)| 2.0 * (sign(x) - y)).collect();
        assert_eq!(g["u"].data(), expected.as_slice());
    }

    #[test]
    fn kan_coefficient_gradient_matches_finite_differences() {
        use crate::numerics::{finite_difference_check, ParamStore};
        let grid = Arc::new(SplineGrid::new(KanConfig::default()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = ParamStore::new();
        p.insert("coeffs", KanLayer::init_coeffs(3, 4, &grid, &mut rng));
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.9..1.9)).collect();
        let err = finite_difference_check(&p, 1e-5, |t, v| {
            let xv = t.constant(Tensor::new(vec![2, 3], x.clone())?);
            let out = kan_forward(t, xv, v["coeffs"], &grid)?;
            Ok(t.sum(out))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sign_tie_breaks_to_plus_one() {
        let code = HashCode::from_continuous(vec![0.3, -0.7, 0.0]);
        assert_eq!(code.signs(), &[1.0, -1.0, 1.0]);
        assert_eq!(code.bits(), 3);
    }
}
