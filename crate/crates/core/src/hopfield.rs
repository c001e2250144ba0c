//! Classical Hopfield networks: Hebb, Storkey and pseudo-inverse writing
//! rules with clamped asynchronous retrieval.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patterns::{Domain, PatternBatch};

#[derive(Debug, Error, PartialEq)]
pub enum HopfieldError {
    #[error("patterns must be bipolar")]
    NotBipolar,
    #[error("cannot store an empty batch")]
    Empty,
    #[error("pseudo-inverse rule needs N <= d, got N = {n}, d = {d}")]
    TooMany { n: usize, d: usize },
    #[error("state has dimension {got}, network has {expected}")]
    DimMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, HopfieldError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Hebb,
    Storkey,
    Pinv,
}

impl Rule {
    pub const ALL: [Rule; 3] = [Rule::Hebb, Rule::Storkey, Rule::Pinv];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Hebb => "hebb",
            Rule::Storkey => "storkey",
            Rule::Pinv => "pinv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HopfieldNet {
    dim: usize,
    /// Row-major `d × d`, symmetric.
    weights: Vec<f64>,
    bias: Vec<f64>,
    rule: Rule,
    /// The Gram matrix was singular and a ridge was added.
    regularized: bool,
}

impl HopfieldNet {
    pub fn zeros(dim: usize, rule: Rule) -> Self {
        HopfieldNet { dim, weights: vec![0.0; dim * dim], bias: vec![0.0; dim], rule, regularized: false }
    }

    /// Build from explicit weights and thresholds.
    pub fn from_parts(dim: usize, weights: Vec<f64>, bias: Vec<f64>, rule: Rule) -> Result<Self> {
        if weights.len() != dim * dim {
            return Err(HopfieldError::DimMismatch { expected: dim * dim, got: weights.len() });
        }
        if bias.len() != dim {
            return Err(HopfieldError::DimMismatch { expected: dim, got: bias.len() });
        }
        Ok(HopfieldNet { dim, weights, bias, rule, regularized: false })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.dim + j]
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    /// Free parameters: the upper triangle plus thresholds.
    pub fn parameter_budget(&self) -> usize {
        self.dim * (self.dim - 1) / 2 + self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    /// Local field `Σⱼ Wᵢⱼ sⱼ + bᵢ`.
    pub fn field(&self, s: &[f64], i: usize) -> f64 {
        self.row(i).iter().zip(s).map(|(w, x)| w * x).sum::<f64>() + self.bias[i]
    }

    /// Field without the self-coupling, `Σ_{j≠i} Wᵢⱼ sⱼ + bᵢ`. A flip of
    /// `sᵢ` changes the energy by `2 sᵢ` times this.
    pub fn coupling_field(&self, s: &[f64], i: usize) -> f64 {
        self.field(s, i) - self.w(i, i) * s[i]
    }

    /// `Wx` without thresholds.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| self.row(i).iter().zip(x).map(|(w, v)| w * v).sum()).collect()
    }

    /// `−½ sᵀWs − bᵀs`.
    pub fn energy(&self, s: &[f64]) -> Result<f64> {
        self.check(s)?;
        let ws = self.apply(s);
        let quad: f64 = ws.iter().zip(s).map(|(a, b)| a * b).sum();
        let lin: f64 = self.bias.iter().zip(s).map(|(a, b)| a * b).sum();
        Ok(-0.5 * quad - lin)
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dim {
            return Err(HopfieldError::DimMismatch { expected: self.dim, got: s.len() });
        }
        Ok(())
    }
}

fn check_batch(x: &PatternBatch) -> Result<()> {
    if x.domain() != Domain::Bipolar || x.as_slice().iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(HopfieldError::NotBipolar);
    }
    if x.is_empty() {
        return Err(HopfieldError::Empty);
    }
    Ok(())
}

/// `W = (1/N) Σ ξξᵀ` with zero diagonal.
pub fn hebb_write(x: &PatternBatch) -> Result<HopfieldNet> {
    check_batch(x)?;
    let d = x.dim();
    let mut net = HopfieldNet::zeros(d, Rule::Hebb);
    let inv = 1.0 / x.len() as f64;
    for p in x.rows() {
        for i in 0..d {
            let row = &mut net.weights[i * d..(i + 1) * d];
            let s = inv * p[i];
            for (w, &pj) in row.iter_mut().zip(p) {
                *w += s * pj;
            }
        }
    }
    for i in 0..d {
        net.weights[i * d + i] = 0.0;
    }
    Ok(net)
}

/// Storkey's incremental rule, patterns in batch order.
pub fn storkey_write(x: &PatternBatch) -> Result<HopfieldNet> {
    check_batch(x)?;
    let d = x.dim();
    let mut net = HopfieldNet::zeros(d, Rule::Storkey);
    let inv = 1.0 / d as f64;
    let mut next = vec![0.0; d * d];
    for p in x.rows() {
        // Full local fields hᵢ = Σₖ Wᵢₖ ξₖ; the diagonal stays zero.
        let h = net.apply(p);
        for i in 0..d {
            for j in 0..d {
                next[i * d + j] = if i == j {
                    0.0
                } else {
                    net.weights[i * d + j] + inv * (p[i] * p[j] - p[i] * h[j] - h[i] * p[j])
                };
            }
        }
        std::mem::swap(&mut net.weights, &mut next);
    }
    Ok(net)
}

/// Ridge added to a singular Gram matrix.
pub const PINV_RIDGE: f64 = 1e-8;

/// Projection `W = Ξᵀ(ΞΞᵀ)⁻¹Ξ` onto the span of the patterns, diagonal kept.
pub fn pinv_write(x: &PatternBatch) -> Result<HopfieldNet> {
    check_batch(x)?;
    let (n, d) = (x.len(), x.dim());
    if n > d {
        return Err(HopfieldError::TooMany { n, d });
    }
    let xi = DMatrix::from_row_slice(n, d, x.as_slice());
    let gram = &xi * xi.transpose();
    let (solved, regularized) = match gram.clone().cholesky() {
        Some(c) if c.l().diagonal().iter().all(|&v| v > 1e-6) => (c.solve(&xi), false),
        _ => {
            let ridge = gram + DMatrix::identity(n, n) * PINV_RIDGE;
            let inv = ridge.clone().cholesky().map(|c| c.solve(&xi)).unwrap_or_else(|| {
                ridge.pseudo_inverse(0.0).expect("non-negative epsilon") * &xi
            });
            (inv, true)
        }
    };
    let w = xi.transpose() * solved;
    let mut net = HopfieldNet::zeros(d, Rule::Pinv);
    for i in 0..d {
        for j in 0..d {
            // Average the triangles so W is exactly symmetric.
            net.weights[i * d + j] = 0.5 * (w[(i, j)] + w[(j, i)]);
        }
    }
    net.regularized = regularized;
    Ok(net)
}

pub fn write(rule: Rule, x: &PatternBatch) -> Result<HopfieldNet> {
    match rule {
        Rule::Hebb => hebb_write(x),
        Rule::Storkey => storkey_write(x),
        Rule::Pinv => pinv_write(x),
    }
}

/// Residual `‖Wξ − ξ‖∞` over all patterns.
pub fn fixed_point_residual(net: &HopfieldNet, x: &PatternBatch) -> f64 {
    x.rows()
        .flat_map(|p| net.apply(p).into_iter().zip(p).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadOutcome {
    pub state: Vec<f64>,
    pub sweeps: usize,
    /// The last sweep changed nothing.
    pub converged: bool,
    pub flips: usize,
    /// Largest energy change over accepted flips; never positive for
    /// symmetric nets.
    pub max_energy_step: f64,
}

/// Asynchronous retrieval; coordinates with `clamp[i]` set are never updated.
/// Units follow the sign of their field from the other units, so the
/// diagonal only shifts the energy by a constant.
pub fn read<R: Rng + ?Sized>(
    net: &HopfieldNet,
    query: &[f64],
    clamp: Option<&[bool]>,
    max_sweeps: usize,
    rng: &mut R,
) -> Result<ReadOutcome> {
    net.check(query)?;
    if let Some(c) = clamp {
        if c.len() != net.dim {
            return Err(HopfieldError::DimMismatch { expected: net.dim, got: c.len() });
        }
    }
    let mut s = query.to_vec();
    let mut order: Vec<usize> = (0..net.dim).filter(|&i| clamp.map_or(true, |c| !c[i])).collect();
    let mut out = ReadOutcome { state: Vec::new(), sweeps: 0, converged: false, flips: 0, max_energy_step: f64::NEG_INFINITY };
    while out.sweeps < max_sweeps {
        order.shuffle(rng);
        out.sweeps += 1;
        let mut changed = false;
        for &i in &order {
            let h = net.coupling_field(&s, i);
            let next = if h > 0.0 {
                1.0
            } else if h < 0.0 {
                -1.0
            } else {
                s[i]
            };
            if next != s[i] {
                let de = 2.0 * s[i] * h;
                out.max_energy_step = out.max_energy_step.max(de);
                s[i] = next;
                out.flips += 1;
                changed = true;
            }
        }
        if !changed {
            out.converged = true;
            break;
        }
    }
    out.state = s;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[&[f64]]) -> PatternBatch {
        PatternBatch::from_rows(Domain::Bipolar, &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hebb_single_pattern() {
        let xi = [1.0, -1.0, -1.0, 1.0, 1.0];
        let net = hebb_write(&batch(&[&xi])).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 0.0 } else { xi[i] * xi[j] };
                assert_eq!(net.w(i, j), expect);
            }
        }
        let r = read(&net, &xi, None, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.state, xi);
        assert!(r.converged);
        // −½ Σ_{i≠j} 1 = −d(d−1)/2
        assert_eq!(net.energy(&xi).unwrap(), -10.0);
    }

    #[test]
    fn hebb_two_orthogonal_patterns_by_hand() {
        let a = [1.0, 1.0, 1.0, 1.0];
        let b = [1.0, -1.0, 1.0, -1.0];
        let net = hebb_write(&batch(&[&a, &b])).unwrap();
        #[rustfmt::skip]
        let expect = [
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
        ];
        assert_eq!(net.weights(), &expect);
    }

    #[test]
    fn storkey_first_pattern_is_scaled_hebb() {
        let xi = [1.0, -1.0, 1.0, 1.0];
        let s = storkey_write(&batch(&[&xi])).unwrap();
        let h = hebb_write(&batch(&[&xi])).unwrap();
        for (a, b) in s.weights().iter().zip(h.weights()) {
            assert_eq!(*a, b / 4.0);
        }
    }

    #[test]
    fn storkey_two_patterns_by_hand() {
        let s = storkey_write(&batch(&[&[1.0, 1.0, -1.0], &[1.0, -1.0, 1.0]])).unwrap();
        let expect = [[0.0, -2.0 / 9.0, 2.0 / 9.0], [-2.0 / 9.0, 0.0, -2.0 / 3.0], [2.0 / 9.0, -2.0 / 3.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((s.w(i, j) - expect[i][j]).abs() < 1e-15, "{i} {j}");
            }
        }
    }

    #[test]
    fn storkey_is_deterministic_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = PatternBatch::random_bipolar(6, 16, &mut rng);
        let a = storkey_write(&x).unwrap();
        assert_eq!(a, storkey_write(&x).unwrap());
        for i in 0..16 {
            assert_eq!(a.w(i, i), 0.0);
            for j in 0..16 {
                assert!((a.w(i, j) - a.w(j, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pinv_of_orthogonal_patterns() {
        let a = [1.0, 1.0, 1.0, 1.0];
        let b = [1.0, -1.0, 1.0, -1.0];
        let net = pinv_write(&batch(&[&a, &b])).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = (a[i] * a[j] + b[i] * b[j]) / 4.0;
                assert!((net.w(i, j) - expect).abs() < 1e-15);
            }
        }
        assert!(!net.regularized());
    }

    #[test]
    fn pinv_singular_gram_uses_ridge() {
        let a = [1.0, -1.0, 1.0, -1.0];
        let net = pinv_write(&batch(&[&a, &a])).unwrap();
        assert!(net.regularized());
        let wa = net.apply(&a);
        for (x, y) in wa.iter().zip(&a) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_net_keeps_query() {
        let net = HopfieldNet::zeros(6, Rule::Hebb);
        let q = [1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        let r = read(&net, &q, None, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.state, q);
        assert_eq!(r.flips, 0);
        assert_eq!(net.energy(&q).unwrap(), 0.0);
    }

    #[test]
    fn half_flipped_single_pattern_clamped_recovers() {
        // Exhaustive over every half-sized corruption set of a d = 8 pattern.
        let xi = [1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, 1.0];
        let net = hebb_write(&batch(&[&xi])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for bits in 0u32..256 {
            if bits.count_ones() != 4 {
                continue;
            }
            let mask: Vec<bool> = (0..8).map(|i| bits >> i & 1 == 1).collect();
            let q: Vec<f64> = xi.iter().zip(&mask).map(|(&v, &m)| if m { -v } else { v }).collect();
            let clamp: Vec<bool> = mask.iter().map(|m| !m).collect();
            let r = read(&net, &q, Some(&clamp), 100, &mut rng).unwrap();
            assert_eq!(r.state, xi);
        }
    }

    #[test]
    fn stored_pattern_is_energy_minimum() {
        let xi = [1.0, -1.0, -1.0, 1.0, 1.0];
        let net = hebb_write(&batch(&[&xi])).unwrap();
        let e = net.energy(&xi).unwrap();
        for i in 0..5 {
            let mut s = xi;
            s[i] = -s[i];
            assert!(e <= net.energy(&s).unwrap());
        }
    }

    #[test]
    fn rejects_bad_input() {
        let x = PatternBatch::new(Domain::UnitBox, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(hebb_write(&x), Err(HopfieldError::NotBipolar));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = PatternBatch::random_bipolar(5, 4, &mut rng);
        assert_eq!(pinv_write(&x), Err(HopfieldError::TooMany { n: 5, d: 4 }));
        let net = HopfieldNet::zeros(4, Rule::Hebb);
        assert!(net.energy(&[1.0]).is_err());
        assert_eq!(net.parameter_budget(), 10);
    }
}
