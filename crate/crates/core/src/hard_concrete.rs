//! The stretched-rectified Binary Concrete ("Hard Concrete") distribution
//! over per-unit mask entries.
//!
//! A Binary Concrete sample with location `gamma` and temperature `tau` is
//! `s = sigmoid((log u - log(1 - u) + gamma) / tau)` for uniform `u`. The
//! stretch maps `s` affinely onto `(l, r)` with `l <= 0 < 1 <= r`, and
//! rectification clamps to the unit interval, which collapses the mass over
//! `(l, 0]` onto the point `0` and the mass near the top onto the upper cap.
//!
//! This implementation supports the half-open variant `[0, 1)`: samples are
//! capped at `1 - 2^-20` instead of exactly 1, so only a true zero fully
//! masks a unit and no entry ever claims to be an exact one. Since the mask
//! enters multiplicatively, the cap is behaviorally negligible.
//!
//! Closed forms used throughout (logistic noise `L = log u - log(1-u)`):
//!
//! ```text
//! P(z > 0)   = P(s > -l/(r-l))       = sigmoid(gamma - tau * ln(-l / r))
//! P(z = cap) = P(s >= (cap-l)/(r-l)) = sigmoid(gamma - tau * ln((cap-l)/(r-cap)))
//! P(0 < z < cap) = P(z > 0) - P(z = cap)
//! ```
//!
//! Both are validated against Monte Carlo in the tests.

use rand::Rng;

use crate::array::RealArray;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, NodeId};

/// Upper rectification value of the half-open variant: `1 - 2^-20`.
pub const UPPER_CAP: f64 = 1.0 - 9.5367431640625e-7;

/// Default temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
/// Default stretch interval.
pub const DEFAULT_STRETCH: (f64, f64) = (-0.1, 1.1);

/// Location logits plus the fixed distribution shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HardConcreteParams {
    /// Per-unit location logits, length `k`. Larger means more open.
    pub gamma: RealArray,
    /// Temperature `tau > 0`.
    pub temperature: f64,
    /// Lower stretch bound `l <= 0`.
    pub stretch_lo: f64,
    /// Upper stretch bound `r >= 1`.
    pub stretch_hi: f64,
}

impl HardConcreteParams {
    pub fn new(gamma: RealArray, temperature: f64, lo: f64, hi: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !(lo <= 0.0 && 1.0 <= hi) {
            return Err(Error::InvalidConfig(format!(
                "stretch must satisfy l <= 0 < 1 <= r, got ({lo}, {hi})"
            )));
        }
        if gamma.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "HardConcreteParams::new".into(),
                expected: vec![0],
                actual: gamma.shape().to_vec(),
            });
        }
        Ok(Self {
            gamma,
            temperature,
            stretch_lo: lo,
            stretch_hi: hi,
        })
    }

    /// Default shape with every unit's location set so that
    /// `P(z != 0) = 0.5` initially: `gamma = tau * ln(-l / r)`.
    pub fn init_half_open(k: usize) -> Self {
        let (lo, hi) = DEFAULT_STRETCH;
        let gamma0 = DEFAULT_TEMPERATURE * (-lo / hi).ln();
        Self {
            gamma: RealArray::vector(vec![gamma0; k]).unwrap(),
            temperature: DEFAULT_TEMPERATURE,
            stretch_lo: lo,
            stretch_hi: hi,
        }
    }

    pub fn num_units(&self) -> usize {
        self.gamma.len()
    }

    /// Location shift below which the stretched sample crosses zero.
    fn zero_threshold(&self) -> f64 {
        self.temperature * (-self.stretch_lo / self.stretch_hi).ln()
    }

    /// Location shift above which the stretched sample reaches the cap.
    fn cap_threshold(&self) -> f64 {
        let t = (UPPER_CAP - self.stretch_lo) / (self.stretch_hi - UPPER_CAP);
        self.temperature * t.ln()
    }

    /// Closed-form `P(z_j != 0)` per unit.
    pub fn prob_nonzero(&self) -> Vec<f64> {
        let shift = self.zero_threshold();
        self.gamma.values().iter().map(|&g| sigmoid(g - shift)).collect()
    }

    /// Closed-form `P(z_j = cap)` per unit.
    pub fn prob_cap(&self) -> Vec<f64> {
        let shift = self.cap_threshold();
        self.gamma.values().iter().map(|&g| sigmoid(g - shift)).collect()
    }

    /// Expected number of nonzero mask entries: `sum_j P(z_j != 0)`.
    pub fn expected_c0(&self) -> f64 {
        self.prob_nonzero().iter().sum()
    }

    /// Expected mass strictly between the point masses:
    /// `sum_j P(0 < z_j < cap)`.
    pub fn interior_mass(&self) -> f64 {
        let shift0 = self.zero_threshold();
        let shift1 = self.cap_threshold();
        self.gamma
            .values()
            .iter()
            .map(|&g| sigmoid(g - shift0) - sigmoid(g - shift1))
            .sum()
    }

    /// Draw one relaxed mask. `u` is drawn strictly inside `(0, 1)`.
    pub fn sample(&self, rng: &mut impl Rng) -> MaskSample {
        let u: Vec<f64> = (0..self.num_units())
            .map(|_| rng.gen_range(1e-12..1.0 - 1e-12))
            .collect();
        self.sample_with_noise(&u)
    }

    /// Deterministic sample from given uniform noise.
    pub fn sample_with_noise(&self, u: &[f64]) -> MaskSample {
        debug_assert_eq!(u.len(), self.num_units());
        let mut s = Vec::with_capacity(u.len());
        let mut z = Vec::with_capacity(u.len());
        for (&uj, &g) in u.iter().zip(self.gamma.values()) {
            let logit = (uj.ln() - (1.0 - uj).ln() + g) / self.temperature;
            let sj = sigmoid(logit);
            let stretched = sj * (self.stretch_hi - self.stretch_lo) + self.stretch_lo;
            s.push(sj);
            z.push(stretched.clamp(0.0, UPPER_CAP));
        }
        MaskSample {
            u: u.to_vec(),
            s,
            z,
        }
    }

    /// Per-unit `E[z_j]` estimated by Monte Carlo with a fixed seed.
    pub fn expected_value_mc(&self, seed: u64, samples: usize) -> Vec<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; self.num_units()];
        for _ in 0..samples {
            let sample = self.sample(&mut rng);
            for (a, zj) in acc.iter_mut().zip(&sample.z) {
                *a += zj;
            }
        }
        for a in acc.iter_mut() {
            *a /= samples as f64;
        }
        acc
    }

    /// Binary mask: unit `j` is kept iff `E[z_j] > 0.5` (strict), with the
    /// expectation estimated by [`Self::expected_value_mc`]. Deterministic
    /// given the seed.
    pub fn discretize(&self, seed: u64, samples: usize) -> Vec<bool> {
        discretize_from_expected(&self.expected_value_mc(seed, samples.max(10_000)))
    }

    // ── Recorded (differentiable) builders ───────────────────────

    /// Record `z = clamp(sigmoid((noise_logit + gamma)/tau) * (r-l) + l, 0, cap)`.
    /// `noise_logit` carries `log u - log(1-u)` as a constant or input, so
    /// gradients flow to `gamma` only (the reparameterization path).
    pub fn sample_node(&self, g: &mut Graph, gamma: NodeId, noise_logit: NodeId) -> Result<NodeId> {
        let shifted = g.add(noise_logit, gamma)?;
        let scaled = g.scale(shifted, 1.0 / self.temperature);
        let s = g.sigmoid(scaled);
        let stretched = g.scale(s, self.stretch_hi - self.stretch_lo);
        let moved = g.shift(stretched, self.stretch_lo);
        Ok(g.clamp(moved, 0.0, UPPER_CAP))
    }

    /// Record the closed-form expected C0 as a scalar node.
    pub fn expected_c0_node(&self, g: &mut Graph, gamma: NodeId) -> NodeId {
        let shifted = g.shift(gamma, -self.zero_threshold());
        let p = g.sigmoid(shifted);
        g.sum(p)
    }

    /// Record the closed-form interior mass as a scalar node.
    pub fn interior_mass_node(&self, g: &mut Graph, gamma: NodeId) -> Result<NodeId> {
        let s0 = g.shift(gamma, -self.zero_threshold());
        let p0 = g.sigmoid(s0);
        let s1 = g.shift(gamma, -self.cap_threshold());
        let p1 = g.sigmoid(s1);
        let diff = g.sub(p0, p1)?;
        Ok(g.sum(diff))
    }
}

/// Discretization rule shared by all callers: strictly greater than one half.
pub fn discretize_from_expected(expected: &[f64]) -> Vec<bool> {
    expected.iter().map(|&e| e > 0.5).collect()
}

/// The logistic noise logit `log u - log(1 - u)` for each uniform draw.
pub fn noise_logits(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&uj| uj.ln() - (1.0 - uj).ln()).collect()
}

/// One relaxed mask draw.
#[derive(Debug, Clone)]
pub struct MaskSample {
    /// Uniform noise in `(0, 1)^k`.
    pub u: Vec<f64>,
    /// Binary Concrete values before stretch-and-rectify.
    pub s: Vec<f64>,
    /// Rectified mask values in `[0, cap]^k`.
    pub z: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn params(gammas: &[f64], tau: f64) -> HardConcreteParams {
        HardConcreteParams::new(
            RealArray::vector(gammas.to_vec()).unwrap(),
            tau,
            DEFAULT_STRETCH.0,
            DEFAULT_STRETCH.1,
        )
        .unwrap()
    }

    #[test]
    fn saturated_low_location_samples_zero() {
        let p = params(&[-30.0], 1.0);
        for step in 0..99 {
            let u = 0.01 + 0.98 * step as f64 / 98.0;
            let sample = p.sample_with_noise(&[u]);
            assert_eq!(sample.z[0], 0.0, "u={u}");
        }
    }

    #[test]
    fn midpoint_noise_at_zero_location() {
        let p = params(&[0.0], 1.0);
        let sample = p.sample_with_noise(&[0.5]);
        assert!((sample.s[0] - 0.5).abs() < 1e-15);
        // clamp(0.5 * 1.2 - 0.1, 0, cap) = 0.5
        assert!((sample.z[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_high_location_samples_cap() {
        let p = params(&[30.0], 1.0);
        for step in 0..99 {
            let u = 0.01 + 0.98 * step as f64 / 98.0;
            let sample = p.sample_with_noise(&[u]);
            assert_eq!(sample.z[0], UPPER_CAP, "u={u}");
        }
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let gamma = RealArray::vector(vec![0.0]).unwrap();
        assert!(HardConcreteParams::new(gamma.clone(), 0.0, -0.1, 1.1).is_err());
        assert!(HardConcreteParams::new(gamma, -1.0, -0.1, 1.1).is_err());
    }

    #[test]
    fn prob_nonzero_limits() {
        let p = params(&[-80.0, 80.0], 0.5);
        let probs = p.prob_nonzero();
        assert!(probs[0] < 1e-12);
        assert!(probs[1] > 1.0 - 1e-12);
    }

    #[test]
    fn prob_nonzero_matches_monte_carlo() {
        let n = 100_000;
        for tau in [0.5] {
            for gamma in [-2.0, -1.0, 0.0, 1.0, 2.0] {
                let p = params(&[gamma], tau);
                let closed = p.prob_nonzero()[0];
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let mut hits = 0usize;
                for _ in 0..n {
                    if p.sample(&mut rng).z[0] != 0.0 {
                        hits += 1;
                    }
                }
                let mc = hits as f64 / n as f64;
                assert!(
                    (closed - mc).abs() < 0.01,
                    "gamma={gamma} tau={tau}: closed {closed} vs mc {mc}"
                );
            }
        }
    }

    #[test]
    fn half_probability_location() {
        // By the logistic symmetry, gamma = tau * ln(-l/r) gives P = 0.5.
        let tau = 0.7;
        let gamma0 = tau * (0.1_f64 / 1.1).ln();
        let p = params(&[gamma0], tau);
        assert!((p.prob_nonzero()[0] - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let hits = (0..n).filter(|_| p.sample(&mut rng).z[0] != 0.0).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn expected_c0_sums_probabilities() {
        let p = params(&[-80.0; 4], 0.5);
        assert!(p.expected_c0() < 1e-10);

        // k = 10 units all at P(nonzero) = 0.3
        let tau = 0.5;
        let gamma = tau * (0.1_f64 / 1.1).ln() + (0.3_f64 / 0.7).ln();
        let p = params(&[gamma; 10], tau);
        assert!((p.prob_nonzero()[0] - 0.3).abs() < 1e-12);
        assert!((p.expected_c0() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn expected_c0_gradient_matches_finite_differences() {
        let p = params(&[-0.4, 0.2, 1.1], 0.5);
        let mut g = Graph::new();
        let gamma = g.input("gamma", vec![3]);
        let c0 = p.expected_c0_node(&mut g, gamma);
        let bound: HashMap<String, RealArray> =
            [("gamma".to_string(), p.gamma.clone())].into();
        let err = finite_difference_check(&g, &bound, c0, gamma, "gamma", 1e-5).unwrap();
        assert!(err < 1e-4, "fd error {err}");
    }

    #[test]
    fn interior_mass_matches_monte_carlo() {
        let n = 100_000;
        for gamma in [-1.0, 0.0, 1.0] {
            let p = params(&[gamma], 0.5);
            let closed_interior = p.interior_mass();
            let closed_cap = p.prob_cap()[0];
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            let mut interior = 0usize;
            let mut cap = 0usize;
            for _ in 0..n {
                let z = p.sample(&mut rng).z[0];
                if z == UPPER_CAP {
                    cap += 1;
                } else if z > 0.0 {
                    interior += 1;
                }
            }
            assert!(
                (closed_interior - interior as f64 / n as f64).abs() < 0.01,
                "gamma={gamma}: interior {closed_interior} vs mc {}",
                interior as f64 / n as f64
            );
            assert!((closed_cap - cap as f64 / n as f64).abs() < 0.01);
            // interior = nonzero - cap
            assert!(
                (closed_interior - (p.prob_nonzero()[0] - closed_cap)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn interior_mass_vanishes_at_low_temperature() {
        // Interior mass shrinks linearly with tau away from the threshold.
        let masses: Vec<f64> = [0.5, 0.1, 0.01, 0.002]
            .iter()
            .map(|&tau| params(&[0.3], tau).interior_mass())
            .collect();
        for w in masses.windows(2) {
            assert!(w[1] < w[0], "{masses:?}");
        }
        let p = params(&[0.3], 0.002);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let n = 100_000;
        let interior = (0..n)
            .filter(|_| {
                let z = p.sample(&mut rng).z[0];
                z > 0.0 && z < UPPER_CAP
            })
            .count();
        assert!((interior as f64 / n as f64) < 0.01);
        assert!(p.interior_mass() < 0.01);

        let low = params(&[-80.0; 3], 0.5);
        assert!(low.interior_mass() < 1e-10);
    }

    #[test]
    fn ordering_invariant_holds_on_a_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let k = rng.gen_range(1..6);
            let gammas: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let tau = rng.gen_range(0.1..2.0);
            let p = params(&gammas, tau);
            let c0 = p.expected_c0();
            let interior = p.interior_mass();
            assert!(interior >= -1e-12);
            assert!(c0 >= interior - 1e-12);
            assert!(c0 <= k as f64 + 1e-12);
        }
    }

    #[test]
    fn sample_monotone_in_location_for_fixed_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let u = rng.gen_range(0.01..0.99);
            let tau = rng.gen_range(0.2..1.5);
            let g1 = rng.gen_range(-4.0..4.0);
            let g2 = g1 + rng.gen_range(0.0..3.0);
            let z1 = params(&[g1], tau).sample_with_noise(&[u]).z[0];
            let z2 = params(&[g2], tau).sample_with_noise(&[u]).z[0];
            assert!(z2 >= z1, "u={u} tau={tau} g1={g1} g2={g2}");
        }
    }

    #[test]
    fn prob_nonzero_monotone_in_location() {
        let gammas: Vec<f64> = (0..40).map(|i| -4.0 + 0.2 * i as f64).collect();
        let p = params(&gammas, 0.5);
        let probs = p.prob_nonzero();
        for w in probs.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn discretize_saturated_and_deterministic() {
        let p = params(&[-30.0, 30.0], 0.5);
        let m1 = p.discretize(77, 10_000);
        let m2 = p.discretize(77, 10_000);
        assert_eq!(m1, vec![false, true]);
        assert_eq!(m1, m2);
    }

    #[test]
    fn discretize_tie_is_zero() {
        assert_eq!(
            discretize_from_expected(&[0.5, 0.5 + 1e-12, 0.49]),
            vec![false, true, false]
        );
    }

    #[test]
    fn reparameterized_gradient_matches_finite_differences() {
        // d/dgamma E[f(z)] for smooth f, common random numbers, 1e5 samples.
        let k = 3;
        let p = params(&[-0.5, 0.1, 0.8], 0.5);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let noise: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.gen_range(1e-12..1.0 - 1e-12)).collect())
            .collect();

        let f = |z: &[f64]| -> f64 { z.iter().map(|&v| (v - 0.3) * (v - 0.3)).sum() };

        // analytic: mean of per-sample reparameterized gradients
        let mut analytic = vec![0.0; k];
        for u in &noise {
            let mut g = Graph::new();
            let gamma = g.input("gamma", vec![k]);
            let logits = RealArray::vector(noise_logits(u)).unwrap();
            let noise_node = g.constant(logits);
            let z = p.sample_node(&mut g, gamma, noise_node).unwrap();
            let shifted = g.shift(z, -0.3);
            let sq = g.mul(shifted, shifted).unwrap();
            let loss = g.sum(sq);
            let bound: HashMap<String, RealArray> =
                [("gamma".to_string(), p.gamma.clone())].into();
            let eval = g.evaluate(&bound).unwrap();
            let grads = eval.backward(loss, &[gamma]).unwrap();
            for (a, gv) in analytic.iter_mut().zip(grads.get(gamma)) {
                *a += gv;
            }
        }
        for a in analytic.iter_mut() {
            *a /= n as f64;
        }

        // finite differences on the same noise set
        let h = 1e-3;
        for coord in 0..k {
            let mean_f = |delta: f64| -> f64 {
                let mut gs = p.gamma.values().to_vec();
                gs[coord] += delta;
                let shifted = params(&gs, 0.5);
                noise.iter().map(|u| f(&shifted.sample_with_noise(u).z)).sum::<f64>()
                    / n as f64
            };
            let fd = (mean_f(h) - mean_f(-h)) / (2.0 * h);
            let rel = (analytic[coord] - fd).abs() / (analytic[coord].abs() + 1e-8);
            assert!(
                rel < 1e-3,
                "coord {coord}: analytic {} vs fd {fd}, rel {rel}",
                analytic[coord]
            );
        }
    }
}
