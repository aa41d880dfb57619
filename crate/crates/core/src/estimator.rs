//! Weighted least squares, chi-square bad-data detection and LNR scrubbing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dcmodel::DcJacobian;
use crate::{Error, Result};

/// Independent Gaussian sensor noise, `R = diag(sigma^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma: DVector<f64>,
}

impl NoiseModel {
    pub fn new(sigma: DVector<f64>) -> Result<Self> {
        if let Some(k) = sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::contract(format!("sigma[{k}] = {} is not positive", sigma[k])));
        }
        Ok(NoiseModel { sigma })
    }

    pub fn uniform(m: usize, sigma: f64) -> Result<Self> {
        Self::new(DVector::from_element(m, sigma))
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> NoiseModel {
        NoiseModel { sigma: self.sigma.select_rows(rows) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Clean,
    BadData,
}

#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    /// Weighted sum of squared residuals `J(x̂)`.
    pub wsse: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    /// `|r_i| / sigma_i`.
    pub normalized_residuals: DVector<f64>,
    pub dof: usize,
    pub state: DVector<f64>,
    pub residual: DVector<f64>,
}

impl DetectionOutcome {
    /// Index and value of the largest normalized residual.
    pub fn largest_normalized(&self) -> (usize, f64) {
        self.normalized_residuals.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
    }
}

/// Inverse chi-square CDF.
pub fn chi_square_threshold(psi: usize, confidence: f64) -> Result<f64> {
    if psi == 0 {
        return Err(Error::contract("chi-square threshold needs at least one degree of freedom"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::contract(format!("confidence {confidence} is outside (0, 1)")));
    }
    let dist = ChiSquared::new(psi as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(dist.inverse_cdf(confidence))
}

/// WLS estimator for a fixed Jacobian and noise model.
///
/// Factors the whitened Jacobian `R^{-1/2} H = Q R` once; every estimate is
/// then a triangular solve, which keeps Monte Carlo loops cheap.
#[derive(Debug, Clone)]
pub struct Wls {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    h: DMatrix<f64>,
    inv_sigma: DVector<f64>,
}

impl Wls {
    pub fn new(jac: &DcJacobian, noise: &NoiseModel) -> Result<Self> {
        Self::from_matrix(jac.matrix().clone(), noise)
    }

    pub fn from_matrix(h: DMatrix<f64>, noise: &NoiseModel) -> Result<Self> {
        let (m, n) = h.shape();
        if noise.len() != m {
            return Err(Error::contract(format!("noise model has {} sensors, H has {m}", noise.len())));
        }
        if m < n {
            return Err(Error::Observability(format!("{m} sensors for {n} states")));
        }
        let inv_sigma = noise.sigma.map(|s| 1.0 / s);
        let mut hw = h.clone();
        for (mut row, w) in hw.row_iter_mut().zip(inv_sigma.iter()) {
            row *= *w;
        }
        let qr = hw.qr();
        let r = qr.r();
        let diag = r.diagonal().map(f64::abs);
        let dmax = diag.max();
        let cutoff = m as f64 * f64::EPSILON * dmax;
        if dmax == 0.0 || diag.iter().any(|d| *d <= cutoff) {
            return Err(Error::Observability("weighted Jacobian is rank deficient".into()));
        }
        Ok(Wls { q: qr.q(), r, h, inv_sigma })
    }

    pub fn sensor_count(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_count(&self) -> usize {
        self.h.ncols()
    }

    pub fn dof(&self) -> usize {
        self.sensor_count() - self.state_count()
    }

    fn check_len(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.sensor_count() {
            return Err(Error::contract(format!(
                "measurement vector has length {}, expected {}",
                z.len(),
                self.sensor_count()
            )));
        }
        Ok(())
    }

    pub fn estimate(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(z)?;
        let zw = z.component_mul(&self.inv_sigma);
        let rhs = self.q.tr_mul(&zw);
        self.r.solve_upper_triangular(&rhs).ok_or_else(|| Error::Numerical("singular triangular factor".into()))
    }

    pub fn residual(&self, z: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(z)?;
        if x.len() != self.state_count() {
            return Err(Error::contract("state vector length does not match H"));
        }
        Ok(z - &self.h * x)
    }

    /// Estimate, then test `J(x̂)` against an explicit threshold.
    pub fn detect_with_threshold(&self, z: &DVector<f64>, threshold: f64) -> Result<DetectionOutcome> {
        let state = self.estimate(z)?;
        let residual = self.residual(z, &state)?;
        let normalized = residual.component_mul(&self.inv_sigma);
        let wsse = normalized.norm_squared();
        Ok(DetectionOutcome {
            wsse,
            threshold,
            verdict: if wsse >= threshold { Verdict::BadData } else { Verdict::Clean },
            normalized_residuals: normalized.map(f64::abs),
            dof: self.dof(),
            state,
            residual,
        })
    }

    pub fn detect(&self, z: &DVector<f64>, confidence: f64) -> Result<DetectionOutcome> {
        let tau = chi_square_threshold(self.dof(), confidence)?;
        self.detect_with_threshold(z, tau)
    }
}

pub fn wls_estimate(jac: &DcJacobian, z: &DVector<f64>, noise: &NoiseModel) -> Result<DVector<f64>> {
    Wls::new(jac, noise)?.estimate(z)
}

pub fn residual(jac: &DcJacobian, z: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != jac.sensor_count() || x.len() != jac.state_count() {
        return Err(Error::contract("residual: dimension mismatch"));
    }
    Ok(z - jac.matrix() * x)
}

pub fn detect(jac: &DcJacobian, z: &DVector<f64>, noise: &NoiseModel, confidence: f64) -> Result<DetectionOutcome> {
    Wls::new(jac, noise)?.detect(z, confidence)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScrubStop {
    Clean,
    MaxRounds,
    /// Removing the next suspect would leave the states unobservable.
    Observability,
}

#[derive(Debug, Clone)]
pub struct ScrubReport {
    /// Measurements that survived, in original order.
    pub z_clean: DVector<f64>,
    /// Original indices of the surviving sensors.
    pub kept: Vec<usize>,
    /// Original indices of removed sensors, in removal order.
    pub removed: Vec<usize>,
    pub outcome: DetectionOutcome,
    pub stop: ScrubStop,
}

/// Remove the sensor with the largest normalized residual until the chi-square
/// test passes.
pub fn scrub(
    jac: &DcJacobian,
    z: &DVector<f64>,
    noise: &NoiseModel,
    confidence: f64,
    max_rounds: usize,
) -> Result<ScrubReport> {
    if z.len() != jac.sensor_count() {
        return Err(Error::contract("scrub: measurement length does not match H"));
    }
    let n = jac.state_count();
    let mut kept: Vec<usize> = (0..jac.sensor_count()).collect();
    let mut removed = Vec::new();
    let mut wls = Wls::new(jac, noise)?;
    loop {
        let zk = z.select_rows(&kept);
        let outcome = wls.detect(&zk, confidence)?;
        let stop = if outcome.verdict == Verdict::Clean {
            Some(ScrubStop::Clean)
        } else if removed.len() >= max_rounds {
            Some(ScrubStop::MaxRounds)
        } else {
            None
        };
        if let Some(stop) = stop {
            return Ok(ScrubReport { z_clean: zk, kept, removed, outcome, stop });
        }

        let (worst, _) = outcome.largest_normalized();
        let mut next = kept.clone();
        next.remove(worst);
        // Need at least one residual degree of freedom left to keep testing.
        let trial = if next.len() > n {
            Wls::from_matrix(jac.matrix().select_rows(&next), &noise.select(&next)).ok()
        } else {
            None
        };
        match trial {
            Some(w) => {
                removed.push(kept[worst]);
                kept = next;
                wls = w;
            }
            None => return Ok(ScrubReport { z_clean: zk, kept, removed, outcome, stop: ScrubStop::Observability }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casefile::fixtures;
    use crate::dcmodel::build_jacobian;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
    }

    fn case14() -> (DcJacobian, DVector<f64>, NoiseModel) {
        let case = fixtures::ieee14();
        let jac = build_jacobian(&case).unwrap();
        let x0 = jac.operating_point(&case).unwrap();
        let sigma = DVector::from_fn(54, |i, _| 0.005 + 0.0005 * (i % 7) as f64);
        (jac, x0, NoiseModel::new(sigma).unwrap())
    }

    #[test]
    fn chi_square_table_values() {
        assert_relative_eq!(chi_square_threshold(41, 0.95).unwrap(), 56.942387, epsilon = 1e-5);
        assert_relative_eq!(chi_square_threshold(1, 0.95).unwrap(), 3.841459, epsilon = 1e-5);
        assert_relative_eq!(chi_square_threshold(10, 0.99).unwrap(), 23.209251, epsilon = 1e-5);
        assert!(chi_square_threshold(0, 0.95).is_err());
        assert!(chi_square_threshold(41, 1.0).is_err());
        assert!(chi_square_threshold(41, 0.0).is_err());
        let mut last = 0.0;
        for p in [0.5, 0.9, 0.95, 0.99, 0.999, 0.999999] {
            let tau = chi_square_threshold(41, p).unwrap();
            assert!(tau > last);
            last = tau;
        }
    }

    #[test]
    fn noise_model_rejects_nonpositive_sigma() {
        assert!(NoiseModel::new(DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(NoiseModel::new(DVector::from_vec(vec![1.0, f64::NAN])).is_err());
    }

    #[test]
    fn consistent_system_recovers_state() {
        let (jac, x0, noise) = case14();
        let z = jac.evaluate(&x0).unwrap();
        let x = wls_estimate(&jac, &z, &noise).unwrap();
        assert!((&x - &x0).norm() <= 1e-10 * x0.norm());
        assert!(residual(&jac, &z, &x).unwrap().norm() < 1e-10);
    }

    #[test]
    fn residual_is_weighted_orthogonal() {
        let (jac, x0, noise) = case14();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = jac.evaluate(&x0).unwrap() + gauss(&mut rng, 54).component_mul(noise.sigma());
        let x = wls_estimate(&jac, &z, &noise).unwrap();
        let r = residual(&jac, &z, &x).unwrap();
        let w = r.component_div(&noise.sigma().map(|s| s * s));
        let g = jac.matrix().tr_mul(&w);
        assert!(g.amax() < 1e-8, "H^T R^-1 r = {}", g.amax());
    }

    #[test]
    fn estimator_is_unbiased() {
        let (jac, x0, noise) = case14();
        let wls = Wls::new(&jac, &noise).unwrap();
        let clean = jac.evaluate(&x0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 1000;
        let mut sum = DVector::zeros(13);
        let mut sq = DVector::zeros(13);
        for _ in 0..trials {
            let z = &clean + gauss(&mut rng, 54).component_mul(noise.sigma());
            let d = wls.estimate(&z).unwrap() - &x0;
            sq += d.component_mul(&d);
            sum += d;
        }
        let mean = &sum / trials as f64;
        for k in 0..13 {
            let var = sq[k] / trials as f64 - mean[k] * mean[k];
            let se = (var / trials as f64).sqrt();
            assert!(mean[k].abs() <= 3.0 * se + 1e-15, "state {k}: {} vs se {se}", mean[k]);
        }
    }

    #[test]
    fn false_alarm_rate_matches_confidence() {
        let (jac, x0, noise) = case14();
        let wls = Wls::new(&jac, &noise).unwrap();
        let clean = jac.evaluate(&x0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 4000;
        let alarms = (0..trials)
            .filter(|_| {
                let z = &clean + gauss(&mut rng, 54).component_mul(noise.sigma());
                wls.detect(&z, 0.95).unwrap().verdict == Verdict::BadData
            })
            .count();
        let rate = alarms as f64 / trials as f64;
        assert!((0.025..=0.10).contains(&rate), "false alarm rate {rate}");
    }

    #[test]
    fn stealthy_shift_keeps_wsse() {
        let (jac, x0, noise) = case14();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = jac.evaluate(&x0).unwrap() + gauss(&mut rng, 54).component_mul(noise.sigma());
        let c = gauss(&mut rng, 13) * 0.1;
        let za = &z + jac.matrix() * &c;
        let a = detect(&jac, &z, &noise, 0.95).unwrap();
        let b = detect(&jac, &za, &noise, 0.95).unwrap();
        assert_relative_eq!(a.wsse, b.wsse, max_relative = 1e-8);
        assert_relative_eq!(b.state, &a.state + &c, epsilon = 1e-8);
        assert_eq!(a.dof, 41);
    }

    #[test]
    fn single_gross_error_has_largest_normalized_residual() {
        let (jac, x0, noise) = case14();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [3, 25, 47] {
            let mut z = jac.evaluate(&x0).unwrap() + gauss(&mut rng, 54).component_mul(noise.sigma());
            z[k] += 10.0 * noise.sigma()[k];
            let out = detect(&jac, &z, &noise, 0.95).unwrap();
            assert_eq!(out.largest_normalized().0, k);
        }
    }

    #[test]
    fn scrub_removes_the_gross_error() {
        let (jac, x0, noise) = case14();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut z = jac.evaluate(&x0).unwrap() + gauss(&mut rng, 54).component_mul(noise.sigma());
        let clean = scrub(&jac, &z, &noise, 0.95, 10).unwrap();
        assert!(clean.removed.is_empty());
        assert_eq!(clean.stop, ScrubStop::Clean);

        z[30] += 25.0 * noise.sigma()[30];
        let rep = scrub(&jac, &z, &noise, 0.95, 10).unwrap();
        assert_eq!(rep.removed, vec![30]);
        assert_eq!(rep.stop, ScrubStop::Clean);
        assert_eq!(rep.outcome.verdict, Verdict::Clean);
        assert_eq!(rep.z_clean.len(), 53);
        assert_eq!(rep.outcome.dof, 40);
    }

    #[test]
    fn scrub_leaves_stealthy_attack_in_place() {
        let (jac, x0, noise) = case14();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = jac.evaluate(&x0).unwrap() + gauss(&mut rng, 54).component_mul(noise.sigma());
        let base = detect(&jac, &z, &noise, 0.95).unwrap();
        if base.verdict == Verdict::BadData {
            return;
        }
        let c = DVector::from_element(13, 0.05);
        let za = &z + jac.matrix() * &c;
        let rep = scrub(&jac, &za, &noise, 0.95, 10).unwrap();
        assert!(rep.removed.is_empty());
        assert_relative_eq!(rep.outcome.state, &base.state + &c, epsilon = 1e-8);
    }

    #[test]
    fn scrub_reports_observability_stop() {
        // Two-bus case with every meter wrong: after two removals only one
        // residual degree of freedom would remain.
        let case =
            crate::casefile::parse_case("mpc.baseMVA = 100;\nmpc.bus = [1 3 0; 2 1 0];\nmpc.branch = [1 2 0 0.1];\n")
                .unwrap();
        let jac = build_jacobian(&case).unwrap();
        let noise = NoiseModel::uniform(4, 0.01).unwrap();
        let z = DVector::from_vec(vec![1.0, 2.0, -3.0, 4.0]);
        let rep = scrub(&jac, &z, &noise, 0.95, 10).unwrap();
        assert_eq!(rep.stop, ScrubStop::Observability);
        assert_eq!(rep.kept.len(), 2);
        assert_eq!(rep.outcome.verdict, Verdict::BadData);
    }

    #[test]
    fn dimension_errors() {
        let (jac, _, noise) = case14();
        assert!(matches!(wls_estimate(&jac, &DVector::zeros(5), &noise), Err(Error::Contract(_))));
        let short = NoiseModel::uniform(3, 1.0).unwrap();
        assert!(matches!(Wls::new(&jac, &short), Err(Error::Contract(_))));
    }
}
