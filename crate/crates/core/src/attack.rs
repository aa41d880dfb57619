//! Attack construction: known Jacobian, random, and blind attacks built from
//! a measurement window (PCA, SVD, and PCA on the ALM low-rank part).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dcmodel::DcJacobian;
use crate::recover::{solve_alm, Decomposition, RpcaProblem};
use crate::subspace::{self, BasisMethod, PcaModel, RankChoice, ReducedBasis};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStrategy {
    KnownH,
    Random,
    PcaBlind,
    SvdBlind,
    AlmBlind,
}

impl AttackStrategy {
    pub const ALL: [AttackStrategy; 5] = [
        AttackStrategy::KnownH,
        AttackStrategy::Random,
        AttackStrategy::PcaBlind,
        AttackStrategy::SvdBlind,
        AttackStrategy::AlmBlind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackStrategy::KnownH => "known_h",
            AttackStrategy::Random => "random",
            AttackStrategy::PcaBlind => "pca_blind",
            AttackStrategy::SvdBlind => "svd_blind",
            AttackStrategy::AlmBlind => "alm_blind",
        }
    }
}

impl fmt::Display for AttackStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackStrategy::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack strategy '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct AttackVector {
    pub a: DVector<f64>,
    pub strategy: AttackStrategy,
    /// State shift for known-H, basis coefficients for blind attacks, the
    /// raw Gaussian draw for random attacks.
    pub c: DVector<f64>,
    pub basis_rank_used: usize,
}

impl AttackVector {
    pub fn apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.a.len() {
            return Err(Error::contract("attack and measurement lengths differ"));
        }
        Ok(z + &self.a)
    }

    /// One row per sensor: `sensor,a`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sensor", "a"])?;
        for (i, v) in self.a.iter().enumerate() {
            w.write_record(&[i.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn require_nonzero(c: &DVector<f64>) -> Result<()> {
    if c.iter().all(|v| *v == 0.0) || c.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("attack coefficients must be finite and not all zero"));
    }
    Ok(())
}

pub fn gaussian<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `a = H c`: shifts the estimate by exactly `c` without touching the residual.
pub fn attack_known_h(jac: &DcJacobian, c: &DVector<f64>) -> Result<AttackVector> {
    if c.len() != jac.state_count() {
        return Err(Error::contract(format!("c has length {}, expected {}", c.len(), jac.state_count())));
    }
    require_nonzero(c)?;
    Ok(AttackVector {
        a: jac.matrix() * c,
        strategy: AttackStrategy::KnownH,
        c: c.clone(),
        basis_rank_used: jac.state_count(),
    })
}

/// Gaussian direction scaled to `magnitude`.
pub fn attack_random<R: Rng>(m: usize, magnitude: f64, rng: &mut R) -> Result<AttackVector> {
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::contract(format!("attack magnitude {magnitude} must be positive")));
    }
    if m == 0 {
        return Err(Error::contract("attack needs at least one sensor"));
    }
    let c = gaussian(rng, m);
    let a = &c * (magnitude / c.norm());
    Ok(AttackVector { a, strategy: AttackStrategy::Random, c, basis_rank_used: 0 })
}

/// `a = H_pca c`, `z_attack = z + a`.
pub fn attack_blind(
    basis: &ReducedBasis,
    c: &DVector<f64>,
    z: &DVector<f64>,
    strategy: AttackStrategy,
) -> Result<(AttackVector, DVector<f64>)> {
    if c.len() != basis.rho {
        return Err(Error::contract(format!("c has length {}, basis rank is {}", c.len(), basis.rho)));
    }
    if z.len() != basis.h_pca.nrows() {
        return Err(Error::contract("measurement length does not match the basis"));
    }
    require_nonzero(c)?;
    let a = &basis.h_pca * c;
    let z_attack = z + &a;
    Ok((AttackVector { a, strategy, c: c.clone(), basis_rank_used: basis.rho }, z_attack))
}

/// How blind attackers pick the coefficient vector `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficients {
    /// `c ~ N(0, I)`.
    Gaussian,
    /// `c_i ~ N(0, v_i)`: each direction moves in proportion to how much the
    /// observed data moves along it.
    #[default]
    EigenWeighted,
}

/// Draw `c` for a basis of rank `rho`, scaled so that `||H_pca c|| = norm`.
pub fn draw_coefficients<R: Rng>(
    rng: &mut R,
    rho: usize,
    eigenvalues: &DVector<f64>,
    kind: Coefficients,
    norm: f64,
) -> Result<DVector<f64>> {
    if rho == 0 || rho > eigenvalues.len() {
        return Err(Error::contract(format!("rho = {rho} is out of range")));
    }
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::contract(format!("attack norm {norm} must be positive")));
    }
    loop {
        let mut c = gaussian(rng, rho);
        if kind == Coefficients::EigenWeighted {
            for (ci, v) in c.iter_mut().zip(eigenvalues.iter()) {
                *ci *= v.max(0.0).sqrt();
            }
        }
        let len = c.norm();
        if len > 0.0 {
            return Ok(c * (norm / len));
        }
    }
}

/// Settings shared by the data-driven attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlindSettings {
    pub rank: RankChoice,
    pub center: bool,
    pub coefficients: Coefficients,
    /// `||a||` of the constructed attack.
    pub norm: f64,
}

impl Default for BlindSettings {
    fn default() -> Self {
        BlindSettings {
            rank: RankChoice::Heuristic { gamma: 0.995, rule: subspace::RankRule::CumulativeFraction },
            center: true,
            coefficients: Coefficients::default(),
            norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlindAttack {
    pub attack: AttackVector,
    pub z_attack: DVector<f64>,
    pub basis: ReducedBasis,
    pub pca: PcaModel,
}

/// PCA- or SVD-based blind attack fitted directly on the window `z_window`.
pub fn attack_from_window<R: Rng>(
    z_window: &DMatrix<f64>,
    method: BasisMethod,
    settings: &BlindSettings,
    z: &DVector<f64>,
    rng: &mut R,
) -> Result<BlindAttack> {
    let (basis, pca) = subspace::blind_basis(z_window, method, settings.rank, settings.center)?;
    let c = draw_coefficients(rng, basis.rho, &pca.eigenvalues, settings.coefficients, settings.norm)?;
    let strategy = match method {
        BasisMethod::Pca => AttackStrategy::PcaBlind,
        BasisMethod::Svd => AttackStrategy::SvdBlind,
    };
    let (attack, z_attack) = attack_blind(&basis, &c, z, strategy)?;
    Ok(BlindAttack { attack, z_attack, basis, pca })
}

#[derive(Debug, Clone)]
pub struct AlmAttack {
    pub attack: AttackVector,
    pub z_attack: DVector<f64>,
    pub basis: ReducedBasis,
    pub pca: PcaModel,
    pub decomposition: Decomposition,
}

/// Blind attack robust to gross errors: separate `Z = A + E` with ALM, then
/// build the PCA attack from the low-rank part `A`.
pub fn attack_alm<R: Rng>(
    z_corrupted: &DMatrix<f64>,
    settings: &BlindSettings,
    z: &DVector<f64>,
    rng: &mut R,
) -> Result<AlmAttack> {
    let decomposition = solve_alm(&RpcaProblem::new(z_corrupted.clone()))?;
    if !decomposition.converged {
        return Err(Error::NotConverged { partial: Box::new(decomposition) });
    }
    let pca = subspace::fit_pca(&decomposition.a, settings.center)?;
    let rho = match settings.rank {
        RankChoice::Fixed(r) => r,
        RankChoice::Heuristic { gamma, rule } => subspace::select_rank(&pca.eigenvalues, gamma, rule)?,
    };
    let mut basis = subspace::reduced_basis(&pca, rho)?;
    if let RankChoice::Heuristic { gamma, .. } = settings.rank {
        basis.gamma_used = Some(gamma);
    }
    let c = draw_coefficients(rng, rho, &pca.eigenvalues, settings.coefficients, settings.norm)?;
    let (attack, z_attack) = attack_blind(&basis, &c, z, AttackStrategy::AlmBlind)?;
    Ok(AlmAttack { attack, z_attack, basis, pca, decomposition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casefile::fixtures;
    use crate::dcmodel::build_jacobian;
    use crate::estimator::{NoiseModel, Wls};
    use crate::linalg;
    use crate::measgen::{generate, GenerateSpec, StateModel};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (DcJacobian, DVector<f64>) {
        let case = fixtures::ieee14();
        let jac = build_jacobian(&case).unwrap();
        let x0 = jac.operating_point(&case).unwrap();
        (jac, x0)
    }

    #[test]
    fn known_h_unit_shift_is_a_column() {
        let (jac, _) = setup();
        for i in [0, 5, 12] {
            let mut c = DVector::zeros(13);
            c[i] = 1.0;
            let att = attack_known_h(&jac, &c).unwrap();
            assert_eq!(att.a, jac.matrix().column(i).into_owned());
        }
        assert!(attack_known_h(&jac, &DVector::zeros(13)).is_err());
        assert!(attack_known_h(&jac, &DVector::from_element(3, 1.0)).is_err());
    }

    #[test]
    fn known_h_keeps_wsse_for_many_shifts() {
        let (jac, x0) = setup();
        let noise = NoiseModel::uniform(54, 0.01).unwrap();
        let wls = Wls::new(&jac, &noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = jac.evaluate(&x0).unwrap() + gaussian(&mut rng, 54) * 0.01;
        let base = wls.detect(&z, 0.95).unwrap();
        for _ in 0..1000 {
            let c = gaussian(&mut rng, 13);
            let att = attack_known_h(&jac, &c).unwrap();
            let out = wls.detect(&att.apply(&z).unwrap(), 0.95).unwrap();
            assert_relative_eq!(out.wsse, base.wsse, max_relative = 1e-8);
            assert!((&out.state - &base.state - &c).amax() < 1e-8);
        }
    }

    #[test]
    fn random_attack_has_requested_norm_and_is_reproducible() {
        let a = attack_random(54, 0.7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = attack_random(54, 0.7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_relative_eq!(a.a.norm(), 0.7, epsilon = 1e-12);
        assert_eq!(a.a, b.a);
        assert!(attack_random(54, 0.0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn blind_attack_on_noiseless_data_lies_in_span_h() {
        let (jac, x0) = setup();
        let spec = GenerateSpec { t: 200, state: StateModel::default(), noise: None };
        let w = generate(&jac, &x0, &spec, 2).unwrap();
        let q = linalg::orthonormal_columns(jac.matrix());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let settings = BlindSettings { rank: RankChoice::Fixed(13), ..BlindSettings::default() };
        for method in [BasisMethod::Pca, BasisMethod::Svd] {
            let z = jac.evaluate(&x0).unwrap();
            let att = attack_from_window(&w.z, method, &settings, &z, &mut rng).unwrap();
            let a = &att.attack.a;
            let off = a - &q * q.tr_mul(a);
            assert!(off.norm() / a.norm() < 1e-6);
            assert_relative_eq!(a.norm(), settings.norm, epsilon = 1e-12);
            assert_eq!(att.attack.basis_rank_used, 13);
        }
    }

    #[test]
    fn blind_attack_checks_shapes() {
        let basis = ReducedBasis { h_pca: DMatrix::identity(4, 2), rho: 2, gamma_used: None };
        let z = DVector::zeros(4);
        assert!(attack_blind(&basis, &DVector::zeros(2), &z, AttackStrategy::PcaBlind).is_err());
        assert!(attack_blind(&basis, &DVector::from_element(3, 1.0), &z, AttackStrategy::PcaBlind).is_err());
        let (att, za) = attack_blind(&basis, &DVector::from_vec(vec![1.0, 2.0]), &z, AttackStrategy::PcaBlind).unwrap();
        assert_eq!(za, DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0]));
        assert_eq!(att.a, za);
    }

    #[test]
    fn coefficient_draws_follow_eigenvalues() {
        let v = DVector::from_vec(vec![100.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ratio = 0.0;
        for _ in 0..200 {
            let c = draw_coefficients(&mut rng, 3, &v, Coefficients::EigenWeighted, 2.0).unwrap();
            assert_relative_eq!(c.norm(), 2.0, epsilon = 1e-12);
            assert_eq!(c[2], 0.0);
            ratio += c[0].abs() / (c[1].abs() + 1e-300);
        }
        assert!(ratio / 200.0 > 5.0);
        assert!(draw_coefficients(&mut rng, 4, &v, Coefficients::Gaussian, 1.0).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in AttackStrategy::ALL {
            assert_eq!(s.name().parse::<AttackStrategy>().unwrap(), s);
        }
    }
}
