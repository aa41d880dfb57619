//! Inputs shared by the benchmarks.

use gridfdi::casefile::fixtures;
use gridfdi::dcmodel::{build_jacobian, DcJacobian};
use gridfdi::measgen::{corrupt, generate, GenerateSpec, GrossErrorSpec};
use gridfdi::DMatrix;

/// Jacobian and a 500-row window of a shipped case with gross errors at
/// `density`.
pub fn corrupted_window(case: &str, density: f64, seed: u64) -> (DcJacobian, DMatrix<f64>) {
    let case = fixtures::load(case).expect("shipped fixture");
    let jac = build_jacobian(&case).unwrap();
    let x0 = jac.operating_point(&case).unwrap();
    let spec = GenerateSpec { t: 500, state: Default::default(), noise: Some(Default::default()) };
    let mat = generate(&jac, &x0, &spec, seed).unwrap();
    let z = if density > 0.0 { corrupt(&mat, &GrossErrorSpec::density(density, seed + 1)).unwrap().z } else { mat.z };
    (jac, z)
}
