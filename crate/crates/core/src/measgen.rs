//! Measurement windows `Z` (t x m): random operating states, Gaussian sensor
//! noise at a target SNR, and sparse gross errors.
//!
//! Each row of `Z` is one time instant. Randomness comes from a caller-owned
//! `ChaCha8Rng`, so a seed pins every draw.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dcmodel::DcJacobian;
use crate::estimator::NoiseModel;
use crate::{Error, Result};

/// How states wander around the operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateModel {
    /// `x = x0 + sigma * g`, angles in radians.
    AngleJitter { sigma: f64 },
    /// Bus injections move by `sigma * g` per unit and the angles follow the
    /// DC power flow: `x = x0 + B^{-1} (sigma * g)`.
    LoadJitter { sigma: f64 },
}

impl Default for StateModel {
    fn default() -> Self {
        StateModel::LoadJitter { sigma: 0.1 }
    }
}

/// Which signal level an SNR is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrReference {
    /// Standard deviation of the noiseless sensor reading.
    #[default]
    Fluctuation,
    /// RMS of the noiseless sensor reading, operating point included.
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// SNR range in dB. Each sensor draws its own SNR uniformly from it.
    pub snr_db: (f64, f64),
    #[serde(default)]
    pub reference: SnrReference,
}

impl NoiseSpec {
    pub fn fixed(snr_db: f64) -> Self {
        NoiseSpec { snr_db: (snr_db, snr_db), reference: SnrReference::default() }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { snr_db: (20.0, 35.0), reference: SnrReference::default() }
    }
}

/// Stateful sampler for one grid: fixes the sensor noise levels once, then
/// draws windows and fresh snapshots from the same distribution.
#[derive(Debug, Clone)]
pub struct Simulator {
    h: DMatrix<f64>,
    x0: DVector<f64>,
    /// `x = x0 + factor * g` with `g` standard normal.
    factor: DMatrix<f64>,
    sigma: Option<DVector<f64>>,
    snr_db: Option<DVector<f64>>,
}

impl Simulator {
    pub fn new<R: Rng>(
        jac: &DcJacobian,
        x0: &DVector<f64>,
        state: StateModel,
        noise: Option<NoiseSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let n = jac.state_count();
        if x0.len() != n {
            return Err(Error::contract("operating state length does not match H"));
        }
        let factor = match state {
            StateModel::AngleJitter { sigma } => {
                check_sigma(sigma)?;
                DMatrix::identity(n, n) * sigma
            }
            StateModel::LoadJitter { sigma } => {
                check_sigma(sigma)?;
                let b = jac.reduced_susceptance();
                b.try_inverse().ok_or_else(|| Error::Numerical("singular susceptance matrix".into()))? * sigma
            }
        };
        let h = jac.matrix().clone();
        let (sigma, snr_db) = match noise {
            None => (None, None),
            Some(spec) => {
                let (lo, hi) = spec.snr_db;
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::contract(format!("bad SNR range [{lo}, {hi}]")));
                }
                let snr = DVector::from_fn(h.nrows(), |_, _| if lo == hi { lo } else { rng.random_range(lo..=hi) });
                // Expected signal level per sensor under the state model.
                let hf = &h * &factor;
                let mean = &h * x0;
                let level = DVector::from_fn(h.nrows(), |i, _| {
                    let var = hf.row(i).norm_squared();
                    match spec.reference {
                        SnrReference::Fluctuation => var.sqrt(),
                        SnrReference::Magnitude => (mean[i] * mean[i] + var).sqrt(),
                    }
                });
                if let Some(i) = level.iter().position(|l| *l <= 0.0) {
                    return Err(Error::contract(format!("sensor {i} has no signal to reference an SNR against")));
                }
                let sigma = level.zip_map(&snr, |l, s| l * 10f64.powf(-s / 20.0));
                (Some(sigma), Some(snr))
            }
        };
        Ok(Simulator { h, x0: x0.clone(), factor, sigma, snr_db })
    }

    pub fn sensor_count(&self) -> usize {
        self.h.nrows()
    }

    /// Per-sensor noise standard deviations, `None` when noiseless.
    pub fn sigma(&self) -> Option<&DVector<f64>> {
        self.sigma.as_ref()
    }

    pub fn noise_model(&self) -> Option<NoiseModel> {
        self.sigma.clone().map(|s| NoiseModel::new(s).expect("sigma is positive by construction"))
    }

    fn draw_state<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let g = DVector::from_fn(self.factor.ncols(), |_, _| StandardNormal.sample(rng));
        &self.x0 + &self.factor * g
    }

    fn draw_noise<R: Rng>(&self, rng: &mut R) -> Option<DVector<f64>> {
        self.sigma.as_ref().map(|s| {
            DVector::from_fn(s.len(), |i, _| {
                let g: f64 = StandardNormal.sample(rng);
                g * s[i]
            })
        })
    }

    /// One fresh measurement vector and the state that produced it.
    pub fn snapshot<R: Rng>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
        let x = self.draw_state(rng);
        let mut z = &self.h * &x;
        if let Some(e) = self.draw_noise(rng) {
            z += e;
        }
        (z, x)
    }

    pub fn window<R: Rng>(&self, t: usize, rng: &mut R) -> Result<MeasurementMatrix> {
        if t == 0 {
            return Err(Error::contract("window needs at least one row"));
        }
        let m = self.sensor_count();
        let mut z = DMatrix::zeros(t, m);
        let mut states = DMatrix::zeros(t, self.factor.ncols());
        for k in 0..t {
            let (row, x) = self.snapshot(rng);
            z.row_mut(k).copy_from(&row.transpose());
            states.row_mut(k).copy_from(&x.transpose());
        }
        Ok(MeasurementMatrix {
            truth: Some(z.clone()),
            z,
            states: Some(states),
            gross: Vec::new(),
            sigma: self.sigma.clone(),
            snr_db: self.snr_db.clone(),
        })
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("state sigma {sigma} must be finite and >= 0")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub t: usize,
    pub state: StateModel,
    /// `None` gives noiseless windows.
    pub noise: Option<NoiseSpec>,
}

/// Draw a window from a seed: builds the [`Simulator`] and samples `t` rows.
pub fn generate(jac: &DcJacobian, x0: &DVector<f64>, spec: &GenerateSpec, seed: u64) -> Result<MeasurementMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = Simulator::new(jac, x0, spec.state, spec.noise, &mut rng)?;
    sim.window(spec.t, &mut rng)
}

/// One corrupted entry of `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrossEntry {
    pub row: usize,
    pub col: usize,
    /// Additive value, `Z = truth + value`.
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct MeasurementMatrix {
    pub z: DMatrix<f64>,
    /// `Z` before gross errors: noiseless signal plus Gaussian noise.
    pub truth: Option<DMatrix<f64>>,
    /// States behind each row, when simulated.
    pub states: Option<DMatrix<f64>>,
    /// Gross errors in row-major position order.
    pub gross: Vec<GrossEntry>,
    pub sigma: Option<DVector<f64>>,
    pub snr_db: Option<DVector<f64>>,
}

impl MeasurementMatrix {
    /// Wrap observed data that has no simulation bookkeeping.
    pub fn from_observations(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::contract("measurement matrix is empty"));
        }
        Ok(MeasurementMatrix { z, truth: None, states: None, gross: Vec::new(), sigma: None, snr_db: None })
    }

    pub fn rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn sensors(&self) -> usize {
        self.z.ncols()
    }

    pub fn gross_density(&self) -> f64 {
        self.gross.len() as f64 / self.z.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.z, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum GrossMagnitude {
    /// Add `k * max|Z|` with a random sign.
    MultipleOfMax { k: f64 },
    /// Replace the reading with zero.
    MissingAsZero,
}

impl Default for GrossMagnitude {
    fn default() -> Self {
        GrossMagnitude::MultipleOfMax { k: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrossAmount {
    /// Fraction of all entries, rounded up.
    Density(f64),
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrossErrorSpec {
    pub amount: GrossAmount,
    pub magnitude: GrossMagnitude,
    pub seed: u64,
}

impl GrossErrorSpec {
    pub fn density(density: f64, seed: u64) -> Self {
        GrossErrorSpec { amount: GrossAmount::Density(density), magnitude: GrossMagnitude::default(), seed }
    }

    pub fn single(seed: u64) -> Self {
        GrossErrorSpec { amount: GrossAmount::Count(1), magnitude: GrossMagnitude::default(), seed }
    }

    fn count(&self, entries: usize) -> Result<usize> {
        let count = match self.amount {
            GrossAmount::Density(d) => {
                if !(d.is_finite() && d >= 0.0) {
                    return Err(Error::contract(format!("gross density {d} must be >= 0")));
                }
                // Tolerance keeps exact products such as 0.01 * 27000 from
                // rounding up to the next integer.
                (d * entries as f64 - 1e-9).ceil().max(0.0) as usize
            }
            GrossAmount::Count(c) => c,
        };
        if 2 * count > entries {
            return Err(Error::contract(format!(
                "{count} gross errors in {entries} entries: the error matrix would not be sparse"
            )));
        }
        Ok(count)
    }
}

/// Add sparse gross errors to a simulated window.
pub fn corrupt(mat: &MeasurementMatrix, spec: &GrossErrorSpec) -> Result<MeasurementMatrix> {
    let truth = mat.truth.as_ref().ok_or_else(|| Error::contract("corrupt needs a window with recorded truth"))?;
    if let GrossMagnitude::MultipleOfMax { k } = spec.magnitude {
        if !(k > 1.0 && k.is_finite()) {
            return Err(Error::contract(format!("gross multiple {k} must exceed 1")));
        }
    }
    let (t, m) = truth.shape();
    let count = spec.count(t * m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positions = index::sample(&mut rng, t * m, count).into_vec();
    positions.sort_unstable();
    let peak = crate::linalg::max_abs(truth);

    let mut z = truth.clone();
    let mut gross = Vec::with_capacity(count);
    for p in positions {
        let (row, col) = (p / m, p % m);
        let value = match spec.magnitude {
            GrossMagnitude::MultipleOfMax { k } => {
                if rng.random_bool(0.5) {
                    k * peak
                } else {
                    -k * peak
                }
            }
            GrossMagnitude::MissingAsZero => -truth[(row, col)],
        };
        z[(row, col)] = truth[(row, col)] + value;
        gross.push(GrossEntry { row, col, value });
    }
    Ok(MeasurementMatrix { z, gross, ..mat.clone() })
}

pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a headerless numeric CSV, one observation per row.
pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut data = Vec::new();
    let mut cols = None;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse { line: line + 1, message: format!("'{f}' is not a number") })
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Parse { line: line + 1, message: format!("expected {c} columns") })
            }
            _ => {}
        }
        data.push(row);
    }
    let cols = cols.ok_or_else(|| Error::contract("CSV has no rows"))?;
    Ok(DMatrix::from_fn(data.len(), cols, |i, j| data[i][j]))
}
