//! DC measurement model `z = H x`.
//!
//! States are the voltage angles (radians) of every non-reference bus. Sensors
//! are ordered: all `FlowFrom` meters in branch order, then all `FlowTo`
//! meters, then one `Injection` meter per bus in bus order. Values are per unit.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::casefile::GridCase;
use crate::{linalg, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensorKind {
    FlowFrom,
    FlowTo,
    Injection,
}

impl SensorKind {
    pub fn label(self) -> &'static str {
        match self {
            SensorKind::FlowFrom => "flow_from",
            SensorKind::FlowTo => "flow_to",
            SensorKind::Injection => "injection",
        }
    }
}

/// One meter. `element` is the branch position in the case's branch list for
/// flow meters and the bus id for injection meters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sensor {
    pub kind: SensorKind,
    pub element: u32,
}

#[derive(Debug, Clone)]
pub struct DcJacobian {
    matrix: DMatrix<f64>,
    sensors: Vec<Sensor>,
    /// Bus id of each state column.
    states: Vec<u32>,
    reference_bus: u32,
    /// Row of each non-reference bus injection, aligned with `states`.
    injection_rows: Vec<usize>,
}

pub fn build_jacobian(case: &GridCase) -> Result<DcJacobian> {
    let index = case.bus_index();
    let ref_pos = index[&case.reference_bus];
    // Column of each bus position, None for the reference.
    let column: Vec<Option<usize>> = (0..case.buses.len())
        .map(|k| match k.cmp(&ref_pos) {
            std::cmp::Ordering::Less => Some(k),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(k - 1),
        })
        .collect();
    let states: Vec<u32> = case.buses.iter().filter(|b| b.id != case.reference_bus).map(|b| b.id).collect();
    let n = states.len();

    let live: Vec<(usize, usize, usize, f64)> =
        case.in_service_branches().map(|(k, br)| (k, index[&br.from], index[&br.to], 1.0 / br.reactance)).collect();
    let nl = live.len();
    let nb = case.buses.len();
    let m = 2 * nl + nb;

    let mut h = DMatrix::zeros(m, n);
    let mut sensors = Vec::with_capacity(m);
    for (row, &(k, i, j, b)) in live.iter().enumerate() {
        if let Some(ci) = column[i] {
            h[(row, ci)] += b;
            h[(nl + row, ci)] -= b;
            h[(2 * nl + i, ci)] += b;
            h[(2 * nl + j, ci)] -= b;
        }
        if let Some(cj) = column[j] {
            h[(row, cj)] -= b;
            h[(nl + row, cj)] += b;
            h[(2 * nl + i, cj)] -= b;
            h[(2 * nl + j, cj)] += b;
        }
        sensors.push(Sensor { kind: SensorKind::FlowFrom, element: k as u32 });
    }
    for &(k, ..) in &live {
        sensors.push(Sensor { kind: SensorKind::FlowTo, element: k as u32 });
    }
    for bus in &case.buses {
        sensors.push(Sensor { kind: SensorKind::Injection, element: bus.id });
    }
    let injection_rows = (0..nb).filter(|&k| k != ref_pos).map(|k| 2 * nl + k).collect::<Vec<_>>();

    if n == 0 {
        return Err(Error::Observability("case has no states".into()));
    }
    let rank = linalg::rank(&h)?;
    if rank < n {
        return Err(Error::Observability(format!("rank(H) = {rank} < {n} states")));
    }

    Ok(DcJacobian { matrix: h, sensors, states, reference_bus: case.reference_bus, injection_rows })
}

impl DcJacobian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn state_buses(&self) -> &[u32] {
        &self.states
    }

    pub fn reference_bus(&self) -> u32 {
        self.reference_bus
    }

    pub fn sensor_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn state_count(&self) -> usize {
        self.matrix.ncols()
    }

    /// Degrees of freedom of the WLS residual, `m - n`.
    pub fn dof(&self) -> usize {
        self.sensor_count() - self.state_count()
    }

    /// Noiseless measurements `H x`.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_count() {
            return Err(Error::contract(format!(
                "state vector has length {}, expected {}",
                x.len(),
                self.state_count()
            )));
        }
        Ok(&self.matrix * x)
    }

    /// Reduced nodal susceptance matrix: the injection rows of the
    /// non-reference buses, `n x n`.
    pub fn reduced_susceptance(&self) -> DMatrix<f64> {
        self.matrix.select_rows(&self.injection_rows)
    }

    /// DC power flow: angles that reproduce the given per-unit injections at
    /// the non-reference buses (ordered like [`Self::state_buses`]).
    pub fn solve_angles(&self, injections: &DVector<f64>) -> Result<DVector<f64>> {
        if injections.len() != self.state_count() {
            return Err(Error::contract("injection vector must have one entry per state"));
        }
        self.reduced_susceptance()
            .lu()
            .solve(injections)
            .ok_or_else(|| Error::Numerical("singular susceptance matrix".into()))
    }

    /// Operating-point angles of a case, from its bus injections.
    pub fn operating_point(&self, case: &GridCase) -> Result<DVector<f64>> {
        let p: Vec<f64> =
            case.buses.iter().filter(|b| b.id != self.reference_bus).map(|b| b.p_injection / case.base_mva).collect();
        self.solve_angles(&DVector::from_vec(p))
    }

    /// Jacobian restricted to a subset of sensors (row indices into this one).
    pub fn select_sensors(&self, rows: &[usize]) -> Result<DcJacobian> {
        let matrix = self.matrix.select_rows(rows);
        let n = self.state_count();
        if linalg::rank(&matrix)? < n {
            return Err(Error::Observability(format!("{} remaining sensors do not observe {n} states", rows.len())));
        }
        let injection_rows =
            self.injection_rows.iter().map(|r| rows.iter().position(|k| k == r).unwrap_or(usize::MAX)).collect();
        Ok(DcJacobian {
            matrix,
            sensors: rows.iter().map(|&r| self.sensors[r]).collect(),
            states: self.states.clone(),
            reference_bus: self.reference_bus,
            injection_rows,
        })
    }

    /// Write `H` as CSV with a sensor label column and one column per state bus.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["sensor".to_string(), "kind".to_string(), "element".to_string()];
        header.extend(self.states.iter().map(|b| format!("theta_{b}")));
        w.write_record(&header)?;
        for (r, s) in self.sensors.iter().enumerate() {
            let mut rec = vec![r.to_string(), s.kind.label().to_string(), s.element.to_string()];
            rec.extend(self.matrix.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
