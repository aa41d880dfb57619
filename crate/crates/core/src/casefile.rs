//! MATPOWER case files, restricted to what the DC model needs.
//!
//! Recognised assignments are `baseMVA`, `bus`, `branch` and (optionally)
//! `gen`, with or without the `mpc.` prefix. Everything else in the file is
//! skipped, as are matrix columns beyond the ones read below.
//!
//! | matrix   | columns used (1-based)                         |
//! |----------|------------------------------------------------|
//! | `bus`    | 1 id, 2 type, 3 Pd                             |
//! | `branch` | 1 from, 2 to, 4 x, 11 status (default 1)       |
//! | `gen`    | 1 bus, 2 Pg, 8 status (default 1)              |

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Reference,
    Pv,
    Pq,
}

impl BusKind {
    fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            1 if code == 1.0 => Some(BusKind::Pq),
            2 if code == 2.0 => Some(BusKind::Pv),
            3 if code == 3.0 => Some(BusKind::Reference),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            BusKind::Pq => 1,
            BusKind::Pv => 2,
            BusKind::Reference => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: u32,
    pub kind: BusKind,
    /// Net active injection at the operating point in MW (generation minus load).
    pub p_injection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from: u32,
    pub to: u32,
    /// Series reactance, per unit.
    pub reactance: f64,
    pub in_service: bool,
}

/// A validated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub reference_bus: u32,
}

impl GridCase {
    /// Validate and assemble a case from its parts.
    pub fn new(base_mva: f64, buses: Vec<BusRecord>, branches: Vec<BranchRecord>) -> Result<Self> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(Error::Validation(format!("baseMVA must be positive, got {base_mva}")));
        }
        if buses.is_empty() {
            return Err(Error::Validation("case has no buses".into()));
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (k, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, k).is_some() {
                return Err(Error::Validation(format!("duplicate bus id {}", bus.id)));
            }
        }
        let refs: Vec<u32> = buses.iter().filter(|b| b.kind == BusKind::Reference).map(|b| b.id).collect();
        let reference_bus = match refs.as_slice() {
            [only] => *only,
            [] => return Err(Error::Validation("no reference bus (type 3)".into())),
            many => {
                return Err(Error::Validation(format!("multiple reference buses: {many:?}")));
            }
        };
        for (k, br) in branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !index.contains_key(&end) {
                    return Err(Error::Validation(format!("branch {} references unknown bus {end}", k + 1)));
                }
            }
            if br.from == br.to {
                return Err(Error::Validation(format!("branch {} is a self-loop", k + 1)));
            }
            if br.reactance == 0.0 || !br.reactance.is_finite() {
                return Err(Error::Validation(format!("branch {} ({}-{}) has zero reactance", k + 1, br.from, br.to)));
            }
        }
        let case = GridCase { base_mva, buses, branches, reference_bus };
        case.check_connected(&index)?;
        Ok(case)
    }

    fn check_connected(&self, index: &HashMap<u32, usize>) -> Result<()> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in self.branches.iter().filter(|b| b.in_service) {
            let (i, j) = (index[&br.from], index[&br.to]);
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let islanded: Vec<u32> = self.buses.iter().zip(&seen).filter(|(_, s)| !**s).map(|(b, _)| b.id).collect();
        if islanded.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("network is disconnected; unreachable buses {islanded:?}")))
        }
    }

    /// Map from bus id to its row position in `buses`.
    pub fn bus_index(&self) -> HashMap<u32, usize> {
        self.buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect()
    }

    pub fn in_service_branches(&self) -> impl Iterator<Item = (usize, &BranchRecord)> {
        self.branches.iter().enumerate().filter(|(_, b)| b.in_service)
    }

    /// Number of voltage-angle states (every bus except the reference).
    pub fn state_count(&self) -> usize {
        self.buses.len() - 1
    }

    /// Number of meters: two flow sensors per live branch plus one injection per bus.
    pub fn sensor_count(&self) -> usize {
        sensor_count(self)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_case(&text)
    }
}

pub fn sensor_count(case: &GridCase) -> usize {
    2 * case.in_service_branches().count() + case.buses.len()
}

/// Parse MATPOWER case text.
pub fn parse_case(text: &str) -> Result<GridCase> {
    let raw = scan(text)?;
    let base_mva = match raw.scalars.get("baseMVA") {
        Some(&(v, _)) => v,
        None => return Err(Error::Parse { line: 0, message: "missing baseMVA".into() }),
    };
    let bus_rows = raw.matrices.get("bus").ok_or(Error::Parse { line: 0, message: "missing bus matrix".into() })?;
    let branch_rows =
        raw.matrices.get("branch").ok_or(Error::Parse { line: 0, message: "missing branch matrix".into() })?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in bus_rows {
        row.require(3, "bus")?;
        let id = row.id(0)?;
        let kind = BusKind::from_code(row.values[1]).ok_or_else(|| {
            Error::Validation(format!("bus {id} has unsupported type {} (line {})", row.values[1], row.line))
        })?;
        buses.push(BusRecord { id, kind, p_injection: -row.values[2] });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for row in branch_rows {
        row.require(4, "branch")?;
        let status = row.values.get(10).copied().unwrap_or(1.0);
        branches.push(BranchRecord {
            from: row.id(0)?,
            to: row.id(1)?,
            reactance: row.values[3],
            in_service: status != 0.0,
        });
    }

    if let Some(gen_rows) = raw.matrices.get("gen") {
        let slot: HashMap<u32, usize> = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
        for row in gen_rows {
            row.require(2, "gen")?;
            let bus = row.id(0)?;
            let status = row.values.get(7).copied().unwrap_or(1.0);
            if status == 0.0 {
                continue;
            }
            let k = *slot
                .get(&bus)
                .ok_or_else(|| Error::Validation(format!("generator at unknown bus {bus} (line {})", row.line)))?;
            buses[k].p_injection += row.values[1];
        }
    }

    GridCase::new(base_mva, buses, branches)
}

/// Canonical MATPOWER text for a case. Generation is folded into `Pd`, so the
/// output has no `gen` section; parsing it yields the same [`GridCase`].
pub fn render_case(case: &GridCase) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "function mpc = case_export");
    let _ = writeln!(out, "mpc.version = '2';");
    let _ = writeln!(out, "mpc.baseMVA = {};", case.base_mva);
    let _ = writeln!(out, "%% bus data\n%\tbus_i\ttype\tPd");
    let _ = writeln!(out, "mpc.bus = [");
    for bus in &case.buses {
        // `0.0 - x` keeps a zero injection from rendering as "-0".
        let _ = writeln!(out, "\t{}\t{}\t{};", bus.id, bus.kind.code(), 0.0 - bus.p_injection);
    }
    let _ = writeln!(out, "];");
    let _ = writeln!(out, "%% branch data\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus");
    let _ = writeln!(out, "mpc.branch = [");
    for br in &case.branches {
        let _ = writeln!(
            out,
            "\t{}\t{}\t0\t{}\t0\t0\t0\t0\t0\t0\t{};",
            br.from,
            br.to,
            br.reactance,
            u8::from(br.in_service)
        );
    }
    let _ = writeln!(out, "];");
    out
}

struct Row {
    line: usize,
    values: Vec<f64>,
}

impl Row {
    fn require(&self, cols: usize, what: &str) -> Result<()> {
        if self.values.len() < cols {
            return Err(Error::Parse {
                line: self.line,
                message: format!("{what} row needs at least {cols} columns, found {}", self.values.len()),
            });
        }
        Ok(())
    }

    fn id(&self, col: usize) -> Result<u32> {
        let v = self.values[col];
        if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
            return Err(Error::Parse {
                line: self.line,
                message: format!("expected a bus id in column {}, found {v}", col + 1),
            });
        }
        Ok(v as u32)
    }
}

#[derive(Default)]
struct RawCase {
    scalars: HashMap<String, (f64, usize)>,
    matrices: BTreeMap<String, Vec<Row>>,
}

const MATRICES: [&str; 3] = ["bus", "branch", "gen"];

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(k) => &line[..k],
        None => line,
    }
}

/// Split `lhs = rhs` where lhs is `name` or `mpc.name`.
fn assignment(code: &str) -> Option<(&str, &str)> {
    let (lhs, rhs) = code.split_once('=')?;
    let lhs = lhs.trim();
    let name = lhs.rsplit('.').next()?.trim();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    Some((name, rhs))
}

fn parse_numbers(chunk: &str, line: usize) -> Result<Vec<f64>> {
    chunk
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|tok| !tok.is_empty())
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { line, message: format!("malformed number `{tok}`") })
        })
        .collect()
}

fn scan(text: &str) -> Result<RawCase> {
    let mut raw = RawCase::default();
    let mut open: Option<(String, Vec<Row>, usize)> = None;

    for (k, full) in text.lines().enumerate() {
        let line = k + 1;
        let mut code = strip_comment(full);

        if open.is_none() {
            let Some((name, rhs)) = assignment(code) else { continue };
            if name == "baseMVA" {
                let v = rhs.trim().trim_end_matches(';').trim();
                let value = v
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Parse { line, message: format!("malformed baseMVA `{v}`") })?;
                raw.scalars.insert(name.to_string(), (value, line));
                continue;
            }
            if !MATRICES.contains(&name) {
                continue;
            }
            let Some(start) = rhs.find('[') else {
                return Err(Error::Parse { line, message: format!("expected `[` after {name} =") });
            };
            open = Some((name.to_string(), Vec::new(), line));
            code = &rhs[start + 1..];
        }

        let (_, rows, _) = open.as_mut().expect("matrix is open");
        let (body, closed) = match code.find(']') {
            Some(end) => (&code[..end], true),
            None => (code, false),
        };
        // Both `;` and a line break end a row.
        for seg in body.split(';') {
            let values = parse_numbers(seg, line)?;
            if !values.is_empty() {
                rows.push(Row { line, values });
            }
        }
        if closed {
            let (name, rows, _) = open.take().expect("matrix is open");
            if let Some(width) = rows.first().map(|r| r.values.len()) {
                if let Some(bad) = rows.iter().find(|r| r.values.len() != width) {
                    return Err(Error::Parse {
                        line: bad.line,
                        message: format!("{name} row has {} columns, expected {width}", bad.values.len()),
                    });
                }
            }
            raw.matrices.insert(name, rows);
        }
    }
    if let Some((name, _, line)) = open {
        return Err(Error::Parse { line, message: format!("unterminated {name} matrix") });
    }
    Ok(raw)
}

/// Built-in IEEE test cases shipped with the crate.
pub mod fixtures {
    use super::{parse_case, GridCase};

    pub const CASE14: &str = include_str!("../fixtures/case14.m");
    pub const CASE30: &str = include_str!("../fixtures/case30.m");
    pub const CASE57: &str = include_str!("../fixtures/case57.m");

    /// Look up a shipped case by name (`case14`, `case30`, `case57`).
    pub fn text(name: &str) -> Option<&'static str> {
        match name {
            "case14" => Some(CASE14),
            "case30" => Some(CASE30),
            "case57" => Some(CASE57),
            _ => None,
        }
    }

    pub fn load(name: &str) -> Option<GridCase> {
        text(name).map(|t| parse_case(t).expect("shipped fixture parses"))
    }

    pub fn ieee14() -> GridCase {
        load("case14").unwrap()
    }

    pub fn ieee30() -> GridCase {
        load("case30").unwrap()
    }

    pub fn ieee57() -> GridCase {
        load("case57").unwrap()
    }
}

/// Resolve a case argument: an existing path, the path with `.m` appended, or
/// the file stem of a shipped fixture.
pub fn load_case(spec: &str) -> Result<GridCase> {
    let path = Path::new(spec);
    if path.is_file() {
        return GridCase::from_path(path);
    }
    let with_ext = path.with_extension("m");
    if with_ext.is_file() {
        return GridCase::from_path(with_ext);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
    match fixtures::text(stem) {
        Some(text) => parse_case(text),
        None => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no case file at `{spec}` and no shipped fixture named `{stem}`"),
        ))),
    }
}
