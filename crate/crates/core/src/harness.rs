//! Seeded Monte Carlo campaigns: P_mis curves, the gross-error study and the
//! solver benchmark, plus their CSV and text reports.
//!
//! Every trial draws its randomness from `ChaCha8(master seed)` on stream
//! `trial`, so any single trial can be replayed in isolation and results do
//! not depend on the number of worker threads.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackStrategy, BlindSettings, Coefficients};
use crate::casefile::load_case;
use crate::dcmodel::{build_jacobian, DcJacobian};
use crate::estimator::{chi_square_threshold, Wls};
use crate::measgen::{corrupt, GrossAmount, GrossErrorSpec, GrossMagnitude, NoiseSpec, Simulator, StateModel};
use crate::recover::{RpcaProblem, Solver};
use crate::subspace::{BasisMethod, RankChoice, RankRule};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// P_mis against the detection threshold for each attack strategy.
    Pmis,
    /// PCA and ALM attacks built from grossly corrupted windows.
    GrossError,
    /// Accuracy and wall time of the RPCA solvers.
    SolverBench,
}

/// Experiment description, usually read from TOML. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Built-in fixture (`case14`, `case30`, `case57`) or a case file path.
    #[serde(default = "default_case")]
    pub case: String,
    /// Rows in each measurement window.
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub state: StateModel,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// `||a||` for every strategy, so the curves compare like with like.
    #[serde(default = "default_attack_norm")]
    pub attack_norm: f64,
    #[serde(default)]
    pub coefficients: Coefficients,
    /// Subtract column means before PCA.
    #[serde(default = "default_true")]
    pub center: bool,
    /// Cumulative-variance threshold for the blind rank. Ignored when `rank`
    /// is set.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub rank_rule: RankRule,
    /// Fixed blind rank instead of the heuristic.
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<AttackStrategy>,
    /// Gross errors in the attacker's window: a density, or a count when
    /// `gross_count` is set.
    #[serde(default)]
    pub gross_density: f64,
    #[serde(default)]
    pub gross_count: Option<usize>,
    #[serde(default)]
    pub gross_magnitude: GrossMagnitude,
    /// Explicit threshold sweep. Defaults to an even grid over
    /// `[0.5 chi2(psi, 0.5), 2 chi2(psi, 0.99)]` plus the detector threshold.
    #[serde(default)]
    pub tau: Option<Vec<f64>>,
    #[serde(default = "default_tau_points")]
    pub tau_points: usize,
    #[serde(default = "default_solvers")]
    pub solvers: Vec<Solver>,
    #[serde(default = "default_densities")]
    pub densities: Vec<f64>,
    /// Cases for the solver benchmark; `case` is used by the other kinds.
    #[serde(default = "default_cases")]
    pub cases: Vec<String>,
    /// Iteration cap for every solver.
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Worker threads; `None` uses the global rayon pool.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_case() -> String {
    "case14".into()
}
fn default_t() -> usize {
    500
}
fn default_trials() -> usize {
    100
}
fn default_confidence() -> f64 {
    0.95
}
fn default_attack_norm() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_gamma() -> f64 {
    0.995
}
fn default_strategies() -> Vec<AttackStrategy> {
    AttackStrategy::ALL.to_vec()
}
fn default_tau_points() -> usize {
    60
}
fn default_solvers() -> Vec<Solver> {
    Solver::ALL.to_vec()
}
fn default_densities() -> Vec<f64> {
    vec![0.01, 0.05]
}
fn default_cases() -> Vec<String> {
    vec!["case14".into(), "case30".into(), "case57".into()]
}
fn default_max_iter() -> usize {
    3000
}

impl ExperimentConfig {
    /// All defaults for the given kind.
    pub fn new(kind: ExperimentKind) -> Self {
        toml::from_str(&format!("kind = \"{}\"", kind_name(kind))).expect("defaults deserialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.t < 2 {
            return bad("t must be at least 2".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!("confidence {} is outside (0, 1)", self.confidence));
        }
        if !(self.attack_norm > 0.0 && self.attack_norm.is_finite()) {
            return bad(format!("attack_norm {} must be positive", self.attack_norm));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} is outside (0, 1]", self.gamma));
        }
        if self.rank == Some(0) {
            return bad("rank must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.gross_density) {
            return bad(format!("gross_density {} is outside [0, 0.5)", self.gross_density));
        }
        if let Some(tau) = &self.tau {
            if tau.is_empty() {
                return bad("tau grid is empty".into());
            }
            if tau.windows(2).any(|w| w[0] >= w[1]) || tau.iter().any(|v| !v.is_finite()) {
                return bad("tau grid must be finite and strictly increasing".into());
            }
        } else if self.tau_points < 2 {
            return bad("tau_points must be at least 2".into());
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        match self.kind {
            ExperimentKind::SolverBench => {
                if self.solvers.is_empty() || self.densities.is_empty() || self.cases.is_empty() {
                    return bad("solver_bench needs solvers, densities and cases".into());
                }
                if let Some(d) = self.densities.iter().find(|d| !(0.0..0.5).contains(*d)) {
                    return bad(format!("density {d} is outside [0, 0.5)"));
                }
            }
            ExperimentKind::Pmis => {}
            ExperimentKind::GrossError => {
                if self.gross_count.is_none() && self.gross_density == 0.0 {
                    return bad("gross_error needs gross_count or a positive gross_density".into());
                }
            }
        }
        Ok(())
    }

    fn blind_settings(&self) -> BlindSettings {
        BlindSettings {
            rank: match self.rank {
                Some(r) => RankChoice::Fixed(r),
                None => RankChoice::Heuristic { gamma: self.gamma, rule: self.rank_rule },
            },
            center: self.center,
            coefficients: self.coefficients,
            norm: self.attack_norm,
        }
    }

    fn gross_amount(&self) -> Option<GrossAmount> {
        match (self.gross_count, self.gross_density) {
            (Some(0), _) => None,
            (Some(c), _) => Some(GrossAmount::Count(c)),
            (None, d) if d > 0.0 => Some(GrossAmount::Density(d)),
            _ => None,
        }
    }
}

fn kind_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Pmis => "pmis",
        ExperimentKind::GrossError => "gross_error",
        ExperimentKind::SolverBench => "solver_bench",
    }
}

/// Generator for trial `trial` under `master`.
pub fn trial_rng(master: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(trial);
    rng
}

/// Label of the unattacked reference curve.
pub const NO_ATTACK: &str = "no_attack";
/// Label of the PCA attack built from the window before corruption.
pub const PCA_CLEAN: &str = "pca_blind_clean";

/// One detector run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub label: String,
    /// `None` when the trial failed; see `error`.
    pub wsse: Option<f64>,
    /// Blind rank used by the attack, 0 for non-blind arms.
    pub rank: usize,
    pub error: Option<String>,
}

/// Empirical `P(WSSE < tau)` for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct PmisCurve {
    pub label: String,
    pub tau: Vec<f64>,
    pub p_mis: Vec<f64>,
    /// Trials that produced a WSSE.
    pub trials: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverRecord {
    pub trial: usize,
    pub solver: Solver,
    pub case: String,
    pub density: f64,
    pub r_e: f64,
    pub seconds: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub seed: u64,
    pub git_hash: Option<String>,
    pub config: ExperimentConfig,
    /// `chi2(psi, confidence)` for the campaign's case, when there is one.
    pub threshold: Option<f64>,
    pub dof: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub metadata: Metadata,
    pub curves: Vec<PmisCurve>,
    pub trials: Vec<TrialRecord>,
    pub solver_runs: Vec<SolverRecord>,
}

impl CampaignResult {
    pub fn curve(&self, label: &str) -> Option<&PmisCurve> {
        self.curves.iter().find(|c| c.label == label)
    }

    /// Fraction of an arm's successful trials with `WSSE < tau`.
    pub fn p_mis_at(&self, label: &str, tau: f64) -> Option<f64> {
        let w = self.wsse(label);
        (!w.is_empty()).then(|| w.iter().filter(|v| **v < tau).count() as f64 / w.len() as f64)
    }

    /// Successful WSSE values of an arm in trial order.
    pub fn wsse(&self, label: &str) -> Vec<f64> {
        self.trials.iter().filter(|r| r.label == label).filter_map(|r| r.wsse).collect()
    }

    pub fn solver_records(&self, solver: Solver, case: &str, density: f64) -> Vec<&SolverRecord> {
        self.solver_runs.iter().filter(|r| r.solver == solver && r.case == case && r.density == density).collect()
    }

    /// Write `pmis.csv`, `trials.csv`, `solver_bench.csv` (when present),
    /// `config.toml` and `summary.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let seed = self.metadata.seed.to_string();
        if !self.curves.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("pmis.csv"))?;
            w.write_record(["seed", "strategy", "tau", "p_mis", "trials", "failures"])?;
            for c in &self.curves {
                for (tau, p) in c.tau.iter().zip(&c.p_mis) {
                    w.write_record([
                        seed.as_str(),
                        c.label.as_str(),
                        &tau.to_string(),
                        &p.to_string(),
                        &c.trials.to_string(),
                        &c.failures.to_string(),
                    ])?;
                }
            }
            w.flush()?;
            let mut w = csv::Writer::from_path(dir.join("trials.csv"))?;
            w.write_record(["seed", "trial", "strategy", "wsse", "rank", "error"])?;
            for r in &self.trials {
                w.write_record([
                    seed.as_str(),
                    &r.trial.to_string(),
                    r.label.as_str(),
                    &r.wsse.map(|v| v.to_string()).unwrap_or_default(),
                    &r.rank.to_string(),
                    r.error.as_deref().unwrap_or(""),
                ])?;
            }
            w.flush()?;
        }
        if !self.solver_runs.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("solver_bench.csv"))?;
            w.write_record([
                "seed",
                "trial",
                "solver",
                "case",
                "density",
                "r_e",
                "seconds",
                "iterations",
                "converged",
            ])?;
            for r in &self.solver_runs {
                w.write_record([
                    seed.as_str(),
                    &r.trial.to_string(),
                    r.solver.name(),
                    r.case.as_str(),
                    &r.density.to_string(),
                    &format!("{:e}", r.r_e),
                    &r.seconds.to_string(),
                    &r.iterations.to_string(),
                    &r.converged.to_string(),
                ])?;
            }
            w.flush()?;
        }
        fs::write(dir.join("config.toml"), self.metadata.config.to_toml())?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let md = &self.metadata;
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", kind_name(md.config.kind));
        let _ = writeln!(s, "seed: {}", md.seed);
        let _ = writeln!(s, "git: {}", md.git_hash.as_deref().unwrap_or("unknown"));
        let _ = writeln!(s, "trials: {}", md.config.trials);
        if let (Some(tau), Some(dof)) = (md.threshold, md.dof) {
            let _ = writeln!(s, "case: {}  dof: {dof}  threshold: {tau:.4}", md.config.case);
            for c in &self.curves {
                let p = self.p_mis_at(&c.label, tau).unwrap_or(f64::NAN);
                let _ = writeln!(
                    s,
                    "  {:<16} P_mis@threshold {:.4}  detected {:.4}  (n={}, failed={})",
                    c.label,
                    p,
                    1.0 - p,
                    c.trials,
                    c.failures
                );
            }
        }
        if !self.solver_runs.is_empty() {
            let _ = writeln!(s, "solver            case     density   mean R_E    median s   converged");
            for case in &md.config.cases {
                for &d in &md.config.densities {
                    for &solver in &md.config.solvers {
                        let runs = self.solver_records(solver, case, d);
                        if runs.is_empty() {
                            continue;
                        }
                        let re = mean(&runs.iter().map(|r| r.r_e).collect::<Vec<_>>());
                        let t = median(&runs.iter().map(|r| r.seconds).collect::<Vec<_>>());
                        let conv = runs.iter().filter(|r| r.converged).count();
                        let _ = writeln!(
                            s,
                            "{:<17} {:<8} {:<9} {:<11.3e} {:<10.4} {}/{}",
                            solver.name(),
                            case,
                            d,
                            re,
                            t,
                            conv,
                            runs.len()
                        );
                    }
                }
            }
        }
        s
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Default sweep: `points` evenly spaced values over
/// `[0.5 chi2(psi, 0.5), 2 chi2(psi, 0.99)]`.
pub fn default_tau_grid(psi: usize, points: usize) -> Result<Vec<f64>> {
    let lo = 0.5 * chi_square_threshold(psi, 0.5)?;
    let hi = 2.0 * chi_square_threshold(psi, 0.99)?;
    let step = (hi - lo) / (points.max(2) - 1) as f64;
    Ok((0..points.max(2)).map(|k| lo + step * k as f64).collect())
}

fn sweep(cfg: &ExperimentConfig, psi: usize, threshold: f64) -> Result<Vec<f64>> {
    let mut grid = match &cfg.tau {
        Some(t) => t.clone(),
        None => default_tau_grid(psi, cfg.tau_points)?,
    };
    if !grid.contains(&threshold) {
        grid.push(threshold);
        grid.sort_by(f64::total_cmp);
    }
    Ok(grid)
}

fn curves(records: &[TrialRecord], labels: &[String], grid: &[f64]) -> Vec<PmisCurve> {
    labels
        .iter()
        .map(|label| {
            let arm: Vec<&TrialRecord> = records.iter().filter(|r| &r.label == label).collect();
            let mut w: Vec<f64> = arm.iter().filter_map(|r| r.wsse).collect();
            w.sort_by(f64::total_cmp);
            let n = w.len();
            let p_mis = grid
                .iter()
                .map(|tau| if n == 0 { 0.0 } else { w.partition_point(|v| v < tau) as f64 / n as f64 })
                .collect();
            PmisCurve { label: label.clone(), tau: grid.to_vec(), p_mis, trials: n, failures: arm.len() - n }
        })
        .collect()
}

fn git_hash() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "--short", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn run_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

struct Grid {
    jac: DcJacobian,
    x0: DVector<f64>,
}

impl Grid {
    fn load(spec: &str) -> Result<Self> {
        let case = load_case(spec)?;
        let jac = build_jacobian(&case)?;
        let x0 = jac.operating_point(&case)?;
        Ok(Grid { jac, x0 })
    }
}

/// Seeds used inside one trial. All of them are drawn every time, in a fixed
/// order, so changing the strategy list does not move the others.
struct TrialSeeds {
    simulator: u64,
    fresh: u64,
    gross: u64,
    strategy: [u64; 5],
}

impl TrialSeeds {
    fn draw(master: u64, trial: usize) -> Self {
        let mut rng = trial_rng(master, trial as u64);
        TrialSeeds {
            simulator: rng.random(),
            fresh: rng.random(),
            gross: rng.random(),
            strategy: std::array::from_fn(|_| rng.random()),
        }
    }

    fn for_strategy(&self, s: AttackStrategy) -> ChaCha8Rng {
        let k = AttackStrategy::ALL.iter().position(|x| *x == s).expect("listed");
        ChaCha8Rng::seed_from_u64(self.strategy[k])
    }
}

fn record(trial: usize, label: &str, out: Result<(f64, usize)>) -> TrialRecord {
    match out {
        Ok((wsse, rank)) => TrialRecord { trial, label: label.into(), wsse: Some(wsse), rank, error: None },
        Err(e) => TrialRecord { trial, label: label.into(), wsse: None, rank: 0, error: Some(e.to_string()) },
    }
}

/// Build one strategy's attack on `z` and return the attacked WSSE and rank.
fn attack_wsse(
    cfg: &ExperimentConfig,
    grid: &Grid,
    wls: &Wls,
    strategy: AttackStrategy,
    window: &nalgebra::DMatrix<f64>,
    z: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let settings = cfg.blind_settings();
    let (z_attack, rank) = match strategy {
        AttackStrategy::KnownH => {
            let c = attack::gaussian(rng, grid.jac.state_count());
            let scale = cfg.attack_norm / (grid.jac.matrix() * &c).norm();
            let att = attack::attack_known_h(&grid.jac, &(c * scale))?;
            (att.apply(z)?, att.basis_rank_used)
        }
        AttackStrategy::Random => {
            let att = attack::attack_random(z.len(), cfg.attack_norm, rng)?;
            (att.apply(z)?, 0)
        }
        AttackStrategy::PcaBlind | AttackStrategy::SvdBlind => {
            let method = if strategy == AttackStrategy::PcaBlind { BasisMethod::Pca } else { BasisMethod::Svd };
            let b = attack::attack_from_window(window, method, &settings, z, rng)?;
            (b.z_attack, b.basis.rho)
        }
        AttackStrategy::AlmBlind => {
            let b = attack::attack_alm(window, &settings, z, rng)?;
            (b.z_attack, b.basis.rho)
        }
    };
    Ok((wls.detect_with_threshold(&z_attack, 0.0)?.wsse, rank))
}

/// Data for one trial: the detector, the (possibly corrupted) attacker
/// window, the clean window and a fresh measurement vector.
struct TrialData {
    wls: Wls,
    clean: nalgebra::DMatrix<f64>,
    window: nalgebra::DMatrix<f64>,
    z: DVector<f64>,
}

fn trial_data(cfg: &ExperimentConfig, grid: &Grid, seeds: &TrialSeeds) -> Result<TrialData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.simulator);
    let sim = Simulator::new(&grid.jac, &grid.x0, cfg.state, Some(cfg.noise), &mut rng)?;
    let noise = sim.noise_model().ok_or_else(|| Error::contract("campaigns need a noise model"))?;
    let wls = Wls::new(&grid.jac, &noise)?;
    let mat = sim.window(cfg.t, &mut rng)?;
    let window = match cfg.gross_amount() {
        Some(amount) => corrupt(&mat, &GrossErrorSpec { amount, magnitude: cfg.gross_magnitude, seed: seeds.gross })?.z,
        None => mat.z.clone(),
    };
    let (z, _) = sim.snapshot(&mut ChaCha8Rng::seed_from_u64(seeds.fresh));
    Ok(TrialData { wls, clean: mat.z, window, z })
}

fn campaign_threshold(cfg: &ExperimentConfig, grid: &Grid) -> Result<(usize, f64)> {
    let dof = grid.jac.dof();
    Ok((dof, chi_square_threshold(dof, cfg.confidence)?))
}

/// P_mis campaign: every trial simulates a window and a fresh vector, builds
/// each strategy's attack and records the attacked WSSE next to the
/// unattacked one.
pub fn run_pmis_campaign(cfg: &ExperimentConfig) -> Result<CampaignResult> {
    cfg.validate()?;
    let grid = Grid::load(&cfg.case)?;
    let (dof, threshold) = campaign_threshold(cfg, &grid)?;
    let one = |trial: usize| -> Vec<TrialRecord> {
        let seeds = TrialSeeds::draw(cfg.seed, trial);
        let data = match trial_data(cfg, &grid, &seeds) {
            Ok(d) => d,
            Err(e) => {
                return std::iter::once(NO_ATTACK.to_string())
                    .chain(cfg.strategies.iter().map(|s| s.name().to_string()))
                    .map(|l| record(trial, &l, Err(Error::Numerical(format!("trial setup: {e}")))))
                    .collect();
            }
        };
        let mut out =
            vec![record(trial, NO_ATTACK, data.wls.detect_with_threshold(&data.z, threshold).map(|o| (o.wsse, 0)))];
        for &s in &cfg.strategies {
            let mut rng = seeds.for_strategy(s);
            out.push(record(trial, s.name(), attack_wsse(cfg, &grid, &data.wls, s, &data.window, &data.z, &mut rng)));
        }
        out
    };
    let records: Vec<TrialRecord> =
        run_pool(cfg.workers, || (0..cfg.trials).into_par_iter().flat_map_iter(one).collect())?;
    let mut labels = vec![NO_ATTACK.to_string()];
    labels.extend(cfg.strategies.iter().map(|s| s.name().to_string()));
    let grid_tau = sweep(cfg, dof, threshold)?;
    Ok(CampaignResult {
        curves: curves(&records, &labels, &grid_tau),
        trials: records,
        solver_runs: Vec::new(),
        metadata: Metadata {
            seed: cfg.seed,
            git_hash: git_hash(),
            config: cfg.clone(),
            threshold: Some(threshold),
            dof: Some(dof),
        },
    })
}

/// Gross-error study: per trial, the PCA attack and the ALM attack are both
/// built from the corrupted window; the PCA attack on the same window before
/// corruption and the unattacked vector serve as controls.
pub fn run_gross_error_study(cfg: &ExperimentConfig) -> Result<CampaignResult> {
    cfg.validate()?;
    let grid = Grid::load(&cfg.case)?;
    let (dof, threshold) = campaign_threshold(cfg, &grid)?;
    let arms = [NO_ATTACK, PCA_CLEAN, AttackStrategy::PcaBlind.name(), AttackStrategy::AlmBlind.name()];
    let one = |trial: usize| -> Vec<TrialRecord> {
        let seeds = TrialSeeds::draw(cfg.seed, trial);
        let data = match trial_data(cfg, &grid, &seeds) {
            Ok(d) => d,
            Err(e) => {
                return arms
                    .iter()
                    .map(|l| record(trial, l, Err(Error::Numerical(format!("trial setup: {e}")))))
                    .collect();
            }
        };
        let pca = AttackStrategy::PcaBlind;
        // The clean and corrupted PCA arms share coefficients' randomness so
        // the only difference between them is the gross error.
        vec![
            record(trial, NO_ATTACK, data.wls.detect_with_threshold(&data.z, threshold).map(|o| (o.wsse, 0))),
            record(
                trial,
                PCA_CLEAN,
                attack_wsse(cfg, &grid, &data.wls, pca, &data.clean, &data.z, &mut seeds.for_strategy(pca)),
            ),
            record(
                trial,
                pca.name(),
                attack_wsse(cfg, &grid, &data.wls, pca, &data.window, &data.z, &mut seeds.for_strategy(pca)),
            ),
            record(
                trial,
                AttackStrategy::AlmBlind.name(),
                attack_wsse(
                    cfg,
                    &grid,
                    &data.wls,
                    AttackStrategy::AlmBlind,
                    &data.window,
                    &data.z,
                    &mut seeds.for_strategy(AttackStrategy::AlmBlind),
                ),
            ),
        ]
    };
    let records: Vec<TrialRecord> =
        run_pool(cfg.workers, || (0..cfg.trials).into_par_iter().flat_map_iter(one).collect())?;
    let labels: Vec<String> = arms.iter().map(|s| s.to_string()).collect();
    let grid_tau = sweep(cfg, dof, threshold)?;
    Ok(CampaignResult {
        curves: curves(&records, &labels, &grid_tau),
        trials: records,
        solver_runs: Vec::new(),
        metadata: Metadata {
            seed: cfg.seed,
            git_hash: git_hash(),
            config: cfg.clone(),
            threshold: Some(threshold),
            dof: Some(dof),
        },
    })
}

/// Solver benchmark: for each case, density and trial, one corrupted window
/// is decomposed by every solver in turn. Wall time covers the solve only.
///
/// Windows depend on (case, trial) and not on the density, so the densities
/// are paired as well as the solvers.
pub fn run_solver_benchmark(cfg: &ExperimentConfig) -> Result<CampaignResult> {
    cfg.validate()?;
    let grids: Vec<Grid> = cfg.cases.iter().map(|c| Grid::load(c)).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for ci in 0..cfg.cases.len() {
        for di in 0..cfg.densities.len() {
            for trial in 0..cfg.trials {
                jobs.push((ci, di, trial));
            }
        }
    }
    let one = |&(ci, di, trial): &(usize, usize, usize)| -> Result<Vec<SolverRecord>> {
        let seeds = TrialSeeds::draw(cfg.seed, trial);
        let grid = &grids[ci];
        // Mix the case into the simulator seed so cases do not share noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.simulator ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let sim = Simulator::new(&grid.jac, &grid.x0, cfg.state, Some(cfg.noise), &mut rng)?;
        let mat = sim.window(cfg.t, &mut rng)?;
        let density = cfg.densities[di];
        let z = if density > 0.0 {
            corrupt(
                &mat,
                &GrossErrorSpec {
                    amount: GrossAmount::Density(density),
                    magnitude: cfg.gross_magnitude,
                    seed: seeds.gross,
                },
            )?
            .z
        } else {
            mat.z
        };
        cfg.solvers
            .iter()
            .map(|&solver| {
                let problem = RpcaProblem::for_solver(z.clone(), solver).with_max_iter(cfg.max_iter);
                let d = solver.solve(&problem)?;
                Ok(SolverRecord {
                    trial,
                    solver,
                    case: cfg.cases[ci].clone(),
                    density,
                    r_e: d.rel_error(),
                    seconds: d.wall_time,
                    iterations: d.iterations,
                    converged: d.converged,
                })
            })
            .collect()
    };
    let runs: Vec<Vec<SolverRecord>> = run_pool(cfg.workers, || jobs.par_iter().map(one).collect::<Result<Vec<_>>>())??;
    Ok(CampaignResult {
        curves: Vec::new(),
        trials: Vec::new(),
        solver_runs: runs.into_iter().flatten().collect(),
        metadata: Metadata { seed: cfg.seed, git_hash: git_hash(), config: cfg.clone(), threshold: None, dof: None },
    })
}

/// Dispatch on `cfg.kind`.
pub fn run(cfg: &ExperimentConfig) -> Result<CampaignResult> {
    match cfg.kind {
        ExperimentKind::Pmis => run_pmis_campaign(cfg),
        ExperimentKind::GrossError => run_gross_error_study(cfg),
        ExperimentKind::SolverBench => run_solver_benchmark(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(kind);
        cfg.t = 200;
        cfg.trials = 6;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = ExperimentConfig::from_toml("kind = \"pmis\"").unwrap();
        assert_eq!(cfg.case, "case14");
        assert_eq!(cfg.t, 500);
        assert_eq!(cfg.strategies.len(), 5);
        assert_eq!(cfg.gamma, 0.995);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(ExperimentConfig::from_toml("kind = \"pmis\"\nbogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"pmis\"\ntrials = 0").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"pmis\"\ntau = []").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"pmis\"\ntau = [3.0, 2.0]").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"gross_error\"").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"nope\"").is_err());
        let text = "kind = \"pmis\"\nstrategies = [\"known_h\", \"alm_blind\"]\n[state]\nkind = \"angle_jitter\"\nsigma = 0.05\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.strategies, vec![AttackStrategy::KnownH, AttackStrategy::AlmBlind]);
        assert_eq!(cfg.state, StateModel::AngleJitter { sigma: 0.05 });
    }

    #[test]
    fn default_grid_spans_both_shoulders() {
        let g = default_tau_grid(41, 60).unwrap();
        assert_eq!(g.len(), 60);
        assert!((g[0] - 0.5 * chi_square_threshold(41, 0.5).unwrap()).abs() < 1e-12);
        assert!((g[59] - 2.0 * chi_square_threshold(41, 0.99).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pmis_curves_are_monotone_probabilities() {
        let res = run_pmis_campaign(&small(ExperimentKind::Pmis)).unwrap();
        assert_eq!(res.curves.len(), 6);
        for c in &res.curves {
            assert_eq!(c.trials + c.failures, 6);
            assert!(c.p_mis.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!(c.p_mis.windows(2).all(|w| w[0] <= w[1]), "{}", c.label);
        }
        let tau = res.metadata.threshold.unwrap();
        assert!((tau - 56.942).abs() < 1e-3);
        assert!(res.curve(NO_ATTACK).unwrap().tau.contains(&tau));
    }

    #[test]
    fn one_trial_gives_zero_or_one() {
        let mut cfg = small(ExperimentKind::Pmis);
        cfg.trials = 1;
        let res = run_pmis_campaign(&cfg).unwrap();
        for c in &res.curves {
            assert!(c.p_mis.iter().all(|p| *p == 0.0 || *p == 1.0));
        }
    }

    #[test]
    fn campaigns_are_reproducible_and_thread_independent() {
        let cfg = small(ExperimentKind::Pmis);
        let a = run_pmis_campaign(&cfg).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.workers = Some(3);
        let b = run_pmis_campaign(&cfg2).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.curves, b.curves);
    }

    #[test]
    fn trials_replay_in_isolation() {
        let cfg = small(ExperimentKind::Pmis);
        let full = run_pmis_campaign(&cfg).unwrap();
        let mut first = cfg.clone();
        first.trials = 3;
        let part = run_pmis_campaign(&first).unwrap();
        let head: Vec<_> = full.trials.iter().filter(|r| r.trial < 3).cloned().collect();
        assert_eq!(part.trials, head);
    }

    #[test]
    fn strategy_list_does_not_move_other_arms() {
        let cfg = small(ExperimentKind::Pmis);
        let full = run_pmis_campaign(&cfg).unwrap();
        let mut only = cfg.clone();
        only.strategies = vec![AttackStrategy::SvdBlind];
        let part = run_pmis_campaign(&only).unwrap();
        assert_eq!(full.wsse("svd_blind"), part.wsse("svd_blind"));
        assert_eq!(full.wsse(NO_ATTACK), part.wsse(NO_ATTACK));
    }

    #[test]
    fn gross_error_study_reports_all_arms() {
        let mut cfg = small(ExperimentKind::GrossError);
        cfg.gross_count = Some(1);
        let res = run_gross_error_study(&cfg).unwrap();
        let labels: Vec<_> = res.curves.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, [NO_ATTACK, PCA_CLEAN, "pca_blind", "alm_blind"]);
        // One gross error makes the PCA attack loud.
        let tau = res.metadata.threshold.unwrap();
        assert!(res.p_mis_at("pca_blind", tau).unwrap() < 0.5);
    }

    #[test]
    fn solver_bench_is_paired_and_deterministic() {
        let mut cfg = small(ExperimentKind::SolverBench);
        cfg.trials = 2;
        cfg.cases = vec!["case14".into()];
        cfg.solvers = vec![Solver::Alm, Solver::Apg];
        let a = run_solver_benchmark(&cfg).unwrap();
        assert_eq!(a.solver_runs.len(), 2 * 2 * 2);
        let b = run_solver_benchmark(&cfg).unwrap();
        let re = |r: &CampaignResult| r.solver_runs.iter().map(|x| x.r_e).collect::<Vec<_>>();
        assert_eq!(re(&a), re(&b));
        assert!(a.solver_runs.iter().all(|r| r.converged && r.r_e <= 1e-6));
    }

    #[test]
    fn writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let res = run_pmis_campaign(&small(ExperimentKind::Pmis)).unwrap();
        res.write(dir.path()).unwrap();
        let pmis = std::fs::read_to_string(dir.path().join("pmis.csv")).unwrap();
        assert!(pmis.starts_with("seed,strategy,tau,p_mis,trials,failures"));
        assert!(pmis.contains("11,no_attack,"));
        let trials = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
        assert_eq!(trials.lines().count(), 1 + 6 * 6);
        assert!(std::fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("P_mis@threshold"));
        let echo = ExperimentConfig::from_path(dir.path().join("config.toml")).unwrap();
        assert_eq!(echo, res.metadata.config);
    }

    #[test]
    fn mean_and_median() {
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
