//! `gridfdi`: command-line front end for the false-data-injection laboratory.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 when a
//! computation fails.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridfdi::attack::{self, AttackStrategy, BlindSettings};
use gridfdi::casefile::load_case;
use gridfdi::dcmodel::{build_jacobian, DcJacobian};
use gridfdi::estimator::{scrub, NoiseModel, Wls};
use gridfdi::harness::{self, ExperimentConfig};
use gridfdi::measgen::{corrupt, read_matrix_csv, GenerateSpec, GrossErrorSpec, MeasurementMatrix, Simulator};
use gridfdi::recover::{RpcaProblem, Solver};
use gridfdi::subspace::BasisMethod;
use gridfdi::{DVector, GridCase};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "gridfdi", version, about = "DC state estimation and false-data-injection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print bus, branch, sensor and state counts and the detection threshold.
    CaseInfo(CaseInfoArgs),
    /// Estimate states and run the bad-data test on measurement vectors.
    Estimate(EstimateArgs),
    /// Build one attack on a simulated snapshot and report its detectability.
    Attack(AttackArgs),
    /// Separate a measurement window into low-rank and sparse parts.
    Recover(RecoverArgs),
    /// Run a Monte Carlo campaign described by a TOML config.
    Campaign(CampaignArgs),
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (or directory for `campaign`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args, Debug)]
struct CaseInfoArgs {
    /// Case file or shipped fixture name (`case14`, `case30`, `case57`).
    case: String,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long, default_value = "case14")]
    case: String,
    /// CSV of measurement vectors, one per row. Without it a snapshot is
    /// simulated from `--seed`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Uniform sensor noise standard deviation; required with `--input`.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    /// Remove sensors by largest normalized residual until the test passes.
    #[arg(long, default_value_t = 0)]
    scrub_rounds: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long, default_value = "case14")]
    case: String,
    #[arg(long, default_value = "pca_blind", value_parser = parse_strategy)]
    strategy: AttackStrategy,
    /// `||a||` of the attack.
    #[arg(long, default_value_t = 1.0)]
    norm: f64,
    /// Rows in the attacker's window.
    #[arg(long, default_value_t = 500)]
    t: usize,
    /// Fraction of window entries replaced by gross errors.
    #[arg(long, default_value_t = 0.0)]
    density: f64,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct RecoverArgs {
    #[arg(long, default_value = "case14")]
    case: String,
    /// CSV measurement window; simulated from `--seed` when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "alm", value_parser = parse_solver)]
    solver: Solver,
    #[arg(long, default_value_t = 500)]
    t: usize,
    #[arg(long, default_value_t = 0.01)]
    density: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 3000)]
    max_iter: usize,
    /// Write the convergence trace here as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CampaignArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<AttackStrategy, String> {
    s.parse().map_err(|e: gridfdi::Error| e.to_string())
}

fn parse_solver(s: &str) -> Result<Solver, String> {
    s.parse().map_err(|e: gridfdi::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<gridfdi::Error>().is_some_and(|e| e.is_validation())
                || e.downcast_ref::<Usage>().is_some();
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

/// Bad argument combination that clap cannot express.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CaseInfo(a) => case_info(a),
        Command::Estimate(a) => estimate(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Recover(a) => recover(a),
        Command::Campaign(a) => campaign(a),
    }
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn grid(case: &str) -> Result<(GridCase, DcJacobian, DVector<f64>)> {
    let case = load_case(case)?;
    let jac = build_jacobian(&case)?;
    let x0 = jac.operating_point(&case)?;
    Ok((case, jac, x0))
}

fn case_info(a: CaseInfoArgs) -> Result<()> {
    let (case, jac, _) = grid(&a.case)?;
    let tau = gridfdi::estimator::chi_square_threshold(jac.dof(), a.confidence)?;
    let branches = case.in_service_branches().count();
    let mut w = sink(&a.common.out)?;
    match a.common.format {
        Format::Text => {
            writeln!(w, "buses={} branches={}", case.buses.len(), branches)?;
            writeln!(w, "m={} n={} psi={}", jac.sensor_count(), jac.state_count(), jac.dof())?;
            writeln!(w, "threshold={tau:.4} (confidence {})", a.confidence)?;
            writeln!(w, "reference_bus={}", jac.reference_bus())?;
        }
        Format::Csv => {
            writeln!(w, "buses,branches,m,n,psi,threshold")?;
            writeln!(
                w,
                "{},{},{},{},{},{tau}",
                case.buses.len(),
                branches,
                jac.sensor_count(),
                jac.state_count(),
                jac.dof()
            )?;
        }
    }
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let (_, jac, x0) = grid(&a.case)?;
    let (rows, noise) = match &a.input {
        Some(path) => {
            let sigma = a.sigma.ok_or_else(|| Usage("--input needs --sigma".into()))?;
            let z = read_matrix_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
            let rows: Vec<DVector<f64>> = z.row_iter().map(|r| r.transpose()).collect();
            (rows, NoiseModel::uniform(jac.sensor_count(), sigma)?)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
            let sim = Simulator::new(&jac, &x0, Default::default(), Some(Default::default()), &mut rng)?;
            let noise = match a.sigma {
                Some(s) => NoiseModel::uniform(jac.sensor_count(), s)?,
                None => sim.noise_model().expect("simulator has noise"),
            };
            (vec![sim.snapshot(&mut rng).0], noise)
        }
    };
    let wls = Wls::new(&jac, &noise)?;
    let mut w = sink(&a.common.out)?;
    if let Format::Csv = a.common.format {
        writeln!(w, "row,wsse,threshold,verdict,lnr_sensor,lnr,removed")?;
    }
    for (k, z) in rows.iter().enumerate() {
        let (out, removed) = if a.scrub_rounds > 0 {
            let rep = scrub(&jac, z, &noise, a.confidence, a.scrub_rounds)?;
            (rep.outcome, rep.removed)
        } else {
            (wls.detect(z, a.confidence)?, Vec::new())
        };
        let (i, lnr) = out.largest_normalized();
        let verdict = match out.verdict {
            gridfdi::Verdict::Clean => "clean",
            gridfdi::Verdict::BadData => "bad_data",
        };
        let removed = removed.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
        match a.common.format {
            Format::Text => writeln!(
                w,
                "row {k}: wsse={:.4} threshold={:.4} verdict={verdict} lnr={lnr:.3} (sensor {i}) removed=[{removed}]",
                out.wsse, out.threshold
            )?,
            Format::Csv => writeln!(w, "{k},{},{},{verdict},{i},{lnr},{removed}", out.wsse, out.threshold)?,
        }
    }
    Ok(())
}

fn window(
    jac: &DcJacobian,
    x0: &DVector<f64>,
    t: usize,
    density: f64,
    seed: u64,
) -> Result<(Simulator, MeasurementMatrix, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GenerateSpec { t, state: Default::default(), noise: Some(Default::default()) };
    let sim = Simulator::new(jac, x0, spec.state, spec.noise, &mut rng)?;
    let mut mat = sim.window(t, &mut rng)?;
    if density > 0.0 {
        mat = corrupt(&mat, &GrossErrorSpec::density(density, seed.wrapping_add(1)))?;
    }
    Ok((sim, mat, rng))
}

fn attack_cmd(a: AttackArgs) -> Result<()> {
    let (_, jac, x0) = grid(&a.case)?;
    let (sim, mat, mut rng) = window(&jac, &x0, a.t, a.density, a.common.seed)?;
    let wls = Wls::new(&jac, &sim.noise_model().expect("simulator has noise"))?;
    let (z, _) = sim.snapshot(&mut rng);
    let settings = BlindSettings { norm: a.norm, ..Default::default() };
    let vector = match a.strategy {
        AttackStrategy::KnownH => {
            let c = attack::gaussian(&mut rng, jac.state_count());
            let c = &c * (a.norm / (jac.matrix() * &c).norm());
            attack::attack_known_h(&jac, &c)?
        }
        AttackStrategy::Random => attack::attack_random(jac.sensor_count(), a.norm, &mut rng)?,
        AttackStrategy::PcaBlind => {
            attack::attack_from_window(&mat.z, BasisMethod::Pca, &settings, &z, &mut rng)?.attack
        }
        AttackStrategy::SvdBlind => {
            attack::attack_from_window(&mat.z, BasisMethod::Svd, &settings, &z, &mut rng)?.attack
        }
        AttackStrategy::AlmBlind => attack::attack_alm(&mat.z, &settings, &z, &mut rng)?.attack,
    };
    let before = wls.detect(&z, a.confidence)?;
    let after = wls.detect(&vector.apply(&z)?, a.confidence)?;
    let shift = (&after.state - &before.state).norm();
    if let Some(path) = &a.common.out {
        vector
            .write_csv(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))?;
    }
    let mut w = io::stdout().lock();
    let stealthy = after.wsse < after.threshold;
    match a.common.format {
        Format::Text => {
            writeln!(w, "strategy={} rank={} |a|={:.4}", vector.strategy, vector.basis_rank_used, vector.a.norm())?;
            writeln!(w, "wsse before={:.4} after={:.4} threshold={:.4}", before.wsse, after.wsse, after.threshold)?;
            writeln!(w, "state shift={shift:.4} stealthy={stealthy}")?;
        }
        Format::Csv => {
            writeln!(w, "seed,strategy,rank,norm,wsse_before,wsse_after,threshold,state_shift,stealthy")?;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{shift},{stealthy}",
                a.common.seed,
                vector.strategy,
                vector.basis_rank_used,
                vector.a.norm(),
                before.wsse,
                after.wsse,
                after.threshold
            )?;
        }
    }
    Ok(())
}

fn recover(a: RecoverArgs) -> Result<()> {
    let z = match &a.input {
        Some(path) => read_matrix_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?,
        None => {
            let (_, jac, x0) = grid(&a.case)?;
            window(&jac, &x0, a.t, a.density, a.common.seed)?.1.z
        }
    };
    let mut problem = RpcaProblem::for_solver(z, a.solver).with_max_iter(a.max_iter);
    if let Some(l) = a.lambda {
        problem = problem.with_lambda(l);
    }
    if let Some(t) = a.tol {
        problem = problem.with_tol(t);
    }
    let d = a.solver.solve(&problem)?;
    if let Some(path) = &a.trace {
        d.write_trace_csv(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))?;
    }
    let rank = d.trace.last().map_or(0, |t| t.rank);
    let support = d.trace.last().map_or(0, |t| t.support);
    let mut w = sink(&a.common.out)?;
    match a.common.format {
        Format::Text => {
            writeln!(
                w,
                "solver={} R_E={:.3e} iterations={} converged={}",
                d.solver,
                d.rel_error(),
                d.iterations,
                d.converged
            )?;
            writeln!(w, "rank(A)={rank} support(E)={support} seconds={:.4}", d.wall_time)?;
        }
        Format::Csv => {
            writeln!(w, "seed,solver,r_e,iterations,converged,rank,support,seconds")?;
            writeln!(
                w,
                "{},{},{:e},{},{},{rank},{support},{}",
                a.common.seed,
                d.solver,
                d.rel_error(),
                d.iterations,
                d.converged,
                d.wall_time
            )?;
        }
    }
    Ok(())
}

fn campaign(a: CampaignArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out_dir = Some(o);
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    cfg.validate()?;
    let res = harness::run(&cfg)?;
    let dir: &Path = cfg.out_dir.as_deref().unwrap_or(Path::new("results"));
    res.write(dir)?;
    print!("{}", res.summary());
    println!("wrote {}", dir.display());
    Ok(())
}
