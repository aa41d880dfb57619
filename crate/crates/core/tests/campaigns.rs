use gridfdi::attack::AttackStrategy;
use gridfdi::harness::{run, ExperimentConfig, ExperimentKind, NO_ATTACK};
use gridfdi::recover::Solver;

fn pmis(trials: usize, strategies: Vec<AttackStrategy>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Pmis);
    cfg.seed = 42;
    cfg.trials = trials;
    cfg.strategies = strategies;
    cfg
}

#[test]
fn no_attack_false_alarm_rate() {
    let res = run(&pmis(2400, vec![])).unwrap();
    let tau = res.metadata.threshold.unwrap();
    let alarms = 1.0 - res.p_mis_at(NO_ATTACK, tau).unwrap();
    assert!((alarms - 0.05).abs() <= 0.02, "false-alarm rate {alarms}");
}

#[test]
fn curves_are_monotone_in_tau() {
    let res = run(&pmis(60, vec![AttackStrategy::KnownH, AttackStrategy::Random, AttackStrategy::PcaBlind])).unwrap();
    assert_eq!(res.curves.len(), 4);
    for c in &res.curves {
        assert!(c.tau.windows(2).all(|w| w[0] < w[1]));
        assert!(c.p_mis.windows(2).all(|w| w[0] <= w[1]), "{}", c.label);
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let mut cfg = pmis(24, vec![AttackStrategy::KnownH, AttackStrategy::SvdBlind]);
    cfg.workers = Some(1);
    let one = run(&cfg).unwrap();
    cfg.workers = Some(3);
    let three = run(&cfg).unwrap();
    assert_eq!(one.trials, three.trials);
    assert_eq!(one.curves, three.curves);
}

#[test]
fn trials_reproduce_in_isolation() {
    let full = run(&pmis(10, vec![AttackStrategy::PcaBlind])).unwrap();
    let short = run(&pmis(4, vec![AttackStrategy::PcaBlind])).unwrap();
    assert_eq!(&full.trials[..short.trials.len()], &short.trials[..]);
}

#[test]
fn solver_benchmark_is_repeatable() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::SolverBench);
    cfg.trials = 2;
    cfg.cases = vec!["case14".into()];
    cfg.solvers = vec![Solver::Alm, Solver::Apg];
    cfg.densities = vec![0.01];
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    let re = |r: &gridfdi::harness::CampaignResult| r.solver_runs.iter().map(|s| s.r_e).collect::<Vec<_>>();
    assert_eq!(re(&a), re(&b));
    assert!(a.solver_runs.iter().all(|r| r.converged && r.r_e <= 1e-6));
}

#[test]
fn campaign_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&pmis(8, vec![AttackStrategy::Random])).unwrap();
    res.write(dir.path()).unwrap();
    let pmis = std::fs::read_to_string(dir.path().join("pmis.csv")).unwrap();
    assert!(pmis.starts_with("seed,strategy,tau,p_mis,trials"));
    let cfg = ExperimentConfig::from_path(dir.path().join("config.toml")).unwrap();
    assert_eq!(cfg.trials, 8);
    assert!(std::fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("no_attack"));
}
