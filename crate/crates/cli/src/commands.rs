use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use sysrisk_core::config::RunConfig;
use sysrisk_core::scenario::{load_scenarios, DiscreteLaw, ScenarioFormat};
use sysrisk_core::studies::{
    default_stability_setup, run_benchmark, run_law_invariance_study, run_reduction_study,
    run_stability_study, BenchSize, StabilitySetup, StudyReport,
};
use sysrisk_core::{
    solve_supconv, systemic_risk, DVector, Error, RiskStatus, ScenarioSet, SystemicRiskResult,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_SOLVER: u8 = 2;

/// Solver failures map to 2; bad input, files and everything else to 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(
            Error::Domain(_)
            | Error::NoConvergence { .. }
            | Error::Infeasible(_)
            | Error::UnboundedBelow(_),
        ) => EXIT_SOLVER,
        _ => EXIT_INVALID,
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn load_config(path: &Path, tol: Option<f64>) -> Result<RunConfig> {
    let mut cfg =
        RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(t) = tol {
        cfg.solver = cfg.solver.with_tolerance(t);
    }
    cfg.solver.validate()?;
    Ok(cfg)
}

fn scenarios(cfg: &RunConfig, over: Option<&Path>) -> Result<ScenarioSet> {
    match over {
        Some(path) => load_scenarios(path, ScenarioFormat::from_path(path))
            .with_context(|| format!("loading scenarios {}", path.display())),
        None => Ok(cfg.scenarios()?.clone()),
    }
}

/// Solver outcome, or the status JSON and exit code of a problem without an
/// optimal budget.
type Solved = std::result::Result<SystemicRiskResult, (String, u8)>;

fn solve(cfg: &RunConfig, set: &ScenarioSet) -> Result<Solved> {
    let map = cfg.map()?;
    match systemic_risk(set, &cfg.utility, &map, &cfg.solver) {
        Ok(r) => Ok(Ok(r)),
        Err(err) => match RiskStatus::of_error(&err) {
            Some(status) => {
                let body = json!({"status": status, "message": err.to_string()});
                Ok(Err((serde_json::to_string_pretty(&body)?, EXIT_SOLVER)))
            }
            None => Err(err.into()),
        },
    }
}

pub fn risk(
    config: &Path,
    over: Option<&Path>,
    tol: Option<f64>,
    out: Option<&Path>,
) -> Result<u8> {
    let cfg = load_config(config, tol)?;
    match solve(&cfg, &scenarios(&cfg, over)?)? {
        Ok(r) => {
            emit(&serde_json::to_string_pretty(&r.to_json())?, out)?;
            Ok(EXIT_OK)
        }
        Err((body, code)) => {
            emit(&body, out)?;
            Ok(code)
        }
    }
}

pub fn allocation_csv(r: &SystemicRiskResult, set: &ScenarioSet) -> String {
    let n = r.allocation.ncols();
    let mut text = String::from("scenario");
    for i in 1..=n {
        text.push_str(&format!(",Y{i}"));
    }
    text.push('\n');
    for (k, row) in r.allocation.row_iter().enumerate() {
        match set.labels() {
            Some(labels) => text.push_str(&labels[k]),
            None => text.push_str(&(k + 1).to_string()),
        }
        for y in row.iter() {
            text.push_str(&format!(",{y:?}"));
        }
        text.push('\n');
    }
    text
}

pub fn alloc(
    config: &Path,
    over: Option<&Path>,
    tol: Option<f64>,
    out: Option<&Path>,
    json_out: Option<&Path>,
) -> Result<u8> {
    let cfg = load_config(config, tol)?;
    let set = scenarios(&cfg, over)?;
    match solve(&cfg, &set)? {
        Ok(r) => {
            emit(&allocation_csv(&r, &set), out)?;
            if let Some(path) = json_out {
                emit(&serde_json::to_string_pretty(&r.to_json())?, Some(path))?;
            }
            Ok(EXIT_OK)
        }
        Err((body, code)) => {
            eprintln!("{body}");
            Ok(code)
        }
    }
}

pub fn supconv(config: &Path, y: &[f64], tol: Option<f64>, out: Option<&Path>) -> Result<u8> {
    let cfg = load_config(config, tol)?;
    let map = cfg.map()?;
    let sol = solve_supconv(&cfg.utility, &map, &DVector::from_row_slice(y), &cfg.solver)?;
    let body = json!({
        "y": sol.y.as_slice(),
        "value": sol.value,
        "gradient": sol.multiplier.as_slice(),
        "theta": sol.optimizer.as_slice(),
        "kkt_residual": sol.kkt_residual,
        "iterations": sol.iterations,
    });
    emit(&serde_json::to_string_pretty(&body)?, out)?;
    Ok(EXIT_OK)
}

pub fn validate(config: &Path, seed: u64, samples: usize, out: Option<&Path>) -> Result<u8> {
    let cfg = load_config(config, None)?;
    let map = cfg.validation();
    let utility = cfg.utility.validate_assumptions(samples, seed);
    let mut issues = map.issues.clone();
    if map.cols != cfg.utility.dim() {
        issues.push(format!(
            "aggregation has {} columns but the utility has {} firms",
            map.cols,
            cfg.utility.dim()
        ));
    }
    if !utility.passed() {
        issues.push(format!(
            "utility assumptions not met: {}",
            utility.justification
        ));
    }
    let valid = issues.is_empty();
    let body = json!({"valid": valid, "issues": issues, "aggregation": map, "utility": utility});
    emit(&serde_json::to_string_pretty(&body)?, out)?;
    Ok(if valid { EXIT_OK } else { EXIT_INVALID })
}

pub enum StudyRequest {
    Reduction { count: usize },
    LawInvariance { count: usize },
    Stability { sizes: Vec<usize>, seeds: usize },
}

pub struct StudyOptions {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
    pub no_timings: bool,
}

fn stability_setup(cfg: Option<&RunConfig>) -> Result<StabilitySetup> {
    let Some(cfg) = cfg.filter(|c| c.scenarios.is_some()) else {
        return Ok(default_stability_setup());
    };
    let set = cfg.scenarios()?;
    let atoms = set
        .positions()
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    Ok(StabilitySetup {
        sampler: Box::new(DiscreteLaw::new(atoms, set.probs().to_vec())?),
        utility: cfg.utility.clone(),
        map: cfg.map()?,
        grid_points: default_stability_setup().grid_points,
    })
}

pub fn study(request: StudyRequest, opts: &StudyOptions) -> Result<u8> {
    let config = match &opts.config {
        Some(path) => Some(load_config(path, opts.tol)?),
        None => None,
    };
    let mut solver = config.as_ref().map(|c| c.solver).unwrap_or_default();
    if let Some(t) = opts.tol {
        solver = solver.with_tolerance(t);
        solver.validate()?;
    }
    let (name, report): (&str, StudyReport) = match request {
        StudyRequest::Reduction { count } => {
            ("reduction", run_reduction_study(count, opts.seed, &solver))
        }
        StudyRequest::LawInvariance { count } => (
            "law-invariance",
            run_law_invariance_study(count, opts.seed, &solver),
        ),
        StudyRequest::Stability { sizes, seeds } => {
            let setup = stability_setup(config.as_ref())?;
            (
                "stability",
                run_stability_study(&setup, &sizes, seeds, opts.seed, &solver)?,
            )
        }
    };
    let report = if opts.no_timings {
        report.without_timings()
    } else {
        report
    };
    let path = opts
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{name}-report.json")));
    emit(&report.to_json_pretty(), Some(&path))?;
    println!(
        "{name}: {} ({} instances) -> {}",
        if report.passed { "passed" } else { "FAILED" },
        report.instances.len(),
        path.display()
    );
    Ok(if report.passed { EXIT_OK } else { EXIT_INVALID })
}

fn parse_size(text: &str) -> Result<BenchSize> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!("bad size {text:?}, expected NxMxK"))?;
    let [n, m, k] = parts[..] else {
        bail!("bad size {text:?}, expected NxMxK");
    };
    if n == 0 || m == 0 || k == 0 || m > n {
        bail!("bad size {text:?}: need 1 <= M <= N and K >= 1");
    }
    Ok(BenchSize { n, m, k })
}

pub fn bench(sizes: &[String], repetitions: usize, seed: u64, out: Option<&Path>) -> Result<u8> {
    let sizes = sizes
        .iter()
        .map(|s| parse_size(s))
        .collect::<Result<Vec<_>>>()?;
    let report = run_benchmark(&sizes, repetitions, seed);
    emit(&report.to_json_pretty(), out)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_INVALID })
}
