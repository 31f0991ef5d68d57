//! Command-line front end: argument definitions and the four workflows.
//!
//! Exit codes: 0 success, 1 configuration or output error, 2 solver or
//! simulation failure, 3 rank-condition failure, 4 robustness-invariant
//! failure. Failures leave an `error.txt` diagnostic in the output
//! directory.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mfsc_core::dualloop::IterationTrace;
use mfsc_core::linalg;
use mfsc_core::robust::{self, IssSummary};

use crate::config::{self, ConfigError, ExperimentConfig};
use crate::output::{self, Check, RunDir};
use crate::pipeline::{self, LearnedSolution, LoopRun, ModelSolution, PipelineError};
use crate::sim::{self, MeanFieldGains};

#[derive(Debug, Parser)]
#[command(name = "mfsc", version, about = "Dual-loop Riccati solvers and data-driven mean-field social control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (defaults to the built-in two-state example).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `[output] dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Simulation seed (overrides `[sim] seed`).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Perturbation magnitudes, e.g. "0,1e-4,1e-3" (overrides `[robust] grid`).
    #[arg(long, global = true, value_name = "LIST", allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Skip the data-driven phase of `reproduce`.
    #[arg(long, global = true)]
    pub skip_learn: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Model-based dual-loop solves.
    Solve,
    /// Data-driven learning from simulated agents.
    Learn,
    /// Disturbance sweep of the inexact iterations.
    Robust,
    /// Solve, sweep, learn and simulate the population.
    Reproduce,
    /// Print the effective configuration.
    ShowConfig,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Learn => "learn",
            Command::Robust => "robust",
            Command::Reproduce => "reproduce",
            Command::ShowConfig => "show-config",
        }
    }
}

/// A failed run with its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
    /// Iterations recorded before a solver failure.
    pub trace: Option<IterationTrace>,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into(), trace: None }
    }

    fn robust(violations: &[String]) -> Self {
        Self { code: 4, message: format!("robustness invariants violated: {}", violations.join("; ")), trace: None }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::config(format!("cannot write output: {e}"))
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        match e {
            PipelineError::Solver { trace, .. } => Self { code: 2, message, trace },
            PipelineError::Simulation { .. } => Self { code: 2, message, trace: None },
            PipelineError::Rank(_) => Self { code: 3, message, trace: None },
        }
    }
}

impl From<mfsc_core::Error> for Failure {
    fn from(e: mfsc_core::Error) -> Self {
        Self { code: 2, message: e.to_string(), trace: None }
    }
}

/// Loads the configuration and applies the command-line overrides.
pub fn effective_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::example(),
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if let Some(grid) = &cli.grid {
        let grid: Vec<f64> = config::parse_list(grid).map_err(|m| Failure::config(format!("--grid: {m}")))?;
        config::check_grid(&grid).map_err(|m| Failure::config(format!("--grid: {m}")))?;
        cfg.robust.grid = grid;
    }
    if let Some(out) = &cli.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

/// Runs one invocation and returns its exit code.
pub fn run(cli: &Cli) -> u8 {
    let cfg = match effective_config(cli) {
        Ok(cfg) => cfg,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return f.code;
        }
    };
    if cli.command == Command::ShowConfig {
        print!("{}", cfg.serialize());
        return 0;
    }
    let root = cfg.output.clone().unwrap_or_else(|| default_output().to_path_buf()).join(cli.command.name());
    let mut dir = match RunDir::create(&root) {
        Ok(dir) => dir,
        Err(e) => {
            eprintln!("error: cannot create {}: {e}", root.display());
            return 1;
        }
    };
    let result = match cli.command {
        Command::Solve => cmd_solve(&cfg, &mut dir).map(|_| ()),
        Command::Learn => cmd_learn(&cfg, &mut dir).map(|_| ()),
        Command::Robust => cmd_robust(&cfg, &mut dir).map(|_| ()),
        Command::Reproduce => cmd_reproduce(&cfg, &mut dir, cli.skip_learn).map(|_| ()),
        Command::ShowConfig => unreachable!("handled above"),
    };
    // Where the artifacts go is not part of what was computed.
    let text = ExperimentConfig { output: None, ..cfg.clone() }.serialize();
    let manifest =
        dir.write("config.ini", &text).and_then(|_| dir.write_manifest(cli.command.name(), cfg.sim.seed, &text));
    match (result, manifest) {
        (Ok(()), Ok(())) => {
            eprintln!("[{}] wrote {}", cli.command.name(), dir.path().display());
            0
        }
        (Ok(()), Err(e)) => {
            eprintln!("error: cannot write manifest: {e}");
            1
        }
        (Err(f), _) => {
            eprintln!("error: {}", f.message);
            write_diagnostic(&mut dir, &f);
            f.code
        }
    }
}

fn write_diagnostic(dir: &mut RunDir, f: &Failure) {
    let mut text = format!("exit code {}\n{}\n", f.code, f.message);
    if let Some(trace) = &f.trace {
        text.push_str(&format!("iterations recorded before the failure: {}\n", trace.outer_iterations()));
        if let Err(e) = dir.write("failed_trace.csv", &trace.to_csv()) {
            eprintln!("warning: cannot write failed_trace.csv: {e}");
        }
    }
    if let Err(e) = dir.write("error.txt", &text) {
        eprintln!("warning: cannot write error.txt: {e}");
    }
}

fn contraction_summary(run: &LoopRun) -> (String, String) {
    let fmt = |r: Option<f64>| r.map(|v| format!("{v:e}")).unwrap_or_default();
    let outer = run.solution.outer_iterations;
    let inner = (0..outer)
        .filter_map(|i| run.trace.inner_contraction(i).ok())
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    (fmt(run.trace.outer_contraction().ok()), fmt(inner))
}

fn write_solution(dir: &mut RunDir, model: &ModelSolution, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let (s, d, p) = (&model.stochastic.solution, &model.deterministic.solution, &model.shifted.solution);
    let lambda = model.lambda(&cfg.model);
    let dc = &model.derived;
    dir.write(
        "solution.csv",
        &output::matrices_csv(&[
            ("P", &s.p),
            ("K_p", &s.k),
            ("L_p", &s.l),
            ("S", &d.p),
            ("K_s", &d.k),
            ("L_s", &d.l),
            ("Pi", &p.p),
            ("K_pi", &p.k),
            ("L_pi", &p.l),
            ("Lambda", &lambda),
            ("Upsilon", &dc.upsilon),
            ("A_s", &dc.a_s),
            ("Q_Gamma", &dc.q_gamma),
            ("Q_s", &dc.q_s),
        ]),
    )?;
    let mut rows = String::from("loop,outer_iterations,residual,stable,outer_contraction,inner_contraction\n");
    for (name, run) in
        [("stochastic", &model.stochastic), ("deterministic", &model.deterministic), ("shifted", &model.shifted)]
    {
        let (outer, inner) = contraction_summary(run);
        rows.push_str(&format!(
            "{name},{},{:e},{},{outer},{inner}\n",
            run.solution.outer_iterations, run.solution.residual, run.solution.stable
        ));
    }
    dir.write("solve_summary.csv", &rows)?;
    dir.write("trace_stochastic.csv", &model.stochastic.trace.to_csv())?;
    dir.write("trace_deterministic.csv", &model.deterministic.trace.to_csv())?;
    dir.write("trace_shifted.csv", &model.shifted.trace.to_csv())?;
    Ok(())
}

pub fn cmd_solve(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<ModelSolution, Failure> {
    let model = pipeline::solve_model_based(&cfg.model, &cfg.cost, &cfg.dualloop, &cfg.init)?;
    write_solution(dir, &model, cfg)?;
    eprintln!(
        "[solve] outer iterations: stochastic {}, deterministic {}, shifted {}",
        model.stochastic.solution.outer_iterations,
        model.deterministic.solution.outer_iterations,
        model.shifted.solution.outer_iterations
    );
    Ok(model)
}

fn write_learned(
    dir: &mut RunDir,
    learned: &LearnedSolution,
    model: &ModelSolution,
    cfg: &ExperimentConfig,
) -> Result<Vec<pipeline::TableRow>, Failure> {
    let (s, p) = (&learned.stochastic.solution, &learned.shifted.solution);
    dir.write(
        "learned.csv",
        &output::matrices_csv(&[
            ("P", &s.p),
            ("K_p", &s.k),
            ("L_p", &s.l),
            ("Lambda", &learned.lambda),
            ("Pi", &p.p),
            ("K_pi", &p.k),
            ("L_pi", &p.l),
        ]),
    )?;
    dir.write("rank.csv", &output::rank_csv(&learned.rank))?;
    dir.write("identified.csv", &output::identified_csv(&learned.identified))?;
    let table = pipeline::error_table(learned, model, &cfg.model);
    dir.write("learning_errors.csv", &output::table_csv(&table))?;
    dir.write("mean_field.csv", &output::series_csv(cfg.sim.dt, &[("x", &learned.mean_field)]))?;
    dir.write("learned_trace_stochastic.csv", &learned.stochastic.trace.to_csv())?;
    dir.write("learned_trace_shifted.csv", &learned.shifted.trace.to_csv())?;
    dir.write("exploration_paths.csv", &learned.exploration.to_csv().map_err(|e| Failure::config(e.to_string()))?)?;
    Ok(table)
}

pub fn cmd_learn(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<(LearnedSolution, ModelSolution), Failure> {
    let model = pipeline::solve_model_based(&cfg.model, &cfg.cost, &cfg.dualloop, &cfg.init)?;
    let learned = match pipeline::run_pipeline(&cfg.model, &cfg.cost, &cfg.dualloop, &cfg.sim, &cfg.irl, &cfg.init) {
        Ok(l) => l,
        Err(PipelineError::Rank(report)) => {
            dir.write("rank.csv", &output::rank_csv(&report))?;
            return Err(PipelineError::Rank(report).into());
        }
        Err(e) => return Err(e.into()),
    };
    let table = write_learned(dir, &learned, &model, cfg)?;
    if let Some(last) = table.last() {
        let worst = last.errors.iter().cloned().fold(0.0, f64::max);
        eprintln!(
            "[learn] outer iterations: stochastic {}, shifted {}; largest final relative error {worst:.4}",
            learned.stochastic.solution.outer_iterations, learned.shifted.solution.outer_iterations
        );
    }
    Ok((learned, model))
}

fn write_robust(dir: &mut RunDir, summary: &IssSummary) -> Result<Vec<String>, Failure> {
    dir.write("iss_summary.csv", &summary.to_csv())?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut fit = String::from("loop,log_log_slope,quadratic_coefficient,breakdown_magnitude\n");
    for (name, report) in [("outer", &summary.outer), ("inner", &summary.inner)] {
        let prefix = robust::RobustnessReport { runs: report.stable_prefix().to_vec() };
        fit.push_str(&format!(
            "{name},{},{},{}\n",
            fmt(prefix.log_log_slope()),
            fmt(prefix.quadratic_coefficient()),
            fmt(report.breakdown_magnitude())
        ));
    }
    dir.write("iss_fit.csv", &fit)?;
    let violations = summary.violations();
    let mut text = String::new();
    for v in &violations {
        text.push_str(v);
        text.push('\n');
    }
    dir.write("iss_violations.txt", &text)?;
    Ok(violations)
}

pub fn cmd_robust(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<IssSummary, Failure> {
    let summary =
        robust::iss_sweep(&cfg.model, &cfg.cost, &cfg.dualloop, &cfg.init, &cfg.robust.grid, cfg.robust.direction())?;
    let violations = write_robust(dir, &summary)?;
    if !violations.is_empty() {
        return Err(Failure::robust(&violations));
    }
    Ok(summary)
}

/// Tolerances of the reproduction checks.
pub mod tolerance {
    pub const MAX_OUTER: usize = 5;
    pub const RESIDUAL: f64 = 1e-8;
    pub const TABLE: f64 = 0.05;
    pub const IDENTIFICATION: f64 = 1e-2;
}

pub fn cmd_reproduce(cfg: &ExperimentConfig, dir: &mut RunDir, skip_learn: bool) -> Result<Vec<Check>, Failure> {
    let mut checks = Vec::new();
    let model = cmd_solve(cfg, dir)?;
    for (name, run) in
        [("stochastic", &model.stochastic), ("deterministic", &model.deterministic), ("shifted", &model.shifted)]
    {
        checks.push(Check::at_most(
            &format!("model_{name}_outer_iterations"),
            run.solution.outer_iterations as f64,
            tolerance::MAX_OUTER as f64,
        ));
        checks.push(Check::at_most(&format!("model_{name}_residual"), run.solution.residual, tolerance::RESIDUAL));
    }

    let summary =
        robust::iss_sweep(&cfg.model, &cfg.cost, &cfg.dualloop, &cfg.init, &cfg.robust.grid, cfg.robust.direction())?;
    let violations = write_robust(dir, &summary)?;
    checks.push(Check::flag("iss_invariants", violations.is_empty(), "no violations"));

    let (gains, mean_field): (MeanFieldGains, Vec<linalg::Vector>) = if skip_learn {
        let gains = model.mean_field_gains();
        let mean_field = pipeline::mean_field_estimate(&cfg.model, &gains, &cfg.sim)?;
        dir.write("mean_field.csv", &output::series_csv(cfg.sim.dt, &[("x", &mean_field)]))?;
        (gains, mean_field)
    } else {
        let learned = match pipeline::run_pipeline(&cfg.model, &cfg.cost, &cfg.dualloop, &cfg.sim, &cfg.irl, &cfg.init)
        {
            Ok(l) => l,
            Err(PipelineError::Rank(report)) => {
                dir.write("rank.csv", &output::rank_csv(&report))?;
                return Err(PipelineError::Rank(report).into());
            }
            Err(e) => return Err(e.into()),
        };
        let table = write_learned(dir, &learned, &model, cfg)?;
        checks.push(Check::flag(
            "rank_conditions",
            learned.rank.stochastic_ok() && learned.rank.mean_field_ok(),
            "both satisfied",
        ));
        checks.push(Check::at_most(
            "identification_error",
            learned.identified.relative_error(&cfg.model),
            tolerance::IDENTIFICATION,
        ));
        for (name, run) in [("stochastic", &learned.stochastic), ("shifted", &learned.shifted)] {
            checks.push(Check::at_most(
                &format!("learned_{name}_outer_iterations"),
                run.solution.outer_iterations as f64,
                tolerance::MAX_OUTER as f64,
            ));
        }
        if let Some(last) = table.last() {
            for (col, err) in pipeline::TABLE_COLUMNS.iter().zip(last.errors) {
                checks.push(Check::at_most(&format!("table_{col}"), err, tolerance::TABLE));
            }
        }
        (learned.gains, learned.mean_field)
    };

    let batch = sim::simulate_population(&cfg.model, &gains, &mean_field, &cfg.sim)
        .map_err(|source| Failure::from(PipelineError::Simulation { phase: pipeline::Phase::Population, source }))?;
    let average = sim::estimate_mean_field(&batch);
    dir.write("population.csv", &output::series_csv(cfg.sim.dt, &[("avg_x", &average), ("mf_x", &mean_field)]))?;
    dir.write("sample_paths.csv", &batch.to_csv().map_err(|e| Failure::config(e.to_string()))?)?;

    let points = pipeline::consistency_study(
        &cfg.model,
        &gains,
        &mean_field,
        &cfg.sim,
        &cfg.consistency.sizes,
        &cfg.consistency.seeds,
    )?;
    dir.write("consistency.csv", &output::consistency_csv(&points))?;
    let mut by_size = pipeline::mean_gap_by_size(&points);
    by_size.sort_by_key(|p| p.0);
    if by_size.len() >= 2 {
        let decreasing = by_size.windows(2).all(|w| w[1].1 < w[0].1);
        let last = by_size.last().map(|p| p.1).unwrap_or(f64::NAN);
        checks.push(Check {
            name: "consistency_gap_decreases".into(),
            value: last,
            condition: "mean rms gap decreases with population size".into(),
            pass: decreasing,
        });
    }

    dir.write("checks.csv", &output::checks_csv(&checks))?;
    for c in &checks {
        eprintln!(
            "[reproduce] {} {} = {:.4e} ({})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.condition
        );
    }
    if !violations.is_empty() {
        return Err(Failure::robust(&violations));
    }
    Ok(checks)
}

/// Default output location used when neither `--out` nor `[output] dir` is set.
pub fn default_output() -> &'static Path {
    Path::new("mfsc-out")
}
