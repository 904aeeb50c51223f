//! Command-line entry point: single solves, closed-loop simulations and
//! variant/alpha comparison tables driven by a TOML run configuration.

use clap::{Args, Parser, Subcommand, ValueEnum};
use microgrid_mpc::config::{ConfigError, RunConfig};
use microgrid_mpc::formulation::{assemble, Variant};
use microgrid_mpc::simulator::{closed_loop, forecast_tree, metrics, ProfileModel, SimulationTrace};
use microgrid_mpc::solver::{branch_and_bound, SolveStatus};
use serde::Serialize;
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mgmpc", about = "Scenario-tree MPC toolkit for islanded microgrids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a single finite-horizon instance and dump the solution.
    Solve(CommonArgs),
    /// Run a closed-loop simulation; writes a trace CSV and a report JSON.
    Simulate(CommonArgs),
    /// Run one simulation per (variant, alpha) pair on the same seed and
    /// emit a comparison table.
    Compare(CommonArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Hard,
    Chance,
    Risk,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Hard => Variant::Hard,
            VariantArg::Chance => Variant::Chance,
            VariantArg::Risk => Variant::Risk,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Violation level; repeatable for `compare`, the last value wins for
    /// `solve`/`simulate`.
    #[arg(long)]
    alpha: Vec<f64>,
    /// Constraint variant; repeatable for `compare`, the last value wins
    /// for `solve`/`simulate`.
    #[arg(long, value_enum)]
    variant: Vec<VariantArg>,
    /// Override the closed-loop step count K.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the prediction horizon N (branching is truncated or padded
    /// with 1s to match).
    #[arg(long)]
    horizon: Option<usize>,
    /// Zero out wall-clock fields in all outputs so runs with the same
    /// seed are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

fn diag(level: &str, payload: serde_json::Value) {
    let mut line = json!({ "level": level });
    line.as_object_mut()
        .unwrap()
        .extend(payload.as_object().cloned().unwrap_or_default());
    eprintln!("{line}");
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(horizon) = args.horizon {
        cfg.horizon = horizon;
        cfg.branching.resize(horizon, 1);
    }
    if let Some(&alpha) = args.alpha.last() {
        cfg.alpha = Some(alpha);
    }
    if let Some(&variant) = args.variant.last() {
        cfg.variant = variant.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(status: SolveStatus) -> ExitCode {
    match status {
        SolveStatus::Optimal => ExitCode::from(0),
        SolveStatus::Infeasible | SolveStatus::Unbounded => ExitCode::from(2),
        SolveStatus::GapLimit | SolveStatus::IterationLimit => ExitCode::from(3),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable output");
    text.push('\n');
    std::fs::write(path, text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&CommonArgs, fn(&CommonArgs, RunConfig) -> ExitCode) = match &cli.command {
        Command::Solve(a) => (a, cmd_solve),
        Command::Simulate(a) => (a, cmd_simulate),
        Command::Compare(a) => (a, cmd_compare),
    };
    match load_config(args) {
        Ok(cfg) => run(args, cfg),
        Err(err) => {
            diag("error", json!({ "event": "config", "message": err.to_string() }));
            ExitCode::from(1)
        }
    }
}

fn cmd_solve(args: &CommonArgs, cfg: RunConfig) -> ExitCode {
    let spec = cfg.grid_spec();
    let model = ProfileModel::case_study(cfg.seed);
    let ctrl = cfg.controller(&spec);
    let last_error = vec![0.0; spec.n_r + spec.n_d];
    let tree = match forecast_tree(
        &model,
        &spec,
        &last_error,
        0,
        &cfg.branching,
        ctrl.n_samples,
        cfg.seed,
    ) {
        Ok(t) => t,
        Err(err) => {
            diag("error", json!({ "event": "forecast", "message": err.to_string() }));
            return ExitCode::from(1);
        }
    };
    let prob = match assemble(
        cfg.variant,
        &tree,
        &spec,
        &ctrl.x0,
        &ctrl.initial_delta,
        cfg.effective_alpha(),
        &ctrl.assemble,
    ) {
        Ok(p) => p,
        Err(err) => {
            diag("error", json!({ "event": "assemble", "message": err.to_string() }));
            return ExitCode::from(1);
        }
    };
    let started = std::time::Instant::now();
    let result = branch_and_bound(&prob, &ctrl.bnb, None);
    let solve_time_s = if args.no_timing {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    };
    diag(
        "info",
        json!({
            "event": "solve",
            "status": result.status.as_str(),
            "objective": result.objective,
            "nodes": result.nodes_explored,
        }),
    );
    if std::fs::create_dir_all(&cfg.out_dir).is_err() {
        diag("error", json!({ "event": "io", "message": "cannot create output directory" }));
        return ExitCode::from(1);
    }
    let dump = json!({
        "status": result.status.as_str(),
        "objective": result.objective,
        "best_bound": result.best_bound,
        "rel_gap": result.rel_gap,
        "nodes_explored": result.nodes_explored,
        "iterations": result.iterations,
        "solve_time_s": solve_time_s,
        "solution": prob.decode(&tree, &result.z),
    });
    let path = Path::new(&cfg.out_dir).join("solution.json");
    if let Err(err) = write_json(&path, &dump) {
        diag("error", json!({ "event": "io", "message": err.to_string() }));
        return ExitCode::from(1);
    }
    exit_for(result.status)
}

fn run_simulation(cfg: &RunConfig, no_timing: bool) -> Result<SimulationTrace, String> {
    let spec = cfg.grid_spec();
    let model = ProfileModel::case_study(cfg.seed);
    let ctrl = cfg.controller(&spec);
    let mut trace = closed_loop(&spec, &model, &ctrl, cfg.steps).map_err(|e| e.to_string())?;
    if no_timing {
        for step in &mut trace.steps {
            step.solve_time_s = 0.0;
        }
    }
    Ok(trace)
}

/// Expand a vector-valued column into `name` (single entry) or `name_i`.
fn push_headers(header: &mut Vec<String>, name: &str, len: usize) {
    if len == 1 {
        header.push(name.to_string());
    } else {
        for i in 0..len {
            header.push(format!("{name}_{i}"));
        }
    }
}

fn trace_csv(trace: &SimulationTrace) -> String {
    let mut out = String::new();
    if let Some(first) = trace.steps.first() {
        let mut header = vec!["k".to_string()];
        push_headers(&mut header, "x", first.x.len());
        push_headers(&mut header, "u_t", first.u_t.len());
        push_headers(&mut header, "u_s", first.u_s.len());
        push_headers(&mut header, "u_r", first.u_r.len());
        push_headers(&mut header, "delta", first.delta.len());
        push_headers(&mut header, "w_r", first.w_r.len());
        push_headers(&mut header, "w_d", first.w_d.len());
        push_headers(&mut header, "p_t", first.p_t.len());
        push_headers(&mut header, "p_s", first.p_s.len());
        push_headers(&mut header, "p_r", first.p_r.len());
        header.push("mu".to_string());
        header.push("cost".to_string());
        push_headers(&mut header, "viol_upper", first.viol_upper.len());
        push_headers(&mut header, "viol_lower", first.viol_lower.len());
        header.push("solve_time_s".to_string());
        header.push("bnb_nodes".to_string());
        header.push("status".to_string());
        out.push_str(&header.join(","));
        out.push('\n');
    }
    for s in &trace.steps {
        let mut row: Vec<String> = vec![s.k.to_string()];
        for group in [
            &s.x, &s.u_t, &s.u_s, &s.u_r, &s.delta, &s.w_r, &s.w_d, &s.p_t, &s.p_s, &s.p_r,
        ] {
            row.extend(group.iter().map(|v| v.to_string()));
        }
        row.push(s.mu.to_string());
        row.push(s.cost.to_string());
        row.extend(s.viol_upper.iter().map(|v| v.to_string()));
        row.extend(s.viol_lower.iter().map(|v| v.to_string()));
        row.push(s.solve_time_s.to_string());
        row.push(s.bnb_nodes.to_string());
        row.push(s.status.as_str().to_string());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn cmd_simulate(args: &CommonArgs, cfg: RunConfig) -> ExitCode {
    let spec = cfg.grid_spec();
    let ctrl = cfg.controller(&spec);
    diag(
        "info",
        json!({
            "event": "simulate",
            "variant": cfg.variant,
            "alpha": cfg.effective_alpha(),
            "steps": cfg.steps,
            "seed": cfg.seed,
        }),
    );
    let trace = match run_simulation(&cfg, args.no_timing) {
        Ok(t) => t,
        Err(message) => {
            diag("error", json!({ "event": "simulate", "message": message }));
            return ExitCode::from(2);
        }
    };
    let report = metrics(&trace, &spec, &ctrl.initial_delta);
    if std::fs::create_dir_all(&cfg.out_dir).is_err() {
        diag("error", json!({ "event": "io", "message": "cannot create output directory" }));
        return ExitCode::from(1);
    }
    let out = Path::new(&cfg.out_dir);
    if let Err(err) = std::fs::write(out.join("trace.csv"), trace_csv(&trace)) {
        diag("error", json!({ "event": "io", "message": err.to_string() }));
        return ExitCode::from(1);
    }
    if let Err(err) = write_json(&out.join("report.json"), &report) {
        diag("error", json!({ "event": "io", "message": err.to_string() }));
        return ExitCode::from(1);
    }
    diag(
        "info",
        json!({
            "event": "done",
            "avg_cost": report.avg_cost,
            "violations": report.violations,
            "fallback_steps": report.fallback_steps,
        }),
    );
    ExitCode::from(0)
}

#[derive(Serialize)]
struct CompareRow {
    variant: String,
    alpha: f64,
    avg_cost: f64,
    renewable_share_pct: f64,
    violations: usize,
    max_violation: f64,
    switching_actions: f64,
    mean_solve_time_s: f64,
    max_solve_time_s: f64,
}

fn cmd_compare(args: &CommonArgs, base: RunConfig) -> ExitCode {
    let variants: Vec<Variant> = if args.variant.is_empty() {
        vec![base.variant]
    } else {
        args.variant.iter().map(|&v| v.into()).collect()
    };
    let alphas: Vec<f64> = if args.alpha.is_empty() {
        vec![base.effective_alpha()]
    } else {
        args.alpha.clone()
    };
    let out_root = PathBuf::from(&base.out_dir);
    if std::fs::create_dir_all(&out_root).is_err() {
        diag("error", json!({ "event": "io", "message": "cannot create output directory" }));
        return ExitCode::from(1);
    }
    let mut rows: Vec<CompareRow> = Vec::new();
    for &variant in &variants {
        for &alpha in &alphas {
            let label = format!("{}_{alpha}", variant_name(variant));
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.alpha = Some(alpha);
            cfg.out_dir = out_root.join(&label).display().to_string();
            if let Err(err) = cfg.validate() {
                diag("error", json!({ "event": "config", "cell": label, "message": err.to_string() }));
                return ExitCode::from(1);
            }
            diag(
                "info",
                json!({ "event": "cell", "variant": variant, "alpha": alpha }),
            );
            let spec = cfg.grid_spec();
            let ctrl = cfg.controller(&spec);
            let trace = match run_simulation(&cfg, args.no_timing) {
                Ok(t) => t,
                Err(message) => {
                    diag("error", json!({ "event": "cell", "cell": label, "message": message }));
                    return ExitCode::from(2);
                }
            };
            let report = metrics(&trace, &spec, &ctrl.initial_delta);
            if std::fs::create_dir_all(&cfg.out_dir).is_err() {
                diag("error", json!({ "event": "io", "message": "cannot create cell directory" }));
                return ExitCode::from(1);
            }
            let cell_dir = Path::new(&cfg.out_dir);
            if std::fs::write(cell_dir.join("trace.csv"), trace_csv(&trace)).is_err()
                || write_json(&cell_dir.join("report.json"), &report).is_err()
            {
                diag("error", json!({ "event": "io", "cell": label, "message": "write failed" }));
                return ExitCode::from(1);
            }
            rows.push(CompareRow {
                variant: variant_name(variant).to_string(),
                alpha,
                avg_cost: report.avg_cost,
                renewable_share_pct: report.renewable_share_pct,
                violations: report.violations,
                max_violation: report.max_violation,
                switching_actions: report.switching_actions,
                mean_solve_time_s: report.mean_solve_time_s,
                max_solve_time_s: report.max_solve_time_s,
            });
        }
    }
    let mut csv = String::from(
        "variant,alpha,avg_cost,renewable_share_pct,violations,max_violation,switching_actions,mean_solve_time_s,max_solve_time_s\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.alpha,
            r.avg_cost,
            r.renewable_share_pct,
            r.violations,
            r.max_violation,
            r.switching_actions,
            r.mean_solve_time_s,
            r.max_solve_time_s
        );
    }
    if std::fs::write(out_root.join("compare.csv"), csv).is_err()
        || write_json(&out_root.join("compare.json"), &rows).is_err()
    {
        diag("error", json!({ "event": "io", "message": "write failed" }));
        return ExitCode::from(1);
    }
    ExitCode::from(0)
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Hard => "hard",
        Variant::Chance => "chance",
        Variant::Risk => "risk",
    }
}
