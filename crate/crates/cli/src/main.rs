//! `kramers`: inspect models, build instantons, sweep the landscape, compute
//! transition rates and check them by simulation.
//!
//! JSON goes to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 usage error, 2 violated modelling assumption, 3 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use kramers_core::dynamics::{compute_instanton, DEFAULT_DELTA};
use kramers_core::json::canonical_string;
use kramers_core::landscape::{ensemble_density, f_function, hj_residual, quasipotential, stationary_prefactor};
use kramers_core::model::{builtin_models, KnownFacts, RegisteredModel};
use kramers_core::montecarlo::{empirical_committor, sample_transition_times, McConfig};
use kramers_core::saddle::{analyze_transition, committor, find_saddle, saddle_geometry, saddle_geometry_between};
use kramers_core::validate::validate_suite;
use kramers_core::{lookup, Error, ModelSpec};

#[derive(Parser, Debug)]
#[command(name = "kramers", version, about = "Eyring-Kramers transition times for irreversible diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List the registered models.
    Models,
    /// Saddle geometry and the instanton from the first attractor.
    Instanton(Opts),
    /// Quasipotential, HJ residual, F and prefactor on a grid.
    Landscape(Opts),
    /// Eyring-Kramers mean transition time.
    Rate(Opts),
    /// Simulated transition times between the two attractors.
    McExit(Opts),
    /// Empirical committor of the linearised dynamics at the single point given by `--grid`.
    McCommittor(Opts),
    /// Run every structural check on the model.
    Validate(Opts),
}

#[derive(Args, Debug, Clone)]
struct Opts {
    /// Model label, e.g. `dw2d-rot(c=1)`.
    #[arg(long)]
    model: String,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses all cores. Never changes results.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Instanton endpoint tolerance.
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// Write the instanton as CSV.
    #[arg(long)]
    emit_instanton: Option<PathBuf>,
    /// Write one passage time per line.
    #[arg(long)]
    dump_times: Option<PathBuf>,
    /// `x1:lo:hi:n,x2:lo:hi:n`; an axis with n = 1 pins that coordinate at lo.
    #[arg(long)]
    grid: Option<String>,
}

enum Failure {
    Usage(String),
    Core(Error),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = std::result::Result<Value, Failure>;

fn config_echo(command: &str, o: &Opts) -> Value {
    json!({
        "command": command,
        "model": o.model,
        "epsilon": o.epsilon,
        "dt": o.dt,
        "n": o.n,
        "seed": o.seed,
        "workers": o.workers,
        "tol": o.tol,
        "emit_instanton": o.emit_instanton,
        "dump_times": o.dump_times,
        "grid": o.grid,
    })
}

fn resolve(o: &Opts) -> std::result::Result<(RegisteredModel, ModelSpec, KnownFacts), Failure> {
    if !(o.tol > 0.0) {
        return Err(Failure::Usage("--tol must be positive".into()));
    }
    let reg = lookup(&o.model)?;
    let spec = reg.spec();
    let facts = reg.known_facts().ok_or_else(|| Failure::Usage(format!("no reference data for {}", reg.label())))?;
    Ok((reg, spec, facts))
}

fn attractors(facts: &KnownFacts, label: &str) -> std::result::Result<(Vec<f64>, Vec<f64>), Failure> {
    facts.attractors.clone().ok_or_else(|| Failure::Usage(format!("{label} has no pair of attractors")))
}

fn epsilon(o: &Opts) -> std::result::Result<f64, Failure> {
    match o.epsilon {
        Some(e) if e > 0.0 => Ok(e),
        Some(_) => Err(Failure::Usage("--epsilon must be positive".into())),
        None => Err(Failure::Usage("--epsilon is required".into())),
    }
}

/// Parses `x1:lo:hi:n,x2:lo:hi:n` into one axis per coordinate.
fn parse_grid(s: &str, dim: usize) -> std::result::Result<Vec<Vec<f64>>, Failure> {
    let bad = |why: &str| Failure::Usage(format!("bad --grid {s:?}: {why}"));
    let mut axes = vec![None; dim];
    for part in s.split(',') {
        let f: Vec<&str> = part.split(':').collect();
        if f.len() != 4 {
            return Err(bad("each axis needs name:lo:hi:n"));
        }
        let k: usize = f[0].strip_prefix('x').and_then(|i| i.parse().ok()).ok_or_else(|| bad("axis names are x1, x2, ..."))?;
        if k == 0 || k > dim {
            return Err(bad("axis index out of range"));
        }
        let lo: f64 = f[1].parse().map_err(|_| bad("lo is not a number"))?;
        let hi: f64 = f[2].parse().map_err(|_| bad("hi is not a number"))?;
        let n: usize = f[3].parse().map_err(|_| bad("n is not a count"))?;
        if n == 0 || !(lo <= hi) {
            return Err(bad("need n >= 1 and lo <= hi"));
        }
        let axis = if n == 1 { vec![lo] } else { (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect() };
        axes[k - 1] = Some(axis);
    }
    axes.into_iter().map(|a| a.ok_or_else(|| bad("every coordinate needs an axis"))).collect()
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![vec![]], |acc, axis| {
        acc.iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect()
    })
}

fn grid_points(o: &Opts, dim: usize) -> std::result::Result<Vec<Vec<f64>>, Failure> {
    let g = o.grid.as_deref().ok_or_else(|| Failure::Usage("--grid is required".into()))?;
    Ok(cartesian(&parse_grid(g, dim)?))
}

fn models() -> Outcome {
    let list: Vec<Value> = builtin_models()
        .iter()
        .map(|r| {
            let spec = r.spec();
            json!({
                "label": r.label(),
                "name": r.name,
                "dim": spec.dim,
                "parameters": r.parameters,
                "transverse": spec.has_transverse(),
                "facts": r.known_facts(),
            })
        })
        .collect();
    Ok(json!({ "config": { "command": "models" }, "models": list }))
}

fn instanton(o: &Opts) -> Outcome {
    let (reg, spec, facts) = resolve(o)?;
    let (x1, x2) = attractors(&facts, &reg.label())?;
    let x_star = find_saddle(&spec, &facts.saddle)?;
    let saddle = saddle_geometry_between(&spec, &x_star, &x1, &x2)?;
    let inst = compute_instanton(&spec, &saddle, &x1, DEFAULT_DELTA, o.tol)?;
    let delta_v = quasipotential(&spec, &x1, &x_star)?;
    if let Some(path) = &o.emit_instanton {
        inst.path.write_csv(BufWriter::new(File::create(path)?))?;
    }
    Ok(json!({
        "config": config_echo("instanton", o),
        "saddle": saddle.to_json(),
        "action": inst.action,
        "delta_v": delta_v,
        "action_gap": (inst.action - delta_v).abs(),
        "samples": inst.path.len(),
        "duration": inst.path.duration(),
        "endpoint_gaps": [inst.endpoint_gaps.0, inst.endpoint_gaps.1],
    }))
}

fn landscape_point(spec: &ModelSpec, x1: &[f64], x: &[f64], eps: Option<f64>) -> std::result::Result<Value, Failure> {
    let mut v = json!({
        "x": x,
        "v": quasipotential(spec, x1, x)?,
        "hj_residual": hj_residual(spec, x)?,
        "f": f_function(spec, x)?,
    });
    match stationary_prefactor(spec, x1, x) {
        Ok(p) => {
            v["c_st"] = json!(p.c_value);
            v["f_integral"] = json!(p.f_integral);
            if let Some(e) = eps {
                v["density"] = json!(ensemble_density(spec, x1, x, e)?);
            }
            v["status"] = json!("ok");
        }
        Err(Error::UnreachablePoint(_)) => v["status"] = json!("unreachable"),
        Err(e) => return Err(e.into()),
    }
    Ok(v)
}

fn landscape(o: &Opts) -> Outcome {
    let (reg, spec, facts) = resolve(o)?;
    let x1 = match &facts.attractors {
        Some((a, _)) => a.clone(),
        None => return Err(Failure::Usage(format!("{} has no attractor", reg.label()))),
    };
    if let Some(e) = o.epsilon {
        if !(e > 0.0) {
            return Err(Failure::Usage("--epsilon must be positive".into()));
        }
    }
    let points = grid_points(o, spec.dim)?;
    let rows = points.iter().map(|x| landscape_point(&spec, &x1, x, o.epsilon)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(json!({ "config": config_echo("landscape", o), "attractor": x1, "points": rows }))
}

fn rate(o: &Opts) -> Outcome {
    let (reg, spec, facts) = resolve(o)?;
    let (x1, x2) = attractors(&facts, &reg.label())?;
    let eps = epsilon(o)?;
    let a = analyze_transition(&spec, &x1, &x2)?;
    let r = a.report(eps);
    Ok(json!({
        "config": config_echo("rate", o),
        "delta_v": r.delta_v,
        "lambda_plus": r.lambda_plus,
        "hessian_ratio": r.hessian_ratio,
        "f_integral": r.f_integral,
        "f_correction": r.f_correction,
        "prefactor": r.prefactor,
        "mean_time": r.mean_time,
        "rate": r.rate,
        "diagnostics": {
            "saddle": a.saddle.to_json(),
            "residuals": a.residuals,
            "hessian_crosscheck": a.hessian_crosscheck,
            "instanton_action": a.instanton.action,
        },
    }))
}

fn mc_config(o: &Opts, eps: f64) -> McConfig {
    McConfig { workers: o.workers, ..McConfig::new(eps, o.dt, o.n, o.seed) }
}

fn mc_exit(o: &Opts) -> Outcome {
    let (reg, spec, facts) = resolve(o)?;
    let (x1, x2) = attractors(&facts, &reg.label())?;
    let eps = epsilon(o)?;
    let cfg = mc_config(o, eps);
    let est = sample_transition_times(&spec, &cfg, &x1, &x2)?;
    if let Some(path) = &o.dump_times {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &est.times {
            writeln!(w, "{t:.16e}")?;
        }
        w.flush()?;
    }
    let predicted = match analyze_transition(&spec, &x1, &x2) {
        Ok(a) => json!(a.report(eps).mean_time),
        Err(e) => {
            log::warn!("no prediction: {e}");
            Value::Null
        }
    };
    Ok(json!({
        "config": config_echo("mc-exit", o),
        "stop_radius": cfg.stop_radius,
        "estimate": est,
        "predicted_mean_time": predicted,
    }))
}

fn mc_committor(o: &Opts) -> Outcome {
    let (_, spec, facts) = resolve(o)?;
    let eps = epsilon(o)?;
    let y = match grid_points(o, spec.dim)?.as_slice() {
        [y] => y.clone(),
        _ => return Err(Failure::Usage("mc-committor needs a single-point --grid".into())),
    };
    let x_star = find_saddle(&spec, &facts.saddle)?;
    let saddle = match &facts.attractors {
        Some((x1, x2)) => saddle_geometry_between(&spec, &x_star, x1, x2)?,
        None => saddle_geometry(&spec, &x_star)?,
    };
    let zeta = saddle.zeta_plus(&y);
    let z_cap = 10.0 * (zeta.abs() + eps.sqrt());
    let est = empirical_committor(&spec, &saddle, &y, &mc_config(o, eps), z_cap)?;
    Ok(json!({
        "config": config_echo("mc-committor", o),
        "zeta_plus": zeta,
        "z_cap": z_cap,
        "analytic": committor(&saddle, &y, eps),
        "estimate": est,
    }))
}

fn validate(o: &Opts) -> Outcome {
    let reg = lookup(&o.model)?;
    let rep = validate_suite(&reg.spec(), reg.known_facts().as_ref());
    for c in rep.checks.iter().filter(|c| !c.passed) {
        log::warn!("check {} failed", c.name);
    }
    Ok(json!({ "config": config_echo("validate", o), "label": reg.label(), "report": rep }))
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => 1,
        Failure::Core(e) if e.is_usage() => 1,
        Failure::Core(e) if e.is_assumption_failure() => 2,
        Failure::Core(_) | Failure::Io(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = match &cli.command {
        Command::Models => models(),
        Command::Instanton(o) => instanton(o),
        Command::Landscape(o) => landscape(o),
        Command::Rate(o) => rate(o),
        Command::McExit(o) => mc_exit(o),
        Command::McCommittor(o) => mc_committor(o),
        Command::Validate(o) => validate(o),
    };
    match out {
        Ok(v) => {
            // a closed pipe (`| head`) is the reader's choice, not a failure
            let _ = writeln!(std::io::stdout().lock(), "{}", canonical_string(&v));
            ExitCode::SUCCESS
        }
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Io(m) => m.clone(),
                Failure::Core(e) => e.to_string(),
            };
            eprintln!("error: {msg}");
            if exit_code(&f) == 1 {
                eprintln!("usage: kramers <models|instanton|landscape|rate|mc-exit|mc-committor|validate> --model <label> [options]");
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
