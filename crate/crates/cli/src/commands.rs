use std::fs;
use std::path::Path;

use fedbcs::federation::theory::{lambda_c_upper_bound, lr_upper_bound, rounds_to_epsilon, TheoryError, TheoryParams};
use fedbcs::federation::{run_experiment, FederationError, MetricsSink};
use fedbcs::gradient_suite::{run_gradient_suite, TOLERANCE};
use fedbcs::server::{finch_hierarchy, Metric};

use crate::config::RunConfig;
use crate::{BoundsArgs, CliError, RunArgs};

pub const OUT_ENV: &str = "FEDBCS_OUT";

/// Defaults, then the file, then flags, then `FEDBCS_OUT`.
pub fn effective_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let fed = &mut config.federation;
    if let Some(seed) = args.seed {
        fed.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        fed.rounds = rounds;
    }
    if let Some(method) = args.method {
        fed.method = method;
    }
    if let Some(parallel) = args.parallel {
        fed.parallel = parallel;
    }
    if let Some(checked) = args.checked {
        fed.checked = checked;
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        config.out = out.into();
    }
    config.validate()?;
    Ok(config)
}

pub fn print_config(args: &RunArgs) -> Result<(), CliError> {
    print!("{}", effective_config(args)?.to_toml());
    Ok(())
}

fn federation_error(e: FederationError) -> CliError {
    if e.is_numerical() {
        return CliError::Numerical(e.to_string());
    }
    match e {
        FederationError::Config(m) => CliError::Config(m),
        other => CliError::Other(other.to_string()),
    }
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let config = effective_config(args)?;
    let domains = config.data.styles.len();
    let sink = MetricsSink::create(&config.out, domains).map_err(federation_error)?;
    fs::write(config.out.join("config.toml"), config.to_toml())
        .map_err(|e| CliError::Other(format!("cannot write config: {e}")))?;
    let result = run_experiment(&config.federation, &config.data, Some(sink)).map_err(federation_error)?;
    let (per_domain, avg) = result
        .final_dice()
        .ok_or_else(|| CliError::Other("no evaluated round".into()))?;

    let mut header = format!("{:<16}", "Method");
    for d in 0..per_domain.len() {
        header.push_str(&format!(" {:>7}", format!("D{d}")));
    }
    header.push_str(&format!(" {:>7}", "Avg"));
    println!("{header}");
    let mut row = format!("{:<16}", config.federation.method.as_str());
    for v in &per_domain {
        row.push_str(&format!(" {:>7.2}", 100.0 * v));
    }
    row.push_str(&format!(" {:>7.2}", 100.0 * avg));
    println!("{row}");
    println!("metrics and checkpoint written to {}", config.out.display());
    Ok(())
}

pub fn gradcheck(first_seed: u64, seeds: u64) -> Result<(), CliError> {
    let results =
        run_gradient_suite(first_seed..first_seed + seeds).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut failures = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failures += usize::from(!r.passed());
        println!("{status} {:<20} seed {:<3} relative error {:.3e}", r.name, r.seed, r.relative_error);
    }
    println!("{} checks, {failures} failed (tolerance {TOLERANCE:e})", results.len());
    if failures > 0 {
        return Err(CliError::Numerical(format!("{failures} gradient checks failed")));
    }
    Ok(())
}

fn parse_points(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut points: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let point = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        if let Some(first) = points.first() {
            if first.len() != point.len() {
                return Err(CliError::Config(format!(
                    "line {}: expected {} coordinates, got {}",
                    i + 1,
                    first.len(),
                    point.len()
                )));
            }
        }
        points.push(point);
    }
    if points.is_empty() {
        return Err(CliError::Config("no points".into()));
    }
    Ok(points)
}

pub fn finch(path: &Path, metric: Metric, levels: usize) -> Result<(), CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let points = parse_points(&text)?;
    for (level, partition) in finch_hierarchy(&points, metric, levels.max(1)).iter().enumerate() {
        println!("level {level}: {} clusters", partition.len());
        for (c, members) in partition.iter().enumerate() {
            let list: Vec<String> = members.iter().map(usize::to_string).collect();
            println!("  cluster {c}: {}", list.join(" "));
        }
    }
    Ok(())
}

fn theory_error(e: TheoryError) -> CliError {
    match e {
        TheoryError::Regime { condition } => CliError::Regime(format!("requires {condition}")),
        other => CliError::Config(other.to_string()),
    }
}

pub fn bounds(args: &BoundsArgs) -> Result<(), CliError> {
    let theory = TheoryParams {
        l_sm: args.l_sm,
        sigma2: args.sigma2,
        g: args.g,
        tau: args.tau,
        lambda_c: args.lambda_c,
        e: args.e,
        eta: args.eta,
        delta: args.delta,
        epsilon: args.epsilon,
    };
    if let Some(s) = args.grad_norm_sum {
        let bound = lr_upper_bound(&theory, s).map_err(theory_error)?;
        println!("eta_max (one round) = {:.6}", bound.eta_max);
        println!(
            "lambda_c_max (one round) = {:.6}",
            lambda_c_upper_bound(theory.tau, s, theory.e, theory.g)
        );
        if let Some(d) = bound.diagnostic {
            println!("note: {d}");
        }
    }
    println!("lambda_c_max (epsilon target) = {:.6}", theory.tau * theory.epsilon / theory.g);
    let rounds = rounds_to_epsilon(&theory).map_err(theory_error)?;
    println!("rounds_to_epsilon = {rounds}");
    Ok(())
}
