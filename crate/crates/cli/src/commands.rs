use std::fs;
use std::path::Path;

use anyhow::anyhow;
use apex_core::assignment::{vcg_outcome, FractionalAllocation, UtilityMatrix};
use apex_core::hz::{find_hz_equilibrium, lambda_max, verify_ce, FixedPointMethod, HzOptions};
use apex_core::regularized::{
    eta_bound_min, quadratic_form_price, regularized_outcome, RegularizerParams,
};
use apex_core::sim::{
    aggregate_and_verify, audit_strong_regret, read_trace, run_simulation, write_trace, Backend,
    ScenarioConfig, SimulationTrace,
};
use apex_core::ApexError;
use rayon::prelude::*;
use serde::Serialize;

use crate::docs::{AuditDoc, HzFindDoc, InstanceDoc, RegularizedDoc, SweepRow, VcgDoc};
use crate::input::{read_json, read_text};
use crate::{Cli, CliError, Command, Format, HzFindArgs, Method, Status, DEFAULT_SEED};

type Out = Result<(String, Status), CliError>;

/// Runs the command and writes its output. Nothing is written unless the
/// command produced a result.
pub fn run(cli: &Cli) -> Result<Status, CliError> {
    let (text, status) = match &cli.command {
        Command::Vcg { input } => vcg(cli, input),
        Command::Regularized {
            input,
            beta,
            lambda_bar,
        } => regularized(cli, input, *beta, *lambda_bar),
        Command::HzFind(args) => hz_find(cli, args),
        Command::HzVerify { input, delta } => hz_verify(cli, input, *delta),
        Command::Simulate {
            config,
            rounds,
            beta,
            lambda_bar,
        } => simulate(cli, config, *rounds, *beta, *lambda_bar),
        Command::Audit {
            trace,
            aggregate,
            delta,
        } => audit(cli, trace, *aggregate, *delta),
        Command::Sweep {
            configs,
            runs,
            delta,
        } => sweep(cli, configs, *runs as usize, *delta),
    }?;
    match &cli.out {
        Some(path) => fs::write(path, text)
            .map_err(|e| CliError::Usage(anyhow!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(status)
}

fn usage(msg: String) -> CliError {
    CliError::Usage(anyhow!(msg))
}

fn json_line<T: Serialize>(doc: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string(doc).map_err(|e| CliError::Usage(e.into()))?;
    s.push('\n');
    Ok(s)
}

fn csv_table<T: Serialize>(records: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| CliError::Usage(e.into()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Usage(anyhow!("{e}")))?;
    String::from_utf8(bytes).map_err(|e| CliError::Usage(e.into()))
}

fn render<D: Serialize, R: Serialize>(
    format: Format,
    doc: &D,
    table: impl FnOnce() -> Vec<R>,
) -> Result<String, CliError> {
    match format {
        Format::Lines => json_line(doc),
        Format::Csv => csv_table(&table()),
    }
}

fn bids_or_ones(doc: &InstanceDoc) -> Vec<f64> {
    doc.lambda.clone().unwrap_or_else(|| vec![1.0; doc.u.n()])
}

fn allocation(u: &UtilityMatrix, x: &[Vec<f64>]) -> Result<FractionalAllocation, CliError> {
    let n = u.n();
    if x.len() != n || x.iter().any(|r| r.len() != n) {
        return Err(usage(format!("allocation must be {n} rows of {n} entries")));
    }
    Ok(FractionalAllocation::from_matrix(n, x.concat())?)
}

#[derive(Serialize)]
struct VcgRow {
    player: usize,
    item: usize,
    bid: f64,
    price: f64,
    payment: f64,
}

fn vcg(cli: &Cli, input: &Path) -> Out {
    let doc: InstanceDoc = read_json(input)?;
    let lambda = bids_or_ones(&doc);
    let outcome = vcg_outcome(&doc.u, Some(&lambda))?;
    let text = render(
        cli.format,
        &VcgDoc {
            lambda: lambda.clone(),
            outcome: outcome.clone(),
        },
        || {
            (0..doc.u.n())
                .map(|i| {
                    let j = outcome.assignment.pi[i];
                    VcgRow {
                        player: i,
                        item: j,
                        bid: lambda[i],
                        price: outcome.prices.0[j],
                        payment: outcome.payments[i],
                    }
                })
                .collect()
        },
    )?;
    Ok((text, Status::Pass))
}

#[derive(Serialize)]
struct RegularizedRow {
    player: usize,
    bid: f64,
    utility: f64,
    payment: f64,
    quadratic_price: f64,
}

fn regularized(cli: &Cli, input: &Path, beta: Option<f64>, lambda_bar: Option<f64>) -> Out {
    let doc: InstanceDoc = read_json(input)?;
    let u = &doc.u;
    let n = u.n();
    let lambda = bids_or_ones(&doc);
    let top = lambda.iter().cloned().fold(0.0, f64::max);
    let lambda_bar = lambda_bar.unwrap_or_else(|| lambda_max(u).value.max(top));
    let params = match beta {
        Some(b) => RegularizerParams::new(b, lambda_bar)?,
        None => RegularizerParams::canonical(n, lambda_bar)?,
    };
    let (optimum, payments) = regularized_outcome(u, &lambda, &params, None)?;
    let quadratic_prices = (0..n)
        .map(|i| quadratic_form_price(u, &optimum.x, params.beta, lambda[i], i))
        .collect::<Result<Vec<_>, ApexError>>()?;
    let eta = eta_bound_min(&lambda, n, &params);
    let doc = RegularizedDoc {
        lambda,
        params,
        optimum,
        payments,
        quadratic_prices,
        eta,
    };
    let text = render(cli.format, &doc, || {
        (0..n)
            .map(|i| RegularizedRow {
                player: i,
                bid: doc.lambda[i],
                utility: (0..n).map(|j| u.get(i, j) * doc.optimum.x.get(i, j)).sum(),
                payment: doc.payments[i],
                quadratic_price: doc.quadratic_prices[i],
            })
            .collect()
    })?;
    Ok((text, Status::Pass))
}

#[derive(Serialize)]
struct HzRow {
    player: usize,
    lambda: f64,
    phi: f64,
    price: f64,
    budget_spent: f64,
    gap: f64,
}

fn hz_find(cli: &Cli, args: &HzFindArgs) -> Out {
    let doc: InstanceDoc = read_json(&args.input)?;
    let options = HzOptions {
        eps: args.eps,
        alpha: args.alpha,
        tol: args.tol,
        max_iter: args.max_iter,
        samples: args.samples as usize,
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        method: match args.method {
            Method::Newton => FixedPointMethod::Newton,
            Method::Damped => FixedPointMethod::Damped,
        },
        lambda_bar: args.lambda_bar,
        start: doc.lambda.clone(),
    };
    let solution = find_hz_equilibrium(&doc.u, &options)?;
    let certificate = verify_ce(
        &doc.u,
        Some(&solution.lambda_star),
        &solution.allocation,
        &solution.prices.0,
        None,
        args.delta,
    )?;
    let status = if solution.converged && certificate.pass {
        Status::Pass
    } else {
        Status::Fail
    };
    let out = HzFindDoc {
        options,
        solution,
        certificate,
    };
    let text = render(cli.format, &out, || {
        (0..doc.u.n())
            .map(|i| HzRow {
                player: i,
                lambda: out.solution.lambda_star[i],
                phi: out.solution.phi[i],
                price: out.solution.prices.0[i],
                budget_spent: out.certificate.players[i].budget_spent,
                gap: out.certificate.players[i].gap,
            })
            .collect()
    })?;
    Ok((text, status))
}

#[derive(Serialize)]
struct CertificateRow {
    player: usize,
    budget: f64,
    budget_spent: f64,
    best_bundle_value: Option<f64>,
    realized_value: f64,
    gap: f64,
}

fn hz_verify(cli: &Cli, input: &Path, delta: f64) -> Out {
    let doc: InstanceDoc = read_json(input)?;
    let x = doc
        .allocation
        .as_deref()
        .ok_or_else(|| usage(format!("{}: hz-verify needs `allocation`", input.display())))?;
    let prices = doc
        .prices
        .as_deref()
        .ok_or_else(|| usage(format!("{}: hz-verify needs `prices`", input.display())))?;
    let x = allocation(&doc.u, x)?;
    let cert = verify_ce(
        &doc.u,
        doc.lambda.as_deref(),
        &x,
        prices,
        doc.budgets.as_deref(),
        delta,
    )?;
    let status = if cert.pass {
        Status::Pass
    } else {
        Status::Fail
    };
    let text = render(cli.format, &cert, || {
        cert.players
            .iter()
            .enumerate()
            .map(|(i, p)| CertificateRow {
                player: i,
                budget: p.budget,
                budget_spent: p.budget_spent,
                best_bundle_value: p.best_bundle_value,
                realized_value: p.realized_value,
                gap: p.gap,
            })
            .collect()
    })?;
    Ok((text, status))
}

fn load_config(
    cli: &Cli,
    path: &Path,
    rounds: Option<u64>,
    beta: Option<f64>,
    lambda_bar: Option<f64>,
) -> Result<ScenarioConfig, CliError> {
    let mut config: ScenarioConfig = read_json(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(t) = rounds {
        // Budgets keep their per-round rate.
        let scale = t as f64 / config.rounds.max(1) as f64;
        config.budgets.iter_mut().for_each(|b| *b *= scale);
        config.rounds = t as usize;
    }
    if let Some(b) = beta {
        match &mut config.backend {
            Backend::Regularized { beta } => *beta = Some(b),
            Backend::ExactVcg => return Err(usage("--beta needs the regularized backend".into())),
        }
    }
    if lambda_bar.is_some() {
        config.lambda_bar = lambda_bar;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct RoundRow {
    t: usize,
    player: usize,
    bid: f64,
    charge: f64,
    utility: f64,
    budget_remaining: f64,
    clamped: bool,
}

fn round_rows(trace: &SimulationTrace) -> Vec<RoundRow> {
    let n = trace.n();
    trace
        .rounds
        .iter()
        .flat_map(|r| {
            (0..n).map(move |i| RoundRow {
                t: r.t,
                player: i,
                bid: r.bids[i],
                charge: r.charges[i],
                utility: r.utilities[i],
                budget_remaining: r.budget_remaining[i],
                clamped: r.clamped[i],
            })
        })
        .collect()
}

fn simulate(
    cli: &Cli,
    path: &Path,
    rounds: Option<u64>,
    beta: Option<f64>,
    lambda_bar: Option<f64>,
) -> Out {
    let config = load_config(cli, path, rounds, beta, lambda_bar)?;
    let trace = run_simulation(&config)?;
    let text = match cli.format {
        Format::Lines => {
            let mut buf = Vec::new();
            write_trace(&trace, &mut buf).map_err(|e| CliError::Usage(e.into()))?;
            String::from_utf8(buf).map_err(|e| CliError::Usage(e.into()))?
        }
        Format::Csv => csv_table(&round_rows(&trace))?,
    };
    Ok((text, Status::Pass))
}

#[derive(Serialize)]
struct RegretRow {
    player: usize,
    realized_utility: f64,
    best_response_lambda: f64,
    best_response_utility: f64,
    strong_regret: f64,
    normalized: f64,
    certified_lower_bound: bool,
}

fn audit_doc(trace: &SimulationTrace, aggregate: bool, delta: f64) -> Result<AuditDoc, CliError> {
    let reports = (0..trace.n())
        .map(|i| audit_strong_regret(trace, i, None))
        .collect::<Result<Vec<_>, _>>()?;
    let regularized = trace.config.regularizer()?.is_some();
    let aggregate = if aggregate || regularized {
        Some(aggregate_and_verify(trace, delta)?)
    } else {
        None
    };
    Ok(AuditDoc { reports, aggregate })
}

fn audit(cli: &Cli, path: &Path, aggregate: bool, delta: f64) -> Out {
    let text = read_text(path)?;
    let trace =
        read_trace(&text).map_err(|e| CliError::Usage(anyhow!("{}: {e}", path.display())))?;
    let doc = audit_doc(&trace, aggregate, delta)?;
    let status = match &doc.aggregate {
        Some(a) if !a.certificate.pass => Status::Fail,
        _ => Status::Pass,
    };
    let text = render(cli.format, &doc, || {
        doc.reports
            .iter()
            .map(|r| RegretRow {
                player: r.player,
                realized_utility: r.realized_utility,
                best_response_lambda: r.best_response_lambda,
                best_response_utility: r.best_response_utility,
                strong_regret: r.strong_regret,
                normalized: r.normalized,
                certified_lower_bound: r.certified_lower_bound,
            })
            .collect()
    })?;
    Ok((text, status))
}

fn sweep(cli: &Cli, paths: &[std::path::PathBuf], runs: usize, delta: f64) -> Out {
    let mut jobs = Vec::new();
    for path in paths {
        let base: ScenarioConfig = read_json(path)?;
        base.validate()?;
        for _ in 0..runs {
            jobs.push((path.display().to_string(), base.clone()));
        }
    }
    let seed0 = cli.seed;
    let results: Vec<Result<Vec<SweepRow>, CliError>> = jobs
        .into_par_iter()
        .enumerate()
        .map(|(run, (name, mut config))| {
            config.seed = seed0.unwrap_or(config.seed) + run as u64;
            let trace = run_simulation(&config)?;
            let doc = audit_doc(&trace, false, delta)?;
            let pass = doc.aggregate.as_ref().map(|a| a.certificate.pass);
            Ok(doc
                .reports
                .iter()
                .map(|r| SweepRow {
                    run,
                    config: name.clone(),
                    seed: config.seed,
                    player: r.player,
                    mean_payment: trace.aggregate.mean_payments[r.player],
                    mean_utility: trace.aggregate.mean_utilities[r.player],
                    strong_regret: r.strong_regret,
                    normalized_regret: r.normalized,
                    certificate_pass: pass,
                })
                .collect())
        })
        .collect();
    let mut table = Vec::new();
    for r in results {
        table.extend(r?);
    }
    let text = match cli.format {
        Format::Lines => {
            let mut s = String::new();
            for row in &table {
                s.push_str(&json_line(row)?);
            }
            s
        }
        Format::Csv => csv_table(&table)?,
    };
    let status = if table.iter().all(|r| r.certificate_pass != Some(false)) {
        Status::Pass
    } else {
        Status::Fail
    };
    Ok((text, status))
}
