//! Command-line front end for the robust DDPC experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use rddpc::controllers::UncertaintyModel;
use rddpc::harness::{
    self, benchmark_solve_times, collect_data, grid_search_lambda, monte_carlo, prepare_data,
    resolve_lambda, ControllerKind, ExperimentConfig, LambdaSpec,
};
use rddpc::verify;

#[derive(Parser)]
#[command(name = "rddpc", version, about = "Robust data-driven predictive control experiments")]
struct Cli {
    /// Experiment configuration file (TOML). Omitted fields fall back to
    /// the benchmark defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the base seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect offline data per the config and write it as CSV.
    Collect,
    /// Tune Lambda from held-out validation slices and print it.
    TuneLambda,
    /// Run a single receding-horizon trial.
    Run {
        /// Controller: spc, pbr, rddpc, or frddpc.
        #[arg(long, default_value = "rddpc")]
        controller: String,
    },
    /// Run a Monte Carlo campaign over all configured controllers.
    Montecarlo {
        /// Trial count override.
        #[arg(long)]
        trials: Option<usize>,
        /// Restrict the campaign to a single controller.
        #[arg(long)]
        controller: Option<String>,
    },
    /// Average J_total per (controller, Lambda) over a Lambda grid.
    Gridsearch {
        /// Comma-separated Lambda values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Median solver times per formulation and sample size.
    Bench {
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        /// Solve count per fast formulation.
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Solve count for the full-LMI SDPs (slow at large N).
        #[arg(long, default_value_t = 3)]
        full_repeats: usize,
    },
    /// Run the oracle and theorem-bound verification suite.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("usage: rddpc [--config <file>] [--seed <n>] [--out <dir>] <subcommand>");
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_toml_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn parse_controller(name: &str) -> anyhow::Result<ControllerKind> {
    name.parse::<ControllerKind>().map_err(|e| anyhow::anyhow!(e))
}

fn dispatch(cli: &Cli, mut config: ExperimentConfig) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::Collect => {
            let dir = out_dir(cli)?;
            let traj = collect_data(&config, config.seed.wrapping_add(0xda7a))?;
            let path = dir.join("data.csv");
            traj.to_csv(&path)?;
            println!("wrote {} samples to {}", traj.len(), path.display());
        }
        Cmd::TuneLambda => {
            config.lambda = LambdaSpec::Tuned;
            let prepared = prepare_data(&config, config.seed.wrapping_add(0xda7a))?;
            let lambda = resolve_lambda(&config, &prepared.data)?;
            println!("{lambda}");
        }
        Cmd::Run { controller } => {
            let dir = out_dir(cli)?;
            config.controllers = vec![parse_controller(controller)?];
            let report = monte_carlo(&config, 1, Some(&dir))?;
            let trial = &report.trials[0];
            if let Some(e) = &trial.error {
                anyhow::bail!("trial failed: {e}");
            }
            println!(
                "{}: J_total {:.6} over {} steps (Lambda {:.4}); report in {}",
                controller,
                trial.j_total,
                config.n_test,
                report.lambda,
                dir.join("report.json").display(),
            );
        }
        Cmd::Montecarlo { trials, controller } => {
            let dir = out_dir(cli)?;
            if let Some(c) = controller {
                config.controllers = vec![parse_controller(c)?];
            }
            let n = trials.unwrap_or(config.trials);
            let report = monte_carlo(&config, n, Some(&dir))?;
            println!("Lambda {:.4}, {} trials per controller", report.lambda, n);
            for (name, agg) in &report.aggregate {
                println!(
                    "{name}: mean J {:.4} (std {:.4}, median {:.4}, {} failed)",
                    agg.mean_j, agg.std_j, agg.median_j, agg.n_failed
                );
            }
            println!("report in {}", dir.join("report.json").display());
        }
        Cmd::Gridsearch { grid } => {
            let dir = out_dir(cli)?;
            let default_grid = vec![1e-10, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 100.0];
            let grid = grid.clone().unwrap_or(default_grid);
            let table = grid_search_lambda(&config, &grid)?;
            let path = dir.join("grid.csv");
            table.to_csv(&path)?;
            for row in table.rows.iter().filter(|r| r.argmin) {
                println!(
                    "{}: argmin Lambda {} (mean J {:.4})",
                    row.controller.name(),
                    row.lambda,
                    row.mean_j
                );
            }
            println!("wrote {}", path.display());
        }
        Cmd::Bench { n, repeats, full_repeats } => {
            let dir = out_dir(cli)?;
            let n_values = n.clone().unwrap_or_else(|| vec![100, 300, 600]);
            let table = benchmark_solve_times(&config, &n_values, *repeats, *full_repeats)?;
            let path = dir.join("bench.csv");
            table.to_csv(&path)?;
            for row in &table.rows {
                println!(
                    "{:>14} N={:<4} median {:.6}s over {} solves",
                    row.formulation, row.n, row.median_seconds, row.solves
                );
            }
            println!("wrote {}", path.display());
        }
        Cmd::Verify => run_verify(&config)?,
    }
    Ok(())
}

/// Oracle and theorem-bound suite: fundamental-lemma residuals, Eq.-based
/// Lambda tuning, the a-priori bound, an oracle cross-check of the SDP
/// certificate, and a cost-certificate rollout.
fn run_verify(config: &ExperimentConfig) -> anyhow::Result<()> {
    let mut failures = 0;
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let prepared = prepare_data(config, config.seed.wrapping_add(0xda7a))?;
    let data = &prepared.data;
    let clean_traj = prepared
        .trajectory
        .clean_twin()
        .ok_or_else(|| anyhow::anyhow!("offline data lacks a noiseless twin"))?;
    let clean = rddpc::behavioral::partition(&clean_traj, config.l_p, config.l_f)?;

    let m_ratio = {
        let m = data.m.clone().svd(false, false).singular_values.max();
        let yf = data.yf.clone().svd(false, false).singular_values.max();
        m / yf
    };
    check(
        "fundamental-lemma residual (noisy data)",
        m_ratio > 1e-8,
        format!("||Y_f Phi_perp||/||Y_f|| = {m_ratio:.3e}"),
    );

    let mut tuned_cfg = config.clone();
    tuned_cfg.lambda = LambdaSpec::Tuned;
    let lambda = resolve_lambda(&tuned_cfg, data)?;
    check("tuned Lambda", lambda.is_finite() && lambda > 0.0, format!("{lambda:.4}"));

    let (nu, ny) = (config.noise.sigma_input, config.noise.sigma_output);
    // AR(1) with |innovation| <= 3 sigma and coefficient 1/2 stays within
    // 6 sigma; used as the Assumption-style noise envelope.
    let (xi_u, xi_y) = (6.0 * nu, 6.0 * ny);
    let u_p = DVector::zeros(config.l_p);
    let u_f = DVector::from_element(config.l_f, 0.2);
    let y_p = DVector::zeros(4 * config.l_p);
    let bounds =
        verify::theorem1_lambda_o(data, &clean, config.n_x, xi_u, xi_y, &u_p, &u_f, &y_p)?;
    check(
        "theorem-1 bound dominates tuned Lambda",
        bounds.lambda_o / lambda >= 1e4,
        format!("Lambda_o = {:.3e}, ratio {:.1e}", bounds.lambda_o, bounds.lambda_o / lambda),
    );

    // Oracle cross-check of the SDP certificate on a synthetic instance.
    let oracle_ok = oracle_cross_check()?;
    check("oracle vs SDP certificate", oracle_ok.0, oracle_ok.1);

    let rollout = harness::open_loop_bound_rollout(
        config,
        ControllerKind::Rddpc,
        &prepared,
        lambda,
        config.seed,
    )?;
    let ok = !rollout.membership || rollout.pass;
    check(
        "theorem-2 cost certificate rollout",
        ok,
        format!(
            "membership {}, realized {:.4} vs bound {:.4}",
            rollout.membership, rollout.realized_cost, rollout.bound
        ),
    );

    if failures > 0 {
        anyhow::bail!("{failures} verification check(s) failed");
    }
    Ok(())
}

fn oracle_cross_check() -> anyhow::Result<(bool, String)> {
    use rddpc::controllers::{solve_rddpc, ControlConfig};
    let n_y = 2;
    let m = nalgebra::DMatrix::from_row_slice(n_y, 3, &[0.4, -0.1, 0.2, 0.3, 0.5, -0.2]);
    let m_f = nalgebra::DMatrix::from_row_slice(n_y, 1, &[1.0, 0.5]);
    let m_p = nalgebra::DMatrix::zeros(n_y, 1 + n_y);
    let model =
        UncertaintyModel::from_parts(m_f, m_p, m.clone(), nalgebra::DMatrix::identity(3, 3), 1, 2, 1);
    let config = ControlConfig {
        l_p: 1,
        l_f: 1,
        q_step: nalgebra::DMatrix::identity(2, 2),
        r_step: nalgebra::DMatrix::from_element(1, 1, 0.1),
        y_r: DVector::from_column_slice(&[0.5, -0.2]),
        input_constraints: vec![],
        output_constraints: vec![],
        lambda: 0.7,
        settings: Default::default(),
    };
    let sol = solve_rddpc(&model, &config, &DVector::zeros(1), &DVector::zeros(2))?;
    let oracle = verify::worst_case_cost_oracle(
        &sol.b,
        &m,
        &config.q_step,
        &config.y_r,
        config.lambda,
        3,
    )?;
    let rel = (sol.psi - oracle.max_value).abs() / oracle.max_value.max(1e-12);
    Ok((rel <= 1e-3, format!("psi {:.6} vs oracle {:.6} (rel {rel:.2e})", sol.psi, oracle.max_value)))
}
