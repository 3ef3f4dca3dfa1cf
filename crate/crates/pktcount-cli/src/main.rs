//! Command-line frontend: fit, simulate, localize, evaluate, reproduce.
//!
//! Exit codes: 0 success, 2 input error, 3 quality warning (files are still
//! written, but a convergence diagnostic failed).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pktcount::evaluation::{
    compare_report, compare_rows_to_csv, per_window_error, summarize, timeseries_export,
    ErrorReport, RunMeta, TimeseriesRun,
};
use pktcount::inference::{
    fit_reception_bayes, summarize_posterior, write_posterior_csv, PriorSpec, TrainingDataset,
    TrainingRow,
};
use pktcount::layout::LayoutSpec;
use pktcount::localizer::{
    mcl_localize, pcmcl_localize, LocalizerConfig, StackMode, TrajectoryEstimate,
};
use pktcount::mcmc::{split_seed_label, McmcConfig};
use pktcount::model::{RadioConfig, ReceptionModel};
use pktcount::simulator::{
    binomial_draw, gen_trajectory, simulate_trace, GroundTruth, MovementScript,
};
use pktcount::trace::PacketTrace;
use pktcount::{Error, Result};

const RHAT_WARN: f64 = 1.1;

#[derive(Parser)]
#[command(name = "pktcount", version, about = "BLE packet-count localization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct McmcArgs {
    /// Number of MCMC chains
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Total iterations per chain
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    /// Burn-in iterations (discarded, with step adaptation)
    #[arg(long, default_value_t = 5_000)]
    burn_in: usize,
    /// Master seed; sub-components split it deterministically
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl McmcArgs {
    fn to_config(&self) -> McmcConfig {
        McmcConfig {
            chains: self.chains,
            iterations: self.iters,
            burn_in: self.burn_in,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Algorithm {
    Pcmcl,
    Mcl,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StackModeArg {
    Thresholds,
    Dirichlet,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the reception model from a training dataset CSV
    Fit {
        /// Training CSV with header d_m,f_hz,power_dbm,stacks,c,n_sent
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Normal prior mean on each coefficient
        #[arg(long, default_value_t = 0.0)]
        prior_mu: f64,
        /// Normal prior standard deviation on each coefficient
        #[arg(long, default_value_t = 10.0)]
        prior_sigma: f64,
        /// Fit the full quadratic instead of the reduced form
        #[arg(long)]
        full: bool,
        #[command(flatten)]
        mcmc: McmcArgs,
    },
    /// Generate a ground-truth walk and a synthetic packet trace
    Simulate {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Movement script JSON (waypoints, pause_s, speed_mps, dt_s)
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        freq_hz: f64,
        /// Absolute transmit power in dBm
        #[arg(long, allow_negative_numbers = true)]
        power_dbm: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Estimate the trajectory from a packet trace
    Localize {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        /// Reception model JSON; required for pcmcl
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        algorithm: Algorithm,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        freq_hz: f64,
        #[arg(long, allow_negative_numbers = true)]
        power_dbm: f64,
        /// Window length in seconds
        #[arg(long, default_value_t = 10.0)]
        delta_s: f64,
        /// Maximum walking speed (m/s)
        #[arg(long, default_value_t = 2.0)]
        s_max: f64,
        #[arg(long, value_enum, default_value = "thresholds")]
        stack_mode: StackModeArg,
        /// MCL radio range in meters; required for mcl
        #[arg(long)]
        d0_m: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        particles: usize,
        #[command(flatten)]
        mcmc: McmcArgs,
    },
    /// Compare estimates against ground truth
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        /// PC-MCL estimate CSV
        #[arg(long)]
        pcmcl: Option<PathBuf>,
        /// MCL estimate CSV
        #[arg(long)]
        mcl: Option<PathBuf>,
        /// Radio settings echoed into the reports
        #[arg(long, default_value_t = 0.0)]
        freq_hz: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        power_dbm: f64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Full synthetic pipeline: simulate, fit, localize both ways, evaluate
    /// over the 9-configuration frequency/power grid
    Reproduce {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20_000)]
        iters: usize,
        #[arg(long, default_value_t = 5_000)]
        burn_in: usize,
        /// Chains for the localization runs (the fit always uses 4)
        #[arg(long, default_value_t = 2)]
        chains: usize,
        #[arg(long, default_value_t = 1000)]
        particles: usize,
        /// MCL radio range in meters
        #[arg(long, default_value_t = 10.0)]
        d0_m: f64,
    },
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("PKTCOUNT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: PKTCOUNT_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    pktcount::io::write_atomic(path, text.as_bytes())
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Fit { dataset, out_dir, prior_mu, prior_sigma, full, mcmc } => cmd_fit(
            &dataset,
            &out_dir,
            PriorSpec { mu: prior_mu, sigma: prior_sigma },
            !full,
            &mcmc.to_config(),
        ),
        Command::Simulate { layout, model, script, freq_hz, power_dbm, seed, out_dir } => {
            cmd_simulate(&layout, &model, &script, freq_hz, power_dbm, seed, &out_dir)
        }
        Command::Localize {
            trace,
            layout,
            model,
            algorithm,
            out,
            freq_hz,
            power_dbm,
            delta_s,
            s_max,
            stack_mode,
            d0_m,
            particles,
            mcmc,
        } => {
            let trace = PacketTrace::from_csv_file(&trace)?;
            let layout = LayoutSpec::from_json_file(&layout)?;
            let radio = RadioConfig::from_dbm(freq_hz, power_dbm, delta_s)?;
            let est = match algorithm {
                Algorithm::Pcmcl => {
                    let model_path = model.ok_or_else(|| {
                        Error::InvalidArgument("--model is required for pcmcl".into())
                    })?;
                    let model: ReceptionModel = read_json(&model_path)?;
                    let config = LocalizerConfig {
                        delta_s,
                        s_max,
                        mcmc: mcmc.to_config(),
                        stack_mode: match stack_mode {
                            StackModeArg::Thresholds => StackMode::Thresholds,
                            StackModeArg::Dirichlet => StackMode::Dirichlet,
                        },
                        ..Default::default()
                    };
                    pcmcl_localize(&trace, &layout, &model, &radio, &config)?
                }
                Algorithm::Mcl => {
                    let d0 = d0_m.ok_or_else(|| {
                        Error::InvalidArgument("--d0-m is required for mcl".into())
                    })?;
                    mcl_localize(&trace, &layout, &radio, d0, particles, s_max, mcmc.seed)?
                }
            };
            est.to_csv_file(&out)?;
            Ok(0)
        }
        Command::Evaluate { truth, pcmcl, mcl, freq_hz, power_dbm, out_dir } => {
            cmd_evaluate(&truth, pcmcl.as_deref(), mcl.as_deref(), freq_hz, power_dbm, &out_dir)
        }
        Command::Reproduce { out_dir, seed, iters, burn_in, chains, particles, d0_m } => {
            cmd_reproduce(&out_dir, seed, iters, burn_in, chains, particles, d0_m)
        }
    }
}

fn cmd_fit(
    dataset: &Path,
    out_dir: &Path,
    prior: PriorSpec,
    reduced: bool,
    config: &McmcConfig,
) -> Result<u8> {
    let data = TrainingDataset::from_csv_file(dataset)?;
    std::fs::create_dir_all(out_dir)?;
    let (posteriors, model) = fit_reception_bayes(&data, &prior, config, reduced)?;

    write_json(&out_dir.join("model.json"), &model)?;
    let mut worst_rhat: f64 = 0.0;
    let mut strata_summaries = Vec::new();
    for (stacks, samples) in &posteriors {
        write_posterior_csv(samples, &out_dir.join(format!("posterior_s{stacks}.csv")))?;
        let summary = summarize_posterior(samples)?;
        for p in &summary {
            worst_rhat = worst_rhat.max(p.rhat);
        }
        strata_summaries.push(serde_json::json!({
            "stacks": stacks,
            "params": summary.iter().map(|p| serde_json::json!({
                "name": p.name,
                "mean": p.mean,
                "sd": p.sd,
                "rhat": p.rhat,
                "ess": p.ess,
            })).collect::<Vec<_>>(),
        }));
    }
    let converged = worst_rhat < RHAT_WARN;
    write_json(
        &out_dir.join("fit_summary.json"),
        &serde_json::json!({
            "strata": strata_summaries,
            "worst_rhat": worst_rhat,
            "converged": converged,
        }),
    )?;
    if converged {
        Ok(0)
    } else {
        eprintln!("warning: worst rhat {worst_rhat:.4} >= {RHAT_WARN}; treat the fit as unconverged");
        Ok(3)
    }
}

fn cmd_simulate(
    layout_path: &Path,
    model_path: &Path,
    script_path: &Path,
    freq_hz: f64,
    power_dbm: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<u8> {
    let layout = LayoutSpec::from_json_file(layout_path)?;
    let model: ReceptionModel = read_json(model_path)?;
    let script: MovementScript = read_json(script_path)?;
    let radio = RadioConfig::from_dbm(freq_hz, power_dbm, 10.0)?;
    let truth = gen_trajectory(&script, &layout, seed)?;
    let trace = simulate_trace(&truth, &layout, &model, &radio, seed)?;
    std::fs::create_dir_all(out_dir)?;
    trace.to_csv_file(&out_dir.join("trace.csv"))?;
    truth.to_csv_file(&out_dir.join("truth.csv"))?;
    Ok(0)
}

/// Transition flags per window from the ground truth: a window is a
/// transition window when the truth position at its center is in a corridor.
fn corridor_flags(est: &TrajectoryEstimate, truth: &GroundTruth) -> Vec<bool> {
    est.windows
        .iter()
        .map(|w| {
            truth
                .sample_at(w.t_center_s.clamp(0.0, truth.duration_s()))
                .map(|s| s.corridor)
                .unwrap_or(false)
        })
        .collect()
}

fn cmd_evaluate(
    truth_path: &Path,
    pcmcl: Option<&Path>,
    mcl: Option<&Path>,
    freq_hz: f64,
    power_dbm: f64,
    out_dir: &Path,
) -> Result<u8> {
    if pcmcl.is_none() && mcl.is_none() {
        return Err(Error::InvalidArgument("provide --pcmcl and/or --mcl".into()));
    }
    let truth = GroundTruth::from_csv_file(truth_path)?;
    std::fs::create_dir_all(out_dir)?;

    let mut reports: Vec<(String, ErrorReport)> = Vec::new();
    let mut runs = Vec::new();
    for (name, path) in [("pcmcl", pcmcl), ("mcl", mcl)] {
        let Some(path) = path else { continue };
        let est = TrajectoryEstimate::from_csv_file(path)?;
        let errors = per_window_error(&est, &truth)?;
        let report = summarize(
            &errors,
            &corridor_flags(&est, &truth),
            RunMeta { algorithm: name.into(), freq_hz, power_dbm },
        )?;
        report.to_json_file(&out_dir.join(format!("report_{name}.json")))?;
        runs.push(TimeseriesRun {
            algorithm: name.to_string(),
            estimate: est,
            errors_m: errors,
        });
        reports.push((name.to_string(), report));
    }
    if reports.len() == 2 {
        let a = &runs[0].estimate.windows;
        let b = &runs[1].estimate.windows;
        if a.len() != b.len() {
            return Err(Error::InvalidArgument(format!(
                "window mismatch: {} vs {} windows",
                a.len(),
                b.len()
            )));
        }
        let rows = compare_report(&[(reports[0].1.clone(), reports[1].1.clone())])?;
        compare_rows_to_csv(&rows, &out_dir.join("table.csv"))?;
    }
    timeseries_export(&runs, &out_dir.join("timeseries.csv"))?;
    Ok(0)
}

/// Synthetic training grid: counts drawn from the true model over
/// frequencies {1,2,10}, powers {-20,-15,-12} dBm, distances 1..=10 m, for
/// every stack stratum.
fn synthetic_training_data(model: &ReceptionModel, seed: u64) -> Result<TrainingDataset> {
    let mut rng = rand_chacha_rng(split_seed_label(seed, "training"));
    let mut rows = Vec::new();
    let n_sent = 100;
    for stacks in 0..=model.max_stacks {
        for &f in &[1.0, 2.0, 10.0] {
            for &r in &[-8.0, -3.0, 0.0] {
                for d in 1..=10 {
                    let d = d as f64;
                    let p = pktcount::model::reception_prob(model, stacks, d, f, r)?;
                    let c = binomial_draw(n_sent, p, &mut rng)?;
                    rows.push(TrainingRow { d, f, r, stacks, c, n_sent });
                }
            }
        }
    }
    TrainingDataset::new(rows)
}

fn rand_chacha_rng(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn cmd_reproduce(
    out_dir: &Path,
    seed: u64,
    iters: usize,
    burn_in: usize,
    chains: usize,
    particles: usize,
    d0_m: f64,
) -> Result<u8> {
    std::fs::create_dir_all(out_dir)?;
    let layout = LayoutSpec::demo_three_stack();
    let true_model = ReceptionModel::demo();
    let script = MovementScript::demo_walk();
    layout.to_json_file(&out_dir.join("layout.json"))?;
    write_json(&out_dir.join("true_model.json"), &true_model)?;
    write_json(&out_dir.join("script.json"), &script)?;

    // one pooled fit over all strata; the fitted model drives localization
    let data = synthetic_training_data(&true_model, seed)?;
    data.to_csv_file(&out_dir.join("training.csv"))?;
    let fit_code = cmd_fit(
        &out_dir.join("training.csv"),
        out_dir,
        PriorSpec::default(),
        true,
        &McmcConfig { seed: split_seed_label(seed, "fit"), ..Default::default() },
    )?;
    let fitted: ReceptionModel = read_json(&out_dir.join("model.json"))?;

    let mut pairs = Vec::new();
    for &f in &[1.0, 2.0, 10.0] {
        for &power_dbm in &[-20.0, -15.0, -12.0] {
            let tag = format!("f{f}_p{power_dbm}");
            let cfg_dir = out_dir.join(&tag);
            std::fs::create_dir_all(&cfg_dir)?;
            let radio = RadioConfig::from_dbm(f, power_dbm, 10.0)?;
            let run_seed = split_seed_label(seed, &tag);
            let truth = gen_trajectory(&script, &layout, run_seed)?;
            let trace = simulate_trace(&truth, &layout, &true_model, &radio, run_seed)?;
            trace.to_csv_file(&cfg_dir.join("trace.csv"))?;
            truth.to_csv_file(&cfg_dir.join("truth.csv"))?;

            let config = LocalizerConfig {
                mcmc: McmcConfig {
                    chains,
                    iterations: iters,
                    burn_in,
                    seed: run_seed,
                    ..Default::default()
                },
                ..Default::default()
            };
            let est_p = pcmcl_localize(&trace, &layout, &fitted, &radio, &config)?;
            let est_m = mcl_localize(&trace, &layout, &radio, d0_m, particles, 2.0, run_seed)?;
            est_p.to_csv_file(&cfg_dir.join("estimate_pcmcl.csv"))?;
            est_m.to_csv_file(&cfg_dir.join("estimate_mcl.csv"))?;

            let mut reports = Vec::new();
            let mut runs = Vec::new();
            for (name, est) in [("pcmcl", est_p), ("mcl", est_m)] {
                let errors = per_window_error(&est, &truth)?;
                let report = summarize(
                    &errors,
                    &corridor_flags(&est, &truth),
                    RunMeta { algorithm: name.into(), freq_hz: f, power_dbm },
                )?;
                report.to_json_file(&cfg_dir.join(format!("report_{name}.json")))?;
                runs.push(TimeseriesRun {
                    algorithm: name.to_string(),
                    estimate: est,
                    errors_m: errors,
                });
                reports.push(report);
            }
            timeseries_export(&runs, &cfg_dir.join("timeseries.csv"))?;
            pairs.push((reports.remove(0), reports.remove(0)));
        }
    }
    let rows = compare_report(&pairs)?;
    compare_rows_to_csv(&rows, &out_dir.join("table.csv"))?;
    Ok(fit_code)
}
