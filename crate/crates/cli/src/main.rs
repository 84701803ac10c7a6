use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dktv::experiments::bound_report::{BoundReportExperiment, BoundVerdict};
use dktv::experiments::cartpole::MpcExperiment;
use dktv::experiments::nh_sweep::NhSweepExperiment;
use dktv::experiments::quad::QuadExperiment;
use dktv::experiments::simple_ntvs::NtvsExperiment;
use dktv::experiments::ExperimentConfig;
use dktv::io::write_json;
use dktv::par::Exec;

mod plot;

use plot::{line_chart, Series};

#[derive(Parser)]
#[command(name = "dktv", version, about = "Online deep Koopman learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also render SVG line plots.
    #[arg(long)]
    plots: bool,
    /// Run replicas on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    fn out_dir(&self, id: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out").join(id))
    }
}

#[derive(Subcommand)]
enum Command {
    /// DKTV against TVDMD on the two-state time-varying system.
    SimpleNtvs(Common),
    /// DKTV against a single network on the disturbed quadcopter flight.
    QuadPredict(Common),
    /// Prediction error against the hidden width.
    NhSweep(Common),
    /// Receding-horizon balance of the cartpole with growing friction.
    MpcCartpole(Common),
    /// Error-bound reports for a finished run on disk.
    BoundReport {
        #[command(flatten)]
        common: Common,
        /// Run directory holding `trajectory.csv` and `snapshots/`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Oracle run with a larger epoch budget that fixes the absolute
    /// error thresholds of the simple system.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        epoch_factor: usize,
        #[arg(long, default_value_t = 2.0)]
        slack: f64,
        /// Write the thresholds back into the configuration file.
        #[arg(long)]
        write: bool,
    },
}

#[derive(Serialize)]
struct Check {
    name: String,
    passed: bool,
    detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn load(common: &Common) -> Result<Option<ExperimentConfig>> {
    match &common.config {
        None => Ok(None),
        Some(p) => {
            let cfg = ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(Some(cfg))
        }
    }
}

macro_rules! config_of {
    ($common:expr, $variant:ident, $ty:ty) => {
        match load($common)? {
            None => <$ty>::default(),
            Some(ExperimentConfig::$variant(c)) => c,
            Some(other) => bail!("configuration is for `{}`", other.id()),
        }
    };
}

fn finish(out: &Path, checks: Vec<Check>) -> Result<bool> {
    for c in &checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("[{mark}] {}: {}", c.name, c.detail);
    }
    write_json(&out.join("checks.json"), &checks)?;
    Ok(checks.iter().all(|c| c.passed))
}

fn simple_ntvs(common: &Common) -> Result<bool> {
    let mut cfg = config_of!(common, SimpleNtvs, NtvsExperiment);
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    let out = common.out_dir("simple_ntvs");
    let runs = cfg.run(common.exec()).context("simple_ntvs")?;
    let mut checks = Vec::new();
    for r in &runs {
        r.write_artifacts(&out)?;
        let s = r.summary();
        if cfg.is_fast(r.gamma) {
            checks.push(Check::new(
                format!("{} dktv below tvdmd", r.tag()),
                s.dktv_mean_error < s.tvdmd_mean_error,
                format!("{:.4} vs {:.4}", s.dktv_mean_error, s.tvdmd_mean_error),
            ));
        }
        if let Some(t) = cfg.threshold(r.gamma) {
            checks.push(Check::new(
                format!("{} dktv within threshold", r.tag()),
                s.dktv_mean_error <= t.limit(),
                format!("{:.4} <= {:.4}", s.dktv_mean_error, t.limit()),
            ));
        }
        if common.plots {
            let t = &r.trajectory.times;
            line_chart(
                &out.join(r.tag()).join("errors.svg"),
                &format!("estimation error, gamma = {}", r.gamma),
                "t [s]",
                "error",
                &[Series::from_xy("DKTV", t, &r.dktv.errors), Series::from_xy("TVDMD", t, &r.tvdmd.errors)],
            )?;
        }
    }
    write_json(&out.join("summary.json"), &runs.iter().map(|r| r.summary()).collect::<Vec<_>>())?;
    finish(&out, checks)
}

fn quad_predict(common: &Common) -> Result<bool> {
    let mut cfg = config_of!(common, QuadPredict, QuadExperiment);
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    let out = common.out_dir("quad_predict");
    let runs = cfg.run(common.exec()).context("quad_predict")?;
    let mut checks = Vec::new();
    for r in &runs {
        r.write_artifacts(&out)?;
        let s = r.summary();
        checks.push(Check::new(
            format!("s{} dktv final loss below single network", r.seed),
            s.dktv_final_loss < s.dnn_final_loss,
            format!("{:.3e} vs {:.3e}", s.dktv_final_loss, s.dnn_final_loss),
        ));
        if common.plots {
            let d = out.join(format!("s{}", r.seed));
            let dktv: Vec<f64> = r.snapshots.iter().flat_map(|s| s.train_stats.iter().map(|l| l.total)).collect();
            let dnn: Vec<f64> = r.dnn_traces.iter().flatten().copied().collect();
            let idx = |v: &[f64]| v.iter().enumerate().map(|(i, y)| (i as f64, y.max(1e-300).log10())).collect();
            line_chart(
                &d.join("loss.svg"),
                "training loss",
                "epoch (all batches)",
                "log10 loss",
                &[Series::new("DKTV", idx(&dktv)), Series::new("single DNN", idx(&dnn))],
            )?;
            let t = &r.trajectory.times;
            line_chart(
                &d.join("errors.svg"),
                "estimation error",
                "t [s]",
                "error",
                &[Series::from_xy("DKTV", t, &r.dktv.errors), Series::from_xy("single DNN", t, &r.single.errors)],
            )?;
        }
    }
    write_json(&out.join("summary.json"), &runs.iter().map(|r| r.summary()).collect::<Vec<_>>())?;
    finish(&out, checks)
}

fn nh_sweep(common: &Common) -> Result<bool> {
    let mut cfg = config_of!(common, NhSweep, NhSweepExperiment);
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out_dir("nh_sweep");
    let run = cfg.run(common.exec()).context("nh_sweep")?;
    run.write_artifacts(&out)?;
    let s = run.summary();
    if common.plots {
        let pts = s.widths.iter().zip(&s.mean_errors).map(|(w, e)| (*w as f64, *e)).collect();
        line_chart(&out.join("nh_sweep.svg"), "mean error against width", "n_h", "mean error", &[Series::new("DKTV", pts)])?;
    }
    let detail = s
        .widths
        .iter()
        .zip(&s.mean_errors)
        .map(|(w, e)| format!("{w}: {e:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    finish(&out, vec![Check::new("error decreases from narrowest to widest", s.endpoint_decrease, detail)])
}

fn mpc_cartpole(common: &Common) -> Result<bool> {
    let mut cfg = config_of!(common, MpcCartpole, MpcExperiment);
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    let out = common.out_dir("mpc_cartpole");
    let runs = cfg.run(common.exec()).context("mpc_cartpole")?;
    let mut checks = Vec::new();
    for r in &runs {
        r.write_artifacts(&out)?;
        let s = r.summary();
        if let Some(t) = s.failed_at {
            log::error!("seed {}: pole fell at t = {t:.1} s", r.seed);
        }
        checks.push(Check::new(
            format!("s{} balanced", r.seed),
            s.balanced,
            format!("max |theta| = {:.4} rad, final mu_c = {:.3}", s.max_abs_theta, s.final_mu_c),
        ));
        if common.plots {
            let rows = &r.result.rows;
            let pts = |f: fn(&dktv::mpc::ClosedLoopRow) -> f64| rows.iter().map(|row| (row.t, f(row))).collect();
            let d = out.join(format!("s{}", r.seed));
            line_chart(
                &d.join("theta.svg"),
                "pole angle",
                "t [s]",
                "theta [rad]",
                &[Series::new("theta", pts(|r| r.theta))],
            )?;
            line_chart(
                &d.join("cart.svg"),
                "cart",
                "t [s]",
                "",
                &[Series::new("x [m]", pts(|r| r.x)), Series::new("mu_c", pts(|r| r.mu_c))],
            )?;
        }
    }
    write_json(&out.join("summary.json"), &runs.iter().map(|r| r.summary()).collect::<Vec<_>>())?;
    finish(&out, checks)
}

fn bound_report(common: &Common, run_dir: &Option<PathBuf>) -> Result<bool> {
    let mut cfg = config_of!(common, BoundReport, BoundReportExperiment);
    if let Some(d) = run_dir {
        cfg.run_dir = d.clone();
    }
    let out = common.out_dir("bound_report");
    let reports = cfg
        .run(common.exec())
        .with_context(|| format!("bound report for {}", cfg.run_dir.display()))?;
    let verdict: BoundVerdict = BoundReportExperiment::write_artifacts(&out, &reports)?;
    if common.plots {
        let bound = reports.iter().map(|r| (r.tau as f64, r.total_bound.max(1e-300).log10())).collect();
        let obs_log = reports.iter().map(|r| (r.tau as f64, r.max_observed().max(1e-300).log10())).collect();
        line_chart(
            &out.join("bounds.svg"),
            "observed error and bound",
            "batch",
            "log10",
            &[Series::new("max observed", obs_log), Series::new("L_a + L_b + L_c", bound)],
        )?;
    }
    finish(
        &out,
        vec![Check::new(
            "observed errors within bound unless a breach is flagged",
            verdict.unexplained_violations == 0,
            format!(
                "{} batches, {} violations, {} with flagged breaches",
                verdict.batches, verdict.violations, verdict.breached_batches
            ),
        )],
    )
}

fn calibrate(common: &Common, epoch_factor: usize, slack: f64, write: bool) -> Result<bool> {
    if epoch_factor == 0 || !(slack >= 1.0) {
        bail!("epoch factor must be positive and slack at least 1");
    }
    let mut cfg = config_of!(common, SimpleNtvs, NtvsExperiment);
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    let thresholds = cfg.calibrate(epoch_factor, slack, common.exec()).context("calibration run")?;
    println!("{}", serde_json::to_string_pretty(&thresholds)?);
    if write {
        let Some(path) = &common.config else {
            bail!("--write needs --config");
        };
        cfg.thresholds = thresholds;
        write_json(path, &ExperimentConfig::SimpleNtvs(cfg))?;
        println!("thresholds written to {}", path.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::SimpleNtvs(c) => simple_ntvs(c),
        Command::QuadPredict(c) => quad_predict(c),
        Command::NhSweep(c) => nh_sweep(c),
        Command::MpcCartpole(c) => mpc_cartpole(c),
        Command::BoundReport { common, run_dir } => bound_report(common, run_dir),
        Command::Calibrate {
            common,
            epoch_factor,
            slack,
            write,
        } => calibrate(common, *epoch_factor, *slack, *write),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
