use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hypode::config::{load_config, Config};
use hypode::design::run_design;
use hypode::model::validate_plant;
use hypode::output::{config_hash, DesignOutput};
use hypode::simulator::{simulate_closed_loop, Loop, SimError, SimTrace};
use hypode::verify::verify;

mod plot;

#[derive(Parser)]
#[command(name = "hypode", version, about = "Backstepping compensator design for hyperbolic PDE-ODE systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct Overrides {
    /// Number of grid cells, overriding the configuration.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Seed of the pole-placement parameter draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a plant configuration.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compute controller and observer gains.
    Design {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Simulate the output-feedback closed loop with a stored design.
    Simulate {
        config: PathBuf,
        #[arg(short, long)]
        design: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write SVG plots of the norm series.
        #[arg(long)]
        plots: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-check a stored design against its configuration.
    Verify {
        config: PathBuf,
        #[arg(short, long)]
        design: PathBuf,
        /// Write the check table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Exit 1: a check or design stage failed. Exit 2: unusable input.
enum Failure {
    Check(String),
    Input(String),
}

type CmdResult = Result<(), Failure>;

fn input<E: std::fmt::Display>(what: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Input(format!("{}: {e}", what.display()))
}

fn load(path: &Path, o: Overrides) -> Result<Config, Failure> {
    let mut cfg = load_config(path).map_err(input(path))?;
    if let Some(n) = o.grid {
        cfg.design.grid = n;
    }
    if let Some(s) = o.seed {
        cfg.design.seed = s;
    }
    Ok(cfg)
}

fn load_design(path: &Path) -> Result<DesignOutput, Failure> {
    let text = fs::read_to_string(path).map_err(input(path))?;
    DesignOutput::from_json(&text).map_err(input(path))
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Check(format!("cannot write {}: {e}", path.display())))
}

fn cmd_validate(path: &Path, o: Overrides) -> CmdResult {
    let cfg = load(path, o)?;
    let grid = cfg.design.grid().map_err(|e| Failure::Check(e.to_string()))?;
    let report = validate_plant(&cfg.plant, &grid);
    print!("{report}");
    if let Err(e) = cfg.design.check(&cfg.plant) {
        println!("violation: {e}");
        return Err(Failure::Check("configuration is not admissible".into()));
    }
    if report.is_valid() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{} violation(s)", report.violations.len())))
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("design");
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_design(path: &Path, out: &Path, o: Overrides) -> CmdResult {
    let cfg = load(path, o)?;
    let d = run_design(&cfg.plant, &cfg.design).map_err(|e| Failure::Check(format!("{}: failed: {e}", e.stage())))?;
    let output = DesignOutput::build(&cfg, &d).map_err(|e| Failure::Check(format!("analysis: failed: {e}")))?;
    write(out, &output.to_json())?;
    write(&sibling(out, "gains.csv"), &output.gains_csv())?;
    write(&sibling(out, "observer.csv"), &output.observer_gain_csv())?;
    write(&sibling(out, "kernel.csv"), &d.kernel.to_csv())?;
    for g in &output.diagnostics.gates {
        println!("{} {}: {:.3e} (limit {:.1e})", if g.pass { "PASS" } else { "FAIL" }, g.name, g.value, g.limit);
    }
    let report = |s: &hypode::output::SpectrumReport| {
        s.achieved.iter().map(|p| format!("{:.6}{:+.6}i", p[0], p[1])).collect::<Vec<_>>().join(", ")
    };
    println!("eig(F - BK): {}", report(&output.controller.spectrum));
    println!("eig(F - L_xi E1'Gamma(0)): {}", report(&output.observer.spectrum));
    if output.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = output.diagnostics.gates.iter().filter(|g| !g.pass).map(|g| g.name.as_str()).collect();
        Err(Failure::Check(format!("residual gates failed: {}", failed.join(", "))))
    }
}

fn cmd_simulate(path: &Path, design: &Path, out: &Path, plots: bool, o: Overrides) -> CmdResult {
    let cfg = load(path, o)?;
    let stored = load_design(design)?;
    if stored.provenance.config_sha256 != config_hash(&cfg) {
        return Err(Failure::Check(format!(
            "{} was not computed from this configuration",
            design.display()
        )));
    }
    let sp = cfg.plant.sample(&stored.grid());
    let gains = stored.feedback_gains();
    let observer = stored.observer_gains();
    let trace = match simulate_closed_loop(&cfg.plant, &sp, Loop::Output(&gains, &observer), &cfg.simulation) {
        Ok(t) => t,
        Err(SimError::BlowUp { t_last }) => {
            return Err(Failure::Check(format!("simulation blew up, last finite time t = {t_last}")))
        }
        Err(e) => return Err(Failure::Input(e.to_string())),
    };
    fs::create_dir_all(out).map_err(|e| Failure::Check(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("trace.csv"), &trace.to_csv())?;
    write(&out.join("snapshots.csv"), &trace.snapshots_csv())?;
    if plots {
        plot::norms(&out.join("norms.svg"), &trace).map_err(|e| Failure::Check(format!("plot: {e}")))?;
    }
    println!(
        "{} samples up to t = {}; peaks: |eps_xi| {:.3e}, |xi| {:.3e}, sup|x| {:.3e}",
        trace.len(),
        trace.t.last().copied().unwrap_or(0.0),
        SimTrace::peak(&trace.eps_xi_norm),
        SimTrace::peak(&trace.xi_norm),
        SimTrace::peak(&trace.x_sup)
    );
    Ok(())
}

fn cmd_verify(path: &Path, design: &Path, csv: Option<&Path>, o: Overrides) -> CmdResult {
    let cfg = load(path, o)?;
    let stored = load_design(design)?;
    let report = verify(&cfg, &stored).map_err(|e| Failure::Check(format!("{}: failed: {e}", e.stage())))?;
    print!("{report}");
    if let Some(p) = csv {
        write(p, &report.to_csv())?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failed().map(|c| c.name.as_str()).collect();
        Err(Failure::Check(format!("failed checks: {}", names.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { config, overrides } => cmd_validate(config, *overrides),
        Command::Design { config, out, overrides } => cmd_design(config, out, *overrides),
        Command::Simulate { config, design, out, plots, overrides } => {
            cmd_simulate(config, design, out, *plots, *overrides)
        }
        Command::Verify { config, design, csv, overrides } => cmd_verify(config, design, csv.as_deref(), *overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
