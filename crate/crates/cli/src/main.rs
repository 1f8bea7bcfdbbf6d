use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use subrq::formulas::formula_battery;
use subrq::mane::SamplerConfig;
use subrq_cli::{report_text, run_scenario, scan_stats, write_outputs, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "subrq", version, about = "Orbit normal forms, return maps and controllability checks for co-rank-one distributions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every task of a scenario file and write report.json/report.txt.
    Run {
        file: PathBuf,
        /// Worker threads for the parallel parts of each task.
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Largest power checked for roots of unity in return maps.
        #[arg(long, default_value_t = 12)]
        n_max: usize,
        /// Distance to 1 below which a power of an eigenvalue counts as resonant.
        #[arg(long, default_value_t = 1e-6)]
        root_tol: f64,
    },
    /// Bracket-span statistics over random curves with one random null direction.
    Scan {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 5)]
        depth: usize,
        /// Constant null direction.
        #[arg(long)]
        flat: bool,
        #[arg(long)]
        threads: Option<usize>,
        /// Write the statistics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every closed-form coefficient against brute-force matrix arithmetic.
    FormulaVerify {
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn threads(n: Option<usize>) -> Result<(), String> {
    if let Some(n) = n {
        if n == 0 {
            return Err("--threads must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run {
            file,
            threads: n,
            out,
            n_max,
            root_tol,
        } => {
            if let Err(e) = threads(n) {
                return usage(e);
            }
            if !(root_tol > 0.0) || n_max == 0 {
                return usage("--n-max and --root-tol must be positive");
            }
            let sc = match Scenario::from_path(&file) {
                Ok(sc) => sc,
                Err(e) => return usage(format!("{}: {e}", file.display())),
            };
            let output = run_scenario(&sc, &RunOptions { n_max, root_tol });
            if let Err(e) = write_outputs(&out, &output) {
                eprintln!("error: writing reports to {}: {e}", out.display());
                return ExitCode::from(1);
            }
            print!("{}", report_text(&output.report));
            if output.report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Cmd::Scan {
            dim,
            samples,
            seed,
            order,
            delta,
            depth,
            flat,
            threads: n,
            out,
        } => {
            if let Err(e) = threads(n) {
                return usage(e);
            }
            if dim < 2 {
                return usage("--dim must be at least 2");
            }
            if !(delta > 0.0) || depth == 0 {
                return usage("--delta and --depth must be positive");
            }
            let cfg = SamplerConfig { order, delta, depth, scale: 1.0 };
            let stats = match scan_stats(dim, samples, seed, &cfg, flat) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let mut body = serde_json::to_string_pretty(&stats).expect("stats serialize");
            body.push('\n');
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, &body) {
                        eprintln!("error: writing {}: {e}", path.display());
                        return ExitCode::from(1);
                    }
                    println!("{}/{} samples pass the span test", stats.passes, stats.samples);
                }
                None => print!("{body}"),
            }
            ExitCode::SUCCESS
        }
        Cmd::FormulaVerify { dim, trials, seed } => {
            if dim < 2 {
                return usage("--dim must be at least 2");
            }
            let checks = match formula_battery(dim, trials, seed) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            println!("{:<28} {:>4} {:>12} {:>10}  result", "formula", "d", "max error", "tolerance");
            for c in &checks {
                println!(
                    "{:<28} {:>4} {:>12.3e} {:>10.0e}  {}",
                    c.name,
                    c.dim,
                    c.max_error,
                    c.tolerance,
                    if c.pass { "PASS" } else { "FAIL" }
                );
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            println!("\n{} of {} checks passed", checks.len() - failed, checks.len());
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
